#!/usr/bin/env python3
"""Convert a Hugging Face Llama-family checkpoint directory to a PLABMDL1 file.

Reads config.json and *.safetensors from the directory; tokenizer.json, when
present, is embedded in the model metadata so the CLI needs no --tokenizer.

Name mapping (HF Linear weights are [out, in]; plab stores x . W, so [in, out]):

  model.embed_tokens.weight                       tok_embeddings       as is
  model.layers.L.input_layernorm.weight           layers.L.attn_norm   [1, d]
  model.layers.L.self_attn.{q,k,v,o}_proj.weight  layers.L.w{q,k,v,o}  transposed
  model.layers.L.post_attention_layernorm.weight  layers.L.ffn_norm    [1, d]
  model.layers.L.mlp.{gate,up,down}_proj.weight   layers.L.w_{gate,up,down}  transposed
  model.norm.weight                               norm                 [1, d]
  lm_head.weight                                  output               transposed

HF checkpoints already store q/k rows in rotate-half order, which is what the
runtime expects. Original Meta consolidated.*.pth files use interleaved pairs
and must go through the HF conversion script first.
"""

import argparse
import json
import pathlib
import struct
import sys

import numpy as np
from safetensors import safe_open

MAGIC = b"PLABMDL1"
ALIGN = 64


def align_up(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def plab_config(hf):
    d = hf["hidden_size"]
    heads = hf["num_attention_heads"]
    # newer transformers releases fold rope_theta and rope_scaling into rope_parameters
    rope = hf.get("rope_parameters") or {}
    cfg = {
        "n_layers": hf["num_hidden_layers"],
        "d_model": d,
        "n_heads": heads,
        "n_kv_heads": hf.get("num_key_value_heads", heads),
        "head_dim": hf.get("head_dim") or d // heads,
        "d_ff": hf["intermediate_size"],
        "vocab_size": hf["vocab_size"],
        "rope_theta": float(rope.get("rope_theta", hf.get("rope_theta", 10000.0))),
        "norm_eps": float(hf.get("rms_norm_eps", 1e-5)),
        "tied_embeddings": bool(hf.get("tie_word_embeddings", False)),
    }
    scaling = hf.get("rope_scaling") or rope
    kind = scaling.get("rope_type", scaling.get("type", "default"))
    if kind != "default":
        if kind != "llama3":
            sys.exit(f"unsupported rope_scaling type {kind!r}")
        cfg["rope_scaling"] = {
            "factor": float(scaling["factor"]),
            "low_freq_factor": float(scaling["low_freq_factor"]),
            "high_freq_factor": float(scaling["high_freq_factor"]),
            "original_max_position": float(scaling["original_max_position_embeddings"]),
        }
    return cfg


def load_tensors(src):
    files = sorted(src.glob("*.safetensors"))
    if not files:
        sys.exit(f"no .safetensors files in {src}")
    out = {}
    for f in files:
        # framework="pt" so bf16 shards load; numpy has no bfloat16
        with safe_open(f, framework="pt") as st:
            for name in st.keys():
                out[name] = st.get_tensor(name).float().numpy()
    return out


def mapped_tensors(hf_tensors, cfg):
    def take(name):
        if name not in hf_tensors:
            sys.exit(f"checkpoint has no tensor {name}")
        return hf_tensors[name]

    def row(v):
        return v.reshape(1, -1)

    t = {"tok_embeddings": take("model.embed_tokens.weight"), "norm": row(take("model.norm.weight"))}
    if not cfg["tied_embeddings"]:
        t["output"] = take("lm_head.weight").T
    for l in range(cfg["n_layers"]):
        hf = f"model.layers.{l}."
        p = f"layers.{l}."
        t[p + "attn_norm"] = row(take(hf + "input_layernorm.weight"))
        t[p + "ffn_norm"] = row(take(hf + "post_attention_layernorm.weight"))
        for x in "qkvo":
            t[p + "w" + x] = take(f"{hf}self_attn.{x}_proj.weight").T
        for x in ("gate", "up", "down"):
            t[p + "w_" + x] = take(f"{hf}mlp.{x}_proj.weight").T
    return {k: np.ascontiguousarray(v, dtype="<f4") for k, v in t.items()}


def write_container(path, cfg, tensors, metadata):
    table, offset = {}, 0
    for name in sorted(tensors):
        a = tensors[name]
        table[name] = {"dtype": "f32", "shape": list(a.shape), "offset": offset, "byte_len": a.nbytes}
        offset = align_up(offset + a.nbytes)
    manifest = json.dumps({"config": cfg, "tensors": table, "metadata": metadata}).encode()
    header = MAGIC + struct.pack("<I", len(manifest)) + manifest
    with open(path, "wb") as f:
        f.write(header + b"\0" * (align_up(len(header)) - len(header)))
        for name in sorted(tensors):
            a = tensors[name]
            f.write(a.tobytes())
            f.write(b"\0" * (align_up(a.nbytes) - a.nbytes))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint", type=pathlib.Path, help="HF model directory")
    ap.add_argument("output", type=pathlib.Path, help="destination .plab file")
    ap.add_argument("--no-tokenizer", action="store_true", help="do not embed tokenizer.json")
    args = ap.parse_args()

    cfg = plab_config(json.loads((args.checkpoint / "config.json").read_text()))
    tensors = mapped_tensors(load_tensors(args.checkpoint), cfg)
    metadata = {"generator": {"kind": "hf_convert", "source": args.checkpoint.name}}
    tok = args.checkpoint / "tokenizer.json"
    if tok.exists() and not args.no_tokenizer:
        metadata["tokenizer"] = json.loads(tok.read_text())
    write_container(args.output, cfg, tensors, metadata)
    print(f"wrote {args.output} ({cfg['n_layers']} layers, d_model {cfg['d_model']}, vocab {cfg['vocab_size']})")


if __name__ == "__main__":
    main()
