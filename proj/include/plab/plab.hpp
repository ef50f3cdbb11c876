#pragma once

#include "plab/attention_lens.hpp"
#include "plab/container.hpp"
#include "plab/corpus.hpp"
#include "plab/error.hpp"
#include "plab/experiment.hpp"
#include "plab/hooks.hpp"
#include "plab/metrics.hpp"
#include "plab/model.hpp"
#include "plab/parallel.hpp"
#include "plab/patch.hpp"
#include "plab/prompt.hpp"
#include "plab/svg.hpp"
#include "plab/tensor.hpp"
#include "plab/tokenizer.hpp"
#include "plab/toy_model.hpp"
