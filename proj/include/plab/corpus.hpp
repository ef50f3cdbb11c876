#pragma once

// Multiple-choice question corpora and the S1-S4 correctness partition.
//
// CSV input is headerless `question,A,B,C,D,answer` (RFC 4180 quoting), one
// file per subject as in the public MMLU distribution; the subject is the
// file stem with any _test/_dev/_val suffix removed. JSONL input carries one
// {"id", "subject", "question", "options": [4], "answer": "A".."D"} per line.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "plab/error.hpp"

namespace plab {

struct QuestionRecord {
  std::string id;
  std::string subject;
  std::string question;
  std::array<std::string, 4> options;
  std::size_t answer = 0;

  bool operator==(const QuestionRecord&) const = default;
};

inline char answer_letter(std::size_t index) { return static_cast<char>('A' + index); }

inline std::size_t answer_index(const std::string& letter, const std::string& where) {
  if (letter.size() != 1 || letter[0] < 'A' || letter[0] > 'D') {
    fail(ErrorKind::parse, where + ": bad answer letter '" + letter + "'");
  }
  return static_cast<std::size_t>(letter[0] - 'A');
}

inline std::string question_id(const std::string& subject, std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return subject + "/" + buf;
}

namespace detail {

/// Reads RFC 4180 records. Quoted fields may span lines; each record reports
/// the line it started on.
inline std::vector<std::pair<std::size_t, std::vector<std::string>>> parse_csv(
    const std::string& text, const std::string& source) {
  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  std::size_t line = 1;
  std::size_t row_line = 1;
  const auto end_row = [&] {
    fields.push_back(std::move(field));
    field.clear();
    if (!(fields.size() == 1 && fields[0].empty() && !field_started)) {
      rows.emplace_back(row_line, std::move(fields));
    }
    fields.clear();
    field_started = false;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"' && field.empty()) {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (c == '\r') {
      continue;
    } else if (c == '\n') {
      end_row();
      row_line = ++line;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) fail(ErrorKind::parse, source + ":" + std::to_string(row_line) + ": unterminated quote");
  if (!field.empty() || !fields.empty() || field_started) end_row();
  return rows;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string subject_from_stem(std::string stem) {
  for (const char* suffix : {"_test", "_dev", "_val"}) {
    const std::string sfx = suffix;
    if (stem.size() > sfx.size() && stem.ends_with(sfx)) return stem.substr(0, stem.size() - sfx.size());
  }
  return stem;
}

}  // namespace detail

inline std::vector<QuestionRecord> parse_questions_csv(const std::string& text,
                                                       const std::string& subject,
                                                       const std::string& source) {
  std::vector<QuestionRecord> out;
  for (auto& [line, fields] : detail::parse_csv(text, source)) {
    const std::string where = source + ":" + std::to_string(line);
    if (fields.size() != 6) {
      fail(ErrorKind::parse, where + ": expected 6 columns (question,A,B,C,D,answer), got " +
                                 std::to_string(fields.size()));
    }
    QuestionRecord q;
    q.subject = subject;
    q.id = question_id(subject, out.size());
    q.question = std::move(fields[0]);
    for (std::size_t k = 0; k < 4; ++k) q.options[k] = std::move(fields[k + 1]);
    q.answer = answer_index(fields[5], where);
    out.push_back(std::move(q));
  }
  return out;
}

inline std::vector<QuestionRecord> parse_questions_jsonl(const std::string& text,
                                                         const std::string& source) {
  std::vector<QuestionRecord> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      QuestionRecord q;
      q.subject = j.at("subject").get<std::string>();
      q.id = j.contains("id") ? j["id"].get<std::string>() : question_id(q.subject, out.size());
      q.question = j.at("question").get<std::string>();
      const auto opts = j.at("options").get<std::vector<std::string>>();
      if (opts.size() != 4) {
        fail(ErrorKind::parse, where + ": expected 4 options, got " + std::to_string(opts.size()));
      }
      std::copy(opts.begin(), opts.end(), q.options.begin());
      const auto& a = j.at("answer");
      if (a.is_number_unsigned() && a.get<std::size_t>() < 4) {
        q.answer = a.get<std::size_t>();
      } else {
        q.answer = answer_index(a.is_string() ? a.get<std::string>() : a.dump(), where);
      }
      out.push_back(std::move(q));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, where + ": " + e.what());
    }
  }
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::parse, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// Loads a .csv file, a .jsonl file, or a directory of per-subject .csv files
/// (read in file-name order).
inline std::vector<QuestionRecord> load_questions(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<QuestionRecord> out;
    for (const auto& f : files) {
      auto part = parse_questions_csv(read_text_file(f),
                                      detail::subject_from_stem(f.stem().string()), f.string());
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  if (path.extension() == ".jsonl") return parse_questions_jsonl(read_text_file(path), path.string());
  return parse_questions_csv(read_text_file(path),
                             detail::subject_from_stem(path.stem().string()), path.string());
}

inline std::string questions_to_jsonl(const std::vector<QuestionRecord>& qs) {
  std::string out;
  for (const auto& q : qs) {
    nlohmann::json j = {{"id", q.id},
                        {"subject", q.subject},
                        {"question", q.question},
                        {"options", q.options},
                        {"answer", std::string(1, answer_letter(q.answer))}};
    out += j.dump() + "\n";
  }
  return out;
}

/// CSV text for the questions of one subject, in input order.
inline std::string questions_to_csv(const std::vector<QuestionRecord>& qs) {
  std::string out;
  for (const auto& q : qs) {
    out += detail::csv_field(q.question);
    for (const auto& o : q.options) out += "," + detail::csv_field(o);
    out += ",";
    out += answer_letter(q.answer);
    out += "\n";
  }
  return out;
}

/// Writes one `<subject>_test.csv` per subject into `dir`.
inline void write_questions_csv_dir(const std::vector<QuestionRecord>& qs,
                                    const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::map<std::string, std::vector<QuestionRecord>> by_subject;
  for (const auto& q : qs) by_subject[q.subject].push_back(q);
  for (const auto& [subject, group] : by_subject) {
    std::ofstream f(dir / (subject + "_test.csv"), std::ios::binary | std::ios::trunc);
    f << questions_to_csv(group);
  }
}

struct SubsetPartition {
  std::vector<std::string> s1;  // both correct
  std::vector<std::string> s2;  // both wrong
  std::vector<std::string> s3;  // id1 correct, id2 wrong
  std::vector<std::string> s4;  // id2 correct, id1 wrong

  std::size_t total() const { return s1.size() + s2.size() + s3.size() + s4.size(); }
};

/// Splits questions by the correctness pattern of an identity pair. Both maps
/// must cover the same question ids; outputs are sorted by id.
inline SubsetPartition partition_subsets(const std::map<std::string, bool>& id1_correct,
                                         const std::map<std::string, bool>& id2_correct) {
  if (id1_correct.size() != id2_correct.size()) {
    fail(ErrorKind::input, "partition: question sets differ in size");
  }
  SubsetPartition p;
  for (const auto& [qid, a] : id1_correct) {
    auto it = id2_correct.find(qid);
    if (it == id2_correct.end()) fail(ErrorKind::input, "partition: question " + qid + " missing for ID2");
    const bool b = it->second;
    (a ? (b ? p.s1 : p.s3) : (b ? p.s4 : p.s2)).push_back(qid);
  }
  return p;
}

}  // namespace plab
