#pragma once

#include "medvill/error.hpp"
#include "medvill/image.hpp"
#include "medvill/params.hpp"
#include "medvill/rng.hpp"
#include "medvill/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bitset>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace medvill {

using LabelVector = std::array<int, kFindingCount>;

inline std::string label_key(const LabelVector& labels) {
  std::string key;
  for (int b : labels) key.push_back(b ? '1' : '0');
  return key;
}

inline int positive_count(const LabelVector& labels) {
  int n = 0;
  for (int b : labels) n += b;
  return n;
}

/// One synthetic finding: surface forms, glyph and image region.
struct Finding {
  int index = 0;
  std::string name;          // canonical (expanded) surface form
  std::string abbreviation;  // short surface form
  std::array<std::string, 6> glyph;  // 6x6 pattern, '#' = ink
  int region_row = 0;
  int region_col = 0;
  std::string region_name;
  double marginal = 0.05;

  std::vector<std::string> synonyms() const { return {name, abbreviation}; }
};

struct FindingSpec {
  std::vector<Finding> findings;
  int image_size = 32;
  /// Regions are cells of a 4 x 4 grid over the image.
  static constexpr int kRegionGrid = 4;

  int cell_size() const { return image_size / kRegionGrid; }
  int glyph_scale() const { return image_size / 32; }

  /// Throws DataError when the spec breaks one of its invariants.
  void validate() const {
    if (findings.size() != static_cast<std::size_t>(kFindingCount)) throw DataError("finding spec needs exactly 14 findings");
    if (image_size < 32 || image_size % 32 != 0) throw DataError("synthetic images need a side that is a multiple of 32");
    std::set<std::string> forms;
    std::set<std::pair<int, int>> cells;
    for (std::size_t i = 0; i < findings.size(); ++i) {
      const Finding& f = findings[i];
      if (f.index != static_cast<int>(i)) throw DataError("finding indices must be 0..13 in order");
      for (const auto& s : f.synonyms()) {
        if (!forms.insert(s).second) throw DataError("surface form '" + s + "' is not unique");
      }
      if (!cells.insert({f.region_row, f.region_col}).second) throw DataError("finding regions overlap");
      if (f.marginal < 0.0 || f.marginal > 1.0) throw DataError("finding marginal outside [0, 1]");
    }
  }

  static FindingSpec standard(int image_size = 32) {
    struct Row {
      const char* name;
      const char* abbr;
      double marginal;
      std::array<std::string, 6> glyph;
    };
    // Marginals skew from ~13% down to ~1%.
    const std::array<Row, kFindingCount> rows{{
        {"atelectasis", "atx", 0.10, {"######", "######", "######", "######", "######", "######"}},
        {"cardiomegaly", "cmg", 0.11, {"######", "#....#", "#....#", "#....#", "#....#", "######"}},
        {"consolidation", "consol", 0.06, {"..##..", "..##..", "######", "######", "..##..", "..##.."}},
        {"pulmonary edema", "pulm edema", 0.07, {"#....#", ".#..#.", "..##..", "..##..", ".#..#.", "#....#"}},
        {"enlarged cardiomediastinum", "enl cm", 0.05, {"......", "......", "######", "######", "......", "......"}},
        {"fracture", "fx", 0.02, {"..##..", "..##..", "..##..", "..##..", "..##..", "..##.."}},
        {"lung lesion", "lung les", 0.03, {"##....", "##....", "..##..", "..##..", "....##", "....##"}},
        {"lung opacity", "lung opac", 0.12, {"....##", "....##", "..##..", "..##..", "##....", "##...."}},
        {"pleural effusion", "pl effusion", 0.09, {"..##..", ".####.", "######", "######", ".####.", "..##.."}},
        {"pleural thickening", "pl thickening", 0.012, {"......", "..##..", ".#..#.", "#....#", "######", "......"}},
        {"pneumonia", "pna", 0.012, {"#.#.#.", ".#.#.#", "#.#.#.", ".#.#.#", "#.#.#.", ".#.#.#"}},
        {"pneumothorax", "ptx", 0.04, {"##....", "##....", "##....", "##....", "######", "######"}},
        {"endotracheal tube", "et tube", 0.13, {"######", "######", "..##..", "..##..", "..##..", "..##.."}},
        {"hiatal hernia", "hh", 0.02, {"##..##", "##..##", "......", "......", "##..##", "##..##"}},
    }};
    const std::array<const char*, 4> row_names{"apical", "upper", "lower", "basal"};
    const std::array<const char*, 4> col_names{"far left", "left", "right", "far right"};
    FindingSpec spec;
    spec.image_size = image_size;
    for (int i = 0; i < kFindingCount; ++i) {
      Finding f;
      f.index = i;
      f.name = rows[static_cast<std::size_t>(i)].name;
      f.abbreviation = rows[static_cast<std::size_t>(i)].abbr;
      f.marginal = rows[static_cast<std::size_t>(i)].marginal;
      f.glyph = rows[static_cast<std::size_t>(i)].glyph;
      f.region_row = i / kRegionGrid;
      f.region_col = i % kRegionGrid;
      f.region_name = std::string(col_names[static_cast<std::size_t>(f.region_col)]) + " " +
                      row_names[static_cast<std::size_t>(f.region_row)] + " zone";
      spec.findings.push_back(std::move(f));
    }
    spec.validate();
    return spec;
  }
};

enum class Split { Train, Valid, Test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

struct Study {
  std::string id;
  ImageGrid image;
  std::string report;
  LabelVector labels{};
  Split split = Split::Train;
};

struct VqaItem {
  std::string study_id;
  std::string question;
  std::string answer;
  bool closed = true;
};

namespace corpus_detail {

inline const std::vector<std::string>& positive_templates() {
  static const std::vector<std::string> t{"{} is present .", "there is {} .", "findings consistent with {} .",
                                          "{} in the {region} .", "stable {} ."};
  return t;
}

inline const std::string kNormalSentence = "no acute cardiopulmonary process .";

inline std::string fill(const std::string& tmpl, const std::string& term, const std::string& region) {
  std::string out = tmpl;
  if (auto p = out.find("{region}"); p != std::string::npos) out.replace(p, 8, region);
  if (auto p = out.find("{}"); p != std::string::npos) out.replace(p, 2, term);
  return out;
}

}  // namespace corpus_detail

/// Draws a label vector from the per-finding marginals.
inline LabelVector sample_labels(const FindingSpec& spec, Rng& rng) {
  LabelVector labels{};
  for (const auto& f : spec.findings) labels[static_cast<std::size_t>(f.index)] = rng.bernoulli(f.marginal) ? 1 : 0;
  return labels;
}

/// Renders the glyphs of the present findings into their regions with
/// bounded jitter and additive noise; intensities are 8-bit quantised.
inline ImageGrid render_image(const FindingSpec& spec, const LabelVector& labels, Rng& rng) {
  const int size = spec.image_size;
  const int scale = spec.glyph_scale();
  const int cell = spec.cell_size();
  const int glyph_px = 6 * scale;
  ImageGrid img(size, size, 0.0);
  const bool any = positive_count(labels) > 0;
  for (auto& p : img.pixels) p = any ? 0.15 + rng.normal(0.0, 0.04) : 0.15;
  for (const auto& f : spec.findings) {
    if (!labels[static_cast<std::size_t>(f.index)]) continue;
    const int oy = f.region_row * cell + rng.uniform_int(0, cell - glyph_px);
    const int ox = f.region_col * cell + rng.uniform_int(0, cell - glyph_px);
    for (int gy = 0; gy < glyph_px; ++gy)
      for (int gx = 0; gx < glyph_px; ++gx)
        if (f.glyph[static_cast<std::size_t>(gy / scale)][static_cast<std::size_t>(gx / scale)] == '#')
          img.at(oy + gy, ox + gx) = 0.8 + rng.normal(0.0, 0.04);
  }
  for (auto& p : img.pixels) p = quantize_intensity(p);
  return img;
}

/// Report text: one templated sentence per present finding (index order), or
/// the fixed normal sentence when none is present.
inline std::string compose_report(const FindingSpec& spec, const LabelVector& labels, Rng& rng) {
  using namespace corpus_detail;
  std::vector<std::string> sentences;
  auto pick_form = [&](const Finding& f) { return rng.bernoulli(0.5) ? f.name : f.abbreviation; };
  for (const auto& f : spec.findings) {
    if (!labels[static_cast<std::size_t>(f.index)]) continue;
    const auto& t = positive_templates()[rng.index(positive_templates().size())];
    sentences.push_back(fill(t, pick_form(f), f.region_name));
  }
  if (sentences.empty()) sentences.push_back(kNormalSentence);
  std::string out;
  for (const auto& s : sentences) {
    if (!out.empty()) out.push_back(' ');
    out += s;
  }
  return out;
}

/// Deterministic study from (spec, label draw, rng).
inline Study gen_study(const FindingSpec& spec, Rng& rng, std::string id = "study", Split split = Split::Train) {
  Study s;
  s.id = std::move(id);
  s.split = split;
  s.labels = sample_labels(spec, rng);
  s.image = render_image(spec, s.labels, rng);
  s.report = compose_report(spec, s.labels, rng);
  return s;
}

/// Study with a fixed label vector.
inline Study gen_study_with_labels(const FindingSpec& spec, const LabelVector& labels, Rng& rng,
                                   std::string id = "study", Split split = Split::Train) {
  Study s;
  s.id = std::move(id);
  s.split = split;
  s.labels = labels;
  s.image = render_image(spec, s.labels, rng);
  s.report = compose_report(spec, s.labels, rng);
  return s;
}

/// Bit i is set iff a surface form of finding i occurs as a token run that is
/// not preceded by "no" or "without" within two tokens of the same sentence.
inline LabelVector rule_labeler(std::string_view report, const FindingSpec& spec) {
  const std::vector<std::string> words = split_words(report);
  LabelVector labels{};
  std::vector<std::pair<int, std::vector<std::string>>> forms;
  for (const auto& f : spec.findings)
    for (const auto& s : f.synonyms()) forms.emplace_back(f.index, split_words(s));
  std::size_t sentence_start = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] == "." || words[i] == "?" || words[i] == "!") {
      sentence_start = i + 1;
      continue;
    }
    for (const auto& [index, form] : forms) {
      if (i + form.size() > words.size() || !std::equal(form.begin(), form.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
        continue;
      }
      bool negated = false;
      for (std::size_t back = 1; back <= 2 && i >= sentence_start + back; ++back) {
        const std::string& w = words[i - back];
        negated = negated || w == "no" || w == "without";
      }
      if (!negated) labels[static_cast<std::size_t>(index)] = 1;
    }
  }
  return labels;
}

/// Replaces every abbreviation with its expansion and vice versa.
inline std::string swap_synonyms(std::string_view report, const FindingSpec& spec) {
  const std::vector<std::string> words = split_words(report);
  std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> pairs;
  for (const auto& f : spec.findings) {
    pairs.emplace_back(split_words(f.name), split_words(f.abbreviation));
    pairs.emplace_back(split_words(f.abbreviation), split_words(f.name));
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < words.size();) {
    bool replaced = false;
    for (const auto& [from, to] : pairs) {
      if (i + from.size() <= words.size() && std::equal(from.begin(), from.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
        out.insert(out.end(), to.begin(), to.end());
        i += from.size();
        replaced = true;
        break;
      }
    }
    if (!replaced) out.push_back(words[i++]);
  }
  std::string text;
  for (const auto& w : out) {
    if (!text.empty()) text.push_back(' ');
    text += w;
  }
  return text;
}

/// Closed items ask whether a finding is present; open items ask which
/// finding occupies a region (answer: canonical name or "none").
inline VqaItem gen_vqa(const Study& study, const FindingSpec& spec, Rng& rng) {
  VqaItem item;
  item.study_id = study.id;
  const Finding& f = spec.findings[rng.index(spec.findings.size())];
  const bool present = study.labels[static_cast<std::size_t>(f.index)] != 0;
  if (rng.bernoulli(0.5)) {
    item.closed = true;
    item.question = "is " + f.name + " present ?";
    item.answer = present ? "yes" : "no";
  } else {
    item.closed = false;
    item.question = "which finding is present in the " + f.region_name + " ?";
    item.answer = present ? f.name : "none";
  }
  return item;
}

struct SplitCounts {
  int train = 2000;
  int valid = 200;
  int test = 200;
};

inline constexpr int kVqaPerStudy = 2;

struct Corpus {
  std::vector<Study> studies;
  std::vector<VqaItem> vqa;

  std::vector<const Study*> split(Split s) const {
    std::vector<const Study*> out;
    for (const auto& st : studies)
      if (st.split == s) out.push_back(&st);
    return out;
  }
};

/// Whole corpus as a pure function of (counts, seed, spec). The training
/// split is re-drawn until it holds at least two distinct label sets.
inline Corpus gen_corpus(const SplitCounts& counts, std::uint64_t seed, const FindingSpec& spec) {
  spec.validate();
  if (counts.train < 2) throw DataError("need at least 2 training studies to guarantee two distinct label sets");
  if (counts.valid < 0 || counts.test < 0) throw DataError("split counts must be non-negative");
  Corpus corpus;
  const std::array<std::pair<Split, int>, 3> plan{{{Split::Train, counts.train}, {Split::Valid, counts.valid}, {Split::Test, counts.test}}};
  int global = 0;
  for (const auto& [split, n] : plan) {
    for (int attempt = 0;; ++attempt) {
      std::vector<Study> part;
      std::set<std::string> sets;
      for (int i = 0; i < n; ++i) {
        Rng rng(seed, "study:" + std::string(to_string(split)) + ":" + std::to_string(attempt), static_cast<std::uint64_t>(i));
        char id[32];
        std::snprintf(id, sizeof id, "study_%06d", global + i);
        part.push_back(gen_study(spec, rng, id, split));
        sets.insert(label_key(part.back().labels));
      }
      if (split != Split::Train || sets.size() >= 2) {
        for (auto& s : part) corpus.studies.push_back(std::move(s));
        break;
      }
      if (attempt > 1000) throw DataError("could not draw two distinct label sets");
    }
    global += n;
  }
  for (std::size_t i = 0; i < corpus.studies.size(); ++i) {
    for (int q = 0; q < kVqaPerStudy; ++q) {
      Rng rng(seed, "vqa", i * kVqaPerStudy + static_cast<std::size_t>(q));
      corpus.vqa.push_back(gen_vqa(corpus.studies[i], spec, rng));
    }
  }
  return corpus;
}

inline std::string image_relpath(const std::string& id) { return "images/" + id + ".pgm"; }

/// Vocabulary over training reports and training questions.
inline Vocabulary build_vocabulary(const Corpus& corpus) {
  std::set<std::string> train_ids;
  std::vector<std::string> texts;
  for (const auto& s : corpus.studies) {
    if (s.split != Split::Train) continue;
    texts.push_back(s.report);
    train_ids.insert(s.id);
  }
  for (const auto& q : corpus.vqa)
    if (train_ids.count(q.study_id)) texts.push_back(q.question);
  return Vocabulary::build(texts);
}

/// Sorted answers seen on training VQA items.
inline std::vector<std::string> build_answer_table(const Corpus& corpus) {
  std::set<std::string> train_ids;
  for (const auto& s : corpus.studies)
    if (s.split == Split::Train) train_ids.insert(s.id);
  std::set<std::string> answers;
  for (const auto& q : corpus.vqa)
    if (train_ids.count(q.study_id)) answers.insert(q.answer);
  return {answers.begin(), answers.end()};
}

inline std::string manifest_line(const Study& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["image"] = image_relpath(s.id);
  j["report"] = s.report;
  j["labels"] = std::vector<int>(s.labels.begin(), s.labels.end());
  j["split"] = std::string(to_string(s.split));
  return j.dump();
}

inline std::string vqa_line(const VqaItem& q) {
  nlohmann::ordered_json j;
  j["id"] = q.study_id;
  j["image"] = image_relpath(q.study_id);
  j["question"] = q.question;
  j["answer"] = q.answer;
  j["qtype"] = q.closed ? "closed" : "open";
  return j.dump();
}

namespace corpus_detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace corpus_detail

/// Writes manifest.jsonl, vqa.jsonl, vocab.tsv, answers.txt and images/*.pgm.
/// Every study is checked against the rule labeler before anything is written.
inline Corpus gen_dataset(const std::filesystem::path& dir, const SplitCounts& counts, std::uint64_t seed,
                          const FindingSpec& spec) {
  Corpus corpus = gen_corpus(counts, seed, spec);
  for (const auto& s : corpus.studies) {
    if (rule_labeler(s.report, spec) != s.labels) throw DataError("labeler round-trip failed for " + s.id);
  }
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw DataError("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::string manifest, vqa;
  for (const auto& s : corpus.studies) {
    manifest += manifest_line(s) + "\n";
    write_pgm((dir / image_relpath(s.id)).string(), s.image);
  }
  for (const auto& q : corpus.vqa) vqa += vqa_line(q) + "\n";
  corpus_detail::write_text(dir / "manifest.jsonl", manifest);
  corpus_detail::write_text(dir / "vqa.jsonl", vqa);
  corpus_detail::write_text(dir / "vocab.tsv", build_vocabulary(corpus).serialize());
  std::string answers;
  for (const auto& a : build_answer_table(corpus)) answers += a + "\n";
  corpus_detail::write_text(dir / "answers.txt", answers);
  return corpus;
}

/// Everything a command needs from a corpus directory.
struct DataBundle {
  Corpus corpus;
  Vocabulary vocab;
  std::vector<std::string> answers;
};

inline DataBundle load_dataset(const std::filesystem::path& dir) {
  DataBundle data;
  std::istringstream manifest(corpus_detail::read_text(dir / "manifest.jsonl"));
  std::string line;
  int line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Study s;
      s.id = j.at("id").get<std::string>();
      s.report = j.at("report").get<std::string>();
      const auto labels = j.at("labels").get<std::vector<int>>();
      if (labels.size() != static_cast<std::size_t>(kFindingCount)) throw DataError("expected 14 labels");
      std::copy(labels.begin(), labels.end(), s.labels.begin());
      s.split = parse_split(j.at("split").get<std::string>());
      s.image = read_pgm((dir / j.at("image").get<std::string>()).string());
      data.corpus.studies.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (std::filesystem::exists(dir / "vqa.jsonl")) {
    std::istringstream vqa(corpus_detail::read_text(dir / "vqa.jsonl"));
    line_no = 0;
    while (std::getline(vqa, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        VqaItem q;
        q.study_id = j.at("id").get<std::string>();
        q.question = j.at("question").get<std::string>();
        q.answer = j.at("answer").get<std::string>();
        q.closed = j.at("qtype").get<std::string>() == "closed";
        data.corpus.vqa.push_back(std::move(q));
      } catch (const nlohmann::json::exception& e) {
        throw DataError("vqa line " + std::to_string(line_no) + ": " + e.what());
      }
    }
  }
  data.vocab = Vocabulary::load((dir / "vocab.tsv").string());
  std::istringstream answers(corpus_detail::read_text(dir / "answers.txt"));
  while (std::getline(answers, line))
    if (!line.empty()) data.answers.push_back(line);
  if (data.answers.empty()) throw DataError("empty answer table");
  return data;
}

}  // namespace medvill
