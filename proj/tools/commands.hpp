#pragma once

#include "medvill/medvill.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace medvill::cli {

namespace fs = std::filesystem;

struct GenDataArgs {
  fs::path out;
  int n_train = 2000;
  int n_valid = 200;
  int n_test = 200;
  std::uint64_t seed = 0;
  int image_size = 32;
};

struct PretrainArgs {
  fs::path config;
  fs::path data;
  fs::path out;
  std::vector<std::string> overrides;
};

struct FinetuneArgs {
  std::string task;
  fs::path ckpt;  // empty: start from a fresh initialisation
  fs::path data;
  fs::path config;
  fs::path out;
  std::vector<std::string> overrides;
};

struct EvalArgs {
  std::string task;
  fs::path ckpt;
  fs::path data;
  fs::path out;
  fs::path compare;
  std::string split = "test";
  std::optional<std::uint64_t> seed;
  int max_len = 40;
};

struct GenerateArgs {
  fs::path ckpt;
  fs::path data;
  std::string split = "test";
  int max_len = 40;
  fs::path out;
};

struct ExportAttnArgs {
  fs::path ckpt;
  fs::path image;
  std::string report;
  fs::path vocab;
  fs::path data;
  int layer = 0;
  int head = 0;
  std::string mask;
  fs::path out;
};

inline void log(const std::string& line) { std::cerr << line << std::endl; }

inline void apply_overrides(RunConfig& run, const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    run.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  run.validate();
}

inline std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

inline int gen_data(const GenDataArgs& a) {
  const FindingSpec spec = FindingSpec::standard(a.image_size);
  const Corpus corpus = gen_dataset(a.out, {a.n_train, a.n_valid, a.n_test}, a.seed, spec);
  log("wrote " + std::to_string(corpus.studies.size()) + " studies and " + std::to_string(corpus.vqa.size()) +
      " VQA items to " + a.out.string());
  return 0;
}

/// Precision dispatch on model.precision.
template <typename F>
int with_precision(int precision, F&& f) {
  if (precision == 64) return f(double{});
  return f(float{});
}

inline int pretrain(const PretrainArgs& a) {
  RunConfig run = RunConfig::load(a.config.string());
  apply_overrides(run, a.overrides);
  const DataBundle data = load_dataset(a.data);
  CheckpointMeta meta{run, data.vocab.size(), static_cast<int>(data.answers.size()), "pretrain:" + run.get("pretrain.scheme")};
  const ModelConfig cfg = meta.model_config();
  return with_precision(cfg.precision, [&](auto tag) {
    using T = decltype(tag);
    const PretrainOptions opt = PretrainOptions::from(run);
    log("pretrain scheme=" + run.get("pretrain.scheme") + " epochs=" + std::to_string(opt.epochs) +
        " studies=" + std::to_string(data.corpus.split(Split::Train).size()));
    auto on_epoch = [&](int epoch, const ModelParams<T>& params) {
      fs::path p = a.out;
      p += ".epoch" + std::to_string(epoch);
      save_checkpoint(p, Checkpoint<T>{meta, params});
    };
    const auto result = pretrain<T>(data.corpus.split(Split::Train), data.vocab, cfg, init_params<T>(cfg, run.seed()), opt, on_epoch);
    save_checkpoint(a.out, Checkpoint<T>{meta, result.params});
    fs::path csv = a.out;
    csv += ".loss.csv";
    auto out = open_out(csv);
    write_loss_csv(out, result.log);
    const auto means = epoch_mean_loss(result.log);
    for (std::size_t e = 0; e < means.size(); ++e) log("epoch " + std::to_string(e) + " mean loss " + std::to_string(means[e]));
    return 0;
  });
}

inline int finetune(const FinetuneArgs& a) {
  const Task task = parse_task(a.task);
  const DataBundle data = load_dataset(a.data);
  std::optional<Checkpoint<double>> base;
  RunConfig run;
  if (!a.ckpt.empty()) {
    base = load_checkpoint<double>(a.ckpt);
    run = base->meta.run;
  }
  if (!a.config.empty()) run = RunConfig::load(a.config.string());
  if (a.ckpt.empty() && a.config.empty()) throw UsageError("finetune needs --ckpt, --config or both");
  apply_overrides(run, a.overrides);
  CheckpointMeta meta{run, data.vocab.size(), static_cast<int>(data.answers.size()), "finetune:" + std::string(to_string(task))};
  const ModelConfig cfg = meta.model_config();
  if (base) validate_shapes(base->params, cfg);
  return with_precision(cfg.precision, [&](auto tag) {
    using T = decltype(tag);
    ModelParams<T> params = base ? base->params.template cast<T>() : init_params<T>(cfg, run.seed());
    FinetuneOptions opt = FinetuneOptions::from(run, task);
    opt.match_from_irm = task == Task::Retrieval && base && base->meta.stage.rfind("pretrain", 0) == 0;
    const TaskData train = TaskData::from(data.corpus, Split::Train);
    const MaskScheme mask = task == Task::Gen ? MaskScheme::S2S : understanding_scheme(cfg);
    log("finetune task=" + std::string(to_string(task)) + " mask=" + std::string(to_string(mask)) +
        " init=" + (base ? a.ckpt.string() : std::string("scratch")) + " epochs=" + std::to_string(opt.epochs));
    const auto result = finetune<T>(train, data.vocab, data.answers, cfg, std::move(params), opt);
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e)
      log("epoch " + std::to_string(e) + " mean loss " + std::to_string(result.epoch_loss[e]));
    save_checkpoint(a.out, Checkpoint<T>{meta, result.params});
    return 0;
  });
}

template <typename T>
MetricReport evaluate_checkpoint(Task task, const Checkpoint<T>& ckpt, const DataBundle& data, Split split,
                                 std::uint64_t seed, int max_len) {
  const ModelConfig cfg = ckpt.meta.model_config();
  if (cfg.vocab_size != data.vocab.size()) throw DataError("checkpoint vocabulary does not match the data directory");
  const TaskData td = TaskData::from(data.corpus, split);
  const std::string name(to_string(task));
  switch (task) {
    case Task::Cls:
      return build_report(name, cls_items(std::make_shared<ClsOutputs>(predict_cls(td, data.vocab, cfg, ckpt.params))), seed);
    case Task::Retrieval: {
      const int trials = static_cast<int>(ckpt.meta.run.get_int("eval.trials"));
      return build_report(name, retrieval_items(std::make_shared<RetrievalOutputs>(
                                    predict_retrieval(td, data.vocab, cfg, ckpt.params, trials, seed))),
                          seed);
    }
    case Task::Vqa: {
      const auto out = std::make_shared<VqaOutputs>(predict_vqa(td, data.vocab, data.answers, cfg, ckpt.params));
      for (const auto& u : out->unseen) log("unseen gold answer '" + u + "' counted wrong");
      return build_report(name, vqa_items(out), seed);
    }
    case Task::Gen:
      return build_report(name, gen_items(std::make_shared<GenOutputs>(predict_gen(td, data.vocab, cfg, ckpt.params, max_len)),
                                          FindingSpec::standard(cfg.vis.image_size)),
                          seed);
  }
  throw UsageError("unknown task");
}

inline MetricReport evaluate_path(Task task, const fs::path& path, const DataBundle& data, Split split,
                                  std::optional<std::uint64_t> seed, int max_len) {
  const Checkpoint<double> probe = load_checkpoint<double>(path);
  const std::uint64_t s = seed.value_or(probe.meta.run.seed());
  if (probe.meta.model_config().precision == 64) return evaluate_checkpoint<double>(task, probe, data, split, s, max_len);
  return evaluate_checkpoint<float>(task, load_checkpoint<float>(path), data, split, s, max_len);
}

inline int eval(const EvalArgs& a) {
  const Task task = parse_task(a.task);
  const DataBundle data = load_dataset(a.data);
  const Split split = parse_split(a.split);
  std::optional<std::uint64_t> seed = a.seed;
  if (!seed && !a.compare.empty()) seed = load_checkpoint<double>(a.ckpt).meta.run.seed();
  MetricReport report = evaluate_path(task, a.ckpt, data, split, seed, a.max_len);
  if (!a.compare.empty()) {
    const MetricReport other = evaluate_path(task, a.compare, data, split, seed, a.max_len);
    attach_comparison(report, other);
  }
  auto out = open_out(a.out);
  report.write_jsonl(out);
  fs::path csv = a.out;
  csv += ".resamples.csv";
  auto csv_out = open_out(csv);
  report.write_csv(csv_out);
  for (const auto& m : report.metrics) {
    std::string line = m.name + " " + std::to_string(m.value) + " mean " + std::to_string(m.bootstrap.mean) + " std " +
                       std::to_string(m.bootstrap.std);
    if (m.p_value) line += " p " + std::to_string(*m.p_value);
    if (!m.note.empty()) line += " (" + m.note + ")";
    log(line);
  }
  return 0;
}

inline int generate(const GenerateArgs& a) {
  const DataBundle data = load_dataset(a.data);
  const TaskData td = TaskData::from(data.corpus, parse_split(a.split));
  const Checkpoint<double> probe = load_checkpoint<double>(a.ckpt);
  const ModelConfig cfg = probe.meta.model_config();
  if (a.max_len < 1 || a.max_len > cfg.max_len) throw UsageError("--max-len must lie in [1, text.max_len]");
  auto run = [&](const auto& ckpt) {
    const GenOutputs g = predict_gen(td, data.vocab, cfg, ckpt.params, a.max_len, false);
    auto out = open_out(a.out);
    out << "study_id\tstop_reason\treport\n";
    for (std::size_t i = 0; i < g.ids.size(); ++i) out << g.ids[i] << '\t' << to_string(g.stops[i]) << '\t' << g.generated[i] << '\n';
    log("generated " + std::to_string(g.ids.size()) + " reports");
    return 0;
  };
  if (cfg.precision == 64) return run(probe);
  return run(load_checkpoint<float>(a.ckpt));
}

inline int export_attn(const ExportAttnArgs& a) {
  const Checkpoint<double> ckpt = load_checkpoint<double>(a.ckpt);
  const ModelConfig cfg = ckpt.meta.model_config();
  if (a.layer < 0 || a.layer >= cfg.layers) throw UsageError("--layer outside [0, model.layers)");
  if (a.head < 0 || a.head >= cfg.heads) throw UsageError("--head outside [0, model.heads)");
  MaskScheme scheme;
  if (!a.mask.empty()) {
    scheme = parse_mask_scheme(a.mask);
  } else {
    const std::string s = ckpt.meta.run.get("pretrain.scheme");
    scheme = s == "bi_s2s" ? MaskScheme::S2S : parse_mask_scheme(s);
  }
  if ((scheme == MaskScheme::NonCrossing) != cfg.language_cls) {
    throw UsageError("mask " + std::string(to_string(scheme)) + " does not fit this checkpoint's sequence layout");
  }
  fs::path vocab_path = a.vocab;
  if (vocab_path.empty() && !a.data.empty()) vocab_path = a.data / "vocab.tsv";
  if (vocab_path.empty()) throw UsageError("export-attn needs --vocab or --data");
  const Vocabulary vocab = Vocabulary::load(vocab_path.string());
  if (vocab.size() != cfg.vocab_size) throw DataError("vocabulary does not match the checkpoint");
  const ImageGrid image = read_pgm(a.image.string());
  const std::vector<int> ids = report_ids(a.report, vocab, cfg.max_len);
  if (ids.empty()) throw DataError("--report holds no tokens");

  Tape<double> tape(false);
  const VisualFeatures<double> visual = encode_image(tape, image, ckpt.params, cfg);
  const auto pass = run_joint(tape, visual, ids, ckpt.params, cfg, scheme, false, nullptr, true);
  const Matrix<double>& w = pass.out.attention[static_cast<std::size_t>(a.layer)][static_cast<std::size_t>(a.head)];

  fs::path csv = a.out;
  csv += ".csv";
  auto out = open_out(csv);
  out.precision(17);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) out << (c ? "," : "") << w(r, c);
    out << '\n';
  }

  // Mean attention of the language tokens onto each visual cell, upsampled.
  const SequenceLayout& layout = pass.layout;
  std::vector<double> cell(static_cast<std::size_t>(visual.grid_rows * visual.grid_cols), 0.0);
  for (int q = layout.text_begin(); q < layout.sep_l(); ++q)
    for (int k = 0; k < layout.visual_count; ++k)
      cell[static_cast<std::size_t>(visual.position_ids[static_cast<std::size_t>(k)])] += w(q, layout.visual_begin() + k);
  const double peak = *std::max_element(cell.begin(), cell.end());
  ImageGrid heat(image.height, image.width);
  const int sy = image.height / visual.grid_rows, sx = image.width / visual.grid_cols;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      heat.at(y, x) = peak > 0 ? cell[static_cast<std::size_t>((y / sy) * visual.grid_cols + x / sx)] / peak : 0.0;
  fs::path pgm = a.out;
  pgm += ".pgm";
  write_pgm(pgm.string(), heat);
  log("attention layer " + std::to_string(a.layer) + " head " + std::to_string(a.head) + " mask " +
      std::string(to_string(scheme)) + ": " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
  return 0;
}

}  // namespace medvill::cli
