// medvill: data generation, pre-training, fine-tuning, evaluation,
// generation and attention export for the joint image-report transformer.

#include "commands.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>

int main(int argc, char** argv) {
  namespace cli = medvill::cli;
  CLI::App app{"Joint image-report transformer toolkit"};
  app.require_subcommand(1);
  std::function<int()> action;

  cli::GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic corpus (PGM images + JSON-lines manifests)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n-train", gen.n_train, "Training studies")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--n-valid", gen.n_valid, "Validation studies")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--n-test", gen.n_test, "Test studies")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--seed", gen.seed, "Root seed");
  gen_cmd->add_option("--image-size", gen.image_size, "Image side (multiple of 32)");
  gen_cmd->callback([&] { action = [&] { return cli::gen_data(gen); }; });

  cli::PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Pre-train with MLM + image-report matching");
  pre_cmd->add_option("--config", pre.config, "key=value config file")->required();
  pre_cmd->add_option("--data", pre.data, "Corpus directory")->required();
  pre_cmd->add_option("--out", pre.out, "Checkpoint path")->required();
  pre_cmd->add_option("--set", pre.overrides, "Config override key=value (repeatable)");
  pre_cmd->callback([&] { action = [&] { return cli::pretrain(pre); }; });

  cli::FinetuneArgs ft;
  auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune a task head (omit --ckpt to start from scratch)");
  ft_cmd->add_option("--task", ft.task, "cls | retrieval | vqa | gen")->required();
  ft_cmd->add_option("--ckpt", ft.ckpt, "Starting checkpoint");
  ft_cmd->add_option("--data", ft.data, "Corpus directory")->required();
  ft_cmd->add_option("--config", ft.config, "key=value config file (defaults to the checkpoint's)");
  ft_cmd->add_option("--out", ft.out, "Output checkpoint")->required();
  ft_cmd->add_option("--set", ft.overrides, "Config override key=value (repeatable)");
  ft_cmd->callback([&] { action = [&] { return cli::finetune(ft); }; });

  cli::EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate with 30-resample bootstrap statistics");
  ev_cmd->add_option("--task", ev.task, "cls | retrieval | vqa | gen")->required();
  ev_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  ev_cmd->add_option("--data", ev.data, "Corpus directory")->required();
  ev_cmd->add_option("--out", ev.out, "Report path (JSON lines; resamples go to <out>.resamples.csv)")->required();
  ev_cmd->add_option("--compare", ev.compare, "Second checkpoint for Welch t-tests");
  ev_cmd->add_option("--split", ev.split, "train | valid | test");
  ev_cmd->add_option("--seed", ev.seed, "Bootstrap and trial seed (default: checkpoint seed)");
  ev_cmd->add_option("--max-len", ev.max_len, "Generation length limit (task gen)");
  ev_cmd->callback([&] { action = [&] { return cli::eval(ev); }; });

  cli::GenerateArgs gn;
  auto* gn_cmd = app.add_subcommand("generate", "Greedy report generation");
  gn_cmd->add_option("--ckpt", gn.ckpt, "Generation checkpoint")->required();
  gn_cmd->add_option("--data", gn.data, "Corpus directory")->required();
  gn_cmd->add_option("--split", gn.split, "train | valid | test");
  gn_cmd->add_option("--max-len", gn.max_len, "Maximum generated tokens");
  gn_cmd->add_option("--out", gn.out, "Output TSV: study_id, stop_reason, report")->required();
  gn_cmd->callback([&] { action = [&] { return cli::generate(gn); }; });

  cli::ExportAttnArgs ex;
  auto* ex_cmd = app.add_subcommand("export-attn", "Dump one head's attention matrix and a visual heat map");
  ex_cmd->add_option("--ckpt", ex.ckpt, "Checkpoint")->required();
  ex_cmd->add_option("--image", ex.image, "PGM image")->required();
  ex_cmd->add_option("--report", ex.report, "Report text")->required();
  ex_cmd->add_option("--vocab", ex.vocab, "Vocabulary file");
  ex_cmd->add_option("--data", ex.data, "Corpus directory (uses its vocab.tsv)");
  ex_cmd->add_option("--layer", ex.layer, "Layer index")->required();
  ex_cmd->add_option("--head", ex.head, "Head index")->required();
  ex_cmd->add_option("--mask", ex.mask, "bi | s2s | bar | noncross (default: pre-training scheme)");
  ex_cmd->add_option("--out", ex.out, "Output prefix (<out>.csv, <out>.pgm)")->required();
  ex_cmd->callback([&] { action = [&] { return cli::export_attn(ex); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(medvill::ErrorKind::Usage);
  }

  try {
    return action();
  } catch (const medvill::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return static_cast<int>(medvill::ErrorKind::Data);
  }
}
