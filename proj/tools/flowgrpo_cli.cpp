// flowgrpo: pretrain, fine-tune, ablate, verify and plot.
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 training abort,
// 4 verification failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>

#include "flowgrpo/checks.hpp"
#include "flowgrpo/experiment.hpp"

namespace fs = std::filesystem;
using namespace flowgrpo;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kAbort = 3, kVerify = 4 };

int cmd_pretrain(const std::string& config_path) {
  const ExperimentConfig cfg = ExperimentConfig::load(config_path);
  fs::create_directories(cfg.out_dir);
  PretrainReport rep;
  const DenoiserNet net = pretrain(cfg, &rep, &std::cerr);
  const fs::path ckpt = fs::path(cfg.out_dir) / "pretrained.bin";
  save_checkpoint(net, ckpt.string());
  write_text_file(fs::path(cfg.out_dir) / "pretrain.snapshot", cfg.to_text());
  std::cout << "iterations " << rep.iterations << " val_loss " << rep.val_loss
            << (rep.plateaued ? " (plateau)" : "") << '\n'
            << "checkpoint " << ckpt.string() << '\n';
  return kOk;
}

int cmd_finetune(const std::string& config_path, const std::string& ckpt) {
  const ExperimentConfig cfg = ExperimentConfig::load(config_path);
  DenoiserNet net = load_checkpoint(ckpt);
  const fs::path dir = fs::path(cfg.out_dir) / "finetune";
  const FinetuneRun run = finetune_run(cfg, std::move(net), dir, &std::cerr);
  std::cout << "metrics " << run.artifacts.metrics_csv << '\n'
            << "plot " << run.artifacts.plot << '\n'
            << "config " << run.artifacts.config_snapshot << '\n';
  for (const auto& c : run.artifacts.checkpoints) std::cout << "checkpoint " << c << '\n';
  if (run.abort_reason) {
    std::cerr << "training aborted: " << *run.abort_reason << '\n';
    return kAbort;
  }
  return kOk;
}

int cmd_ablate(const std::string& preset, const std::string& config_path,
               const std::string& ckpt) {
  const ExperimentConfig cfg = ExperimentConfig::load(config_path);
  ablation_arms(preset, cfg);  // rejects unknown presets before any work
  const fs::path dir = fs::path(cfg.out_dir) / ("ablate_" + preset);
  fs::create_directories(dir);
  DenoiserNet init = ckpt.empty() ? pretrain(cfg, nullptr, &std::cerr) : load_checkpoint(ckpt);
  if (ckpt.empty()) save_checkpoint(init, (dir / "pretrained.bin").string());
  const AblationResult res = run_ablation(preset, cfg, init, dir, &std::cerr);
  std::cout << "comparison " << res.comparison_csv << '\n' << "plot " << res.plot << '\n';
  for (const auto& a : res.arms)
    std::cout << a.name << ' ' << (a.run.abort_reason ? "aborted" : "completed") << ' '
              << a.run.artifacts.metrics_csv << '\n';
  return kOk;
}

int cmd_verify() {
  bool ok = true;
  for (const auto& r : run_verification_suite()) {
    std::cout << r.line() << '\n' << std::flush;
    ok = ok && r.pass;
  }
  return ok ? kOk : kVerify;
}

int cmd_plot(const std::string& csv, std::size_t window) {
  std::cout << plot_metrics_csv(csv, window) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GRPO fine-tuning of toy flow and diffusion samplers"};
  app.require_subcommand(1);

  std::string config, ckpt, preset, csv;
  std::size_t window = 20;

  auto* pre = app.add_subcommand("pretrain", "pretrain the denoiser on the toy mixture");
  pre->add_option("--config", config, "config file")->required();

  auto* fine = app.add_subcommand("finetune", "GRPO fine-tuning from a checkpoint");
  fine->add_option("--config", config, "config file")->required();
  fine->add_option("--ckpt", ckpt, "checkpoint to start from")->required();

  auto* abl = app.add_subcommand("ablate", "run an ablation preset");
  abl->add_option("--preset", preset,
                  "timestep_modes | noise_levels | bestofn_pools | ddpo_compare")
      ->required();
  abl->add_option("--config", config, "base config file")->required();
  abl->add_option("--ckpt", ckpt, "start every arm from this checkpoint (default: pretrain)");

  auto* ver = app.add_subcommand("verify", "run the analytic check suite");

  auto* plt = app.add_subcommand("plot", "reward-curve SVG from a metrics CSV");
  plt->add_option("--csv", csv, "metrics CSV")->required();
  plt->add_option("--window", window, "moving-average window")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*pre) return cmd_pretrain(config);
    if (*fine) return cmd_finetune(config, ckpt);
    if (*abl) return cmd_ablate(preset, config, ckpt);
    if (*ver) return cmd_verify();
    if (*plt) return cmd_plot(csv, window);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericalError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
