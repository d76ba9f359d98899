#include <iostream>

#include <CLI11.hpp>

#include "juap/pipeline.hpp"

namespace {

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  int64_t seed = -1;
  std::vector<std::string> reports;
};

juap::Config effective_config(const Options& opt) {
  juap::Config cfg;
  if (!opt.config_path.empty()) cfg = juap::Config::load(opt.config_path);
  if (!opt.out_dir.empty()) cfg.set("run.out_dir", opt.out_dir);
  if (opt.seed >= 0) cfg.set("run.seed", std::to_string(opt.seed));
  if (!opt.reports.empty()) {
    std::string joined;
    for (const auto& r : opt.reports) joined += (joined.empty() ? "" : ",") + r;
    cfg.set("compare.reports", joined);
  }
  // Explicit --set assignments take precedence over everything else.
  cfg.merge_overrides(opt.overrides);
  return cfg;
}

void print_result(const juap::CommandResult& res) {
  switch (res.status) {
    case juap::CommandStatus::AlreadyComplete:
      std::cout << "already complete: " << res.out_dir.string() << "\n";
      break;
    case juap::CommandStatus::Interrupted:
      std::cout << "interrupted: " << res.out_dir.string() << "\n";
      break;
    default:
      std::cout << "done: " << res.out_dir.string() << "\n";
  }
  std::cout << res.summary.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint universal adversarial perturbations against classifiers and their interpreters"};
  app.require_subcommand(1);
  Options opt;

  using Command = juap::CommandResult (*)(const juap::RunContext&);
  const std::vector<std::tuple<std::string, std::string, Command>> verbs = {
      {"make-dataset", "Write the synthetic shapes dataset", juap::cmd_make_dataset},
      {"train-classifier", "Train a classifier on a class-directory dataset", juap::cmd_train_classifier},
      {"train-rts", "Train a real-time saliency model against a classifier", juap::cmd_train_rts},
      {"attack", "Run an attack (juap, ablation, uap, pgd, jap, zero)", juap::cmd_attack},
      {"evaluate", "Compute FR, L1 and IOU for an attack", juap::cmd_evaluate},
      {"compare", "Merge evaluation reports into a leaderboard", juap::cmd_compare},
      {"render", "Render an attribution grid", juap::cmd_render},
      {"detect-gap", "Run the interpretation-discrepancy detection experiment", juap::cmd_detect_gap},
  };
  std::vector<std::pair<CLI::App*, Command>> subs;
  for (const auto& [name, help, fn] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", opt.config_path, "Config file (key = value, [section] headers)")
        ->check(CLI::ExistingFile);
    sub->add_option("-s,--set", opt.overrides, "Override a config key: key=value")->take_all();
    sub->add_option("-o,--out", opt.out_dir, "Output directory (run.out_dir)");
    sub->add_option("--seed", opt.seed, "Global seed (run.seed)");
    if (name == "compare") sub->add_option("reports", opt.reports, "Report files or evaluation directories");
    subs.emplace_back(sub, fn);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    juap::use_deterministic_runtime();
    for (const auto& [sub, fn] : subs) {
      if (!sub->parsed()) continue;
      auto ctx = juap::RunContext::from_config(effective_config(opt), &std::cerr);
      print_result(fn(ctx));
    }
  } catch (const juap::NumericalError& e) {
    std::cerr << "numerical failure at iteration " << e.iteration() << ": " << e.what() << "\n";
    return 3;
  } catch (const juap::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
