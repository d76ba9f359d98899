#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "juap/attack.hpp"
#include "juap/config.hpp"
#include "juap/data.hpp"
#include "juap/metrics.hpp"

namespace juap {

/// Effective configuration of one command plus where its paths resolve.
///
/// Relative paths in the config resolve against the artifact root, which is
/// `JUAP_ARTIFACT_ROOT` when set, else `run.artifact_root`, else the current
/// directory.
struct RunContext {
  Config config;
  fs::path artifact_root;
  std::ostream* log = nullptr;

  static RunContext from_config(Config config, std::ostream* log = nullptr);

  fs::path resolve(const fs::path& p) const;
  fs::path out_dir() const;
  uint64_t seed() const;
  void warn(const std::string& message) const;
  void info(const std::string& message) const;
};

enum class CommandStatus { Completed, AlreadyComplete, Interrupted };

struct CommandResult {
  CommandStatus status = CommandStatus::Completed;
  fs::path out_dir;
  nlohmann::json summary = nlohmann::json::object();
};

/// Writes the synthetic shapes set under run.out_dir.
CommandResult cmd_make_dataset(const RunContext& ctx);

/// Trains a classifier; writes checkpoint, accuracy.csv and split indices.
CommandResult cmd_train_classifier(const RunContext& ctx);

/// Trains an RTS masking model against classifier.path.
CommandResult cmd_train_rts(const RunContext& ctx);

/// Runs one attack method (juap, ablation, uap, pgd, jap, zero). JUAP and the
/// ablation checkpoint their state and resume from it on re-run.
CommandResult cmd_attack(const RunContext& ctx);

/// Evaluates attack.path; writes report.json, fr.csv, discrepancy.csv, grid.png.
CommandResult cmd_evaluate(const RunContext& ctx);

/// Merges at least two reports into leaderboard.csv.
CommandResult cmd_compare(const RunContext& ctx);

/// Attribution grid of benign images and each attack in render.attacks.
CommandResult cmd_render(const RunContext& ctx);

/// Detection-gap table over detect.sets (name=attack dir, comma separated).
CommandResult cmd_detect_gap(const RunContext& ctx);

/// Builds the attack configuration from `attack.*` keys.
AttackConfig attack_config_from(const Config& cfg, int64_t height, int64_t width, uint64_t seed);

/// Leaderboard rows sorted by FR desc, then IOU desc. Delta columns are filled
/// when a report with method "ablation" shares interpreter, dataset and model.
std::string leaderboard_csv(const std::vector<EvalReport>& reports);

std::vector<std::string> split_list(const std::string& text);

}  // namespace juap
