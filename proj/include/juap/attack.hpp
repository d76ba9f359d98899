#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "juap/classifier.hpp"
#include "juap/data.hpp"
#include "juap/generators.hpp"
#include "juap/interpreters.hpp"
#include "juap/losses.hpp"

namespace juap {

struct AttackConfig {
  ObjectiveKind objective = ObjectiveKind::LeastLikely;
  std::optional<int64_t> target_class;
  double lambda = 0.001;
  double delta = -0.8;
  NormKind p = NormKind::LInf;
  double zeta = 10.0 / 255.0;
  double tau = 1e-4;
  GateForm gate_form = GateForm::AsPrinted;
  /// Smoothed-ReLU backward gate during loss computation; defaults to on for GradCAM.
  std::optional<bool> smoothed_relu;
  int64_t iterations = 300;
  double learning_rate = 2e-4;
  int64_t batch_size = 30;
  uint64_t seed = 0;
  bool rts_encoder_loss = true;
  AugmentConfig augment{.random_crop = false, .crop_padding = 2, .horizontal_flip = false, .flip_probability = 0.5};
  /// Record the classifier-term gradient norm w.r.t. the generator every iteration.
  bool instrument = false;

  /// Throws InputError on invalid settings. `num_classes` bounds the target class.
  void validate(int64_t num_classes) const;
  /// True when lambda lies outside the recommended [0.0001, 0.003] range.
  bool lambda_outside_recommended() const;
  bool use_smoothed_relu(InterpreterKind kind) const;
  nlohmann::json to_json() const;
};

struct IterationRecord {
  int64_t iteration = 0;
  double classifier_loss = 0.0;
  double interpreter_loss = 0.0;
  double encoder_loss = 0.0;
  double joint_loss = 0.0;
  bool gate_active = false;
  double perturbation_norm = 0.0;
  /// ||d max(L_cls, delta) / d theta||, only when instrumented.
  std::optional<double> classifier_grad_norm;

  nlohmann::json to_json() const;
  static IterationRecord from_json(const nlohmann::json& j);
};

struct AttackRunRecord {
  std::vector<IterationRecord> iterations;
  double wall_clock_seconds = 0.0;

  /// One JSON object per line.
  std::string to_jsonl() const;
  static AttackRunRecord from_jsonl(const std::string& text);
};

/// Generator-based universal attack. Each iteration draws batch `t` of the
/// deterministic stream, so a restored trainer continues the same trajectory.
class JuapTrainer {
 public:
  JuapTrainer(Generator generator, Interpreter interpreter, const Split& train, AttackConfig cfg);
  ~JuapTrainer();
  JuapTrainer(const JuapTrainer&) = delete;
  JuapTrainer& operator=(const JuapTrainer&) = delete;

  /// Runs iterations until `iteration() == until` (clamped to cfg.iterations).
  void run_until(int64_t until);
  void run() { run_until(cfg_.iterations); }
  IterationRecord step();

  int64_t iteration() const { return next_iteration_; }
  bool finished() const { return next_iteration_ >= cfg_.iterations; }
  const AttackRunRecord& record() const { return record_; }
  const AttackConfig& config() const { return cfg_; }
  const torch::Tensor& noise() const { return noise_; }
  Generator& generator() { return generator_; }
  /// Perturbation used by the most recent step, before its parameter update.
  const torch::Tensor& last_perturbation() const { return last_perturbation_; }
  /// Fraction of the most recent batch whose prediction left the benign class.
  double last_fooled_fraction() const { return last_fooled_fraction_; }

  /// Current universal perturbation from the fixed noise vector.
  Perturbation perturbation();

  /// Persists generator, optimizer state, noise and loss history under `dir`.
  void save_state(const fs::path& dir);
  /// Restores a state written by save_state (same config required).
  void load_state(const fs::path& dir);

 private:
  Generator generator_;
  Interpreter interpreter_;
  const Split* train_;
  AttackConfig cfg_;
  std::unique_ptr<torch::optim::Adam> optimizer_;
  BatchStream stream_;
  torch::Tensor noise_;
  int64_t next_iteration_ = 0;
  AttackRunRecord record_;
  std::vector<bool> frozen_flags_;
  torch::Tensor last_perturbation_;
  double last_fooled_fraction_ = 0.0;
};

struct JuapResult {
  Generator generator{nullptr};
  Perturbation perturbation;
  AttackRunRecord record;
};

JuapResult train_juap(Generator generator, Interpreter interpreter, const Split& train, const AttackConfig& cfg);

struct JapOptions {
  GeneratorSpec generator;
  /// Return the fooled iterate with the lowest interpreter loss instead of the last iterate.
  bool keep_best_fooled = true;
};

struct JapResult {
  Perturbation perturbation;  // [N, C, H, W]
  std::vector<AttackRunRecord> records;
};

/// Image-dependent variant: a fresh generator per image, same objective.
JapResult train_jap_per_image(Interpreter interpreter, const ImageBatch& images, const AttackConfig& cfg,
                              const JapOptions& options);

struct IterativeUapOptions {
  int64_t max_passes = 5;
  /// Normalized gradient steps per image in the inner solver.
  int64_t inner_steps = 10;
  /// Inner step length as a fraction of zeta.
  double step_fraction = 0.25;
  /// Stop once the fooling ratio on the training images reaches this.
  double target_fooling_ratio = 0.8;
  int64_t max_images = 0;  // 0 = all
  uint64_t seed = 0;
};

struct IterativeUapResult {
  Perturbation perturbation;
  bool converged = false;
  double train_fooling_ratio = 0.0;
  int64_t passes = 0;
  /// Norm of the accumulated perturbation after every accumulation.
  std::vector<double> norm_history;
};

IterativeUapResult baseline_iterative_uap(Classifier& classifier, const Split& train, NormKind p, double zeta,
                                          const IterativeUapOptions& options = {});

/// Projected gradient ascent on CE w.r.t. the benign prediction, per image,
/// from a zero start. Returns perturbations [N, C, H, W].
Perturbation baseline_pgd(Classifier& classifier, const torch::Tensor& images, NormKind p, double zeta, int64_t steps,
                          double step_size);

}  // namespace juap
