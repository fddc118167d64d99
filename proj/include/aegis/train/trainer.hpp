#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "aegis/anchor/anchor.hpp"
#include "aegis/isolation/isolation.hpp"
#include "aegis/models/expert.hpp"
#include "aegis/models/vlm.hpp"
#include "aegis/tasks/tasks.hpp"
#include "aegis/train/baselines.hpp"
#include "aegis/train/config.hpp"
#include "aegis/train/optimizer.hpp"

namespace aegis::train {

inline constexpr int kMetricsSchemaVersion = 1;
extern const std::vector<std::string> kMetricsColumns;

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Seeds derived from the run seed; identical for every condition.
std::uint64_t vlm_init_seed(std::uint64_t seed);
std::uint64_t expert_init_seed(std::uint64_t seed);
std::uint64_t lora_init_seed(std::uint64_t seed);

struct PretrainResult {
  double initial_ce = 0.0;
  double final_ce = 0.0;
  std::size_t steps = 0;
  bool reached_target = false;
  std::vector<std::pair<std::size_t, double>> curve;  // (step, holdout CE)
};

// Cross-entropy training of the answer tokens. Stops at the first evaluation
// with holdout CE <= target_fraction * ln V or when the budget runs out.
PretrainResult pretrain(models::ToyVLM& model, const tasks::World& world, const tasks::HoldoutSet& holdout,
                        const PretrainConfig& cfg, std::uint64_t seed, std::ostream* log = nullptr);

// One flow-matching draw: Gaussian noise and t ~ Beta(alpha, 1) per sample.
struct FlowDraw {
  std::vector<double> noise;  // B * H * A
  std::vector<double> t;      // B
};
FlowDraw draw_flow(std::uint64_t seed, std::size_t batch, std::size_t horizon, std::size_t action_dim, double alpha);

struct FlowTargets {
  ag::Tensor noisy;   // t a1 + (1 - t) eps
  ag::Tensor target;  // a1 - eps
};
FlowTargets flow_targets(const std::vector<double>& actions, const FlowDraw& draw, std::size_t batch, std::size_t horizon,
                         std::size_t action_dim);

struct StepRecord {
  std::size_t step = 0;
  std::optional<double> fm_loss_raw;
  std::optional<double> holdout_ce;
  std::optional<double> ot_penalty;
  std::optional<double> throttle;
  std::optional<double> energy_shed;
  std::optional<double> avg_cos;
  std::optional<double> avg_alpha;
  std::optional<double> preclip_norm;
  std::optional<double> fm_eval;
  std::optional<double> fm_eval_ema;
};

std::string metrics_header();
std::string metrics_row(const StepRecord& r);

// One condition's training state. Every condition consumes the same batch
// and noise streams given the run seed.
class Trainer {
 public:
  Trainer(TrainingConfig cfg, const models::ToyVLM& pretrained, const anchor::AnchorStatistics* anchor,
          const tasks::HoldoutSet& holdout);
  ~Trainer();

  // Evaluation row for the untouched models.
  StepRecord baseline();
  // Runs the next optimizer step (1-based in the returned record).
  StepRecord step();

  std::size_t steps_done() const { return steps_done_; }
  const TrainingConfig& config() const { return cfg_; }
  models::ToyVLM& vlm() { return vlm_; }
  models::FlowExpert& expert() { return expert_; }
  const Ema& expert_ema() const { return ema_; }
  const std::optional<isolation::ProjectionReport>& last_report() const { return last_report_; }
  const std::vector<isolation::LayerGroup>& groups() const { return groups_; }
  // Mean raw flow-matching MSE on the fixed evaluation set, for the live
  // expert and for its EMA.
  std::pair<double, double> fm_eval() const;
  double holdout_ce() const;
  double seconds_in_steps() const { return step_seconds_; }

  // Flow-matching loss of one micro-batch on the current parameters, built
  // with the graph attached (used by tests and diagnostics).
  struct MicroBatch {
    tasks::ActionBatch batch;
    FlowDraw draw;
  };
  MicroBatch micro_batch(std::size_t step_index, std::size_t micro) const;

 private:
  double micro_step(const MicroBatch& mb, std::optional<double>& ot_out);

  TrainingConfig cfg_;
  tasks::World world_;
  const anchor::AnchorStatistics* anchor_;
  const tasks::HoldoutSet& holdout_;
  models::ToyVLM vlm_;
  models::FlowExpert expert_;
  std::unique_ptr<models::FlowExpert> ema_view_;
  Ema ema_;
  AdamW opt_;
  std::vector<isolation::LayerGroup> groups_;
  std::optional<EwcState> ewc_;
  UniformQuantizer quantizer_;
  std::vector<MicroBatch> fm_eval_set_;
  std::optional<isolation::ProjectionReport> last_report_;
  std::size_t steps_done_ = 0;
  double step_seconds_ = 0.0;
};

struct RunSummary {
  std::string condition;
  std::uint64_t seed = 0;
  std::uint64_t world_seed = 0;
  std::size_t steps = 0;
  double holdout_initial = 0.0;
  double holdout_final = 0.0;
  double holdout_delta = 0.0;
  double fm_eval_initial = 0.0;
  double fm_eval_final = 0.0;
  double fm_eval_ema_final = 0.0;
  double fm_reduction = 0.0;  // 1 - final / initial
  double vlm_change_norm = 0.0;
  double mean_step_seconds = 0.0;
  std::string holdout_sha256;
  std::size_t metrics_rows = 0;

  std::string to_json() const;
  static RunSummary from_json(const std::string& text);
};

// Trains one condition end to end. When `run_dir` is set it receives
// config.ini, metrics.csv, summary.json and the final checkpoints.
RunSummary run_training(const TrainingConfig& cfg, const models::ToyVLM& pretrained, const anchor::AnchorStatistics* anchor,
                        const tasks::HoldoutSet& holdout, const std::optional<std::filesystem::path>& run_dir,
                        std::ostream* log = nullptr);

// Trajectory table over several run directories plus final deltas.
struct Comparison {
  std::vector<std::string> runs;
  std::vector<RunSummary> summaries;
  std::vector<std::size_t> eval_steps;
  std::vector<std::vector<std::optional<double>>> holdout;  // [run][eval step]
  std::vector<std::vector<std::optional<double>>> fm_eval;

  std::string to_csv() const;
  std::string deltas_table() const;
};
Comparison compare_runs(const std::vector<std::filesystem::path>& run_dirs);

struct MetricsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::optional<double>>> rows;

  std::size_t column(const std::string& name) const;
  std::vector<double> values(const std::string& name) const;  // non-empty cells
};
MetricsTable read_metrics(const std::filesystem::path& csv);

}  // namespace aegis::train
