#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "aegis/anchor/anchor.hpp"
#include "aegis/models/expert.hpp"
#include "aegis/models/vlm.hpp"
#include "aegis/tasks/tasks.hpp"
#include "aegis/train/trainer.hpp"
#include "aegis/transport/transport.hpp"

namespace aegis::diag {

// kappa_k = sum_{i<k} sigma_i^2 / sum_i sigma_i^2; exactly 1 once k >= rank.
double kappa(std::span<const double> sigma, std::size_t k);

struct SpectrumResult {
  std::size_t rows = 0, cols = 0;
  std::vector<double> sigma;  // descending
  double frobenius_sq = 0.0;  // of the input matrix
  std::vector<std::pair<std::size_t, double>> kappas;

  double kappa_at(std::size_t k) const { return kappa(sigma, k); }
  double energy() const;  // sum sigma^2
};

// Singular values of a row-major m x n matrix. Throws on non-finite input.
SpectrumResult svd_spectrum(std::span<const double> matrix, std::size_t rows, std::size_t cols,
                            const std::vector<std::size_t>& ks = {1, 3, 5, 10, 20});

// Fixed inputs for the gradient spectra: a pretrain batch for the CE gradient
// and an action batch with its flow draw for the flow-matching gradient.
struct SpectralBatch {
  tasks::PretrainBatch ce;
  tasks::ActionBatch actions;
  train::FlowDraw draw;
};
SpectralBatch spectral_batch(const tasks::World& world, std::size_t n, std::uint64_t seed, double fm_time_alpha = 1.5);

struct AsymmetryResult {
  std::string parameter;
  std::size_t k = 0;
  SpectrumResult ce, mse;
  double kappa_ce() const { return ce.kappa_at(k); }
  double kappa_mse() const { return mse.kappa_at(k); }
};

// Gradients of the answer CE and of the flow-matching MSE with respect to one
// matrix parameter of the VLM, taken at the same parameter values.
AsymmetryResult spectral_asymmetry(models::ToyVLM& vlm, models::FlowExpert& expert, const SpectralBatch& batch,
                                   const std::string& parameter, std::size_t k = 20);

// Mean-squared-error gradient of a zero-initialized linear map W (A x d_obs)
// from observations to the action at every horizon step, on n samples of the
// diagnostics stream. The targets span the task's rank-r action subspace, so
// the gradient has rank <= r up to the action noise.
std::vector<double> linear_oracle_gradient(const tasks::World& world, std::size_t n);

struct ConflictHistogram {
  std::vector<double> cosines;  // one per retained row
  std::size_t excluded = 0;
  std::vector<double> edges;    // bins + 1 edges over [-1, 1]
  std::vector<std::size_t> counts;

  double mean_abs() const;
  std::string to_csv() const;
};

// Cosine between the two gradients for every output row of a rows x cols
// weight; rows where both norms fall below eps are left out.
ConflictHistogram neuron_conflict_histogram(std::span<const double> task_grad, std::span<const double> ot_grad,
                                            std::size_t rows, std::size_t cols, std::size_t bins = 20,
                                            double eps = 1e-12);

// Runs one dual backward on a micro-batch and leaves the task and transport
// gradients of the VLM in its parameter slots.
void capture_dual_gradients(models::ToyVLM& vlm, models::FlowExpert& expert, const anchor::AnchorStatistics& anchor,
                            const tasks::ActionBatch& batch, const train::FlowDraw& draw, double fm_scale,
                            const transport::TransportConfig& transport);

ConflictHistogram parameter_conflict(const ag::ParameterStore& store, const std::string& parameter, std::size_t bins = 20,
                                     double eps = 1e-12);

// Masked mean over positions of the final hidden state, one row per sample.
std::vector<std::vector<double>> pooled_states(const models::ToyVLM& vlm, const models::SequenceBatch& batch);

struct DriftProjection {
  std::vector<double> axis1, axis2;
  double drift_norm = 0.0;
  // Coordinates relative to the base mean, per labelled set.
  struct Set {
    std::string label;
    std::vector<std::pair<double, double>> points;
    std::pair<double, double> mean() const;
  };
  std::vector<Set> sets;

  std::string to_csv() const;
};

// Axis 1 is the unit drift from the base mean to the naive mean. Axis 2 is the
// leading principal direction of the base states after their axis-1 component
// is removed.
DriftProjection drift_projection(const std::vector<std::vector<double>>& base, const std::vector<std::vector<double>>& naive,
                                 const std::vector<std::vector<double>>& aegis);

struct ColumnSummary {
  std::string column;
  std::size_t count = 0;
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0;
};

ColumnSummary summarize_values(const std::string& column, std::span<const double> values);
std::vector<ColumnSummary> summarize(const train::MetricsTable& table,
                                     const std::vector<std::string>& columns = {"throttle", "energy_shed", "avg_cos",
                                                                                "avg_alpha", "ot_penalty", "preclip_norm"});
std::string summary_csv(const std::vector<ColumnSummary>& rows);

}  // namespace aegis::diag
