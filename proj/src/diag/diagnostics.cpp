#include "aegis/diag/diagnostics.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "aegis/autograd/ops.hpp"
#include "aegis/isolation/isolation.hpp"

namespace aegis::diag {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double kappa(std::span<const double> sigma, std::size_t k) {
  if (sigma.empty()) throw std::invalid_argument("kappa: empty spectrum");
  if (k >= sigma.size()) return 1.0;
  double head = 0.0, total = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    const double e = sigma[i] * sigma[i];
    total += e;
    if (i < k) head += e;
  }
  if (total <= 0.0) throw std::invalid_argument("kappa: zero matrix has no spectrum");
  return head / total;
}

double SpectrumResult::energy() const {
  double e = 0.0;
  for (double s : sigma) e += s * s;
  return e;
}

SpectrumResult svd_spectrum(std::span<const double> matrix, std::size_t rows, std::size_t cols,
                            const std::vector<std::size_t>& ks) {
  if (rows == 0 || cols == 0 || matrix.size() != rows * cols) {
    throw std::invalid_argument("svd_spectrum: expected " + std::to_string(rows) + "x" + std::to_string(cols) + " values, got " +
                                std::to_string(matrix.size()));
  }
  for (double v : matrix)
    if (!std::isfinite(v)) throw std::invalid_argument("svd_spectrum: non-finite entry");
  Eigen::Map<const RowMatrix> g(matrix.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(g);
  SpectrumResult r;
  r.rows = rows;
  r.cols = cols;
  for (double v : matrix) r.frobenius_sq += v * v;
  const auto& s = svd.singularValues();
  r.sigma.assign(s.data(), s.data() + s.size());
  std::sort(r.sigma.begin(), r.sigma.end(), std::greater<>());
  if (r.energy() > 0.0)
    for (std::size_t k : ks) r.kappas.emplace_back(k, r.kappa_at(k));
  return r;
}

SpectralBatch spectral_batch(const tasks::World& world, std::size_t n, std::uint64_t seed, double fm_time_alpha) {
  const auto& cfg = world.config();
  SpectralBatch b;
  b.ce = tasks::collate_pretrain(tasks::gen_pretrain(world, tasks::Stream::diagnostics, 0, n), cfg);
  b.actions = tasks::collate_actions(tasks::gen_actions(world, tasks::Stream::diagnostics, 0, n), cfg);
  b.draw = train::draw_flow(mix_seed(seed, 0x53504543ULL), n, cfg.horizon, cfg.action_dim, fm_time_alpha);
  return b;
}

namespace {

std::vector<double> parameter_grad(ag::ParameterStore& store, const std::string& name) {
  const auto& p = store.get(name);
  if (!p.has_grad()) return std::vector<double>(p.numel(), 0.0);
  return {p.grad().begin(), p.grad().end()};
}

}  // namespace

AsymmetryResult spectral_asymmetry(models::ToyVLM& vlm, models::FlowExpert& expert, const SpectralBatch& batch,
                                   const std::string& parameter, std::size_t k) {
  auto& store = vlm.params();
  if (!store.contains(parameter)) throw std::invalid_argument("spectral_asymmetry: no parameter named '" + parameter + "'");
  const auto shape = store.get(parameter).shape();
  if (shape.size() != 2) throw std::invalid_argument("spectral_asymmetry: '" + parameter + "' is not a matrix");
  if (!store.get(parameter).requires_grad()) throw std::invalid_argument("spectral_asymmetry: '" + parameter + "' is frozen");

  AsymmetryResult r;
  r.parameter = parameter;
  r.k = k;
  const std::vector<std::size_t> ks{1, 3, 5, 10, 20, k};

  store.zero_grads();
  {
    auto out = vlm.forward(batch.ce.seq, false);
    ag::backward(ag::cross_entropy(vlm.logits_at(out.final_hidden, batch.ce.predict_rows), batch.ce.targets));
  }
  r.ce = svd_spectrum(parameter_grad(store, parameter), shape[0], shape[1], ks);

  store.zero_grads();
  expert.params().zero_grads();
  {
    const std::size_t B = batch.actions.seq.batch;
    const std::size_t H = expert.config().horizon, A = expert.config().action_dim;
    auto ft = train::flow_targets(batch.actions.actions, batch.draw, B, H, A);
    auto out = vlm.forward(batch.actions.seq, false);
    ag::backward(ag::mse_loss(expert.forward(ft.noisy, batch.draw.t, out.final_hidden, batch.actions.seq.mask), ft.target));
  }
  r.mse = svd_spectrum(parameter_grad(store, parameter), shape[0], shape[1], ks);
  store.zero_grads();
  expert.params().zero_grads();
  return r;
}

double ConflictHistogram::mean_abs() const {
  if (cosines.empty()) return 0.0;
  double s = 0.0;
  for (double c : cosines) s += std::abs(c);
  return s / static_cast<double>(cosines.size());
}

std::string ConflictHistogram::to_csv() const {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count\n";
  char buf[96];
  for (std::size_t i = 0; i < counts.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6g,%.6g,%zu\n", edges[i], edges[i + 1], counts[i]);
    os << buf;
  }
  return os.str();
}

std::vector<double> linear_oracle_gradient(const tasks::World& world, std::size_t n) {
  if (n == 0) throw std::invalid_argument("linear_oracle_gradient: need at least one sample");
  const auto& cfg = world.config();
  const std::size_t A = cfg.action_dim, H = cfg.horizon, d = cfg.d_obs;
  // L = mean over (n, h, a) of (W x - y)^2, so dL/dW = -2 / (n H A) * sum y x^T at W = 0.
  std::vector<double> g(A * d, 0.0);
  const double scale = -2.0 / static_cast<double>(n * H * A);
  for (const auto& s : tasks::gen_actions(world, tasks::Stream::diagnostics, 0, n))
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t i = 0; i < d; ++i) g[a * d + i] += scale * s.actions[h * A + a] * s.obs[i];
  return g;
}

ConflictHistogram neuron_conflict_histogram(std::span<const double> task_grad, std::span<const double> ot_grad,
                                            std::size_t rows, std::size_t cols, std::size_t bins, double eps) {
  if (task_grad.size() != rows * cols || ot_grad.size() != rows * cols) {
    throw std::invalid_argument("neuron_conflict_histogram: gradients must both hold rows x cols values");
  }
  if (bins == 0) throw std::invalid_argument("neuron_conflict_histogram: need at least one bin");
  ConflictHistogram h;
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, tt = 0.0, oo = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double t = task_grad[r * cols + c], o = ot_grad[r * cols + c];
      dot += t * o;
      tt += t * t;
      oo += o * o;
    }
    const double nt = std::sqrt(tt), no = std::sqrt(oo);
    if (nt < eps && no < eps) {
      ++h.excluded;
      continue;
    }
    const double denom = nt * no;
    h.cosines.push_back(denom > 0.0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0);
  }
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(bins);
  h.counts.assign(bins, 0);
  for (double c : h.cosines) {
    auto b = static_cast<std::size_t>((c + 1.0) / 2.0 * static_cast<double>(bins));
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

void capture_dual_gradients(models::ToyVLM& vlm, models::FlowExpert& expert, const anchor::AnchorStatistics& anchor,
                            const tasks::ActionBatch& batch, const train::FlowDraw& draw, double fm_scale,
                            const transport::TransportConfig& transport) {
  vlm.params().zero_grads();
  vlm.params().clear_slots();
  expert.params().zero_grads();
  expert.params().clear_slots();
  const std::size_t B = batch.seq.batch;
  auto ft = train::flow_targets(batch.actions, draw, B, expert.config().horizon, expert.config().action_dim);
  auto out = vlm.forward(batch.seq, true);
  auto mse = ag::mse_loss(expert.forward(ft.noisy, draw.t, out.final_hidden, batch.seq.mask), ft.target);
  auto penalty = transport::total_penalty(out.hidden, batch.seq.mask, anchor, transport);
  isolation::dual_backward(ag::scale(mse, fm_scale), penalty.total, vlm.params(), &expert.params());
  vlm.params().zero_grads();
  expert.params().zero_grads();
}

ConflictHistogram parameter_conflict(const ag::ParameterStore& store, const std::string& parameter, std::size_t bins,
                                     double eps) {
  if (!store.contains(parameter)) throw std::invalid_argument("parameter_conflict: no parameter named '" + parameter + "'");
  const auto& e = store.entry(parameter);
  const auto shape = e.param.shape();
  if (shape.size() != 2) throw std::invalid_argument("parameter_conflict: '" + parameter + "' is not a matrix");
  if (e.task_grad.empty() || e.ot_grad.empty()) {
    throw std::invalid_argument("parameter_conflict: '" + parameter + "' has no captured gradients");
  }
  return neuron_conflict_histogram(e.task_grad, e.ot_grad, shape[0], shape[1], bins, eps);
}

std::vector<std::vector<double>> pooled_states(const models::ToyVLM& vlm, const models::SequenceBatch& batch) {
  ag::NoGradGuard no_grad;
  auto out = vlm.forward(batch, false);
  const std::size_t B = batch.batch, S = batch.seq, d = vlm.config().d_model;
  const auto h = out.final_hidden.data();
  std::vector<std::vector<double>> states(B, std::vector<double>(d, 0.0));
  for (std::size_t b = 0; b < B; ++b) {
    double count = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      const double m = batch.mask[b * S + s];
      if (m == 0.0) continue;
      count += m;
      for (std::size_t i = 0; i < d; ++i) states[b][i] += m * h[(b * S + s) * d + i];
    }
    if (count > 0.0)
      for (double& v : states[b]) v /= count;
  }
  return states;
}

namespace {

Eigen::VectorXd set_mean(const std::vector<std::vector<double>>& states, std::size_t d) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  for (const auto& s : states) {
    if (s.size() != d) throw std::invalid_argument("drift_projection: inconsistent state width");
    m += Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(d));
  }
  return m / static_cast<double>(states.size());
}

}  // namespace

std::pair<double, double> DriftProjection::Set::mean() const {
  double x = 0.0, y = 0.0;
  for (const auto& [a, b] : points) {
    x += a;
    y += b;
  }
  const double n = points.empty() ? 1.0 : static_cast<double>(points.size());
  return {x / n, y / n};
}

std::string DriftProjection::to_csv() const {
  std::ostringstream os;
  os << "set,axis1,axis2\n";
  char buf[96];
  for (const auto& s : sets) {
    for (const auto& [x, y] : s.points) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", x, y);
      os << s.label << buf;
    }
  }
  return os.str();
}

DriftProjection drift_projection(const std::vector<std::vector<double>>& base, const std::vector<std::vector<double>>& naive,
                                 const std::vector<std::vector<double>>& aegis) {
  if (base.size() < 2 || naive.empty() || aegis.empty()) throw std::invalid_argument("drift_projection: empty state set");
  const std::size_t d = base.front().size();
  const auto n = static_cast<Eigen::Index>(d);
  const Eigen::VectorXd mu_base = set_mean(base, d);
  const Eigen::VectorXd drift = set_mean(naive, d) - mu_base;
  DriftProjection p;
  p.drift_norm = drift.norm();
  if (p.drift_norm <= 0.0) throw std::invalid_argument("drift_projection: naive mean equals base mean");
  const Eigen::VectorXd a1 = drift / p.drift_norm;

  Eigen::MatrixXd centered(static_cast<Eigen::Index>(base.size()), n);
  for (std::size_t i = 0; i < base.size(); ++i) {
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(base[i].data(), n) - mu_base;
    x -= a1.dot(x) * a1;
    centered.row(static_cast<Eigen::Index>(i)) = x.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centered.transpose() * centered);
  Eigen::VectorXd a2 = eig.eigenvectors().col(n - 1);
  a2 -= a1.dot(a2) * a1;
  a2.normalize();

  p.axis1.assign(a1.data(), a1.data() + d);
  p.axis2.assign(a2.data(), a2.data() + d);
  for (const auto& [label, states] : {std::pair{"base", &base}, std::pair{"naive", &naive}, std::pair{"aegis", &aegis}}) {
    DriftProjection::Set s;
    s.label = label;
    for (const auto& h : *states) {
      if (h.size() != d) throw std::invalid_argument("drift_projection: inconsistent state width");
      const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(h.data(), n) - mu_base;
      s.points.emplace_back(a1.dot(x), a2.dot(x));
    }
    p.sets.push_back(std::move(s));
  }
  return p;
}

ColumnSummary summarize_values(const std::string& column, std::span<const double> values) {
  ColumnSummary s;
  s.column = column;
  s.count = values.size();
  if (values.empty()) {
    s.mean = s.std = s.min = s.max = std::nan("");
    return s;
  }
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size()));
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  s.min = *mn;
  s.max = *mx;
  return s;
}

std::vector<ColumnSummary> summarize(const train::MetricsTable& table, const std::vector<std::string>& columns) {
  std::vector<ColumnSummary> out;
  for (const auto& c : columns) {
    const auto v = table.values(c);
    out.push_back(summarize_values(c, v));
  }
  return out;
}

std::string summary_csv(const std::vector<ColumnSummary>& rows) {
  std::ostringstream os;
  os << "column,count,mean,std,min,max\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%zu,%.17g,%.17g,%.17g,%.17g\n", r.count, r.mean, r.std, r.min, r.max);
    os << r.column << buf;
  }
  return os.str();
}

}  // namespace aegis::diag
