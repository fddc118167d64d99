#include "aegis/train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <tuple>

#include "aegis/transport/transport.hpp"
#include "aegis/util/random.hpp"

namespace aegis::train {

using ag::Tensor;
using json = nlohmann::json;

const std::vector<std::string> kMetricsColumns = {"step",       "fm_loss_raw", "holdout_ce", "ot_penalty",
                                                  "throttle",   "energy_shed", "avg_cos",    "avg_alpha",
                                                  "preclip_norm", "fm_eval",   "fm_eval_ema"};

std::uint64_t vlm_init_seed(std::uint64_t seed) { return mix_seed(seed, 0x564C4DULL); }
std::uint64_t expert_init_seed(std::uint64_t seed) { return mix_seed(seed, 0x455850ULL); }
std::uint64_t lora_init_seed(std::uint64_t seed) { return mix_seed(seed, 0x4C4F5241ULL); }

namespace {

constexpr std::uint64_t kFlowStream = 0x464C4F57ULL;
constexpr std::uint64_t kFlowEvalStream = 0x4556414CULL;
constexpr std::uint64_t kPretrainStream = 0x50524554ULL;

void check_finite(double v, const std::string& what, std::size_t step) {
  if (!std::isfinite(v)) {
    throw DivergenceError(what + " became non-finite at step " + std::to_string(step) + " (value " + std::to_string(v) + ")");
  }
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

double vlm_distance(const models::ToyVLM& a, const models::ToyVLM& b) {
  double sq = 0.0;
  for (const auto& e : b.params().entries()) {
    if (!a.params().contains(e.name)) continue;
    auto x = a.params().get(e.name).data();
    auto y = e.param.data();
    for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - y[i]) * (x[i] - y[i]);
  }
  return std::sqrt(sq);
}

}  // namespace

PretrainResult pretrain(models::ToyVLM& model, const tasks::World& world, const tasks::HoldoutSet& holdout,
                        const PretrainConfig& cfg, std::uint64_t seed, std::ostream* log) {
  (void)seed;
  PretrainResult r;
  const double target = cfg.target_fraction * std::log(static_cast<double>(model.config().vocab_size));
  r.initial_ce = tasks::eval_holdout(model, holdout);
  r.final_ce = r.initial_ce;
  r.curve.emplace_back(0, r.initial_ce);
  if (log) *log << "pretrain: step 0 holdout_ce " << r.initial_ce << " target " << target << "\n";
  if (r.initial_ce <= target) {
    r.reached_target = true;
    return r;
  }
  AdamW opt({0.9, 0.999, 1e-8, 0.0});
  opt.add_group(model.params(), cfg.lr);
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    auto batch = tasks::collate_pretrain(tasks::gen_pretrain(world, tasks::Stream::pretrain, step * cfg.batch, cfg.batch),
                                         world.config());
    auto out = model.forward(batch.seq, false);
    Tensor loss = ag::cross_entropy(model.logits_at(out.final_hidden, batch.predict_rows), batch.targets);
    check_finite(loss.item(), "pretrain loss", step + 1);
    ag::backward(loss);
    clip_grad_norm({&model.params()}, 1.0);
    opt.step(warmup_scale(step, cfg.warmup));
    model.params().zero_grads();
    r.steps = step + 1;
    if (r.steps % cfg.eval_every == 0 || r.steps == cfg.max_steps) {
      r.final_ce = tasks::eval_holdout(model, holdout);
      check_finite(r.final_ce, "pretrain holdout CE", r.steps);
      r.curve.emplace_back(r.steps, r.final_ce);
      if (log) *log << "pretrain: step " << r.steps << " loss " << loss.item() << " holdout_ce " << r.final_ce << "\n";
      if (r.final_ce <= target) {
        r.reached_target = true;
        break;
      }
    }
  }
  for (auto& e : model.params().entries()) e.param.clear_grad();
  (void)kPretrainStream;
  return r;
}

FlowDraw draw_flow(std::uint64_t seed, std::size_t batch, std::size_t horizon, std::size_t action_dim, double alpha) {
  Rng rng(seed);
  FlowDraw d;
  d.t.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) d.t.push_back(rng.beta_a1(alpha));
  d.noise = rng.normal_vector(batch * horizon * action_dim);
  return d;
}

FlowTargets flow_targets(const std::vector<double>& actions, const FlowDraw& draw, std::size_t batch, std::size_t horizon,
                         std::size_t action_dim) {
  const std::size_t per = horizon * action_dim;
  if (actions.size() != batch * per || draw.noise.size() != batch * per || draw.t.size() != batch) {
    throw ag::ShapeError("flow_targets: action, noise and time sizes disagree");
  }
  std::vector<double> noisy(batch * per), target(batch * per);
  for (std::size_t b = 0; b < batch; ++b) {
    const double t = draw.t[b];
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t k = b * per + i;
      noisy[k] = t * actions[k] + (1.0 - t) * draw.noise[k];
      target[k] = actions[k] - draw.noise[k];
    }
  }
  return {Tensor::from({batch, horizon, action_dim}, std::move(noisy)), Tensor::from({batch, horizon, action_dim}, std::move(target))};
}

std::string metrics_header() {
  std::string s;
  for (std::size_t i = 0; i < kMetricsColumns.size(); ++i) s += (i ? "," : "") + kMetricsColumns[i];
  return s;
}

std::string metrics_row(const StepRecord& r) {
  std::ostringstream os;
  os << r.step;
  for (const auto* v : {&r.fm_loss_raw, &r.holdout_ce, &r.ot_penalty, &r.throttle, &r.energy_shed, &r.avg_cos, &r.avg_alpha,
                        &r.preclip_norm, &r.fm_eval, &r.fm_eval_ema})
    os << ',' << cell(*v);
  return os.str();
}

Trainer::Trainer(TrainingConfig cfg, const models::ToyVLM& pretrained, const anchor::AnchorStatistics* anchor,
                 const tasks::HoldoutSet& holdout)
    : cfg_(std::move(cfg)),
      world_(cfg_.task, cfg_.world_seed),
      anchor_(anchor),
      holdout_(holdout),
      vlm_(cfg_.model, vlm_init_seed(cfg_.world_seed)),
      expert_(cfg_.expert, cfg_.model.d_model, expert_init_seed(cfg_.seed)),
      ema_(expert_.params(), cfg_.ema_decay),
      opt_({cfg_.beta1, cfg_.beta2, cfg_.adam_eps, cfg_.weight_decay}),
      quantizer_{cfg_.discrete_bins} {
  cfg_.validate();
  if (pretrained.has_lora()) throw std::invalid_argument("Trainer: the pretrained model must not carry adapters");
  vlm_.copy_values_from(pretrained);
  ema_view_ = std::make_unique<models::FlowExpert>(cfg_.expert, cfg_.model.d_model, expert_init_seed(cfg_.seed));

  switch (cfg_.condition) {
    case Condition::aegis:
      if (!anchor_) throw std::invalid_argument("Trainer: the aegis condition requires an anchor");
      if (anchor_->num_layers != cfg_.model.num_layers || anchor_->d_model != cfg_.model.d_model ||
          anchor_->model_fingerprint != cfg_.model.fingerprint()) {
        throw std::invalid_argument("Trainer: anchor was built for '" + anchor_->model_fingerprint + "'");
      }
      groups_ = isolation::build_groups(vlm_.params(), cfg_.granularity, cfg_.exempt_residual);
      break;
    case Condition::lora:
      vlm_.apply_lora(cfg_.lora, lora_init_seed(cfg_.seed));
      break;
    case Condition::ewc:
      ewc_ = estimate_fisher(vlm_, world_, cfg_.fisher_samples);
      break;
    case Condition::stopgrad:
    case Condition::naive:
      break;
  }
  if (cfg_.condition == Condition::stopgrad && !cfg_.discrete_head) {
    for (auto& e : vlm_.params().entries()) e.param.set_requires_grad(false);
  }
  opt_.add_group(vlm_.params(), cfg_.vlm_lr());
  opt_.add_group(expert_.params(), cfg_.lr_expert);

  const std::size_t n = cfg_.fm_eval_size, chunk = 32;
  for (std::size_t first = 0; first < n; first += chunk) {
    const std::size_t m = std::min(chunk, n - first);
    MicroBatch mb;
    mb.batch = tasks::collate_actions(tasks::gen_actions(world_, tasks::Stream::diagnostics, first, m), cfg_.task);
    mb.draw = draw_flow(mix_seed(cfg_.world_seed, kFlowEvalStream, first), m, cfg_.task.horizon, cfg_.task.action_dim, cfg_.fm_time_alpha);
    fm_eval_set_.push_back(std::move(mb));
  }
}

Trainer::~Trainer() = default;

Trainer::MicroBatch Trainer::micro_batch(std::size_t step_index, std::size_t micro) const {
  const std::size_t index = step_index * cfg_.grad_accum + micro;
  // Each run seed reads its own block of the action stream.
  const std::size_t first = (static_cast<std::size_t>(cfg_.seed) << 32) + index * cfg_.micro_batch;
  MicroBatch mb;
  mb.batch = tasks::collate_actions(tasks::gen_actions(world_, tasks::Stream::actions, first, cfg_.micro_batch), cfg_.task);
  mb.draw = draw_flow(mix_seed(cfg_.seed, kFlowStream, index), cfg_.micro_batch, cfg_.task.horizon, cfg_.task.action_dim,
                      cfg_.fm_time_alpha);
  return mb;
}

double Trainer::holdout_ce() const { return tasks::eval_holdout(vlm_, holdout_); }

std::pair<double, double> Trainer::fm_eval() const {
  ag::NoGradGuard no_grad;
  ema_.copy_to(ema_view_->params());
  double raw = 0.0, ema = 0.0;
  std::size_t count = 0;
  for (const auto& mb : fm_eval_set_) {
    const std::size_t B = mb.batch.seq.batch;
    auto ft = flow_targets(mb.batch.actions, mb.draw, B, cfg_.task.horizon, cfg_.task.action_dim);
    auto out = vlm_.forward(mb.batch.seq, false);
    raw += ag::mse_loss(expert_.forward(ft.noisy, mb.draw.t, out.final_hidden, mb.batch.seq.mask), ft.target).item() *
           static_cast<double>(B);
    ema += ag::mse_loss(ema_view_->forward(ft.noisy, mb.draw.t, out.final_hidden, mb.batch.seq.mask), ft.target).item() *
           static_cast<double>(B);
    count += B;
  }
  return {raw / static_cast<double>(count), ema / static_cast<double>(count)};
}

double Trainer::micro_step(const MicroBatch& mb, std::optional<double>& ot_out) {
  const std::size_t B = mb.batch.seq.batch;
  const double inv_accum = 1.0 / static_cast<double>(cfg_.grad_accum);
  auto ft = flow_targets(mb.batch.actions, mb.draw, B, cfg_.task.horizon, cfg_.task.action_dim);

  if (cfg_.condition == Condition::stopgrad) {
    Tensor context;
    Tensor ce;
    if (cfg_.discrete_head) {
      auto db = build_discrete_batch(mb.batch, cfg_.task, quantizer_, cfg_.discrete_keyframes);
      auto out = vlm_.forward(db.seq, false);
      ce = ag::cross_entropy(vlm_.logits_at(out.final_hidden, db.predict_rows), db.targets);
      context = ag::slice(out.final_hidden, 1, 0, db.prefix_len).detach();
    } else {
      ag::NoGradGuard no_grad;
      context = vlm_.forward(mb.batch.seq, false).final_hidden;
    }
    Tensor mse = ag::mse_loss(expert_.forward(ft.noisy, mb.draw.t, context, mb.batch.seq.mask), ft.target);
    Tensor loss = ag::scale(mse, cfg_.fm_scale * inv_accum);
    if (ce.defined()) loss = ag::add(loss, ag::scale(ce, inv_accum));
    ag::backward(loss);
    return mse.item();
  }

  const bool aegis = cfg_.condition == Condition::aegis;
  auto out = vlm_.forward(mb.batch.seq, aegis);
  Tensor mse = ag::mse_loss(expert_.forward(ft.noisy, mb.draw.t, out.final_hidden, mb.batch.seq.mask), ft.target);
  Tensor l_fm = ag::scale(mse, cfg_.fm_scale * inv_accum);
  if (aegis) {
    auto penalty = transport::total_penalty(out.hidden, mb.batch.seq.mask, *anchor_, cfg_.transport);
    ot_out = ot_out.value_or(0.0) + penalty.total.item() * inv_accum;
    isolation::dual_backward(l_fm, ag::scale(penalty.total, inv_accum), vlm_.params(), &expert_.params());
  } else {
    ag::backward(l_fm);
  }
  return mse.item();
}

StepRecord Trainer::baseline() {
  StepRecord r;
  r.step = 0;
  r.holdout_ce = holdout_ce();
  std::tie(r.fm_eval, r.fm_eval_ema) = fm_eval();
  return r;
}

StepRecord Trainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t index = steps_done_;
  StepRecord r;
  r.step = index + 1;

  vlm_.params().zero_grads();
  expert_.params().zero_grads();
  vlm_.params().clear_slots();
  expert_.params().clear_slots();

  double fm = 0.0;
  std::optional<double> ot;
  for (std::size_t m = 0; m < cfg_.grad_accum; ++m) fm += micro_step(micro_batch(index, m), ot);
  r.fm_loss_raw = fm / static_cast<double>(cfg_.grad_accum);
  check_finite(*r.fm_loss_raw, "flow-matching loss", r.step);

  if (cfg_.condition == Condition::aegis) {
    check_finite(*ot, "transport penalty", r.step);
    expert_.params().load_grads_from(ag::GradSlot::task);
    last_report_ = isolation::project_all(groups_, vlm_.params(), cfg_.projection_eps);
    r.ot_penalty = ot;
    r.throttle = last_report_->throttle_rate;
    r.energy_shed = last_report_->energy_shed_ratio;
    r.avg_cos = last_report_->avg_cos;
    r.avg_alpha = last_report_->avg_alpha;
  } else if (cfg_.condition == Condition::ewc) {
    add_ewc_gradient(vlm_.params(), *ewc_, cfg_.ewc_lambda);
  }

  const double vlm_norm = grad_norm(vlm_.params());
  check_finite(vlm_norm, "VLM gradient norm", r.step);
  r.preclip_norm = vlm_norm;
  if (last_report_ && cfg_.condition == Condition::aegis) last_report_->preclip_norm = vlm_norm;
  if (cfg_.clip_vlm_separately) {
    clip_grad_norm({&vlm_.params()}, cfg_.clip_norm);
    clip_grad_norm({&expert_.params()}, cfg_.clip_norm);
  } else {
    clip_grad_norm({&vlm_.params(), &expert_.params()}, cfg_.clip_norm);
  }
  opt_.step(warmup_scale(index, cfg_.warmup));
  ema_.update(expert_.params());
  ++steps_done_;
  step_seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (steps_done_ % cfg_.eval_every == 0) {
    r.holdout_ce = holdout_ce();
    check_finite(*r.holdout_ce, "holdout CE", r.step);
  }
  if (steps_done_ % cfg_.fm_eval_every == 0 || steps_done_ == cfg_.steps) std::tie(r.fm_eval, r.fm_eval_ema) = fm_eval();
  return r;
}

std::string RunSummary::to_json() const {
  json j = {{"schema_version", kMetricsSchemaVersion},
            {"condition", condition},
            {"seed", seed},
            {"world_seed", world_seed},
            {"steps", steps},
            {"holdout_initial", holdout_initial},
            {"holdout_final", holdout_final},
            {"holdout_delta", holdout_delta},
            {"fm_eval_initial", fm_eval_initial},
            {"fm_eval_final", fm_eval_final},
            {"fm_eval_ema_final", fm_eval_ema_final},
            {"fm_reduction", fm_reduction},
            {"vlm_change_norm", vlm_change_norm},
            {"mean_step_seconds", mean_step_seconds},
            {"holdout_sha256", holdout_sha256},
            {"metrics_rows", metrics_rows}};
  return j.dump(2);
}

RunSummary RunSummary::from_json(const std::string& text) {
  json j = json::parse(text);
  RunSummary s;
  s.condition = j.at("condition").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.world_seed = j.at("world_seed").get<std::uint64_t>();
  s.steps = j.at("steps").get<std::size_t>();
  s.holdout_initial = j.at("holdout_initial").get<double>();
  s.holdout_final = j.at("holdout_final").get<double>();
  s.holdout_delta = j.at("holdout_delta").get<double>();
  s.fm_eval_initial = j.at("fm_eval_initial").get<double>();
  s.fm_eval_final = j.at("fm_eval_final").get<double>();
  s.fm_eval_ema_final = j.at("fm_eval_ema_final").get<double>();
  s.fm_reduction = j.at("fm_reduction").get<double>();
  s.vlm_change_norm = j.at("vlm_change_norm").get<double>();
  s.mean_step_seconds = j.at("mean_step_seconds").get<double>();
  s.holdout_sha256 = j.at("holdout_sha256").get<std::string>();
  s.metrics_rows = j.at("metrics_rows").get<std::size_t>();
  return s;
}

RunSummary run_training(const TrainingConfig& cfg, const models::ToyVLM& pretrained, const anchor::AnchorStatistics* anchor,
                        const tasks::HoldoutSet& holdout, const std::optional<std::filesystem::path>& run_dir,
                        std::ostream* log) {
  Trainer trainer(cfg, pretrained, anchor, holdout);
  std::ofstream csv;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    cfg.save(*run_dir / "config.ini");
    csv.open(*run_dir / "metrics.csv");
    if (!csv) throw std::runtime_error("run_training: cannot write metrics in '" + run_dir->string() + "'");
    csv << metrics_header() << '\n';
  }
  RunSummary s;
  s.condition = to_string(cfg.condition);
  s.seed = cfg.seed;
  s.world_seed = cfg.world_seed;
  s.holdout_sha256 = holdout.sha256();

  StepRecord first = trainer.baseline();
  s.holdout_initial = s.holdout_final = *first.holdout_ce;
  s.fm_eval_initial = s.fm_eval_final = *first.fm_eval;
  s.fm_eval_ema_final = *first.fm_eval_ema;
  if (csv.is_open()) csv << metrics_row(first) << '\n';
  s.metrics_rows = 1;

  for (std::size_t i = 0; i < cfg.steps; ++i) {
    StepRecord r = trainer.step();
    if (csv.is_open()) csv << metrics_row(r) << '\n';
    ++s.metrics_rows;
    if (r.fm_eval) {
      s.fm_eval_final = *r.fm_eval;
      s.fm_eval_ema_final = *r.fm_eval_ema;
    }
    if (r.holdout_ce) {
      s.holdout_final = *r.holdout_ce;
      if (log) {
        *log << s.condition << " seed " << cfg.seed << " step " << r.step << " fm " << *r.fm_loss_raw << " holdout "
             << *r.holdout_ce;
        if (r.fm_eval) *log << " fm_eval " << *r.fm_eval;
        if (r.throttle) *log << " throttle " << *r.throttle << " ot " << *r.ot_penalty;
        *log << "\n";
      }
    }
  }
  s.steps = trainer.steps_done();
  s.holdout_delta = s.holdout_final - s.holdout_initial;
  s.fm_reduction = s.fm_eval_initial > 0.0 ? 1.0 - s.fm_eval_final / s.fm_eval_initial : 0.0;
  s.vlm_change_norm = vlm_distance(trainer.vlm(), pretrained);
  s.mean_step_seconds = s.steps ? trainer.seconds_in_steps() / static_cast<double>(s.steps) : 0.0;

  if (run_dir) {
    csv.close();
    std::ofstream(*run_dir / "summary.json") << s.to_json() << '\n';
    trainer.vlm().save(*run_dir / "vlm.ckpt");
    trainer.expert().save(*run_dir / "expert.ckpt");
    models::FlowExpert ema(cfg.expert, cfg.model.d_model, expert_init_seed(cfg.seed));
    trainer.expert_ema().copy_to(ema.params());
    ema.save(*run_dir / "expert_ema.ckpt");
  }
  return s;
}

std::size_t MetricsTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return i;
  throw std::out_of_range("metrics: no column '" + name + "'");
}

std::vector<double> MetricsTable::values(const std::string& name) const {
  const std::size_t c = column(name);
  std::vector<double> out;
  for (const auto& row : rows)
    if (row[c]) out.push_back(*row[c]);
  return out;
}

MetricsTable read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics: cannot open '" + path.string() + "'");
  MetricsTable t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("metrics: '" + path.string() + "' is empty");
  {
    std::stringstream ss(line);
    std::string name;
    while (std::getline(ss, name, ',')) t.columns.push_back(name);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::optional<double>> row;
    std::size_t begin = 0;
    while (true) {
      const std::size_t end = line.find(',', begin);
      const std::string field = line.substr(begin, end == std::string::npos ? std::string::npos : end - begin);
      row.push_back(field.empty() ? std::nullopt : std::optional<double>(std::stod(field)));
      if (end == std::string::npos) break;
      begin = end + 1;
    }
    if (row.size() != t.columns.size()) throw std::runtime_error("metrics: ragged row in '" + path.string() + "'");
    t.rows.push_back(std::move(row));
  }
  return t;
}

Comparison compare_runs(const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.empty()) throw std::invalid_argument("compare: no run directories given");
  Comparison c;
  std::vector<MetricsTable> tables;
  for (const auto& dir : run_dirs) {
    if (!std::filesystem::is_directory(dir)) throw std::runtime_error("compare: '" + dir.string() + "' is not a run directory");
    std::ifstream js(dir / "summary.json");
    if (!js) throw std::runtime_error("compare: '" + dir.string() + "' has no summary.json");
    std::stringstream ss;
    ss << js.rdbuf();
    c.runs.push_back(dir.filename().string());
    c.summaries.push_back(RunSummary::from_json(ss.str()));
    tables.push_back(read_metrics(dir / "metrics.csv"));
  }
  std::map<std::size_t, bool> steps;
  for (const auto& t : tables) {
    const std::size_t sc = t.column("step"), hc = t.column("holdout_ce");
    for (const auto& row : t.rows)
      if (row[hc]) steps[static_cast<std::size_t>(*row[sc])] = true;
  }
  for (const auto& [s, _] : steps) c.eval_steps.push_back(s);
  for (const auto& t : tables) {
    const std::size_t sc = t.column("step"), hc = t.column("holdout_ce"), fc = t.column("fm_eval");
    std::map<std::size_t, std::pair<std::optional<double>, std::optional<double>>> at;
    for (const auto& row : t.rows) at[static_cast<std::size_t>(*row[sc])] = {row[hc], row[fc]};
    std::vector<std::optional<double>> h, f;
    for (std::size_t s : c.eval_steps) {
      auto it = at.find(s);
      h.push_back(it == at.end() ? std::nullopt : it->second.first);
      f.push_back(it == at.end() ? std::nullopt : it->second.second);
    }
    c.holdout.push_back(std::move(h));
    c.fm_eval.push_back(std::move(f));
  }
  return c;
}

std::string Comparison::to_csv() const {
  std::ostringstream os;
  os << "step";
  for (const auto& r : runs) os << ',' << r << ":holdout_ce," << r << ":fm_eval";
  os << '\n';
  for (std::size_t i = 0; i < eval_steps.size(); ++i) {
    os << eval_steps[i];
    for (std::size_t r = 0; r < runs.size(); ++r) os << ',' << cell(holdout[r][i]) << ',' << cell(fm_eval[r][i]);
    os << '\n';
  }
  return os.str();
}

std::string Comparison::deltas_table() const {
  std::ostringstream os;
  os << std::left << std::setw(24) << "run" << std::setw(12) << "condition" << std::setw(14) << "holdout_0" << std::setw(14)
     << "holdout_end" << std::setw(14) << "delta" << std::setw(14) << "fm_0" << std::setw(14) << "fm_end" << "fm_reduction\n";
  os << std::setprecision(6) << std::fixed;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const auto& s = summaries[r];
    os << std::setw(24) << runs[r] << std::setw(12) << s.condition << std::setw(14) << s.holdout_initial << std::setw(14)
       << s.holdout_final << std::setw(14) << s.holdout_delta << std::setw(14) << s.fm_eval_initial << std::setw(14)
       << s.fm_eval_final << s.fm_reduction << '\n';
  }
  return os.str();
}

}  // namespace aegis::train
