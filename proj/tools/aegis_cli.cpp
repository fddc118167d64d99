#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "aegis/anchor/anchor.hpp"
#include "aegis/diag/diagnostics.hpp"
#include "aegis/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace aegis;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed, world_seed;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "INI configuration file")->check(CLI::ExistingFile);
    cmd->add_option("-s,--set", overrides, "Override as section.key=value (repeatable)");
    cmd->add_option("--seed", seed, "Fine-tuning seed (same as --set run.seed=N)");
    cmd->add_option("--world-seed", world_seed, "World / pretraining seed (same as --set run.world_seed=N)");
  }

  train::TrainingConfig load() const {
    auto cfg = config_path.empty() ? train::TrainingConfig{} : train::TrainingConfig::load(config_path);
    for (const auto& o : overrides) cfg.set(o);
    if (seed) cfg.seed = *seed;
    if (world_seed) cfg.world_seed = *world_seed;
    cfg.validate();
    return cfg;
  }
};

fs::path run_root() {
  const char* env = std::getenv("AEGIS_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

// <root>/world-<w>/{pretrain, anchor, seed-<s>/<condition>}
struct Layout {
  fs::path world_dir, seed_dir;
  explicit Layout(const train::TrainingConfig& cfg)
      : world_dir(run_root() / ("world-" + std::to_string(cfg.world_seed))),
        seed_dir(world_dir / ("seed-" + std::to_string(cfg.seed))) {}
  fs::path pretrain_dir() const { return world_dir / "pretrain"; }
  fs::path checkpoint() const { return pretrain_dir() / "vlm.ckpt"; }
  fs::path holdout() const { return pretrain_dir() / "holdout.bin"; }
  fs::path anchor() const { return world_dir / "anchor" / "anchor.bin"; }
  fs::path run(const std::string& name) const { return seed_dir / name; }
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

tasks::HoldoutSet load_holdout(const train::TrainingConfig& cfg, const Layout& layout, const tasks::World& world) {
  if (fs::exists(layout.holdout())) return tasks::HoldoutSet::load(layout.holdout(), cfg.task, cfg.eval_batch);
  return tasks::HoldoutSet::build(world, cfg.holdout_size, cfg.eval_batch);
}

models::ToyVLM load_vlm(const train::TrainingConfig& cfg, const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("no checkpoint at '" + path.string() + "'; run `pretrain` first");
  models::ToyVLM vlm(cfg.model, train::vlm_init_seed(cfg.world_seed));
  vlm.load(path);
  return vlm;
}

// A fresh expert with a zero output layer passes no gradient back into the VLM,
// so the offline diagnostics use a randomly initialized output unless a
// trained expert is given.
models::FlowExpert diagnostic_expert(const train::TrainingConfig& cfg, const std::string& path) {
  auto ecfg = cfg.expert;
  if (path.empty()) ecfg.zero_init_output = false;
  models::FlowExpert expert(ecfg, cfg.model.d_model, train::expert_init_seed(cfg.seed));
  if (!path.empty()) expert.load(path);
  return expert;
}

anchor::AnchorStatistics load_anchor(const train::TrainingConfig& cfg, const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("no anchor at '" + path.string() + "'; run `anchor build` first");
  return anchor::AnchorStatistics::load(path, cfg.model.fingerprint());
}

void cmd_pretrain(const train::TrainingConfig& cfg, const std::string& out_opt) {
  Layout layout(cfg);
  const fs::path out = out_opt.empty() ? layout.pretrain_dir() : fs::path(out_opt);
  tasks::World world(cfg.task, cfg.world_seed);
  auto holdout = tasks::HoldoutSet::build(world, cfg.holdout_size, cfg.eval_batch);
  models::ToyVLM vlm(cfg.model, train::vlm_init_seed(cfg.world_seed));
  auto result = train::pretrain(vlm, world, holdout, cfg.pretrain, cfg.world_seed, &std::cerr);
  fs::create_directories(out);
  vlm.save(out / "vlm.ckpt");
  holdout.save(out / "holdout.bin", cfg.task);
  cfg.save(out / "config.ini");
  std::ostringstream curve;
  curve << "step,holdout_ce\n";
  for (const auto& [s, ce] : result.curve) curve << s << ',' << ce << '\n';
  write_text(out / "pretrain_curve.csv", curve.str());
  std::cout << "pretrain: " << result.steps << " steps, holdout CE " << result.initial_ce << " -> " << result.final_ce
            << (result.reached_target ? "" : " (target not reached)") << "\nbaseline L0 = " << result.final_ce
            << "\nholdout sha256 " << holdout.sha256() << "\nwrote " << out.string() << '\n';
}

void cmd_anchor_build(const train::TrainingConfig& cfg, const std::string& ckpt_opt, const std::string& out_opt) {
  Layout layout(cfg);
  const auto vlm = load_vlm(cfg, ckpt_opt.empty() ? layout.checkpoint() : fs::path(ckpt_opt));
  tasks::World world(cfg.task, cfg.world_seed);
  auto a = anchor::build_anchor(vlm, world, cfg.anchor_samples, cfg.anchor_batch, cfg.anchor_mode);
  const fs::path out = out_opt.empty() ? layout.anchor() : fs::path(out_opt);
  fs::create_directories(out.parent_path());
  a.save(out);
  std::cout << "anchor: " << a.num_layers << " layers x " << a.d_model << " dims from " << a.n_samples << " samples ("
            << a.n_batches << " batches), wrote " << out.string() << '\n';
}

void cmd_train(train::TrainingConfig cfg, const std::string& condition, const std::string& ckpt_opt,
               const std::string& anchor_opt, const std::string& name) {
  cfg.condition = train::parse_condition(condition);
  cfg.validate();
  Layout layout(cfg);
  const auto vlm = load_vlm(cfg, ckpt_opt.empty() ? layout.checkpoint() : fs::path(ckpt_opt));
  tasks::World world(cfg.task, cfg.world_seed);
  const auto holdout = load_holdout(cfg, layout, world);
  std::optional<anchor::AnchorStatistics> anc;
  if (cfg.condition == train::Condition::aegis) anc = load_anchor(cfg, anchor_opt.empty() ? layout.anchor() : fs::path(anchor_opt));
  const fs::path dir = layout.run(name.empty() ? train::to_string(cfg.condition) : name);
  auto s = train::run_training(cfg, vlm, anc ? &*anc : nullptr, holdout, dir, &std::cerr);
  std::cout << s.condition << ": holdout CE " << s.holdout_initial << " -> " << s.holdout_final << " (delta " << s.holdout_delta
            << "), FM MSE " << s.fm_eval_initial << " -> " << s.fm_eval_final << ", " << 1000.0 * s.mean_step_seconds
            << " ms/step\nwrote " << dir.string() << '\n';
}

void cmd_compare(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  auto c = train::compare_runs(paths);
  std::cout << c.deltas_table();
  if (!out.empty()) {
    write_text(out, c.to_csv());
    std::cout << "wrote " << out << '\n';
  }
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
    std::cerr << "wrote " << out << '\n';
  }
}

void cmd_diag_spectrum(const train::TrainingConfig& cfg, const std::string& ckpt_opt, const std::string& expert_opt,
                       const std::vector<std::string>& params, std::size_t k, std::size_t samples, const std::string& out) {
  Layout layout(cfg);
  auto vlm = load_vlm(cfg, ckpt_opt.empty() ? layout.checkpoint() : fs::path(ckpt_opt));
  auto expert = diagnostic_expert(cfg, expert_opt);
  tasks::World world(cfg.task, cfg.world_seed);
  auto batch = diag::spectral_batch(world, samples, cfg.seed, cfg.fm_time_alpha);
  std::vector<std::string> names = params;
  if (names.empty())
    for (std::size_t l = 0; l < cfg.model.num_layers; ++l) names.push_back("llm.layers." + std::to_string(l) + ".mlp.down_proj.weight");
  std::ostringstream os;
  os << "# spectral batch: " << samples << " samples from the diagnostics stream, world " << cfg.world_seed << ", seed " << cfg.seed << '\n';
  os << "parameter,loss,index,sigma,kappa\n";
  for (const auto& name : names) {
    auto r = diag::spectral_asymmetry(vlm, expert, batch, name, k);
    std::cerr << name << ": kappa_" << k << " CE " << r.kappa_ce() << ", MSE " << r.kappa_mse() << '\n';
    for (const auto& [label, spec] : {std::pair{"ce", &r.ce}, std::pair{"mse", &r.mse}}) {
      for (std::size_t i = 0; i < spec->sigma.size(); ++i)
        os << name << ',' << label << ',' << i + 1 << ',' << spec->sigma[i] << ',' << spec->kappa_at(i + 1) << '\n';
    }
  }
  emit(os.str(), out);
}

void cmd_diag_conflict(const train::TrainingConfig& cfg, const std::string& ckpt_opt, const std::string& expert_opt,
                       const std::string& anchor_opt, const std::string& param, std::size_t bins, std::size_t samples,
                       const std::string& out) {
  Layout layout(cfg);
  auto vlm = load_vlm(cfg, ckpt_opt.empty() ? layout.checkpoint() : fs::path(ckpt_opt));
  const auto anc = load_anchor(cfg, anchor_opt.empty() ? layout.anchor() : fs::path(anchor_opt));
  auto expert = diagnostic_expert(cfg, expert_opt);
  tasks::World world(cfg.task, cfg.world_seed);
  auto batch = diag::spectral_batch(world, samples, cfg.seed, cfg.fm_time_alpha);
  diag::capture_dual_gradients(vlm, expert, anc, batch.actions, batch.draw, cfg.fm_scale, cfg.transport);
  auto h = diag::parameter_conflict(vlm.params(), param, bins);
  std::cerr << param << ": " << h.cosines.size() << " rows, " << h.excluded << " excluded, mean |cos| " << h.mean_abs() << '\n';
  emit(h.to_csv(), out);
}

void cmd_diag_drift(const train::TrainingConfig& cfg, const std::string& naive_dir, const std::string& aegis_dir,
                    std::size_t samples, const std::string& out) {
  Layout layout(cfg);
  const auto base = load_vlm(cfg, layout.checkpoint());
  const auto naive = load_vlm(cfg, fs::path(naive_dir.empty() ? layout.run("naive").string() : naive_dir) / "vlm.ckpt");
  const auto aegis_vlm = load_vlm(cfg, fs::path(aegis_dir.empty() ? layout.run("aegis").string() : aegis_dir) / "vlm.ckpt");
  tasks::World world(cfg.task, cfg.world_seed);
  auto batch = tasks::collate_pretrain(tasks::gen_pretrain(world, tasks::Stream::diagnostics, 0, samples), cfg.task);
  auto p = diag::drift_projection(diag::pooled_states(base, batch.seq), diag::pooled_states(naive, batch.seq),
                                  diag::pooled_states(aegis_vlm, batch.seq));
  for (const auto& s : p.sets) {
    const auto [x, y] = s.mean();
    std::cerr << s.label << " mean (" << x << ", " << y << ")\n";
  }
  emit(p.to_csv(), out);
}

void cmd_diag_summarize(const std::string& metrics, const std::string& out) {
  auto table = train::read_metrics(metrics);
  emit(diag::summary_csv(diag::summarize(table)), out);
}

void cmd_suite(const train::TrainingConfig& base_cfg, const std::vector<std::uint64_t>& seeds,
               const std::vector<std::string>& conditions) {
  std::vector<fs::path> dirs;
  for (auto seed : seeds) {
    auto cfg = base_cfg;
    cfg.seed = seed;
    Layout layout(cfg);
    if (!fs::exists(layout.checkpoint())) cmd_pretrain(cfg, "");
    if (!fs::exists(layout.anchor())) cmd_anchor_build(cfg, "", "");
    for (const auto& c : conditions) {
      cmd_train(cfg, c, "", "", "");
      dirs.push_back(layout.run(train::to_string(train::parse_condition(c))));
    }
  }
  std::vector<std::string> names;
  for (const auto& d : dirs) names.push_back(d.string());
  cmd_compare(names, (run_root() / "comparison.csv").string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient isolation research harness (toy VLM + flow-matching expert)"};
  app.require_subcommand(1);

  Common common;
  std::string out, checkpoint, expert_path, anchor_path, name, condition = "naive";

  auto* pre = app.add_subcommand("pretrain", "Train the toy VLM on its native task and freeze the holdout set");
  common.attach(pre);
  pre->add_option("-o,--out", out, "Output directory (default <run root>/world-<w>/pretrain)");

  auto* anc = app.add_subcommand("anchor", "Anchor statistics");
  anc->require_subcommand(1);
  auto* anc_build = anc->add_subcommand("build", "Record per-layer activation statistics of the pretrained model");
  common.attach(anc_build);
  anc_build->add_option("--checkpoint", checkpoint, "Pretrained checkpoint");
  anc_build->add_option("-o,--out", out, "Anchor file");

  auto* trn = app.add_subcommand("train", "Fine-tune on the action task under one condition");
  common.attach(trn);
  trn->add_option("--condition", condition, "naive | stopgrad | lora | aegis | ewc")
      ->check(CLI::IsMember({"naive", "stopgrad", "lora", "aegis", "ewc"}));
  trn->add_option("--checkpoint", checkpoint, "Pretrained checkpoint");
  trn->add_option("--anchor", anchor_path, "Anchor file (aegis only)");
  trn->add_option("--name", name, "Run directory name (default: the condition)");

  std::vector<std::string> dirs;
  auto* cmp = app.add_subcommand("compare", "Align trajectories and final deltas of several runs");
  cmp->add_option("runs", dirs, "Run directories")->required();
  cmp->add_option("-o,--out", out, "Trajectory CSV");

  auto* dg = app.add_subcommand("diag", "Offline analyses");
  dg->require_subcommand(1);
  std::vector<std::string> params;
  std::string param = "llm.layers.1.mlp.down_proj.weight", naive_dir, aegis_dir, metrics;
  std::size_t k = 20, samples = 128, bins = 20;
  auto* spec = dg->add_subcommand("spectrum", "Singular spectra of CE and flow-matching gradients");
  common.attach(spec);
  spec->add_option("--param", params, "Matrix parameter (default: every MLP down-projection)");
  spec->add_option("-k", k, "Spectral concentration rank");
  spec->add_option("--samples", samples, "Samples per gradient batch");
  spec->add_option("--checkpoint", checkpoint, "Model checkpoint");
  spec->add_option("--expert", expert_path, "Expert checkpoint (default: fresh expert with a random output layer)");
  spec->add_option("-o,--out", out, "Output CSV");
  auto* conf = dg->add_subcommand("conflict", "Per-row cosine between task and anchor gradients");
  common.attach(conf);
  conf->add_option("--param", param, "Matrix parameter");
  conf->add_option("--bins", bins, "Histogram bins");
  conf->add_option("--samples", samples, "Samples in the gradient batch");
  conf->add_option("--checkpoint", checkpoint, "Model checkpoint");
  conf->add_option("--expert", expert_path, "Expert checkpoint (default: fresh expert with a random output layer)");
  conf->add_option("--anchor", anchor_path, "Anchor file");
  conf->add_option("-o,--out", out, "Output CSV");
  auto* drift = dg->add_subcommand("drift", "Project pooled final states onto the base-to-naive drift plane");
  common.attach(drift);
  drift->add_option("--naive", naive_dir, "Naive run directory");
  drift->add_option("--aegis", aegis_dir, "AEGIS run directory");
  drift->add_option("--samples", samples, "Pretrain samples to embed");
  drift->add_option("-o,--out", out, "Output CSV");
  auto* summ = dg->add_subcommand("summarize", "Mean/std/min/max of the projection metrics");
  summ->add_option("metrics", metrics, "metrics.csv")->required()->check(CLI::ExistingFile);
  summ->add_option("-o,--out", out, "Output CSV");

  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> conditions{"naive", "stopgrad", "lora", "aegis", "ewc"};
  auto* suite = app.add_subcommand("suite", "Pretrain once, build the anchor and train every condition for several seeds");
  common.attach(suite);
  suite->add_option("--seeds", seeds, "Seeds")->delimiter(',');
  suite->add_option("--conditions", conditions, "Conditions")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pre) cmd_pretrain(common.load(), out);
    else if (*anc_build) cmd_anchor_build(common.load(), checkpoint, out);
    else if (*trn) cmd_train(common.load(), condition, checkpoint, anchor_path, name);
    else if (*cmp) cmd_compare(dirs, out);
    else if (*spec) cmd_diag_spectrum(common.load(), checkpoint, expert_path, params, k, samples, out);
    else if (*conf) cmd_diag_conflict(common.load(), checkpoint, expert_path, anchor_path, param, bins, samples, out);
    else if (*drift) cmd_diag_drift(common.load(), naive_dir, aegis_dir, samples, out);
    else if (*summ) cmd_diag_summarize(metrics, out);
    else if (*suite) cmd_suite(common.load(), seeds, conditions);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
