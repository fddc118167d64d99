#include "aegis/train/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace aegis::train {

namespace pt = boost::property_tree;

Condition parse_condition(const std::string& text) {
  if (text == "naive") return Condition::naive;
  if (text == "stopgrad") return Condition::stopgrad;
  if (text == "lora") return Condition::lora;
  if (text == "aegis") return Condition::aegis;
  if (text == "ewc") return Condition::ewc;
  throw std::invalid_argument("unknown condition '" + text + "' (expected naive, stopgrad, lora, aegis or ewc)");
}

std::string to_string(Condition c) {
  switch (c) {
    case Condition::naive: return "naive";
    case Condition::stopgrad: return "stopgrad";
    case Condition::lora: return "lora";
    case Condition::aegis: return "aegis";
    case Condition::ewc: return "ewc";
  }
  return "?";
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// One table drives reading, writing and overrides so the three never drift.
struct Field {
  std::string key;  // section.name
  std::function<std::string(const TrainingConfig&)> get;
  std::function<void(TrainingConfig&, const std::string&)> put;
};

template <class T>
Field num(std::string key, T TrainingConfig::*member) {
  return {std::move(key), [member](const TrainingConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt(c.*member);
            else return std::to_string(c.*member);
          },
          [member](TrainingConfig& c, const std::string& v) {
            if constexpr (std::is_floating_point_v<T>) c.*member = std::stod(v);
            else c.*member = static_cast<T>(std::stoull(v));
          }};
}

Field flag(std::string key, bool TrainingConfig::*member) {
  return {std::move(key), [member](const TrainingConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [member](TrainingConfig& c, const std::string& v) {
            if (v != "true" && v != "false") throw std::invalid_argument("expected true or false, got '" + v + "'");
            c.*member = v == "true";
          }};
}

template <class S, class T>
Field sub(std::string key, S TrainingConfig::*outer, T S::*inner) {
  return {std::move(key), [outer, inner](const TrainingConfig& c) {
            if constexpr (std::is_same_v<T, bool>) return std::string((c.*outer).*inner ? "true" : "false");
            else if constexpr (std::is_floating_point_v<T>) return fmt((c.*outer).*inner);
            else if constexpr (std::is_same_v<T, std::string>) return (c.*outer).*inner;
            else return std::to_string((c.*outer).*inner);
          },
          [outer, inner](TrainingConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<T, bool>) {
              if (v != "true" && v != "false") throw std::invalid_argument("expected true or false, got '" + v + "'");
              (c.*outer).*inner = v == "true";
            } else if constexpr (std::is_floating_point_v<T>) (c.*outer).*inner = std::stod(v);
            else if constexpr (std::is_same_v<T, std::string>) (c.*outer).*inner = v;
            else (c.*outer).*inner = static_cast<T>(std::stoull(v));
          }};
}

const std::vector<Field>& fields() {
  using C = TrainingConfig;
  static const std::vector<Field> table = {
      {"run.condition", [](const C& c) { return to_string(c.condition); },
       [](C& c, const std::string& v) { c.condition = parse_condition(v); }},
      num("run.seed", &C::seed),
      num("run.world_seed", &C::world_seed),
      num("run.steps", &C::steps),
      num("run.warmup", &C::warmup),
      num("run.eval_every", &C::eval_every),
      num("run.holdout_size", &C::holdout_size),
      num("run.eval_batch", &C::eval_batch),
      num("run.fm_eval_size", &C::fm_eval_size),
      num("run.fm_eval_every", &C::fm_eval_every),
      num("optim.lr_vlm", &C::lr_vlm),
      num("optim.lr_expert", &C::lr_expert),
      num("optim.lr_vlm_stopgrad", &C::lr_vlm_stopgrad),
      num("optim.micro_batch", &C::micro_batch),
      num("optim.grad_accum", &C::grad_accum),
      num("optim.clip_norm", &C::clip_norm),
      flag("optim.clip_vlm_separately", &C::clip_vlm_separately),
      num("optim.beta1", &C::beta1),
      num("optim.beta2", &C::beta2),
      num("optim.eps", &C::adam_eps),
      num("optim.weight_decay", &C::weight_decay),
      num("flow.time_alpha", &C::fm_time_alpha),
      num("flow.loss_scale", &C::fm_scale),
      num("flow.ema_decay", &C::ema_decay),
      sub("model.num_layers", &C::model, &models::ToyVLMConfig::num_layers),
      sub("model.d_model", &C::model, &models::ToyVLMConfig::d_model),
      sub("model.num_heads", &C::model, &models::ToyVLMConfig::num_heads),
      sub("model.vocab_size", &C::model, &models::ToyVLMConfig::vocab_size),
      sub("model.max_seq_len", &C::model, &models::ToyVLMConfig::max_seq_len),
      sub("model.mlp_ratio", &C::model, &models::ToyVLMConfig::mlp_ratio),
      sub("model.obs_tokens", &C::model, &models::ToyVLMConfig::obs_tokens),
      sub("model.d_obs", &C::model, &models::ToyVLMConfig::d_obs),
      sub("expert.d_expert", &C::expert, &models::ExpertConfig::d_expert),
      sub("expert.num_heads", &C::expert, &models::ExpertConfig::num_heads),
      sub("expert.num_blocks", &C::expert, &models::ExpertConfig::num_blocks),
      sub("expert.horizon", &C::expert, &models::ExpertConfig::horizon),
      sub("expert.action_dim", &C::expert, &models::ExpertConfig::action_dim),
      sub("expert.mlp_ratio", &C::expert, &models::ExpertConfig::mlp_ratio),
      sub("expert.zero_init_output", &C::expert, &models::ExpertConfig::zero_init_output),
      sub("task.vocab_size", &C::task, &tasks::TaskConfig::vocab_size),
      sub("task.text_vocab", &C::task, &tasks::TaskConfig::text_vocab),
      sub("task.obs_tokens", &C::task, &tasks::TaskConfig::obs_tokens),
      sub("task.d_obs", &C::task, &tasks::TaskConfig::d_obs),
      sub("task.horizon", &C::task, &tasks::TaskConfig::horizon),
      sub("task.action_dim", &C::task, &tasks::TaskConfig::action_dim),
      sub("task.question_types", &C::task, &tasks::TaskConfig::question_types),
      sub("task.bucket_dims", &C::task, &tasks::TaskConfig::bucket_dims),
      sub("task.max_fillers", &C::task, &tasks::TaskConfig::max_fillers),
      sub("task.action_rank", &C::task, &tasks::TaskConfig::action_rank),
      sub("task.action_drift", &C::task, &tasks::TaskConfig::action_drift),
      sub("task.action_noise", &C::task, &tasks::TaskConfig::action_noise),
      sub("lora.rank", &C::lora, &models::LoRAConfig::rank),
      sub("lora.alpha", &C::lora, &models::LoRAConfig::alpha),
      sub("lora.target_pattern", &C::lora, &models::LoRAConfig::target_pattern),
      {"aegis.granularity", [](const C& c) { return isolation::to_string(c.granularity); },
       [](C& c, const std::string& v) { c.granularity = isolation::parse_granularity(v); }},
      num("aegis.projection_eps", &C::projection_eps),
      flag("aegis.exempt_residual", &C::exempt_residual),
      sub("aegis.ot_eps", &C::transport, &transport::TransportConfig::eps),
      sub("aegis.ot_scale", &C::transport, &transport::TransportConfig::scale),
      {"aegis.ot_normalization",
       [](const C& c) { return std::string(c.transport.normalization == transport::Normalization::mean ? "mean" : "sum"); },
       [](C& c, const std::string& v) {
         if (v == "mean") c.transport.normalization = transport::Normalization::mean;
         else if (v == "sum") c.transport.normalization = transport::Normalization::sum;
         else throw std::invalid_argument("ot_normalization must be mean or sum, got '" + v + "'");
       }},
      num("ewc.lambda", &C::ewc_lambda),
      num("ewc.fisher_samples", &C::fisher_samples),
      num("stopgrad.bins", &C::discrete_bins),
      num("stopgrad.keyframes", &C::discrete_keyframes),
      flag("stopgrad.discrete_head", &C::discrete_head),
      sub("pretrain.max_steps", &C::pretrain, &PretrainConfig::max_steps),
      sub("pretrain.batch", &C::pretrain, &PretrainConfig::batch),
      sub("pretrain.lr", &C::pretrain, &PretrainConfig::lr),
      sub("pretrain.warmup", &C::pretrain, &PretrainConfig::warmup),
      sub("pretrain.eval_every", &C::pretrain, &PretrainConfig::eval_every),
      sub("pretrain.target_fraction", &C::pretrain, &PretrainConfig::target_fraction),
      num("anchor.samples", &C::anchor_samples),
      num("anchor.batch", &C::anchor_batch),
      {"anchor.variance_mode",
       [](const C& c) { return std::string(c.anchor_mode == anchor::VarianceMode::pooled ? "pooled" : "batch_average"); },
       [](C& c, const std::string& v) {
         if (v == "pooled") c.anchor_mode = anchor::VarianceMode::pooled;
         else if (v == "batch_average") c.anchor_mode = anchor::VarianceMode::batch_average;
         else throw std::invalid_argument("variance_mode must be batch_average or pooled, got '" + v + "'");
       }},
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace

void TrainingConfig::validate() const {
  model.validate();
  expert.validate();
  task.validate();
  transport.validate();
  if (steps > 0 && steps <= warmup) throw std::invalid_argument("TrainingConfig: steps must exceed warmup");
  if (eval_every == 0 || (steps > 0 && steps % eval_every != 0)) {
    throw std::invalid_argument("TrainingConfig: eval_every must divide steps");
  }
  if (!(lr_vlm > 0.0 && lr_expert > 0.0 && lr_vlm_stopgrad > 0.0)) throw std::invalid_argument("TrainingConfig: learning rates must be positive");
  if (micro_batch == 0 || grad_accum == 0) throw std::invalid_argument("TrainingConfig: batch sizes must be positive");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("TrainingConfig: clip_norm must be positive");
  if (!(fm_time_alpha > 0.0)) throw std::invalid_argument("TrainingConfig: time_alpha must be positive");
  if (holdout_size == 0 || eval_batch == 0 || fm_eval_size == 0 || fm_eval_every == 0) throw std::invalid_argument("TrainingConfig: eval sizes must be positive");
  if (model.vocab_size != task.vocab_size || model.obs_tokens != task.obs_tokens || model.d_obs != task.d_obs) {
    throw std::invalid_argument("TrainingConfig: model and task disagree on vocabulary or observation layout");
  }
  if (expert.horizon != task.horizon || expert.action_dim != task.action_dim) {
    throw std::invalid_argument("TrainingConfig: expert and task disagree on horizon or action_dim");
  }
  if (task.pretrain_seq_len() > model.max_seq_len) throw std::invalid_argument("TrainingConfig: pretrain sequences exceed max_seq_len");
  if (discrete_bins == 0 || discrete_bins > model.vocab_size) throw std::invalid_argument("TrainingConfig: bins must lie in [1, V]");
  if (condition == Condition::stopgrad && discrete_head && model.vocab_size - discrete_bins < task.text_vocab) {
    throw std::invalid_argument("TrainingConfig: discrete bin tokens overlap the text vocabulary");
  }
  if (discrete_keyframes == 0 || discrete_keyframes > task.horizon) throw std::invalid_argument("TrainingConfig: keyframes must lie in [1, H]");
  if (condition == Condition::stopgrad && discrete_head &&
      task.action_seq_len() + discrete_keyframes * task.action_dim > model.max_seq_len) {
    throw std::invalid_argument("TrainingConfig: discrete action tokens exceed max_seq_len");
  }
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw std::invalid_argument("TrainingConfig: ema_decay must lie in [0, 1]");
  if (!(ewc_lambda >= 0.0)) throw std::invalid_argument("TrainingConfig: ewc lambda must be non-negative");
  if (pretrain.batch == 0 || pretrain.eval_every == 0 || !(pretrain.lr > 0.0)) throw std::invalid_argument("TrainingConfig: bad pretrain settings");
  if (anchor_samples == 0 || anchor_batch == 0) throw std::invalid_argument("TrainingConfig: anchor sizes must be positive");
}

std::string TrainingConfig::to_ini() const {
  pt::ptree tree;
  for (const auto& f : fields()) tree.put(pt::ptree::path_type(f.key, '.'), f.get(*this));
  std::ostringstream os;
  pt::write_ini(os, tree);
  return os.str();
}

TrainingConfig TrainingConfig::from_ini_string(const std::string& text) {
  pt::ptree tree;
  std::istringstream is(text);
  pt::read_ini(is, tree);
  TrainingConfig c;
  std::map<std::string, bool> known;
  for (const auto& f : fields()) known[f.key] = true;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw std::invalid_argument("config: key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      if (!known.count(full)) throw std::invalid_argument("config: unknown key '" + full + "'");
      try {
        field(full).put(c, value.data());
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("config: bad value for '" + full + "': " + e.what());
      }
    }
  }
  c.validate();
  return c;
}

TrainingConfig TrainingConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_ini_string(ss.str());
}

void TrainingConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("config: cannot write '" + path.string() + "'");
  out << to_ini();
}

void TrainingConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override '" + assignment + "' is not of the form section.key=value");
  const std::string key = assignment.substr(0, eq), value = assignment.substr(eq + 1);
  try {
    field(key).put(*this, value);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("override '" + assignment + "': " + e.what());
  }
}

}  // namespace aegis::train
