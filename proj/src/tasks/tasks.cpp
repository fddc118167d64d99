#include "aegis/tasks/tasks.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <iomanip>

#include "aegis/models/checkpoint.hpp"
#include "aegis/util/random.hpp"

namespace aegis::tasks {

void TaskConfig::validate() const {
  if (text_vocab > vocab_size) throw std::invalid_argument("TaskConfig: text_vocab exceeds vocab_size");
  if (text_vocab < question_types + 2) throw std::invalid_argument("TaskConfig: text vocab too small for question types");
  if (bucket_dims == 0 || bucket_dims > d_obs) throw std::invalid_argument("TaskConfig: bucket_dims must be in [1, d_obs]");
  if (action_rank == 0 || action_rank > action_dim) throw std::invalid_argument("TaskConfig: action_rank must be in [1, action_dim]");
  if (horizon == 0 || action_dim == 0 || obs_tokens == 0 || max_fillers == 0) throw std::invalid_argument("TaskConfig: extents must be positive");
}

World::World(TaskConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
  Rng rng(mix_seed(seed, 0x574F524CULL));
  const std::size_t V = config_.text_vocab;
  answer_perm0_.resize(V);
  answer_perm1_.resize(V);
  std::iota(answer_perm0_.begin(), answer_perm0_.end(), 0);
  std::iota(answer_perm1_.begin(), answer_perm1_.end(), 0);
  std::shuffle(answer_perm0_.begin(), answer_perm0_.end(), rng.engine());
  std::shuffle(answer_perm1_.begin(), answer_perm1_.end(), rng.engine());

  const std::size_t A = config_.action_dim, r = config_.action_rank, d = config_.d_obs;
  mix_in_ = rng.normal_vector(r * d, 1.5 / std::sqrt(static_cast<double>(d)));
  mix_out_ = rng.normal_vector(A * r);
  // Each action row has l1 norm 0.8 so the noise-free map never saturates.
  for (std::size_t a = 0; a < A; ++a) {
    double l1 = 0.0;
    for (std::size_t k = 0; k < r; ++k) l1 += std::abs(mix_out_[a * r + k]);
    for (std::size_t k = 0; k < r; ++k) mix_out_[a * r + k] *= 0.8 / l1;
  }
  drift_dir_ = rng.normal_vector(r);
  double n2 = 0.0;
  for (double v : drift_dir_) n2 += v * v;
  for (double& v : drift_dir_) v /= std::sqrt(n2);
}

std::size_t World::bucket_of(const std::vector<double>& obs) const {
  std::size_t b = 0;
  for (std::size_t i = 0; i < config_.bucket_dims; ++i) b = (b << 1) | (obs[i] > 0.0 ? 1u : 0u);
  return b;
}

std::int64_t World::answer_token(std::size_t position, std::size_t question_type, std::size_t bucket) const {
  const std::size_t V = config_.text_vocab;
  if (position == 0) {
    const std::size_t key = question_type * (std::size_t{1} << config_.bucket_dims) + bucket;
    return answer_perm0_[key % V];
  }
  return answer_perm1_[question_type % V];
}

std::vector<double> World::clean_actions(const std::vector<double>& obs) const {
  const std::size_t A = config_.action_dim, r = config_.action_rank, d = config_.d_obs, H = config_.horizon;
  std::vector<double> latent(r);
  for (std::size_t k = 0; k < r; ++k) {
    double z = 0.0;
    for (std::size_t i = 0; i < d; ++i) z += mix_in_[k * d + i] * obs[i];
    latent[k] = std::tanh(z);
  }
  std::vector<double> out(H * A);
  for (std::size_t h = 0; h < H; ++h) {
    const double phase = H > 1 ? static_cast<double>(h) / static_cast<double>(H - 1) - 0.5 : 0.0;
    for (std::size_t a = 0; a < A; ++a) {
      double v = 0.0;
      for (std::size_t k = 0; k < r; ++k) v += mix_out_[a * r + k] * (latent[k] + config_.action_drift * phase * drift_dir_[k]);
      out[h * A + a] = v;
    }
  }
  return out;
}

namespace {

Rng sample_rng(const World& world, Stream stream, std::size_t index) {
  return Rng(mix_seed(world.seed(), static_cast<std::uint64_t>(stream), index));
}

// Question / instruction prefix: a type token followed by 1..max_fillers noise tokens.
std::size_t draw_prompt(const TaskConfig& cfg, Rng& rng, std::vector<std::int64_t>& tokens) {
  const auto qtype = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(cfg.question_types) - 1));
  tokens.push_back(static_cast<std::int64_t>(qtype));
  const auto fillers = rng.integer(1, static_cast<std::int64_t>(cfg.max_fillers));
  for (std::int64_t f = 0; f < fillers; ++f)
    tokens.push_back(rng.integer(static_cast<std::int64_t>(cfg.question_types), static_cast<std::int64_t>(cfg.text_vocab) - 1));
  return qtype;
}

}  // namespace

std::vector<PretrainSample> gen_pretrain(const World& world, Stream stream, std::size_t first, std::size_t n) {
  if (n == 0) throw std::invalid_argument("gen_pretrain: n must be at least 1");
  const TaskConfig& cfg = world.config();
  std::vector<PretrainSample> out;
  out.reserve(n);
  for (std::size_t i = first; i < first + n; ++i) {
    Rng rng = sample_rng(world, stream, i);
    PretrainSample s;
    s.obs = rng.normal_vector(cfg.d_obs);
    s.tokens.assign(cfg.obs_tokens, 0);
    const std::size_t qtype = draw_prompt(cfg, rng, s.tokens);
    const std::size_t bucket = world.bucket_of(s.obs);
    s.answer_begin = s.tokens.size();
    s.answer_len = cfg.answer_len();
    for (std::size_t j = 0; j < s.answer_len; ++j) s.tokens.push_back(world.answer_token(j, qtype, bucket));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<ActionSample> gen_actions(const World& world, Stream stream, std::size_t first, std::size_t n) {
  if (n == 0) throw std::invalid_argument("gen_actions: n must be at least 1");
  const TaskConfig& cfg = world.config();
  std::vector<ActionSample> out;
  out.reserve(n);
  for (std::size_t i = first; i < first + n; ++i) {
    Rng rng = sample_rng(world, stream, i);
    ActionSample s;
    s.obs = rng.normal_vector(cfg.d_obs);
    s.tokens.assign(cfg.obs_tokens, 0);
    draw_prompt(cfg, rng, s.tokens);
    s.actions = world.clean_actions(s.obs);
    for (double& a : s.actions) a = std::clamp(a + rng.normal(0.0, cfg.action_noise), -1.0, 1.0);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<PretrainSample> gen_pretrain(std::uint64_t seed, std::size_t n, const TaskConfig& config) {
  return gen_pretrain(World(config, seed), Stream::pretrain, 0, n);
}

std::vector<ActionSample> gen_actions(std::uint64_t seed, std::size_t n, const TaskConfig& config) {
  return gen_actions(World(config, seed), Stream::actions, 0, n);
}

namespace {

models::SequenceBatch pad_sequences(const std::vector<const std::vector<std::int64_t>*>& rows,
                                    const std::vector<const std::vector<double>*>& obs, std::size_t seq_len,
                                    std::size_t d_obs) {
  models::SequenceBatch b;
  b.batch = rows.size();
  b.seq = seq_len;
  b.tokens.assign(b.batch * seq_len, 0);
  b.mask.assign(b.batch * seq_len, 0.0);
  b.obs.reserve(b.batch * d_obs);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r]->size() > seq_len) throw std::invalid_argument("collate: sample longer than sequence length");
    std::copy(rows[r]->begin(), rows[r]->end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(r * seq_len));
    std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(r * seq_len), rows[r]->size(), 1.0);
    b.obs.insert(b.obs.end(), obs[r]->begin(), obs[r]->end());
  }
  return b;
}

}  // namespace

PretrainBatch collate_pretrain(const std::vector<PretrainSample>& samples, const TaskConfig& config) {
  if (samples.empty()) throw std::invalid_argument("collate_pretrain: no samples");
  std::vector<const std::vector<std::int64_t>*> rows;
  std::vector<const std::vector<double>*> obs;
  std::size_t seq_len = config.pretrain_seq_len();
  for (const auto& s : samples) {
    rows.push_back(&s.tokens);
    obs.push_back(&s.obs);
    seq_len = std::max(seq_len, s.tokens.size());
  }
  PretrainBatch out;
  out.seq = pad_sequences(rows, obs, seq_len, config.d_obs);
  for (std::size_t b = 0; b < samples.size(); ++b) {
    for (std::size_t j = 0; j < samples[b].answer_len; ++j) {
      const std::size_t pos = samples[b].answer_begin + j;
      out.answer_positions.push_back(b * seq_len + pos);
      out.predict_rows.push_back(b * seq_len + pos - 1);
      out.targets.push_back(samples[b].tokens[pos]);
    }
  }
  return out;
}

ActionBatch collate_actions(const std::vector<ActionSample>& samples, const TaskConfig& config) {
  if (samples.empty()) throw std::invalid_argument("collate_actions: no samples");
  std::vector<const std::vector<std::int64_t>*> rows;
  std::vector<const std::vector<double>*> obs;
  std::size_t seq_len = config.action_seq_len();
  for (const auto& s : samples) {
    rows.push_back(&s.tokens);
    obs.push_back(&s.obs);
    seq_len = std::max(seq_len, s.tokens.size());
  }
  ActionBatch out;
  out.seq = pad_sequences(rows, obs, seq_len, config.d_obs);
  for (const auto& s : samples) out.actions.insert(out.actions.end(), s.actions.begin(), s.actions.end());
  return out;
}

HoldoutSet HoldoutSet::build(const World& world, std::size_t n, std::size_t batch_size) {
  HoldoutSet h;
  h.samples = gen_pretrain(world, Stream::holdout, 0, n);
  for (std::size_t i = 0; i < n; i += batch_size) {
    std::vector<PretrainSample> chunk(h.samples.begin() + static_cast<std::ptrdiff_t>(i),
                                      h.samples.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    h.batches.push_back(collate_pretrain(chunk, world.config()));
  }
  return h;
}

std::string HoldoutSet::sha256() const {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& s : samples) {
    const std::uint64_t header[3] = {s.tokens.size(), s.answer_begin, s.answer_len};
    EVP_DigestUpdate(ctx, header, sizeof(header));
    EVP_DigestUpdate(ctx, s.tokens.data(), s.tokens.size() * sizeof(std::int64_t));
    EVP_DigestUpdate(ctx, s.obs.data(), s.obs.size() * sizeof(double));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

void HoldoutSet::save(const std::filesystem::path& path, const TaskConfig& config) const {
  models::Container c;
  c.meta["kind"] = "holdout";
  c.meta["sha256"] = sha256();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string p = "sample." + std::to_string(i);
    std::vector<double> toks(s.tokens.begin(), s.tokens.end());
    c.tensors.push_back({p + ".tokens", {toks.size()}, toks});
    c.tensors.push_back({p + ".obs", {config.d_obs}, s.obs});
    c.tensors.push_back({p + ".answer", {2}, {static_cast<double>(s.answer_begin), static_cast<double>(s.answer_len)}});
  }
  models::save_container(path, c);
}

HoldoutSet HoldoutSet::load(const std::filesystem::path& path, const TaskConfig& config, std::size_t batch_size) {
  models::Container c = models::load_container(path);
  if (c.meta_at("kind") != "holdout") throw models::FormatError("HoldoutSet::load: not a holdout file");
  HoldoutSet h;
  for (std::size_t i = 0; i * 3 < c.tensors.size(); ++i) {
    const std::string p = "sample." + std::to_string(i);
    PretrainSample s;
    const auto& toks = c.find(p + ".tokens").data;
    s.tokens.assign(toks.begin(), toks.end());
    s.obs = c.find(p + ".obs").data;
    const auto& ans = c.find(p + ".answer").data;
    s.answer_begin = static_cast<std::size_t>(ans[0]);
    s.answer_len = static_cast<std::size_t>(ans[1]);
    h.samples.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < h.samples.size(); i += batch_size) {
    std::vector<PretrainSample> chunk(h.samples.begin() + static_cast<std::ptrdiff_t>(i),
                                      h.samples.begin() + static_cast<std::ptrdiff_t>(std::min(h.samples.size(), i + batch_size)));
    h.batches.push_back(collate_pretrain(chunk, config));
  }
  if (h.sha256() != c.meta_at("sha256")) throw models::FormatError("HoldoutSet::load: checksum mismatch");
  return h;
}

double answer_cross_entropy(const models::ToyVLM& model, const PretrainBatch& batch) {
  ag::NoGradGuard no_grad;
  auto out = model.forward(batch.seq, /*capture=*/false);
  return ag::cross_entropy(model.logits_at(out.final_hidden, batch.predict_rows), batch.targets).item();
}

double eval_holdout(const models::ToyVLM& model, const HoldoutSet& holdout) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& b : holdout.batches) {
    total += answer_cross_entropy(model, b) * static_cast<double>(b.targets.size());
    count += b.targets.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace aegis::tasks
