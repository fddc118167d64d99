#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aegis/models/vlm.hpp"

namespace aegis::tasks {

struct TaskConfig {
  std::size_t vocab_size = 512;
  std::size_t text_vocab = 256;  // prompts and answers use ids [0, text_vocab); the tail stays unused
  std::size_t obs_tokens = 4;  // P
  std::size_t d_obs = 16;
  std::size_t horizon = 10;  // H
  std::size_t action_dim = 7;
  std::size_t question_types = 64;
  std::size_t bucket_dims = 3;  // obs signs that pick the answer bucket
  std::size_t max_fillers = 3;
  std::size_t action_rank = 3;
  double action_drift = 0.05;
  double action_noise = 0.002;

  void validate() const;
  std::size_t answer_len() const { return 2; }
  std::size_t pretrain_seq_len() const { return obs_tokens + 1 + max_fillers + answer_len(); }
  std::size_t action_seq_len() const { return obs_tokens + 1 + max_fillers; }
};

// Independent sample streams drawn from one world.
enum class Stream : std::uint64_t { pretrain = 1, holdout = 2, anchor = 3, actions = 4, fisher = 5, diagnostics = 6 };

// The seeded ground truth shared by every stream: answer lookup tables and
// the low-rank observation-to-action map.
class World {
 public:
  World(TaskConfig config, std::uint64_t seed);

  const TaskConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  std::int64_t answer_token(std::size_t position, std::size_t question_type, std::size_t bucket) const;
  std::size_t bucket_of(const std::vector<double>& obs) const;
  // Noise-free actions [H * A] for an observation.
  std::vector<double> clean_actions(const std::vector<double>& obs) const;

 private:
  TaskConfig config_;
  std::uint64_t seed_;
  std::vector<std::int64_t> answer_perm0_, answer_perm1_;
  std::vector<double> mix_out_;  // [A, rank]
  std::vector<double> mix_in_;   // [rank, d_obs]
  std::vector<double> drift_dir_;  // [rank]
};

struct PretrainSample {
  std::vector<std::int64_t> tokens;  // obs positions hold 0
  std::vector<double> obs;
  std::size_t answer_begin = 0;  // first answer position
  std::size_t answer_len = 0;
};

struct ActionSample {
  std::vector<std::int64_t> tokens;
  std::vector<double> obs;
  std::vector<double> actions;  // H * A, in [-1, 1]
};

struct PretrainBatch {
  models::SequenceBatch seq;
  std::vector<std::size_t> answer_positions;  // flat b*S+s positions of answer tokens
  std::vector<std::size_t> predict_rows;      // flat rows whose logits predict them (position - 1)
  std::vector<std::int64_t> targets;
};

struct ActionBatch {
  models::SequenceBatch seq;
  std::vector<double> actions;  // B * H * A
};

std::vector<PretrainSample> gen_pretrain(const World& world, Stream stream, std::size_t first, std::size_t n);
std::vector<ActionSample> gen_actions(const World& world, Stream stream, std::size_t first, std::size_t n);

// Convenience forms drawing from the default streams of World(config, seed).
std::vector<PretrainSample> gen_pretrain(std::uint64_t seed, std::size_t n, const TaskConfig& config = {});
std::vector<ActionSample> gen_actions(std::uint64_t seed, std::size_t n, const TaskConfig& config = {});

PretrainBatch collate_pretrain(const std::vector<PretrainSample>& samples, const TaskConfig& config);
ActionBatch collate_actions(const std::vector<ActionSample>& samples, const TaskConfig& config);

// Fixed evaluation set, generated once per world and shared by every condition.
struct HoldoutSet {
  std::vector<PretrainSample> samples;
  std::vector<PretrainBatch> batches;

  static HoldoutSet build(const World& world, std::size_t n, std::size_t batch_size);
  std::string sha256() const;
  void save(const std::filesystem::path& path, const TaskConfig& config) const;
  static HoldoutSet load(const std::filesystem::path& path, const TaskConfig& config, std::size_t batch_size);
};

// Mean cross-entropy over answer tokens under teacher forcing. No graph is kept.
double answer_cross_entropy(const models::ToyVLM& model, const PretrainBatch& batch);
double eval_holdout(const models::ToyVLM& model, const HoldoutSet& holdout);

}  // namespace aegis::tasks
