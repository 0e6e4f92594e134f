#pragma once

// Minibatch training loops for the pre-training objectives and supervised
// fine-tuning, plus inference.

#include "ctxgnn/encoder.hpp"
#include "ctxgnn/hetgraph.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ctxgnn {

enum class Objective { node_mask, context_pred, retweet_count, finetune };

std::string_view to_string(Objective o);
// Accepts both node_mask and node-mask spellings.
std::optional<Objective> parse_objective(std::string_view s);
bool is_pretraining(Objective o);

struct TrainConfig {
  Index batch_size = 128;
  double lr = 0.001;
  // Unset: 50 for node-level objectives and fine-tuning; 25 for the count
  // objective on corpora of at most 1000 graphs, else 50.
  std::optional<Index> epochs;
  Objective objective = Objective::finetune;
  std::uint64_t seed = 42;
  std::optional<std::string> init_checkpoint;
  bool head_reinit = true;
  std::optional<Index> train_count;
};

class TrainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Index default_epochs(Objective o, std::size_t corpus_size);
Index resolved_epochs(const TrainConfig& cfg, std::size_t corpus_size);
Index batches_per_epoch(std::size_t n_items, Index batch_size);

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct RunLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_seconds;
  std::string checkpoint_path;
  std::vector<std::string> train_ids;  // graphs used (fine-tuning only)
  nlohmann::json config;
};

nlohmann::json to_json(const RunLog& log);

struct TrainResult {
  Checkpoint checkpoint;
  RunLog log;
};

// `init` takes precedence over cfg.init_checkpoint. Without either, weights
// are drawn from cfg.seed.
TrainResult pretrain(const Corpus& corpus, const TrainConfig& cfg, const EncoderConfig& encoder,
                     const Checkpoint* init = nullptr);
TrainResult finetune(const Corpus& corpus, const TrainConfig& cfg, const EncoderConfig& encoder,
                     const Checkpoint* init = nullptr);

// Starting weights of a fine-tuning run: the init checkpoint's encoder (heads
// redrawn when head_reinit) or a fresh draw.
Checkpoint initial_checkpoint(const TrainConfig& cfg, const EncoderConfig& encoder, const Checkpoint* init);

// Ids of the graphs a fine-tuning run trains on: all of them, or exactly
// train_count sampled without replacement by seed.
std::vector<std::size_t> training_subset(std::size_t corpus_size, const TrainConfig& cfg);

struct Prediction {
  std::string id;
  double prob_fake = 0.0;
  int label = 0;
};

std::vector<Prediction> predict(const Corpus& corpus, const Checkpoint& ck);
nlohmann::json to_json(const std::vector<Prediction>& predictions);

}  // namespace ctxgnn
