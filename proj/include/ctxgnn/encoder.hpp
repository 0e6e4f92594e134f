#pragma once

// Two-layer Heterogeneous Graph Transformer encoder with per-type pooling
// readouts and the task heads used by pre-training and fine-tuning.

#include "ctxgnn/hetgraph.hpp"
#include "ctxgnn/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ctxgnn {

// The five canonical edge types followed by their rev_ counterparts.
std::vector<std::string> default_edge_types();

struct EncoderConfig {
  Index hidden_dim = 64;
  Index n_layers = 2;
  Index n_heads = 2;
  Index feature_dim = 768;
  std::vector<std::string> edge_types = default_edge_types();
  // Classification/count readout = [article | mean(posts) | mean(users)];
  // without the article it is [mean(posts) | mean(users)].
  bool readout_includes_article = true;

  Index head_dim() const { return hidden_dim / n_heads; }
  Index readout_dim() const { return (readout_includes_article ? 3 : 2) * hidden_dim; }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

class EncoderConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void validate(const EncoderConfig& cfg);
nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j, EncoderConfig base = {});

// Direction of an encoder edge type: canonical names map onto themselves,
// rev_<name> swaps source and target.
struct ResolvedEdgeType {
  std::string name;
  std::string canonical;
  NodeType src;
  NodeType dst;
  bool reversed;
};
ResolvedEdgeType resolve_edge_type(const std::string& name);

struct EncoderParams {
  std::map<std::string, Param> tensors;

  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  // Stable (name-sorted) order; the order Adam state is keyed on.
  std::vector<Param*> all();
  std::vector<Param*> encoder_only();
  void zero_grad();
};

bool is_head_param(const std::string& name);

// Expected name -> (rows, cols) for a config.
std::map<std::string, std::pair<Index, Index>> shape_table(const EncoderConfig& cfg);

// Glorot-uniform weights, zero biases, unit edge priors. Encoder weights are
// drawn from `seed`, heads from `head_seed`.
EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed, std::uint64_t head_seed);
void reinit_heads(EncoderParams& params, const EncoderConfig& cfg, std::uint64_t head_seed);

// Binds parameters onto a tape: trainable (gradients flow back into the
// EncoderParams) or frozen (read-only views).
class Bindings {
 public:
  Bindings(Tape& tape, EncoderParams& params) : tape_(tape), mutable_(&params), params_(&params) {}
  Bindings(Tape& tape, const EncoderParams& params) : tape_(tape), params_(&params) {}

  Var operator()(const std::string& name);
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  EncoderParams* mutable_ = nullptr;
  const EncoderParams* params_;
  std::map<std::string, Var> cache_;
};

struct NodeEmbeddings {
  Var article;
  Var post;
  Var user;

  Var& of(NodeType t);
  const Var& of(NodeType t) const;
};

struct AttentionRecord {
  NodeType target;
  Matrix weights;             // incoming edges x heads
  std::vector<Index> target_index;  // target node of each row
};

struct EncodeTrace {
  // Per layer, one record per node type that receives any edge.
  std::vector<std::vector<AttentionRecord>> attention;
};

NodeEmbeddings input_projection(Bindings& p, const HeteroGraph& g, const EncoderConfig& cfg);

NodeEmbeddings hgt_layer(Bindings& p, const HeteroGraph& g, const NodeEmbeddings& h, const EncoderConfig& cfg,
                         Index layer, std::vector<AttentionRecord>* attention = nullptr);

NodeEmbeddings encode(Bindings& p, const HeteroGraph& g, const EncoderConfig& cfg, EncodeTrace* trace = nullptr);

// Mean over all rows of the selected node sets; an empty selection pools to a
// zero row.
Var mean_pool(const NodeEmbeddings& h, std::initializer_list<NodeType> sets);

Var readout(const NodeEmbeddings& h, const EncoderConfig& cfg);
Var classify_logits(Bindings& p, const NodeEmbeddings& h, const EncoderConfig& cfg);
Var count_prediction(Bindings& p, const NodeEmbeddings& h, const EncoderConfig& cfg);
Var reconstruct(Bindings& p, const Var& node_rows);
Var context_logit(Bindings& p, const Var& article_pool, const Var& context_pool);

struct Checkpoint {
  EncoderConfig config;
  EncoderParams params;
  std::uint64_t head_seed = 0;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json checkpoint_to_json(const Checkpoint& ck);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
// With head_reinit, encoder weights load bit-exactly and every head is
// redrawn from `head_seed`.
Checkpoint load_checkpoint(const std::filesystem::path& path, bool head_reinit = false,
                           std::optional<std::uint64_t> head_seed = std::nullopt);

}  // namespace ctxgnn
