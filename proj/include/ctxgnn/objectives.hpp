#pragma once

// Self-supervised pre-training objectives (node masking, context prediction,
// retweet-count regression) and the supervised fine-tuning loss. Builders are
// pure given an RNG; losses are per-example tape expressions.

#include "ctxgnn/encoder.hpp"
#include "ctxgnn/hetgraph.hpp"

#include <optional>
#include <random>
#include <span>
#include <vector>

namespace ctxgnn {

inline constexpr double kMaskFraction = 0.15;
inline constexpr double kMaskValue = 1.0;

// floor(0.15 * n_posts), but at least one when there are posts.
Index masked_count(Index n_posts);

struct MaskingBatch {
  HeteroGraph graph;         // post rows in `mask` set to kMaskValue
  std::vector<Index> mask;   // sorted post indices
  Matrix targets;            // original rows, one per mask entry
};

// nullopt for graphs without posts (nothing to mask).
std::optional<MaskingBatch> build_masking_batch(const HeteroGraph& g, std::mt19937_64& rng);

Var masking_loss(Bindings& p, const MaskingBatch& batch, const EncoderConfig& cfg);

struct ContextPair {
  const HeteroGraph* article;  // full graph
  HeteroGraph context;         // context_subgraph of the matched or a different graph
  std::string context_source;  // id of the graph the context came from
  int match = 0;
};

// One positive and one negative per pool graph, shuffled. Throws
// std::invalid_argument for pools smaller than two.
std::vector<ContextPair> build_context_pairs(std::span<const HeteroGraph> pool, std::mt19937_64& rng);

// Both encoders see their own parameter bindings; the context head lives in
// the article-side parameters.
Var context_loss(Bindings& article_encoder, Bindings& context_encoder, std::span<const ContextPair> pairs,
                 const EncoderConfig& cfg);

struct CountTarget {
  const HeteroGraph* graph;
  double target;  // ln(1 + retweet_count)
};

CountTarget count_target(const HeteroGraph& g);
Var count_loss(Bindings& p, std::span<const CountTarget> targets, const EncoderConfig& cfg);

class MissingLabelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Var classification_loss(Bindings& p, std::span<const HeteroGraph* const> graphs, const EncoderConfig& cfg);

}  // namespace ctxgnn
