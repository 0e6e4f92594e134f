#include "ctxgnn/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ctxgnn {

Index masked_count(Index n_posts) {
  if (n_posts <= 0) return 0;
  const auto n = static_cast<Index>(std::floor(kMaskFraction * static_cast<double>(n_posts)));
  return std::max<Index>(n, 1);
}

std::optional<MaskingBatch> build_masking_batch(const HeteroGraph& g, std::mt19937_64& rng) {
  const Index n = g.num_posts();
  if (n == 0) return std::nullopt;
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  MaskingBatch b;
  b.mask.assign(order.begin(), order.begin() + masked_count(n));
  std::sort(b.mask.begin(), b.mask.end());
  b.graph = g;
  b.targets.resize(static_cast<Index>(b.mask.size()), g.feature_dim());
  for (std::size_t i = 0; i < b.mask.size(); ++i) {
    b.targets.row(static_cast<Index>(i)) = g.post_x.row(b.mask[i]);
    b.graph.post_x.row(b.mask[i]).setConstant(kMaskValue);
  }
  return b;
}

Var masking_loss(Bindings& p, const MaskingBatch& batch, const EncoderConfig& cfg) {
  NodeEmbeddings h = encode(p, batch.graph, cfg);
  Var rows = gather_rows(h.post, std::span<const Index>(batch.mask));
  return mse(reconstruct(p, rows), p.tape().constant(batch.targets));
}

std::vector<ContextPair> build_context_pairs(std::span<const HeteroGraph> pool, std::mt19937_64& rng) {
  const std::size_t n = pool.size();
  if (n < 2) throw std::invalid_argument("context pairs need at least 2 graphs in the pool, got " + std::to_string(n));
  std::vector<ContextPair> pairs;
  pairs.reserve(2 * n);
  std::uniform_int_distribution<std::size_t> other(0, n - 2);
  for (std::size_t i = 0; i < n; ++i) {
    pairs.push_back({&pool[i], context_subgraph(pool[i]), pool[i].id, 1});
    std::size_t j = other(rng);
    if (j >= i) ++j;
    pairs.push_back({&pool[i], context_subgraph(pool[j]), pool[j].id, 0});
  }
  std::shuffle(pairs.begin(), pairs.end(), rng);
  return pairs;
}

Var context_loss(Bindings& article_encoder, Bindings& context_encoder, std::span<const ContextPair> pairs,
                 const EncoderConfig& cfg) {
  if (pairs.empty()) throw std::invalid_argument("context_loss: no pairs");
  std::vector<Var> logits;
  std::vector<double> labels;
  for (const auto& pair : pairs) {
    NodeEmbeddings ha = encode(article_encoder, *pair.article, cfg);
    NodeEmbeddings hc = encode(context_encoder, pair.context, cfg);
    Var pa = mean_pool(ha, {NodeType::post, NodeType::user});
    Var pc = mean_pool(hc, {NodeType::post, NodeType::user});
    logits.push_back(context_logit(article_encoder, pa, pc));
    labels.push_back(static_cast<double>(pair.match));
  }
  return bce_with_logits(concat_rows(std::span<const Var>(logits)), std::span<const double>(labels));
}

CountTarget count_target(const HeteroGraph& g) {
  return {&g, std::log1p(static_cast<double>(retweet_count(g)))};
}

Var count_loss(Bindings& p, std::span<const CountTarget> targets, const EncoderConfig& cfg) {
  if (targets.empty()) throw std::invalid_argument("count_loss: no targets");
  std::vector<Var> preds;
  Matrix t(static_cast<Index>(targets.size()), 1);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    preds.push_back(count_prediction(p, encode(p, *targets[i].graph, cfg), cfg));
    t(static_cast<Index>(i), 0) = targets[i].target;
  }
  return mse(concat_rows(std::span<const Var>(preds)), p.tape().constant(std::move(t)));
}

Var classification_loss(Bindings& p, std::span<const HeteroGraph* const> graphs, const EncoderConfig& cfg) {
  if (graphs.empty()) throw std::invalid_argument("classification_loss: no graphs");
  std::vector<Var> logits;
  std::vector<int> labels;
  for (const auto* g : graphs) {
    if (!g->label) throw MissingLabelError("graph '" + g->id + "' has no label; fine-tuning requires labels");
    logits.push_back(classify_logits(p, encode(p, *g, cfg), cfg));
    labels.push_back(*g->label);
  }
  return cross_entropy(concat_rows(std::span<const Var>(logits)), std::span<const int>(labels));
}

}  // namespace ctxgnn
