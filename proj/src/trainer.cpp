#include "ctxgnn/trainer.hpp"

#include "ctxgnn/objectives.hpp"
#include "ctxgnn/seeding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace ctxgnn {

namespace {

enum Stream : std::uint64_t {
  kEncoderInit = 1,
  kHeadInit = 2,
  kContextEncoderInit = 3,
  kShuffle = 4,
  kObjective = 5,
  kSubset = 6,
};

}  // namespace

std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::node_mask: return "node_mask";
    case Objective::context_pred: return "context_pred";
    case Objective::retweet_count: return "retweet_count";
    case Objective::finetune: return "finetune";
  }
  return "?";
}

std::optional<Objective> parse_objective(std::string_view s) {
  std::string norm(s);
  std::replace(norm.begin(), norm.end(), '-', '_');
  for (auto o : {Objective::node_mask, Objective::context_pred, Objective::retweet_count, Objective::finetune})
    if (to_string(o) == norm) return o;
  return std::nullopt;
}

bool is_pretraining(Objective o) { return o != Objective::finetune; }

Index default_epochs(Objective o, std::size_t corpus_size) {
  if (o == Objective::retweet_count) return corpus_size <= 1000 ? 25 : 50;
  return 50;
}

Index resolved_epochs(const TrainConfig& cfg, std::size_t corpus_size) {
  const Index e = cfg.epochs.value_or(default_epochs(cfg.objective, corpus_size));
  if (e < 1) throw TrainError("epochs must be >= 1, got " + std::to_string(e));
  return e;
}

Index batches_per_epoch(std::size_t n_items, Index batch_size) {
  const auto b = static_cast<std::size_t>(batch_size);
  return static_cast<Index>((n_items + b - 1) / b);
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j{{"batch_size", cfg.batch_size},
                   {"lr", cfg.lr},
                   {"epochs", cfg.epochs ? nlohmann::json(*cfg.epochs) : nlohmann::json(nullptr)},
                   {"objective", std::string(to_string(cfg.objective))},
                   {"seed", cfg.seed},
                   {"init_checkpoint", cfg.init_checkpoint ? nlohmann::json(*cfg.init_checkpoint) : nlohmann::json(nullptr)},
                   {"head_reinit", cfg.head_reinit},
                   {"train_count", cfg.train_count ? nlohmann::json(*cfg.train_count) : nlohmann::json(nullptr)}};
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base) {
  if (!j.is_object()) throw TrainError("train config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "batch_size") base.batch_size = v.get<Index>();
      else if (key == "lr") base.lr = v.get<double>();
      else if (key == "epochs") base.epochs = v.is_null() ? std::nullopt : std::optional<Index>(v.get<Index>());
      else if (key == "objective") {
        auto o = parse_objective(v.get<std::string>());
        if (!o) throw TrainError("unknown objective '" + v.get<std::string>() + "'");
        base.objective = *o;
      } else if (key == "seed") base.seed = v.get<std::uint64_t>();
      else if (key == "init_checkpoint")
        base.init_checkpoint = v.is_null() ? std::nullopt : std::optional<std::string>(v.get<std::string>());
      else if (key == "head_reinit") base.head_reinit = v.get<bool>();
      else if (key == "train_count")
        base.train_count = v.is_null() ? std::nullopt : std::optional<Index>(v.get<Index>());
      else throw TrainError("unknown train config field '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw TrainError(key + ": " + e.what());
    }
  }
  return base;
}

nlohmann::json to_json(const RunLog& log) {
  return {{"epoch_loss", log.epoch_loss},
          {"epoch_seconds", log.epoch_seconds},
          {"checkpoint_path", log.checkpoint_path},
          {"train_ids", log.train_ids},
          {"config", log.config}};
}

namespace {

void check_config(const Corpus& corpus, const TrainConfig& cfg, const EncoderConfig& encoder) {
  if (cfg.batch_size < 1) throw TrainError("batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) throw TrainError("lr must be > 0");
  if (corpus.graphs.empty()) throw TrainError("corpus '" + corpus.name + "' is empty");
  if (corpus.feature_dim != encoder.feature_dim)
    throw TrainError("corpus feature_dim " + std::to_string(corpus.feature_dim) + " != encoder feature_dim " +
                     std::to_string(encoder.feature_dim));
  validate(encoder);
}

const Checkpoint* resolve_init(const TrainConfig& cfg, const Checkpoint* init, std::optional<Checkpoint>& storage) {
  if (init) return init;
  if (cfg.init_checkpoint) {
    storage = load_checkpoint(*cfg.init_checkpoint);
    return &*storage;
  }
  return nullptr;
}

void require_compatible(const Checkpoint& ck, const EncoderConfig& encoder) {
  if (!(ck.config == encoder))
    throw TrainError("checkpoint encoder config " + to_json(ck.config).dump() + " does not match requested " +
                     to_json(encoder).dump());
}

// Per-item loss builder for one epoch: item index -> scalar loss on `tape`.
struct EpochPlan {
  std::size_t n_items = 0;
  std::function<Var(Tape&, std::size_t)> loss;
};

RunLog run_epochs(Index epochs, const TrainConfig& cfg, std::vector<Param*> trainable, EncoderParams& params,
                  EncoderParams* context_params, const std::function<EpochPlan(Index)>& plan_for_epoch) {
  RunLog log;
  AdamState adam;
  adam.options.lr = cfg.lr;
  auto shuffle_rng = make_rng(cfg.seed, kShuffle);
  for (Index epoch = 0; epoch < epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochPlan plan = plan_for_epoch(epoch);
    std::vector<std::size_t> order(plan.n_items);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0.0;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::size_t end = std::min(order.size(), begin + bs);
      params.zero_grad();
      if (context_params) context_params->zero_grad();
      const double weight = 1.0 / static_cast<double>(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        Tape tape;
        Var loss = plan.loss(tape, order[i]);
        total += loss.item();
        tape.backward(scale(loss, weight));
      }
      adam_step(adam, std::span<Param* const>(trainable));
    }
    const double mean_loss = plan.n_items ? total / static_cast<double>(plan.n_items) : 0.0;
    if (!std::isfinite(mean_loss)) throw TrainError("non-finite loss at epoch " + std::to_string(epoch));
    log.epoch_loss.push_back(mean_loss);
    log.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  return log;
}

}  // namespace

TrainResult pretrain(const Corpus& corpus, const TrainConfig& cfg, const EncoderConfig& encoder,
                     const Checkpoint* init) {
  if (!is_pretraining(cfg.objective)) throw TrainError("pretrain: objective must be a pre-training objective");
  check_config(corpus, cfg, encoder);
  const Index epochs = resolved_epochs(cfg, corpus.graphs.size());

  std::optional<Checkpoint> loaded;
  const Checkpoint* start = resolve_init(cfg, init, loaded);
  TrainResult result;
  if (start) {
    require_compatible(*start, encoder);
    result.checkpoint = *start;
  } else {
    result.checkpoint = {encoder, init_params(encoder, derive_seed(cfg.seed, kEncoderInit),
                                              derive_seed(cfg.seed, kHeadInit)),
                         derive_seed(cfg.seed, kHeadInit)};
  }
  EncoderParams& params = result.checkpoint.params;
  auto objective_rng = make_rng(cfg.seed, kObjective);
  const std::span<const HeteroGraph> graphs(corpus.graphs);

  switch (cfg.objective) {
    case Objective::node_mask: {
      std::vector<MaskingBatch> batches;
      result.log = run_epochs(epochs, cfg, params.all(), params, nullptr, [&](Index) {
        batches.clear();
        for (const auto& g : graphs)
          if (auto b = build_masking_batch(g, objective_rng)) batches.push_back(std::move(*b));
        return EpochPlan{batches.size(), [&](Tape& tape, std::size_t i) {
                           Bindings p(tape, params);
                           return masking_loss(p, batches[i], encoder);
                         }};
      });
      break;
    }
    case Objective::context_pred: {
      if (graphs.size() < 2) throw TrainError("context_pred needs at least 2 graphs, corpus has " +
                                              std::to_string(graphs.size()));
      EncoderParams context_params = init_params(encoder, derive_seed(cfg.seed, kContextEncoderInit),
                                                 derive_seed(cfg.seed, kContextEncoderInit + 100));
      std::vector<Param*> trainable = params.all();
      for (auto* p : context_params.encoder_only()) trainable.push_back(p);
      std::vector<ContextPair> pairs;
      result.log = run_epochs(epochs, cfg, trainable, params, &context_params, [&](Index) {
        pairs = build_context_pairs(graphs, objective_rng);
        return EpochPlan{pairs.size(), [&](Tape& tape, std::size_t i) {
                           Bindings article(tape, params);
                           Bindings context(tape, context_params);
                           return context_loss(article, context, std::span<const ContextPair>(&pairs[i], 1), encoder);
                         }};
      });
      break;
    }
    case Objective::retweet_count: {
      std::vector<CountTarget> targets;
      for (const auto& g : graphs) targets.push_back(count_target(g));
      result.log = run_epochs(epochs, cfg, params.all(), params, nullptr, [&](Index) {
        return EpochPlan{targets.size(), [&](Tape& tape, std::size_t i) {
                           Bindings p(tape, params);
                           return count_loss(p, std::span<const CountTarget>(&targets[i], 1), encoder);
                         }};
      });
      break;
    }
    case Objective::finetune: break;
  }
  result.log.config = {{"train", to_json(cfg)}, {"encoder", to_json(encoder)}, {"corpus", corpus.name},
                       {"epochs", epochs}};
  return result;
}

Checkpoint initial_checkpoint(const TrainConfig& cfg, const EncoderConfig& encoder, const Checkpoint* init) {
  std::optional<Checkpoint> loaded;
  const Checkpoint* start = resolve_init(cfg, init, loaded);
  const std::uint64_t head_seed = derive_seed(cfg.seed, kHeadInit);
  if (!start)
    return {encoder, init_params(encoder, derive_seed(cfg.seed, kEncoderInit), head_seed), head_seed};
  require_compatible(*start, encoder);
  Checkpoint ck = *start;
  if (cfg.head_reinit) {
    ck.head_seed = head_seed;
    reinit_heads(ck.params, ck.config, head_seed);
  }
  return ck;
}

std::vector<std::size_t> training_subset(std::size_t corpus_size, const TrainConfig& cfg) {
  std::vector<std::size_t> ids(corpus_size);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  if (!cfg.train_count) return ids;
  const Index n = *cfg.train_count;
  if (n < 1 || static_cast<std::size_t>(n) > corpus_size)
    throw TrainError("train_count " + std::to_string(n) + " outside [1, " + std::to_string(corpus_size) + "]");
  auto rng = make_rng(cfg.seed, kSubset);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(n));
  std::sort(ids.begin(), ids.end());
  return ids;
}

TrainResult finetune(const Corpus& corpus, const TrainConfig& cfg, const EncoderConfig& encoder,
                     const Checkpoint* init) {
  check_config(corpus, cfg, encoder);
  const std::vector<std::size_t> subset = training_subset(corpus.graphs.size(), cfg);
  std::vector<const HeteroGraph*> graphs;
  for (auto i : subset) {
    const auto& g = corpus.graphs[i];
    if (!g.label) throw MissingLabelError("graph '" + g.id + "' has no label; fine-tuning requires labels");
    graphs.push_back(&g);
  }
  const Index epochs = resolved_epochs(cfg, graphs.size());

  TrainResult result;
  result.checkpoint = initial_checkpoint(cfg, encoder, init);
  EncoderParams& params = result.checkpoint.params;
  result.log = run_epochs(epochs, cfg, params.all(), params, nullptr, [&](Index) {
    return EpochPlan{graphs.size(), [&](Tape& tape, std::size_t i) {
                       Bindings p(tape, params);
                       return classification_loss(p, std::span<const HeteroGraph* const>(&graphs[i], 1), encoder);
                     }};
  });
  for (const auto* g : graphs) result.log.train_ids.push_back(g->id);
  result.log.config = {{"train", to_json(cfg)}, {"encoder", to_json(encoder)}, {"corpus", corpus.name},
                       {"epochs", epochs}};
  return result;
}

std::vector<Prediction> predict(const Corpus& corpus, const Checkpoint& ck) {
  if (corpus.feature_dim != ck.config.feature_dim)
    throw TrainError("corpus feature_dim " + std::to_string(corpus.feature_dim) + " != checkpoint feature_dim " +
                     std::to_string(ck.config.feature_dim));
  std::vector<Prediction> out;
  out.reserve(corpus.graphs.size());
  for (const auto& g : corpus.graphs) {
    Tape tape;
    Bindings p(tape, static_cast<const EncoderParams&>(ck.params));
    const Matrix probs = softmax_rows_value(classify_logits(p, encode(p, g, ck.config), ck.config).value());
    out.push_back({g.id, probs(0, 1), probs(0, 1) > probs(0, 0) ? 1 : 0});
  }
  return out;
}

nlohmann::json to_json(const std::vector<Prediction>& predictions) {
  auto arr = nlohmann::json::array();
  for (const auto& p : predictions) arr.push_back({{"id", p.id}, {"prob_fake", p.prob_fake}, {"label", p.label}});
  return arr;
}

}  // namespace ctxgnn
