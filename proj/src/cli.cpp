#include "ctxgnn/cli.hpp"

#include "ctxgnn/corpusgen.hpp"
#include "ctxgnn/encoder.hpp"
#include "ctxgnn/eval.hpp"
#include "ctxgnn/objectives.hpp"
#include "ctxgnn/trainer.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

namespace ctxgnn::cli {

namespace {

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Flag values are parsed into holders and applied on top of the
// (default, config file) base only when the flag was given.
class Overrides {
 public:
  template <class T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& desc, T shown,
                   std::function<void(const T&)> set) {
    auto holder = std::make_shared<T>(shown);
    CLI::Option* opt = app->add_option(flag, *holder, desc)->capture_default_str();
    appliers_.push_back([holder, opt, set] {
      if (opt->count() > 0) set(*holder);
    });
    options_.push_back(opt);
    return opt;
  }

  CLI::Option* flag(CLI::App* app, const std::string& flag, const std::string& desc, std::function<void()> set) {
    CLI::Option* opt = app->add_flag(flag, desc);
    appliers_.push_back([opt, set] {
      if (opt->count() > 0) set();
    });
    options_.push_back(opt);
    return opt;
  }

  bool any_given() const {
    return std::any_of(options_.begin(), options_.end(), [](const CLI::Option* o) { return o->count() > 0; });
  }

  void apply() const {
    for (const auto& f : appliers_) f();
  }

 private:
  std::vector<std::function<void()>> appliers_;
  std::vector<CLI::Option*> options_;
};

// --config is read before parsing so that flags can override it.
std::optional<std::string> prescan_config(const std::vector<std::string>& args) {
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  return path;
}

nlohmann::json load_config_file(const std::optional<std::string>& path) {
  if (!path) return nlohmann::json::object();
  std::ifstream in(*path);
  if (!in) throw std::runtime_error("--config: cannot open " + *path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("--config " + *path + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("--config " + *path + ": top level must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key != "gen" && key != "encoder" && key != "train" && key != "experiment" && key != "preset")
      throw std::runtime_error("--config " + *path + ": unknown section '" + key + "'");
  }
  return j;
}

template <class F>
auto with_file_context(const std::string& flag, const std::string& path, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw std::runtime_error(flag + " " + path + ": " + e.what());
  }
}

Corpus load_corpus(const std::string& flag, const std::string& path) {
  return with_file_context(flag, path, [&] { return read_corpus(path); });
}

Checkpoint load_ck(const std::string& flag, const std::string& path) {
  return with_file_context(flag, path, [&] { return load_checkpoint(path); });
}

void write_json(const std::string& flag, const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(flag + ": cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error(flag + ": write failed: " + path);
}

void write_text(const std::string& flag, const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(flag + ": cannot open " + path + " for writing");
  out << text;
  if (!out) throw std::runtime_error(flag + ": write failed: " + path);
}

struct Context {
  std::ostream& out;
  std::ostream& err;
  nlohmann::json config_file;
  bool quiet = false;

  void info(const std::string& line) const {
    if (!quiet) err << line << "\n";
  }
  const nlohmann::json* section(const char* name) const {
    auto it = config_file.find(name);
    return it == config_file.end() ? nullptr : &*it;
  }
};

void add_encoder_flags(CLI::App* app, Overrides& ov, EncoderConfig& enc) {
  const EncoderConfig d;
  ov.add<Index>(app, "--hidden-dim", "hidden width of the HGT layers", d.hidden_dim,
                [&enc](const Index& v) { enc.hidden_dim = v; });
  ov.add<Index>(app, "--layers", "number of HGT layers", d.n_layers, [&enc](const Index& v) { enc.n_layers = v; });
  ov.add<Index>(app, "--heads", "attention heads per layer", d.n_heads, [&enc](const Index& v) { enc.n_heads = v; });
  ov.flag(app, "--no-article-readout", "readout pools posts and users only",
          [&enc] { enc.readout_includes_article = false; });
}

void add_train_flags(CLI::App* app, Overrides& ov, TrainConfig& tc) {
  const TrainConfig d;
  ov.add<Index>(app, "--batch-size", "minibatch size", d.batch_size, [&tc](const Index& v) { tc.batch_size = v; })
      ->check(CLI::PositiveNumber);
  ov.add<double>(app, "--lr", "Adam learning rate", d.lr, [&tc](const double& v) { tc.lr = v; })
      ->check(CLI::PositiveNumber);
  ov.add<Index>(app, "--epochs", "training epochs", 0, [&tc](const Index& v) { tc.epochs = v; })
      ->check(CLI::PositiveNumber)
      ->default_str("auto");
  ov.add<std::uint64_t>(app, "--seed", "seed for all randomness", d.seed, [&tc](const std::uint64_t& v) { tc.seed = v; });
}

// Encoder config for a run on `corpus`: the init checkpoint's unless encoder
// settings were given explicitly, in which case they must match it.
EncoderConfig resolve_encoder(const Context& ctx, const Overrides& enc_ov, const EncoderConfig& explicit_enc,
                              const Corpus& corpus, const Checkpoint* init) {
  const bool explicit_given = enc_ov.any_given() || ctx.section("encoder");
  if (init && !explicit_given) return init->config;
  EncoderConfig enc = explicit_enc;
  enc.feature_dim = corpus.feature_dim;
  return enc;
}

// ---------------------------------------------------------------- corpusgen

std::function<int()> setup_corpusgen(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("corpusgen", "generate a synthetic labelled corpus (JSONL)");
  struct State {
    std::string preset;
    std::string out;
    GenConfig gen;
    Overrides ov;
  };
  auto s = std::make_shared<State>();
  app->add_option("--preset", s->preset, "pol_like, gos_like, pol_tiny or gos_tiny");
  app->add_option("--out", s->out, "output corpus path")->required();
  app->add_option("--config", "JSON config file (sections gen, encoder, train, experiment)");
  const GenConfig d;
  GenConfig& g = s->gen;
  auto& ov = s->ov;
  ov.add<std::uint64_t>(app, "--seed", "generator seed", d.seed, [&g](const std::uint64_t& v) { g.seed = v; });
  ov.add<std::string>(app, "--name", "corpus name", d.name, [&g](const std::string& v) { g.name = v; });
  ov.add<Index>(app, "--n-graphs", "number of graphs", d.n_graphs, [&g](const Index& v) { g.n_graphs = v; });
  ov.add<Index>(app, "--feature-dim", "node feature dimension", d.feature_dim,
                [&g](const Index& v) { g.feature_dim = v; });
  ov.add<double>(app, "--label-balance", "fraction of fake graphs", d.label_balance,
                 [&g](const double& v) { g.label_balance = v; });
  ov.add<Index>(app, "--min-posts", "minimum posts per graph", d.post_count_range.first,
                [&g](const Index& v) { g.post_count_range.first = v; });
  ov.add<Index>(app, "--max-posts", "maximum posts per graph", d.post_count_range.second,
                [&g](const Index& v) { g.post_count_range.second = v; });
  ov.add<Index>(app, "--min-users", "minimum users per graph", d.user_count_range.first,
                [&g](const Index& v) { g.user_count_range.first = v; });
  ov.add<Index>(app, "--max-users", "maximum users per graph", d.user_count_range.second,
                [&g](const Index& v) { g.user_count_range.second = v; });
  ov.add<double>(app, "--retweet-fraction", "mean fraction of retweet posts", d.retweet_fraction_mean,
                 [&g](const double& v) { g.retweet_fraction_mean = v; });
  ov.add<double>(app, "--timeline-fraction", "mean fraction of timeline posts", d.timeline_fraction_mean,
                 [&g](const double& v) { g.timeline_fraction_mean = v; });
  ov.add<double>(app, "--signal-strength", "class separation of the features", d.signal_strength,
                 [&g](const double& v) { g.signal_strength = v; });
  ov.add<double>(app, "--domain-shift", "offset along the corpus direction", d.domain_shift,
                 [&g](const double& v) { g.domain_shift = v; });
  ov.add<double>(app, "--coupling-strength", "retweet fraction shift between classes", d.coupling_strength,
                 [&g](const double& v) { g.coupling_strength = v; });
  ov.flag(app, "--no-coupling", "make the retweet fraction independent of the label",
          [&g] { g.retweet_label_coupling = false; });
  ov.add<std::uint64_t>(app, "--direction-seed", "seed of the label and corpus directions", d.direction_seed,
                        [&g](const std::uint64_t& v) { g.direction_seed = v; });

  return [s, &ctx] {
    std::string preset_name = s->preset;
    if (preset_name.empty()) {
      if (const auto* p = ctx.section("preset")) preset_name = p->get<std::string>();
    }
    if (!preset_name.empty()) {
      if (!presets().count(preset_name)) throw UsageError("--preset: unknown preset '" + preset_name + "'");
      s->gen = preset(preset_name);
    } else {
      s->gen = GenConfig{};
    }
    if (const auto* j = ctx.section("gen")) s->gen = gen_config_from_json(*j, s->gen);
    s->ov.apply();
    validate(s->gen);
    const Corpus corpus = generate(s->gen);
    write_corpus(corpus, s->out);
    ctx.info("wrote " + std::to_string(corpus.graphs.size()) + " graphs to " + s->out);
    return kOk;
  };
}

// ---------------------------------------------------------- pretrain/finetune

std::function<int()> setup_training(CLI::App& root, Context& ctx, bool is_finetune) {
  auto* app = is_finetune ? root.add_subcommand("finetune", "supervised fine-tuning on a labelled corpus")
                          : root.add_subcommand("pretrain", "self-supervised pre-training");
  struct State {
    std::string corpus;
    std::string out;
    std::string log;
    std::string objective;
    TrainConfig train;
    EncoderConfig enc;
    Overrides train_ov;
    Overrides enc_ov;
  };
  auto s = std::make_shared<State>();
  app->add_option("--corpus", s->corpus, "input corpus (JSONL)")->required();
  app->add_option("--out", s->out, "output checkpoint path")->required();
  app->add_option("--log", s->log, "RunLog JSON path (default: <out>.log.json)");
  app->add_option("--config", "JSON config file (sections gen, encoder, train, experiment)");
  if (!is_finetune)
    app->add_option("--objective", s->objective, "node-mask, context-pred or retweet-count")->required();
  TrainConfig& tc = s->train;
  add_train_flags(app, s->train_ov, tc);
  s->train_ov.add<std::string>(app, "--init", "initial checkpoint", "",
                               [&tc](const std::string& v) { tc.init_checkpoint = v; });
  if (is_finetune) {
    s->train_ov.flag(app, "--no-head-reinit", "keep the classification head of --init",
                     [&tc] { tc.head_reinit = false; });
    s->train_ov.add<Index>(app, "--train-count", "train on this many graphs sampled by seed", 0,
                           [&tc](const Index& v) { tc.train_count = v; })
        ->check(CLI::PositiveNumber)
        ->default_str("all");
  }
  add_encoder_flags(app, s->enc_ov, s->enc);

  return [s, &ctx, is_finetune] {
    s->train = TrainConfig{};
    if (const auto* j = ctx.section("train")) s->train = train_config_from_json(*j, s->train);
    s->enc = EncoderConfig{};
    if (const auto* j = ctx.section("encoder")) s->enc = encoder_config_from_json(*j, s->enc);
    s->train_ov.apply();
    s->enc_ov.apply();
    if (is_finetune) {
      s->train.objective = Objective::finetune;
    } else {
      auto o = parse_objective(s->objective);
      if (!o || !is_pretraining(*o)) throw UsageError("--objective: unknown pre-training objective '" + s->objective + "'");
      s->train.objective = *o;
    }

    const Corpus corpus = load_corpus("--corpus", s->corpus);
    std::optional<Checkpoint> init;
    if (s->train.init_checkpoint) init = load_ck("--init", *s->train.init_checkpoint);
    const EncoderConfig enc = resolve_encoder(ctx, s->enc_ov, s->enc, corpus, init ? &*init : nullptr);
    const Checkpoint* init_ptr = init ? &*init : nullptr;
    TrainResult r = is_finetune ? finetune(corpus, s->train, enc, init_ptr) : pretrain(corpus, s->train, enc, init_ptr);
    save_checkpoint(r.checkpoint, s->out);
    r.log.checkpoint_path = s->out;
    const std::string log_path = s->log.empty() ? s->out + ".log.json" : s->log;
    write_json("--log", log_path, to_json(r.log));
    std::ostringstream msg;
    msg << to_string(s->train.objective) << ": " << r.log.epoch_loss.size() << " epochs, loss "
        << r.log.epoch_loss.front() << " -> " << r.log.epoch_loss.back() << "; checkpoint " << s->out;
    ctx.info(msg.str());
    return kOk;
  };
}

// ------------------------------------------------------------------ predict

std::function<int()> setup_predict(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("predict", "per-graph fake probability and label");
  struct State {
    std::string corpus;
    std::string checkpoint;
    std::string out;
  };
  auto s = std::make_shared<State>();
  app->add_option("--corpus", s->corpus, "input corpus (JSONL)")->required();
  app->add_option("--checkpoint", s->checkpoint, "checkpoint to apply")->required();
  app->add_option("--out", s->out, "output JSON path (default: stdout)");
  return [s, &ctx] {
    const Corpus corpus = load_corpus("--corpus", s->corpus);
    const Checkpoint ck = load_ck("--checkpoint", s->checkpoint);
    nlohmann::json j{{"config", {{"corpus", s->corpus}, {"checkpoint", s->checkpoint}}},
                     {"predictions", to_json(predict(corpus, ck))}};
    if (s->out.empty()) ctx.out << j.dump(2) << "\n";
    else write_json("--out", s->out, j);
    return kOk;
  };
}

// ----------------------------------------------------------------- evaluate

std::function<int()> setup_evaluate(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("evaluate", "metrics of a checkpoint, or k-fold fine-tuning with --cv-folds");
  struct State {
    std::string corpus;
    std::string checkpoint;
    std::string out;
    Index cv_folds = 0;
    TrainConfig train;
    EncoderConfig enc;
    Overrides train_ov;
    Overrides enc_ov;
  };
  auto s = std::make_shared<State>();
  app->add_option("--corpus", s->corpus, "labelled corpus (JSONL)")->required();
  app->add_option("--checkpoint", s->checkpoint, "checkpoint to score, or the fine-tuning start with --cv-folds");
  app->add_option("--out", s->out, "output JSON path (default: stdout)");
  app->add_option("--config", "JSON config file (sections gen, encoder, train, experiment)");
  app->add_option("--cv-folds", s->cv_folds, "k-fold fine-tuning and held-out scoring instead")
      ->check(CLI::Range(2, 1000));
  TrainConfig& tc = s->train;
  add_train_flags(app, s->train_ov, tc);
  s->train_ov.add<Index>(app, "--train-count", "cap each fold's training set", 0,
                         [&tc](const Index& v) { tc.train_count = v; })
      ->check(CLI::PositiveNumber)
      ->default_str("all");
  add_encoder_flags(app, s->enc_ov, s->enc);

  return [s, &ctx] {
    s->train = TrainConfig{};
    if (const auto* j = ctx.section("train")) s->train = train_config_from_json(*j, s->train);
    s->enc = EncoderConfig{};
    if (const auto* j = ctx.section("encoder")) s->enc = encoder_config_from_json(*j, s->enc);
    s->train_ov.apply();
    s->enc_ov.apply();
    if (s->cv_folds == 0 && s->checkpoint.empty()) throw UsageError("--checkpoint is required without --cv-folds");

    const Corpus corpus = load_corpus("--corpus", s->corpus);
    std::optional<Checkpoint> ck;
    if (!s->checkpoint.empty()) ck = load_ck("--checkpoint", s->checkpoint);
    nlohmann::json j;
    if (s->cv_folds == 0) {
      std::vector<int> truth;
      std::vector<int> pred;
      for (const auto& g : corpus.graphs) {
        if (!g.label) throw MissingLabelError("--corpus " + s->corpus + ": graph '" + g.id + "' has no label");
        truth.push_back(*g.label);
      }
      for (const auto& p : predict(corpus, *ck)) pred.push_back(p.label);
      const Metrics m = confusion_and_metrics(truth, pred);
      j = {{"config", {{"corpus", s->corpus}, {"checkpoint", s->checkpoint}}},
           {"n", truth.size()},
           {"metrics",
            {{"precision", m.precision}, {"recall", m.recall}, {"accuracy", m.accuracy}, {"macro_f1", m.macro_f1}}}};
    } else {
      ExperimentConfig ec;
      ec.folds = s->cv_folds;
      ec.seed = s->train.seed;
      ec.encoder = resolve_encoder(ctx, s->enc_ov, s->enc, corpus, ck ? &*ck : nullptr);
      ec.batch_size = s->train.batch_size;
      ec.lr = s->train.lr;
      ec.finetune_epochs = s->train.epochs.value_or(default_epochs(Objective::finetune, corpus.graphs.size()));
      const FoldPlan plan = kfold(corpus.graphs.size(), ec.folds, ec.seed);
      const MetricsRecord r = cross_validate(corpus, ec, ck ? &*ck : nullptr, s->train.train_count, plan);
      j = {{"config",
            {{"corpus", s->corpus},
             {"checkpoint", s->checkpoint.empty() ? nlohmann::json(nullptr) : nlohmann::json(s->checkpoint)},
             {"cv", to_json(ec)},
             {"train_count", s->train.train_count ? nlohmann::json(*s->train.train_count) : nlohmann::json(nullptr)}}},
           {"metrics", to_json(r)}};
    }
    if (s->out.empty()) ctx.out << j.dump(2) << "\n";
    else write_json("--out", s->out, j);
    return kOk;
  };
}

// --------------------------------------------------------------- experiment

std::function<int()> setup_experiment(CLI::App& root, Context& ctx) {
  auto* app = root.add_subcommand("experiment", "pre-training x fine-tuning matrix with k-fold CV and t-tests");
  struct State {
    std::string pretrain;
    std::string finetune;
    std::string out;
    std::string table;
    ExperimentConfig cfg;
    EncoderConfig enc;
    Overrides ov;
    Overrides enc_ov;
    bool both = false;
  };
  auto s = std::make_shared<State>();
  app->add_option("--pretrain", s->pretrain, "pre-training corpus (JSONL)")->required();
  app->add_option("--finetune", s->finetune, "labelled fine-tuning corpus (JSONL)")->required();
  app->add_option("--out", s->out, "report JSON path (default: stdout)");
  app->add_option("--table", s->table, "plain-text table path");
  app->add_option("--config", "JSON config file (sections gen, encoder, train, experiment)");
  app->add_flag("--both", s->both, "with --low-resource, also run the full 80/20 section");
  const ExperimentConfig d;
  ExperimentConfig& c = s->cfg;
  auto& ov = s->ov;
  ov.add<Index>(app, "--low-resource", "fine-tune on this many graphs per fold", 0,
                [&c](const Index& v) { c.low_resource = v; })
      ->check(CLI::PositiveNumber)
      ->default_str("off");
  ov.add<Index>(app, "--folds", "cross-validation folds", d.folds, [&c](const Index& v) { c.folds = v; })
      ->check(CLI::Range(2, 1000));
  ov.add<std::uint64_t>(app, "--seed", "master seed", d.seed, [&c](const std::uint64_t& v) { c.seed = v; });
  ov.add<Index>(app, "--batch-size", "minibatch size", d.batch_size, [&c](const Index& v) { c.batch_size = v; })
      ->check(CLI::PositiveNumber);
  ov.add<double>(app, "--lr", "Adam learning rate", d.lr, [&c](const double& v) { c.lr = v; })
      ->check(CLI::PositiveNumber);
  ov.add<Index>(app, "--node-epochs", "node-level pre-training epochs", 50, [&c](const Index& v) { c.node_epochs = v; })
      ->check(CLI::PositiveNumber);
  ov.add<Index>(app, "--graph-epochs", "graph-level pre-training epochs", 0,
                [&c](const Index& v) { c.graph_epochs = v; })
      ->check(CLI::PositiveNumber)
      ->default_str("25 (<= 1000 graphs) or 50");
  ov.add<Index>(app, "--finetune-epochs", "fine-tuning epochs (0 scores the initial weights)", d.finetune_epochs,
                [&c](const Index& v) { c.finetune_epochs = v; })
      ->check(CLI::NonNegativeNumber);
  ov.flag(app, "--no-pretraining", "every setup starts from scratch", [&c] { c.pretraining_enabled = false; });
  ov.add<Index>(app, "--jobs", "worker threads", d.jobs, [&c](const Index& v) { c.jobs = v; })
      ->check(CLI::PositiveNumber);
  add_encoder_flags(app, s->enc_ov, s->enc);

  return [s, &ctx] {
    s->cfg = ExperimentConfig{};
    if (const auto* j = ctx.section("experiment")) s->cfg = experiment_config_from_json(*j, s->cfg);
    s->enc = s->cfg.encoder;
    if (const auto* j = ctx.section("encoder")) s->enc = encoder_config_from_json(*j, s->enc);
    s->ov.apply();
    s->enc_ov.apply();
    if (s->both && !s->cfg.low_resource) throw UsageError("--both requires --low-resource");
    if (s->cfg.low_resource) {
      const auto* exp = ctx.section("experiment");
      if (s->both) s->cfg.full = true;
      else if (!exp || !exp->contains("full")) s->cfg.full = false;
    }

    const Corpus pre = load_corpus("--pretrain", s->pretrain);
    const Corpus fine = load_corpus("--finetune", s->finetune);
    s->cfg.encoder = s->enc;
    s->cfg.encoder.feature_dim = fine.feature_dim;
    ExperimentReport report = experiment_matrix(pre, fine, s->cfg);
    report.config["pretrain_path"] = s->pretrain;
    report.config["finetune_path"] = s->finetune;
    const nlohmann::json j = to_json(report);
    if (s->out.empty()) ctx.out << j.dump(2) << "\n";
    else write_json("--out", s->out, j);
    const std::string text = format_report(report);
    if (!s->table.empty()) write_text("--table", s->table, text);
    if (!s->out.empty() && s->table.empty()) ctx.out << text;
    return kOk;
  };
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Context ctx{out, err, nlohmann::json::object(), false};
  CLI::App app{"Heterogeneous graph transformer pre-training and fine-tuning for fake news detection", "ctxgnn"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_flag("-q,--quiet", ctx.quiet, "suppress progress lines on stderr");
  app.set_version_flag("--version", "ctxgnn 0.1.0");

  std::vector<std::pair<CLI::App*, std::function<int()>>> runners;
  auto reg = [&](std::function<int()> fn) { runners.emplace_back(app.get_subcommands({}).back(), std::move(fn)); };
  reg(setup_corpusgen(app, ctx));
  reg(setup_training(app, ctx, false));
  reg(setup_training(app, ctx, true));
  reg(setup_predict(app, ctx));
  reg(setup_evaluate(app, ctx));
  reg(setup_experiment(app, ctx));

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    ctx.config_file = load_config_file(prescan_config(args));
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }

  for (auto& [sub, fn] : runners) {
    if (!sub->parsed()) continue;
    try {
      return fn();
    } catch (const UsageError& e) {
      err << "usage error: " << e.what() << "\n";
      return kUsage;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kDataError;
    }
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace ctxgnn::cli
