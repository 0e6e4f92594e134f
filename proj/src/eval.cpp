#include "ctxgnn/eval.hpp"

#include "ctxgnn/objectives.hpp"
#include "ctxgnn/seeding.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace ctxgnn {

namespace {

enum Stream : std::uint64_t {
  kFolds = 11,
  kFoldTrain = 1000,
  kPretrain = 2000,
};

double ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace

Metrics confusion_and_metrics(std::span<const int> truth, std::span<const int> pred) {
  if (truth.size() != pred.size())
    throw EvalError("truth has " + std::to_string(truth.size()) + " labels but pred has " +
                    std::to_string(pred.size()));
  if (truth.empty()) throw EvalError("metrics need at least one example");
  // c[t][p]
  double c[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if ((truth[i] != 0 && truth[i] != 1) || (pred[i] != 0 && pred[i] != 1))
      throw EvalError("labels must be 0 or 1 (index " + std::to_string(i) + ")");
    c[truth[i]][pred[i]] += 1.0;
  }
  Metrics m;
  double f1_sum = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double tp = c[k][k];
    const double fp = c[1 - k][k];
    const double fn = c[k][1 - k];
    const double p = ratio(tp, tp + fp);
    const double r = ratio(tp, tp + fn);
    m.precision += p / 2.0;
    m.recall += r / 2.0;
    f1_sum += ratio(2.0 * p * r, p + r);
  }
  m.macro_f1 = f1_sum / 2.0;
  m.accuracy = (c[0][0] + c[1][1]) / static_cast<double>(truth.size());
  return m;
}

MetricsRecord aggregate(std::span<const Metrics> per_fold) {
  MetricsRecord r;
  for (const auto& m : per_fold) {
    r.precision.folds.push_back(m.precision);
    r.recall.folds.push_back(m.recall);
    r.accuracy.folds.push_back(m.accuracy);
    r.macro_f1.folds.push_back(m.macro_f1);
  }
  for (MetricSeries* s : {&r.precision, &r.recall, &r.accuracy, &r.macro_f1}) {
    if (!s->folds.empty())
      s->mean = std::accumulate(s->folds.begin(), s->folds.end(), 0.0) / static_cast<double>(s->folds.size());
  }
  return r;
}

nlohmann::json to_json(const MetricsRecord& r) {
  auto series = [](const MetricSeries& s) { return nlohmann::json{{"folds", s.folds}, {"mean", s.mean}}; };
  return {{"precision", series(r.precision)},
          {"recall", series(r.recall)},
          {"accuracy", series(r.accuracy)},
          {"macro_f1", series(r.macro_f1)}};
}

FoldPlan kfold(std::size_t n, Index k, std::uint64_t seed) {
  if (k < 2) throw EvalError("k must be >= 2, got " + std::to_string(k));
  if (n < static_cast<std::size_t>(k))
    throw EvalError("cannot split " + std::to_string(n) + " items into " + std::to_string(k) + " folds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto rng = make_rng(seed, kFolds);
  std::shuffle(order.begin(), order.end(), rng);

  FoldPlan plan{k, seed, {}, {}};
  const auto kk = static_cast<std::size_t>(k);
  std::size_t begin = 0;
  for (std::size_t f = 0; f < kk; ++f) {
    const std::size_t size = n / kk + (f < n % kk ? 1 : 0);
    std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                  order.begin() + static_cast<std::ptrdiff_t>(begin + size));
    std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(begin));
    train.insert(train.end(), order.begin() + static_cast<std::ptrdiff_t>(begin + size), order.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    plan.test.push_back(std::move(test));
    plan.train.push_back(std::move(train));
    begin += size;
  }
  return plan;
}

namespace {

// Modified Lentz evaluation of the continued fraction for I_x(a, b).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 1000; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw EvalError("incomplete_beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw EvalError("incomplete_beta needs x in [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  if (x < (a + 1.0) / (a + b + 2.0)) return std::exp(log_front) * beta_continued_fraction(a, b, x) / a;
  return 1.0 - std::exp(log_front) * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw EvalError("degrees of freedom must be > 0");
  if (std::isinf(t)) return 0.0;
  if (std::isnan(t)) throw EvalError("t statistic is NaN");
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

SignificanceReport paired_ttest_bonferroni(std::span<const NamedScores> setups, double alpha, std::string metric) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw EvalError("alpha must lie in (0, 1)");
  SignificanceReport report;
  report.metric = std::move(metric);
  report.alpha = alpha;
  if (setups.empty()) return report;
  const std::size_t k = setups.front().scores.size();
  for (const auto& s : setups) {
    if (s.scores.size() != k)
      throw EvalError("setup '" + s.name + "' has " + std::to_string(s.scores.size()) + " scores, expected " +
                      std::to_string(k));
  }
  if (k < 2) throw EvalError("paired t-test needs at least 2 scores per setup");
  report.comparisons = setups.size() * (setups.size() - 1) / 2;
  const double df = static_cast<double>(k - 1);
  for (std::size_t i = 0; i < setups.size(); ++i) {
    for (std::size_t j = i + 1; j < setups.size(); ++j) {
      PairTest pt;
      pt.a = setups[i].name;
      pt.b = setups[j].name;
      std::vector<double> diff(k);
      for (std::size_t f = 0; f < k; ++f) diff[f] = setups[i].scores[f] - setups[j].scores[f];
      const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / static_cast<double>(k);
      double ss = 0.0;
      for (double d : diff) ss += (d - mean) * (d - mean);
      const double var = ss / df;
      if (!(var > 0.0)) {
        pt.degenerate = true;
      } else {
        pt.t = mean / std::sqrt(var / static_cast<double>(k));
        pt.p_raw = student_t_two_sided_p(pt.t, df);
        pt.p_adjusted = std::min(1.0, pt.p_raw * static_cast<double>(report.comparisons));
        pt.significant = pt.p_adjusted < alpha;
      }
      report.pairs.push_back(std::move(pt));
    }
  }
  return report;
}

nlohmann::json to_json(const SignificanceReport& r) {
  auto pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) {
    nlohmann::json j{{"a", p.a}, {"b", p.b}, {"degenerate", p.degenerate}, {"significant", p.significant}};
    if (p.degenerate) {
      j["t"] = nullptr;
      j["p_raw"] = nullptr;
      j["p_adjusted"] = nullptr;
    } else {
      j["t"] = p.t;
      j["p_raw"] = p.p_raw;
      j["p_adjusted"] = p.p_adjusted;
    }
    pairs.push_back(std::move(j));
  }
  return {{"metric", r.metric}, {"alpha", r.alpha}, {"comparisons", r.comparisons}, {"pairs", pairs}};
}

const std::array<Setup, 6>& table_setups() {
  static const std::array<Setup, 6> setups{{
      {"none", std::nullopt, false},
      {"ContextPred", Objective::context_pred, false},
      {"NodeMasking", Objective::node_mask, false},
      {"#RT", std::nullopt, true},
      {"ContextPred+#RT", Objective::context_pred, true},
      {"NodeMasking+#RT", Objective::node_mask, true},
  }};
  return setups;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  auto opt = [](const std::optional<Index>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"folds", cfg.folds},
          {"seed", cfg.seed},
          {"encoder", to_json(cfg.encoder)},
          {"batch_size", cfg.batch_size},
          {"lr", cfg.lr},
          {"node_epochs", opt(cfg.node_epochs)},
          {"graph_epochs", opt(cfg.graph_epochs)},
          {"finetune_epochs", cfg.finetune_epochs},
          {"pretraining_enabled", cfg.pretraining_enabled},
          {"full", cfg.full},
          {"low_resource", opt(cfg.low_resource)},
          {"jobs", cfg.jobs}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base) {
  if (!j.is_object()) throw EvalError("experiment config must be a JSON object");
  auto opt = [](const nlohmann::json& v) { return v.is_null() ? std::nullopt : std::optional<Index>(v.get<Index>()); };
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "folds") base.folds = v.get<Index>();
      else if (key == "seed") base.seed = v.get<std::uint64_t>();
      else if (key == "encoder") base.encoder = encoder_config_from_json(v, base.encoder);
      else if (key == "batch_size") base.batch_size = v.get<Index>();
      else if (key == "lr") base.lr = v.get<double>();
      else if (key == "node_epochs") base.node_epochs = opt(v);
      else if (key == "graph_epochs") base.graph_epochs = opt(v);
      else if (key == "finetune_epochs") base.finetune_epochs = v.get<Index>();
      else if (key == "pretraining_enabled") base.pretraining_enabled = v.get<bool>();
      else if (key == "full") base.full = v.get<bool>();
      else if (key == "low_resource") base.low_resource = opt(v);
      else if (key == "jobs") base.jobs = v.get<Index>();
      else throw EvalError("unknown experiment config field '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw EvalError(key + ": " + e.what());
    }
  }
  return base;
}

void parallel_for(std::size_t n, Index jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max<Index>(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  auto work = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (error || next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

void require_labels(const Corpus& corpus) {
  for (const auto& g : corpus.graphs)
    if (!g.label) throw MissingLabelError("graph '" + g.id + "' in corpus '" + corpus.name + "' has no label");
}

Corpus subset(const Corpus& corpus, const std::vector<std::size_t>& ids) {
  Corpus out;
  out.name = corpus.name;
  out.feature_dim = corpus.feature_dim;
  out.graphs.reserve(ids.size());
  for (auto i : ids) out.graphs.push_back(corpus.graphs[i]);
  return out;
}

Metrics run_fold(const Corpus& corpus, const ExperimentConfig& cfg, const Checkpoint* init,
                 std::optional<Index> train_count, const FoldPlan& plan, std::size_t fold) {
  TrainConfig tc;
  tc.batch_size = cfg.batch_size;
  tc.lr = cfg.lr;
  tc.objective = Objective::finetune;
  tc.seed = derive_seed(cfg.seed, kFoldTrain + fold);
  tc.head_reinit = true;
  tc.train_count = train_count;

  Checkpoint ck;
  if (cfg.finetune_epochs == 0) {
    ck = initial_checkpoint(tc, cfg.encoder, init);
  } else {
    tc.epochs = cfg.finetune_epochs;
    ck = finetune(subset(corpus, plan.train[fold]), tc, cfg.encoder, init).checkpoint;
  }
  const Corpus test = subset(corpus, plan.test[fold]);
  std::vector<int> truth;
  std::vector<int> pred;
  for (const auto& p : predict(test, ck)) pred.push_back(p.label);
  for (const auto& g : test.graphs) truth.push_back(*g.label);
  return confusion_and_metrics(truth, pred);
}

void check_plan(const Corpus& corpus, const ExperimentConfig& cfg, const FoldPlan& plan) {
  if (cfg.finetune_epochs < 0) throw EvalError("finetune_epochs must be >= 0");
  if (plan.test.size() != static_cast<std::size_t>(plan.k) || plan.train.size() != plan.test.size())
    throw EvalError("malformed fold plan");
  for (std::size_t f = 0; f < plan.test.size(); ++f)
    for (auto i : plan.test[f])
      if (i >= corpus.graphs.size()) throw EvalError("fold plan index out of range for corpus '" + corpus.name + "'");
}

}  // namespace

MetricsRecord cross_validate(const Corpus& corpus, const ExperimentConfig& cfg, const Checkpoint* init,
                             std::optional<Index> train_count, const FoldPlan& plan) {
  require_labels(corpus);
  check_plan(corpus, cfg, plan);
  std::vector<Metrics> per_fold(plan.test.size());
  parallel_for(per_fold.size(), cfg.jobs,
               [&](std::size_t f) { per_fold[f] = run_fold(corpus, cfg, init, train_count, plan, f); });
  return aggregate(per_fold);
}

ExperimentReport experiment_matrix(const Corpus& pretrain_corpus, const Corpus& finetune_corpus,
                                   const ExperimentConfig& cfg) {
  require_labels(finetune_corpus);
  if (!cfg.full && !cfg.low_resource) throw EvalError("experiment has neither a full nor a low-resource section");
  if (cfg.low_resource && *cfg.low_resource < 1) throw EvalError("low_resource train_count must be >= 1");
  validate(cfg.encoder);
  if (finetune_corpus.feature_dim != cfg.encoder.feature_dim)
    throw EvalError("fine-tune corpus feature_dim " + std::to_string(finetune_corpus.feature_dim) +
                    " != encoder feature_dim " + std::to_string(cfg.encoder.feature_dim));

  ExperimentReport report;
  report.config = to_json(cfg);
  report.pretrain_corpus = pretrain_corpus.name;
  report.finetune_corpus = finetune_corpus.name;
  const auto& setups = table_setups();

  // Starting checkpoints per setup; index 0 (no pre-training) stays empty.
  std::array<std::optional<TrainResult>, 6> pretrained;
  if (cfg.pretraining_enabled) {
    if (pretrain_corpus.feature_dim != cfg.encoder.feature_dim)
      throw EvalError("pre-train corpus feature_dim " + std::to_string(pretrain_corpus.feature_dim) +
                      " != encoder feature_dim " + std::to_string(cfg.encoder.feature_dim));
    auto run = [&](std::size_t s, Objective o, const Checkpoint* init) {
      TrainConfig tc;
      tc.batch_size = cfg.batch_size;
      tc.lr = cfg.lr;
      tc.objective = o;
      tc.seed = derive_seed(cfg.seed, kPretrain + s);
      tc.epochs = o == Objective::retweet_count ? cfg.graph_epochs : cfg.node_epochs;
      pretrained[s] = pretrain(pretrain_corpus, tc, cfg.encoder, init);
    };
    // Single-task setups first; the combined ones continue from node-level weights.
    const std::array<std::size_t, 3> first{1, 2, 3};
    parallel_for(first.size(), cfg.jobs, [&](std::size_t i) {
      const std::size_t s = first[i];
      run(s, setups[s].node_task.value_or(Objective::retweet_count), nullptr);
    });
    const std::array<std::size_t, 2> second{4, 5};
    parallel_for(second.size(), cfg.jobs, [&](std::size_t i) {
      const std::size_t s = second[i];
      const std::size_t node_setup = *setups[s].node_task == Objective::context_pred ? 1 : 2;
      run(s, Objective::retweet_count, &pretrained[node_setup]->checkpoint);
    });
    for (std::size_t s = 1; s < setups.size(); ++s) report.pretrain_logs.emplace_back(setups[s].name, pretrained[s]->log);
  }

  const FoldPlan plan = kfold(finetune_corpus.graphs.size(), cfg.folds, cfg.seed);
  check_plan(finetune_corpus, cfg, plan);
  if (cfg.low_resource) {
    std::size_t smallest = finetune_corpus.graphs.size();
    for (const auto& t : plan.train) smallest = std::min(smallest, t.size());
    if (static_cast<std::size_t>(*cfg.low_resource) > smallest)
      throw EvalError("low_resource train_count " + std::to_string(*cfg.low_resource) + " exceeds the " +
                      std::to_string(smallest) + " training graphs of the smallest fold");
  }

  struct SectionSpec {
    std::string mode;
    std::optional<Index> train_count;
  };
  std::vector<SectionSpec> specs;
  if (cfg.full) specs.push_back({"full", std::nullopt});
  if (cfg.low_resource) specs.push_back({"low_resource", cfg.low_resource});

  const std::size_t n_folds = plan.test.size();
  const std::size_t cells_per_section = setups.size() * n_folds;
  std::vector<Metrics> cells(specs.size() * cells_per_section);
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t c) {
    const std::size_t sec = c / cells_per_section;
    const std::size_t s = (c % cells_per_section) / n_folds;
    const std::size_t f = c % n_folds;
    const Checkpoint* init = pretrained[s] ? &pretrained[s]->checkpoint : nullptr;
    cells[c] = run_fold(finetune_corpus, cfg, init, specs[sec].train_count, plan, f);
  });

  for (std::size_t sec = 0; sec < specs.size(); ++sec) {
    ExperimentSection section;
    section.mode = specs[sec].mode;
    section.train_count = specs[sec].train_count;
    std::vector<NamedScores> acc;
    std::vector<NamedScores> f1;
    for (std::size_t s = 0; s < setups.size(); ++s) {
      const auto first = cells.begin() + static_cast<std::ptrdiff_t>(sec * cells_per_section + s * n_folds);
      const std::vector<Metrics> per_fold(first, first + static_cast<std::ptrdiff_t>(n_folds));
      SetupResult row{setups[s], aggregate(per_fold)};
      acc.push_back({setups[s].name, row.metrics.accuracy.folds});
      f1.push_back({setups[s].name, row.metrics.macro_f1.folds});
      section.rows.push_back(std::move(row));
    }
    section.accuracy = paired_ttest_bonferroni(acc, 0.01, "accuracy");
    section.macro_f1 = paired_ttest_bonferroni(f1, 0.01, "macro_f1");
    report.sections.push_back(std::move(section));
  }
  return report;
}

nlohmann::json to_json(const ExperimentReport& r) {
  auto sections = nlohmann::json::array();
  for (const auto& s : r.sections) {
    auto rows = nlohmann::json::array();
    for (const auto& row : s.rows) {
      rows.push_back({{"setup", row.setup.name},
                      {"node_level", row.setup.node_task ? nlohmann::json(std::string(to_string(*row.setup.node_task)))
                                                         : nlohmann::json(nullptr)},
                      {"graph_level", row.setup.count_task ? nlohmann::json("retweet_count") : nlohmann::json(nullptr)},
                      {"metrics", to_json(row.metrics)}});
    }
    sections.push_back({{"mode", s.mode},
                        {"train_count", s.train_count ? nlohmann::json(*s.train_count) : nlohmann::json(nullptr)},
                        {"rows", rows},
                        {"significance", {{"accuracy", to_json(s.accuracy)}, {"macro_f1", to_json(s.macro_f1)}}}});
  }
  auto logs = nlohmann::json::array();
  for (const auto& [name, log] : r.pretrain_logs) logs.push_back({{"setup", name}, {"log", to_json(log)}});
  return {{"config", r.config},
          {"pretrain_corpus", r.pretrain_corpus},
          {"finetune_corpus", r.finetune_corpus},
          {"sections", sections},
          {"pretrain_logs", logs}};
}

namespace {

std::string node_label(const Setup& s) {
  if (!s.node_task) return "--";
  return *s.node_task == Objective::context_pred ? "ContextPred" : "NodeMasking";
}

void format_significance(std::ostringstream& out, const SignificanceReport& r) {
  out << "  " << r.metric << ": " << r.comparisons << " comparisons, Bonferroni, alpha " << r.alpha << "\n";
  for (const auto& p : r.pairs) {
    out << "    " << std::left << std::setw(17) << p.a << " vs " << std::setw(17) << p.b << std::right;
    if (p.degenerate) {
      out << "  degenerate pair\n";
      continue;
    }
    out << "  t " << std::setw(9) << std::fixed << std::setprecision(3) << p.t << "  p " << std::setprecision(4)
        << p.p_raw << "  p_adj " << p.p_adjusted << (p.significant ? "  *" : "") << "\n";
    out.unsetf(std::ios::fixed);
  }
}

}  // namespace

std::string format_report(const ExperimentReport& r) {
  std::ostringstream out;
  out << "pre-train: " << r.pretrain_corpus << "  fine-tune: " << r.finetune_corpus << "\n";
  for (const auto& s : r.sections) {
    const bool full = s.mode == "full";
    out << "\n[" << s.mode;
    if (s.train_count) out << ", train_count " << *s.train_count;
    out << "]\n";
    out << std::left << std::setw(13) << "Node-level" << std::setw(13) << "Graph-level" << std::right;
    if (full) out << std::setw(7) << "P" << std::setw(7) << "R";
    out << std::setw(7) << "ACC" << std::setw(7) << "F1" << "\n";
    out << std::fixed << std::setprecision(3);
    for (const auto& row : s.rows) {
      out << std::left << std::setw(13) << node_label(row.setup) << std::setw(13)
          << (row.setup.count_task ? "#RT" : "--") << std::right;
      if (full) out << std::setw(7) << row.metrics.precision.mean << std::setw(7) << row.metrics.recall.mean;
      out << std::setw(7) << row.metrics.accuracy.mean << std::setw(7) << row.metrics.macro_f1.mean << "\n";
    }
    out.unsetf(std::ios::fixed);
    out << std::setprecision(6);
    out << "significance:\n";
    format_significance(out, s.accuracy);
    format_significance(out, s.macro_f1);
  }
  return out.str();
}

}  // namespace ctxgnn
