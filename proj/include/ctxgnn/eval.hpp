#pragma once

// Classification metrics, k-fold plans, paired t-tests with Bonferroni
// correction, and the pre-training x fine-tuning experiment matrix.

#include "ctxgnn/encoder.hpp"
#include "ctxgnn/hetgraph.hpp"
#include "ctxgnn/trainer.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ctxgnn {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Metrics {
  double precision = 0.0;  // macro over both classes
  double recall = 0.0;     // macro over both classes
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

// Binary labels; undefined per-class ratios (0/0) count as 0.
Metrics confusion_and_metrics(std::span<const int> truth, std::span<const int> pred);

struct MetricSeries {
  std::vector<double> folds;
  double mean = 0.0;
};

struct MetricsRecord {
  MetricSeries precision;
  MetricSeries recall;
  MetricSeries accuracy;
  MetricSeries macro_f1;
};

MetricsRecord aggregate(std::span<const Metrics> per_fold);
nlohmann::json to_json(const MetricsRecord& r);

struct FoldPlan {
  Index k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> train;
  std::vector<std::vector<std::size_t>> test;
};

// Seeded shuffle, then contiguous split; the first n % k folds get one extra.
FoldPlan kfold(std::size_t n, Index k, std::uint64_t seed);

// Regularised incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
// Two-sided tail probability of Student's t with `df` degrees of freedom.
double student_t_two_sided_p(double t, double df);

struct PairTest {
  std::string a;
  std::string b;
  bool degenerate = false;  // zero-variance differences: no p-value
  double t = 0.0;
  double p_raw = 1.0;
  double p_adjusted = 1.0;
  bool significant = false;
};

struct SignificanceReport {
  std::string metric;
  double alpha = 0.01;
  std::size_t comparisons = 0;
  std::vector<PairTest> pairs;
};

struct NamedScores {
  std::string name;
  std::vector<double> scores;
};

// Two-sided paired t-test for every pair of setups, Bonferroni-adjusted over
// the number of pairs.
SignificanceReport paired_ttest_bonferroni(std::span<const NamedScores> setups, double alpha = 0.01,
                                           std::string metric = {});
nlohmann::json to_json(const SignificanceReport& r);

struct Setup {
  std::string name;
  std::optional<Objective> node_task;  // node_mask or context_pred
  bool count_task = false;
};

// {none, ContextPred, NodeMasking} x {none, #RT}, in table order.
const std::array<Setup, 6>& table_setups();

struct ExperimentConfig {
  Index folds = 5;
  std::uint64_t seed = 42;
  EncoderConfig encoder;
  Index batch_size = 128;
  double lr = 0.001;
  std::optional<Index> node_epochs;   // default 50
  std::optional<Index> graph_epochs;  // default 25 (<= 1000 graphs) or 50
  Index finetune_epochs = 50;         // 0 evaluates the initial weights
  bool pretraining_enabled = true;
  bool full = true;                   // 80/20 fine-tuning section
  std::optional<Index> low_resource;  // train_count for the low-resource section
  Index jobs = 1;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Fields absent from `j` keep their value in `base`; unknown fields throw.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {});

struct SetupResult {
  Setup setup;
  MetricsRecord metrics;
};

struct ExperimentSection {
  std::string mode;  // "full" or "low_resource"
  std::optional<Index> train_count;
  std::vector<SetupResult> rows;
  SignificanceReport accuracy;
  SignificanceReport macro_f1;
};

struct ExperimentReport {
  nlohmann::json config;
  std::string pretrain_corpus;
  std::string finetune_corpus;
  std::vector<ExperimentSection> sections;
  std::vector<std::pair<std::string, RunLog>> pretrain_logs;
};

// k-fold fine-tuning of one starting point (scratch when `init` is null);
// `train_count` caps each fold's training set. Folds run on up to cfg.jobs
// threads.
MetricsRecord cross_validate(const Corpus& corpus, const ExperimentConfig& cfg, const Checkpoint* init,
                             std::optional<Index> train_count, const FoldPlan& plan);

ExperimentReport experiment_matrix(const Corpus& pretrain_corpus, const Corpus& finetune_corpus,
                                   const ExperimentConfig& cfg);

nlohmann::json to_json(const ExperimentReport& r);
// Plain-text rendering: one table per section, then significance summaries.
std::string format_report(const ExperimentReport& r);

// Runs fn(0..n-1) on up to `jobs` threads; exceptions propagate.
void parallel_for(std::size_t n, Index jobs, const std::function<void(std::size_t)>& fn);

}  // namespace ctxgnn
