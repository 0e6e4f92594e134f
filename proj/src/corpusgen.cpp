#include "ctxgnn/corpusgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ctxgnn {

void validate(const GenConfig& cfg) {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
  if (cfg.n_graphs < 0) fail("n_graphs", "must be >= 0");
  if (cfg.feature_dim < 1) fail("feature_dim", "must be >= 1");
  if (!(cfg.label_balance >= 0.0 && cfg.label_balance <= 1.0)) fail("label_balance", "must lie in [0, 1]");
  auto check_range = [&](const char* field, std::pair<Index, Index> r) {
    if (r.first < 0 || r.first > r.second) fail(field, "need 0 <= min <= max");
  };
  check_range("post_count_range", cfg.post_count_range);
  check_range("user_count_range", cfg.user_count_range);
  if (!(cfg.retweet_fraction_mean >= 0.0 && cfg.retweet_fraction_mean <= 1.0))
    fail("retweet_fraction_mean", "must lie in [0, 1]");
  if (!(cfg.timeline_fraction_mean >= 0.0 && cfg.timeline_fraction_mean <= 1.0))
    fail("timeline_fraction_mean", "must lie in [0, 1]");
  if (cfg.retweet_fraction_mean + cfg.timeline_fraction_mean > 1.0)
    fail("timeline_fraction_mean", "retweet and timeline fractions exceed 1 together");
  if (!(cfg.signal_strength >= 0.0) || !std::isfinite(cfg.signal_strength)) fail("signal_strength", "must be >= 0");
  if (!(cfg.domain_shift >= 0.0) || !std::isfinite(cfg.domain_shift)) fail("domain_shift", "must be >= 0");
  if (!(cfg.coupling_strength >= 0.0)) fail("coupling_strength", "must be >= 0");
  if (cfg.domain_shift > 0.0 && cfg.feature_dim < 2)
    fail("domain_shift", "needs feature_dim >= 2 for a direction orthogonal to the label");
  if (cfg.retweet_fraction_mean > 0.0 && cfg.post_count_range.second == 0)
    fail("retweet_fraction_mean", "retweets requested but post_count_range max is 0");
  if (cfg.post_count_range.second > 0 && cfg.user_count_range.second == 0)
    fail("user_count_range", "posts need a posting user but max users is 0");
}

namespace {

Eigen::RowVectorXd random_unit(std::mt19937_64& rng, Index d) {
  std::normal_distribution<double> normal;
  Eigen::RowVectorXd v(d);
  do {
    for (Index i = 0; i < d; ++i) v(i) = normal(rng);
  } while (v.norm() == 0.0);
  return v.normalized();
}

Index uniform_index(std::mt19937_64& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

Matrix gaussian_rows(std::mt19937_64& rng, Index n, Index d, const Eigen::RowVectorXd& mean) {
  std::normal_distribution<double> normal;
  Matrix m(n, d);
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < d; ++c) m(r, c) = mean(c) + normal(rng);
  return m;
}

struct Directions {
  Eigen::RowVectorXd label;
  Eigen::RowVectorXd corpus;
};

Directions draw_directions(std::uint64_t direction_seed, Index d) {
  std::seed_seq rng_seq{static_cast<std::uint32_t>(direction_seed), static_cast<std::uint32_t>(direction_seed >> 32), 0x5eedu};
  std::mt19937_64 rng(rng_seq);
  Directions dirs;
  dirs.label = random_unit(rng, d);
  if (d < 2) {
    dirs.corpus = Eigen::RowVectorXd::Zero(d);
    return dirs;
  }
  Eigen::RowVectorXd v = random_unit(rng, d);
  v -= v.dot(dirs.label) * dirs.label;
  dirs.corpus = v.normalized();
  return dirs;
}

// Feature-signal scale per node type: the article carries the full class
// signal, context nodes a weaker echo of it.
constexpr double kArticleSignal = 1.0;
constexpr double kPostSignal = 0.5;
constexpr double kUserSignal = 0.25;

HeteroGraph generate_graph(const GenConfig& cfg, const Directions& dirs, Index index, int label) {
  std::seed_seq rng_seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(rng_seq);
  const double y = label == 1 ? 1.0 : -1.0;
  const Index d = cfg.feature_dim;

  Index n_posts = uniform_index(rng, cfg.post_count_range.first, cfg.post_count_range.second);
  Index n_users = uniform_index(rng, cfg.user_count_range.first, cfg.user_count_range.second);
  if (n_posts > 0 && n_users == 0) n_users = 1;

  std::normal_distribution<double> jitter(0.0, 0.05);
  const double coupling =
      cfg.retweet_label_coupling ? cfg.coupling_strength * std::tanh(cfg.signal_strength) * y : 0.0;
  const double rt_frac = std::clamp(cfg.retweet_fraction_mean + coupling + jitter(rng), 0.0, 0.95);
  const double tl_frac = std::clamp(cfg.timeline_fraction_mean + jitter(rng), 0.0, 0.95);
  auto n_rt = static_cast<Index>(std::lround(rt_frac * static_cast<double>(n_posts)));
  auto n_tl = static_cast<Index>(std::lround(tl_frac * static_cast<double>(n_posts)));
  n_rt = std::min(n_rt, n_posts);
  n_tl = std::min(n_tl, n_posts - n_rt);
  // A retweet needs a tweet to cite.
  if (n_rt > 0 && n_posts - n_rt - n_tl == 0) {
    if (n_tl > 0) --n_tl;
    else --n_rt;
  }

  HeteroGraph g;
  g.id = cfg.name + "-" + std::to_string(index);
  g.label = label;
  g.post_subtype.assign(static_cast<std::size_t>(n_posts), PostSubtype::tweet);
  std::fill_n(g.post_subtype.begin(), n_rt, PostSubtype::retweet);
  std::fill_n(g.post_subtype.begin() + n_rt, n_tl, PostSubtype::timeline);
  std::shuffle(g.post_subtype.begin(), g.post_subtype.end(), rng);

  std::vector<Index> tweets;
  for (Index i = 0; i < n_posts; ++i)
    if (g.post_subtype[static_cast<std::size_t>(i)] == PostSubtype::tweet) tweets.push_back(i);

  // Posting users: the first min(n_users, n_posts) posts in a random order get
  // distinct users, the rest draw uniformly.
  std::vector<Index> order(static_cast<std::size_t>(n_posts));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Index> poster(static_cast<std::size_t>(n_posts));
  for (std::size_t k = 0; k < order.size(); ++k)
    poster[static_cast<std::size_t>(order[k])] =
        static_cast<Index>(k) < n_users ? static_cast<Index>(k) : uniform_index(rng, 0, n_users - 1);

  for (const auto& t : canonical_edge_types()) g.edges[std::string(t.name)];
  for (Index i = 0; i < n_posts; ++i) {
    const Index u = poster[static_cast<std::size_t>(i)];
    switch (g.post_subtype[static_cast<std::size_t>(i)]) {
      case PostSubtype::tweet:
        g.edges[std::string(kTweetCitesArticle)].push_back({i, 0});
        g.edges[std::string(kUserPostsTweet)].push_back({u, i});
        break;
      case PostSubtype::retweet: {
        const Index target = tweets[static_cast<std::size_t>(uniform_index(rng, 0, Index(tweets.size()) - 1))];
        g.edges[std::string(kRetweetCitesTweet)].push_back({i, target});
        g.edges[std::string(kUserPostsRetweet)].push_back({u, i});
        break;
      }
      case PostSubtype::timeline:
        g.edges[std::string(kUserPostsTimeline)].push_back({u, i});
        break;
    }
  }

  const Eigen::RowVectorXd shift = cfg.domain_shift * dirs.corpus;
  const Eigen::RowVectorXd signal = cfg.signal_strength * y * dirs.label;
  g.article_x = gaussian_rows(rng, 1, d, shift + kArticleSignal * signal);
  g.post_x = gaussian_rows(rng, n_posts, d, shift + kPostSignal * signal);
  g.user_x = gaussian_rows(rng, n_users, d, shift + kUserSignal * signal);
  return g;
}

}  // namespace

Corpus generate(const GenConfig& cfg) {
  validate(cfg);
  Corpus c;
  c.name = cfg.name;
  c.feature_dim = cfg.feature_dim;
  c.provenance = {{"generator", "ctxgnn.corpusgen"}, {"config", to_json(cfg)}};

  // Exact class counts; which graphs are fake is a seeded permutation.
  const auto n = static_cast<std::size_t>(cfg.n_graphs);
  const auto n_fake = static_cast<std::size_t>(std::lround(cfg.label_balance * static_cast<double>(n)));
  std::vector<int> labels(n, 0);
  std::fill_n(labels.begin(), n_fake, 1);
  std::seed_seq label_rng_seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x1abe1u};
  std::mt19937_64 label_rng(label_rng_seq);
  std::shuffle(labels.begin(), labels.end(), label_rng);

  const Directions dirs = draw_directions(cfg.direction_seed, cfg.feature_dim);
  c.graphs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) c.graphs.push_back(generate_graph(cfg, dirs, static_cast<Index>(i), labels[i]));
  return c;
}

const std::map<std::string, GenConfig>& presets() {
  static const std::map<std::string, GenConfig> table = [] {
    std::map<std::string, GenConfig> m;
    GenConfig pol;
    pol.name = "pol_like";
    pol.n_graphs = 483;
    m["pol_like"] = pol;

    GenConfig gos = pol;
    gos.name = "gos_like";
    gos.n_graphs = 12214;
    m["gos_like"] = gos;

    // CI-sized: narrower features and smaller context graphs.
    GenConfig pol_tiny = pol;
    pol_tiny.name = "pol_tiny";
    pol_tiny.n_graphs = 100;
    pol_tiny.feature_dim = 32;
    pol_tiny.post_count_range = {5, 30};
    pol_tiny.user_count_range = {3, 20};
    m["pol_tiny"] = pol_tiny;

    GenConfig gos_tiny = pol_tiny;
    gos_tiny.name = "gos_tiny";
    gos_tiny.n_graphs = 500;
    m["gos_tiny"] = gos_tiny;
    return m;
  }();
  return table;
}

GenConfig preset(const std::string& name) {
  auto it = presets().find(name);
  if (it == presets().end()) throw ConfigError("unknown preset '" + name + "'");
  return it->second;
}

nlohmann::json to_json(const GenConfig& cfg) {
  return {{"name", cfg.name},
          {"seed", cfg.seed},
          {"n_graphs", cfg.n_graphs},
          {"feature_dim", cfg.feature_dim},
          {"label_balance", cfg.label_balance},
          {"post_count_range", {cfg.post_count_range.first, cfg.post_count_range.second}},
          {"user_count_range", {cfg.user_count_range.first, cfg.user_count_range.second}},
          {"retweet_fraction_mean", cfg.retweet_fraction_mean},
          {"timeline_fraction_mean", cfg.timeline_fraction_mean},
          {"signal_strength", cfg.signal_strength},
          {"domain_shift", cfg.domain_shift},
          {"retweet_label_coupling", cfg.retweet_label_coupling},
          {"coupling_strength", cfg.coupling_strength},
          {"direction_seed", cfg.direction_seed}};
}

GenConfig gen_config_from_json(const nlohmann::json& j, GenConfig base) {
  if (!j.is_object()) throw ConfigError("generator config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "name") base.name = v.get<std::string>();
      else if (key == "seed") base.seed = v.get<std::uint64_t>();
      else if (key == "n_graphs") base.n_graphs = v.get<Index>();
      else if (key == "feature_dim") base.feature_dim = v.get<Index>();
      else if (key == "label_balance") base.label_balance = v.get<double>();
      else if (key == "post_count_range") base.post_count_range = {v.at(0).get<Index>(), v.at(1).get<Index>()};
      else if (key == "user_count_range") base.user_count_range = {v.at(0).get<Index>(), v.at(1).get<Index>()};
      else if (key == "retweet_fraction_mean") base.retweet_fraction_mean = v.get<double>();
      else if (key == "timeline_fraction_mean") base.timeline_fraction_mean = v.get<double>();
      else if (key == "signal_strength") base.signal_strength = v.get<double>();
      else if (key == "domain_shift") base.domain_shift = v.get<double>();
      else if (key == "retweet_label_coupling") base.retweet_label_coupling = v.get<bool>();
      else if (key == "coupling_strength") base.coupling_strength = v.get<double>();
      else if (key == "direction_seed") base.direction_seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown generator config field '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }
  return base;
}

}  // namespace ctxgnn
