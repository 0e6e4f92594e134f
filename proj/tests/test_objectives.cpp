#include "doctest.h"

#include "ctxgnn/objectives.hpp"
#include "test_support.hpp"

#include <cmath>
#include <numbers>
#include <set>

using namespace ctxgnn;
using namespace ctxgnn::testing;

namespace {

HeteroGraph graph_with_posts(Index n_posts, Index d = 4, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  HeteroGraph g;
  g.id = "p" + std::to_string(n_posts);
  g.label = 0;
  g.article_x = random_matrix(1, d, rng);
  g.post_x = random_matrix(n_posts, d, rng);
  g.post_subtype.assign(static_cast<std::size_t>(n_posts), PostSubtype::tweet);
  g.user_x = random_matrix(1, d, rng);
  for (Index i = 0; i < n_posts; ++i) {
    g.edges["tweet_cites_article"].push_back({i, 0});
    g.edges["user_posts_tweet"].push_back({0, i});
  }
  return g;
}

HeteroGraph with_retweets(Index n_retweets, Index d = 3) {
  HeteroGraph g = graph_with_posts(1 + n_retweets, d);
  g.edges["user_posts_tweet"] = {{0, 0}};
  g.edges["tweet_cites_article"] = {{0, 0}};
  for (Index i = 1; i <= n_retweets; ++i) {
    g.post_subtype[static_cast<std::size_t>(i)] = PostSubtype::retweet;
    g.edges["user_posts_retweet"].push_back({0, i});
    g.edges["retweet_cites_tweet"].push_back({i, 0});
  }
  return g;
}

}  // namespace

TEST_CASE("masked_count") {
  CHECK(masked_count(20) == 3);
  CHECK(masked_count(1) == 1);
  CHECK(masked_count(6) == 1);
  CHECK(masked_count(7) == 1);
  CHECK(masked_count(14) == 2);
  CHECK(masked_count(100) == 15);
  CHECK(masked_count(0) == 0);
  for (Index n = 1; n < 500; ++n)
    CHECK(masked_count(n) == std::max<Index>(1, static_cast<Index>(std::floor(0.15 * static_cast<double>(n)))));
}

TEST_CASE("build_masking_batch") {
  const HeteroGraph g = graph_with_posts(20);
  std::mt19937_64 rng(3);
  const auto b = build_masking_batch(g, rng);
  REQUIRE(b);
  CHECK(b->mask.size() == 3);
  CHECK(std::is_sorted(b->mask.begin(), b->mask.end()));
  CHECK(std::set<Index>(b->mask.begin(), b->mask.end()).size() == 3);
  for (std::size_t i = 0; i < b->mask.size(); ++i) {
    const Index r = b->mask[i];
    CHECK(b->graph.post_x.row(r) == Eigen::RowVectorXd::Constant(4, 1.0));
    CHECK(b->targets.row(static_cast<Index>(i)) == g.post_x.row(r));
  }
  for (Index r = 0; r < 20; ++r)
    if (!std::binary_search(b->mask.begin(), b->mask.end(), r)) CHECK(b->graph.post_x.row(r) == g.post_x.row(r));
  CHECK(b->graph.article_x == g.article_x);
  CHECK(b->graph.user_x == g.user_x);
  CHECK(b->graph.edges == g.edges);

  SUBCASE("one post masks one row") {
    std::mt19937_64 r2(1);
    const auto one = build_masking_batch(graph_with_posts(1), r2);
    REQUIRE(one);
    CHECK(one->mask == std::vector<Index>{0});
    CHECK(one->graph.post_x == Matrix::Ones(1, 4));
  }
  SUBCASE("no posts is skipped") {
    std::mt19937_64 r2(1);
    CHECK_FALSE(build_masking_batch(graph_with_posts(0), r2));
  }
  SUBCASE("same seed, same mask") {
    std::mt19937_64 a(9), c(9);
    CHECK(build_masking_batch(g, a)->mask == build_masking_batch(g, c)->mask);
  }
}

TEST_CASE("masking_loss") {
  const EncoderConfig cfg = small_encoder(4);
  EncoderParams params = init_params(cfg, 2, 3);
  const HeteroGraph g = graph_with_posts(8);
  std::mt19937_64 rng(5);
  const MaskingBatch b = *build_masking_batch(g, rng);
  REQUIRE(b.mask.size() == 1);

  SUBCASE("agrees with an MSE oracle over masked rows only") {
    Tape tape;
    Bindings p(tape, params);
    const double loss = masking_loss(p, b, cfg).item();
    Tape t2;
    Bindings p2(t2, params);
    const Matrix recon = reconstruct(p2, encode(p2, b.graph, cfg).post).value();
    double sse = 0.0;
    for (std::size_t i = 0; i < b.mask.size(); ++i)
      sse += (recon.row(b.mask[i]) - b.targets.row(static_cast<Index>(i))).squaredNorm();
    CHECK(std::abs(loss - sse / static_cast<double>(b.targets.size())) <= 1e-12);
    CHECK(loss >= 0.0);
  }
  params.at("head.recon.weight").value.setZero();
  SUBCASE("perfect reconstruction gives 0") {
    params.at("head.recon.bias").value = b.targets;
    Tape tape;
    Bindings p(tape, params);
    CHECK(masking_loss(p, b, cfg).item() == 0.0);
  }
  SUBCASE("off by one everywhere gives 1") {
    params.at("head.recon.bias").value = b.targets.array() + 1.0;
    Tape tape;
    Bindings p(tape, params);
    CHECK(masking_loss(p, b, cfg).item() == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("unmasked rows do not enter the loss") {
    params.at("head.recon.bias").value = b.targets.array() + 0.5;
    MaskingBatch perturbed = b;
    const Index unmasked = b.mask[0] == 0 ? 1 : 0;
    perturbed.graph.post_x.row(unmasked).array() += 10.0;
    Tape t1, t2;
    Bindings p1(t1, params), p2(t2, params);
    CHECK(masking_loss(p1, b, cfg).item() == masking_loss(p2, perturbed, cfg).item());
  }
}

TEST_CASE("build_context_pairs") {
  const Corpus corpus = small_corpus(7, 3, 4);
  const std::span<const HeteroGraph> pool(corpus.graphs);
  std::mt19937_64 rng(11);
  const auto pairs = build_context_pairs(pool, rng);
  CHECK(pairs.size() == 14);
  int pos = 0, neg = 0;
  std::map<std::string, int> per_article_pos, per_article_neg;
  for (const auto& pr : pairs) {
    CHECK(pr.context.article_x.rows() == 0);
    CHECK(pr.context.edges_of(kTweetCitesArticle).empty());
    if (pr.match == 1) {
      ++pos;
      ++per_article_pos[pr.article->id];
      CHECK(pr.context_source == pr.article->id);
      CHECK(pr.context == context_subgraph(*pr.article));
    } else {
      ++neg;
      ++per_article_neg[pr.article->id];
      CHECK(pr.context_source != pr.article->id);
    }
  }
  CHECK(pos == 7);
  CHECK(neg == 7);
  for (const auto& g : corpus.graphs) {
    CHECK(per_article_pos[g.id] == 1);
    CHECK(per_article_neg[g.id] == 1);
  }
  SUBCASE("deterministic") {
    std::mt19937_64 a(4), b(4);
    const auto x = build_context_pairs(pool, a), y = build_context_pairs(pool, b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(x[i].article == y[i].article);
      CHECK(x[i].context_source == y[i].context_source);
    }
  }
  SUBCASE("pool of one is rejected") {
    std::mt19937_64 r(1);
    CHECK_THROWS_AS(build_context_pairs(pool.first(1), r), std::invalid_argument);
  }
  SUBCASE("two graphs always pair with each other") {
    std::mt19937_64 r(1);
    for (const auto& pr : build_context_pairs(pool.first(2), r))
      if (pr.match == 0) CHECK(pr.context_source != pr.article->id);
  }
}

TEST_CASE("context_loss") {
  const EncoderConfig cfg = small_encoder(3);
  EncoderParams article = init_params(cfg, 1, 2);
  EncoderParams context = init_params(cfg, 3, 4);
  const Corpus corpus = small_corpus(3, 8, 3);
  std::mt19937_64 rng(2);
  const auto pairs = build_context_pairs(corpus.graphs, rng);

  SUBCASE("zero logit gives ln 2 for either label") {
    article.at("head.context.weight").value.setZero();
    for (const auto& pr : pairs) {
      Tape tape;
      Bindings a(tape, article), c(tape, context);
      CHECK(context_loss(a, c, std::span<const ContextPair>(&pr, 1), cfg).item() ==
            doctest::Approx(std::numbers::ln2).epsilon(1e-12));
    }
  }
  SUBCASE("saturated logits give a vanishing loss") {
    article.at("head.context.weight").value.setZero();
    for (const auto& pr : pairs) {
      article.at("head.context.bias").value(0, 0) = pr.match == 1 ? 20.0 : -20.0;
      Tape tape;
      Bindings a(tape, article), c(tape, context);
      CHECK(context_loss(a, c, std::span<const ContextPair>(&pr, 1), cfg).item() < 1e-8);
    }
  }
  SUBCASE("gradients reach both encoders and match finite differences") {
    std::vector<NamedParam<double>> named;
    for (auto& [n, p] : article.tensors) named.push_back({"article." + n, &p});
    for (auto& [n, p] : context.tensors) named.push_back({"context." + n, &p});
    const std::span<const ContextPair> two(pairs.data(), 2);
    auto r = grad_check<double>(
        [&](Tape& t) {
          Bindings a(t, article), c(t, context);
          return context_loss(a, c, two, cfg);
        },
        std::span<const NamedParam<double>>(named), 1e-5, 1e-4);
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-4);
    Tape t;
    Bindings a(t, article), c(t, context);
    article.zero_grad();
    context.zero_grad();
    t.backward(context_loss(a, c, two, cfg));
    CHECK(context.at("layer0.node.post.k.weight").grad.cwiseAbs().maxCoeff() > 0.0);
    CHECK(article.at("layer0.node.post.k.weight").grad.cwiseAbs().maxCoeff() > 0.0);
    CHECK(context.at("head.context.weight").grad.isZero(0.0));
  }
  SUBCASE("no pairs") {
    Tape t;
    Bindings a(t, article), c(t, context);
    CHECK_THROWS_AS(context_loss(a, c, {}, cfg), std::invalid_argument);
  }
}

TEST_CASE("count targets") {
  CHECK(count_target(graph_with_posts(3)).target == 0.0);
  CHECK(count_target(with_retweets(9)).target == doctest::Approx(2.302585092994046).epsilon(1e-15));
  CHECK(std::abs(count_target(with_retweets(9)).target - std::log(10.0)) <= 1e-15);
  CHECK(validate(with_retweets(9)).empty());
  HeteroGraph zeroed = with_retweets(4);
  zeroed.article_x.setZero();
  zeroed.post_x.setZero();
  zeroed.user_x.setZero();
  CHECK(count_target(zeroed).target == count_target(with_retweets(4)).target);
}

TEST_CASE("count_loss") {
  const EncoderConfig cfg = small_encoder(3);
  EncoderParams params = init_params(cfg, 1, 1);
  const HeteroGraph g = with_retweets(9);
  const CountTarget t = count_target(g);
  params.at("head.count.weight").value.setZero();
  params.at("head.count.bias").value(0, 0) = t.target;
  {
    Tape tape;
    Bindings p(tape, params);
    CHECK(count_loss(p, std::span<const CountTarget>(&t, 1), cfg).item() == 0.0);
  }
  params.at("head.count.bias").value(0, 0) = t.target - 2.0;
  Tape tape;
  Bindings p(tape, params);
  CHECK(count_loss(p, std::span<const CountTarget>(&t, 1), cfg).item() == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("classification_loss") {
  const EncoderConfig cfg = small_encoder(3);
  EncoderParams params = init_params(cfg, 1, 1);
  HeteroGraph g = toy_graph(3, 1, 1);
  const HeteroGraph* gp = &g;
  const std::span<const HeteroGraph* const> one(&gp, 1);
  params.at("head.classify.weight").value.setZero();

  SUBCASE("zero logits give ln 2") {
    Tape tape;
    Bindings p(tape, params);
    CHECK(classification_loss(p, one, cfg).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-12));
  }
  SUBCASE("confident correct predictions") {
    params.at("head.classify.bias").value << -20.0, 20.0;
    Tape tape;
    Bindings p(tape, params);
    CHECK(classification_loss(p, one, cfg).item() < 1e-8);
  }
  SUBCASE("matches a softmax cross-entropy oracle") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int trial = 0; trial < 50; ++trial) {
      const double l0 = n(rng), l1 = n(rng);
      params.at("head.classify.bias").value << l0, l1;
      g.label = trial % 2;
      Tape tape;
      Bindings p(tape, params);
      const double m = std::max(l0, l1);
      const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
      const double expected = lse - (g.label == 1 ? l1 : l0);
      CHECK(std::abs(classification_loss(p, one, cfg).item() - expected) <= 1e-12);
    }
  }
  SUBCASE("mean over graphs") {
    params.at("head.classify.bias").value << 0.3, -0.4;
    HeteroGraph h = toy_graph(3, 2, 0);
    const HeteroGraph* both[] = {&g, &h};
    Tape tape;
    Bindings p(tape, params);
    const double joint = classification_loss(p, std::span<const HeteroGraph* const>(both), cfg).item();
    Tape t1, t2;
    Bindings p1(t1, params), p2(t2, params);
    const double a = classification_loss(p1, one, cfg).item();
    const HeteroGraph* hp = &h;
    const double b = classification_loss(p2, std::span<const HeteroGraph* const>(&hp, 1), cfg).item();
    CHECK(std::abs(joint - (a + b) / 2.0) <= 1e-12);
  }
  SUBCASE("missing label is fatal") {
    g.label.reset();
    Tape tape;
    Bindings p(tape, params);
    CHECK_THROWS_AS(classification_loss(p, one, cfg), MissingLabelError);
  }
}

TEST_CASE("losses are non-negative") {
  const EncoderConfig cfg = small_encoder(6);
  const EncoderParams article = init_params(cfg, 5, 6);
  const EncoderParams context = init_params(cfg, 7, 8);
  const Corpus corpus = small_corpus(6, 2, 6);
  std::mt19937_64 rng(1);
  const auto pairs = build_context_pairs(corpus.graphs, rng);
  for (const auto& g : corpus.graphs) {
    Tape tape;
    Bindings p(tape, article), c(tape, context);
    if (auto b = build_masking_batch(g, rng)) CHECK(masking_loss(p, *b, cfg).item() >= 0.0);
    const CountTarget t = count_target(g);
    CHECK(count_loss(p, std::span<const CountTarget>(&t, 1), cfg).item() >= 0.0);
    const HeteroGraph* gp = &g;
    CHECK(classification_loss(p, std::span<const HeteroGraph* const>(&gp, 1), cfg).item() >= 0.0);
  }
  Tape tape;
  Bindings p(tape, article), c(tape, context);
  CHECK(context_loss(p, c, pairs, cfg).item() >= 0.0);
}
