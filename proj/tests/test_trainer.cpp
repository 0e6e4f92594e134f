#include "doctest.h"

#include "ctxgnn/objectives.hpp"
#include "ctxgnn/trainer.hpp"
#include "test_support.hpp"

#include <filesystem>
#include <set>

using namespace ctxgnn;
using namespace ctxgnn::testing;

namespace {

TrainConfig quick(Objective o, Index epochs = 5) {
  TrainConfig cfg;
  cfg.objective = o;
  cfg.epochs = epochs;
  cfg.batch_size = 8;
  cfg.lr = 0.01;
  cfg.seed = 3;
  return cfg;
}

bool encoder_equal(const EncoderParams& a, const EncoderParams& b) {
  for (const auto& [name, p] : a.tensors) {
    if (is_head_param(name)) continue;
    if (!same_shape_and_values(p.value, b.at(name).value)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("epoch bookkeeping") {
  CHECK(batches_per_epoch(483, 128) == 4);
  CHECK(batches_per_epoch(128, 128) == 1);
  CHECK(batches_per_epoch(129, 128) == 2);
  CHECK(batches_per_epoch(0, 128) == 0);
  CHECK(default_epochs(Objective::node_mask, 12214) == 50);
  CHECK(default_epochs(Objective::context_pred, 10) == 50);
  CHECK(default_epochs(Objective::finetune, 483) == 50);
  CHECK(default_epochs(Objective::retweet_count, 1000) == 25);
  CHECK(default_epochs(Objective::retweet_count, 1001) == 50);
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(resolved_epochs(cfg, 10), TrainError);
  cfg.epochs = 7;
  CHECK(resolved_epochs(cfg, 10) == 7);
}

TEST_CASE("objective names") {
  CHECK(parse_objective("node-mask") == Objective::node_mask);
  CHECK(parse_objective("retweet_count") == Objective::retweet_count);
  CHECK(parse_objective("context-pred") == Objective::context_pred);
  CHECK_FALSE(parse_objective("graph_cl"));
  CHECK(is_pretraining(Objective::retweet_count));
  CHECK_FALSE(is_pretraining(Objective::finetune));
}

TEST_CASE("train config json") {
  TrainConfig cfg = quick(Objective::retweet_count, 9);
  cfg.train_count = 12;
  cfg.init_checkpoint = "x.json";
  const TrainConfig back = train_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK(train_config_from_json({{"lr", 0.5}}, cfg).batch_size == 8);
  CHECK_THROWS_AS(train_config_from_json({{"learning_rate", 0.5}}), TrainError);
  CHECK_THROWS_AS(train_config_from_json({{"objective", "graph_cl"}}), TrainError);
  CHECK_THROWS_AS(train_config_from_json({{"epochs", "ten"}}), TrainError);
}

TEST_CASE("pre-training lowers the objective") {
  const Corpus corpus = small_corpus(24, 4, 6);
  const EncoderConfig enc = small_encoder(6);
  SUBCASE("node masking") {
    const auto r = pretrain(corpus, quick(Objective::node_mask, 12), enc);
    REQUIRE(r.log.epoch_loss.size() == 12);
    CHECK(r.log.epoch_loss.back() < r.log.epoch_loss.front());
    CHECK(r.log.epoch_seconds.size() == 12);
    CHECK(r.log.train_ids.empty());
  }
  SUBCASE("retweet count") {
    const auto r = pretrain(corpus, quick(Objective::retweet_count, 12), enc);
    CHECK(r.log.epoch_loss.back() < r.log.epoch_loss.front());
  }
  SUBCASE("context prediction") {
    const auto r = pretrain(corpus, quick(Objective::context_pred, 3), enc);
    REQUIRE(r.log.epoch_loss.size() == 3);
    for (double l : r.log.epoch_loss) CHECK(std::isfinite(l));
  }
}

TEST_CASE("pre-training is deterministic for a seed") {
  const Corpus corpus = small_corpus(12, 8, 6);
  const EncoderConfig enc = small_encoder(6);
  for (auto o : {Objective::node_mask, Objective::context_pred, Objective::retweet_count}) {
    const auto a = pretrain(corpus, quick(o, 2), enc);
    const auto b = pretrain(corpus, quick(o, 2), enc);
    CHECK(a.log.epoch_loss == b.log.epoch_loss);
    CHECK(checkpoint_to_json(a.checkpoint) == checkpoint_to_json(b.checkpoint));
    TrainConfig other = quick(o, 2);
    other.seed = 4;
    CHECK_FALSE(checkpoint_to_json(pretrain(corpus, other, enc).checkpoint) == checkpoint_to_json(a.checkpoint));
  }
}

TEST_CASE("pre-training input errors") {
  const Corpus corpus = small_corpus(6, 1, 6);
  const EncoderConfig enc = small_encoder(6);
  CHECK_THROWS_AS(pretrain(corpus, quick(Objective::finetune), enc), TrainError);
  CHECK_THROWS_AS(pretrain(corpus, quick(Objective::node_mask), small_encoder(5)), TrainError);
  Corpus one = corpus;
  one.graphs.resize(1);
  CHECK_THROWS_WITH_AS(pretrain(one, quick(Objective::context_pred), enc), doctest::Contains("at least 2"),
                       TrainError);
  Corpus empty = corpus;
  empty.graphs.clear();
  CHECK_THROWS_AS(pretrain(empty, quick(Objective::node_mask), enc), TrainError);
  TrainConfig bad = quick(Objective::node_mask);
  bad.batch_size = 0;
  CHECK_THROWS_AS(pretrain(corpus, bad, enc), TrainError);
  bad = quick(Objective::node_mask);
  bad.lr = 0.0;
  CHECK_THROWS_AS(pretrain(corpus, bad, enc), TrainError);
  const auto other = pretrain(corpus, quick(Objective::node_mask, 1), small_encoder(6, 8));
  CHECK_THROWS_AS(pretrain(corpus, quick(Objective::node_mask, 1), enc, &other.checkpoint), TrainError);
}

TEST_CASE("continued pre-training starts from the given weights") {
  const Corpus corpus = small_corpus(10, 2, 6);
  const EncoderConfig enc = small_encoder(6);
  const auto first = pretrain(corpus, quick(Objective::node_mask, 2), enc);
  TrainConfig tiny = quick(Objective::retweet_count, 1);
  tiny.lr = 1e-12;
  const auto cont = pretrain(corpus, tiny, enc, &first.checkpoint);
  for (const auto& [name, p] : first.checkpoint.params.tensors)
    CHECK((p.value - cont.checkpoint.params.at(name).value).cwiseAbs().maxCoeff() < 1e-9);

  SUBCASE("from a file") {
    const auto path = std::filesystem::temp_directory_path() / "ctxgnn_trainer_init.json";
    save_checkpoint(first.checkpoint, path);
    TrainConfig via_file = tiny;
    via_file.init_checkpoint = path.string();
    CHECK(checkpoint_to_json(pretrain(corpus, via_file, enc).checkpoint) == checkpoint_to_json(cont.checkpoint));
    std::filesystem::remove(path);
  }
}

TEST_CASE("initial checkpoint") {
  const EncoderConfig enc = small_encoder(6);
  TrainConfig cfg = quick(Objective::finetune);
  const Checkpoint scratch = initial_checkpoint(cfg, enc, nullptr);
  CHECK(checkpoint_to_json(scratch) == checkpoint_to_json(initial_checkpoint(cfg, enc, nullptr)));

  Checkpoint pre = scratch;
  for (auto& [name, p] : pre.params.tensors) p.value.array() += 0.25;
  cfg.seed = 77;
  const Checkpoint reinit = initial_checkpoint(cfg, enc, &pre);
  CHECK(encoder_equal(reinit.params, pre.params));
  CHECK_FALSE(same_shape_and_values(reinit.params.at("head.classify.weight").value,
                                    pre.params.at("head.classify.weight").value));
  EncoderParams expected = pre.params;
  reinit_heads(expected, enc, reinit.head_seed);
  CHECK(same_shape_and_values(reinit.params.at("head.classify.weight").value,
                              expected.at("head.classify.weight").value));

  cfg.head_reinit = false;
  CHECK(checkpoint_to_json(initial_checkpoint(cfg, enc, &pre)) == checkpoint_to_json(pre));
}

TEST_CASE("training subset") {
  TrainConfig cfg;
  CHECK(training_subset(5, cfg).size() == 5);
  cfg.train_count = 50;
  const auto a = training_subset(100, cfg);
  CHECK(a.size() == 50);
  CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 50);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(a.back() < 100);
  CHECK(training_subset(100, cfg) == a);
  cfg.seed = 43;
  CHECK(training_subset(100, cfg) != a);
  cfg.train_count = 0;
  CHECK_THROWS_AS(training_subset(100, cfg), TrainError);
  cfg.train_count = 101;
  CHECK_THROWS_AS(training_subset(100, cfg), TrainError);
}

TEST_CASE("fine-tuning") {
  const Corpus corpus = small_corpus(60, 21, 6, 2.0);
  const EncoderConfig enc = small_encoder(6);
  TrainConfig cfg = quick(Objective::finetune, 15);

  SUBCASE("learns a separable corpus") {
    const auto r = finetune(corpus, cfg, enc);
    CHECK(r.log.train_ids.size() == 60);
    const auto preds = predict(corpus, r.checkpoint);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i].label == *corpus.graphs[i].label;
    CHECK(static_cast<double>(correct) / 60.0 >= 0.95);
    CHECK(r.log.epoch_loss.back() < r.log.epoch_loss.front());
  }
  SUBCASE("train_count restricts the graphs seen") {
    cfg.epochs = 1;
    cfg.train_count = 20;
    const auto r = finetune(corpus, cfg, enc);
    CHECK(r.log.train_ids.size() == 20);
    std::set<std::string> ids(r.log.train_ids.begin(), r.log.train_ids.end());
    CHECK(ids.size() == 20);
    std::set<std::string> all;
    for (const auto& g : corpus.graphs) all.insert(g.id);
    for (const auto& id : ids) CHECK(all.count(id) == 1);
  }
  SUBCASE("deterministic") {
    cfg.epochs = 2;
    CHECK(checkpoint_to_json(finetune(corpus, cfg, enc).checkpoint) ==
          checkpoint_to_json(finetune(corpus, cfg, enc).checkpoint));
  }
  SUBCASE("labels are required") {
    Corpus unlabeled = corpus;
    unlabeled.graphs[3].label.reset();
    cfg.epochs = 1;
    CHECK_THROWS_AS(finetune(unlabeled, cfg, enc), MissingLabelError);
  }
}

TEST_CASE("predict") {
  const Corpus corpus = small_corpus(8, 6, 6);
  const EncoderConfig enc = small_encoder(6);
  const Checkpoint ck = initial_checkpoint(quick(Objective::finetune), enc, nullptr);
  const auto preds = predict(corpus, ck);
  REQUIRE(preds.size() == 8);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(preds[i].id == corpus.graphs[i].id);
    Tape tape;
    Bindings p(tape, ck.params);
    const Matrix logits = classify_logits(p, encode(p, corpus.graphs[i], enc), enc).value();
    const double oracle = 1.0 / (1.0 + std::exp(logits(0, 0) - logits(0, 1)));
    CHECK(std::abs(preds[i].prob_fake - oracle) <= 1e-12);
    CHECK(preds[i].label == (preds[i].prob_fake > 0.5 ? 1 : 0));
  }
  const auto again = predict(corpus, ck);
  for (std::size_t i = 0; i < preds.size(); ++i) CHECK(again[i].prob_fake == preds[i].prob_fake);
  const auto j = to_json(preds);
  CHECK(j.size() == 8);
  CHECK(j[0].contains("prob_fake"));
  CHECK_THROWS_AS(predict(small_corpus(2, 6, 5), ck), TrainError);
}
