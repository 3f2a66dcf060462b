#include <doctest.h>

#include <cstring>

#include "support.hpp"
#include "toist/checkpoint.hpp"
#include "toist/config.hpp"
#include "toist/evaluation.hpp"
#include "toist/train.hpp"

using namespace toist;
using train::DistillConfig;
using train::DistillTrainer;
using train::ModelTrainer;
using train::TextForm;
using train::TrainConfig;

namespace {

const synth::Dataset& tiny_data() {
  static const synth::Dataset d = [] {
    synth::GenerationParams p;
    p.seed = 17;
    p.scenes_per_task = 4;
    return synth::generate(p);
  }();
  return d;
}

TrainConfig tiny_train(std::uint64_t seed = 3) {
  TrainConfig t;
  t.seed = seed;
  t.batch_size = 4;
  t.epochs = 2;
  return t;
}

bool same_bits(const model::ParamSet<float>& a, const model::ParamSet<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.all()[i].value.data;
    const auto& y = b.all()[i].value.data;
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), sizeof(float) * static_cast<std::size_t>(x.size())) != 0)
      return false;
  }
  return true;
}

DistillConfig flags_off() {
  DistillConfig d;
  d.ccr = d.cluster_loss = d.sbtl = false;
  return d;
}

}  // namespace

TEST_CASE("AdamW step against a hand-computed update") {
  model::ParamSet<double> ps;
  ps.add("w", ad::Tensor<double>(ad::Shape{1, 2}, {1.0, -2.0}));
  train::AdamWConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.5;
  train::AdamW<double> opt(c);
  ps["w"].grad << 0.3, -0.4;
  opt.step(ps);
  // First step: m/c1 = g and v/c2 = g^2, so the Adam term is sign(g) up to eps.
  const double w0 = 1.0 * (1 - 0.1 * 0.5) - 0.1 * 0.3 / (0.3 + 1e-8);
  const double w1 = -2.0 * (1 - 0.1 * 0.5) - 0.1 * -0.4 / (0.4 + 1e-8);
  CHECK(ps["w"].value.data(0, 0) == doctest::Approx(w0).epsilon(1e-14));
  CHECK(ps["w"].value.data(0, 1) == doctest::Approx(w1).epsilon(1e-14));
  // Second step with a new gradient, bias corrections from the closed form.
  ps["w"].grad << 0.1, 0.2;
  opt.step(ps);
  const double m = 0.9 * 0.1 * 0.3 + 0.1 * 0.1, v = 0.999 * 0.001 * 0.09 + 0.001 * 0.01;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  CHECK(ps["w"].value.data(0, 0) == doctest::Approx(w0 * 0.95 - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-12));
  CHECK(opt.steps() == 2);
}

TEST_CASE("global norm clipping") {
  model::ParamSet<double> a, b;
  a.add("w", ad::Tensor<double>(ad::Shape{1, 2}, {0.0, 0.0}));
  b.add("w", ad::Tensor<double>(ad::Shape{1, 2}, {0.0, 0.0}));
  train::AdamWConfig c;
  c.weight_decay = 0;
  c.clip_norm = 1.0;
  train::AdamW<double> clipped(c);
  c.clip_norm = 0;
  train::AdamW<double> plain(c);
  a["w"].grad << 30, 40;
  b["w"].grad << 0.6, 0.8;
  clipped.step(a);
  plain.step(b);
  CHECK(clipped.first_moments()[0](0, 0) == doctest::Approx(plain.first_moments()[0](0, 0)));
  CHECK(clipped.second_moments()[0](0, 1) == doctest::Approx(plain.second_moments()[0](0, 1)));
  CHECK_THROWS([] {
    train::AdamWConfig bad;
    bad.lr = 0;
    bad.validate();
  }());
}

TEST_CASE("learning-rate drop") {
  TrainConfig t = tiny_train();
  t.lr_drop = 1;
  ModelTrainer m(model::ModelConfig{}, loss::LossWeights{}, t, TextForm::kPronoun);
  m.schedule();
  CHECK(m.optimizer.config().lr == t.optim.lr);
  m.train_epoch(tiny_data());
  m.schedule();
  CHECK(m.optimizer.config().lr == doctest::Approx(t.optim.lr * 0.1));
}

TEST_CASE("training reduces the loss on a tiny set") {
  TrainConfig t = tiny_train();
  t.epochs = 6;
  ModelTrainer m(model::ModelConfig{}, loss::LossWeights{}, t, TextForm::kNoun);
  std::vector<double> losses;
  m.fit(tiny_data(), [&](const train::EpochStats& e) { losses.push_back(e.mean.loss); });
  REQUIRE(losses.size() == 6);
  CHECK(losses.back() < losses.front());
  CHECK(m.epoch == 6);
}

TEST_CASE("distillation with every flag off equals plain student training") {
  DistillTrainer d(model::ModelConfig{}, loss::LossWeights{}, tiny_train(), flags_off(), 5);
  ModelTrainer plain(model::ModelConfig{}, loss::LossWeights{}, tiny_train(), TextForm::kPronoun);
  for (int e = 0; e < 2; ++e) {
    const auto de = d.train_epoch(tiny_data());
    const auto pe = plain.train_epoch(tiny_data());
    CHECK(de.mean.student == pe.mean.loss);
    CHECK(de.mean.cluster == 0.0);
    CHECK(de.mean.binary == 0.0);
    CHECK(same_bits(d.student.params, plain.params));
  }
}

TEST_CASE("two-phase distillation leaves the teacher untouched") {
  ModelTrainer teacher(model::ModelConfig{}, loss::LossWeights{}, tiny_train(5), TextForm::kNoun);
  ModelTrainer student(model::ModelConfig{}, loss::LossWeights{}, tiny_train(6), TextForm::kPronoun);
  const auto before = teacher.params.cast<float>();
  DistillConfig dc;
  dc.joint = false;
  dc.k = 2;
  DistillTrainer d(std::move(teacher), std::move(student), dc, 5);
  d.train_epoch(tiny_data());
  d.train_epoch(tiny_data());
  CHECK(same_bits(d.teacher.params, before));
  CHECK(d.teacher.optimizer.steps() == 0);
  CHECK(d.student.optimizer.steps() == 10);
  int filled = 0;
  for (int t = 0; t < 5; ++t) filled += d.bank.size(t) > 0;
  CHECK(filled == 5);
}

TEST_CASE("full distillation runs and records every term") {
  DistillConfig dc;
  dc.k = 2;
  DistillTrainer d(model::ModelConfig{}, loss::LossWeights{}, tiny_train(), dc, 5);
  const auto e0 = d.train_epoch(tiny_data());
  const auto e1 = d.train_epoch(tiny_data());
  CHECK(std::isfinite(e1.mean.loss));
  CHECK(e1.mean.binary > 0.0);
  CHECK(e1.mean.replaced > 0);
  CHECK(e0.steps == 5);

  // The bank is read at inference: zeroing it moves the predictions.
  d.bank.freeze();
  eval::Models m{&d.student.config, &d.student.params, nullptr, &d.bank};
  const auto with_bank = eval::predict(m, tiny_data(), eval::Mode::kDistilled);
  distill::MemoryBank zeroed = d.bank;
  for (int t = 0; t < 5; ++t)
    zeroed.restore(t, Eigen::MatrixXd::Zero(d.bank.size(t), d.bank.dim()), d.bank.updates(t));
  m.bank = &zeroed;
  const auto without = eval::predict(m, tiny_data(), eval::Mode::kDistilled);
  double moved = 0;
  for (std::size_t i = 0; i < with_bank.size(); ++i)
    moved = std::max(moved, (with_bank[i].values.boxes - without[i].values.boxes).cwiseAbs().maxCoeff());
  CHECK(moved > 1e-6);
}

TEST_CASE("warm start rejects mismatched models") {
  model::ModelConfig other;
  other.d = 16;
  ModelTrainer teacher(model::ModelConfig{}, loss::LossWeights{}, tiny_train(), TextForm::kNoun);
  ModelTrainer student(other, loss::LossWeights{}, tiny_train(), TextForm::kPronoun);
  CHECK_THROWS(DistillTrainer(teacher, student, DistillConfig{}, 5));
  ModelTrainer wrong(model::ModelConfig{}, loss::LossWeights{}, tiny_train(), TextForm::kNoun);
  CHECK_THROWS(DistillTrainer(teacher, wrong, DistillConfig{}, 5));
}

TEST_CASE("checkpoint round trip continues training bit-exactly") {
  ModelTrainer a(model::ModelConfig{}, loss::LossWeights{}, tiny_train(), TextForm::kPronoun);
  a.train_epoch(tiny_data());
  ckpt::Checkpoint c;
  c.config_text = "train.seed = 3\n";
  c.models.push_back(ckpt::capture("model", a));
  const auto bytes = ckpt::serialize(c);
  const ckpt::Checkpoint back = ckpt::deserialize(bytes);
  CHECK(ckpt::serialize(back) == bytes);
  CHECK(back.config_text == c.config_text);

  ModelTrainer b(model::ModelConfig{}, loss::LossWeights{}, tiny_train(99), TextForm::kPronoun);
  ckpt::restore(back.model("model"), b);
  CHECK(same_bits(a.params, b.params));
  const auto ea = a.train_epoch(tiny_data());
  const auto eb = b.train_epoch(tiny_data());
  CHECK(ea.mean.loss == eb.mean.loss);
  CHECK(same_bits(a.params, b.params));
  CHECK(b.epoch == 2);
}

TEST_CASE("distillation checkpoint with bank continues bit-exactly") {
  DistillConfig dc;
  dc.k = 2;
  DistillTrainer a(model::ModelConfig{}, loss::LossWeights{}, tiny_train(), dc, 5);
  a.train_epoch(tiny_data());
  ckpt::Checkpoint c;
  c.models.push_back(ckpt::capture("teacher", a.teacher));
  c.models.push_back(ckpt::capture("student", a.student));
  c.bank = a.bank;
  const ckpt::Checkpoint back = ckpt::deserialize(ckpt::serialize(c));
  REQUIRE(back.bank.has_value());
  DistillTrainer b(model::ModelConfig{}, loss::LossWeights{}, tiny_train(42), dc, 5);
  ckpt::restore(back.model("teacher"), b.teacher);
  ckpt::restore(back.model("student"), b.student);
  b.bank = *back.bank;
  a.train_epoch(tiny_data());
  b.train_epoch(tiny_data());
  CHECK(same_bits(a.student.params, b.student.params));
  CHECK(same_bits(a.teacher.params, b.teacher.params));
  for (int t = 0; t < 5; ++t) CHECK(a.bank.entries(t) == b.bank.entries(t));
}

TEST_CASE("checkpoint failure modes") {
  ModelTrainer a(model::ModelConfig{}, loss::LossWeights{}, tiny_train(), TextForm::kPronoun);
  ckpt::Checkpoint c;
  c.models.push_back(ckpt::capture("model", a));
  const auto bytes = ckpt::serialize(c);
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + 100);
  CHECK_THROWS_WITH_AS(ckpt::deserialize(cut), doctest::Contains("at byte"), ckpt::FormatError);
  auto magic = bytes;
  magic[1] = 'X';
  CHECK_THROWS_AS(ckpt::deserialize(magic), ckpt::FormatError);
  auto version = bytes;
  version[8] = 7;
  CHECK_THROWS_WITH_AS(ckpt::deserialize(version), doctest::Contains("unsupported version"), ckpt::FormatError);
  CHECK_THROWS_AS(c.model("student"), ckpt::FormatError);

  model::ModelConfig other;
  other.ffn_dim = 32;
  ModelTrainer b(other, loss::LossWeights{}, tiny_train(), TextForm::kPronoun);
  CHECK_THROWS_AS(ckpt::restore(c.model("model"), b), ckpt::FormatError);
}

TEST_CASE("run config text round trip") {
  RunConfig c = RunConfig::preset("toy");
  c.set("distill.k", "5");
  c.set("optim.lr", "0.000123");
  c.set("distill.policy", "fifo");
  c.set("model.self_attention", "false");
  const std::string text = c.to_text();
  RunConfig d = RunConfig::preset("paper");
  d.apply_text(text);
  CHECK(d.to_text() == text);
  CHECK(d.distill.k == 5);
  CHECK(d.train.optim.lr == 0.000123);
  CHECK(d.distill.policy == distill::UpdatePolicy::kFifo);
  CHECK_FALSE(d.model.decoder_self_attention);
  for (const std::string& key : RunConfig::keys()) CHECK(d.get(key) == c.get(key));

  CHECK_THROWS_AS(c.set("model.depth", "3"), ConfigError);
  CHECK_THROWS_AS(c.set("model.d", "big"), ConfigError);
  CHECK_THROWS_AS(c.set("distill.policy", "lru"), ConfigError);
  CHECK_THROWS_AS(c.apply_text("model.d 32\n"), ConfigError);
  CHECK_NOTHROW(c.apply_text("# comment\n\nmodel.d = 32  # trailing\n"));
  CHECK_THROWS_AS(RunConfig::preset("huge"), ConfigError);

  RunConfig bad = RunConfig::preset("toy");
  CHECK_NOTHROW(bad.validate());
  bad.generation.grid_h = 12;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig::preset("toy");
  bad.distill_mode = "staged";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(RunConfig::preset("paper").validate());
}
