#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "support.hpp"
#include "toist/synthdata.hpp"

using namespace toist;
using namespace toist::synth;

namespace {

GenerationParams small_params(std::uint64_t seed, int scenes = 60) {
  GenerationParams p;
  p.seed = seed;
  p.scenes_per_task = scenes;
  return p;
}

const Dataset& shared_data() {
  static const Dataset d = generate(small_params(9, 200));
  return d;
}

}  // namespace

TEST_CASE("ground truth agrees with the independent oracle") {
  for (const Sample& s : shared_data().samples) {
    const TaskSpec& task = task_table()[static_cast<std::size_t>(s.task_id)];
    CHECK(s.gt == testing::oracle_ground_truth(task, s.scene.objects));
    CHECK(derive_ground_truth(task, s.scene.objects) == s.gt);
  }
}

TEST_CASE("scene construction invariants") {
  for (const Sample& s : shared_data().samples) {
    const Scene& sc = s.scene;
    REQUIRE(sc.features.rows() == sc.cells());
    REQUIRE(sc.feature_dim() == kFeatureDim);
    std::vector<int> owner(static_cast<std::size_t>(sc.cells()), -1);
    for (std::size_t i = 0; i < sc.objects.size(); ++i) {
      const ObjectSpec& o = sc.objects[i];
      CHECK(o.mask.count() > 0);
      for (int c = 0; c < sc.cells(); ++c) {
        if (!o.mask.cells[static_cast<std::size_t>(c)]) continue;
        CHECK(owner[static_cast<std::size_t>(c)] == -1);  // no overlap
        owner[static_cast<std::size_t>(c)] = static_cast<int>(i);
        // Category one-hot and objectness survive the noise.
        CHECK(sc.features(c, o.category) > 0.5f);
        CHECK(sc.features(c, kFeatureDim - 1) > 0.5f);
      }
      // The mask lies inside its box.
      const geom::Mask boxed = geom::rasterize_box(o.box, sc.height, sc.width);
      for (int c = 0; c < sc.cells(); ++c)
        if (o.mask.cells[static_cast<std::size_t>(c)]) CHECK(boxed.cells[static_cast<std::size_t>(c)] == 1);
    }
    for (int c = 0; c < sc.cells(); ++c)
      if (owner[static_cast<std::size_t>(c)] == -1) CHECK(std::abs(sc.features(c, kFeatureDim - 1)) < 0.5f);
  }
}

TEST_CASE("descriptions follow the form contract") {
  std::set<int> nouns, pronouns;
  for (int c = 0; c < kCategoryCount; ++c) nouns.insert(noun_token(c));
  for (const auto& p : pronoun_names()) pronouns.insert(pronoun_token(p));
  for (const Sample& s : shared_data().samples) {
    const TaskDescription& pron = s.pronoun_description;
    const TaskDescription& noun = s.noun_description;
    CHECK_NOTHROW(pron.validate(vocabulary_size(), 15));
    CHECK_NOTHROW(noun.validate(vocabulary_size(), 15));
    CHECK(pron.form == DescriptionForm::kVerbPronoun);
    CHECK(pron.special_positions.size() == 1);
    for (int pos : pron.special_positions) CHECK(pronouns.count(pron.tokens[static_cast<std::size_t>(pos)]) == 1);
    for (int tok : pron.tokens) CHECK(nouns.count(tok) == 0);  // nouns never leak into pronoun text
    if (s.gt.empty()) {
      CHECK(noun.form == DescriptionForm::kEmpty);
      CHECK(noun.tokens == std::vector<int>{kTokenEmpty});
    } else {
      CHECK(noun.form == DescriptionForm::kVerbNoun);
      const std::vector<int> cats = s.gt_categories();
      REQUIRE(noun.special_positions.size() == cats.size());
      for (std::size_t k = 0; k < cats.size(); ++k)
        CHECK(noun.tokens[static_cast<std::size_t>(noun.special_positions[k])] == noun_token(cats[k]));
    }
  }
}

TEST_CASE("scene-type mix and category diversity") {
  const Dataset& d = shared_data();
  for (int t = 0; t < d.params.n_task; ++t) {
    std::set<int> gt_categories;
    int empty = 0, multi = 0;
    for (const Sample* s : d.of_task(t)) {
      for (int c : s->gt_categories()) gt_categories.insert(c);
      empty += s->gt.empty();
      multi += s->gt_categories().size() > 1;
    }
    CAPTURE(t);
    CHECK(gt_categories.size() >= 3);
    CHECK(empty == doctest::Approx(0.2 * 200).epsilon(0.25));
    CHECK(multi > 0);
  }
}

TEST_CASE("generation is deterministic and scene-local") {
  const auto a = serialize(generate(small_params(7, 20)));
  const auto b = serialize(generate(small_params(7, 20)));
  CHECK(a == b);
  CHECK(serialize(generate(small_params(8, 20))) != a);
  const Sample one = generate_scene(small_params(7, 20), 3, 11);
  const Dataset full = generate(small_params(7, 20));
  const Sample& same = full.samples[3 * 20 + 11];
  CHECK(one.scene.features == same.scene.features);
  CHECK(one.gt == same.gt);
  CHECK(one.scene_id == same.scene_id);
}

TEST_CASE("stratified split") {
  const Dataset d = generate(small_params(3, 500));
  auto [train, test] = split(d, 0.8, 5);
  for (int t = 0; t < d.params.n_task; ++t) {
    CHECK(train.of_task(t).size() == 400);
    CHECK(test.of_task(t).size() == 100);
  }
  auto [train2, test2] = split(d, 0.8, 5);
  CHECK(serialize(train) == serialize(train2));
  CHECK(serialize(test) == serialize(test2));
  std::set<int> ids;
  for (const auto& s : train.samples) ids.insert(s.scene_id);
  for (const auto& s : test.samples) CHECK(ids.insert(s.scene_id).second);
  CHECK(ids.size() == d.samples.size());
  CHECK_THROWS(split(d, 1.0, 0));
}

TEST_CASE("pronoun swap touches only the pronoun slot") {
  const Dataset& d = shared_data();
  const Dataset it = with_pronoun(d, "it");
  REQUIRE(it.samples.size() == d.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const auto& a = d.samples[i].pronoun_description.tokens;
    const auto& b = it.samples[i].pronoun_description.tokens;
    CHECK(b.back() == pronoun_token("it"));
    CHECK(std::equal(a.begin(), a.end() - 1, b.begin()));
    CHECK(it.samples[i].noun_description == d.samples[i].noun_description);
  }
  CHECK_THROWS(with_pronoun(d, "thing"));
}

TEST_CASE("serialization round trip and failure modes") {
  const Dataset d = generate(small_params(4, 10));
  const auto bytes = serialize(d);
  const Dataset back = deserialize(bytes);
  CHECK(serialize(back) == bytes);
  CHECK(back.params == d.params);

  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  CHECK_THROWS_AS(deserialize(truncated), FormatError);
  CHECK_THROWS_WITH_AS(deserialize(truncated), doctest::Contains("at byte"), FormatError);

  auto bad_version = bytes;
  bad_version[8] = 99;
  CHECK_THROWS_WITH_AS(deserialize(bad_version), doctest::Contains("unsupported version"), FormatError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad_magic), FormatError);

  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize(trailing), FormatError);

  const auto path = std::filesystem::temp_directory_path() / "toist_test_roundtrip.bin";
  save(d, path);
  CHECK(serialize(load(path)) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS(load(path));
}

TEST_CASE("manifest lists tasks and counts") {
  const Dataset d = generate(small_params(4, 10));
  const std::string m = manifest_json(d, "train");
  CHECK(m.find("\"train\"") != std::string::npos);
  CHECK(m.find(task_table()[0].name) != std::string::npos);
  CHECK(m.find("\"seed\"") != std::string::npos);
}

TEST_CASE("parameter validation") {
  GenerationParams p;
  p.n_task = 0;
  CHECK_THROWS(p.validate());
  p = {};
  p.pronoun = "thing";
  CHECK_THROWS(p.validate());
  p = {};
  p.empty_fraction = 0.9;
  p.multi_category_fraction = 0.2;
  CHECK_THROWS(p.validate());
  CHECK(vocabulary_size() <= 64);
  CHECK(pronoun_token("abcd") == 4);
}
