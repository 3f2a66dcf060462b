#include "toist/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

#include "toist/binary_io.hpp"

namespace toist::synth {

namespace {

const std::vector<std::string> kPronouns = {"something", "it", "them", "abcd"};
const std::vector<std::string> kCategories = {"chair", "sofa", "bed",    "table", "cup",  "bowl",
                                              "vase",  "bottle", "knife", "spoon", "book", "box"};

// softness, height, hardness, size
const std::array<std::array<double, 4>, kCategoryCount> kCategoryAttributes = {{
    {0.3, 0.5, 0.7, 0.5},
    {0.8, 0.4, 0.3, 0.8},
    {0.9, 0.3, 0.2, 0.9},
    {0.1, 0.6, 0.9, 0.8},
    {0.1, 0.2, 0.8, 0.2},
    {0.1, 0.15, 0.8, 0.3},
    {0.1, 0.5, 0.8, 0.3},
    {0.1, 0.45, 0.7, 0.2},
    {0.05, 0.05, 0.95, 0.1},
    {0.05, 0.05, 0.9, 0.1},
    {0.3, 0.1, 0.5, 0.2},
    {0.4, 0.3, 0.5, 0.4},
}};

std::vector<std::string> verb_words() {
  std::vector<std::string> words;
  for (const char* w : {"step", "on", "sit", "comfortably", "place", "flowers", "get", "potatoes", "water",
                        "plant", "lemon", "dig", "hole", "open", "beer", "parcel", "serve", "wine", "pour",
                        "sugar", "smear", "butter", "extinguish", "fire", "pound", "carpet"})
    words.emplace_back(w);
  return words;
}

int verb(const std::string& word) {
  static const std::vector<std::string> words = verb_words();
  auto it = std::find(words.begin(), words.end(), word);
  return kFirstVerb + static_cast<int>(it - words.begin());
}

std::vector<TaskSpec> build_tasks() {
  struct Row {
    const char* name;
    std::vector<const char*> words;
    std::vector<int> cats;
    std::array<double, 4> prefer;
  };
  // chair 0 sofa 1 bed 2 table 3 cup 4 bowl 5 vase 6 bottle 7 knife 8 spoon 9 book 10 box 11
  const std::vector<Row> rows = {
      {"step on", {"step", "on"}, {0, 3, 11, 10}, {0, 0, 1, 0.5}},
      {"sit comfortably", {"sit", "comfortably"}, {0, 1, 2, 11}, {1, 0, 0, 0}},
      {"place flowers", {"place", "flowers"}, {6, 4, 5, 7}, {0, 1, 0, 0}},
      {"get potatoes out of fire", {"get", "potatoes"}, {9, 8, 5}, {0, 0, 0, 1}},
      {"water plant", {"water", "plant"}, {4, 7, 5, 6}, {0, 0, 0, 1}},
      {"get lemon out of tea", {"get", "lemon"}, {9, 8, 4}, {0, 0, 0, -1}},
      {"dig hole", {"dig", "hole"}, {9, 8, 5, 4}, {0, 0, 1, 0}},
      {"open bottle of beer", {"open", "beer"}, {8, 9, 3, 10}, {0, 0, 1, -1}},
      {"open parcel", {"open", "parcel"}, {8, 9, 10}, {0, 0, 1, 0}},
      {"serve wine", {"serve", "wine"}, {4, 5, 6, 7}, {0, -1, 0, 0}},
      {"pour sugar", {"pour", "sugar"}, {4, 5, 9, 7}, {0, 0, 0, 1}},
      {"smear butter", {"smear", "butter"}, {8, 9, 10}, {-1, 0, 0, 0}},
      {"extinguish fire", {"extinguish", "fire"}, {7, 4, 5, 6, 11}, {0, 0, 0, 1}},
      {"pound carpet", {"pound", "carpet"}, {10, 11, 7, 9}, {0, 0, 1, 1}},
  };
  std::vector<TaskSpec> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    TaskSpec t;
    t.id = static_cast<int>(i);
    t.name = rows[i].name;
    for (const char* w : rows[i].words) t.verb_tokens.push_back(verb(w));
    t.afforded_categories = rows[i].cats;
    t.prefer_weights = rows[i].prefer;
    out.push_back(std::move(t));
  }
  return out;
}

std::mt19937_64 scene_rng(std::uint64_t seed, int task, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(task), static_cast<std::uint32_t>(index), 0x5eedu};
  return std::mt19937_64(seq);
}

std::array<double, 4> sample_attributes(int category, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-0.25, 0.25);
  std::array<double, 4> a = kCategoryAttributes[static_cast<std::size_t>(category)];
  for (double& v : a) v = std::clamp(v + jitter(rng), 0.0, 1.0);
  return a;
}

struct Rect {
  int r0, c0, h, w;
  bool overlaps(const Rect& o) const {
    // One free cell between objects.
    return !(r0 + h + 1 <= o.r0 || o.r0 + o.h + 1 <= r0 || c0 + w + 1 <= o.c0 || o.c0 + o.w + 1 <= c0);
  }
};

}  // namespace

const std::vector<std::string>& pronoun_names() { return kPronouns; }
const std::vector<std::string>& category_names() { return kCategories; }

int pronoun_token(const std::string& pronoun) {
  auto it = std::find(kPronouns.begin(), kPronouns.end(), pronoun);
  if (it == kPronouns.end()) throw std::invalid_argument("unknown pronoun '" + pronoun + "'");
  return kFirstPronoun + static_cast<int>(it - kPronouns.begin());
}

int noun_token(int category) {
  if (category < 0 || category >= kCategoryCount)
    throw std::out_of_range("category " + std::to_string(category) + " out of range");
  return kFirstNoun + category;
}

std::string token_name(int token) {
  static const std::vector<std::string> words = verb_words();
  if (token == kTokenEmpty) return "<empty>";
  if (token >= kFirstPronoun && token < kFirstNoun) return kPronouns[static_cast<std::size_t>(token - kFirstPronoun)];
  if (token >= kFirstNoun && token < kFirstVerb) return kCategories[static_cast<std::size_t>(token - kFirstNoun)];
  if (token >= kFirstVerb && token < vocabulary_size()) return words[static_cast<std::size_t>(token - kFirstVerb)];
  return "<" + std::to_string(token) + ">";
}

int vocabulary_size() {
  static const int n = kFirstVerb + static_cast<int>(verb_words().size());
  return n;
}

bool TaskSpec::affords(int category, const std::array<double, kAttributeCount>&) const {
  return std::find(afforded_categories.begin(), afforded_categories.end(), category) != afforded_categories.end();
}

double TaskSpec::prefer(const std::array<double, kAttributeCount>& a) const {
  double s = 0;
  for (int i = 0; i < kAttributeCount; ++i) s += prefer_weights[static_cast<std::size_t>(i)] * a[static_cast<std::size_t>(i)];
  return s;
}

const std::vector<TaskSpec>& task_table() {
  static const std::vector<TaskSpec> tasks = build_tasks();
  return tasks;
}

std::vector<int> Sample::gt_categories() const {
  std::set<int> cats;
  for (int i : gt) cats.insert(scene.objects.at(static_cast<std::size_t>(i)).category);
  return {cats.begin(), cats.end()};
}

void GenerationParams::validate() const {
  if (n_task < 1 || n_task > kMaxTasks)
    throw std::invalid_argument("n_task must lie in [1, " + std::to_string(kMaxTasks) + "], got " +
                                std::to_string(n_task));
  if (scenes_per_task < 1) throw std::invalid_argument("scenes_per_task must be positive");
  if (grid_h < 8 || grid_w < 8) throw std::invalid_argument("grid must be at least 8x8");
  if (max_objects < 2 || max_objects > 8) throw std::invalid_argument("max_objects must lie in [2, 8]");
  if (empty_fraction < 0 || multi_category_fraction < 0 || empty_fraction + multi_category_fraction > 1)
    throw std::invalid_argument("scene-type fractions must be non-negative and sum to at most 1");
  pronoun_token(pronoun);
}

std::vector<const Sample*> Dataset::of_task(int task) const {
  std::vector<const Sample*> out;
  for (const Sample& s : samples)
    if (s.task_id == task) out.push_back(&s);
  return out;
}

std::vector<int> derive_ground_truth(const TaskSpec& task, const std::vector<ObjectSpec>& objects) {
  double best = -std::numeric_limits<double>::infinity();
  for (const ObjectSpec& o : objects)
    if (task.affords(o.category, o.attributes)) best = std::max(best, task.prefer(o.attributes));
  std::vector<int> gt;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const ObjectSpec& o = objects[i];
    if (task.affords(o.category, o.attributes) && task.prefer(o.attributes) >= best - kTieTolerance)
      gt.push_back(static_cast<int>(i));
  }
  return gt;
}

TaskDescription pronoun_description(const TaskSpec& task, int pronoun) {
  TaskDescription d;
  d.tokens = task.verb_tokens;
  d.tokens.push_back(pronoun);
  d.form = DescriptionForm::kVerbPronoun;
  d.special_positions = {d.length() - 1};
  d.task_id = task.id;
  return d;
}

TaskDescription noun_description(const TaskSpec& task, const std::vector<int>& categories) {
  TaskDescription d;
  d.task_id = task.id;
  if (categories.empty()) {
    d.tokens = {kTokenEmpty};
    d.form = DescriptionForm::kEmpty;
    return d;
  }
  d.form = DescriptionForm::kVerbNoun;
  for (int c : categories) {
    d.tokens.insert(d.tokens.end(), task.verb_tokens.begin(), task.verb_tokens.end());
    d.special_positions.push_back(d.length());
    d.tokens.push_back(noun_token(c));
  }
  return d;
}

Sample generate_scene(const GenerationParams& params, int task_id, int index) {
  const TaskSpec& task = task_table().at(static_cast<std::size_t>(task_id));
  std::mt19937_64 rng = scene_rng(params.seed, task_id, index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<int> affording = task.afforded_categories, other;
  for (int c = 0; c < kCategoryCount; ++c)
    if (!task.affords(c, {})) other.push_back(c);
  auto pick = [&](const std::vector<int>& from) {
    return from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
  };

  const double u = unit(rng);
  enum { kEmptyScene, kMulti, kSingle } kind =
      u < params.empty_fraction ? kEmptyScene
                                : (u < params.empty_fraction + params.multi_category_fraction ? kMulti : kSingle);

  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw std::runtime_error("scene generation did not converge");
    const int n_obj = std::uniform_int_distribution<int>(2, params.max_objects)(rng);
    std::vector<int> cats;
    if (kind == kEmptyScene) {
      for (int i = 0; i < n_obj; ++i) cats.push_back(pick(other));
    } else {
      cats.push_back(pick(affording));
      if (kind == kMulti) {
        int second = pick(affording);
        while (second == cats[0]) second = pick(affording);
        cats.push_back(second);
      }
      while (static_cast<int>(cats.size()) < n_obj) cats.push_back(unit(rng) < 0.5 ? pick(affording) : pick(other));
      std::shuffle(cats.begin(), cats.end(), rng);
    }

    Scene scene;
    scene.height = params.grid_h;
    scene.width = params.grid_w;
    std::vector<Rect> placed;
    for (int c : cats) {
      ObjectSpec o;
      o.category = c;
      o.attributes = sample_attributes(c, rng);
      const int w = 2 + static_cast<int>(std::lround(4 * o.attributes[3]));
      const int h = 2 + static_cast<int>(std::lround(2 * o.attributes[3] + 2 * o.attributes[1]));
      bool ok = false;
      Rect r{};
      for (int tries = 0; tries < 100 && !ok; ++tries) {
        r = {std::uniform_int_distribution<int>(0, params.grid_h - h)(rng),
             std::uniform_int_distribution<int>(0, params.grid_w - w)(rng), h, w};
        ok = std::none_of(placed.begin(), placed.end(), [&](const Rect& p) { return p.overlaps(r); });
      }
      if (!ok) continue;
      placed.push_back(r);
      o.box = {(r.c0 + 0.5 * r.w) / params.grid_w, (r.r0 + 0.5 * r.h) / params.grid_h,
               static_cast<double>(r.h) / params.grid_h, static_cast<double>(r.w) / params.grid_w};
      o.mask = geom::Mask(params.grid_h, params.grid_w);
      const bool ellipse = unit(rng) < 0.5;
      for (int y = r.r0; y < r.r0 + r.h; ++y)
        for (int x = r.c0; x < r.c0 + r.w; ++x) {
          const double dy = (y + 0.5 - (r.r0 + 0.5 * r.h)) / (0.5 * r.h);
          const double dx = (x + 0.5 - (r.c0 + 0.5 * r.w)) / (0.5 * r.w);
          if (!ellipse || dx * dx + dy * dy <= 1.0) o.mask.at(y, x) = 1;
        }
      scene.objects.push_back(std::move(o));
    }

    std::vector<int> gt = derive_ground_truth(task, scene.objects);
    if (kind == kMulti) {
      if (gt.empty()) continue;
      // Tie a second affording category to the best object.
      const int best = gt.front();
      const int best_cat = scene.objects[static_cast<std::size_t>(best)].category;
      int partner = -1;
      for (std::size_t i = 0; i < scene.objects.size(); ++i)
        if (task.affords(scene.objects[i].category, {}) && scene.objects[i].category != best_cat) {
          partner = static_cast<int>(i);
          break;
        }
      if (partner < 0) continue;
      scene.objects[static_cast<std::size_t>(partner)].attributes =
          scene.objects[static_cast<std::size_t>(best)].attributes;
      gt = derive_ground_truth(task, scene.objects);
    }

    Sample s;
    s.task_id = task_id;
    s.scene_id = task_id * params.scenes_per_task + index;
    s.gt = gt;
    s.scene = std::move(scene);
    const std::vector<int> gt_cats = s.gt_categories();
    if (kind == kEmptyScene && !gt.empty()) continue;
    if (kind == kSingle && (gt.empty() || gt_cats.size() != 1)) continue;
    if (kind == kMulti && gt_cats.size() < 2) continue;

    std::normal_distribution<double> noise(0.0, kFeatureNoise);
    const int cells = params.grid_h * params.grid_w;
    s.scene.features = FeatureGrid::Zero(cells, kFeatureDim);
    std::normal_distribution<double> observation(0.0, kAttributeObservationNoise);
    for (const ObjectSpec& o : s.scene.objects) {
      std::array<double, kAttributeCount> seen{};
      for (int a = 0; a < kAttributeCount; ++a)
        seen[static_cast<std::size_t>(a)] = o.attributes[static_cast<std::size_t>(a)] + observation(rng);
      for (int cell = 0; cell < cells; ++cell) {
        if (!o.mask.cells[static_cast<std::size_t>(cell)]) continue;
        s.scene.features(cell, o.category) = 1.0f;
        for (int a = 0; a < kAttributeCount; ++a)
          s.scene.features(cell, kCategoryCount + a) = static_cast<float>(seen[static_cast<std::size_t>(a)]);
        s.scene.features(cell, kFeatureDim - 1) = 1.0f;
      }
    }
    for (Eigen::Index i = 0; i < s.scene.features.size(); ++i)
      s.scene.features.data()[i] += static_cast<float>(noise(rng));

    s.noun_description = noun_description(task, gt_cats);
    s.pronoun_description = pronoun_description(task, pronoun_token(params.pronoun));
    return s;
  }
}

Dataset generate(const GenerationParams& params) {
  params.validate();
  Dataset data;
  data.params = params;
  for (int t = 0; t < params.n_task; ++t)
    for (int i = 0; i < params.scenes_per_task; ++i) data.samples.push_back(generate_scene(params, t, i));
  return data;
}

Dataset with_pronoun(const Dataset& data, const std::string& pronoun) {
  Dataset out = data;
  out.params.pronoun = pronoun;
  const int token = pronoun_token(pronoun);
  for (Sample& s : out.samples) s.pronoun_description.tokens.back() = token;
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& data, double ratio, std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw std::invalid_argument("split ratio must lie in (0, 1)");
  std::pair<Dataset, Dataset> out;
  out.first.params = out.second.params = data.params;
  std::vector<char> to_train(data.samples.size(), 0);
  for (int t = 0; t < data.params.n_task; ++t) {
    std::array<std::vector<std::size_t>, 2> strata;  // empty, non-empty
    for (std::size_t i = 0; i < data.samples.size(); ++i)
      if (data.samples[i].task_id == t) strata[data.samples[i].gt.empty() ? 0 : 1].push_back(i);
    const std::size_t total = strata[0].size() + strata[1].size();
    const auto want = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
    // Largest-remainder allocation keeps the per-task count exact.
    std::array<std::size_t, 2> take{};
    std::array<double, 2> rem{};
    for (int k = 0; k < 2; ++k) {
      const double exact = ratio * static_cast<double>(strata[static_cast<std::size_t>(k)].size());
      take[static_cast<std::size_t>(k)] = static_cast<std::size_t>(std::floor(exact));
      rem[static_cast<std::size_t>(k)] = exact - std::floor(exact);
    }
    while (take[0] + take[1] < want) {
      const std::size_t k = rem[0] >= rem[1] ? 0 : 1;
      ++take[k];
      rem[k] = -1;
    }
    for (int k = 0; k < 2; ++k) {
      auto& idx = strata[static_cast<std::size_t>(k)];
      std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(t) * 2 + static_cast<std::uint64_t>(k));
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t j = 0; j < take[static_cast<std::size_t>(k)]; ++j) to_train[idx[j]] = 1;
    }
  }
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    (to_train[i] ? out.first : out.second).samples.push_back(data.samples[i]);
  return out;
}

// ---- binary format ----

namespace {

constexpr char kMagic[8] = {'T', 'O', 'I', 'S', 'T', 'D', 'S', '\0'};

using Reader = io::Reader<FormatError>;

void put_description(io::Writer& w, const TaskDescription& d) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(d.form));
  w.put<std::int32_t>(d.task_id);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.tokens.size()));
  for (int t : d.tokens) w.put<std::int32_t>(t);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.special_positions.size()));
  for (int p : d.special_positions) w.put<std::int32_t>(p);
}

TaskDescription get_description(Reader& r) {
  TaskDescription d;
  const std::size_t at = r.pos();
  const auto form = r.get<std::uint8_t>("description form");
  if (form > 2) r.fail(at, "bad description form " + std::to_string(form));
  d.form = static_cast<DescriptionForm>(form);
  d.task_id = r.get<std::int32_t>("description task");
  const std::uint32_t n = r.count("token count", 4096);
  for (std::uint32_t i = 0; i < n; ++i) d.tokens.push_back(r.get<std::int32_t>("token"));
  const std::uint32_t k = r.count("special position count", 4096);
  for (std::uint32_t i = 0; i < k; ++i) d.special_positions.push_back(r.get<std::int32_t>("special position"));
  return d;
}

}  // namespace

std::vector<std::uint8_t> serialize(const Dataset& data) {
  io::Writer w;
  w.raw(kMagic, 8);
  w.put<std::uint32_t>(kDatasetVersion);
  const GenerationParams& p = data.params;
  w.put<std::uint64_t>(p.seed);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.n_task));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.scenes_per_task));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.grid_h));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.grid_w));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.max_objects));
  w.str(p.pronoun);
  w.put<double>(p.empty_fraction);
  w.put<double>(p.multi_category_fraction);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.n_task));
  for (int t = 0; t < p.n_task; ++t) {
    const TaskSpec& spec = task_table()[static_cast<std::size_t>(t)];
    w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.id));
    w.str(spec.name);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(data.samples.size()));
  for (const Sample& s : data.samples) {
    w.put<std::int32_t>(s.scene_id);
    w.put<std::int32_t>(s.task_id);
    const Scene& sc = s.scene;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sc.height));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sc.width));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sc.features.cols()));
    for (Eigen::Index i = 0; i < sc.features.size(); ++i) w.put<float>(sc.features.data()[i]);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sc.objects.size()));
    for (const ObjectSpec& o : sc.objects) {
      w.put<std::int32_t>(o.category);
      for (double a : o.attributes) w.put<double>(a);
      for (double v : {o.box.cx, o.box.cy, o.box.h, o.box.w}) w.put<double>(v);
      w.raw(o.mask.cells.data(), o.mask.cells.size());
    }
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.gt.size()));
    for (int g : s.gt) w.put<std::int32_t>(g);
    put_description(w, s.noun_description);
    put_description(w, s.pronoun_description);
  }
  return std::move(w.bytes);
}

Dataset deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "dataset");
  r.need(8, "magic");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) r.fail(0, "bad magic, not a dataset file");
  r.seek(8);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDatasetVersion)
    throw FormatError("dataset: unsupported version " + std::to_string(version) + " (this build reads version " +
                      std::to_string(kDatasetVersion) + ")");
  Dataset data;
  GenerationParams& p = data.params;
  p.seed = r.get<std::uint64_t>("seed");
  p.n_task = static_cast<int>(r.count("n_task", kMaxTasks));
  p.scenes_per_task = static_cast<int>(r.get<std::uint32_t>("scenes_per_task"));
  p.grid_h = static_cast<int>(r.count("grid height", 1024));
  p.grid_w = static_cast<int>(r.count("grid width", 1024));
  p.max_objects = static_cast<int>(r.get<std::uint32_t>("max_objects"));
  p.pronoun = r.str("pronoun");
  p.empty_fraction = r.get<double>("empty fraction");
  p.multi_category_fraction = r.get<double>("multi-category fraction");
  const std::uint32_t n_tasks = r.count("task table size", kMaxTasks);
  for (std::uint32_t t = 0; t < n_tasks; ++t) {
    const std::size_t at = r.pos();
    const auto id = r.get<std::uint32_t>("task id");
    const std::string name = r.str("task name");
    if (id >= task_table().size() || task_table()[id].name != name)
      r.fail(at, "task table entry '" + name + "' does not match this build");
  }
  const std::uint32_t n = r.get<std::uint32_t>("sample count");
  for (std::uint32_t i = 0; i < n; ++i) {
    Sample s;
    s.scene_id = r.get<std::int32_t>("scene id");
    s.task_id = r.get<std::int32_t>("task id");
    Scene& sc = s.scene;
    sc.height = static_cast<int>(r.count("height", 1024));
    sc.width = static_cast<int>(r.count("width", 1024));
    const std::uint32_t f = r.count("feature dim", 4096);
    r.need(static_cast<std::size_t>(sc.cells()) * f * sizeof(float), "features");
    sc.features.resize(sc.cells(), f);
    for (Eigen::Index k = 0; k < sc.features.size(); ++k) sc.features.data()[k] = r.get<float>("feature");
    const std::uint32_t n_obj = r.count("object count", 1024);
    for (std::uint32_t k = 0; k < n_obj; ++k) {
      ObjectSpec o;
      o.category = r.get<std::int32_t>("category");
      for (double& a : o.attributes) a = r.get<double>("attribute");
      o.box.cx = r.get<double>("box");
      o.box.cy = r.get<double>("box");
      o.box.h = r.get<double>("box");
      o.box.w = r.get<double>("box");
      o.mask = geom::Mask(sc.height, sc.width);
      for (auto& c : o.mask.cells) c = r.get<std::uint8_t>("mask");
      sc.objects.push_back(std::move(o));
    }
    const std::uint32_t n_gt = r.count("ground-truth count", n_obj);
    for (std::uint32_t k = 0; k < n_gt; ++k) {
      const std::size_t at = r.pos();
      const int g = r.get<std::int32_t>("ground-truth index");
      if (g < 0 || g >= static_cast<int>(n_obj)) r.fail(at, "ground-truth index " + std::to_string(g) + " out of range");
      s.gt.push_back(g);
    }
    s.noun_description = get_description(r);
    s.pronoun_description = get_description(r);
    data.samples.push_back(std::move(s));
  }
  if (!r.done()) r.fail(r.pos(), "trailing bytes after the last sample");
  return data;
}

void save(const Dataset& data, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::string manifest_json(const Dataset& data, const std::string& split_name) {
  nlohmann::json j;
  const GenerationParams& p = data.params;
  j["split"] = split_name;
  j["format_version"] = kDatasetVersion;
  j["generation"] = {{"seed", p.seed},
                     {"n_task", p.n_task},
                     {"scenes_per_task", p.scenes_per_task},
                     {"grid_h", p.grid_h},
                     {"grid_w", p.grid_w},
                     {"max_objects", p.max_objects},
                     {"pronoun", p.pronoun},
                     {"empty_fraction", p.empty_fraction},
                     {"multi_category_fraction", p.multi_category_fraction}};
  j["feature_dim"] = kFeatureDim;
  j["vocabulary_size"] = vocabulary_size();
  nlohmann::json tasks = nlohmann::json::array();
  for (int t = 0; t < p.n_task; ++t) {
    int count = 0, empty = 0, multi = 0;
    for (const Sample& s : data.samples) {
      if (s.task_id != t) continue;
      ++count;
      if (s.gt.empty()) ++empty;
      if (s.gt_categories().size() > 1) ++multi;
    }
    tasks.push_back({{"id", t},
                     {"name", task_table()[static_cast<std::size_t>(t)].name},
                     {"scenes", count},
                     {"empty", empty},
                     {"multi_category", multi}});
  }
  j["tasks"] = tasks;
  j["samples"] = data.samples.size();
  return j.dump(2);
}

}  // namespace toist::synth
