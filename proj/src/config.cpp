#include "toist/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace toist {

namespace {

struct Entry {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) bad(key, value, std::is_integral_v<T> ? "an integer" : "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  bad(key, value, "a boolean");
}

template <typename M>
Entry int_entry(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_number<int>(key, v); }};
}

template <typename M>
Entry double_entry(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return fmt(member(const_cast<RunConfig&>(c))); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(key, v); }};
}

template <typename M>
Entry bool_entry(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

template <typename M>
Entry string_entry(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); },
          [member](RunConfig& c, const std::string& v) { member(c) = v; }};
}

#define FIELD(expr) [](RunConfig & c) -> auto& { return c.expr; }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      int_entry("model.d", FIELD(model.d)),
      int_entry("model.n_tr", FIELD(model.n_tr)),
      int_entry("model.n_heads", FIELD(model.n_heads)),
      int_entry("model.n_pred", FIELD(model.n_pred)),
      int_entry("model.n_max", FIELD(model.n_max)),
      int_entry("model.grid_h", FIELD(model.grid_h)),
      int_entry("model.grid_w", FIELD(model.grid_w)),
      int_entry("model.vocab", FIELD(model.vocab)),
      int_entry("model.feature_dim", FIELD(model.feature_dim)),
      int_entry("model.ffn_dim", FIELD(model.ffn_dim)),
      int_entry("model.align_dim", FIELD(model.align_dim)),
      bool_entry("model.self_attention", FIELD(model.decoder_self_attention)),
      double_entry("loss.l1", FIELD(loss.l1)),
      double_entry("loss.giou", FIELD(loss.giou)),
      double_entry("loss.dice", FIELD(loss.dice)),
      double_entry("loss.focal", FIELD(loss.focal)),
      double_entry("loss.token", FIELD(loss.token)),
      double_entry("loss.align", FIELD(loss.align)),
      double_entry("loss.focal_alpha", FIELD(loss.focal_alpha)),
      double_entry("loss.focal_gamma", FIELD(loss.focal_gamma)),
      double_entry("loss.tau", FIELD(loss.tau)),
      int_entry("train.epochs", FIELD(train.epochs)),
      int_entry("train.batch_size", FIELD(train.batch_size)),
      int_entry("train.lr_drop", FIELD(train.lr_drop)),
      bool_entry("train.aux_loss", FIELD(train.aux_loss)),
      {"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("train.seed", v); }},
      string_entry("train.form", FIELD(form)),
      double_entry("optim.lr", FIELD(train.optim.lr)),
      double_entry("optim.beta1", FIELD(train.optim.beta1)),
      double_entry("optim.beta2", FIELD(train.optim.beta2)),
      double_entry("optim.eps", FIELD(train.optim.eps)),
      double_entry("optim.weight_decay", FIELD(train.optim.weight_decay)),
      double_entry("optim.clip_norm", FIELD(train.optim.clip_norm)),
      bool_entry("distill.ccr", FIELD(distill.ccr)),
      bool_entry("distill.cluster_loss", FIELD(distill.cluster_loss)),
      bool_entry("distill.sbtl", FIELD(distill.sbtl)),
      double_entry("distill.lambda_cluster", FIELD(distill.lambda_cluster)),
      double_entry("distill.lambda_binary", FIELD(distill.lambda_binary)),
      int_entry("distill.k", FIELD(distill.k)),
      int_entry("distill.memory", FIELD(distill.memory)),
      {"distill.policy", [](const RunConfig& c) { return std::string(distill::to_string(c.distill.policy)); },
       [](RunConfig& c, const std::string& v) {
         try {
           c.distill.policy = distill::parse_update_policy(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      double_entry("distill.ts_l1", FIELD(distill.ts.l1)),
      double_entry("distill.ts_giou", FIELD(distill.ts.giou)),
      double_entry("distill.ts_kl", FIELD(distill.ts.kl)),
      string_entry("distill.mode", FIELD(distill_mode)),
      int_entry("distill.epochs", FIELD(distill_epochs)),
      {"data.seed", [](const RunConfig& c) { return std::to_string(c.generation.seed); },
       [](RunConfig& c, const std::string& v) { c.generation.seed = parse_number<std::uint64_t>("data.seed", v); }},
      int_entry("data.tasks", FIELD(generation.n_task)),
      int_entry("data.scenes_per_task", FIELD(generation.scenes_per_task)),
      int_entry("data.grid_h", FIELD(generation.grid_h)),
      int_entry("data.grid_w", FIELD(generation.grid_w)),
      int_entry("data.max_objects", FIELD(generation.max_objects)),
      string_entry("data.pronoun", FIELD(generation.pronoun)),
      double_entry("data.empty_fraction", FIELD(generation.empty_fraction)),
      double_entry("data.multi_category_fraction", FIELD(generation.multi_category_fraction)),
      double_entry("data.split_ratio", FIELD(split_ratio)),
  };
  return table;
}

#undef FIELD

const Entry& find(const std::string& key) {
  for (const Entry& e : entries())
    if (e.key == key) return e;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig c;
  c.model.vocab = 64;
  c.model.feature_dim = synth::kFeatureDim;
  if (name == "toy") {
    c.train.epochs = 14;
    c.train.lr_drop = 10;
    c.distill.lambda_cluster = 1;
    c.distill.lambda_binary = 5;
    return c;
  }
  if (name == "paper") {
    c.model = model::ModelConfig::paper();
    c.model.vocab = 64;
    c.model.feature_dim = synth::kFeatureDim;
    c.train.epochs = 30;
    c.train.optim.lr = 5e-5;
    c.distill_epochs = 15;
    c.generation.n_task = synth::kMaxTasks;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected toy or paper)");
}

void RunConfig::set(const std::string& key, const std::string& value) { find(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return find(key).get(*this); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const Entry& e : entries()) out.push_back(e.key);
  return out;
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const Entry& e : entries()) os << e.key << " = " << e.get(*this) << "\n";
  return os.str();
}

void RunConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::validate() const {
  try {
    model.validate();
    loss.validate();
    train.validate();
    distill.validate();
    generation.validate();
    train::parse_text_form(form);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(split_ratio > 0 && split_ratio < 1)) throw ConfigError("data.split_ratio must lie in (0, 1)");
  if (distill_mode != "joint" && distill_mode != "two-phase")
    throw ConfigError("distill.mode must be joint or two-phase, got '" + distill_mode + "'");
  if (distill_epochs < 0) throw ConfigError("distill.epochs must be >= 0");
  if (model.feature_dim != synth::kFeatureDim)
    throw ConfigError("model.feature_dim must equal the generator's feature width " +
                      std::to_string(synth::kFeatureDim));
  if (model.vocab < synth::vocabulary_size())
    throw ConfigError("model.vocab must be at least " + std::to_string(synth::vocabulary_size()));
  if (model.grid_h != generation.grid_h || model.grid_w != generation.grid_w)
    throw ConfigError("model grid and data grid differ");
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = RunConfig::preset("toy");
  c.apply_text(ss.str());
  return c;
}

}  // namespace toist
