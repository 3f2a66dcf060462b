// toist: generate | train | distill | eval

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "toist/checkpoint.hpp"
#include "toist/config.hpp"
#include "toist/evaluation.hpp"
#include "toist/synthdata.hpp"
#include "toist/train.hpp"

namespace fs = std::filesystem;
using namespace toist;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr const char* kRootEnv = "TOIST_OUTPUT_ROOT";

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

fs::path output_root() {
  const char* env = std::getenv(kRootEnv);
  return env && *env ? fs::path(env) : fs::path("toist_out");
}

// Options every subcommand shares. Precedence: preset, then --config, then
// --set, then the subcommand's own flags.
struct Common {
  std::string preset = "toy";
  std::string config_file;
  std::vector<std::string> sets;
  std::string out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--preset", c.preset, "toy or paper")->capture_default_str();
  app->add_option("--config", c.config_file, "key = value file applied on top of the preset");
  app->add_option("--set", c.sets, "KEY=VALUE override, repeatable");
  app->add_option("--out", c.out, std::string("output directory (default under $") + kRootEnv + ")");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = RunConfig::preset(c.preset);
  if (!c.config_file.empty()) {
    std::ifstream in(c.config_file);
    if (!in) throw ConfigError("cannot read config file " + c.config_file);
    std::stringstream ss;
    ss << in.rdbuf();
    cfg.apply_text(ss.str());
  }
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

fs::path out_dir(const Common& c, const char* sub) {
  fs::path p = c.out.empty() ? output_root() / sub : fs::path(c.out);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

fs::path default_data() { return output_root() / "data"; }

synth::Dataset load_split(const fs::path& dir, const std::string& name) {
  const fs::path p = dir / (name + ".bin");
  if (!fs::exists(p)) throw DataError("dataset split not found: " + p.string() + " (run 'toist generate' first)");
  return synth::load(p);
}

// The checkpoint and the data must agree on grid size and task count.
void check_compatible(const RunConfig& cfg, const synth::Dataset& data, const std::string& what) {
  const auto& g = data.params;
  if (g.grid_h != cfg.model.grid_h || g.grid_w != cfg.model.grid_w)
    throw DataError(what + ": model grid " + std::to_string(cfg.model.grid_h) + "x" + std::to_string(cfg.model.grid_w) +
                    " does not match dataset grid " + std::to_string(g.grid_h) + "x" + std::to_string(g.grid_w));
  if (g.n_task != cfg.generation.n_task)
    throw DataError(what + ": trained on " + std::to_string(cfg.generation.n_task) + " tasks, dataset has " +
                    std::to_string(g.n_task));
}

// Model and data settings come from the dataset the run reads.
void adopt_data(RunConfig& cfg, const synth::Dataset& data) {
  cfg.generation = data.params;
  cfg.model.grid_h = data.params.grid_h;
  cfg.model.grid_w = data.params.grid_w;
}

std::string percent(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100 * v;
  return os.str();
}

eval::Report validate_model(const RunConfig& cfg, const model::ParamSet<float>& params, const synth::Dataset& test,
                            eval::Mode mode, const distill::MemoryBank* bank = nullptr) {
  eval::Models m{&cfg.model, &params, nullptr, bank};
  return eval::evaluate(m, test, mode, false);
}

// Per-epoch log: one csv row and one console line.
class EpochLog {
 public:
  explicit EpochLog(const fs::path& path) : out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << "epoch,loss,teacher,student,cluster,binary,replaced";
    for (const char* n : train::kLossTermNames) out_ << "," << n;
    out_ << ",val_map_box,val_map_mask,seconds\n";
  }
  void add(const train::EpochStats& e, const eval::Report& r) {
    const auto& m = e.mean;
    out_ << std::setprecision(10) << e.epoch + 1 << "," << m.loss << "," << m.teacher << "," << m.student << ","
         << m.cluster << "," << m.binary << "," << m.replaced;
    for (double t : m.terms) out_ << "," << t;
    out_ << "," << r.map_box << "," << r.map_mask << "," << e.seconds << "\n";
    out_.flush();
    std::cout << "epoch " << e.epoch + 1 << " loss " << std::setprecision(5) << m.loss;
    for (std::size_t i = 0; i < m.terms.size(); ++i) std::cout << " " << train::kLossTermNames[i] << " " << m.terms[i];
    if (m.cluster != 0 || m.binary != 0) std::cout << " cluster " << m.cluster << " binary " << m.binary;
    std::cout << " | val mAP box " << percent(r.map_box) << " mask " << percent(r.map_mask) << " ("
              << std::setprecision(3) << e.seconds << " s)" << std::endl;
  }

 private:
  std::ofstream out_;
};

// Writes the batch that produced a non-finite value, then rethrows.
[[noreturn]] void dump_failure(const train::StepFailure& f, const synth::Dataset& data, const fs::path& dir) {
  nlohmann::json j;
  j["error"] = f.what();
  j["epoch"] = f.epoch + 1;
  j["step"] = f.step;
  nlohmann::json scenes = nlohmann::json::array();
  for (int id : f.scene_ids)
    for (const synth::Sample& s : data.samples)
      if (s.scene_id == id) {
        scenes.push_back({{"scene_id", id},
                          {"task", s.task_id},
                          {"objects", s.scene.objects.size()},
                          {"gt", s.gt},
                          {"noun_tokens", s.noun_description.tokens},
                          {"pronoun_tokens", s.pronoun_description.tokens}});
      }
  j["batch"] = std::move(scenes);
  write_text(dir / "failure_batch.json", j.dump(2) + "\n");
  std::cerr << "diagnostic dump written to " << (dir / "failure_batch.json").string() << "\n";
  throw;
}

int cmd_generate(const Common& common, bool force, std::optional<std::uint64_t> seed, std::optional<int> tasks,
                 std::optional<int> scenes) {
  RunConfig cfg = resolve(common);
  if (seed) cfg.generation.seed = *seed;
  if (tasks) cfg.generation.n_task = *tasks;
  if (scenes) cfg.generation.scenes_per_task = *scenes;
  cfg.model.grid_h = cfg.generation.grid_h;
  cfg.model.grid_w = cfg.generation.grid_w;
  cfg.validate();
  const fs::path dir = common.out.empty() ? default_data() : fs::path(common.out);
  for (const char* f : {"train.bin", "test.bin"})
    if (fs::exists(dir / f) && !force)
      throw DataError("output exists: " + (dir / f).string() + " (use --force to overwrite)");
  fs::create_directories(dir);
  const synth::Dataset all = synth::generate(cfg.generation);
  auto [tr, te] = synth::split(all, cfg.split_ratio, cfg.generation.seed);
  synth::save(tr, dir / "train.bin");
  synth::save(te, dir / "test.bin");
  nlohmann::json manifest = {{"train", nlohmann::json::parse(synth::manifest_json(tr, "train"))},
                             {"test", nlohmann::json::parse(synth::manifest_json(te, "test"))}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  write_text(dir / "config.txt", cfg.to_text());

  std::cout << "dataset " << dir.string() << " seed " << cfg.generation.seed << " tasks " << cfg.generation.n_task
            << " grid " << cfg.generation.grid_h << "x" << cfg.generation.grid_w << "\n";
  for (const auto* d : {&tr, &te}) {
    const char* name = d == &tr ? "train" : "test";
    int empty = 0;
    for (const auto& s : d->samples) empty += s.gt.empty();
    std::cout << name << ": " << d->samples.size() << " scenes, " << empty << " without ground truth\n";
  }
  for (int t = 0; t < cfg.generation.n_task; ++t)
    std::cout << "  task " << t << " " << synth::task_table()[static_cast<std::size_t>(t)].name << ": "
              << tr.of_task(t).size() << " train / " << te.of_task(t).size() << " test\n";
  return 0;
}

struct TrainFlags {
  std::string data;
  std::optional<std::string> form;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  bool no_self_attention = false;
};

int cmd_train(const Common& common, const TrainFlags& f) {
  RunConfig cfg = resolve(common);
  const fs::path data_dir = f.data.empty() ? default_data() : fs::path(f.data);
  const synth::Dataset tr = load_split(data_dir, "train"), te = load_split(data_dir, "test");
  adopt_data(cfg, tr);
  if (f.form) cfg.form = *f.form;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  if (f.seed) cfg.train.seed = *f.seed;
  if (f.no_self_attention) cfg.model.decoder_self_attention = false;
  cfg.validate();
  const fs::path dir = out_dir(common, "train");
  write_text(dir / "config.txt", cfg.to_text());

  const train::TextForm form = train::parse_text_form(cfg.form);
  const eval::Mode val_mode = form == train::TextForm::kNoun ? eval::Mode::kNounOracle : eval::Mode::kPronounPlain;
  train::ModelTrainer trainer(cfg.model, cfg.loss, cfg.train, form);
  std::cout << "training " << cfg.form << " model, " << trainer.params.scalar_count() << " parameters, "
            << tr.samples.size() << " scenes, " << cfg.train.epochs << " epochs"
            << (cfg.model.decoder_self_attention ? "" : ", decoder self-attention off") << std::endl;
  EpochLog log(dir / "log.csv");
  const fs::path ckpt_path = dir / "model.ckpt";
  try {
    trainer.fit(tr, [&](const train::EpochStats& e) {
      log.add(e, validate_model(cfg, trainer.params, te, val_mode));
      ckpt::Checkpoint c;
      c.config_text = cfg.to_text();
      c.models.push_back(ckpt::capture("model", trainer));
      ckpt::save(c, ckpt_path);
    });
  } catch (const train::StepFailure& e) {
    dump_failure(e, tr, dir);
  }
  std::cout << "checkpoint " << ckpt_path.string() << std::endl;
  return 0;
}

struct DistillFlags {
  std::string data, teacher, student, pronoun, policy, mode;
  std::optional<int> k, epochs;
  std::optional<std::uint64_t> seed;
  bool no_ccr = false, no_cluster = false, no_sbtl = false;
};

// Loads a warm-start model into a trainer built from `cfg`, rejecting
// checkpoints whose model configuration differs.
train::ModelTrainer warm_start(const std::string& path, const RunConfig& cfg, train::TextForm form,
                               const char* role) {
  const ckpt::Checkpoint c = ckpt::load(path);
  RunConfig saved = RunConfig::preset("toy");
  saved.apply_text(c.config_text);
  if (!(saved.model == cfg.model))
    throw ConfigError(std::string(role) + " checkpoint " + path + " has a different model configuration");
  const ckpt::ModelState& s = c.has("model") ? c.model("model") : c.model(role);
  if (s.form != form) throw ConfigError(std::string(role) + " checkpoint " + path + " reads the wrong description form");
  train::ModelTrainer t(cfg.model, cfg.loss, cfg.train, form);
  ckpt::restore(s, t);
  t.epoch = 0;
  return t;
}

int cmd_distill(const Common& common, const DistillFlags& f) {
  RunConfig cfg = resolve(common);
  const fs::path data_dir = f.data.empty() ? default_data() : fs::path(f.data);
  synth::Dataset tr = load_split(data_dir, "train"), te = load_split(data_dir, "test");
  adopt_data(cfg, tr);
  if (!f.pronoun.empty()) {
    synth::pronoun_token(f.pronoun);
    tr = synth::with_pronoun(tr, f.pronoun);
    te = synth::with_pronoun(te, f.pronoun);
    cfg.generation.pronoun = f.pronoun;
  }
  if (f.no_ccr) cfg.distill.ccr = false;
  if (f.no_cluster) cfg.distill.cluster_loss = false;
  if (f.no_sbtl) cfg.distill.sbtl = false;
  if (f.k) cfg.distill.k = *f.k;
  if (!f.policy.empty()) cfg.set("distill.policy", f.policy);
  if (!f.mode.empty()) cfg.distill_mode = f.mode;
  if (f.seed) cfg.train.seed = *f.seed;
  const bool joint = cfg.distill_mode == "joint";
  if (f.epochs) (joint ? cfg.train.epochs : cfg.distill_epochs) = *f.epochs;
  cfg.distill.joint = joint;
  cfg.form = "pronoun";
  cfg.validate();
  const fs::path dir = out_dir(common, "distill");
  write_text(dir / "config.txt", cfg.to_text());
  const int n_task = cfg.generation.n_task;

  std::optional<train::DistillTrainer> dt;
  if (f.teacher.empty() && f.student.empty() && joint) {
    dt.emplace(cfg.model, cfg.loss, cfg.train, cfg.distill, n_task);
  } else {
    train::ModelTrainer student = f.student.empty()
                                      ? train::ModelTrainer(cfg.model, cfg.loss, cfg.train, train::TextForm::kPronoun)
                                      : warm_start(f.student, cfg, train::TextForm::kPronoun, "student");
    std::optional<train::ModelTrainer> teacher;
    if (!f.teacher.empty()) {
      teacher.emplace(warm_start(f.teacher, cfg, train::TextForm::kNoun, "teacher"));
    } else {
      teacher.emplace(cfg.model, cfg.loss, cfg.train, train::TextForm::kNoun);
      if (!joint) {
        std::cout << "phase 1: teacher, " << cfg.train.epochs << " epochs" << std::endl;
        teacher->fit(tr, [&](const train::EpochStats& e) {
          const auto r = validate_model(cfg, teacher->params, te, eval::Mode::kNounOracle);
          std::cout << "teacher epoch " << e.epoch + 1 << " loss " << e.mean.loss << " | val mAP box "
                    << percent(r.map_box) << " mask " << percent(r.map_mask) << std::endl;
        });
        teacher->epoch = 0;
      }
    }
    dt.emplace(std::move(*teacher), std::move(student), cfg.distill, n_task);
  }
  const int epochs = joint ? cfg.train.epochs : cfg.distill_epochs;
  std::cout << (joint ? "joint" : "two-phase") << " distillation, " << epochs << " epochs, K " << cfg.distill.k
            << ", ccr " << cfg.distill.ccr << " cluster " << cfg.distill.cluster_loss << " sbtl " << cfg.distill.sbtl
            << ", pronoun " << cfg.generation.pronoun << std::endl;
  EpochLog log(dir / "log.csv");
  const fs::path ckpt_path = dir / "distill.ckpt";
  auto save = [&] {
    ckpt::Checkpoint c;
    c.config_text = cfg.to_text();
    c.models.push_back(ckpt::capture("teacher", dt->teacher));
    c.models.push_back(ckpt::capture("student", dt->student));
    c.bank = dt->bank;
    ckpt::save(c, ckpt_path);
  };
  try {
    for (int e = 0; e < epochs; ++e) {
      const train::EpochStats es = dt->train_epoch(tr);
      const eval::Mode m = cfg.distill.ccr ? eval::Mode::kDistilled : eval::Mode::kPronounPlain;
      log.add(es, validate_model(cfg, dt->student.params, te, m, &dt->bank));
      save();
    }
  } catch (const train::StepFailure& e) {
    dump_failure(e, tr, dir);
  }
  dt->bank.freeze();
  save();
  std::cout << "checkpoint " << ckpt_path.string() << " (teacher, student, frozen bank)" << std::endl;
  return 0;
}

struct EvalFlags {
  std::string checkpoint, data, mode = "pronoun-plain", split = "test", teacher, role;
  bool per_block = false;
};

int cmd_eval(const Common& common, const EvalFlags& f) {
  const eval::Mode mode = eval::parse_mode(f.mode);
  const ckpt::Checkpoint c = ckpt::load(f.checkpoint);
  RunConfig cfg = RunConfig::preset("toy");
  cfg.apply_text(c.config_text);
  const fs::path data_dir = f.data.empty() ? default_data() : fs::path(f.data);
  synth::Dataset data = load_split(data_dir, f.split);
  check_compatible(cfg, data, "checkpoint " + f.checkpoint);
  if (cfg.generation.pronoun != data.params.pronoun) data = synth::with_pronoun(data, cfg.generation.pronoun);

  std::string role = f.role;
  if (role.empty()) {
    if (mode == eval::Mode::kNounOracle && c.has("teacher")) role = "teacher";
    else role = c.has("student") ? "student" : "model";
  }
  const ckpt::ModelState& state = c.model(role);
  std::optional<model::ParamSet<float>> teacher;
  if (!f.teacher.empty()) {
    const ckpt::Checkpoint tc = ckpt::load(f.teacher);
    RunConfig tcfg = RunConfig::preset("toy");
    tcfg.apply_text(tc.config_text);
    if (!(tcfg.model == cfg.model)) throw ConfigError("teacher checkpoint has a different model configuration");
    teacher = (tc.has("teacher") ? tc.model("teacher") : tc.model("model")).params;
  } else if (c.has("teacher")) {
    teacher = c.model("teacher").params;
  }
  eval::Models models{&cfg.model, &state.params, teacher ? &*teacher : nullptr, c.bank ? &*c.bank : nullptr};
  const eval::Report r = eval::evaluate(models, data, mode, f.per_block);

  const fs::path dir = out_dir(common, "eval");
  write_text(dir / "config.txt", cfg.to_text());
  write_text(dir / "report.json", eval::to_json(r) + "\n");
  write_text(dir / "report.csv", eval::to_csv(r));
  write_text(dir / "pr_curves.csv", eval::pr_curves_csv(r));
  if (eval::privileged(mode))
    std::cout << "PRIVILEGED: mode " << eval::to_string(mode)
              << " reads ground-truth nouns at test time; not a deployable result\n";
  for (const std::string& w : r.warnings) std::cout << "warning: " << w << "\n";
  std::cout << "mode " << eval::to_string(mode) << " model " << role << " split " << f.split << "\n";
  for (const auto& t : r.tasks) {
    std::cout << "  task " << t.task << " " << t.name << ": box " << percent(t.ap_box) << " mask " << percent(t.ap_mask);
    if (f.per_block) {
      std::cout << " | per-block box";
      for (double v : t.block_ap_box) std::cout << " " << percent(v);
    }
    std::cout << "\n";
  }
  std::cout << "mAP box " << percent(r.map_box) << " mask " << percent(r.map_mask) << "\nreport " << dir.string()
            << std::endl;
  return 0;
}

int fail(int code, const char* kind, const std::string& msg) {
  std::string line = msg;
  for (char& ch : line)
    if (ch == '\n') ch = ' ';
  std::cerr << "toist-error[" << code << ":" << kind << "] " << line << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-oriented detection with noun-pronoun distillation on synthetic grid scenes"};
  app.require_subcommand(1);

  Common gc, tc, dc, ec;
  bool force = false;
  std::optional<std::uint64_t> gseed;
  std::optional<int> gtasks, gscenes;
  auto* gen = app.add_subcommand("generate", "generate the synthetic dataset and its train/test split");
  add_common(gen, gc);
  gen->add_flag("--force", force, "overwrite an existing dataset");
  gen->add_option("--seed", gseed, "generation seed");
  gen->add_option("--tasks", gtasks, "number of tasks");
  gen->add_option("--scenes-per-task", gscenes, "scenes per task");

  TrainFlags tf;
  auto* tr = app.add_subcommand("train", "train one model on noun or pronoun descriptions");
  add_common(tr, tc);
  tr->add_option("--data", tf.data, "dataset directory");
  tr->add_option("--form", tf.form, "noun or pronoun");
  tr->add_option("--epochs", tf.epochs);
  tr->add_option("--seed", tf.seed);
  tr->add_flag("--no-self-attention", tf.no_self_attention, "drop self-attention from the decoder");

  DistillFlags df;
  auto* di = app.add_subcommand("distill", "noun-pronoun distillation");
  add_common(di, dc);
  di->add_option("--data", df.data, "dataset directory");
  di->add_option("--teacher", df.teacher, "warm-start teacher checkpoint");
  di->add_option("--student", df.student, "warm-start student checkpoint");
  di->add_option("--mode", df.mode, "joint or two-phase");
  di->add_option("--K", df.k, "prototypes per task");
  di->add_option("--pronoun", df.pronoun, "something, it, them or abcd");
  di->add_option("--memory-policy", df.policy, "replace-closest or fifo");
  di->add_option("--epochs", df.epochs, "distillation epochs");
  di->add_option("--seed", df.seed);
  di->add_flag("--no-ccr", df.no_ccr, "disable cluster-center replacement");
  di->add_flag("--no-cluster-loss", df.no_cluster, "disable the cluster loss");
  di->add_flag("--no-sbtl", df.no_sbtl, "disable the soft binary target loss");

  EvalFlags ef;
  auto* ev = app.add_subcommand("eval", "AP@0.5 report for a checkpoint");
  add_common(ev, ec);
  ev->add_option("--checkpoint", ef.checkpoint, "checkpoint file")->required();
  ev->add_option("--data", ef.data, "dataset directory");
  ev->add_option("--split", ef.split, "train or test")->capture_default_str();
  ev->add_option("--mode", ef.mode, "pronoun-plain, noun-oracle, replace-pre, replace-post or distilled")
      ->capture_default_str();
  ev->add_option("--teacher", ef.teacher, "noun model for the replace modes");
  ev->add_option("--role", ef.role, "model inside the checkpoint: model, teacher or student");
  ev->add_flag("--per-block", ef.per_block, "AP with every decoder block's scores");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kExitConfig, "config", e.what());
  }

  try {
    if (*gen) return cmd_generate(gc, force, gseed, gtasks, gscenes);
    if (*tr) return cmd_train(tc, tf);
    if (*di) return cmd_distill(dc, df);
    return cmd_eval(ec, ef);
  } catch (const ConfigError& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const DataError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const synth::FormatError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const ckpt::FormatError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const ad::NumericError& e) {
    return fail(kExitNumeric, "numeric", e.what());
  } catch (const std::exception& e) {
    return fail(kExitData, "io", e.what());
  }
}
