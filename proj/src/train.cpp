#include "toist/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace toist::train {

void AdamWConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("betas must lie in [0, 1)");
  if (!(eps > 0)) throw std::invalid_argument("adam epsilon must be positive");
  if (weight_decay < 0 || clip_norm < 0) throw std::invalid_argument("weight decay and clip norm must be >= 0");
}

template <typename S>
void AdamW<S>::step(model::ParamSet<S>& params) {
  auto& ps = params.all();
  if (m_.empty()) {
    for (const auto& p : ps) {
      m_.push_back(ad::Mat<S>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(ad::Mat<S>::Zero(p.value.rows(), p.value.cols()));
    }
  }
  if (m_.size() != ps.size()) throw std::logic_error("optimizer state does not match the parameter set");
  S clip = S(1);
  if (config_.clip_norm > 0) {
    double sq = 0;
    for (const auto& p : ps) sq += static_cast<double>(p.grad.squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) clip = S(config_.clip_norm / norm);
  }
  ++t_;
  const S lr = S(config_.lr), b1 = S(config_.beta1), b2 = S(config_.beta2), eps = S(config_.eps);
  const S c1 = S(1) - S(std::pow(config_.beta1, static_cast<double>(t_)));
  const S c2 = S(1) - S(std::pow(config_.beta2, static_cast<double>(t_)));
  const S decay = S(1) - lr * S(config_.weight_decay);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ad::Mat<S>& w = ps[i].value.data;
    const ad::Mat<S> g = ps[i].grad * clip;
    m_[i] = b1 * m_[i] + (S(1) - b1) * g;
    v_[i] = b2 * v_[i] + (S(1) - b2) * g.cwiseProduct(g);
    w *= decay;
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
  }
}

template class AdamW<float>;
template class AdamW<double>;

const char* to_string(TextForm f) { return f == TextForm::kNoun ? "noun" : "pronoun"; }

TextForm parse_text_form(const std::string& s) {
  if (s == "noun") return TextForm::kNoun;
  if (s == "pronoun") return TextForm::kPronoun;
  throw std::invalid_argument("unknown description form '" + s + "' (expected noun or pronoun)");
}

const TaskDescription& description_of(const synth::Sample& s, TextForm form) {
  return form == TextForm::kNoun ? s.noun_description : s.pronoun_description;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (lr_drop < 0) throw std::invalid_argument("lr_drop must be >= 0");
  optim.validate();
}

void DistillConfig::validate() const {
  if (lambda_cluster < 0 || lambda_binary < 0) throw std::invalid_argument("distillation weights must be >= 0");
  if (k < 1 || memory < k) throw std::invalid_argument("need 1 <= K <= memory size");
  if (ts.l1 < 0 || ts.giou < 0 || ts.kl < 0) throw std::invalid_argument("matching weights must be >= 0");
}

void check_finite(const model::ParamSet<float>& params, const std::string& what) {
  for (const auto& p : params.all()) {
    if (!p.value.data.allFinite()) throw ad::NumericError(what + ": parameter " + p.name + " is not finite");
    if (!p.grad.allFinite()) throw ad::NumericError(what + ": gradient of " + p.name + " is not finite");
  }
}

namespace {

std::vector<std::vector<const synth::Sample*>> batches(const synth::Dataset& data, const std::vector<std::size_t>& order,
                                                       int batch_size) {
  std::vector<std::vector<const synth::Sample*>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<const synth::Sample*> b;
    for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(batch_size)); ++j)
      b.push_back(&data.samples[order[j]]);
    out.push_back(std::move(b));
  }
  return out;
}

void accumulate(StepStats& into, const StepStats& s) {
  into.loss += s.loss;
  into.teacher += s.teacher;
  into.student += s.student;
  into.cluster += s.cluster;
  into.binary += s.binary;
  into.replaced += s.replaced;
  for (std::size_t i = 0; i < s.terms.size(); ++i) into.terms[i] += s.terms[i];
}

void add_terms(StepStats& st, const loss::LossTerms<float>& t, double w) {
  const ad::Var<float> v[] = {t.l1, t.giou, t.dice, t.focal, t.token, t.align};
  for (std::size_t i = 0; i < st.terms.size(); ++i) st.terms[i] += w * v[i].item();
}

void finalize(StepStats& s, int steps) {
  if (steps == 0) return;
  s.loss /= steps;
  s.teacher /= steps;
  s.student /= steps;
  s.cluster /= steps;
  s.binary /= steps;
  for (double& t : s.terms) t /= steps;
}

loss::GroundTruthSet ground_truth(const synth::Sample& s, const TaskDescription& desc) {
  return loss::GroundTruthSet::from_scene(s.scene, s.gt, desc);
}

template <typename Step>
EpochStats run_epoch(const synth::Dataset& data, ModelTrainer& order_source, int batch_size, int epoch_index,
                     Step&& step) {
  const auto t0 = std::chrono::steady_clock::now();
  EpochStats es;
  es.epoch = epoch_index;
  for (const auto& b : batches(data, order_source.epoch_order(data.samples.size()), batch_size)) {
    try {
      accumulate(es.mean, step(b));
    } catch (const ad::NumericError& e) {
      std::vector<int> ids;
      for (const synth::Sample* s : b) ids.push_back(s->scene_id);
      throw StepFailure(e.what(), epoch_index, es.steps, std::move(ids));
    }
    ++es.steps;
  }
  finalize(es.mean, es.steps);
  es.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return es;
}

}  // namespace

ModelTrainer::ModelTrainer(const model::ModelConfig& c, const loss::LossWeights& w, const TrainConfig& t, TextForm f)
    : config(c),
      weights(w),
      train(t),
      form(f),
      params(model::init_params<float>(c, t.seed)),
      optimizer(t.optim),
      shuffle_rng(t.seed ^ 0x9e3779b97f4a7c15ULL) {
  config.validate();
  weights.validate();
  train.validate();
}

std::vector<std::size_t> ModelTrainer::epoch_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  return order;
}

StepStats ModelTrainer::step(const std::vector<const synth::Sample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  params.zero_grad();
  StepStats st;
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (const synth::Sample* s : batch) {
    const TaskDescription& desc = description_of(*s, form);
    ad::Tape<float> tape;
    tape.check_finite = true;
    model::Toist<float> net(config, params, tape);
    model::PredictionSet<float> pred = net.forward(s->scene, desc);
    loss::LossBreakdown<float> l = loss::loss_total(ground_truth(*s, desc), pred, weights, train.aux_loss);
    const double v = l.total.item();
    if (!std::isfinite(v)) throw ad::NumericError("non-finite training loss on scene " + std::to_string(s->scene_id));
    st.loss += v / static_cast<double>(batch.size());
    add_terms(st, l.final_terms(), 1.0 / static_cast<double>(batch.size()));
    tape.backward(ad::scale(l.total, inv));
  }
  st.student = st.loss;
  check_finite(params, "training step");
  optimizer.step(params);
  return st;
}

void ModelTrainer::schedule() {
  const bool dropped = train.lr_drop > 0 && epoch >= train.lr_drop;
  optimizer.config().lr = train.optim.lr * (dropped ? 0.1 : 1.0);
}

EpochStats ModelTrainer::train_epoch(const synth::Dataset& data) {
  schedule();
  EpochStats es = run_epoch(data, *this, train.batch_size, epoch, [this](const auto& b) { return step(b); });
  ++epoch;
  return es;
}

void ModelTrainer::fit(const synth::Dataset& data, const EpochCallback& on_epoch) {
  while (epoch < train.epochs) {
    EpochStats es = train_epoch(data);
    if (on_epoch) on_epoch(es);
  }
}

DistillTrainer::DistillTrainer(const model::ModelConfig& config, const loss::LossWeights& weights,
                               const TrainConfig& train, const DistillConfig& d, int n_task)
    : distill(d),
      // Same initialization for both, so noun and pronoun features start in
      // one space.
      teacher(config, weights, train, TextForm::kNoun),
      student(config, weights, train, TextForm::kPronoun),
      bank(n_task, d.memory, config.d, d.k, d.policy, train.seed) {
  distill.validate();
}

DistillTrainer::DistillTrainer(ModelTrainer t, ModelTrainer s, const DistillConfig& d, int n_task)
    : distill(d), teacher(std::move(t)), student(std::move(s)) {
  if (!(teacher.config == student.config))
    throw std::invalid_argument("teacher and student model configurations differ");
  if (teacher.form != TextForm::kNoun || student.form != TextForm::kPronoun)
    throw std::invalid_argument("teacher must read noun descriptions and student pronoun descriptions");
  distill.validate();
  bank = distill::MemoryBank(n_task, d.memory, student.config.d, d.k, d.policy, student.train.seed);
}

StepStats DistillTrainer::step(const std::vector<const synth::Sample*>& batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  teacher.params.zero_grad();
  student.params.zero_grad();
  StepStats st;
  const double nb = static_cast<double>(batch.size());
  const float inv = 1.0f / static_cast<float>(batch.size());
  for (const synth::Sample* s : batch) {
    // Teacher: noun description.
    ad::Tape<float> ttape;
    ttape.check_finite = true;
    model::Toist<float> tnet(teacher.config, teacher.params, ttape);
    model::PredictionSet<float> tpred = tnet.forward(s->scene, s->noun_description);
    if (distill.joint) {
      loss::LossBreakdown<float> lt =
          loss::loss_total(ground_truth(*s, s->noun_description), tpred, teacher.weights, teacher.train.aux_loss);
      const double v = lt.total.item();
      if (!std::isfinite(v)) throw ad::NumericError("non-finite teacher loss on scene " + std::to_string(s->scene_id));
      st.teacher += v / nb;
      ttape.backward(ad::scale(lt.total, inv));
    }
    if (s->noun_description.form == DescriptionForm::kVerbNoun)
      bank.update(s->task_id, tpred.special.value().cast<double>());
    const model::PredictionValues tvals = model::values_of(tpred);

    // Student: pronoun description, optional prototype replacement.
    ad::Tape<float> stape;
    stape.check_finite = true;
    model::Toist<float> snet(student.config, student.params, stape);
    model::EncoderOutput<float> enc = snet.encode(s->scene, s->pronoun_description);
    Eigen::RowVectorXd replacement;
    ad::Var<float> cluster = stape.scalar(0.0f);
    if (distill.ccr || distill.cluster_loss) {
      if (bank.ready(s->task_id)) {
        const Eigen::MatrixXd& protos = bank.prototypes(s->task_id);
        const Eigen::RowVectorXd pron = enc.special.value().cast<double>();
        const Eigen::RowVectorXd proto = protos.row(distill::select_prototype(protos, pron));
        if (distill.ccr) {
          replacement = proto;
          ++st.replaced;
        }
        if (distill.cluster_loss) cluster = distill::cluster_loss(enc.special, proto);
      }
    }
    model::PredictionSet<float> spred = snet.decode(enc, replacement);
    loss::LossBreakdown<float> ls = loss::loss_total(ground_truth(*s, s->pronoun_description), spred,
                                                     student.weights, student.train.aux_loss);
    ad::Var<float> total = ad::add(ls.total, ad::scale(cluster, float(distill.lambda_cluster)));
    ad::Var<float> binary = stape.scalar(0.0f);
    if (distill.sbtl) {
      const Eigen::MatrixXd sboxes = spred.final_block().boxes.value().cast<double>();
      const Eigen::MatrixXd slogits = spred.final_block().logits.value().cast<double>();
      const match::Assignment a = distill::ts_match(tvals.boxes, tvals.logits(), sboxes, slogits, distill.ts);
      binary = distill::soft_binary_target_loss(tvals.logits(), spred.final_block().logits, a);
      total = ad::add(total, ad::scale(binary, float(distill.lambda_binary)));
    }
    const double v = total.item();
    if (!std::isfinite(v)) throw ad::NumericError("non-finite student loss on scene " + std::to_string(s->scene_id));
    st.student += ls.total.item() / nb;
    add_terms(st, ls.final_terms(), 1.0 / nb);
    st.cluster += cluster.item() / nb;
    st.binary += binary.item() / nb;
    st.loss += v / nb;
    stape.backward(ad::scale(total, inv));
  }
  st.loss += st.teacher;
  if (distill.joint) {
    check_finite(teacher.params, "teacher step");
    teacher.optimizer.step(teacher.params);
  }
  check_finite(student.params, "student step");
  student.optimizer.step(student.params);
  return st;
}

EpochStats DistillTrainer::train_epoch(const synth::Dataset& data) {
  teacher.schedule();
  student.schedule();
  EpochStats es =
      run_epoch(data, student, student.train.batch_size, student.epoch, [this](const auto& b) { return step(b); });
  ++student.epoch;
  if (distill.joint) ++teacher.epoch;
  return es;
}

void DistillTrainer::fit(const synth::Dataset& data, const EpochCallback& on_epoch) {
  while (student.epoch < student.train.epochs) {
    EpochStats es = train_epoch(data);
    if (on_epoch) on_epoch(es);
  }
}

}  // namespace toist::train
