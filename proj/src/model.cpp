#include "toist/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace toist::model {

using ad::Mat;
using ad::Shape;
using ad::Tensor;
using ad::Var;

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.d = 256;
  c.n_tr = 6;
  c.n_heads = 8;
  c.n_pred = 100;
  c.n_max = 256;
  c.ffn_dim = 2048;
  c.align_dim = 64;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (d <= 0 || n_heads <= 0 || d % n_heads != 0) fail("d must be a positive multiple of n_heads");
  if (n_tr < 0) fail("n_tr must be non-negative");
  if (n_pred <= 0) fail("n_pred must be positive");
  if (n_max < 2) fail("n_max must be at least 2");
  if (grid_h <= 0 || grid_w <= 0) fail("grid must be non-empty");
  if (vocab <= 0 || feature_dim <= 0 || ffn_dim <= 0 || align_dim <= 0)
    fail("vocab, feature_dim, ffn_dim and align_dim must be positive");
  if (d % 4 != 0) fail("d must be divisible by 4 for the 2-D sine embedding");
}

const char* to_string(Replace mode) {
  switch (mode) {
    case Replace::kNone: return "none";
    case Replace::kPre: return "replace-pre";
    case Replace::kPost: return "replace-post";
    case Replace::kPrototype: return "replace-prototype";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// ParamSet

template <typename S>
ad::Parameter<S>& ParamSet<S>::add(std::string name, Tensor<S> init) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_.emplace(name, params_.size());
  params_.emplace_back(std::move(name), std::move(init));
  return params_.back();
}

template <typename S>
ad::Parameter<S>& ParamSet<S>::operator[](const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return params_[it->second];
}

template <typename S>
const ad::Parameter<S>& ParamSet<S>::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return params_[it->second];
}

template <typename S>
Index ParamSet<S>::scalar_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename S>
void ParamSet<S>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

namespace {

struct Initializer {
  std::mt19937_64 rng;

  template <typename S>
  Tensor<S> uniform_fan_in(Index rows, Index cols) {
    const double bound = 1.0 / std::sqrt(double(rows));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<S> t(Shape{rows, cols});
    for (S& v : t.flat()) v = S(u(rng));
    return t;
  }
  template <typename S>
  Tensor<S> normal(Index rows, Index cols, double stddev) {
    std::normal_distribution<double> n(0.0, stddev);
    Tensor<S> t(Shape{rows, cols});
    for (S& v : t.flat()) v = S(n(rng));
    return t;
  }
};

template <typename S>
void add_linear(ParamSet<S>& ps, Initializer& init, const std::string& prefix, Index in, Index out) {
  ps.add(prefix + ".weight", init.uniform_fan_in<S>(in, out));
  ps.add(prefix + ".bias", Tensor<S>(Shape{1, out}));
}

template <typename S>
void add_norm(ParamSet<S>& ps, const std::string& prefix, Index d) {
  Tensor<S> g(Shape{1, d});
  g.data.setOnes();
  ps.add(prefix + ".gamma", std::move(g));
  ps.add(prefix + ".beta", Tensor<S>(Shape{1, d}));
}

}  // namespace

template <typename S>
ParamSet<S> init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  Initializer init{std::mt19937_64(seed)};
  ParamSet<S> ps;
  add_linear(ps, init, "visual", c.feature_dim, c.d);
  ps.add("text.embed", init.normal<S>(c.vocab, c.d, 0.02));
  ps.add("text.pos", init.normal<S>(c.n_max, c.d, 0.02));
  for (int i = 0; i < c.n_tr; ++i) {
    const std::string b = "encoder." + std::to_string(i);
    add_norm(ps, b + ".norm1", c.d);
    add_linear(ps, init, b + ".attn.qkv", c.d, 3 * c.d);
    add_linear(ps, init, b + ".attn.out", c.d, c.d);
    add_norm(ps, b + ".norm2", c.d);
    add_linear(ps, init, b + ".ffn.fc1", c.d, c.ffn_dim);
    add_linear(ps, init, b + ".ffn.fc2", c.ffn_dim, c.d);
  }
  add_norm(ps, "encoder.norm", c.d);
  ps.add("query.embed", init.normal<S>(c.n_pred, c.d, 0.02));
  for (int i = 0; i < c.n_tr; ++i) {
    const std::string b = "decoder." + std::to_string(i);
    add_norm(ps, b + ".norm_sa", c.d);
    add_linear(ps, init, b + ".self_attn.qkv", c.d, 3 * c.d);
    add_linear(ps, init, b + ".self_attn.out", c.d, c.d);
    add_norm(ps, b + ".norm_ca", c.d);
    add_linear(ps, init, b + ".cross_attn.q", c.d, c.d);
    add_linear(ps, init, b + ".cross_attn.kv", c.d, 2 * c.d);
    add_linear(ps, init, b + ".cross_attn.out", c.d, c.d);
    add_norm(ps, b + ".norm_ffn", c.d);
    add_linear(ps, init, b + ".ffn.fc1", c.d, c.ffn_dim);
    add_linear(ps, init, b + ".ffn.fc2", c.ffn_dim, c.d);
  }
  add_norm(ps, "decoder.norm", c.d);
  add_linear(ps, init, "head.box.fc1", c.d, c.d);
  add_linear(ps, init, "head.box.fc2", c.d, c.d);
  add_linear(ps, init, "head.box.fc3", c.d, 4);
  add_linear(ps, init, "head.logit", c.d, c.n_max);
  add_linear(ps, init, "head.mask.query", c.d, c.d);
  add_linear(ps, init, "head.mask.key", c.d, c.d);
  add_linear(ps, init, "align.object", c.d, c.align_dim);
  add_linear(ps, init, "align.text", c.d, c.align_dim);
  return ps;
}

Eigen::MatrixXd sine_position_embedding(int height, int width, int d) {
  const int half = d / 2;
  Eigen::MatrixXd pos(height * width, d);
  const double two_pi = 2.0 * M_PI;
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const double y = (r + 1.0) / height * two_pi;
      const double x = (c + 1.0) / width * two_pi;
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(10000.0, 2.0 * (i / 2) / half);
        const bool even = i % 2 == 0;
        pos(r * width + c, i) = even ? std::sin(y / freq) : std::cos(y / freq);
        pos(r * width + c, half + i) = even ? std::sin(x / freq) : std::cos(x / freq);
      }
    }
  return pos;
}

BinaryProbs binary_probs(std::span<const double> logits) {
  if (logits.size() < 2) throw std::invalid_argument("binary_probs: need at least two logits");
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double pos = 0.0;
  for (std::size_t j = 0; j + 1 < logits.size(); ++j) pos += std::exp(logits[j] - m);
  const double neg = std::exp(logits.back() - m);
  const double total = pos + neg;
  return {pos / total, neg / total};
}

double preference_score(std::span<const double> logits) { return binary_probs(logits).pos; }

namespace {
template <typename S>
std::vector<double> preference_of(const Mat<S>& logits) {
  std::vector<double> out(static_cast<std::size_t>(logits.rows()));
  std::vector<double> row(static_cast<std::size_t>(logits.cols()));
  for (Index i = 0; i < logits.rows(); ++i) {
    for (Index j = 0; j < logits.cols(); ++j) row[static_cast<std::size_t>(j)] = double(logits(i, j));
    out[static_cast<std::size_t>(i)] = preference_score(row);
  }
  return out;
}
}  // namespace

template <typename S>
std::vector<double> PredictionSet<S>::preference(int block) const {
  const auto& b = block < 0 ? blocks.back() : blocks.at(static_cast<std::size_t>(block));
  return preference_of<S>(b.logits.value());
}

// ---------------------------------------------------------------------------
// Toist

template <typename S>
Toist<S>::Toist(const ModelConfig& config, ParamSet<S>& params, ad::Tape<S>& tape)
    : config_(config), params_(params), tape_(tape) {}

template <typename S>
Var<S> Toist<S>::lin(Var<S> x, const std::string& prefix) {
  return ad::linear(x, p(prefix + ".weight"), p(prefix + ".bias"));
}

template <typename S>
Var<S> Toist<S>::norm(Var<S> x, const std::string& prefix) {
  return ad::layer_norm(x, p(prefix + ".gamma"), p(prefix + ".beta"));
}

template <typename S>
Var<S> Toist<S>::ffn(Var<S> x, const std::string& prefix) {
  return lin(ad::gelu(lin(x, prefix + ".fc1")), prefix + ".fc2");
}

template <typename S>
Var<S> Toist<S>::encode_scene(const Scene& scene) {
  if (scene.height != config_.grid_h || scene.width != config_.grid_w ||
      scene.feature_dim() != config_.feature_dim)
    throw std::invalid_argument("encode_scene: scene grid " + std::to_string(scene.height) + "x" +
                                std::to_string(scene.width) + "x" + std::to_string(scene.feature_dim()) +
                                " does not match config " + std::to_string(config_.grid_h) + "x" +
                                std::to_string(config_.grid_w) + "x" + std::to_string(config_.feature_dim));
  Var<S> x = tape_.constant(Mat<S>(scene.features.template cast<S>()));
  static thread_local std::map<std::tuple<int, int, int>, Eigen::MatrixXd> cache;
  auto key = std::make_tuple(config_.grid_h, config_.grid_w, config_.d);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, sine_position_embedding(config_.grid_h, config_.grid_w, config_.d)).first;
  Var<S> pos = tape_.constant(Mat<S>(it->second.template cast<S>()));
  return ad::add(lin(x, "visual"), pos);
}

template <typename S>
Var<S> Toist<S>::encode_text(const TaskDescription& desc) {
  desc.validate(config_.vocab, config_.n_l_max());
  std::vector<Index> ids(desc.tokens.begin(), desc.tokens.end());
  Var<S> emb = ad::gather_rows(p("text.embed"), std::move(ids));
  Var<S> pos = ad::slice_rows(p("text.pos"), 0, desc.length());
  return ad::add(emb, pos);
}

template <typename S>
EncoderOutput<S> Toist<S>::transformer_encode(Var<S> visual, Var<S> text,
                                              std::vector<Index> special_positions) {
  const Index n_v = visual.rows(), n_l = text.rows();
  Var<S> x = ad::concat_rows<S>({visual, text});
  for (int i = 0; i < config_.n_tr; ++i) {
    const std::string b = "encoder." + std::to_string(i);
    Var<S> qkv = lin(norm(x, b + ".norm1"), b + ".attn.qkv");
    const Index d = config_.d;
    Var<S> a = ad::attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, d),
                             ad::slice_cols(qkv, 2 * d, d), config_.n_heads, attention_trace);
    x = ad::add(x, lin(a, b + ".attn.out"));
    x = ad::add(x, ffn(norm(x, b + ".norm2"), b + ".ffn"));
  }
  if (config_.n_tr > 0) x = norm(x, "encoder.norm");
  EncoderOutput<S> out;
  out.visual = ad::slice_rows(x, 0, n_v);
  out.text = ad::slice_rows(x, n_v, n_l);
  out.special_positions = std::move(special_positions);
  if (!out.special_positions.empty())
    out.special = ad::mean(ad::gather_rows(out.text, out.special_positions), 0);
  return out;
}

template <typename S>
std::vector<Var<S>> Toist<S>::transformer_decode(Var<S> memory) {
  const Index d = config_.d;
  Var<S> t = p("query.embed");
  std::vector<Var<S>> per_block;
  for (int i = 0; i < config_.n_tr; ++i) {
    const std::string b = "decoder." + std::to_string(i);
    // The self-attention weights exist either way; the ablation only skips the path.
    if (config_.decoder_self_attention) {
      Var<S> qkv = lin(norm(t, b + ".norm_sa"), b + ".self_attn.qkv");
      Var<S> a = ad::attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, d),
                               ad::slice_cols(qkv, 2 * d, d), config_.n_heads);
      t = ad::add(t, lin(a, b + ".self_attn.out"));
    }
    Var<S> q = lin(norm(t, b + ".norm_ca"), b + ".cross_attn.q");
    Var<S> kv = lin(memory, b + ".cross_attn.kv");
    Var<S> a = ad::attention(q, ad::slice_cols(kv, 0, d), ad::slice_cols(kv, d, d), config_.n_heads);
    t = ad::add(t, lin(a, b + ".cross_attn.out"));
    t = ad::add(t, ffn(norm(t, b + ".norm_ffn"), b + ".ffn"));
    per_block.push_back(t);
  }
  return per_block;
}

template <typename S>
BlockOutput<S> Toist<S>::heads(Var<S> block_queries, Var<S> visual_tr) {
  BlockOutput<S> out;
  out.queries = norm(block_queries, "decoder.norm");
  Var<S> h = ad::gelu(lin(out.queries, "head.box.fc1"));
  h = ad::gelu(lin(h, "head.box.fc2"));
  out.boxes = ad::sigmoid(lin(h, "head.box.fc3"));
  out.logits = lin(out.queries, "head.logit");
  Var<S> keys = lin(visual_tr, "head.mask.key");
  out.mask_logits = ad::scale(ad::matmul_nt(lin(out.queries, "head.mask.query"), keys),
                              S(1) / std::sqrt(S(config_.d)));
  out.object_embed = ad::l2_normalize_rows(lin(out.queries, "align.object"));
  return out;
}

template <typename S>
EncoderOutput<S> Toist<S>::encode(const Scene& scene, const TaskDescription& desc,
                                  const ForwardOptions& options) {
  if (options.replace != Replace::kNone) {
    if (desc.form == DescriptionForm::kEmpty)
      throw std::invalid_argument(std::string(to_string(options.replace)) +
                                  " needs a noun or pronoun position; got empty-form text");
    if (options.replacement.size() != config_.d)
      throw std::invalid_argument(std::string(to_string(options.replace)) + ": replacement of length " +
                                  std::to_string(options.replacement.size()) + ", expected " +
                                  std::to_string(config_.d));
  }
  Var<S> visual = encode_scene(scene);
  Var<S> text = encode_text(desc);
  std::vector<Index> special(desc.special_positions.begin(), desc.special_positions.end());
  if (options.replace == Replace::kPre) {
    Mat<S> rows = options.replacement.template cast<S>().replicate(static_cast<Index>(special.size()), 1);
    text = ad::replace_rows(text, special, tape_.constant(std::move(rows)));
  }
  return transformer_encode(visual, text, std::move(special));
}

template <typename S>
PredictionSet<S> Toist<S>::decode(const EncoderOutput<S>& enc, const Eigen::RowVectorXd& post_replacement) {
  if (config_.n_tr <= 0) throw std::invalid_argument("decode: model has no decoder blocks");
  PredictionSet<S> out;
  out.special = enc.special;
  out.special_positions = enc.special_positions;
  Var<S> text = enc.text;
  if (post_replacement.size() > 0) {
    if (enc.special_positions.empty())
      throw std::invalid_argument("decode: replacement requested but the text has no special position");
    Mat<S> rows = post_replacement.template cast<S>().replicate(
        static_cast<Index>(enc.special_positions.size()), 1);
    text = ad::replace_rows(text, enc.special_positions, tape_.constant(std::move(rows)));
  }
  out.text_features = text;
  out.text_embed = ad::l2_normalize_rows(lin(text, "align.text"));
  Var<S> memory = ad::concat_rows<S>({enc.visual, text});
  for (Var<S> q : transformer_decode(memory)) out.blocks.push_back(heads(q, enc.visual));
  return out;
}

template <typename S>
PredictionSet<S> Toist<S>::forward(const Scene& scene, const TaskDescription& desc,
                                   const ForwardOptions& options) {
  EncoderOutput<S> enc = encode(scene, desc, options);
  const bool post = options.replace == Replace::kPost || options.replace == Replace::kPrototype;
  return decode(enc, post ? options.replacement : Eigen::RowVectorXd{});
}

template <typename S>
PredictionValues values_of(const PredictionSet<S>& pred) {
  PredictionValues v;
  for (const auto& b : pred.blocks) {
    v.block_boxes.push_back(b.boxes.value().template cast<double>());
    v.block_mask_logits.push_back(b.mask_logits.value().template cast<float>());
    v.block_logits.push_back(b.logits.value().template cast<double>());
    v.block_preference.push_back(preference_of<S>(b.logits.value()));
  }
  v.boxes = v.block_boxes.back();
  v.mask_logits = v.block_mask_logits.back();
  return v;
}

template class ParamSet<float>;
template class ParamSet<double>;
template ParamSet<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ParamSet<double> init_params<double>(const ModelConfig&, std::uint64_t);
template struct PredictionSet<float>;
template struct PredictionSet<double>;
template class Toist<float>;
template class Toist<double>;
template PredictionValues values_of<float>(const PredictionSet<float>&);
template PredictionValues values_of<double>(const PredictionSet<double>&);

}  // namespace toist::model
