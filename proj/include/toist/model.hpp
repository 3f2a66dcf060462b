#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "toist/scene.hpp"
#include "toist/tensor.hpp"

namespace toist::model {

using ad::Index;

struct ModelConfig {
  int d = 32;
  int n_tr = 2;
  int n_heads = 4;
  int n_pred = 8;
  int n_max = 16;  // logit length, last slot is "no object"
  int grid_h = 16;
  int grid_w = 16;
  int vocab = 64;
  int feature_dim = 17;
  int ffn_dim = 64;
  int align_dim = 16;
  bool decoder_self_attention = true;

  static ModelConfig toy();
  static ModelConfig paper();

  int n_l_max() const { return n_max - 1; }
  int n_v() const { return grid_h * grid_w; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Named parameter tensors in a fixed order. The set never grows after
// construction, so Parameter addresses stay valid for tape binding.
template <typename S>
class ParamSet {
 public:
  ad::Parameter<S>& add(std::string name, ad::Tensor<S> init);
  ad::Parameter<S>& operator[](const std::string& name);
  const ad::Parameter<S>& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<ad::Parameter<S>>& all() { return params_; }
  const std::vector<ad::Parameter<S>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  Index scalar_count() const;
  void zero_grad();

  template <typename T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<T>());
    return out;
  }

 private:
  std::vector<ad::Parameter<S>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename S>
ParamSet<S> init_params(const ModelConfig& config, std::uint64_t seed);

enum class Replace : std::uint8_t { kNone, kPre, kPost, kPrototype };

const char* to_string(Replace mode);

struct ForwardOptions {
  Replace replace = Replace::kNone;
  // Vector (length d) substituted at the pronoun position(s).
  Eigen::RowVectorXd replacement;
};

template <typename S>
struct EncoderOutput {
  ad::Var<S> visual;  // n_v x d
  ad::Var<S> text;    // n_l x d
  std::vector<Index> special_positions;
  // Mean of the text rows at the special positions (1 x d); invalid when none.
  ad::Var<S> special;
};

template <typename S>
struct BlockOutput {
  ad::Var<S> boxes;         // n_pred x 4, (cx, cy, h, w) in (0,1)
  ad::Var<S> mask_logits;   // n_pred x (H*W)
  ad::Var<S> logits;        // n_pred x n_max
  ad::Var<S> queries;       // n_pred x d
  ad::Var<S> object_embed;  // n_pred x align_dim, unit rows
};

template <typename S>
struct PredictionSet {
  std::vector<BlockOutput<S>> blocks;  // one per decoder block; back() is final
  ad::Var<S> text_features;            // L^tr as seen by the decoder
  ad::Var<S> text_embed;               // n_l x align_dim, unit rows
  ad::Var<S> special;                  // encoder feature at the special positions
  std::vector<Index> special_positions;

  const BlockOutput<S>& final_block() const { return blocks.back(); }
  // Preference score of every query for the given block (-1 = final).
  std::vector<double> preference(int block = -1) const;
};

struct BinaryProbs {
  double pos = 0;
  double neg = 0;
};

// Softmax mass off and on the trailing no-object slot, via max-shifted sums.
BinaryProbs binary_probs(std::span<const double> logits);

// 1 - softmax(logits)[last]; shares binary_probs' arithmetic exactly.
double preference_score(std::span<const double> logits);

// The TOIST network bound to one tape. Cheap to construct per step.
template <typename S>
class Toist {
 public:
  Toist(const ModelConfig& config, ParamSet<S>& params, ad::Tape<S>& tape);

  ad::Var<S> encode_scene(const Scene& scene);
  ad::Var<S> encode_text(const TaskDescription& desc);
  EncoderOutput<S> transformer_encode(ad::Var<S> visual, ad::Var<S> text,
                                      std::vector<Index> special_positions);
  // Query features after every decoder block, before the shared output norm.
  std::vector<ad::Var<S>> transformer_decode(ad::Var<S> memory);
  BlockOutput<S> heads(ad::Var<S> block_queries, ad::Var<S> visual_tr);

  // Encoder stage with optional pre-encoder replacement.
  EncoderOutput<S> encode(const Scene& scene, const TaskDescription& desc,
                          const ForwardOptions& options = {});
  // Decoder + heads. A non-empty `post_replacement` replaces the encoder text
  // rows at the special positions before decoding.
  PredictionSet<S> decode(const EncoderOutput<S>& enc,
                          const Eigen::RowVectorXd& post_replacement = {});
  PredictionSet<S> forward(const Scene& scene, const TaskDescription& desc,
                           const ForwardOptions& options = {});

  // When set, every encoder attention call appends its per-head matrices.
  std::vector<ad::Mat<S>>* attention_trace = nullptr;

  const ModelConfig& config() const { return config_; }

 private:
  ad::Var<S> p(const std::string& name) { return tape_.parameter(params_[name]); }
  ad::Var<S> lin(ad::Var<S> x, const std::string& prefix);
  ad::Var<S> norm(ad::Var<S> x, const std::string& prefix);
  ad::Var<S> ffn(ad::Var<S> x, const std::string& prefix);

  const ModelConfig& config_;
  ParamSet<S>& params_;
  ad::Tape<S>& tape_;
};

// Fixed 2-D sinusoidal embedding for an H x W grid, (H*W) x d.
Eigen::MatrixXd sine_position_embedding(int height, int width, int d);

// Plain-value snapshot of a PredictionSet.
struct PredictionValues {
  Eigen::MatrixXd boxes;        // n_pred x 4
  Eigen::MatrixXf mask_logits;  // n_pred x (H*W)
  std::vector<Eigen::MatrixXd> block_boxes;
  std::vector<Eigen::MatrixXf> block_mask_logits;
  std::vector<Eigen::MatrixXd> block_logits;
  std::vector<std::vector<double>> block_preference;

  const std::vector<double>& preference() const { return block_preference.back(); }
  const Eigen::MatrixXd& logits() const { return block_logits.back(); }
};

template <typename S>
PredictionValues values_of(const PredictionSet<S>& pred);

}  // namespace toist::model
