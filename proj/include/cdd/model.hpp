#pragma once

// The detector network: feature extractor followed by an expandable
// classifier head, plus frozen snapshots used as distillation targets.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdd/diff.hpp"
#include "cdd/error.hpp"
#include "cdd/rng.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

enum class Polarity : int { Real = 0, Fake = 1 };

enum class System { BC, MC, MT };

enum class HeadVariant { LinFC, CosFC, SigmoidBinary };

inline const char* to_string(Polarity p) { return p == Polarity::Fake ? "fake" : "real"; }

inline const char* to_string(System s) {
  switch (s) {
    case System::BC: return "bc";
    case System::MC: return "mc";
    case System::MT: return "mt";
  }
  return "?";
}

inline const char* to_string(HeadVariant v) {
  switch (v) {
    case HeadVariant::LinFC: return "linfc";
    case HeadVariant::CosFC: return "cosfc";
    case HeadVariant::SigmoidBinary: return "sigmoid";
  }
  return "?";
}

inline System parse_system(const std::string& s) {
  if (s == "bc") return System::BC;
  if (s == "mc") return System::MC;
  if (s == "mt") return System::MT;
  throw ConfigError("unknown learning system '" + s + "' (expected bc, mc or mt)");
}

inline HeadVariant parse_head_variant(const std::string& s) {
  if (s == "linfc") return HeadVariant::LinFC;
  if (s == "cosfc") return HeadVariant::CosFC;
  if (s == "sigmoid") return HeadVariant::SigmoidBinary;
  throw ConfigError("unknown head variant '" + s + "'");
}

/// Owner of one classifier output: which task it came from and whether it is
/// that task's real or fake class.
struct ClassInfo {
  int task;
  Polarity polarity;

  friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

using Registry = std::vector<ClassInfo>;

inline std::vector<std::size_t> classes_with(const Registry& registry, Polarity p) {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < registry.size(); ++c)
    if (registry[c].polarity == p) out.push_back(c);
  return out;
}

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

/// Multilayer ReLU network. All layers but the last are followed by ReLU; the
/// last one is linear and produces the feature vector.
class FeatureExtractor {
 public:
  FeatureExtractor() = default;

  /// widths = {input, hidden..., feature}. Weights drawn uniform in
  /// [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  FeatureExtractor(std::vector<std::size_t> widths, Rng& rng, bool bias = true)
      : widths_(std::move(widths)), bias_(bias) {
    if (widths_.size() < 2) throw ConfigError("extractor needs at least input and feature widths");
    for (std::size_t w : widths_)
      if (w == 0) throw ConfigError("extractor widths must be positive");
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(widths_[l]));
      weights_.push_back(uniform_tensor(Shape{widths_[l], widths_[l + 1]}, bound, rng));
      biases_.push_back(bias_ ? uniform_tensor(Shape{widths_[l + 1]}, bound, rng) : Tensor(Shape{widths_[l + 1]}));
    }
  }

  /// Builds an extractor from explicit per-layer parameters.
  FeatureExtractor(std::vector<Tensor> weights, std::vector<Tensor> biases, bool bias = true)
      : bias_(bias), weights_(std::move(weights)), biases_(std::move(biases)) {
    if (weights_.empty() || weights_.size() != biases_.size()) throw ConfigError("extractor layer lists disagree");
    widths_.push_back(weights_[0].rows());
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      if (weights_[l].rank() != 2 || weights_[l].rows() != widths_.back() || biases_[l].rank() != 1 ||
          biases_[l].size() != weights_[l].cols()) {
        throw DimensionError("extractor layer " + std::to_string(l) + " has inconsistent shapes");
      }
      widths_.push_back(weights_[l].cols());
    }
  }

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  std::size_t input_width() const { return widths_.front(); }
  std::size_t feature_width() const { return widths_.back(); }
  std::size_t num_layers() const noexcept { return weights_.size(); }
  bool has_bias() const noexcept { return bias_; }

  /// Width of the activation after `layer` layers (0 = raw input).
  std::size_t width_at(std::size_t layer) const {
    if (layer > num_layers()) throw ConfigError("layer index out of range");
    return widths_[layer];
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < num_layers(); ++l) n += weights_[l].size() + (bias_ ? biases_[l].size() : 0);
    return n;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      out.push_back(&weights_[l]);
      if (bias_) out.push_back(&biases_[l]);
    }
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      out.push_back(&weights_[l]);
      if (bias_) out.push_back(&biases_[l]);
    }
    return out;
  }

  const Tensor& weight(std::size_t l) const { return weights_.at(l); }
  const Tensor& bias(std::size_t l) const { return biases_.at(l); }

  /// Runs layers [from_layer, num_layers) on the tape. `params` holds the
  /// bound parameters in parameters() order.
  ad::Var forward(ad::Tape& tape, std::span<const ad::Var> params, ad::Var x, std::size_t from_layer = 0) const {
    if (from_layer >= num_layers()) throw ConfigError("cannot start the extractor past its last layer");
    const Tensor& X = tape.value(x);
    if (X.rank() != 2 || X.cols() != widths_[from_layer]) {
      throw DimensionError("extractor expected width " + std::to_string(widths_[from_layer]) + ", got shape " +
                           shape_string(X.shape()));
    }
    const std::size_t per_layer = bias_ ? 2 : 1;
    ad::Var h = x;
    for (std::size_t l = from_layer; l < num_layers(); ++l) {
      ad::Var w = params[l * per_layer];
      ad::Var b = bias_ ? params[l * per_layer + 1] : tape.constant(biases_[l]);
      h = ad::affine(h, w, b);
      if (l + 1 < num_layers()) h = ad::relu(h);
    }
    return h;
  }

  /// Activation after the first `layer` layers (ReLU applied), computed
  /// without a tape.
  Tensor activation_at(const Tensor& x, std::size_t layer) const {
    if (layer == 0 || layer >= num_layers()) {
      throw ConfigError("capture layer " + std::to_string(layer) + " out of range [1, " +
                        std::to_string(num_layers() - 1) + "]");
    }
    if (x.rank() != 2 || x.cols() != input_width()) throw DimensionError("extractor input width mismatch");
    Tensor h = x;
    for (std::size_t l = 0; l < layer; ++l) {
      const Tensor& W = weights_[l];
      Tensor next(Shape{h.rows(), W.cols()});
      for (std::size_t i = 0; i < h.rows(); ++i)
        for (std::size_t j = 0; j < W.cols(); ++j) {
          double s = biases_[l][j];
          for (std::size_t m = 0; m < W.rows(); ++m) s += h(i, m) * W(m, j);
          next(i, j) = s > 0.0 ? s : 0.0;
        }
      h = std::move(next);
    }
    return h;
  }

 private:
  std::vector<std::size_t> widths_;
  bool bias_ = true;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

/// Classifier head over extractor features.
///
/// LinFC and CosFC hold one embedding row per class and grow by two rows (real,
/// fake) per task. SigmoidBinary holds a single output unit forever.
class ClassifierHead {
 public:
  ClassifierHead() = default;

  ClassifierHead(HeadVariant variant, std::size_t feature_width, Rng& rng)
      : variant_(variant), feature_width_(feature_width) {
    if (feature_width == 0) throw ConfigError("feature width must be positive");
    if (variant_ == HeadVariant::SigmoidBinary) {
      embeddings_ = uniform_tensor(Shape{1, feature_width_}, init_bound(), rng);
      bias_ = Tensor(Shape{1});
    } else {
      embeddings_ = Tensor(Shape{0, feature_width_});
      bias_ = Tensor(Shape{0});
    }
    log_scale_ = Tensor::scalar(0.0);
  }

  HeadVariant variant() const noexcept { return variant_; }
  std::size_t feature_width() const noexcept { return feature_width_; }
  std::size_t num_outputs() const noexcept { return embeddings_.rows(); }
  const Registry& registry() const noexcept { return registry_; }
  const Tensor& embeddings() const noexcept { return embeddings_; }
  const Tensor& bias() const noexcept { return bias_; }
  double cos_scale() const { return std::exp(log_scale_.item()); }
  double log_scale() const { return log_scale_.item(); }

  double init_bound() const { return 1.0 / std::sqrt(static_cast<double>(feature_width_)); }

  bool has_task(int task) const {
    return std::any_of(registry_.begin(), registry_.end(), [task](const ClassInfo& c) { return c.task == task; });
  }

  /// Appends the real then fake class of a new task.
  void expand(int task, Rng& rng) {
    if (variant_ == HeadVariant::SigmoidBinary) throw ContractError("a sigmoid head has a fixed single output");
    if (has_task(task)) throw ProtocolError("task " + std::to_string(task) + " already has classes in the head");
    const Tensor fresh = uniform_tensor(Shape{2, feature_width_}, init_bound(), rng);
    std::vector<double> rows(embeddings_.values());
    rows.insert(rows.end(), fresh.values().begin(), fresh.values().end());
    embeddings_ = Tensor(Shape{embeddings_.rows() + 2, feature_width_}, std::move(rows));
    std::vector<double> b(bias_.values());
    b.push_back(0.0);
    b.push_back(0.0);
    const std::size_t nb = b.size();
    bias_ = Tensor(Shape{nb}, std::move(b));
    registry_.push_back({task, Polarity::Real});
    registry_.push_back({task, Polarity::Fake});
  }

  /// Parameters in declaration order: LinFC {theta, bias}, CosFC {theta,
  /// log_scale}, SigmoidBinary {w, bias}.
  std::vector<Tensor*> parameters() {
    if (variant_ == HeadVariant::CosFC) return {&embeddings_, &log_scale_};
    return {&embeddings_, &bias_};
  }
  std::vector<const Tensor*> parameters() const {
    if (variant_ == HeadVariant::CosFC) return {&embeddings_, &log_scale_};
    return {&embeddings_, &bias_};
  }

  ad::Var forward(ad::Tape&, std::span<const ad::Var> params, ad::Var features) const {
    ad::Var theta = params[0];
    switch (variant_) {
      case HeadVariant::LinFC:
      case HeadVariant::SigmoidBinary:
        return ad::affine(features, ad::transpose(theta), params[1]);
      case HeadVariant::CosFC: {
        ad::Var cos = ad::matmul(ad::row_normalize(features), ad::transpose(ad::row_normalize(theta)));
        return ad::scale_by(cos, ad::exp(params[1]));
      }
    }
    throw ContractError("unknown head variant");
  }

  // Used when restoring checkpoints.
  void restore(Tensor embeddings, Tensor bias, double log_scale, Registry registry) {
    if (embeddings.rank() != 2 || embeddings.cols() != feature_width_) throw DimensionError("embedding width mismatch");
    if (variant_ != HeadVariant::SigmoidBinary && registry.size() != embeddings.rows())
      throw DimensionError("registry does not cover every class");
    embeddings_ = std::move(embeddings);
    bias_ = std::move(bias);
    log_scale_ = Tensor::scalar(log_scale);
    registry_ = std::move(registry);
  }

 private:
  HeadVariant variant_ = HeadVariant::LinFC;
  std::size_t feature_width_ = 0;
  Tensor embeddings_;
  Tensor bias_;
  Tensor log_scale_;
  Registry registry_;
};

/// Parameters of a model placed on a tape.
struct Bound {
  std::vector<ad::Var> extractor;
  std::vector<ad::Var> head;
};

struct ForwardVars {
  ad::Var features;
  ad::Var logits;
};

struct Outputs {
  Tensor features;
  Tensor logits;
};

class Model {
 public:
  Model() = default;
  Model(FeatureExtractor extractor, ClassifierHead head) : extractor_(std::move(extractor)), head_(std::move(head)) {
    if (extractor_.feature_width() != head_.feature_width()) throw DimensionError("head width differs from features");
  }

  const FeatureExtractor& extractor() const noexcept { return extractor_; }
  const ClassifierHead& head() const noexcept { return head_; }
  ClassifierHead& head() noexcept { return head_; }

  /// Tasks whose session finished, in training order.
  const std::vector<int>& trained_tasks() const noexcept { return trained_; }
  void mark_trained(int task) { trained_.push_back(task); }
  void set_trained(std::vector<int> tasks) { trained_ = std::move(tasks); }

  std::vector<Tensor*> parameters() {
    auto out = extractor_.parameters();
    for (Tensor* t : head_.parameters()) out.push_back(t);
    return out;
  }
  std::vector<const Tensor*> parameters() const {
    auto out = extractor_.parameters();
    for (const Tensor* t : head_.parameters()) out.push_back(t);
    return out;
  }

  /// Places parameters on the tape; trainable ones become gradient leaves.
  Bound bind(ad::Tape& tape, bool trainable) const {
    Bound b;
    for (const Tensor* t : extractor_.parameters()) b.extractor.push_back(bind_one(tape, *t, trainable));
    for (const Tensor* t : head_.parameters()) b.head.push_back(bind_one(tape, *t, trainable));
    return b;
  }

  /// x holds raw inputs (from_layer = 0) or activations captured after
  /// `from_layer` extractor layers.
  ForwardVars forward(ad::Tape& tape, const Bound& bound, ad::Var x, std::size_t from_layer = 0) const {
    if (tape.value(x).rows() == 0 || tape.value(x).rank() != 2) throw ContractError("forward on an empty batch");
    ad::Var f = extractor_.forward(tape, bound.extractor, x, from_layer);
    return {f, head_.forward(tape, bound.head, f)};
  }

  Outputs forward(const Tensor& x, std::size_t from_layer = 0) const {
    ad::Tape tape;
    const Bound b = bind(tape, false);
    const ForwardVars out = forward(tape, b, tape.constant(x), from_layer);
    return {tape.value(out.features), tape.value(out.logits)};
  }

 private:
  static ad::Var bind_one(ad::Tape& tape, const Tensor& t, bool trainable) {
    Tensor copy = t;
    copy.set_requires_grad(trainable);
    copy.clear_grad();
    return tape.leaf(std::move(copy));
  }

  FeatureExtractor extractor_;
  ClassifierHead head_;
  std::vector<int> trained_;
};

/// Frozen deep copy of a model. Nothing done to the live model afterwards can
/// reach it.
class ModelSnapshot {
 public:
  explicit ModelSnapshot(const Model& model) : model_(model) {
    if (model.trained_tasks().empty()) throw ProtocolError("snapshot requires at least one trained session");
  }

  const Model& model() const noexcept { return model_; }
  const FeatureExtractor& extractor() const noexcept { return model_.extractor(); }
  const ClassifierHead& head() const noexcept { return model_.head(); }

  Outputs forward(const Tensor& x, std::size_t from_layer = 0) const { return model_.forward(x, from_layer); }

  /// Snapshot outputs as tape constants.
  ForwardVars forward(ad::Tape& tape, ad::Var x, std::size_t from_layer = 0) const {
    const Bound b = model_.bind(tape, false);
    return model_.forward(tape, b, ad::detach(x), from_layer);
  }

 private:
  const Model model_;
};

inline ModelSnapshot snapshot(const Model& model) { return ModelSnapshot(model); }

/// Default extractor + head for an input width: d -> 64 -> 64 -> 32.
inline Model make_model(std::size_t input_width, HeadVariant variant, Rng& rng,
                        std::vector<std::size_t> hidden = {64, 64}, std::size_t feature_width = 32) {
  std::vector<std::size_t> widths{input_width};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(feature_width);
  FeatureExtractor extractor(std::move(widths), rng);
  ClassifierHead head(variant, feature_width, rng);
  return Model(std::move(extractor), std::move(head));
}

namespace detail {

inline std::vector<double> softmax_row(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

inline void check_head_system(const ClassifierHead& head, System system) {
  const bool binary = head.variant() == HeadVariant::SigmoidBinary;
  if (binary != (system == System::BC)) {
    throw ConfigError(std::string("head variant ") + to_string(head.variant()) + " does not serve system " +
                      to_string(system));
  }
}

}  // namespace detail

/// Index of the largest logit, lowest index on ties.
inline std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

/// Real/fake decision for one sample's logits.
inline Polarity predict_binary(const ClassifierHead& head, std::span<const double> logits, System system) {
  detail::check_head_system(head, system);
  if (system == System::BC) {
    if (logits.size() != 1) throw DimensionError("binary head emits one logit");
    return ad::detail::stable_sigmoid(logits[0]) >= 0.5 ? Polarity::Fake : Polarity::Real;
  }
  if (logits.size() != head.registry().size() || logits.empty()) throw DimensionError("logit count differs from registry");
  return head.registry()[argmax(logits)].polarity;
}

/// Detection score p_F in [0, 1]. Multi-class heads use M_F / (M_F + M_R) over
/// the softmax activations.
inline double fake_score(const ClassifierHead& head, std::span<const double> logits, System system) {
  detail::check_head_system(head, system);
  if (system == System::BC) {
    if (logits.size() != 1) throw DimensionError("binary head emits one logit");
    return ad::detail::stable_sigmoid(logits[0]);
  }
  if (logits.size() != head.registry().size() || logits.empty()) throw DimensionError("logit count differs from registry");
  const auto p = detail::softmax_row(logits);
  double mf = 0.0, mr = 0.0;
  bool any_f = false, any_r = false;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (head.registry()[c].polarity == Polarity::Fake) {
      mf = any_f ? std::max(mf, p[c]) : p[c];
      any_f = true;
    } else {
      mr = any_r ? std::max(mr, p[c]) : p[c];
      any_r = true;
    }
  }
  if (mf + mr == 0.0) throw DegenerateInputError("fake score undefined: M_F + M_R = 0");
  return mf / (mf + mr);
}

/// p_F from given per-class maxima.
inline double fake_score_from_maxima(double m_fake, double m_real) {
  if (m_fake + m_real == 0.0) throw DegenerateInputError("fake score undefined: M_F + M_R = 0");
  return m_fake / (m_fake + m_real);
}

}  // namespace cdd
