#pragma once

// Reference networks: a small U-Net segmentor f, a time-conditioned U-Net
// refiner g that estimates Bernoulli noise, and the cross-attention bridge
// that exchanges their bottleneck features.

#include "hidiff/autodiff.hpp"
#include "hidiff/bitops_ad.hpp"
#include "hidiff/rng.hpp"

#include <array>
#include <string>
#include <vector>

namespace hidiff::models {

using ad::Index;
using ad::Parameter;
using ad::Tensor;
using ad::Var;

struct ModelConfig {
  Index size = 32;      // square grid, divisible by 8
  Index in_channels = 1;
  Index classes = 1;    // foreground classes; 1 selects the sigmoid head
  std::array<Index, 4> seg_channels{8, 16, 32, 32};
  std::array<Index, 3> ref_channels{16, 32, 32};
  Index time_dim = 32;
  Index attn_dim = 64;
  Index heads = 4;
  Index ffn_mult = 2;
  bool xformer = true;
  bool binarized = false;  // refiner interior (and BX-Former) via TB -> xnor -> TA
  bool real_io = true;     // keep the refiner's input and output convolutions real-valued
  std::uint64_t seed = 0;

  bool sigmoid_head() const { return classes == 1; }
  /// Channels of the diffused mask: foreground only for the sigmoid head,
  /// background plus foreground otherwise.
  Index mask_channels() const { return sigmoid_head() ? 1 : classes + 1; }
  void validate() const;
};

/// Sinusoidal embedding of integer steps, [N, dim].
template <typename Scalar>
Tensor<Scalar> timestep_embedding(const std::vector<int>& t, Index dim);

// ---------------------------------------------------------------------------
// Layers

template <typename Scalar>
struct Conv {
  Parameter<Scalar> weight, bias;
  Conv() = default;
  Conv(const std::string& name, Index c_in, Index c_out, Index k, Rng& rng);
  Var<Scalar> operator()(const Var<Scalar>& x);
  void collect(std::vector<Parameter<Scalar>*>& out);
};

template <typename Scalar>
struct Linear {
  Parameter<Scalar> weight, bias;
  Linear() = default;
  /// `stddev` < 0 selects 1/sqrt(fan_in); 0 gives a zero-initialized map.
  Linear(const std::string& name, Index in, Index out, Rng& rng, double stddev = -1.0);
  Var<Scalar> operator()(const Var<Scalar>& x);
  void collect(std::vector<Parameter<Scalar>*>& out);
};

template <typename Scalar>
struct LayerNorm {
  Parameter<Scalar> gain, bias;
  LayerNorm() = default;
  LayerNorm(const std::string& name, Index dim);
  Var<Scalar> operator()(const Var<Scalar>& x);
  void collect(std::vector<Parameter<Scalar>*>& out);
};

/// Per-channel TB threshold (on `in` channels) and TA shifts (on `out`
/// channels) as affine maps of the time embedding, plus the TA slope.
/// Either side may be 0 when unused.
template <typename Scalar>
struct TimeCondMap {
  Linear<Scalar> alpha, gamma, zeta;
  Parameter<Scalar> beta;
  Index in = 0, out = 0;
  TimeCondMap() = default;
  TimeCondMap(const std::string& name, Index time_dim, Index in, Index out, Rng& rng);
  bitops::TimeCond<Scalar> operator()(const Var<Scalar>& temb);
  void collect(std::vector<Parameter<Scalar>*>& out);
};

/// 3x3 convolution block conditioned on time. Real: conv, add per-channel
/// time bias, SiLU. Binarized: TB on the input, XNOR convolution, TA.
template <typename Scalar>
struct TimeConvBlock {
  bool binarized = false;
  Conv<Scalar> conv;
  Linear<Scalar> time_bias;
  TimeCondMap<Scalar> cond;
  TimeConvBlock() = default;
  TimeConvBlock(const std::string& name, Index c_in, Index c_out, Index time_dim, bool binarized, Rng& rng);
  Var<Scalar> operator()(const Var<Scalar>& x, const Var<Scalar>& temb);
  void collect(std::vector<Parameter<Scalar>*>& out);
};

/// Linear projection on tokens [N, L, d_in], optionally binarized with a
/// time-dependent threshold per input feature.
template <typename Scalar>
struct TokenLinear {
  bool binarized = false;
  Linear<Scalar> linear;
  Linear<Scalar> threshold;
  TokenLinear() = default;
  TokenLinear(const std::string& name, Index in, Index out, Index time_dim, bool binarized, Rng& rng,
              double stddev = -1.0);
  Var<Scalar> operator()(const Var<Scalar>& x, const Var<Scalar>& temb);
  void collect(std::vector<Parameter<Scalar>*>& out);
};

// ---------------------------------------------------------------------------
// Cross-attention bridge

template <typename Scalar>
struct CrossBlockOutput {
  Var<Scalar> tokens;     // [N, L, d]
  Var<Scalar> attention;  // [N*heads, L, M], rows sum to 1
};

/// Pre-norm multi-head cross attention followed by a feed-forward layer,
/// both with residual connections. Queries come from `query`, keys and
/// values from `context`.
template <typename Scalar>
struct CrossBlock {
  Index dim = 0, heads = 0;
  LayerNorm<Scalar> norm_q, norm_kv, norm_ffn;
  TokenLinear<Scalar> wq, wk, wv, wo, ffn_in, ffn_out;
  TimeCondMap<Scalar> ffn_act;  // TA on the hidden layer when binarized
  bool binarized = false;
  CrossBlock() = default;
  CrossBlock(const std::string& name, Index dim, Index heads, Index ffn_mult, Index time_dim, bool binarized, Rng& rng);
  CrossBlockOutput<Scalar> operator()(const Var<Scalar>& query, const Var<Scalar>& context, const Var<Scalar>& temb);
  void collect(std::vector<Parameter<Scalar>*>& out);
};

template <typename Scalar>
struct XFormerOutput {
  Var<Scalar> d_prime;  // [N, d, H, W], segmentor-side tokens after seeing f_p'
  Var<Scalar> p_prime;  // [N, d, H, W], refiner-side tokens after seeing f_d
  Var<Scalar> attention_p, attention_d;
};

/// Two cross blocks: (f_d, f_p) -> f_p', then (f_p', f_d) -> f_d'. Both
/// features are projected to width d by 1x1 convolutions; the one with the
/// smaller grid is bilinearly resized to the larger.
template <typename Scalar>
struct XFormer {
  Conv<Scalar> proj_d, proj_p;
  CrossBlock<Scalar> block_p, block_d;
  Index dim = 0;
  XFormer() = default;
  XFormer(Index seg_channels, Index ref_channels, const ModelConfig& cfg, Rng& rng);
  XFormerOutput<Scalar> operator()(const Var<Scalar>& f_d, const Var<Scalar>& f_p, const Var<Scalar>& temb);
  void collect(std::vector<Parameter<Scalar>*>& out);
};

// ---------------------------------------------------------------------------
// Networks

template <typename Scalar>
struct SegmentorOutput {
  Var<Scalar> probs;    // [N, K, H, W] mask-channel probabilities
  Var<Scalar> feature;  // f_d, the bottleneck feature
};

template <typename Scalar>
class Segmentor {
public:
  Segmentor() = default;
  explicit Segmentor(const ModelConfig& cfg);

  /// image [N, C_in, H, W] on any tape.
  SegmentorOutput<Scalar> forward(const Var<Scalar>& image);
  /// Class probabilities including background, for the discriminative loss.
  static Var<Scalar> class_probs(const Var<Scalar>& probs, bool sigmoid_head);

  std::vector<Parameter<Scalar>*> params();
  const ModelConfig& config() const { return cfg_; }
  bitops::ModelDescription describe() const;

private:
  ModelConfig cfg_;
  Conv<Scalar> e1a_, e1b_, e2a_, e2b_, e3a_, e3b_, ma_, mb_, d3_, d2_, d1_, head_;
};

template <typename Scalar>
struct RefinerOutput {
  Var<Scalar> eps_hat;  // [N, K, H, W] in [0, 1]
  Var<Scalar> feature;  // f_p, the bottleneck feature before injection
  XFormerOutput<Scalar> bridge;
};

template <typename Scalar>
class Refiner {
public:
  Refiner() = default;
  explicit Refiner(const ModelConfig& cfg);

  /// latent, prior: [N, K, H, W]; image: [N, C_in, H, W]; seg_feature: f_d
  /// (ignored when the bridge is disabled); t: one step per sample.
  RefinerOutput<Scalar> forward(const Var<Scalar>& latent, const std::vector<int>& t, const Var<Scalar>& prior,
                                const Var<Scalar>& image, const Var<Scalar>& seg_feature);

  std::vector<Parameter<Scalar>*> params();
  const ModelConfig& config() const { return cfg_; }
  bitops::ModelDescription describe() const;

private:
  ModelConfig cfg_;
  Linear<Scalar> time1_, time2_;
  TimeConvBlock<Scalar> in_, enc1_, enc2_, mid_, dec2_, dec1_;
  Conv<Scalar> out_;
  TimeCondMap<Scalar> out_cond_;  // used when the output convolution is binarized
  XFormer<Scalar> bridge_;
  Conv<Scalar> inject_;
};

template <typename Scalar>
struct ReferenceModels {
  Segmentor<Scalar> segmentor;
  Refiner<Scalar> refiner;
};

template <typename Scalar>
ReferenceModels<Scalar> build_reference_models(const ModelConfig& cfg);

template <typename Scalar>
Index parameter_count(const std::vector<Parameter<Scalar>*>& ps) {
  Index n = 0;
  for (const auto* p : ps)
    n += p->value.numel();
  return n;
}

} // namespace hidiff::models
