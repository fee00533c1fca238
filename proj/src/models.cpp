#include "hidiff/models.hpp"

#include "hidiff/bitops_ad.hpp"

#include <cmath>
#include <stdexcept>

namespace hidiff::models {

namespace {

template <typename Scalar>
Tensor<Scalar> normal_tensor(ad::Shape shape, Rng& rng, double stddev) {
  return stddev == 0.0 ? Tensor<Scalar>(std::move(shape)) : Tensor<Scalar>::randn(std::move(shape), rng, stddev);
}

/// [N, C, H, W] -> [N, H*W, C]
template <typename Scalar>
Var<Scalar> to_tokens(const Var<Scalar>& x) {
  return ad::permute(ad::reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), {0, 2, 1});
}

/// [N, H*W, C] -> [N, C, H, W]
template <typename Scalar>
Var<Scalar> from_tokens(const Var<Scalar>& t, Index h, Index w) {
  return ad::reshape(ad::permute(t, {0, 2, 1}), {t.dim(0), t.dim(2), h, w});
}

/// Applies a per-channel op that expects channels on axis 1 to tokens [N, L, C].
template <typename Scalar, typename Op>
Var<Scalar> on_token_channels(const Var<Scalar>& t, Op op) {
  return ad::permute(op(ad::permute(t, {0, 2, 1})), {0, 2, 1});
}

bitops::LayerSpec conv_spec(const std::string& name, Index pixels, Index c_in, Index k, Index c_out, bool binarized) {
  return {name, bitops::LayerKind::Conv2d, pixels, c_in * k * k, c_out, binarized};
}

bitops::LayerSpec matmul_spec(const std::string& name, Index m, Index k, Index n, bool binarized = false) {
  return {name, bitops::LayerKind::Matmul, m, k, n, binarized};
}

} // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
  if (size < 8 || size % 8 != 0)
    fail("size must be a positive multiple of 8");
  if (in_channels < 1 || classes < 1)
    fail("in_channels and classes must be >= 1");
  for (Index c : seg_channels)
    if (c < 1)
      fail("segmentor channels must be >= 1");
  for (Index c : ref_channels)
    if (c < 1)
      fail("refiner channels must be >= 1");
  if (time_dim < 2 || time_dim % 2 != 0)
    fail("time_dim must be even and >= 2");
  if (attn_dim < 1 || heads < 1 || attn_dim % heads != 0)
    fail("attn_dim must be a positive multiple of heads");
  if (ffn_mult < 1)
    fail("ffn_mult must be >= 1");
}

template <typename Scalar>
Tensor<Scalar> timestep_embedding(const std::vector<int>& t, Index dim) {
  const Index half = dim / 2;
  Tensor<Scalar> out({static_cast<Index>(t.size()), dim});
  for (std::size_t n = 0; n < t.size(); ++n)
    for (Index i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double arg = static_cast<double>(t[n]) * freq;
      out.data[static_cast<Index>(n) * dim + i] = static_cast<Scalar>(std::sin(arg));
      out.data[static_cast<Index>(n) * dim + half + i] = static_cast<Scalar>(std::cos(arg));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Layers

template <typename Scalar>
Conv<Scalar>::Conv(const std::string& name, Index c_in, Index c_out, Index k, Rng& rng)
    : weight(name + ".weight", normal_tensor<Scalar>({c_out, c_in, k, k}, rng, std::sqrt(2.0 / static_cast<double>(c_in * k * k)))),
      bias(name + ".bias", Tensor<Scalar>({c_out})) {}

template <typename Scalar>
Var<Scalar> Conv<Scalar>::operator()(const Var<Scalar>& x) {
  auto& tape = x.tape();
  return ad::conv2d(x, tape.param(weight), tape.param(bias));
}

template <typename Scalar>
void Conv<Scalar>::collect(std::vector<Parameter<Scalar>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename Scalar>
Linear<Scalar>::Linear(const std::string& name, Index in, Index out, Rng& rng, double stddev)
    : weight(name + ".weight", normal_tensor<Scalar>({in, out}, rng, stddev < 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : stddev)),
      bias(name + ".bias", Tensor<Scalar>({out})) {}

template <typename Scalar>
Var<Scalar> Linear<Scalar>::operator()(const Var<Scalar>& x) {
  auto& tape = x.tape();
  return ad::add_bias(ad::matmul(x, tape.param(weight)), tape.param(bias));
}

template <typename Scalar>
void Linear<Scalar>::collect(std::vector<Parameter<Scalar>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename Scalar>
LayerNorm<Scalar>::LayerNorm(const std::string& name, Index dim)
    : gain(name + ".gain", Tensor<Scalar>({dim}, Scalar(1))), bias(name + ".bias", Tensor<Scalar>({dim})) {}

template <typename Scalar>
Var<Scalar> LayerNorm<Scalar>::operator()(const Var<Scalar>& x) {
  auto& tape = x.tape();
  return ad::layer_norm(x, tape.param(gain), tape.param(bias));
}

template <typename Scalar>
void LayerNorm<Scalar>::collect(std::vector<Parameter<Scalar>*>& out) {
  out.push_back(&gain);
  out.push_back(&bias);
}

template <typename Scalar>
TimeCondMap<Scalar>::TimeCondMap(const std::string& name, Index time_dim, Index in_ch, Index out_ch, Rng& rng)
    : in(in_ch), out(out_ch) {
  // Small random maps so the conditioning is live from the first step.
  if (in > 0)
    alpha = Linear<Scalar>(name + ".alpha", time_dim, in, rng, 0.01);
  if (out > 0) {
    gamma = Linear<Scalar>(name + ".gamma", time_dim, out, rng, 0.01);
    zeta = Linear<Scalar>(name + ".zeta", time_dim, out, rng, 0.01);
    beta = Parameter<Scalar>(name + ".beta", Tensor<Scalar>({out}, Scalar(0.25)));
  }
}

template <typename Scalar>
bitops::TimeCond<Scalar> TimeCondMap<Scalar>::operator()(const Var<Scalar>& temb) {
  bitops::TimeCond<Scalar> c;
  if (in > 0)
    c.alpha = alpha(temb);
  if (out > 0) {
    c.gamma = gamma(temb);
    c.zeta = zeta(temb);
    c.beta = temb.tape().param(beta);
  }
  return c;
}

template <typename Scalar>
void TimeCondMap<Scalar>::collect(std::vector<Parameter<Scalar>*>& o) {
  if (in > 0)
    alpha.collect(o);
  if (out > 0) {
    gamma.collect(o);
    zeta.collect(o);
    o.push_back(&beta);
  }
}

template <typename Scalar>
TimeConvBlock<Scalar>::TimeConvBlock(const std::string& name, Index c_in, Index c_out, Index time_dim, bool bin, Rng& rng)
    : binarized(bin), conv(name + ".conv", c_in, c_out, 3, rng) {
  if (binarized)
    cond = TimeCondMap<Scalar>(name + ".cond", time_dim, c_in, c_out, rng);
  else
    time_bias = Linear<Scalar>(name + ".time", time_dim, c_out, rng);
}

template <typename Scalar>
Var<Scalar> TimeConvBlock<Scalar>::operator()(const Var<Scalar>& x, const Var<Scalar>& temb) {
  auto& tape = x.tape();
  if (!binarized)
    return ad::silu(ad::add_channel_bias(conv(x), time_bias(temb)));
  const auto c = cond(temb);
  const auto xb = bitops::tb_binarize(x, c.alpha);
  const auto u = bitops::binary_conv2d(xb, tape.param(conv.weight), tape.param(conv.bias));
  return bitops::ta_activate(u, c.gamma, c.zeta, c.beta);
}

template <typename Scalar>
void TimeConvBlock<Scalar>::collect(std::vector<Parameter<Scalar>*>& out) {
  conv.collect(out);
  if (binarized)
    cond.collect(out);
  else
    time_bias.collect(out);
}

template <typename Scalar>
TokenLinear<Scalar>::TokenLinear(const std::string& name, Index in, Index out, Index time_dim, bool bin, Rng& rng, double stddev)
    : binarized(bin), linear(name, in, out, rng, stddev) {
  if (binarized)
    threshold = Linear<Scalar>(name + ".threshold", time_dim, in, rng, 0.01);
}

template <typename Scalar>
Var<Scalar> TokenLinear<Scalar>::operator()(const Var<Scalar>& x, const Var<Scalar>& temb) {
  if (!binarized)
    return linear(x);
  auto& tape = x.tape();
  const auto alpha = threshold(temb);
  const auto xb = on_token_channels(x, [&](const Var<Scalar>& v) { return bitops::tb_binarize(v, alpha); });
  return ad::add_bias(bitops::binary_linear(xb, tape.param(linear.weight)), tape.param(linear.bias));
}

template <typename Scalar>
void TokenLinear<Scalar>::collect(std::vector<Parameter<Scalar>*>& out) {
  linear.collect(out);
  if (binarized)
    threshold.collect(out);
}

// ---------------------------------------------------------------------------
// Cross-attention bridge

template <typename Scalar>
CrossBlock<Scalar>::CrossBlock(const std::string& name, Index d, Index h, Index ffn_mult, Index time_dim, bool bin, Rng& rng)
    : dim(d), heads(h), norm_q(name + ".norm_q", d), norm_kv(name + ".norm_kv", d), norm_ffn(name + ".norm_ffn", d),
      wq(name + ".q", d, d, time_dim, bin, rng), wk(name + ".k", d, d, time_dim, bin, rng),
      wv(name + ".v", d, d, time_dim, bin, rng), wo(name + ".o", d, d, time_dim, bin, rng),
      ffn_in(name + ".ffn_in", d, d * ffn_mult, time_dim, bin, rng),
      ffn_out(name + ".ffn_out", d * ffn_mult, d, time_dim, bin, rng), binarized(bin) {
  if (binarized)
    ffn_act = TimeCondMap<Scalar>(name + ".ffn_act", time_dim, 0, d * ffn_mult, rng);
}

template <typename Scalar>
CrossBlockOutput<Scalar> CrossBlock<Scalar>::operator()(const Var<Scalar>& query, const Var<Scalar>& context,
                                                        const Var<Scalar>& temb) {
  ad::require(query.shape().size() == 3 && context.shape().size() == 3 && query.dim(2) == dim && context.dim(2) == dim &&
                  query.dim(0) == context.dim(0),
              "CrossBlock: expected tokens of width " + std::to_string(dim) + ", got " + ad::to_string(query.shape()) +
                  " and " + ad::to_string(context.shape()));
  const Index n = query.dim(0), l = query.dim(1), m = context.dim(1), dh = dim / heads;
  const auto kv = norm_kv(context);
  const auto q = wq(norm_q(query), temb);
  const auto k = wk(kv, temb);
  const auto v = wv(kv, temb);
  const auto qh = ad::reshape(ad::permute(ad::reshape(q, {n, l, heads, dh}), {0, 2, 1, 3}), {n * heads, l, dh});
  const auto kt = ad::reshape(ad::permute(ad::reshape(k, {n, m, heads, dh}), {0, 2, 3, 1}), {n * heads, dh, m});
  const auto vh = ad::reshape(ad::permute(ad::reshape(v, {n, m, heads, dh}), {0, 2, 1, 3}), {n * heads, m, dh});
  const auto attn = ad::softmax(ad::scale(ad::bmm(qh, kt), static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)))), 2);
  const auto o = ad::reshape(ad::permute(ad::reshape(ad::bmm(attn, vh), {n, heads, l, dh}), {0, 2, 1, 3}), {n, l, dim});
  const auto x = ad::add(query, wo(o, temb));
  auto hidden = ffn_in(norm_ffn(x), temb);
  if (binarized) {
    const auto c = ffn_act(temb);
    hidden = on_token_channels(hidden, [&](const Var<Scalar>& u) { return bitops::ta_activate(u, c.gamma, c.zeta, c.beta); });
  } else {
    hidden = ad::silu(hidden);
  }
  return {ad::add(x, ffn_out(hidden, temb)), attn};
}

template <typename Scalar>
void CrossBlock<Scalar>::collect(std::vector<Parameter<Scalar>*>& out) {
  norm_q.collect(out);
  norm_kv.collect(out);
  norm_ffn.collect(out);
  for (auto* l : {&wq, &wk, &wv, &wo, &ffn_in, &ffn_out})
    l->collect(out);
  if (binarized)
    ffn_act.collect(out);
}

template <typename Scalar>
XFormer<Scalar>::XFormer(Index seg_channels, Index ref_channels, const ModelConfig& cfg, Rng& rng)
    : proj_d("xformer.proj_d", seg_channels, cfg.attn_dim, 1, rng),
      proj_p("xformer.proj_p", ref_channels, cfg.attn_dim, 1, rng),
      block_p("xformer.block_p", cfg.attn_dim, cfg.heads, cfg.ffn_mult, cfg.time_dim, cfg.binarized, rng),
      block_d("xformer.block_d", cfg.attn_dim, cfg.heads, cfg.ffn_mult, cfg.time_dim, cfg.binarized, rng),
      dim(cfg.attn_dim) {}

template <typename Scalar>
XFormerOutput<Scalar> XFormer<Scalar>::operator()(const Var<Scalar>& f_d, const Var<Scalar>& f_p, const Var<Scalar>& temb) {
  ad::require(f_d.shape().size() == 4 && f_p.shape().size() == 4 && f_d.dim(0) == f_p.dim(0),
              "XFormer: expected NCHW features with equal batch");
  const Index h = std::max(f_d.dim(2), f_p.dim(2)), w = std::max(f_d.dim(3), f_p.dim(3));
  auto fit = [&](const Var<Scalar>& f) {
    return (f.dim(2) == h && f.dim(3) == w) ? f : ad::resize_bilinear(f, h, w);
  };
  const auto td = to_tokens(proj_d(fit(f_d)));
  const auto tp = to_tokens(proj_p(fit(f_p)));
  const auto p = block_p(tp, td, temb);
  const auto d = block_d(td, p.tokens, temb);
  return {from_tokens(d.tokens, h, w), from_tokens(p.tokens, h, w), p.attention, d.attention};
}

template <typename Scalar>
void XFormer<Scalar>::collect(std::vector<Parameter<Scalar>*>& out) {
  proj_d.collect(out);
  proj_p.collect(out);
  block_p.collect(out);
  block_d.collect(out);
}

// ---------------------------------------------------------------------------
// Segmentor

template <typename Scalar>
Segmentor<Scalar>::Segmentor(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).substream(1);
  const auto [c0, c1, c2, c3] = cfg.seg_channels;
  e1a_ = Conv<Scalar>("seg.e1a", cfg.in_channels, c0, 3, rng);
  e1b_ = Conv<Scalar>("seg.e1b", c0, c0, 3, rng);
  e2a_ = Conv<Scalar>("seg.e2a", c0, c1, 3, rng);
  e2b_ = Conv<Scalar>("seg.e2b", c1, c1, 3, rng);
  e3a_ = Conv<Scalar>("seg.e3a", c1, c2, 3, rng);
  e3b_ = Conv<Scalar>("seg.e3b", c2, c2, 3, rng);
  ma_ = Conv<Scalar>("seg.ma", c2, c3, 3, rng);
  mb_ = Conv<Scalar>("seg.mb", c3, c3, 3, rng);
  d3_ = Conv<Scalar>("seg.d3", c3 + c2, c2, 3, rng);
  d2_ = Conv<Scalar>("seg.d2", c2 + c1, c1, 3, rng);
  d1_ = Conv<Scalar>("seg.d1", c1 + c0, c0, 3, rng);
  head_ = Conv<Scalar>("seg.head", c0, cfg.sigmoid_head() ? 1 : cfg.classes + 1, 1, rng);
}

template <typename Scalar>
SegmentorOutput<Scalar> Segmentor<Scalar>::forward(const Var<Scalar>& image) {
  ad::require(image.shape() == ad::Shape{image.dim(0), cfg_.in_channels, cfg_.size, cfg_.size},
              "Segmentor: expected image [N, " + std::to_string(cfg_.in_channels) + ", " + std::to_string(cfg_.size) + ", " +
                  std::to_string(cfg_.size) + "], got " + ad::to_string(image.shape()));
  using ad::silu;
  const auto x1 = silu(e1b_(silu(e1a_(image))));
  const auto x2 = silu(e2b_(silu(e2a_(ad::avg_pool2(x1)))));
  const auto x3 = silu(e3b_(silu(e3a_(ad::avg_pool2(x2)))));
  const auto mid = silu(mb_(silu(ma_(ad::avg_pool2(x3)))));
  const auto u3 = silu(d3_(ad::concat<Scalar>({ad::upsample2(mid), x3}, 1)));
  const auto u2 = silu(d2_(ad::concat<Scalar>({ad::upsample2(u3), x2}, 1)));
  const auto u1 = silu(d1_(ad::concat<Scalar>({ad::upsample2(u2), x1}, 1)));
  const auto logits = head_(u1);
  return {cfg_.sigmoid_head() ? ad::sigmoid(logits) : ad::softmax(logits, 1), mid};
}

template <typename Scalar>
Var<Scalar> Segmentor<Scalar>::class_probs(const Var<Scalar>& probs, bool sigmoid_head) {
  if (!sigmoid_head)
    return probs;
  return ad::concat<Scalar>({ad::add_scalar(ad::scale(probs, Scalar(-1)), Scalar(1)), probs}, 1);
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> Segmentor<Scalar>::params() {
  std::vector<Parameter<Scalar>*> out;
  for (auto* c : {&e1a_, &e1b_, &e2a_, &e2b_, &e3a_, &e3b_, &ma_, &mb_, &d3_, &d2_, &d1_, &head_})
    c->collect(out);
  return out;
}

template <typename Scalar>
bitops::ModelDescription Segmentor<Scalar>::describe() const {
  const auto [c0, c1, c2, c3] = cfg_.seg_channels;
  const Index p0 = cfg_.size * cfg_.size, p1 = p0 / 4, p2 = p1 / 4, p3 = p2 / 4;
  return {"segmentor",
          {conv_spec("seg.e1a", p0, cfg_.in_channels, 3, c0, false), conv_spec("seg.e1b", p0, c0, 3, c0, false),
           conv_spec("seg.e2a", p1, c0, 3, c1, false), conv_spec("seg.e2b", p1, c1, 3, c1, false),
           conv_spec("seg.e3a", p2, c1, 3, c2, false), conv_spec("seg.e3b", p2, c2, 3, c2, false),
           conv_spec("seg.ma", p3, c2, 3, c3, false), conv_spec("seg.mb", p3, c3, 3, c3, false),
           conv_spec("seg.d3", p2, c3 + c2, 3, c2, false), conv_spec("seg.d2", p1, c2 + c1, 3, c1, false),
           conv_spec("seg.d1", p0, c1 + c0, 3, c0, false),
           conv_spec("seg.head", p0, c0, 1, cfg_.sigmoid_head() ? 1 : cfg_.classes + 1, false)}};
}

// ---------------------------------------------------------------------------
// Refiner

template <typename Scalar>
Refiner<Scalar>::Refiner(const ModelConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).substream(2);
  const auto [r0, r1, r2] = cfg.ref_channels;
  const Index k = cfg.mask_channels(), td = cfg.time_dim;
  const bool bin = cfg.binarized, bin_io = cfg.binarized && !cfg.real_io;
  time1_ = Linear<Scalar>("ref.time1", td, td, rng);
  time2_ = Linear<Scalar>("ref.time2", td, td, rng);
  in_ = TimeConvBlock<Scalar>("ref.in", 2 * k + cfg.in_channels, r0, td, bin_io, rng);
  enc1_ = TimeConvBlock<Scalar>("ref.enc1", r0, r0, td, bin, rng);
  enc2_ = TimeConvBlock<Scalar>("ref.enc2", r0, r1, td, bin, rng);
  mid_ = TimeConvBlock<Scalar>("ref.mid", r1, r2, td, bin, rng);
  dec2_ = TimeConvBlock<Scalar>("ref.dec2", r2 + r1, r1, td, bin, rng);
  dec1_ = TimeConvBlock<Scalar>("ref.dec1", r1 + r0, r0, td, bin, rng);
  out_ = Conv<Scalar>("ref.out", r0, k, 1, rng);
  if (bin_io)
    out_cond_ = TimeCondMap<Scalar>("ref.out.cond", td, r0, 0, rng);
  if (cfg.xformer) {
    bridge_ = XFormer<Scalar>(cfg.seg_channels[3], r2, cfg, rng);
    inject_ = Conv<Scalar>("ref.inject", cfg.attn_dim, r2, 1, rng);
  }
}

template <typename Scalar>
RefinerOutput<Scalar> Refiner<Scalar>::forward(const Var<Scalar>& latent, const std::vector<int>& t, const Var<Scalar>& prior,
                                               const Var<Scalar>& image, const Var<Scalar>& seg_feature) {
  const Index n = latent.dim(0), k = cfg_.mask_channels();
  const ad::Shape mask_shape{n, k, cfg_.size, cfg_.size};
  ad::require(latent.shape() == mask_shape && prior.shape() == mask_shape,
              "Refiner: expected latent and prior " + ad::to_string(mask_shape) + ", got " + ad::to_string(latent.shape()) +
                  " and " + ad::to_string(prior.shape()));
  ad::require(image.shape() == ad::Shape{n, cfg_.in_channels, cfg_.size, cfg_.size}, "Refiner: image shape mismatch");
  ad::require(static_cast<Index>(t.size()) == n, "Refiner: need one step per sample");
  auto& tape = latent.tape();
  const auto temb =
      ad::silu(time2_(ad::silu(time1_(tape.constant(timestep_embedding<Scalar>(t, cfg_.time_dim))))));

  const auto h0 = in_(ad::concat<Scalar>({latent, prior, image}, 1), temb);
  const auto s1 = enc1_(h0, temb);
  const auto s2 = enc2_(ad::avg_pool2(s1), temb);
  const auto f_p = mid_(ad::avg_pool2(s2), temb);
  RefinerOutput<Scalar> out;
  out.feature = f_p;
  Var<Scalar> h = f_p;
  if (cfg_.xformer) {
    ad::require(seg_feature.valid(), "Refiner: the bridge needs the segmentor feature");
    out.bridge = bridge_(seg_feature, f_p, temb);
    auto injected = inject_(out.bridge.d_prime);
    if (injected.dim(2) != f_p.dim(2) || injected.dim(3) != f_p.dim(3))
      injected = ad::resize_bilinear(injected, f_p.dim(2), f_p.dim(3));
    h = ad::add(f_p, injected);
  }
  const auto u2 = dec2_(ad::concat<Scalar>({ad::upsample2(h), s2}, 1), temb);
  const auto u1 = dec1_(ad::concat<Scalar>({ad::upsample2(u2), s1}, 1), temb);
  Var<Scalar> logits;
  if (cfg_.binarized && !cfg_.real_io) {
    const auto c = out_cond_(temb);
    logits = bitops::binary_conv2d(bitops::tb_binarize(u1, c.alpha), tape.param(out_.weight), tape.param(out_.bias));
  } else {
    logits = out_(u1);
  }
  out.eps_hat = ad::sigmoid(logits);
  return out;
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> Refiner<Scalar>::params() {
  std::vector<Parameter<Scalar>*> out;
  time1_.collect(out);
  time2_.collect(out);
  for (auto* b : {&in_, &enc1_, &enc2_, &mid_, &dec2_, &dec1_})
    b->collect(out);
  out_.collect(out);
  if (cfg_.binarized && !cfg_.real_io)
    out_cond_.collect(out);
  if (cfg_.xformer) {
    bridge_.collect(out);
    inject_.collect(out);
  }
  return out;
}

template <typename Scalar>
bitops::ModelDescription Refiner<Scalar>::describe() const {
  const auto [r0, r1, r2] = cfg_.ref_channels;
  const Index k = cfg_.mask_channels(), td = cfg_.time_dim;
  const Index p0 = cfg_.size * cfg_.size, p1 = p0 / 4, p2 = p1 / 4;
  const bool bin = cfg_.binarized, bin_io = cfg_.binarized && !cfg_.real_io;
  bitops::ModelDescription d{"refiner",
                             {matmul_spec("ref.time1", 1, td, td), matmul_spec("ref.time2", 1, td, td),
                              conv_spec("ref.in", p0, 2 * k + cfg_.in_channels, 3, r0, bin_io),
                              conv_spec("ref.enc1", p0, r0, 3, r0, bin), conv_spec("ref.enc2", p1, r0, 3, r1, bin),
                              conv_spec("ref.mid", p2, r1, 3, r2, bin), conv_spec("ref.dec2", p1, r2 + r1, 3, r1, bin),
                              conv_spec("ref.dec1", p0, r1 + r0, 3, r0, bin), conv_spec("ref.out", p0, r0, 1, k, bin_io)}};
  if (cfg_.xformer) {
    // Bridge tokens live on the refiner bottleneck grid, which is the larger one.
    const Index tokens = p2, a = cfg_.attn_dim, heads = cfg_.heads, dh = a / heads, f = a * cfg_.ffn_mult;
    d.layers.push_back(conv_spec("xformer.proj_d", tokens, cfg_.seg_channels[3], 1, a, false));
    d.layers.push_back(conv_spec("xformer.proj_p", tokens, r2, 1, a, false));
    for (const std::string b : {"xformer.block_p", "xformer.block_d"}) {
      for (const char* w : {".q", ".k", ".v", ".o"})
        d.layers.push_back(matmul_spec(b + w, tokens, a, a, bin));
      d.layers.push_back(matmul_spec(b + ".scores", heads * tokens, dh, tokens));
      d.layers.push_back(matmul_spec(b + ".mix", heads * tokens, tokens, dh));
      d.layers.push_back(matmul_spec(b + ".ffn_in", tokens, a, f, bin));
      d.layers.push_back(matmul_spec(b + ".ffn_out", tokens, f, a, bin));
    }
    d.layers.push_back(conv_spec("ref.inject", tokens, a, 1, r2, false));
  }
  return d;
}

template <typename Scalar>
ReferenceModels<Scalar> build_reference_models(const ModelConfig& cfg) {
  return {Segmentor<Scalar>(cfg), Refiner<Scalar>(cfg)};
}

#define HIDIFF_INSTANTIATE(S)                                                                  \
  template Tensor<S> timestep_embedding<S>(const std::vector<int>&, Index);                    \
  template struct Conv<S>;                                                                     \
  template struct Linear<S>;                                                                   \
  template struct LayerNorm<S>;                                                                \
  template struct TimeCondMap<S>;                                                              \
  template struct TimeConvBlock<S>;                                                            \
  template struct TokenLinear<S>;                                                              \
  template struct CrossBlock<S>;                                                               \
  template struct XFormer<S>;                                                                  \
  template class Segmentor<S>;                                                                 \
  template class Refiner<S>;                                                                   \
  template ReferenceModels<S> build_reference_models<S>(const ModelConfig&);

HIDIFF_INSTANTIATE(float)
HIDIFF_INSTANTIATE(double)

} // namespace hidiff::models
