#include "hidiff/pipeline.hpp"

#include "hidiff/kernel.hpp"
#include "hidiff/kernel_ad.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace hidiff::pipeline {

using ad::Tensor;
using ad::Var;
using ParamList = std::vector<ad::Parameter<Real>*>;

// Stream tags for the independent random substreams of training.
namespace {
constexpr std::uint64_t kBatchStream = 0x62617463680001ULL;
constexpr std::uint64_t kWarmupStream = 0x7761726d750002ULL;
constexpr std::uint64_t kStepStream = 0x73746570730003ULL;
constexpr std::uint64_t kNoiseStream = 0x6e6f6973650004ULL;

Rng stream(std::uint64_t seed, std::uint64_t tag, long index) {
  return Rng(Rng::mix(seed ^ tag)).substream(static_cast<std::uint64_t>(index));
}
} // namespace

Sampler parse_sampler(const std::string& name) {
  if (name == "ddpm")
    return Sampler::Ddpm;
  if (name == "ddim")
    return Sampler::Ddim;
  throw std::invalid_argument("unknown sampler '" + name + "' (expected ddpm or ddim)");
}

std::string to_string(Sampler s) { return s == Sampler::Ddpm ? "ddpm" : "ddim"; }

FinalDraw parse_final_draw(const std::string& name) {
  if (name == "threshold")
    return FinalDraw::Threshold;
  if (name == "sample")
    return FinalDraw::Sample;
  throw std::invalid_argument("unknown final_draw '" + name + "' (expected threshold or sample)");
}

std::string to_string(FinalDraw d) { return d == FinalDraw::Threshold ? "threshold" : "sample"; }

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("TrainConfig: " + msg); };
  if (T < 1)
    fail("T must be >= 1");
  if (sampler_steps < 0 || sampler_steps > T)
    fail("sampler_steps must be in [0, T]");
  if (batch < 1)
    fail("batch must be >= 1");
  if (pretrain_iters < 0 || train_iters < 0 || warmup_iters < 0)
    fail("iteration counts must be >= 0");
  if (!(lr > 0) || !std::isfinite(lr))
    fail("lr must be positive and finite");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay))
    fail("weight_decay must be finite and >= 0");
  weights.validate();
  model.validate();
}

// ---------------------------------------------------------------------------
// key=value configuration

namespace {

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <std::size_t N>
std::string fmt_list(const std::array<ad::Index, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i)
    s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw std::invalid_argument("config: bad value for " + key + ": '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes")
    return true;
  if (v == "false" || v == "0" || v == "off" || v == "no")
    return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

template <std::size_t N>
std::array<ad::Index, N> parse_list(const std::string& key, const std::string& v) {
  std::array<ad::Index, N> out{};
  std::istringstream is(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(is, item, ',')) {
    if (i == N)
      throw std::invalid_argument("config: " + key + " takes " + std::to_string(N) + " values");
    out[i++] = parse_number<ad::Index>(key, item);
  }
  if (i != N)
    throw std::invalid_argument("config: " + key + " takes " + std::to_string(N) + " values");
  return out;
}

} // namespace

std::vector<std::pair<std::string, std::string>> to_kv(const TrainConfig& c) {
  const auto& m = c.model;
  return {{"T", std::to_string(c.T)},
          {"sampler_steps", std::to_string(c.sampler_steps)},
          {"batch", std::to_string(c.batch)},
          {"pretrain_iters", std::to_string(c.pretrain_iters)},
          {"train_iters", std::to_string(c.train_iters)},
          {"warmup_iters", std::to_string(c.warmup_iters)},
          {"lr", fmt(c.lr)},
          {"weight_decay", fmt(c.weight_decay)},
          {"gamma", fmt(c.weights.gamma)},
          {"lambda_dice", fmt(c.weights.lambda_dice)},
          {"lambda_focal", fmt(c.weights.lambda_focal)},
          {"lambda_diff", fmt(c.weights.lambda_diff)},
          {"seed", std::to_string(c.seed)},
          {"final_draw", to_string(c.final_draw)},
          {"size", std::to_string(m.size)},
          {"classes", std::to_string(m.classes)},
          {"seg_channels", fmt_list(m.seg_channels)},
          {"ref_channels", fmt_list(m.ref_channels)},
          {"time_dim", std::to_string(m.time_dim)},
          {"attn_dim", std::to_string(m.attn_dim)},
          {"heads", std::to_string(m.heads)},
          {"ffn_mult", std::to_string(m.ffn_mult)},
          {"xformer", m.xformer ? "true" : "false"},
          {"binarized", m.binarized ? "true" : "false"},
          {"real_io", m.real_io ? "true" : "false"}};
}

TrainConfig from_kv(const std::map<std::string, std::string>& kv, TrainConfig c) {
  for (const auto& [k, v] : kv) {
    auto& m = c.model;
    if (k == "T")
      c.T = parse_number<int>(k, v);
    else if (k == "sampler_steps")
      c.sampler_steps = parse_number<int>(k, v);
    else if (k == "batch")
      c.batch = parse_number<int>(k, v);
    else if (k == "pretrain_iters")
      c.pretrain_iters = parse_number<int>(k, v);
    else if (k == "train_iters")
      c.train_iters = parse_number<int>(k, v);
    else if (k == "warmup_iters")
      c.warmup_iters = parse_number<int>(k, v);
    else if (k == "lr")
      c.lr = parse_number<double>(k, v);
    else if (k == "weight_decay")
      c.weight_decay = parse_number<double>(k, v);
    else if (k == "gamma")
      c.weights.gamma = parse_number<double>(k, v);
    else if (k == "lambda_dice")
      c.weights.lambda_dice = parse_number<double>(k, v);
    else if (k == "lambda_focal")
      c.weights.lambda_focal = parse_number<double>(k, v);
    else if (k == "lambda_diff")
      c.weights.lambda_diff = parse_number<double>(k, v);
    else if (k == "seed")
      c.seed = parse_number<std::uint64_t>(k, v);
    else if (k == "final_draw")
      c.final_draw = parse_final_draw(v);
    else if (k == "size")
      m.size = parse_number<ad::Index>(k, v);
    else if (k == "classes")
      m.classes = parse_number<ad::Index>(k, v);
    else if (k == "seg_channels")
      m.seg_channels = parse_list<4>(k, v);
    else if (k == "ref_channels")
      m.ref_channels = parse_list<3>(k, v);
    else if (k == "time_dim")
      m.time_dim = parse_number<ad::Index>(k, v);
    else if (k == "attn_dim")
      m.attn_dim = parse_number<ad::Index>(k, v);
    else if (k == "heads")
      m.heads = parse_number<ad::Index>(k, v);
    else if (k == "ffn_mult")
      m.ffn_mult = parse_number<ad::Index>(k, v);
    else if (k == "xformer")
      m.xformer = parse_bool(k, v);
    else if (k == "binarized")
      m.binarized = parse_bool(k, v);
    else if (k == "real_io")
      m.real_io = parse_bool(k, v);
    else
      throw std::invalid_argument("config: unknown key '" + k + "'");
  }
  c.model.seed = c.seed;
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint

Checkpoint Checkpoint::initial(const TrainConfig& config) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  ck.config.model.seed = config.seed;
  ck.schedule = cosine_schedule(config.T);
  ck.segmentor = models::Segmentor<Real>(ck.config.model);
  ck.refiner = models::Refiner<Real>(ck.config.model);
  const ad::AdamWConfig opt{config.lr, 0.9, 0.999, 1e-8, config.weight_decay};
  ck.seg_opt = ad::make_optimizer_state(ck.segmentor.params(), opt);
  ck.ref_opt = ad::make_optimizer_state(ck.refiner.params(), opt);
  return ck;
}

Checkpoint Checkpoint::from_segmentor(const Checkpoint& seg, const TrainConfig& config) {
  const auto& a = seg.config.model;
  const auto& b = config.model;
  if (a.size != b.size || a.classes != b.classes || a.in_channels != b.in_channels || a.seg_channels != b.seg_channels)
    throw std::invalid_argument("from_segmentor: segmentor settings (size, classes, seg_channels) must match the checkpoint");
  Checkpoint ck = initial(config);
  ck.segmentor = seg.segmentor;
  ck.seg_opt = seg.seg_opt;
  ck.pretrain_done = seg.pretrain_done;
  return ck;
}

namespace {

constexpr const char* kCheckpointMagic = "hidiff-checkpoint 1";

struct TensorRef {
  std::string name;
  evalio::DType dtype;
  std::vector<std::uint32_t> dims;
  const void* data;
  std::size_t bytes;
};

template <typename Scalar>
std::vector<std::uint32_t> dims_of(const ad::Shape& s) {
  std::vector<std::uint32_t> d;
  for (auto v : s)
    d.push_back(static_cast<std::uint32_t>(v));
  return d;
}

// Every tensor that a checkpoint carries, in a fixed order, with a setter
// for loading.
template <typename Visit>
void visit_tensors(Checkpoint& ck, Visit&& visit) {
  auto net = [&](const std::string& prefix, ParamList params, ad::OptimizerState<Real>& opt) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      visit(prefix + "param/" + p->name, p->value.shape, p->value.data);
      const ad::Shape flat{p->value.numel()};
      visit(prefix + "adam_m/" + p->name, flat, opt.first_moment[i]);
      visit(prefix + "adam_v/" + p->name, flat, opt.second_moment[i]);
    }
  };
  net("f/", ck.segmentor.params(), ck.seg_opt);
  net("g/", ck.refiner.params(), ck.ref_opt);
}

} // namespace

void Checkpoint::write(std::ostream& os) const {
  auto& self = const_cast<Checkpoint&>(*this);  // visit_tensors only reads here
  std::vector<TensorRef> refs;
  visit_tensors(self, [&](const std::string& name, const ad::Shape& shape, const ad::Array<Real>& data) {
    refs.push_back({name, evalio::DType::F32, dims_of<Real>(shape), data.data(), 0});
  });
  const auto& ab = schedule.alpha_bar_table();

  os << kCheckpointMagic << "\n";
  for (const auto& [k, v] : to_kv(config))
    os << "config." << k << "=" << v << "\n";
  os << "schedule.offset=" << fmt(schedule.offset()) << "\n";
  os << "pretrain_done=" << pretrain_done << "\n";
  os << "train_done=" << train_done << "\n";
  os << "f.opt_step=" << seg_opt.step << "\n";
  os << "g.opt_step=" << ref_opt.step << "\n";
  os << "tensors=" << refs.size() + 1 << "\n";
  os << "tensor schedule.alpha_bar f64 " << ab.size() << "\n";
  for (const auto& r : refs) {
    os << "tensor " << r.name << " f32";
    for (auto d : r.dims)
      os << ' ' << d;
    os << "\n";
  }
  os << "end\n";
  evalio::hdt_write(os, evalio::DType::F64, {static_cast<std::uint32_t>(ab.size())}, ab.data());
  for (const auto& r : refs)
    evalio::hdt_write(os, r.dtype, r.dims, r.data);
  if (!os)
    throw std::runtime_error("checkpoint: write failed");
}

Checkpoint Checkpoint::read(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic)
    throw evalio::FormatError("checkpoint: bad magic");
  std::map<std::string, std::string> cfg, meta;
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> directory;
  bool ended = false;
  while (std::getline(is, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      std::string name, dtype;
      ls >> name >> dtype;
      std::vector<std::uint32_t> dims;
      std::uint32_t d;
      while (ls >> d)
        dims.push_back(d);
      directory.emplace_back(name, dims);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw evalio::FormatError("checkpoint: malformed header line '" + line + "'");
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key.rfind("config.", 0) == 0)
      cfg[key.substr(7)] = value;
    else
      meta[key] = value;
  }
  if (!ended)
    throw evalio::FormatError("checkpoint: truncated header");

  Checkpoint ck = Checkpoint::initial(from_kv(cfg));
  auto meta_long = [&](const std::string& k) {
    auto it = meta.find(k);
    if (it == meta.end())
      throw evalio::FormatError("checkpoint: missing header field " + k);
    return parse_number<long>(k, it->second);
  };
  ck.pretrain_done = meta_long("pretrain_done");
  ck.train_done = meta_long("train_done");
  ck.seg_opt.step = meta_long("f.opt_step");
  ck.ref_opt.step = meta_long("g.opt_step");

  std::map<std::string, evalio::HdtRecord> records;
  for (const auto& [name, dims] : directory) {
    auto rec = evalio::hdt_read(is);
    if (rec.dims != dims)
      throw evalio::FormatError("checkpoint: payload for " + name + " does not match the directory");
    records.emplace(name, std::move(rec));
  }
  auto take = [&](const std::string& name) -> evalio::HdtRecord& {
    auto it = records.find(name);
    if (it == records.end())
      throw evalio::FormatError("checkpoint: missing tensor " + name);
    return it->second;
  };

  const auto ab = take("schedule.alpha_bar").as<double>();
  ck.schedule = NoiseSchedule::from_alpha_bar(ab, parse_number<double>("schedule.offset", meta.at("schedule.offset")));
  visit_tensors(ck, [&](const std::string& name, const ad::Shape& shape, ad::Array<Real>& data) {
    auto& rec = take(name);
    if (rec.dims != dims_of<Real>(shape))
      throw evalio::FormatError("checkpoint: shape mismatch for " + name);
    data = rec.as<Real>();
  });
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("checkpoint: cannot open " + path.string());
  write(os);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("checkpoint: cannot open " + path.string());
  return read(is);
}

// ---------------------------------------------------------------------------
// Batches

ad::Tensor<Real> images_tensor(const evalio::Dataset& data, const std::vector<int>& index) {
  const ad::Index s = data.size, plane = s * s, b = static_cast<ad::Index>(index.size());
  Tensor<Real> out({b, 1, s, s});
  for (ad::Index i = 0; i < b; ++i)
    out.data.segment(i * plane, plane) = data.samples.at(static_cast<std::size_t>(index[i])).image;
  return out;
}

Batch make_batch(const evalio::Dataset& data, const std::vector<int>& index, const models::ModelConfig& cfg) {
  if (data.size != cfg.size)
    throw std::invalid_argument("make_batch: dataset size " + std::to_string(data.size) + " does not match model size " +
                                std::to_string(cfg.size));
  if (data.classes != cfg.classes)
    throw std::invalid_argument("make_batch: dataset has " + std::to_string(data.classes) + " classes, model expects " +
                                std::to_string(cfg.classes));
  const ad::Index s = data.size, plane = s * s, b = static_cast<ad::Index>(index.size());
  const ad::Index k = cfg.mask_channels(), c = cfg.classes + 1;
  Batch out;
  out.index = index;
  out.image = images_tensor(data, index);
  out.mask = Tensor<Real>({b, k, s, s});
  out.target = Tensor<Real>({b, c, s, s});
  for (ad::Index i = 0; i < b; ++i) {
    const auto& labels = data.samples[static_cast<std::size_t>(index[i])].labels.labels;
    for (ad::Index ch = 0; ch < c; ++ch)
      out.target.data.segment((i * c + ch) * plane, plane) = (labels == static_cast<std::uint8_t>(ch)).cast<Real>();
    const ad::Index first = cfg.sigmoid_head() ? 1 : 0;
    for (ad::Index ch = 0; ch < k; ++ch)
      out.mask.data.segment((i * k + ch) * plane, plane) = (labels == static_cast<std::uint8_t>(ch + first)).cast<Real>();
  }
  return out;
}

std::vector<int> batch_indices(std::uint64_t seed, long iteration, int dataset_size, int batch) {
  if (dataset_size < 1)
    throw std::invalid_argument("batch_indices: empty dataset");
  Rng rng = stream(seed, kBatchStream, iteration);
  std::vector<int> out;
  if (batch <= dataset_size) {
    std::vector<int> pool(static_cast<std::size_t>(dataset_size));
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < batch; ++i) {
      const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(dataset_size - i)));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    for (int i = 0; i < batch; ++i)
      out.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(dataset_size))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

/// Marks parameters as frozen for the lifetime of the scope.
class Frozen {
public:
  explicit Frozen(ParamList ps) : ps_(std::move(ps)) {
    for (auto* p : ps_)
      p->trainable = false;
  }
  ~Frozen() {
    for (auto* p : ps_)
      p->trainable = true;
  }
  Frozen(const Frozen&) = delete;
  Frozen& operator=(const Frozen&) = delete;

private:
  ParamList ps_;
};

std::vector<ad::Array<Real>> snapshot(const ParamList& ps) {
  std::vector<ad::Array<Real>> out;
  out.reserve(ps.size());
  for (const auto* p : ps)
    out.push_back(p->value.data);
  return out;
}

double max_delta(const ParamList& ps, const std::vector<ad::Array<Real>>& before) {
  double worst = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (std::memcmp(ps[i]->value.data.data(), before[i].data(), sizeof(Real) * before[i].size()) == 0)
      continue;
    worst = std::max(worst, static_cast<double>((ps[i]->value.data - before[i]).abs().maxCoeff()));
    if (worst == 0)  // only signed zeros differ; still a change of bits
      worst = std::numeric_limits<double>::min();
  }
  return worst;
}

void zero_grads(const ParamList& ps) {
  for (auto* p : ps)
    p->zero_grad();
}

double checked(const Var<Real>& loss, const char* what, long iteration) {
  const double v = loss.item();
  if (!std::isfinite(v))
    throw TrainingDiverged(std::string("non-finite ") + what + " at iteration " + std::to_string(iteration));
  return v;
}

kernel::BatchSteps batch_steps(const NoiseSchedule& sched, const std::vector<int>& t) {
  kernel::BatchSteps s;
  for (int v : t) {
    const auto terms = lookup(sched, v);
    s.alpha.push_back(terms.alpha);
    s.alpha_bar_prev.push_back(terms.alpha_bar_prev);
  }
  return s;
}

Tensor<Real> clamp_prior(const Tensor<Real>& probs) {
  return Tensor<Real>(probs.shape, probs.data.max(Real(kPriorClamp)).min(Real(1.0 - kPriorClamp)));
}

/// Diffusion step and noise shared by both half-steps of an iteration.
struct NoiseDraw {
  std::vector<int> t;
  Tensor<Real> eps, latent;
};

NoiseDraw draw_noise(const Checkpoint& ck, const Tensor<Real>& mask, const Tensor<Real>& prior, long index) {
  const ad::Index b = mask.dim(0), k = mask.dim(1), s = mask.dim(2);
  Rng step_rng = stream(ck.config.seed, kStepStream, index);
  Rng noise_rng = stream(ck.config.seed, kNoiseStream, index);
  NoiseDraw d;
  d.eps = Tensor<Real>(mask.shape);
  d.latent = Tensor<Real>(mask.shape);
  const MapShape ms{s, s, k};
  const ad::Index per = ms.size();
  for (ad::Index i = 0; i < b; ++i) {
    const int t = 1 + static_cast<int>(step_rng.below(static_cast<std::uint64_t>(ck.config.T)));
    d.t.push_back(t);
    BinaryMask y0(ms, mask.data.segment(i * per, per).cast<std::uint8_t>());
    ProbMap<Real> f(ms, prior.data.segment(i * per, per));
    const auto ns = kernel::sample_noise_and_latent(y0, f, t, ck.schedule, noise_rng);
    d.eps.data.segment(i * per, per) = ns.eps.as<Real>();
    d.latent.data.segment(i * per, per) = ns.latent.as<Real>();
  }
  return d;
}

/// L_Diff = KL(q(y_{t-1} | y_t, y0, f) || p(y_{t-1} | y_t, |y_t - eps_hat|, f)) + lambda_F * Focal(eps, eps_hat).
Var<Real> diffusion_objective(const Var<Real>& latent, const Var<Real>& y0, const Var<Real>& prior, const Var<Real>& eps,
                              const Var<Real>& eps_hat, const kernel::BatchSteps& steps, const losses::LossWeights& w) {
  const auto q = kernel::posterior(latent, y0, prior, steps);
  const auto p = kernel::posterior(latent, kernel::soft_xor(latent, eps_hat), prior, steps);
  return losses::diffusion_loss(losses::bernoulli_kl(q, p), losses::focal_loss(eps, eps_hat, w.gamma), w);
}

struct SegmentorView {
  Tensor<Real> prior, feature;
};

SegmentorView segment_constant(Checkpoint& ck, const Tensor<Real>& image) {
  ad::Tape<Real> tape(false);
  const auto out = ck.segmentor.forward(tape.constant(image));
  return {clamp_prior(out.probs.value()), out.feature.value()};
}

/// Refiner update on L_Diff; the segmentor only contributes constants.
double refiner_half_step(Checkpoint& ck, const Batch& b, const SegmentorView& f, const NoiseDraw& nd) {
  const auto steps = batch_steps(ck.schedule, nd.t);
  const ParamList g = ck.refiner.params();
  ad::Tape<Real> tape;
  const auto latent = tape.constant(nd.latent);
  const auto prior = tape.constant(f.prior);
  const auto out =
      ck.refiner.forward(latent, nd.t, prior, tape.constant(b.image), tape.constant(f.feature));
  const auto loss = diffusion_objective(latent, tape.constant(b.mask), prior, tape.constant(nd.eps), out.eps_hat,
                                        steps, ck.config.weights);
  zero_grads(g);
  tape.backward(loss);
  ad::adamw_step(g, ck.ref_opt);
  return loss.item();
}

struct HybridTerms {
  double disc, diff, hybrid;
};

/// Segmentor update on L_Hybrid with the refiner frozen.
HybridTerms segmentor_half_step(Checkpoint& ck, const Batch& b, const NoiseDraw& nd) {
  const auto steps = batch_steps(ck.schedule, nd.t);
  const ParamList f = ck.segmentor.params();
  const Frozen freeze(ck.refiner.params());
  ad::Tape<Real> tape;
  const auto image = tape.constant(b.image);
  const auto seg = ck.segmentor.forward(image);
  const auto disc = losses::discriminative_loss(
      tape.constant(b.target), models::Segmentor<Real>::class_probs(seg.probs, ck.config.model.sigmoid_head()),
      ck.config.weights);
  const auto prior = ad::clamp(seg.probs, Real(kPriorClamp), Real(1.0 - kPriorClamp));
  const auto latent = tape.constant(nd.latent);
  const auto out = ck.refiner.forward(latent, nd.t, prior, image, seg.feature);
  const auto diff = diffusion_objective(latent, tape.constant(b.mask), prior, tape.constant(nd.eps), out.eps_hat, steps,
                                        ck.config.weights);
  const auto hybrid = losses::hybrid_loss(disc, diff, ck.config.weights);
  zero_grads(f);
  tape.backward(hybrid);
  ad::adamw_step(f, ck.seg_opt);
  return {disc.item(), diff.item(), hybrid.item()};
}

void sync_lr(Checkpoint& ck) {
  ck.seg_opt.config.lr = ck.config.lr;
  ck.seg_opt.config.weight_decay = ck.config.weight_decay;
  ck.ref_opt.config.lr = ck.config.lr;
  ck.ref_opt.config.weight_decay = ck.config.weight_decay;
}

} // namespace

void pretrain_segmentor(Checkpoint& ck, const evalio::Dataset& data, long iters, std::vector<PretrainRecord>* curve,
                        const Progress& progress) {
  if (data.samples.empty())
    throw std::invalid_argument("pretrain_segmentor: empty dataset");
  sync_lr(ck);
  const ParamList f = ck.segmentor.params();
  const int n = static_cast<int>(data.samples.size());
  for (long it = 0; it < iters; ++it) {
    const long global = ck.seg_opt.step;
    const auto batch = make_batch(data, batch_indices(ck.config.seed, global, n, ck.config.batch), ck.config.model);
    double loss_value;
    try {
      ad::Tape<Real> tape;
      const auto seg = ck.segmentor.forward(tape.constant(batch.image));
      const auto loss = losses::discriminative_loss(
          tape.constant(batch.target), models::Segmentor<Real>::class_probs(seg.probs, ck.config.model.sigmoid_head()),
          ck.config.weights);
      loss_value = checked(loss, "L_Disc", ck.pretrain_done);
      zero_grads(f);
      tape.backward(loss);
      ad::adamw_step(f, ck.seg_opt);
    } catch (const ad::NonFiniteError& e) {
      throw TrainingDiverged("pretraining iteration " + std::to_string(ck.pretrain_done) + ": " + e.what());
    }
    if (curve)
      curve->push_back({ck.pretrain_done, loss_value});
    if (progress)
      progress(ck.pretrain_done, loss_value);
    ++ck.pretrain_done;
  }
}

void train_alternate(Checkpoint& ck, const evalio::Dataset& data, long iters, std::vector<TrainRecord>* curve,
                     const Progress& progress) {
  if (data.samples.empty())
    throw std::invalid_argument("train_alternate: empty dataset");
  sync_lr(ck);
  const ParamList f = ck.segmentor.params(), g = ck.refiner.params();
  const int n = static_cast<int>(data.samples.size());
  for (long it = 0; it < iters; ++it) {
    const bool warmup = ck.train_done < ck.config.warmup_iters;
    // Warmup batches come from their own stream so the segmentor's batch
    // order is the same as in plain pre-training.
    const auto index = warmup ? batch_indices(ck.config.seed ^ kWarmupStream, ck.ref_opt.step, n, ck.config.batch)
                              : batch_indices(ck.config.seed, ck.seg_opt.step, n, ck.config.batch);
    const auto batch = make_batch(data, index, ck.config.model);
    TrainRecord rec{ck.train_done, 0, 0, 0, 0, 0, 0, warmup};
    try {
      const auto view = segment_constant(ck, batch.image);
      const auto nd = draw_noise(ck, batch.mask, view.prior, ck.ref_opt.step);

      const auto f_before = snapshot(f);
      rec.diff_g = refiner_half_step(ck, batch, view, nd);
      rec.seg_delta_during_g = max_delta(f, f_before);
      if (!std::isfinite(rec.diff_g))
        throw TrainingDiverged("non-finite L_Diff at iteration " + std::to_string(ck.train_done));

      if (!warmup) {
        const auto g_before = snapshot(g);
        const auto terms = segmentor_half_step(ck, batch, nd);
        rec.ref_delta_during_f = max_delta(g, g_before);
        rec.disc = terms.disc;
        rec.diff_f = terms.diff;
        rec.hybrid = terms.hybrid;
        if (!std::isfinite(rec.hybrid))
          throw TrainingDiverged("non-finite L_Hybrid at iteration " + std::to_string(ck.train_done));
      }
    } catch (const ad::NonFiniteError& e) {
      throw TrainingDiverged("training iteration " + std::to_string(ck.train_done) + ": " + e.what());
    }
    if (curve)
      curve->push_back(rec);
    if (progress)
      progress(ck.train_done, warmup ? rec.diff_g : rec.hybrid);
    ++ck.train_done;
  }
}

void write_pretrain_csv(std::ostream& os, const std::vector<PretrainRecord>& curve) {
  os << "iteration,disc\n" << std::setprecision(9);
  for (const auto& r : curve)
    os << r.iteration << ',' << r.disc << '\n';
}

void write_train_csv(std::ostream& os, const std::vector<TrainRecord>& curve) {
  os << "iteration,warmup,diff_g,disc,diff_f,hybrid,seg_delta_during_g,ref_delta_during_f\n" << std::setprecision(9);
  for (const auto& r : curve)
    os << r.iteration << ',' << (r.warmup ? 1 : 0) << ',' << r.diff_g << ',' << r.disc << ',' << r.diff_f << ','
       << r.hybrid << ',' << r.seg_delta_during_g << ',' << r.ref_delta_during_f << '\n';
}

// ---------------------------------------------------------------------------
// Inference

namespace {

/// Label per pixel from K mask channels: the sigmoid head reads its single
/// channel; otherwise channels are ranked by (bit, probability), so with
/// thresholded bits this is the argmax of the probabilities.
evalio::LabelMap to_labels(const BinaryMask& bits, const ProbMap<Real>& probs, bool sigmoid_head) {
  const auto h = bits.shape.height, w = bits.shape.width, k = bits.shape.channels, plane = h * w;
  evalio::LabelMap out(h, w);
  for (Eigen::Index i = 0; i < plane; ++i) {
    if (sigmoid_head) {
      out.labels[i] = bits.data[i];
      continue;
    }
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < k; ++c) {
      const auto bc = bits.data[c * plane + i], bb = bits.data[best * plane + i];
      if (bc > bb || (bc == bb && probs.data[c * plane + i] > probs.data[best * plane + i]))
        best = c;
    }
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

BinaryMask threshold(const ProbMap<Real>& p) {
  return BinaryMask(p.shape, (p.data > Real(0.5)).cast<std::uint8_t>());
}

} // namespace

std::vector<Inference> infer(Checkpoint& ck, const ad::Tensor<Real>& images, const InferenceOptions& opt,
                             std::vector<std::uint64_t> ids) {
  const auto& mc = ck.config.model;
  if (images.rank() != 4 || images.dim(1) != mc.in_channels || images.dim(2) != mc.size || images.dim(3) != mc.size)
    throw ad::ShapeMismatch("infer: expected images of shape [N, " + std::to_string(mc.in_channels) + ", " +
                            std::to_string(mc.size) + ", " + std::to_string(mc.size) + "], got " +
                            ad::to_string(images.shape));
  if (opt.steps < 0 || opt.steps > ck.schedule.steps())
    throw std::invalid_argument("infer: steps must be in [0, T]");
  if (opt.batch < 1)
    throw std::invalid_argument("infer: batch must be >= 1");
  const ad::Index n = images.dim(0), s = mc.size, k = mc.mask_channels(), plane = s * s;
  if (ids.empty()) {
    ids.resize(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), std::uint64_t{0});
  }
  if (static_cast<ad::Index>(ids.size()) != n)
    throw std::invalid_argument("infer: one id per image required");

  const MapShape ms{s, s, k};
  const ad::Index per_image = plane * mc.in_channels;
  const RespacedSchedule rs = opt.steps > 0 ? respace(ck.schedule, opt.steps) : RespacedSchedule{};
  std::vector<Inference> results(static_cast<std::size_t>(n));

  for (ad::Index start = 0; start < n; start += opt.batch) {
    const ad::Index b = std::min<ad::Index>(opt.batch, n - start);
    Tensor<Real> x({b, mc.in_channels, s, s}, images.data.segment(start * per_image, b * per_image));
    const auto view = segment_constant(ck, x);

    std::vector<Rng> rngs;
    std::vector<BinaryMask> y(static_cast<std::size_t>(b));
    std::vector<ProbMap<Real>> prior(static_cast<std::size_t>(b)), last(static_cast<std::size_t>(b));
    for (ad::Index i = 0; i < b; ++i) {
      auto& r = results[static_cast<std::size_t>(start + i)];
      rngs.emplace_back(Rng(opt.seed).substream(ids[static_cast<std::size_t>(start + i)]));
      prior[i] = ProbMap<Real>(ms, view.prior.data.segment(i * ms.size(), ms.size()));
      y[i] = kernel::sample(prior[i], rngs.back());
      last[i] = prior[i];
      r.prior = prior[i];
      if (opt.trajectory)
        r.trajectory.push_back(y[i]);
    }

    for (int step = opt.steps; step >= 1; --step) {
      const int original = rs.timesteps[static_cast<std::size_t>(step - 1)];
      Tensor<Real> latent({b, k, s, s});
      for (ad::Index i = 0; i < b; ++i)
        latent.data.segment(i * ms.size(), ms.size()) = y[i].as<Real>();
      ad::Tape<Real> tape(false);
      const auto out = ck.refiner.forward(tape.constant(latent), std::vector<int>(static_cast<std::size_t>(b), original),
                                          tape.constant(view.prior), tape.constant(x), tape.constant(view.feature));
      for (ad::Index i = 0; i < b; ++i) {
        const ProbMap<Real> eps_hat(ms, out.eps_hat.data().segment(i * ms.size(), ms.size()));
        last[i] = opt.sampler == Sampler::Ddpm ? kernel::calibrate(y[i], eps_hat, prior[i], step, rs.schedule)
                                               : kernel::ddim_mean(y[i], eps_hat, prior[i], step, rs.schedule);
        const bool final_step = step == 1;
        y[i] = final_step && opt.final_draw == FinalDraw::Threshold ? threshold(last[i])
                                                                    : kernel::sample(last[i], rngs[i]);
        if (opt.trajectory)
          results[static_cast<std::size_t>(start + i)].trajectory.push_back(y[i]);
      }
    }

    for (ad::Index i = 0; i < b; ++i) {
      auto& r = results[static_cast<std::size_t>(start + i)];
      r.refined = y[i];
      r.refined_labels = to_labels(y[i], last[i], mc.sigmoid_head());
      r.prior_labels = to_labels(threshold(prior[i]), prior[i], mc.sigmoid_head());
    }
  }
  return results;
}

Evaluation evaluate(Checkpoint& ck, const evalio::Dataset& data, const InferenceOptions& opt) {
  const int classes = static_cast<int>(ck.config.model.classes);
  evalio::MetricAccumulator prior(classes), refined(classes), prior_small(classes), refined_small(classes);
  Evaluation ev;
  const int n = static_cast<int>(data.samples.size());
  const int chunk = std::max(1, opt.batch);
  for (int start = 0; start < n; start += chunk) {
    std::vector<int> index;
    std::vector<std::uint64_t> ids;
    for (int i = start; i < std::min(n, start + chunk); ++i) {
      index.push_back(i);
      ids.push_back(static_cast<std::uint64_t>(i));
    }
    const auto results = infer(ck, images_tensor(data, index), opt, ids);
    for (std::size_t j = 0; j < results.size(); ++j) {
      const auto& gt = data.samples[static_cast<std::size_t>(index[j])].labels;
      const auto& r = results[j];
      prior.add(r.prior_labels, gt);
      refined.add(r.refined_labels, gt);
      ev.prior_dice.push_back(prior.sample_dice().back());
      ev.refined_dice.push_back(refined.sample_dice().back());
      const bool small = evalio::has_small_component(gt, evalio::kSmallObjectFraction);
      ev.small.push_back(small);
      if (small) {
        prior_small.add(r.prior_labels, gt);
        refined_small.add(r.refined_labels, gt);
      }
    }
  }
  ev.prior = prior.report();
  ev.refined = refined.report();
  ev.prior_small = prior_small.report();
  ev.refined_small = refined_small.report();
  return ev;
}

} // namespace hidiff::pipeline
