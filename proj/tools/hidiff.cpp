// hidiff command-line tool: data generation, training, sampling, evaluation
// and the binarized GEMM benchmark.

#include "hidiff/bitops.hpp"
#include "hidiff/evalio.hpp"
#include "hidiff/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace hidiff;
using pipeline::Checkpoint;
using pipeline::TrainConfig;

namespace {

const char* const kVersion = HIDIFF_VERSION " (" HIDIFF_GIT_DESCRIBE ")";

/// Bad flag values or combinations found after parsing; exit code 1.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename F>
auto usage_checked(F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

// --config FILE: flat key=value lines, keys are flag names with or without
// the leading dashes; '_' and '-' are interchangeable. The values are
// inserted right after the subcommand, so flags given later win.
std::vector<std::string> config_args(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw UsageError("cannot read config file " + path.string());
  std::vector<std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty() || line[0] == '#')
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    while (!key.empty() && key[0] == '-')
      key.erase(0, 1);
    std::replace(key.begin(), key.end(), '_', '-');
    out.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return out;
}

std::vector<std::string> expand_args(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::vector<std::string> file_args;
  for (std::size_t i = 1; i < args.size();) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size())
        throw UsageError("--config requires a file");
      auto more = config_args(args[i + 1]);
      file_args.insert(file_args.end(), more.begin(), more.end());
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      auto more = config_args(args[i].substr(9));
      file_args.insert(file_args.end(), more.begin(), more.end());
      args.erase(args.begin() + static_cast<long>(i));
    } else {
      ++i;
    }
  }
  auto sub = std::find_if(args.begin() + 1, args.end(), [](const std::string& a) { return !a.empty() && a[0] != '-'; });
  const auto at = sub == args.end() ? args.end() : sub + 1;
  args.insert(at, file_args.begin(), file_args.end());
  return args;
}

// Training flags are collected as strings and applied through the same
// key=value parser as checkpoint headers, onto a base config.
struct ConfigFlags {
  struct Entry {
    CLI::Option* opt;
    std::string key;
    std::string value;
  };
  std::vector<std::unique_ptr<Entry>> entries;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    static const auto defaults = [] {
      std::map<std::string, std::string> m;
      for (auto& [k, v] : pipeline::to_kv(TrainConfig{}))
        m[k] = v;
      return m;
    }();
    auto e = std::make_unique<Entry>();
    e->key = key;
    e->opt = app->add_option(flag, e->value, help + " (default " + defaults.at(key) + ")");
    entries.push_back(std::move(e));
  }

  TrainConfig apply(const TrainConfig& base) const {
    std::map<std::string, std::string> kv;
    for (const auto& e : entries)
      if (e->opt->count() > 0)
        kv[e->key] = e->value;
    // A shorter chain caps the stored default sampling length unless it is given too.
    if (kv.count("T") && !kv.count("sampler_steps")) {
      const auto t = usage_checked([&] { return pipeline::from_kv({{"T", kv.at("T")}}, base).T; });
      kv["sampler_steps"] = std::to_string(std::min(base.sampler_steps, t));
    }
    return usage_checked([&] {
      auto c = pipeline::from_kv(kv, base);
      c.validate();
      return c;
    });
  }
};

void add_model_flags(CLI::App* app, ConfigFlags& f) {
  f.add(app, "--seg-channels", "seg_channels", "segmentor widths, 4 comma-separated values");
  f.add(app, "--ref-channels", "ref_channels", "refiner widths, 3 comma-separated values");
  f.add(app, "--time-dim", "time_dim", "timestep embedding width");
  f.add(app, "--attn-dim", "attn_dim", "attention width");
  f.add(app, "--heads", "heads", "attention heads");
  f.add(app, "--ffn-mult", "ffn_mult", "feed-forward expansion");
  f.add(app, "--xformer", "xformer", "use the transformer bottleneck");
  f.add(app, "--binarized", "binarized", "binarize the refiner interior");
  f.add(app, "--real-io", "real_io", "keep refiner input/output convolutions real");
  f.add(app, "--batch", "batch", "mini-batch size");
  f.add(app, "--lr", "lr", "AdamW learning rate");
  f.add(app, "--weight-decay", "weight_decay", "AdamW weight decay");
  f.add(app, "--seed", "seed", "seed for initialisation, batches and noise");
}

void write_run_log(const fs::path& path, const std::string& command,
                   const std::vector<std::pair<std::string, std::string>>& settings) {
  std::ofstream os(path);
  os << "hidiff " << kVersion << "\n";
  os << "command " << command << "\n";
  for (const auto& [k, v] : settings)
    os << k << "=" << v << "\n";
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
}

fs::path sibling(const fs::path& file, const std::string& suffix) { return fs::path(file.string() + suffix); }

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path())
    fs::create_directories(file.parent_path());
}

// Progress on stdout: one line per tenth of the run.
pipeline::Progress progress_printer(const std::string& label, long total) {
  const long every = std::max(1L, total / 10);
  return [label, total, every](long done, double loss) {
    if (done % every == 0 || done == total)
      std::printf("%s %ld/%ld loss %.5f\n", label.c_str(), done, total, loss);
    std::fflush(stdout);
  };
}

template <typename T>
void write_hdt(const fs::path& path, const std::vector<std::uint32_t>& dims, const T* data) {
  std::ofstream os(path, std::ios::binary);
  evalio::hdt_write(os, evalio::dtype_of<T>(), dims, data);
  if (!os)
    throw std::runtime_error("cannot write " + path.string());
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const fs::path& out, const evalio::SynthConfig& cfg, int preview) {
  usage_checked([&] {
    cfg.validate();
    return 0;
  });
  if (preview < 0)
    throw UsageError("--preview must be >= 0");
  const auto data = evalio::gen_synthetic(cfg);
  evalio::save_dataset(data, out);
  for (int i = 0; i < std::min(preview, cfg.n); ++i) {
    const auto& s = data.samples[static_cast<std::size_t>(i)];
    char stem[32];
    std::snprintf(stem, sizeof stem, "preview_%03d", i);
    evalio::pgm_export_image(out / (std::string(stem) + "_image.pgm"), s.image, cfg.size, cfg.size);
    evalio::pgm_export_labels(out / (std::string(stem) + "_labels.pgm"), s.labels, cfg.classes);
  }
  write_run_log(out / "run.log", "gen-data",
                {{"n", std::to_string(cfg.n)},
                 {"size", std::to_string(cfg.size)},
                 {"classes", std::to_string(cfg.classes)},
                 {"small_rate", std::to_string(cfg.small_object_rate)},
                 {"noise", std::to_string(cfg.noise_level)},
                 {"seed", std::to_string(cfg.seed)}});
  const auto small = std::count_if(data.samples.begin(), data.samples.end(),
                                   [](const auto& s) { return s.has_small_object(); });
  std::printf("wrote %d samples (%ld with a small object) to %s\n", cfg.n, static_cast<long>(small), out.c_str());
  return 0;
}

int cmd_pretrain(const fs::path& data_dir, const fs::path& out, const std::string& init, const ConfigFlags& flags,
                 long iters) {
  const auto data = evalio::load_dataset(data_dir);
  Checkpoint ck;
  if (!init.empty()) {
    ck = Checkpoint::load(init);
    ck.config = flags.apply(ck.config);
  } else {
    TrainConfig base;
    base.model.size = data.size;
    base.model.classes = data.classes;
    auto cfg = flags.apply(base);
    ck = Checkpoint::initial(cfg);
  }
  if (iters < 0)
    throw UsageError("--iters must be >= 0");
  if (ck.config.model.size != data.size || ck.config.model.classes != data.classes)
    throw UsageError("dataset size/classes do not match the model configuration");
  ck.config.pretrain_iters = static_cast<int>(ck.pretrain_done + iters);

  ensure_parent(out);
  auto settings = pipeline::to_kv(ck.config);
  settings.insert(settings.begin(), {{"data", data_dir.string()}, {"iters", std::to_string(iters)}});
  write_run_log(sibling(out, ".log"), "pretrain", settings);

  std::vector<pipeline::PretrainRecord> curve;
  pipeline::pretrain_segmentor(ck, data, iters, &curve, progress_printer("pretrain", iters));
  ck.save(out);
  std::ofstream csv(sibling(out, ".loss.csv"));
  pipeline::write_pretrain_csv(csv, curve);
  std::printf("pretrained %ld iterations, final loss %.5f -> %s\n", iters, curve.empty() ? 0.0 : curve.back().disc,
              out.c_str());
  return 0;
}

int cmd_train(const fs::path& data_dir, const fs::path& seg_path, const fs::path& out, const ConfigFlags& flags,
              long iters) {
  const auto data = evalio::load_dataset(data_dir);
  const auto seg = Checkpoint::load(seg_path);
  const auto cfg = flags.apply(seg.config);
  if (iters < 0)
    throw UsageError("--iters must be >= 0");
  auto ck = usage_checked([&] { return Checkpoint::from_segmentor(seg, cfg); });
  if (cfg.model.size != data.size || cfg.model.classes != data.classes)
    throw UsageError("dataset size/classes do not match the model configuration");
  ck.config.train_iters = static_cast<int>(iters);

  ensure_parent(out);
  auto settings = pipeline::to_kv(ck.config);
  settings.insert(settings.begin(),
                  {{"data", data_dir.string()}, {"seg", seg_path.string()}, {"iters", std::to_string(iters)}});
  write_run_log(sibling(out, ".log"), "train", settings);

  std::vector<pipeline::TrainRecord> curve;
  pipeline::train_alternate(ck, data, iters, &curve, progress_printer("train", iters));
  ck.save(out);
  std::ofstream csv(sibling(out, ".loss.csv"));
  pipeline::write_train_csv(csv, curve);
  std::printf("trained %ld iterations, final hybrid loss %.5f -> %s\n", iters,
              curve.empty() ? 0.0 : curve.back().hybrid, out.c_str());
  return 0;
}

ad::Tensor<pipeline::Real> read_images(const fs::path& path, int size) {
  const auto rec = evalio::hdt_read_file(path);
  if (rec.dtype != evalio::DType::F32)
    throw UsageError(path.string() + ": expected f32 image data");
  const auto& d = rec.dims;
  ad::Index n = 1;
  if (d.size() == 4 && d[1] == 1)
    n = d[0];
  else if (d.size() == 3)
    n = d[0];
  else if (d.size() != 2)
    throw UsageError(path.string() + ": expected [H,W], [N,H,W] or [N,1,H,W]");
  const auto h = d[d.size() - 2], w = d[d.size() - 1];
  if (h != static_cast<std::uint32_t>(size) || w != static_cast<std::uint32_t>(size))
    throw UsageError(path.string() + ": images are " + std::to_string(h) + "x" + std::to_string(w) +
                     ", model expects " + std::to_string(size));
  return ad::Tensor<pipeline::Real>({n, 1, size, size}, rec.as<float>());
}

void export_prob(const fs::path& stem, const ProbMap<pipeline::Real>& p) {
  const auto& s = p.shape;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(s.plane()));
  for (Eigen::Index c = 0; c < s.channels; ++c) {
    for (Eigen::Index i = 0; i < s.plane(); ++i)
      px[static_cast<std::size_t>(i)] =
          static_cast<std::uint8_t>(std::lround(255.0 * std::clamp<double>(p.data[c * s.plane() + i], 0, 1)));
    evalio::pgm_write(stem.string() + "_c" + std::to_string(c) + ".pgm", s.height, s.width, px.data());
  }
}

int cmd_sample(const fs::path& ckpt, const fs::path& image, const fs::path& out, const std::string& sampler,
               int steps, std::uint64_t seed, bool trajectory, const std::string& final_draw, int index) {
  auto ck = Checkpoint::load(ckpt);
  pipeline::InferenceOptions opt;
  usage_checked([&] {
    opt.sampler = pipeline::parse_sampler(sampler);
    opt.final_draw = final_draw.empty() ? ck.config.final_draw : pipeline::parse_final_draw(final_draw);
    return 0;
  });
  opt.steps = steps < 0 ? ck.config.sampler_steps : steps;
  if (opt.steps > ck.config.T)
    throw UsageError("--steps must be in [0, T=" + std::to_string(ck.config.T) + "]");
  opt.seed = seed;
  opt.trajectory = trajectory;

  auto images = read_images(image, static_cast<int>(ck.config.model.size));
  std::vector<std::uint64_t> ids;
  if (index >= 0) {
    if (index >= images.dim(0))
      throw UsageError("--index out of range");
    const auto plane = images.numel() / images.dim(0);
    images = ad::Tensor<pipeline::Real>({1, 1, images.dim(2), images.dim(3)},
                                        Eigen::ArrayXf(images.data.segment(index * plane, plane)));
    ids.push_back(static_cast<std::uint64_t>(index));
  }
  const auto results = pipeline::infer(ck, images, opt, ids);

  fs::create_directories(out);
  const int classes = static_cast<int>(ck.config.model.classes);
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const auto id = ids.empty() ? i : ids[0];
    char name[32];
    std::snprintf(name, sizeof name, "img%03zu", static_cast<std::size_t>(id));
    const fs::path stem = out / name;
    const auto& s = r.refined.shape;
    const std::vector<std::uint32_t> kdims{static_cast<std::uint32_t>(s.channels), static_cast<std::uint32_t>(s.height),
                                           static_cast<std::uint32_t>(s.width)};
    const std::vector<std::uint32_t> ldims{static_cast<std::uint32_t>(s.height), static_cast<std::uint32_t>(s.width)};
    const Eigen::ArrayXf img = images.data.segment(static_cast<Eigen::Index>(i) * s.plane(), s.plane());
    evalio::pgm_export_image(stem.string() + "_image.pgm", img, s.height, s.width);
    write_hdt(stem.string() + "_prior.hdt", kdims, r.prior.data.data());
    write_hdt(stem.string() + "_refined.hdt", kdims, r.refined.data.data());
    write_hdt(stem.string() + "_labels.hdt", ldims, r.refined_labels.labels.data());
    export_prob(stem.string() + "_prior", r.prior);
    evalio::pgm_export_mask(stem.string() + "_refined", r.refined);
    evalio::pgm_export_labels(stem.string() + "_labels.pgm", r.refined_labels, classes);
    evalio::pgm_export_labels(stem.string() + "_prior_labels.pgm", r.prior_labels, classes);
    if (trajectory) {
      const auto steps_n = r.trajectory.size();
      Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> all(static_cast<Eigen::Index>(steps_n) * s.size());
      for (std::size_t k = 0; k < steps_n; ++k) {
        all.segment(static_cast<Eigen::Index>(k) * s.size(), s.size()) = r.trajectory[k].data;
        char tag[32];
        std::snprintf(tag, sizeof tag, "_traj%02zu", k);
        evalio::pgm_export_mask(stem.string() + tag, r.trajectory[k]);
      }
      auto tdims = kdims;
      tdims.insert(tdims.begin(), static_cast<std::uint32_t>(steps_n));
      write_hdt(stem.string() + "_trajectory.hdt", tdims, all.data());
    }
  }
  write_run_log(out / "run.log", "sample",
                {{"ckpt", ckpt.string()},
                 {"image", image.string()},
                 {"sampler", pipeline::to_string(opt.sampler)},
                 {"steps", std::to_string(opt.steps)},
                 {"seed", std::to_string(opt.seed)},
                 {"final_draw", pipeline::to_string(opt.final_draw)},
                 {"trajectory", trajectory ? "true" : "false"},
                 {"index", std::to_string(index)}});
  std::printf("sampled %zu image(s) with %s, %d steps -> %s\n", results.size(),
              pipeline::to_string(opt.sampler).c_str(), opt.steps, out.c_str());
  return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& data_dir, const fs::path& out, const std::string& sampler, int steps,
             std::uint64_t seed, const std::string& final_draw, int batch) {
  auto ck = Checkpoint::load(ckpt);
  pipeline::InferenceOptions opt;
  usage_checked([&] {
    opt.sampler = pipeline::parse_sampler(sampler);
    opt.final_draw = final_draw.empty() ? ck.config.final_draw : pipeline::parse_final_draw(final_draw);
    return 0;
  });
  opt.steps = steps < 0 ? ck.config.sampler_steps : steps;
  if (opt.steps > ck.config.T)
    throw UsageError("--steps must be in [0, T=" + std::to_string(ck.config.T) + "]");
  if (batch < 1)
    throw UsageError("--batch must be >= 1");
  opt.seed = seed;
  opt.batch = batch;
  const auto data = evalio::load_dataset(data_dir);
  if (data.size != ck.config.model.size || data.classes != ck.config.model.classes)
    throw UsageError("dataset size/classes do not match the checkpoint");

  const auto ev = pipeline::evaluate(ck, data, opt);
  ensure_parent(out);
  std::ofstream os(out);
  evalio::write_metric_csv(os, {{"prior", ev.prior},
                                {"refined", ev.refined},
                                {"prior_small", ev.prior_small},
                                {"refined_small", ev.refined_small}});
  if (!os)
    throw std::runtime_error("cannot write " + out.string());
  write_run_log(sibling(out, ".log"), "eval",
                {{"ckpt", ckpt.string()},
                 {"data", data_dir.string()},
                 {"sampler", pipeline::to_string(opt.sampler)},
                 {"steps", std::to_string(opt.steps)},
                 {"seed", std::to_string(opt.seed)},
                 {"final_draw", pipeline::to_string(opt.final_draw)}});
  std::printf("dice prior %.4f refined %.4f | small subset (%lld) prior %.4f refined %.4f -> %s\n", ev.prior.mean.dice,
              ev.refined.mean.dice, static_cast<long long>(ev.prior_small.samples), ev.prior_small.mean.dice,
              ev.refined_small.mean.dice, out.c_str());
  return 0;
}

int cmd_bench(Eigen::Index m, Eigen::Index k, Eigen::Index n, int repeat, std::uint64_t seed, const std::string& out) {
  if (m < 1 || k < 1 || n < 1 || repeat < 1)
    throw UsageError("--m, --k, --n and --repeat must be >= 1");
  const auto b = bitops::bench_gemm(m, k, n, repeat, seed);
  bitops::ModelDescription desc{"gemm",
                                {{"xnor_gemm", bitops::LayerKind::Matmul, m, k, n, true},
                                 {"float_gemm", bitops::LayerKind::Matmul, m, k, n, false}}};
  const auto costs = bitops::cost_report(desc);

  std::ostringstream table;
  table << std::setprecision(6);
  table << "path,m,k,n,seconds\n";
  table << "xnor_gemm," << m << "," << k << "," << n << "," << b.xnor_seconds << "\n";
  table << "float_gemm," << m << "," << k << "," << n << "," << b.float_seconds << "\n";
  table << "speedup," << b.speedup() << "\nidentical," << (b.identical ? "true" : "false") << "\n\n";
  bitops::write_cost_table(table, costs);
  if (out.empty()) {
    std::cout << table.str();
  } else {
    ensure_parent(out);
    std::ofstream os(out);
    os << table.str();
    if (!os)
      throw std::runtime_error("cannot write " + out);
  }
  std::printf("xnor %.4fs float %.4fs speedup %.2fx, results %s\n", b.xnor_seconds, b.float_seconds, b.speedup(),
              b.identical ? "identical" : "DIFFER");
  return b.identical ? 0 : 2;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid diffusion segmentation: synthetic data, training, sampling and evaluation."};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_file;
  app.add_option("--config", config_file, "flat key=value file; flags on the command line override it");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic segmentation dataset");
  fs::path gen_out;
  evalio::SynthConfig synth;
  int preview = 0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", synth.n, "number of samples")->capture_default_str();
  gen->add_option("--size", synth.size, "image side length")->capture_default_str();
  gen->add_option("--classes", synth.classes, "foreground classes")->capture_default_str();
  gen->add_option("--small-rate", synth.small_object_rate, "probability of an added small object")
      ->capture_default_str();
  gen->add_option("--noise", synth.noise_level, "Gaussian noise level")->capture_default_str();
  gen->add_option("--seed", synth.seed, "dataset seed")->capture_default_str();
  gen->add_option("--preview", preview, "also export the first N samples as PGM")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "train the segmentor on the discriminative loss");
  fs::path pre_data, pre_out;
  std::string pre_init;
  long pre_iters = TrainConfig{}.pretrain_iters;
  ConfigFlags pre_flags;
  pre->add_option("--data", pre_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--out", pre_out, "checkpoint to write")->required();
  pre->add_option("--init", pre_init, "continue from this checkpoint")->check(CLI::ExistingFile);
  pre->add_option("--iters", pre_iters, "iterations")->capture_default_str();
  add_model_flags(pre, pre_flags);
  pre_flags.add(pre, "--lambda-dice", "lambda_dice", "Dice weight in the discriminative loss");
  pre_flags.add(pre, "--lambda-focal", "lambda_focal", "focal weight");
  pre_flags.add(pre, "--gamma", "gamma", "focal exponent");

  // train
  auto* tr = app.add_subcommand("train", "alternate refiner / segmentor training from a pretrained segmentor");
  fs::path tr_data, tr_seg, tr_out;
  long tr_iters = TrainConfig{}.train_iters;
  ConfigFlags tr_flags;
  tr->add_option("--data", tr_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--seg", tr_seg, "pretrained segmentor checkpoint")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "checkpoint to write")->required();
  tr->add_option("--iters", tr_iters, "iterations")->capture_default_str();
  add_model_flags(tr, tr_flags);
  tr_flags.add(tr, "--T", "T", "diffusion steps");
  tr_flags.add(tr, "--sampler-steps", "sampler_steps", "default sampling steps stored in the checkpoint");
  tr_flags.add(tr, "--gamma", "gamma", "focal exponent");
  tr_flags.add(tr, "--lambda-dice", "lambda_dice", "Dice weight");
  tr_flags.add(tr, "--lambda-focal", "lambda_focal", "focal weight");
  tr_flags.add(tr, "--lambda-diff", "lambda_diff", "diffusion loss weight in the hybrid loss");
  tr_flags.add(tr, "--warmup-iters", "warmup_iters", "refiner-only iterations before alternation");
  tr_flags.add(tr, "--final-draw", "final_draw", "last sampling step: threshold or sample");

  // sample
  auto* sa = app.add_subcommand("sample", "refine masks for images with a trained checkpoint");
  fs::path sa_ckpt, sa_image, sa_out;
  std::string sa_sampler = "ddim", sa_final;
  int sa_steps = -1, sa_index = -1;
  std::uint64_t sa_seed = 0;
  bool sa_traj = false;
  sa->add_option("--ckpt", sa_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  sa->add_option("--image", sa_image, "HDT image file, [H,W] or [N,1,H,W]")->required()->check(CLI::ExistingFile);
  sa->add_option("--out", sa_out, "output directory")->required();
  sa->add_option("--sampler", sa_sampler, "ddpm or ddim")->capture_default_str();
  sa->add_option("--steps", sa_steps, "sampling steps (default: checkpoint setting)");
  sa->add_option("--seed", sa_seed, "sampling seed")->capture_default_str();
  sa->add_option("--index", sa_index, "only this image of a multi-image file");
  sa->add_option("--final-draw", sa_final, "threshold or sample (default: checkpoint setting)");
  sa->add_flag("--trajectory", sa_traj, "also write every intermediate mask");

  // eval
  auto* ev = app.add_subcommand("eval", "metrics of prior and refined masks on a dataset");
  fs::path ev_ckpt, ev_data, ev_out;
  std::string ev_sampler = "ddim", ev_final;
  int ev_steps = -1, ev_batch = 16;
  std::uint64_t ev_seed = 0;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", ev_out, "report CSV")->required();
  ev->add_option("--sampler", ev_sampler, "ddpm or ddim")->capture_default_str();
  ev->add_option("--steps", ev_steps, "sampling steps (default: checkpoint setting)");
  ev->add_option("--seed", ev_seed, "sampling seed")->capture_default_str();
  ev->add_option("--final-draw", ev_final, "threshold or sample (default: checkpoint setting)");
  ev->add_option("--batch", ev_batch, "images per forward pass")->capture_default_str();

  // bench-bitops
  auto* be = app.add_subcommand("bench-bitops", "time the packed XNOR GEMM against a float GEMM");
  Eigen::Index bm = 512, bk = 512, bn = 512;
  int brepeat = 3;
  std::uint64_t bseed = 0;
  std::string bout;
  be->add_option("--m", bm, "rows")->capture_default_str();
  be->add_option("--k", bk, "inner extent")->capture_default_str();
  be->add_option("--n", bn, "columns")->capture_default_str();
  be->add_option("--repeat", brepeat, "runs; the best time is kept")->capture_default_str();
  be->add_option("--seed", bseed, "operand seed")->capture_default_str();
  be->add_option("--out", bout, "write the table here instead of stdout");

  std::vector<std::string> args;
  try {
    args = expand_args(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::vector<const char*> cargv;
  for (const auto& a : args)
    cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen)
      return cmd_gen_data(gen_out, synth, preview);
    if (*pre)
      return cmd_pretrain(pre_data, pre_out, pre_init, pre_flags, pre_iters);
    if (*tr)
      return cmd_train(tr_data, tr_seg, tr_out, tr_flags, tr_iters);
    if (*sa)
      return cmd_sample(sa_ckpt, sa_image, sa_out, sa_sampler, sa_steps, sa_seed, sa_traj, sa_final, sa_index);
    if (*ev)
      return cmd_eval(ev_ckpt, ev_data, ev_out, ev_sampler, ev_steps, ev_seed, ev_final, ev_batch);
    if (*be)
      return cmd_bench(bm, bk, bn, brepeat, bseed, bout);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
