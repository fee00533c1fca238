#pragma once

// Segmentor pre-training, alternate training of refiner and segmentor, and
// sampling from the trained pair.

#include "hidiff/evalio.hpp"
#include "hidiff/losses.hpp"
#include "hidiff/models.hpp"
#include "hidiff/schedule.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hidiff::pipeline {

using Real = float;

enum class Sampler { Ddpm, Ddim };
enum class FinalDraw { Threshold, Sample };

Sampler parse_sampler(const std::string& name);
std::string to_string(Sampler s);
FinalDraw parse_final_draw(const std::string& name);
std::string to_string(FinalDraw d);

/// Probabilities from the segmentor are kept this far from {0, 1} before
/// they enter the diffusion kernel, so every posterior is well defined.
inline constexpr double kPriorClamp = 1e-4;

struct TrainConfig {
  int T = 10;
  int sampler_steps = 10;
  int batch = 32;
  int pretrain_iters = 2000;
  int train_iters = 2000;
  int warmup_iters = 0;  // refiner-only iterations before alternation starts
  double lr = 1e-4;
  double weight_decay = 0.01;
  losses::LossWeights weights;
  std::uint64_t seed = 0;
  FinalDraw final_draw = FinalDraw::Threshold;
  models::ModelConfig model;

  void validate() const;
};

/// Flat key=value form, used for checkpoint headers, run logs and config files.
std::vector<std::pair<std::string, std::string>> to_kv(const TrainConfig& c);
/// Applies recognised keys onto `base`; unknown keys throw.
TrainConfig from_kv(const std::map<std::string, std::string>& kv, TrainConfig base = {});

class TrainingDiverged : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Networks, optimizer moments, schedule and progress counters.
struct Checkpoint {
  TrainConfig config;
  NoiseSchedule schedule;
  models::Segmentor<Real> segmentor;
  models::Refiner<Real> refiner;
  ad::OptimizerState<Real> seg_opt, ref_opt;
  long pretrain_done = 0;  // segmentor-only iterations completed
  long train_done = 0;     // alternate iterations completed (warmup included)

  /// Fresh networks and optimizer state for `config`.
  static Checkpoint initial(const TrainConfig& config);
  /// Keeps the segmentor (weights, optimizer moments, progress) of `seg` and
  /// starts a fresh refiner under `config`. Throws if the segmentor shape
  /// settings differ.
  static Checkpoint from_segmentor(const Checkpoint& seg, const TrainConfig& config);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  void write(std::ostream& os) const;
  static Checkpoint read(std::istream& is);
};

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  ad::Tensor<Real> image;   // [B, 1, H, W]
  ad::Tensor<Real> mask;    // [B, K, H, W] diffused channels of y0
  ad::Tensor<Real> target;  // [B, C+1, H, W] one-hot classes for the discriminative loss
  std::vector<int> index;
};

Batch make_batch(const evalio::Dataset& data, const std::vector<int>& index, const models::ModelConfig& cfg);

/// Sample indices of the segmentor update with global count `iteration`.
/// Shared by pre-training and alternate training, so both see the same
/// order for the same seed.
std::vector<int> batch_indices(std::uint64_t seed, long iteration, int dataset_size, int batch);

// ---------------------------------------------------------------------------
// Training

struct PretrainRecord {
  long iteration;
  double disc;
};

struct TrainRecord {
  long iteration;
  double diff_g;    // L_Diff at the refiner update
  double disc;      // L_Disc at the segmentor update
  double diff_f;    // L_Diff at the segmentor update
  double hybrid;
  double seg_delta_during_g;  // max |Δθ_f| across the refiner half-step
  double ref_delta_during_f;  // max |Δθ_g| across the segmentor half-step
  bool warmup;
};

using Progress = std::function<void(long iteration, double loss)>;

/// Runs `iters` further segmentor-only iterations on the discriminative loss.
void pretrain_segmentor(Checkpoint& ck, const evalio::Dataset& data, long iters,
                        std::vector<PretrainRecord>* curve = nullptr, const Progress& progress = {});

/// Runs `iters` further iterations. Until `warmup_iters` have been done only
/// the refiner is updated; after that each iteration updates the refiner
/// with the segmentor frozen, then the segmentor on the hybrid loss with the
/// refiner frozen, on the same batch, steps and noise.
void train_alternate(Checkpoint& ck, const evalio::Dataset& data, long iters, std::vector<TrainRecord>* curve = nullptr,
                     const Progress& progress = {});

void write_pretrain_csv(std::ostream& os, const std::vector<PretrainRecord>& curve);
void write_train_csv(std::ostream& os, const std::vector<TrainRecord>& curve);

// ---------------------------------------------------------------------------
// Inference

struct InferenceOptions {
  Sampler sampler = Sampler::Ddim;
  int steps = 10;  // 0 returns the initial draw from the prior
  std::uint64_t seed = 0;
  FinalDraw final_draw = FinalDraw::Threshold;
  bool trajectory = false;
  int batch = 16;
};

struct Inference {
  ProbMap<Real> prior;                 // K channels
  BinaryMask refined;                  // K channels, final bits
  evalio::LabelMap prior_labels;       // thresholded / argmax prior
  evalio::LabelMap refined_labels;
  std::vector<BinaryMask> trajectory;  // y_T, ..., y_0 when requested
};

/// `images` is [N, 1, H, W]; `ids` gives each image its random substream
/// (defaults to 0..N-1), so results do not depend on batching. Parameters
/// are only read.
std::vector<Inference> infer(Checkpoint& ck, const ad::Tensor<Real>& images, const InferenceOptions& opt,
                             std::vector<std::uint64_t> ids = {});

struct Evaluation {
  evalio::MetricReport prior, refined;
  evalio::MetricReport prior_small, refined_small;  // samples with a small ground-truth component
  std::vector<double> prior_dice, refined_dice;     // per sample, class-mean
  std::vector<bool> small;
};

Evaluation evaluate(Checkpoint& ck, const evalio::Dataset& data, const InferenceOptions& opt);

ad::Tensor<Real> images_tensor(const evalio::Dataset& data, const std::vector<int>& index);

} // namespace hidiff::pipeline
