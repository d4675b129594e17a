#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nhvt/datapipe.hpp"
#include "nhvt/loss.hpp"
#include "nhvt/metrics.hpp"
#include "nhvt/models.hpp"
#include "nhvt/module.hpp"

namespace nhvt {

// ---- optimizer ----

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.001;
};

template <typename T>
struct OptimState {
  AdamWOptions options;
  std::int64_t step = 0;
  ParamStore<T> m, v;  // keyed like the parameters
};

// Decoupled weight decay:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T> params, AdamWOptions options = {});

  // Throws std::invalid_argument naming the first parameter without a gradient.
  void step(double lr);

  const OptimState<T>& state() const { return state_; }
  // Shapes and key set must match the parameters.
  void load_state(const OptimState<T>& s);

 private:
  ParamStore<T> params_;
  OptimState<T> state_;
};

// min_lr + (base_lr - min_lr)(1 + cos(pi step / total)) / 2; steps past
// `total` return min_lr.
double cosine_lr(std::int64_t step, std::int64_t total, double base_lr, double min_lr);

// ---- configuration ----

struct TrainConfig {
  double base_lr = -1;  // < 0: 0.005 for nucleihvt, 0.001 for cb_nucleihvt
  double min_lr = -1;   // < 0: base_lr / 100
  std::int64_t total_steps = 500;
  std::int64_t batch_size = 4;
  std::uint64_t seed = 0;
  std::int64_t eval_interval = 0;  // steps between checkpoints; 0 saves at the end only
  LossWeights loss;
  AdamWOptions adamw;
  double grad_clip = 0;  // global-norm clip; 0 disables
  AugmentPolicy augment;

  double resolved_base_lr(Variant v) const;
  double resolved_min_lr(Variant v) const;
  void validate() const;  // lists every problem in one std::invalid_argument
};

// ---- checkpoints ----
//
// "NHVT" | version byte | u64 LE header length | JSON header | blobs.
// The header lists every tensor (name, kind, shape, byte offset into the blob
// area); blobs are little-endian float32 in header order.

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  std::int64_t step = 0;
  std::uint64_t seed = 0;  // data-order and augmentation streams derive from (seed, step)
  std::optional<TrainConfig> train;
  ParamStore<float> params;
  ParamStore<float> buffers;
  std::optional<OptimState<float>> optim;
  std::optional<NormStats> norm;  // input normalisation the weights were trained with
};

Checkpoint capture(const SegmentationModel<float>& model);
std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);  // throws DataError
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);  // atomic replace
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint tensors into `model`. Without a prefix map every model
// parameter and buffer must be present with the same shape. With one, each
// checkpoint name starting with a key is renamed to start with the value,
// and only model tensors under the mapped prefixes are required.
// Throws DataError naming the first offending tensor.
void load_weights(SegmentationModel<float>& model, const Checkpoint& ckpt,
                  const std::map<std::string, std::string>& prefix_map = {});

// ---- training ----

struct LogEntry {
  std::int64_t step;  // 1-based
  double lr;
  double loss;
};

std::string format_log_line(const LogEntry& e);  // "step lr loss"

struct TrainHooks {
  // Runs after the step's checkpoint, if any, is on disk.
  std::function<void(const LogEntry&)> on_step;
  // Where to keep the latest good checkpoint; empty disables saving.
  std::filesystem::path checkpoint_path;
};

struct TrainResult {
  std::vector<LogEntry> log;
  Checkpoint final;  // state after the last finite step
  bool diverged = false;
  std::string message;
};

// Batches of cfg.batch_size drawn without replacement from a per-epoch
// permutation of `data`; every draw is keyed by (seed, step) so a resumed run
// replays the uninterrupted one. Samples hold [0, 1] images; augmentation
// runs before normalization with `norm`.
TrainResult train(SegmentationModel<float>& model, const std::vector<Sample>& data, const TrainConfig& cfg,
                  const NormStats& norm, const TrainHooks& hooks = {}, const Checkpoint* resume = nullptr);

// Indices of the samples in the batch of `step` (0-based).
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t step, std::int64_t batch_size,
                                       std::size_t dataset_size);

// Eval-mode forward per sample, argmax, confusion counts summed over the set.
MetricsReport evaluate(SegmentationModel<float>& model, const std::vector<Sample>& data, const NormStats& norm);

// Eval-mode prediction for one [0, 1] image; returns a one-channel mask.
Image predict(SegmentationModel<float>& model, const Tensorf& image, const NormStats& norm);

}  // namespace nhvt
