#pragma once

// Training and adaptation drivers.
//
// Flow: pretrain_source fits the full network on labeled source data, then
// train_esh fits the early segmentation head on the same data with the rest
// of the network frozen.  adapt_target clones none of this; it takes a model
// freshly loaded from a base checkpoint, injects low-rank adapters into the
// chosen encoder blocks, and fits only those factors on unlabeled target
// images against pseudo-labels from the model's own full-resolution path,
// while BN layers on the traversed paths re-estimate their statistics from
// target batches.  adapt_all_targets repeats that per domain from the same
// immutable base file.  Every loop is seed-deterministic: shuffle orders and
// sample selection come from streams derived off the run seed, so results
// are byte-reproducible and independent of domain processing order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "convlora/checkpoint.hpp"
#include "convlora/data.hpp"
#include "convlora/unet.hpp"

namespace convlora {

struct PretrainSpec {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EshSpec {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AdaptSpec {
  std::size_t epochs = 5;
  std::size_t batch_size = 2;  // batch statistics need at least two images
  double lr = 1e-4;
  std::size_t rank = 2;
  std::size_t target_sample_count = 10;
  std::vector<std::size_t> selector;  // 1-based encoder blocks; empty = all
  bool adabn = true;                  // re-estimate BN statistics on target
  bool full_pass = false;  // exact one-sweep statistics instead of running EMA
  double adabn_momentum = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainReport {
  std::vector<double> epoch_losses;  // mean batch loss per epoch

  double initial_loss() const { return epoch_losses.empty() ? 0.0 : epoch_losses.front(); }
  double final_loss() const { return epoch_losses.empty() ? 0.0 : epoch_losses.back(); }
};

struct PseudoLabelBatch {
  TensorF images;         // [N,1,H,W]
  TensorI pseudo_labels;  // [N,H,W], hard argmax of the full-path logits
};

struct EvalResult {
  std::vector<double> per_image_sds;
  std::vector<double> per_image_dice;
  double mean_sds = 0.0;
  double std_sds = 0.0;
  double mean_dice = 0.0;
  double std_dice = 0.0;
};

enum class EvalPath { FULL, ESH };

struct DomainAdaptResult {
  std::string domain_id;
  std::filesystem::path adapter_path;
  TrainReport report;
};

// Channel argmax: [N,C,H,W] logits to [N,H,W] labels, first maximum wins.
TensorI argmax_labels(const TensorF& logits);

// Full supervised pass over the source set; BN layers accumulate running
// statistics in TRAIN mode and the end state is snapshotted as the source
// reference.  Throws if the loss turns non-finite.
TrainReport pretrain_source(UNet<float>& net,
                            const std::vector<SegmentationSample>& train,
                            const PretrainSpec& spec);

// Fits the early segmentation head on labeled source data.  Everything
// outside the head is frozen and its BN layers stay in EVAL, so the
// full-resolution path is bit-identical before and after.
TrainReport train_esh(UNet<float>& net,
                      const std::vector<SegmentationSample>& train,
                      const EshSpec& spec);

// Hard labels from the full-resolution path under EVAL statistics; the
// model's BN modes are restored afterwards.
PseudoLabelBatch make_pseudo_labels(UNet<float>& net, const TensorF& images);

// Seeded uniform choice of `count` distinct indices from [0, pool_size).
std::vector<std::size_t> select_target_samples(std::size_t pool_size,
                                               std::size_t count,
                                               std::uint64_t seed);

// The encoder blocks an AdaptSpec selects, expanded against `depth`.
std::vector<std::size_t> resolve_selector(const AdaptSpec& spec, std::size_t depth);

// Unsupervised adaptation of `net` (freshly loaded from a base checkpoint)
// to one target domain: injects rank-`rank` adapters into the selected
// encoder blocks, then per batch refreshes pseudo-labels from the full path
// and fits only the factors against them through the early head.  With
// `adabn`, traversed BN layers re-estimate statistics from target batches.
// All frozen tensors are verified bit-identical afterwards.
TrainReport adapt_target(UNet<float>& net,
                         const std::vector<SegmentationSample>& target_train,
                         const AdaptSpec& spec);

// Mean and spread of surface dice (at `tolerance_px`) and volumetric dice
// over a labeled set, under EVAL statistics.
EvalResult evaluate(UNet<float>& net, const std::vector<SegmentationSample>& test,
                    double tolerance_px = 1.0, EvalPath path = EvalPath::FULL);

// One adapter checkpoint per domain, each trained from the same base file,
// which is verified byte-identical afterwards.  Per-domain seeds derive from
// the domain id, so processing order cannot change any output.
std::vector<DomainAdaptResult> adapt_all_targets(
    const std::filesystem::path& base_ckpt, const std::filesystem::path& data_root,
    const std::vector<std::string>& domains, const AdaptSpec& spec,
    const std::filesystem::path& out_dir);

}  // namespace convlora
