#include "convlora/pipeline.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <stdexcept>

#include "convlora/ops.hpp"
#include "convlora/metrics.hpp"
#include "convlora/rng.hpp"

namespace convlora {
namespace {

// Adam with per-parameter state, created lazily and only for tensors that
// actually get stepped.  Frozen tensors therefore never acquire state.
struct Optimizer {
  AdamConfig cfg;
  std::map<std::string, AdamState<float>> state;

  void step(UNet<float>& net, Grads<float>& grads) {
    for (auto& p : net.named_params()) {
      if (*p.frozen) continue;
      auto it = grads.find(p.name);
      if (it == grads.end()) continue;
      adam_step(*p.tensor, it->second, state[p.name], cfg);
    }
  }
};

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> idx,
                                                   std::size_t batch_size,
                                                   std::uint64_t order_seed) {
  Rng order(order_seed);
  order.shuffle(idx.begin(), idx.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    auto end = std::min(start + batch_size, idx.size());
    out.emplace_back(idx.begin() + start, idx.begin() + end);
  }
  return out;
}

void check_finite_loss(double loss, const char* stage, std::size_t epoch,
                       std::size_t batch) {
  if (std::isfinite(loss)) return;
  throw std::runtime_error(std::string(stage) + ": loss became non-finite at epoch " +
                           std::to_string(epoch + 1) + ", batch " +
                           std::to_string(batch + 1) +
                           "; a lower learning rate usually fixes this");
}

void mean_and_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  sd = std::sqrt(acc / static_cast<double>(v.size()));
}

}  // namespace

void PretrainSpec::validate() const {
  if (epochs == 0) throw std::invalid_argument("pretrain: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("pretrain: batch size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("pretrain: learning rate must be positive");
}

void EshSpec::validate() const {
  if (epochs == 0) throw std::invalid_argument("head training: epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("head training: batch size must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("head training: learning rate must be positive");
}

void AdaptSpec::validate() const {
  if (batch_size == 0) throw std::invalid_argument("adaptation: batch size must be positive");
  if (adabn && !full_pass && batch_size < 2)
    throw std::invalid_argument(
        "adaptation: running batch statistics need at least two images per batch");
  if (!(lr > 0.0)) throw std::invalid_argument("adaptation: learning rate must be positive");
  if (rank == 0) throw std::invalid_argument("adaptation: rank must be positive");
  if (target_sample_count == 0)
    throw std::invalid_argument("adaptation: target sample count must be positive");
  if (!(adabn_momentum > 0.0) || adabn_momentum > 1.0)
    throw std::invalid_argument("adaptation: momentum must be in (0,1]");
}

TensorI argmax_labels(const TensorF& logits) {
  require_rank(logits, 4, "argmax_labels");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  const std::size_t h = logits.dim(2), w = logits.dim(3);
  TensorI out({n, h, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t best = 0;
        float best_v = logits.at4(i, 0, y, x);
        for (std::size_t k = 1; k < c; ++k) {
          float v = logits.at4(i, k, y, x);
          if (v > best_v) {
            best_v = v;
            best = k;
          }
        }
        out.at3(i, y, x) = static_cast<std::int32_t>(best);
      }
  return out;
}

TrainReport pretrain_source(UNet<float>& net,
                            const std::vector<SegmentationSample>& train,
                            const PretrainSpec& spec) {
  spec.validate();
  if (train.empty()) throw std::invalid_argument("pretrain: training set is empty");

  net.apply_freeze_policy(Phase::PRETRAIN);
  Optimizer opt{AdamConfig{spec.lr, 0.9, 0.999, 1e-8}, {}};

  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});

  TrainReport rep;
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    auto batches = make_batches(
        idx, spec.batch_size,
        derive_seed(spec.seed, "pretrain/order/" + std::to_string(e)));
    double sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      auto x = stack_images(train, batches[b]);
      auto labels = stack_masks(train, batches[b]);
      FullCache<float> cache;
      auto logits = net.forward_full(x, &cache);
      auto ce = cross_entropy_loss(logits, labels);
      check_finite_loss(ce.loss, "pretrain", e, b);
      auto grads = net.backward_full(cache, ce.grad_logits);
      opt.step(net, grads);
      sum += ce.loss;
    }
    rep.epoch_losses.push_back(sum / static_cast<double>(batches.size()));
  }

  net.snapshot_bn_source();
  net.set_bn_mode_all(BnMode::EVAL);
  return rep;
}

TrainReport train_esh(UNet<float>& net,
                      const std::vector<SegmentationSample>& train,
                      const EshSpec& spec) {
  spec.validate();
  if (train.empty()) throw std::invalid_argument("head training: training set is empty");

  net.apply_freeze_policy(Phase::ESH);
  Optimizer opt{AdamConfig{spec.lr, 0.9, 0.999, 1e-8}, {}};

  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});

  TrainReport rep;
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    auto batches = make_batches(
        idx, spec.batch_size,
        derive_seed(spec.seed, "esh/order/" + std::to_string(e)));
    double sum = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      auto x = stack_images(train, batches[b]);
      auto labels = stack_masks(train, batches[b]);
      EshCache<float> cache;
      auto logits = net.forward_esh(x, &cache);
      auto ce = cross_entropy_loss(logits, labels);
      check_finite_loss(ce.loss, "head training", e, b);
      auto grads = net.backward_esh(cache, ce.grad_logits);
      opt.step(net, grads);
      sum += ce.loss;
    }
    rep.epoch_losses.push_back(sum / static_cast<double>(batches.size()));
  }

  // Head statistics are part of the source reference; the frozen rest of the
  // network did not move, so re-snapshotting everything is exact.
  net.snapshot_bn_source();
  net.set_bn_mode_all(BnMode::EVAL);
  return rep;
}

PseudoLabelBatch make_pseudo_labels(UNet<float>& net, const TensorF& images) {
  auto saved = net.save_bn_modes();
  net.set_bn_mode_all(BnMode::EVAL);
  auto logits = net.forward_full(images);
  net.restore_bn_modes(saved);
  return PseudoLabelBatch{images, argmax_labels(logits)};
}

std::vector<std::size_t> select_target_samples(std::size_t pool_size,
                                               std::size_t count,
                                               std::uint64_t seed) {
  if (count == 0)
    throw std::invalid_argument("target selection: count must be positive");
  if (count > pool_size)
    throw std::invalid_argument("target selection: asked for " + std::to_string(count) +
                                " images but the pool has " + std::to_string(pool_size));
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "target-select"));
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(count);
  return idx;
}

std::vector<std::size_t> resolve_selector(const AdaptSpec& spec, std::size_t depth) {
  if (spec.selector.empty()) {
    std::vector<std::size_t> all(depth);
    std::iota(all.begin(), all.end(), std::size_t{1});
    return all;
  }
  return spec.selector;
}

TrainReport adapt_target(UNet<float>& net,
                         const std::vector<SegmentationSample>& target_train,
                         const AdaptSpec& spec) {
  spec.validate();
  if (target_train.empty())
    throw std::invalid_argument("adaptation: target training set is empty");
  if (!net.adapters().empty())
    throw std::invalid_argument("adaptation: model already carries adapters");

  auto blocks = resolve_selector(spec, net.config.depth);
  net.inject_convlora(blocks, spec.rank, derive_seed(spec.seed, "adapter-init"));
  net.apply_freeze_policy(Phase::ADAPT, spec.adabn);
  for (auto& b : net.named_bns()) b.bn->momentum = spec.adabn_momentum;

  auto chosen =
      select_target_samples(target_train.size(), spec.target_sample_count, spec.seed);

  // Record every frozen tensor so the exit check can prove none moved.
  std::vector<std::pair<std::string, std::vector<float>>> frozen_before;
  for (auto& p : net.named_params())
    if (*p.frozen) frozen_before.emplace_back(p.name, p.tensor->vec());

  if (spec.adabn && spec.full_pass) {
    // Exact single-sweep statistics: one pass over the whole selected set
    // with momentum 1 replaces the running values outright, then the loop
    // runs against those fixed statistics.
    for (auto& b : net.named_bns()) b.bn->momentum = 1.0;
    net.forward_esh(stack_images(target_train, chosen));
    for (auto& b : net.named_bns()) b.bn->momentum = spec.adabn_momentum;
    net.set_bn_mode_all(BnMode::EVAL);
  }

  Optimizer opt{AdamConfig{spec.lr, 0.9, 0.999, 1e-8}, {}};
  TrainReport rep;
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    auto batches = make_batches(
        chosen, spec.batch_size,
        derive_seed(spec.seed, "adapt/order/" + std::to_string(e)));
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      if (batches[b].size() < 2 && spec.adabn && !spec.full_pass) continue;
      auto x = stack_images(target_train, batches[b]);
      auto pl = make_pseudo_labels(net, x);
      EshCache<float> cache;
      auto logits = net.forward_esh(x, &cache);
      auto ce = cross_entropy_loss(logits, pl.pseudo_labels);
      check_finite_loss(ce.loss, "adaptation", e, b);
      auto grads = net.backward_esh(cache, ce.grad_logits);
      opt.step(net, grads);
      sum += ce.loss;
      ++counted;
    }
    rep.epoch_losses.push_back(counted ? sum / static_cast<double>(counted) : 0.0);
  }

  std::size_t fi = 0;
  for (auto& p : net.named_params()) {
    if (!*p.frozen) continue;
    const auto& before = frozen_before.at(fi++);
    if (before.first != p.name ||
        std::memcmp(before.second.data(), p.tensor->vec().data(),
                    before.second.size() * sizeof(float)) != 0)
      throw std::logic_error("adaptation modified frozen tensor " + p.name);
  }

  net.set_bn_mode_all(BnMode::EVAL);
  return rep;
}

EvalResult evaluate(UNet<float>& net, const std::vector<SegmentationSample>& test,
                    double tolerance_px, EvalPath path) {
  if (test.empty()) throw std::invalid_argument("evaluate: test set is empty");

  auto saved = net.save_bn_modes();
  net.set_bn_mode_all(BnMode::EVAL);

  EvalResult r;
  for (const auto& s : test) {
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    auto x = s.image.reshaped({1, 1, h, w});
    auto logits = path == EvalPath::FULL ? net.forward_full(x) : net.forward_esh(x);
    auto pred = argmax_labels(logits).reshaped({h, w});
    r.per_image_sds.push_back(surface_dice(pred, s.mask, tolerance_px));
    r.per_image_dice.push_back(volumetric_dice(pred, s.mask));
  }
  net.restore_bn_modes(saved);

  mean_and_std(r.per_image_sds, r.mean_sds, r.std_sds);
  mean_and_std(r.per_image_dice, r.mean_dice, r.std_dice);
  return r;
}

std::vector<DomainAdaptResult> adapt_all_targets(
    const std::filesystem::path& base_ckpt, const std::filesystem::path& data_root,
    const std::vector<std::string>& domains, const AdaptSpec& spec,
    const std::filesystem::path& out_dir) {
  if (domains.empty())
    throw std::invalid_argument("adaptation: no target domains given");

  const auto base_hash = to_hex(sha256_file(base_ckpt));
  std::filesystem::create_directories(out_dir);

  std::vector<DomainAdaptResult> out;
  for (const auto& id : domains) {
    auto net = load_base_checkpoint(base_ckpt);
    net.reset_bn_to_source();

    AdaptSpec local = spec;
    local.seed = derive_seed(spec.seed, "domain/" + id);
    auto pool = load_split(data_root, id, "train");
    auto rep = adapt_target(net, pool, local);

    AdapterMeta meta;
    meta.domain_id = id;
    meta.rank = static_cast<int>(spec.rank);
    meta.selector = resolve_selector(spec, net.config.depth);
    meta.seed = local.seed;
    meta.base_checksum = base_hash;
    auto path = out_dir / ("adapter_" + id + ".clra");
    save_adapter_checkpoint(path, net, meta);
    out.push_back(DomainAdaptResult{id, path, std::move(rep)});
  }

  if (to_hex(sha256_file(base_ckpt)) != base_hash)
    throw std::logic_error("adaptation altered the base checkpoint file");
  return out;
}

}  // namespace convlora
