#pragma once

// Small 2D U-Net for segmentation, plus an auxiliary encoder segmentation
// head (ESH) hanging off the deepest encoder block.  Everything is explicit:
// forward passes fill caches, backward passes consume them and return a
// name -> gradient map.  No autograd, no hidden state.
//
// Layout (depth d, base width b, channels c_i = b * 2^(i-1)):
//   enc1 .. encd   two (conv3x3 + BN + ReLU) units each, max-pool between
//   bottleneck     two units at c_d (after pooling encd output)
//   decd .. dec1   nearest x2 upsample, 3x3 conv + BN + ReLU down to c_i,
//                  concat with enc_i output, then two units 2c_i -> c_i -> c_i
//   final          1x1 conv c_1 -> num_classes
//   esh            three units at c_d on the encd output (pre-pool), 1x1
//                  classifier, logits nearest-upsampled back to input size
//
// Parameter names are paths like "enc2/conv1/kernel", "dec3/upbn/gamma",
// "esh/cls/bias".  Low-rank adapter factors live at ".../lora_X" and
// ".../lora_Y" next to the conv they wrap.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "convlora/adabn.hpp"
#include "convlora/convlora.hpp"
#include "convlora/ops.hpp"
#include "convlora/rng.hpp"
#include "convlora/tensor.hpp"

namespace convlora {

struct UNetConfig {
  std::size_t input_channels = 1;
  std::size_t num_classes = 2;
  std::size_t base_channels = 16;
  std::size_t depth = 4;
  std::size_t convs_per_block = 2;

  void validate() const {
    if (input_channels == 0 || num_classes == 0 || base_channels == 0)
      throw std::invalid_argument("UNetConfig: channel counts must be positive");
    if (depth < 2)
      throw std::invalid_argument("UNetConfig: depth must be at least 2");
    if (convs_per_block == 0)
      throw std::invalid_argument("UNetConfig: convs_per_block must be positive");
  }

  std::size_t channels_at(std::size_t level) const {  // level is 1-based
    return base_channels << (level - 1);
  }

  static UNetConfig tiny() { return UNetConfig{1, 2, 4, 2, 2}; }
  static UNetConfig desk() { return UNetConfig{1, 2, 16, 4, 2}; }
  static UNetConfig paper_scale() { return UNetConfig{1, 2, 64, 4, 2}; }
};

enum class Phase { PRETRAIN, ESH, ADAPT };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::PRETRAIN: return "PRETRAIN";
    case Phase::ESH: return "ESH";
    case Phase::ADAPT: return "ADAPT";
  }
  return "?";
}

template <typename T>
using Grads = std::map<std::string, Tensor<T>>;

template <typename T>
inline void accumulate_grad(Grads<T>& grads, const std::string& name,
                            Tensor<T>&& g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, std::move(g));
    return;
  }
  require_shape(it->second, g.shape(), "grad accumulate");
  for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
}

// One conv + BN + ReLU unit.  After adapter injection the conv kernel/bias
// move into the adapter (which treats them as frozen) and `kernel` is empty;
// parameter enumeration follows the tensors wherever they live.
template <typename T>
struct ConvUnit {
  ConvSpec spec{};
  Tensor<T> kernel, bias;
  bool kernel_frozen = false, bias_frozen = false;

  std::unique_ptr<ConvLoRAAdapter<T>> adapter;
  bool x_frozen = false, y_frozen = false;

  BatchNorm2d<T> bn{1};
  bool gamma_frozen = false, beta_frozen = false;

  bool has_adapter() const { return adapter != nullptr; }

  const Tensor<T>& kernel_ref() const {
    return has_adapter() ? adapter->frozen_kernel : kernel;
  }
  const Tensor<T>& bias_ref() const {
    return has_adapter() ? adapter->frozen_bias : bias;
  }
};

template <typename T>
struct UnitCache {
  Tensor<T> input;     // conv input
  BnCache<T> bn;
  Tensor<T> pre_relu;  // BN output, needed for the ReLU mask
};

template <typename T>
struct BlockCache {
  std::vector<UnitCache<T>> units;
};

template <typename T>
struct EncoderCache {
  Tensor<T> input;
  std::vector<BlockCache<T>> blocks;       // depth entries
  std::vector<Tensor<T>> block_out;        // pre-pool outputs (skip inputs)
  std::vector<TensorI> pool_argmax;        // depth entries
};

template <typename T>
struct FullCache {
  EncoderCache<T> enc;
  BlockCache<T> bott;
  struct DecStage {
    UnitCache<T> up;          // upconv unit (input = upsampled feature)
    std::size_t skip_channels = 0;
    BlockCache<T> block;      // input of unit 0 = concat(skip, upconv out)
  };
  std::vector<DecStage> dec;  // index 0 = deepest stage
  Tensor<T> final_in;
};

template <typename T>
struct EshCache {
  EncoderCache<T> enc;
  BlockCache<T> block;
  Tensor<T> cls_in;
  Tensor<T> cls_out;          // pre-upsample logits
};

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
  bool* frozen;
};

template <typename T>
struct BnRef {
  std::string name;           // e.g. "enc1/bn2"
  BatchNorm2d<T>* bn;
  bool esh_path;              // true for esh/bn{j}
};

template <typename T>
struct AdapterRef {
  std::string conv_name;      // e.g. "enc1/conv2"
  ConvLoRAAdapter<T>* adapter;
};

template <typename T>
class UNet {
 public:
  UNetConfig config;
  std::vector<std::vector<ConvUnit<T>>> encoder;   // [depth][convs_per_block]
  std::vector<ConvUnit<T>> bottleneck;
  struct DecoderStage {
    ConvUnit<T> up;                                // upconv unit (+ upbn)
    std::vector<ConvUnit<T>> block;
  };
  std::vector<DecoderStage> decoder;               // index 0 = deepest level
  ConvSpec final_spec{};
  Tensor<T> final_kernel, final_bias;
  bool final_kernel_frozen = false, final_bias_frozen = false;
  std::vector<ConvUnit<T>> esh;                    // three units at c_depth
  ConvSpec esh_cls_spec{};
  Tensor<T> esh_cls_kernel, esh_cls_bias;
  bool esh_cls_kernel_frozen = false, esh_cls_bias_frozen = false;

  static UNet build(const UNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    UNet net;
    net.config = cfg;
    const std::size_t d = cfg.depth;

    auto make_unit = [&](std::size_t in_c, std::size_t out_c, int k,
                         const std::string& conv_name) {
      ConvUnit<T> u;
      u.spec = ConvSpec{int(in_c), int(out_c), k, 1, k / 2};
      u.kernel = he_kernel(u.spec, derive_seed(seed, conv_name + "/kernel"));
      u.bias = Tensor<T>::zeros({out_c});
      u.bn = BatchNorm2d<T>(out_c);
      return u;
    };

    for (std::size_t i = 1; i <= d; ++i) {
      std::vector<ConvUnit<T>> block;
      const std::size_t c = cfg.channels_at(i);
      std::size_t in_c = (i == 1) ? cfg.input_channels : cfg.channels_at(i - 1);
      for (std::size_t j = 1; j <= cfg.convs_per_block; ++j) {
        block.push_back(make_unit(in_c, c,
                                  3, "enc" + std::to_string(i) + "/conv" + std::to_string(j)));
        in_c = c;
      }
      net.encoder.push_back(std::move(block));
    }

    const std::size_t cd = cfg.channels_at(d);
    for (std::size_t j = 1; j <= cfg.convs_per_block; ++j)
      net.bottleneck.push_back(make_unit(cd, cd, 3, "bott/conv" + std::to_string(j)));

    for (std::size_t i = d; i >= 1; --i) {
      DecoderStage stage;
      const std::size_t c = cfg.channels_at(i);
      const std::size_t c_prev = (i == d) ? cd : cfg.channels_at(i + 1);
      stage.up = make_unit(c_prev, c, 3, "dec" + std::to_string(i) + "/up");
      std::size_t in_c = 2 * c;
      for (std::size_t j = 1; j <= cfg.convs_per_block; ++j) {
        stage.block.push_back(make_unit(in_c, c,
                                        3, "dec" + std::to_string(i) + "/conv" + std::to_string(j)));
        in_c = c;
      }
      net.decoder.push_back(std::move(stage));
    }

    net.final_spec = ConvSpec{int(cfg.channels_at(1)), int(cfg.num_classes), 1, 1, 0};
    net.final_kernel = he_kernel(net.final_spec, derive_seed(seed, "final/kernel"));
    net.final_bias = Tensor<T>::zeros({cfg.num_classes});

    for (std::size_t j = 1; j <= 3; ++j)
      net.esh.push_back(make_unit(cd, cd, 3, "esh/conv" + std::to_string(j)));
    net.esh_cls_spec = ConvSpec{int(cd), int(cfg.num_classes), 1, 1, 0};
    net.esh_cls_kernel = he_kernel(net.esh_cls_spec, derive_seed(seed, "esh/cls/kernel"));
    net.esh_cls_bias = Tensor<T>::zeros({cfg.num_classes});
    return net;
  }

  // Deep copy; adapters are duplicated, not shared.
  UNet clone() const {
    UNet c;
    c.config = config;
    for (const auto& block : encoder) {
      std::vector<ConvUnit<T>> b;
      for (const auto& u : block) b.push_back(copy_unit(u));
      c.encoder.push_back(std::move(b));
    }
    for (const auto& u : bottleneck) c.bottleneck.push_back(copy_unit(u));
    for (const auto& st : decoder) {
      DecoderStage s;
      s.up = copy_unit(st.up);
      for (const auto& u : st.block) s.block.push_back(copy_unit(u));
      c.decoder.push_back(std::move(s));
    }
    c.final_spec = final_spec;
    c.final_kernel = final_kernel;
    c.final_bias = final_bias;
    c.final_kernel_frozen = final_kernel_frozen;
    c.final_bias_frozen = final_bias_frozen;
    for (const auto& u : esh) c.esh.push_back(copy_unit(u));
    c.esh_cls_spec = esh_cls_spec;
    c.esh_cls_kernel = esh_cls_kernel;
    c.esh_cls_bias = esh_cls_bias;
    c.esh_cls_kernel_frozen = esh_cls_kernel_frozen;
    c.esh_cls_bias_frozen = esh_cls_bias_frozen;
    return c;
  }

  // ---- parameter / layer enumeration -------------------------------------

  std::vector<ParamRef<T>> named_params() {
    std::vector<ParamRef<T>> out;
    auto add_unit = [&](ConvUnit<T>& u, const std::string& conv,
                        const std::string& bn) {
      if (u.has_adapter()) {
        out.push_back({conv + "/kernel", &u.adapter->frozen_kernel, &u.kernel_frozen});
        out.push_back({conv + "/bias", &u.adapter->frozen_bias, &u.bias_frozen});
        out.push_back({conv + "/lora_X", &u.adapter->X, &u.x_frozen});
        out.push_back({conv + "/lora_Y", &u.adapter->Y, &u.y_frozen});
      } else {
        out.push_back({conv + "/kernel", &u.kernel, &u.kernel_frozen});
        out.push_back({conv + "/bias", &u.bias, &u.bias_frozen});
      }
      out.push_back({bn + "/gamma", &u.bn.gamma, &u.gamma_frozen});
      out.push_back({bn + "/beta", &u.bn.beta, &u.beta_frozen});
    };
    for_each_unit(add_unit);
    out.push_back({"final/kernel", &final_kernel, &final_kernel_frozen});
    out.push_back({"final/bias", &final_bias, &final_bias_frozen});
    out.push_back({"esh/cls/kernel", &esh_cls_kernel, &esh_cls_kernel_frozen});
    out.push_back({"esh/cls/bias", &esh_cls_bias, &esh_cls_bias_frozen});
    return out;
  }

  std::vector<BnRef<T>> named_bns() {
    std::vector<BnRef<T>> out;
    for (std::size_t i = 0; i < encoder.size(); ++i)
      for (std::size_t j = 0; j < encoder[i].size(); ++j)
        out.push_back({"enc" + std::to_string(i + 1) + "/bn" + std::to_string(j + 1),
                       &encoder[i][j].bn, false});
    for (std::size_t j = 0; j < bottleneck.size(); ++j)
      out.push_back({"bott/bn" + std::to_string(j + 1), &bottleneck[j].bn, false});
    for (std::size_t s = 0; s < decoder.size(); ++s) {
      const std::size_t level = config.depth - s;
      out.push_back({"dec" + std::to_string(level) + "/upbn", &decoder[s].up.bn, false});
      for (std::size_t j = 0; j < decoder[s].block.size(); ++j)
        out.push_back({"dec" + std::to_string(level) + "/bn" + std::to_string(j + 1),
                       &decoder[s].block[j].bn, false});
    }
    for (std::size_t j = 0; j < esh.size(); ++j)
      out.push_back({"esh/bn" + std::to_string(j + 1), &esh[j].bn, true});
    return out;
  }

  std::vector<AdapterRef<T>> adapters() {
    std::vector<AdapterRef<T>> out;
    for (std::size_t i = 0; i < encoder.size(); ++i)
      for (std::size_t j = 0; j < encoder[i].size(); ++j)
        if (encoder[i][j].has_adapter())
          out.push_back({"enc" + std::to_string(i + 1) + "/conv" + std::to_string(j + 1),
                         encoder[i][j].adapter.get()});
    return out;
  }

  std::size_t param_count(bool trainable_only = false) {
    std::size_t n = 0;
    for (auto& p : named_params())
      if (!trainable_only || !*p.frozen) n += p.tensor->size();
    return n;
  }

  // ---- adapter injection --------------------------------------------------

  // `blocks` holds 1-based encoder block indices.  Every conv in a selected
  // block gets a rank-r adapter; kernel and bias move into it as frozen
  // tensors.  Injecting a block twice is an error.
  void inject_convlora(const std::vector<std::size_t>& blocks, std::size_t rank,
                       std::uint64_t seed) {
    if (blocks.empty())
      throw std::invalid_argument("inject_convlora: empty block selector");
    for (std::size_t b : blocks) {
      if (b < 1 || b > config.depth)
        throw std::invalid_argument(
            "inject_convlora: block index " + std::to_string(b) +
            " outside [1, " + std::to_string(config.depth) + "]");
      for (std::size_t j = 0; j < encoder[b - 1].size(); ++j) {
        ConvUnit<T>& u = encoder[b - 1][j];
        const std::string name =
            "enc" + std::to_string(b) + "/conv" + std::to_string(j + 1);
        if (u.has_adapter())
          throw std::invalid_argument("inject_convlora: " + name +
                                      " already has an adapter");
        u.adapter = std::make_unique<ConvLoRAAdapter<T>>(init_adapter<T>(
            u.kernel, u.bias, u.spec, int(rank), derive_seed(seed, name)));
        u.kernel = Tensor<T>();
        u.bias = Tensor<T>();
      }
    }
  }

  // Folds every adapter delta into its kernel and removes the adapters.
  void merge_all_adapters() {
    for (auto& block : encoder)
      for (auto& u : block)
        if (u.has_adapter()) {
          auto merged = merge(*u.adapter);
          u.kernel = std::move(merged.first);
          u.bias = std::move(merged.second);
          u.adapter.reset();
        }
  }

  // ---- freeze policy ------------------------------------------------------

  // PRETRAIN: backbone trains (BN in TRAIN), ESH frozen.
  // ESH:      only the ESH head trains; every other BN is EVAL.
  // ADAPT:    only adapter factors train; BN mode is ADAPT everywhere when
  //           adabn is on (only layers that see batches actually move).
  void apply_freeze_policy(Phase phase, bool adabn_on = true) {
    const bool esh_phase = (phase == Phase::ESH);
    const bool pre_phase = (phase == Phase::PRETRAIN);
    for (auto& p : named_params()) {
      const bool is_esh = p.name.rfind("esh/", 0) == 0;
      const bool is_lora = p.name.size() > 6 &&
                           p.name.compare(p.name.size() - 6, 4, "lora") == 0;
      bool trainable = false;
      switch (phase) {
        case Phase::PRETRAIN: trainable = !is_esh; break;
        case Phase::ESH: trainable = is_esh; break;
        case Phase::ADAPT: trainable = is_lora; break;
      }
      *p.frozen = !trainable;
    }
    for (auto& b : named_bns()) {
      if (phase == Phase::ADAPT)
        b.bn->mode = adabn_on ? BnMode::ADAPT : BnMode::EVAL;
      else if (b.esh_path)
        b.bn->mode = esh_phase ? BnMode::TRAIN : BnMode::EVAL;
      else
        b.bn->mode = pre_phase ? BnMode::TRAIN : BnMode::EVAL;
    }
  }

  void set_bn_mode_all(BnMode mode) {
    for (auto& b : named_bns()) b.bn->mode = mode;
  }

  std::vector<BnMode> save_bn_modes() {
    std::vector<BnMode> out;
    for (auto& b : named_bns()) out.push_back(b.bn->mode);
    return out;
  }

  void restore_bn_modes(const std::vector<BnMode>& modes) {
    auto bns = named_bns();
    if (modes.size() != bns.size())
      throw std::invalid_argument("restore_bn_modes: count mismatch");
    for (std::size_t i = 0; i < bns.size(); ++i) bns[i].bn->mode = modes[i];
  }

  void snapshot_bn_source() {
    for (auto& b : named_bns()) b.bn->snapshot_source();
  }

  void reset_bn_to_source() {
    for (auto& b : named_bns()) b.bn->reset_stats();
  }

  // ---- forward ------------------------------------------------------------

  // Runs the encoder; returns the pooled output of the last block.  Skip
  // features (pre-pool outputs) land in the cache.
  Tensor<T> forward_encoder(const Tensor<T>& x, EncoderCache<T>* cache) {
    require_rank(x, 4, "unet input");
    if (x.dim(1) != config.input_channels)
      throw std::invalid_argument("unet: input has " + std::to_string(x.dim(1)) +
                                  " channels, config expects " +
                                  std::to_string(config.input_channels));
    const std::size_t div = std::size_t(1) << config.depth;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
      throw std::invalid_argument("unet: spatial dims " + x.shape_str() +
                                  " not divisible by 2^depth = " + std::to_string(div));
    if (cache) {
      cache->input = x;
      cache->blocks.assign(config.depth, {});
      cache->block_out.assign(config.depth, {});
      cache->pool_argmax.assign(config.depth, {});
    }
    Tensor<T> cur = x;
    for (std::size_t i = 0; i < config.depth; ++i) {
      cur = block_forward(encoder[i], cur, cache ? &cache->blocks[i] : nullptr);
      if (cache) cache->block_out[i] = cur;
      auto pooled = maxpool2d(cur);
      if (cache) cache->pool_argmax[i] = std::move(pooled.argmax);
      cur = std::move(pooled.output);
    }
    return cur;
  }

  Tensor<T> forward_full(const Tensor<T>& x, FullCache<T>* cache = nullptr) {
    EncoderCache<T> local;
    EncoderCache<T>* enc = cache ? &cache->enc : &local;
    Tensor<T> pooled = forward_encoder(x, enc);
    return full_head(std::move(pooled), enc->block_out, cache);
  }

  Tensor<T> forward_esh(const Tensor<T>& x, EshCache<T>* cache = nullptr) {
    EncoderCache<T> local;
    EncoderCache<T>* enc = cache ? &cache->enc : &local;
    forward_encoder(x, enc);
    return esh_head(enc->block_out[config.depth - 1], cache);
  }

  // Both heads from a single encoder pass (no caches; evaluation only).
  std::pair<Tensor<T>, Tensor<T>> forward_both(const Tensor<T>& x) {
    EncoderCache<T> enc;
    Tensor<T> pooled = forward_encoder(x, &enc);
    Tensor<T> logits_full = full_head(std::move(pooled), enc.block_out, nullptr);
    Tensor<T> logits_esh = esh_head(enc.block_out[config.depth - 1], nullptr);
    return {std::move(logits_full), std::move(logits_esh)};
  }

  // ---- backward -----------------------------------------------------------

  Grads<T> backward_full(const FullCache<T>& cache, const Tensor<T>& grad_logits) {
    Grads<T> grads;
    Tensor<T> g = conv2d_backward_into(grads, "final", grad_logits, cache.final_in,
                                       final_kernel, final_spec);
    // Decoder stages in reverse execution order; each yields a gradient for
    // its skip feature plus one flowing down toward the bottleneck.
    std::vector<Tensor<T>> skip_grads(config.depth);
    for (std::size_t s = cache.dec.size(); s-- > 0;) {
      const auto& st = cache.dec[s];
      const std::size_t level = config.depth - s;
      const std::string dec = "dec" + std::to_string(level);
      g = block_backward(decoder[s].block, st.block, g, grads, dec);
      auto parts = split_channels(g, st.skip_channels);
      skip_grads[level - 1] = std::move(parts.first);
      Tensor<T> g_up = unit_backward(decoder[s].up, st.up, parts.second, grads,
                                     dec + "/up", dec + "/upbn");
      g = upsample_nearest_backward(g_up);
    }
    g = block_backward(bottleneck, cache.bott, g, grads, "bott");
    backward_encoder(cache.enc, std::move(g), skip_grads, grads);
    return grads;
  }

  Grads<T> backward_esh(const EshCache<T>& cache, const Tensor<T>& grad_logits) {
    Grads<T> grads;
    // undo the repeated x2 nearest upsampling of the classifier logits
    Tensor<T> g = grad_logits;
    while (g.dim(2) > cache.cls_out.dim(2)) g = upsample_nearest_backward(g);
    auto cg = conv2d_backward(g, cache.cls_in, esh_cls_kernel, esh_cls_spec);
    accumulate_grad(grads, "esh/cls/kernel", std::move(cg.grad_kernel));
    accumulate_grad(grads, "esh/cls/bias", std::move(cg.grad_bias));
    g = block_backward(esh, cache.block, cg.grad_input, grads, "esh");
    // g is now the gradient at the last encoder block's pre-pool output;
    // the pool after that block is not on this path.
    for (std::size_t i = config.depth; i-- > 0;) {
      g = block_backward(encoder[i], cache.enc.blocks[i], g, grads,
                         "enc" + std::to_string(i + 1));
      if (i > 0)
        g = maxpool2d_backward(g, cache.enc.pool_argmax[i - 1],
                               cache.enc.block_out[i - 1].shape());
    }
    return grads;
  }

 private:
  // Encoder backward shared by the full path.  `g` arrives as the gradient at
  // the pooled output of the last block; skip_grads[i] (may be empty) adds to
  // block i's pre-pool output.
  void backward_encoder(const EncoderCache<T>& cache, Tensor<T> g,
                        std::vector<Tensor<T>>& skip_grads, Grads<T>& grads) {
    for (std::size_t i = config.depth; i-- > 0;) {
      g = maxpool2d_backward(g, cache.pool_argmax[i], cache.block_out[i].shape());
      if (skip_grads[i].size() > 0) {
        require_shape(g, skip_grads[i].shape(), "encoder skip gradient");
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += skip_grads[i][k];
      }
      g = block_backward(encoder[i], cache.blocks[i], g, grads,
                         "enc" + std::to_string(i + 1));
    }
  }

  static ConvUnit<T> copy_unit(const ConvUnit<T>& u) {
    ConvUnit<T> v;
    v.spec = u.spec;
    v.kernel = u.kernel;
    v.bias = u.bias;
    v.kernel_frozen = u.kernel_frozen;
    v.bias_frozen = u.bias_frozen;
    if (u.adapter) v.adapter = std::make_unique<ConvLoRAAdapter<T>>(*u.adapter);
    v.x_frozen = u.x_frozen;
    v.y_frozen = u.y_frozen;
    v.bn = u.bn;
    v.gamma_frozen = u.gamma_frozen;
    v.beta_frozen = u.beta_frozen;
    return v;
  }

  static Tensor<T> he_kernel(const ConvSpec& spec, std::uint64_t seed) {
    Tensor<T> k({std::size_t(spec.out_channels), std::size_t(spec.in_channels),
                 std::size_t(spec.kernel_size), std::size_t(spec.kernel_size)});
    const double fan_in =
        double(spec.in_channels) * double(spec.kernel_size) * double(spec.kernel_size);
    Rng rng(seed);
    const double sigma = std::sqrt(2.0 / fan_in);
    for (auto& v : k.vec()) v = T(rng.normal(0.0, sigma));
    return k;
  }

  template <typename F>
  void for_each_unit(F&& f) {
    for (std::size_t i = 0; i < encoder.size(); ++i)
      for (std::size_t j = 0; j < encoder[i].size(); ++j) {
        const std::string b = "enc" + std::to_string(i + 1);
        f(encoder[i][j], b + "/conv" + std::to_string(j + 1),
          b + "/bn" + std::to_string(j + 1));
      }
    for (std::size_t j = 0; j < bottleneck.size(); ++j)
      f(bottleneck[j], "bott/conv" + std::to_string(j + 1),
        "bott/bn" + std::to_string(j + 1));
    for (std::size_t s = 0; s < decoder.size(); ++s) {
      const std::string d = "dec" + std::to_string(config.depth - s);
      f(decoder[s].up, d + "/up", d + "/upbn");
      for (std::size_t j = 0; j < decoder[s].block.size(); ++j)
        f(decoder[s].block[j], d + "/conv" + std::to_string(j + 1),
          d + "/bn" + std::to_string(j + 1));
    }
    for (std::size_t j = 0; j < esh.size(); ++j)
      f(esh[j], "esh/conv" + std::to_string(j + 1), "esh/bn" + std::to_string(j + 1));
  }

  Tensor<T> unit_forward(ConvUnit<T>& u, const Tensor<T>& x, UnitCache<T>* cache) {
    Tensor<T> conv_out = u.has_adapter() ? adapter_forward(*u.adapter, x)
                                         : conv2d_forward(x, u.kernel, u.bias, u.spec);
    Tensor<T> bn_out = u.bn.forward(conv_out, cache ? &cache->bn : nullptr);
    if (cache) {
      cache->input = x;
      cache->pre_relu = bn_out;
    }
    return relu(bn_out);
  }

  Tensor<T> block_forward(std::vector<ConvUnit<T>>& block, const Tensor<T>& x,
                          BlockCache<T>* cache) {
    if (cache) cache->units.assign(block.size(), {});
    Tensor<T> cur = x;
    for (std::size_t j = 0; j < block.size(); ++j)
      cur = unit_forward(block[j], cur, cache ? &cache->units[j] : nullptr);
    return cur;
  }

  Tensor<T> full_head(Tensor<T> pooled, const std::vector<Tensor<T>>& skips,
                      FullCache<T>* cache) {
    Tensor<T> cur = block_forward(bottleneck, pooled, cache ? &cache->bott : nullptr);
    if (cache) cache->dec.assign(decoder.size(), {});
    for (std::size_t s = 0; s < decoder.size(); ++s) {
      const std::size_t level = config.depth - s;
      const Tensor<T>& skip = skips[level - 1];
      Tensor<T> upped = upsample_nearest(cur);
      Tensor<T> up_out =
          unit_forward(decoder[s].up, upped, cache ? &cache->dec[s].up : nullptr);
      Tensor<T> cat = concat_channels(skip, up_out);
      if (cache) cache->dec[s].skip_channels = skip.dim(1);
      cur = block_forward(decoder[s].block, cat, cache ? &cache->dec[s].block : nullptr);
    }
    if (cache) cache->final_in = cur;
    return conv2d_forward(cur, final_kernel, final_bias, final_spec);
  }

  Tensor<T> esh_head(const Tensor<T>& enc_out, EshCache<T>* cache) {
    Tensor<T> cur = block_forward(esh, enc_out, cache ? &cache->block : nullptr);
    if (cache) cache->cls_in = cur;
    Tensor<T> logits = conv2d_forward(cur, esh_cls_kernel, esh_cls_bias, esh_cls_spec);
    if (cache) cache->cls_out = logits;
    const std::size_t factor = std::size_t(1) << (config.depth - 1);
    for (std::size_t f = 1; f < factor; f <<= 1) logits = upsample_nearest(logits);
    return logits;
  }

  Tensor<T> conv2d_backward_into(Grads<T>& grads, const std::string& name,
                                 const Tensor<T>& grad_out, const Tensor<T>& input,
                                 const Tensor<T>& kernel, const ConvSpec& spec) {
    auto g = conv2d_backward(grad_out, input, kernel, spec);
    accumulate_grad(grads, name + "/kernel", std::move(g.grad_kernel));
    accumulate_grad(grads, name + "/bias", std::move(g.grad_bias));
    return std::move(g.grad_input);
  }

  Tensor<T> unit_backward(ConvUnit<T>& u, const UnitCache<T>& cache,
                          const Tensor<T>& grad_out, Grads<T>& grads,
                          const std::string& conv_name, const std::string& bn_name) {
    Tensor<T> g = relu_backward(grad_out, cache.pre_relu);
    BnGrads<T> bg = u.bn.backward(g, cache.bn);
    accumulate_grad(grads, bn_name + "/gamma", std::move(bg.grad_gamma));
    accumulate_grad(grads, bn_name + "/beta", std::move(bg.grad_beta));
    if (u.has_adapter()) {
      auto ag = adapter_backward(*u.adapter, cache.input, bg.grad_input);
      accumulate_grad(grads, conv_name + "/lora_X", std::move(ag.grad_X));
      accumulate_grad(grads, conv_name + "/lora_Y", std::move(ag.grad_Y));
      return std::move(ag.grad_input);
    }
    return conv2d_backward_into(grads, conv_name, bg.grad_input, cache.input,
                                u.kernel, u.spec);
  }

  Tensor<T> block_backward(std::vector<ConvUnit<T>>& block,
                           const BlockCache<T>& cache, const Tensor<T>& grad_out,
                           Grads<T>& grads, const std::string& prefix) {
    Tensor<T> g = grad_out;
    for (std::size_t j = block.size(); j-- > 0;)
      g = unit_backward(block[j], cache.units[j], g, grads,
                        prefix + "/conv" + std::to_string(j + 1),
                        prefix + "/bn" + std::to_string(j + 1));
    return g;
  }
};

}  // namespace convlora
