#include "convlora/checkpoint.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <stdexcept>

namespace convlora {

namespace fs = std::filesystem;

std::vector<std::size_t> parse_selector(const std::string& text, std::size_t depth) {
  if (text.empty()) throw std::invalid_argument("selector: empty");
  std::vector<std::size_t> out;
  if (text == "all") {
    for (std::size_t i = 1; i <= depth; ++i) out.push_back(i);
    return out;
  }
  std::size_t pos = 0;
  auto parse_num = [&]() {
    std::size_t start = pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
    if (pos == start)
      throw std::invalid_argument("selector: expected a block index in '" + text + "'");
    return std::size_t(std::stoul(text.substr(start, pos - start)));
  };
  std::set<std::size_t> seen;
  while (true) {
    std::size_t a = parse_num();
    std::size_t b = a;
    if (pos < text.size() && text[pos] == '-') {
      ++pos;
      b = parse_num();
    }
    if (a > b) throw std::invalid_argument("selector: descending range in '" + text + "'");
    for (std::size_t i = a; i <= b; ++i) {
      if (i < 1 || i > depth)
        throw std::invalid_argument("selector: block " + std::to_string(i) +
                                    " outside [1, " + std::to_string(depth) + "]");
      if (!seen.insert(i).second)
        throw std::invalid_argument("selector: block " + std::to_string(i) + " repeated");
    }
    if (pos == text.size()) break;
    if (text[pos] != ',')
      throw std::invalid_argument("selector: unexpected character '" +
                                  std::string(1, text[pos]) + "' in '" + text + "'");
    ++pos;
  }
  out.assign(seen.begin(), seen.end());
  return out;
}

std::string selector_to_string(const std::vector<std::size_t>& blocks) {
  if (blocks.empty()) throw std::invalid_argument("selector: empty block list");
  std::string s;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(blocks[i]);
  }
  return s;
}

namespace {

void put_u64(Container& c, const std::string& name, std::uint64_t v) {
  c.put_string(name, std::to_string(v));
}

std::uint64_t get_u64(const Container& c, const std::string& name) {
  return std::stoull(c.get_string(name));
}

void put_bn_stats(Container& c, UNet<float>& net) {
  for (auto& b : net.named_bns()) {
    c.put("bn/" + b.name + "/running_mean", b.bn->running_mean);
    c.put("bn/" + b.name + "/running_var", b.bn->running_var);
  }
}

void get_bn_stats(const Container& c, UNet<float>& net) {
  for (auto& b : net.named_bns()) {
    const auto mean = c.get_f32("bn/" + b.name + "/running_mean");
    const auto var = c.get_f32("bn/" + b.name + "/running_var");
    b.bn->set_stats(mean, var);
  }
}

}  // namespace

void save_base_checkpoint(const fs::path& path, UNet<float>& net, std::uint64_t seed) {
  if (!net.adapters().empty())
    throw std::invalid_argument(
        "base checkpoint: model has adapters; merge or save an adapter checkpoint");
  Container c;
  c.put_string("meta/kind", "base");
  c.put("meta/format_version", TensorI({1}, {1}));
  const UNetConfig& cfg = net.config;
  c.put("meta/config",
        TensorI({5}, {int(cfg.input_channels), int(cfg.num_classes),
                      int(cfg.base_channels), int(cfg.depth), int(cfg.convs_per_block)}));
  put_u64(c, "meta/seed", seed);
  for (auto& p : net.named_params()) c.put("param/" + p.name, *p.tensor);
  put_bn_stats(c, net);
  c.save(path);
}

UNet<float> load_base_checkpoint(const fs::path& path, BaseCheckpointInfo* info) {
  Container c = Container::load(path);
  if (c.get_string("meta/kind") != "base")
    throw std::runtime_error(path.string() + " is not a base checkpoint");
  const auto ver = c.get_i32("meta/format_version");
  if (ver.size() != 1 || ver[0] != 1)
    throw std::runtime_error("base checkpoint: unsupported format version");
  const auto cfg_t = c.get_i32("meta/config");
  require_shape(cfg_t, {5}, "base checkpoint config");
  UNetConfig cfg{std::size_t(cfg_t[0]), std::size_t(cfg_t[1]), std::size_t(cfg_t[2]),
                 std::size_t(cfg_t[3]), std::size_t(cfg_t[4])};
  const std::uint64_t seed = get_u64(c, "meta/seed");

  UNet<float> net = UNet<float>::build(cfg, seed);
  for (auto& p : net.named_params()) {
    auto t = c.get_f32("param/" + p.name);
    require_shape(t, p.tensor->shape(), "base checkpoint param");
    *p.tensor = std::move(t);
  }
  get_bn_stats(c, net);
  net.snapshot_bn_source();  // stats at save time are the source reference
  net.set_bn_mode_all(BnMode::EVAL);
  if (info) {
    info->config = cfg;
    info->seed = seed;
  }
  return net;
}

void save_adapter_checkpoint(const fs::path& path, UNet<float>& adapted,
                             const AdapterMeta& meta) {
  auto ads = adapted.adapters();
  if (ads.empty())
    throw std::invalid_argument("adapter checkpoint: model has no adapters");
  if (meta.base_checksum.size() != 64)
    throw std::invalid_argument("adapter checkpoint: base checksum must be 64 hex chars");
  Container c;
  c.put_string("meta/kind", "adapter");
  c.put("meta/format_version", TensorI({1}, {1}));
  c.put_string("meta/base_checksum", meta.base_checksum);
  c.put_string("meta/domain_id", meta.domain_id);
  c.put("meta/rank", TensorI({1}, {meta.rank}));
  c.put_string("meta/selector", selector_to_string(meta.selector));
  put_u64(c, "meta/seed", meta.seed);
  for (auto& a : ads) {
    c.put("lora/" + a.conv_name + "/X", a.adapter->X);
    c.put("lora/" + a.conv_name + "/Y", a.adapter->Y);
  }
  put_bn_stats(c, adapted);
  c.save(path);
}

AdapterMeta read_adapter_meta(const fs::path& path) {
  Container c = Container::load(path);
  if (c.get_string("meta/kind") != "adapter")
    throw std::runtime_error(path.string() + " is not an adapter checkpoint");
  AdapterMeta m;
  m.domain_id = c.get_string("meta/domain_id");
  const auto rank_t = c.get_i32("meta/rank");
  m.rank = rank_t[0];
  m.selector = parse_selector(c.get_string("meta/selector"), SIZE_MAX);
  m.seed = get_u64(c, "meta/seed");
  m.base_checksum = c.get_string("meta/base_checksum");
  return m;
}

void apply_adapter_checkpoint(const fs::path& adapter_path, UNet<float>& net,
                              const fs::path& base_ckpt_path) {
  Container c = Container::load(adapter_path);
  if (c.get_string("meta/kind") != "adapter")
    throw std::runtime_error(adapter_path.string() + " is not an adapter checkpoint");
  const auto ver = c.get_i32("meta/format_version");
  if (ver.size() != 1 || ver[0] != 1)
    throw std::runtime_error("adapter checkpoint: unsupported format version");

  const std::string want = c.get_string("meta/base_checksum");
  const std::string have = to_hex(sha256_file(base_ckpt_path));
  if (want != have)
    throw std::runtime_error("adapter checkpoint: base checksum mismatch (expected " +
                             want + ", base file has " + have + ")");

  const auto rank_t = c.get_i32("meta/rank");
  const auto selector =
      parse_selector(c.get_string("meta/selector"), net.config.depth);
  const std::uint64_t seed = get_u64(c, "meta/seed");
  if (!net.adapters().empty())
    throw std::invalid_argument("apply adapter: model already has adapters");
  net.inject_convlora(selector, std::size_t(rank_t[0]), seed);

  for (auto& a : net.adapters()) {
    auto x = c.get_f32("lora/" + a.conv_name + "/X");
    auto y = c.get_f32("lora/" + a.conv_name + "/Y");
    require_shape(x, a.adapter->X.shape(), "adapter X");
    require_shape(y, a.adapter->Y.shape(), "adapter Y");
    a.adapter->X = std::move(x);
    a.adapter->Y = std::move(y);
  }
  get_bn_stats(c, net);  // adapted statistics; the source snapshot stays intact
  net.set_bn_mode_all(BnMode::EVAL);
}

}  // namespace convlora
