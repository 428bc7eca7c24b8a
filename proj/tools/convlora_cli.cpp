// Command-line front end: dataset generation, source training, head training,
// per-target adaptation (single runs or the full placement grid), evaluation,
// merging, and parameter accounting.
//
// Conventions shared by all subcommands: a JSON config file supplies defaults,
// any flag given on the command line overrides its file counterpart, unknown
// config keys are hard errors, and every output directory receives the
// effective configuration for provenance.  Reports and logs are plain text,
// written to a temporary file and renamed into place.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "convlora/checkpoint.hpp"
#include "convlora/pipeline.hpp"
#include "convlora/serialize.hpp"

using namespace convlora;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
  UNetConfig model = UNetConfig::desk();
  SuiteSpec data;
  PretrainSpec pretrain;
  EshSpec esh;
  AdaptSpec adapt;
  std::string adapt_blocks = "all";
  double eval_tolerance = 1.0;
};

void check_keys(const json& j, const std::string& where,
                const std::set<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("config: unknown key \"" + where + it.key() + "\"");
}

RunConfig load_config(const std::string& path) {
  RunConfig c;
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  json j = json::parse(in);
  check_keys(j, "", {"model", "data", "pretrain", "esh", "adapt", "eval"});

  if (j.contains("model")) {
    auto& m = j["model"];
    check_keys(m, "model.",
               {"input_channels", "num_classes", "base_channels", "depth",
                "convs_per_block"});
    if (m.contains("input_channels")) c.model.input_channels = m["input_channels"];
    if (m.contains("num_classes")) c.model.num_classes = m["num_classes"];
    if (m.contains("base_channels")) c.model.base_channels = m["base_channels"];
    if (m.contains("depth")) c.model.depth = m["depth"];
    if (m.contains("convs_per_block")) c.model.convs_per_block = m["convs_per_block"];
  }
  if (j.contains("data")) {
    auto& d = j["data"];
    check_keys(d, "data.", {"image_size", "n_train", "n_val", "n_test", "seed"});
    if (d.contains("image_size")) c.data.image_size = d["image_size"];
    if (d.contains("n_train")) c.data.n_train = d["n_train"];
    if (d.contains("n_val")) c.data.n_val = d["n_val"];
    if (d.contains("n_test")) c.data.n_test = d["n_test"];
    if (d.contains("seed")) c.data.seed = d["seed"];
  }
  if (j.contains("pretrain")) {
    auto& p = j["pretrain"];
    check_keys(p, "pretrain.", {"epochs", "batch_size", "lr", "seed"});
    if (p.contains("epochs")) c.pretrain.epochs = p["epochs"];
    if (p.contains("batch_size")) c.pretrain.batch_size = p["batch_size"];
    if (p.contains("lr")) c.pretrain.lr = p["lr"];
    if (p.contains("seed")) c.pretrain.seed = p["seed"];
  }
  if (j.contains("esh")) {
    auto& p = j["esh"];
    check_keys(p, "esh.", {"epochs", "batch_size", "lr", "seed"});
    if (p.contains("epochs")) c.esh.epochs = p["epochs"];
    if (p.contains("batch_size")) c.esh.batch_size = p["batch_size"];
    if (p.contains("lr")) c.esh.lr = p["lr"];
    if (p.contains("seed")) c.esh.seed = p["seed"];
  }
  if (j.contains("adapt")) {
    auto& a = j["adapt"];
    check_keys(a, "adapt.",
               {"epochs", "batch_size", "lr", "rank", "target_sample_count", "blocks",
                "adabn", "full_pass", "adabn_momentum", "seed"});
    if (a.contains("epochs")) c.adapt.epochs = a["epochs"];
    if (a.contains("batch_size")) c.adapt.batch_size = a["batch_size"];
    if (a.contains("lr")) c.adapt.lr = a["lr"];
    if (a.contains("rank")) c.adapt.rank = a["rank"];
    if (a.contains("target_sample_count")) c.adapt.target_sample_count = a["target_sample_count"];
    if (a.contains("blocks")) c.adapt_blocks = a["blocks"];
    if (a.contains("adabn")) c.adapt.adabn = a["adabn"];
    if (a.contains("full_pass")) c.adapt.full_pass = a["full_pass"];
    if (a.contains("adabn_momentum")) c.adapt.adabn_momentum = a["adabn_momentum"];
    if (a.contains("seed")) c.adapt.seed = a["seed"];
  }
  if (j.contains("eval")) {
    auto& e = j["eval"];
    check_keys(e, "eval.", {"tolerance"});
    if (e.contains("tolerance")) c.eval_tolerance = e["tolerance"];
  }
  return c;
}

json config_to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"input_channels", c.model.input_channels},
                {"num_classes", c.model.num_classes},
                {"base_channels", c.model.base_channels},
                {"depth", c.model.depth},
                {"convs_per_block", c.model.convs_per_block}};
  j["data"] = {{"image_size", c.data.image_size},
               {"n_train", c.data.n_train},
               {"n_val", c.data.n_val},
               {"n_test", c.data.n_test},
               {"seed", c.data.seed}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"seed", c.pretrain.seed}};
  j["esh"] = {{"epochs", c.esh.epochs},
              {"batch_size", c.esh.batch_size},
              {"lr", c.esh.lr},
              {"seed", c.esh.seed}};
  j["adapt"] = {{"epochs", c.adapt.epochs},
                {"batch_size", c.adapt.batch_size},
                {"lr", c.adapt.lr},
                {"rank", c.adapt.rank},
                {"target_sample_count", c.adapt.target_sample_count},
                {"blocks", c.adapt_blocks},
                {"adabn", c.adapt.adabn},
                {"full_pass", c.adapt.full_pass},
                {"adabn_momentum", c.adapt.adabn_momentum},
                {"seed", c.adapt.seed}};
  j["eval"] = {{"tolerance", c.eval_tolerance}};
  return j;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

void echo_config(const fs::path& out_dir, const RunConfig& c,
                 const std::string& command) {
  auto j = config_to_json(c);
  j["command"] = command;
  write_text_atomic(out_dir / "effective_config.json", j.dump(2) + "\n");
}

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

std::string train_log_text(const TrainReport& rep, double lr) {
  std::ostringstream os;
  for (std::size_t e = 0; e < rep.epoch_losses.size(); ++e) {
    char line[96];
    std::snprintf(line, sizeof line, "epoch %zu loss %.6f lr %g\n", e + 1,
                  rep.epoch_losses[e], lr);
    os << line;
  }
  return os.str();
}

struct SeedStats {
  double mean = 0.0, sd = 0.0;
};
SeedStats over_seeds(const std::vector<double>& v) {
  SeedStats s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - s.mean) * (x - s.mean);
  s.sd = std::sqrt(acc / static_cast<double>(v.size()));
  return s;
}

std::uint64_t rep_seed(std::uint64_t base, std::size_t i) {
  return derive_seed(base, "rep/" + std::to_string(i));
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const RunConfig& cfg, const std::string& out,
                 const std::string& cmdline) {
  generate_domain_suite(out, cfg.data);
  echo_config(out, cfg, cmdline);
  std::size_t per_domain = cfg.data.n_train + cfg.data.n_val + cfg.data.n_test;
  std::printf("wrote %zu samples x %zu domains to %s\n", per_domain,
              domain_suite().size(), out.c_str());
  return 0;
}

// ---------------------------------------------------------------- pretrain

int cmd_pretrain(const RunConfig& cfg, const std::string& data,
                 const std::string& out, const std::string& cmdline) {
  auto train = load_split(data, "source", "train");
  auto val = load_split(data, "source", "val");
  auto net = UNet<float>::build(cfg.model, derive_seed(cfg.pretrain.seed, "init"));
  std::printf("pretraining on %zu source images, %zu epochs\n", train.size(),
              cfg.pretrain.epochs);
  auto rep = pretrain_source(net, train, cfg.pretrain);
  auto v = evaluate(net, val, cfg.eval_tolerance);

  fs::create_directories(out);
  save_base_checkpoint(fs::path(out) / "base.clra", net, cfg.pretrain.seed);
  std::string log = train_log_text(rep, cfg.pretrain.lr);
  char tail[128];
  std::snprintf(tail, sizeof tail, "val sds %.4f dice %.4f over %zu images\n",
                v.mean_sds, v.mean_dice, val.size());
  write_text_atomic(fs::path(out) / "pretrain_log.txt", log + tail);
  echo_config(out, cfg, cmdline);
  std::printf("final loss %.6f, %s", rep.final_loss(), tail);
  return 0;
}

// ---------------------------------------------------------------- train-esh

int cmd_train_esh(const RunConfig& cfg, const std::string& base,
                  const std::string& data, const std::string& out,
                  const std::string& cmdline) {
  BaseCheckpointInfo info;
  auto net = load_base_checkpoint(base, &info);
  auto train = load_split(data, "source", "train");
  auto val = load_split(data, "source", "val");
  std::printf("training head on %zu source images, %zu epochs\n", train.size(),
              cfg.esh.epochs);
  auto rep = train_esh(net, train, cfg.esh);
  auto full = evaluate(net, val, cfg.eval_tolerance, EvalPath::FULL);
  auto head = evaluate(net, val, cfg.eval_tolerance, EvalPath::ESH);

  fs::create_directories(out);
  save_base_checkpoint(fs::path(out) / "base.clra", net, info.seed);
  std::string log = train_log_text(rep, cfg.esh.lr);
  char tail[160];
  std::snprintf(tail, sizeof tail,
                "val sds full %.4f head %.4f gap %.4f over %zu images\n",
                full.mean_sds, head.mean_sds, full.mean_sds - head.mean_sds,
                val.size());
  write_text_atomic(fs::path(out) / "esh_log.txt", log + tail);
  echo_config(out, cfg, cmdline);
  std::printf("final loss %.6f, %s", rep.final_loss(), tail);
  return 0;
}

// ---------------------------------------------------------------- adapt

std::vector<std::string> resolve_domains(const std::vector<std::string>& given) {
  if (given.empty()) return target_domain_ids();
  for (const auto& d : given) domain_by_id(d);  // validates
  return given;
}

int adapt_once(const RunConfig& cfg, const std::string& base, const std::string& data,
               const fs::path& out, const std::vector<std::string>& domains,
               std::size_t seeds, std::ostringstream& log) {
  BaseCheckpointInfo info;
  {
    auto probe = load_base_checkpoint(base, &info);
  }
  AdaptSpec spec = cfg.adapt;
  spec.selector = parse_selector(cfg.adapt_blocks, info.config.depth);

  for (std::size_t i = 0; i < seeds; ++i) {
    AdaptSpec s = spec;
    s.seed = rep_seed(cfg.adapt.seed, i);
    auto results = adapt_all_targets(base, data, domains, s, out / ("s" + std::to_string(i)));
    for (auto& r : results) {
      char line[160];
      std::snprintf(line, sizeof line,
                    "seed %zu domain %s epochs %zu first_loss %.6f last_loss %.6f\n",
                    i, r.domain_id.c_str(), r.report.epoch_losses.size(),
                    r.report.initial_loss(), r.report.final_loss());
      log << line;
    }
  }

  auto counted = load_base_checkpoint(base);
  counted.inject_convlora(spec.selector, spec.rank, 0);
  counted.apply_freeze_policy(Phase::ADAPT, spec.adabn);
  std::size_t trainable = counted.param_count(true), total = counted.param_count(false);
  char line[160];
  std::snprintf(line, sizeof line, "trainable %zu of %zu (%.4f%%)\n", trainable, total,
                100.0 * static_cast<double>(trainable) / static_cast<double>(total));
  log << line;
  return 0;
}

int cmd_adapt(const RunConfig& cfg, const std::string& base, const std::string& data,
              const std::string& out, const std::vector<std::string>& domain_flags,
              std::size_t seeds, bool matrix, const std::string& cmdline) {
  auto domains = resolve_domains(domain_flags);
  fs::create_directories(out);

  if (!matrix) {
    std::ostringstream log;
    adapt_once(cfg, base, data, fs::path(out), domains, seeds, log);
    write_text_atomic(fs::path(out) / "adapt_log.txt", log.str());
    echo_config(out, cfg, cmdline);
    std::fputs(log.str().c_str(), stdout);
    return 0;
  }

  // Placement grid: four pure low-rank placements of increasing extent, then
  // the full-encoder placement with target statistics re-estimation.
  struct Placement {
    const char* label;
    const char* blocks;
    bool adabn;
  };
  const std::vector<Placement> placements = {{"enc1", "1", false},
                                             {"enc1-2", "1-2", false},
                                             {"enc1-3", "1-3", false},
                                             {"full-enc", "all", false},
                                             {"full-enc+adabn", "all", true}};

  BaseCheckpointInfo info;
  auto source_net = load_base_checkpoint(base, &info);

  // rows: source baseline + placements; columns: domains + mean
  std::map<std::string, std::map<std::string, double>> table;
  for (const auto& d : domains) {
    auto test = load_split(data, d, "test");
    table["source"][d] = evaluate(source_net, test, cfg.eval_tolerance).mean_sds;
  }

  std::ostringstream log;
  for (const auto& p : placements) {
    RunConfig pc = cfg;
    pc.adapt_blocks = p.blocks;
    pc.adapt.adabn = p.adabn;
    auto pdir = fs::path(out) / "matrix" / p.label;
    adapt_once(pc, base, data, pdir, domains, seeds, log);

    for (const auto& d : domains) {
      auto test = load_split(data, d, "test");
      std::vector<double> seed_means;
      for (std::size_t i = 0; i < seeds; ++i) {
        auto net = load_base_checkpoint(base);
        apply_adapter_checkpoint(pdir / ("s" + std::to_string(i)) / ("adapter_" + d + ".clra"),
                                 net, base);
        seed_means.push_back(evaluate(net, test, cfg.eval_tolerance).mean_sds);
      }
      table[p.label][d] = over_seeds(seed_means).mean;
    }
    std::printf("placement %s done\n", p.label);
  }

  std::ostringstream rep;
  rep << "# mean surface dice over " << seeds << " seed(s), tolerance "
      << cfg.eval_tolerance << "\n";
  rep << "placement";
  for (const auto& d : domains) rep << " " << d;
  rep << " mean\n";
  auto emit_row = [&](const std::string& label) {
    rep << label;
    double acc = 0.0;
    for (const auto& d : domains) {
      char cell[32];
      std::snprintf(cell, sizeof cell, " %.4f", table[label][d]);
      rep << cell;
      acc += table[label][d];
    }
    char cell[32];
    std::snprintf(cell, sizeof cell, " %.4f\n", acc / static_cast<double>(domains.size()));
    rep << cell;
  };
  emit_row("source");
  for (const auto& p : placements) emit_row(p.label);

  write_text_atomic(fs::path(out) / "matrix_report.txt", rep.str());
  write_text_atomic(fs::path(out) / "adapt_log.txt", log.str());
  echo_config(out, cfg, cmdline);
  std::fputs(rep.str().c_str(), stdout);
  return 0;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const RunConfig& cfg, const std::string& base,
             const std::vector<std::string>& adapters, const std::string& data,
             std::string domain, const std::string& out, const std::string& cmdline) {
  std::ostringstream rep;
  if (adapters.empty()) {
    auto net = load_base_checkpoint(base);
    std::vector<std::string> domains;
    if (!domain.empty()) {
      domains = {domain};
    } else {
      domains = read_manifest(data).domains;
    }
    for (const auto& d : domains) {
      auto test = load_split(data, d, "test");
      auto r = evaluate(net, test, cfg.eval_tolerance);
      char line[160];
      std::snprintf(line, sizeof line, "domain %s sds %.4f +- %.4f dice %.4f +- %.4f\n",
                    d.c_str(), r.mean_sds, r.std_sds, r.mean_dice, r.std_dice);
      rep << line;
      for (std::size_t i = 0; i < test.size(); ++i) {
        std::snprintf(line, sizeof line, "image %s/%s sds %.4f dice %.4f\n", d.c_str(),
                      test[i].sample_id.c_str(), r.per_image_sds[i], r.per_image_dice[i]);
        rep << line;
      }
    }
  } else {
    // group adapter checkpoints by their stored domain
    std::map<std::string, std::vector<std::string>> by_domain;
    for (const auto& a : adapters) by_domain[read_adapter_meta(a).domain_id].push_back(a);
    if (!domain.empty() && by_domain.size() != 1)
      throw std::invalid_argument("eval: --domain with adapters from several domains");
    for (const auto& [d, paths] : by_domain) {
      auto test = load_split(data, d, "test");
      std::vector<double> sds, dice;
      for (const auto& a : paths) {
        auto net = load_base_checkpoint(base);
        apply_adapter_checkpoint(a, net, base);
        auto r = evaluate(net, test, cfg.eval_tolerance);
        char line[200];
        std::snprintf(line, sizeof line,
                      "adapter %s domain %s sds %.4f +- %.4f dice %.4f +- %.4f\n",
                      fs::path(a).filename().c_str(), d.c_str(), r.mean_sds, r.std_sds,
                      r.mean_dice, r.std_dice);
        rep << line;
        sds.push_back(r.mean_sds);
        dice.push_back(r.mean_dice);
      }
      auto s = over_seeds(sds);
      auto v = over_seeds(dice);
      char line[200];
      std::snprintf(line, sizeof line,
                    "domain %s seeds %zu sds %.4f +- %.4f dice %.4f +- %.4f\n", d.c_str(),
                    paths.size(), s.mean, s.sd, v.mean, v.sd);
      rep << line;
    }
  }

  if (!out.empty()) {
    write_text_atomic(fs::path(out) / "eval_report.txt", rep.str());
    echo_config(out, cfg, cmdline);
  }
  std::fputs(rep.str().c_str(), stdout);
  return 0;
}

// ---------------------------------------------------------------- merge

int cmd_merge(const RunConfig& cfg, const std::string& base, const std::string& adapter,
              const std::string& out, const std::string& cmdline) {
  BaseCheckpointInfo info;
  auto net = load_base_checkpoint(base, &info);
  apply_adapter_checkpoint(adapter, net, base);
  net.merge_all_adapters();
  fs::create_directories(out);
  save_base_checkpoint(fs::path(out) / "merged.clra", net, info.seed);
  echo_config(out, cfg, cmdline);
  std::printf("merged %s into %s\n", adapter.c_str(),
              (fs::path(out) / "merged.clra").c_str());
  return 0;
}

// ---------------------------------------------------------------- params

int cmd_params(const std::string& base, const std::string& adapter_spec) {
  auto net = load_base_checkpoint(base);
  net.apply_freeze_policy(Phase::ADAPT);
  if (!adapter_spec.empty()) {
    auto comma = adapter_spec.find(',');
    if (comma == std::string::npos)
      throw std::invalid_argument("params: --adapter-spec wants rank,blocks");
    std::size_t rank = std::stoul(adapter_spec.substr(0, comma));
    auto blocks = parse_selector(adapter_spec.substr(comma + 1), net.config.depth);
    net.inject_convlora(blocks, rank, 0);
    net.apply_freeze_policy(Phase::ADAPT);

    // full fine-tune of the adapted convolutions, for the reduction figure
    std::size_t layer_full = 0;
    for (auto& a : net.adapters())
      layer_full += a.adapter->frozen_kernel.size() + a.adapter->frozen_bias.size();
    std::size_t trainable = net.param_count(true), total = net.param_count(false);
    std::printf("total parameters: %zu\n", total);
    std::printf("trainable parameters: %zu\n", trainable);
    std::printf("adapted-layer full fine-tune count: %zu\n", layer_full);
    std::printf("reduction vs full fine-tune of those layers: %.2f%%\n",
                100.0 * (1.0 - static_cast<double>(trainable) /
                                   static_cast<double>(layer_full)));
    std::printf("trainable fraction of total: %.4f%%\n",
                100.0 * static_cast<double>(trainable) / static_cast<double>(total));
  } else {
    std::size_t trainable = net.param_count(true), total = net.param_count(false);
    std::printf("total parameters: %zu\n", total);
    std::printf("trainable parameters: %zu\n", trainable);
    std::printf("reduction: %.2f%%\n",
                100.0 * (1.0 - static_cast<double>(trainable) /
                                   static_cast<double>(total)));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank adapter domain adaptation for a small segmentation network"};
  app.require_subcommand(1);
  const std::string cmdline = join_args(argc, argv);

  std::string config_path, data, out, base, adapter, domain, adapter_spec;
  std::vector<std::string> domains, adapters;
  std::size_t seeds = 3;
  bool matrix = false, adabn_flag = true, full_pass = false;
  std::size_t epochs = 0, batch_size = 0, n_train = 0, n_test = 0, size = 0, count = 0,
              rank = 0;
  std::uint64_t seed = 0;
  double lr = 0.0, tolerance = 0.0;
  std::string blocks;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
  };

  auto* g = app.add_subcommand("gen-data", "write the synthetic six-domain suite");
  add_config(g);
  g->add_option("--out", out, "output directory")->required();
  auto* g_seed = g->add_option("--seed", seed, "generation seed");
  auto* g_size = g->add_option("--size", size, "image side length");
  auto* g_ntr = g->add_option("--n-train", n_train, "training images per domain");
  auto* g_nte = g->add_option("--n-test", n_test, "test images per domain");

  auto* p = app.add_subcommand("pretrain", "train the source model");
  add_config(p);
  p->add_option("--data", data, "dataset root")->required();
  p->add_option("--out", out, "output directory")->required();
  auto* p_epochs = p->add_option("--epochs", epochs, "training epochs");
  auto* p_batch = p->add_option("--batch-size", batch_size, "batch size");
  auto* p_lr = p->add_option("--lr", lr, "learning rate");
  auto* p_seed = p->add_option("--seed", seed, "training seed");

  auto* e = app.add_subcommand("train-esh", "train the early segmentation head");
  add_config(e);
  e->add_option("--base", base, "base checkpoint")->required();
  e->add_option("--data", data, "dataset root")->required();
  e->add_option("--out", out, "output directory")->required();
  auto* e_epochs = e->add_option("--epochs", epochs, "training epochs");
  auto* e_lr = e->add_option("--lr", lr, "learning rate");
  auto* e_seed = e->add_option("--seed", seed, "training seed");

  auto* a = app.add_subcommand("adapt", "adapt to target domains");
  add_config(a);
  a->add_option("--base", base, "base checkpoint")->required();
  a->add_option("--data", data, "dataset root")->required();
  a->add_option("--out", out, "output directory")->required();
  a->add_option("--target-domain", domains, "target domain (repeatable; default all)");
  auto* a_rank = a->add_option("--rank", rank, "factor rank");
  auto* a_blocks = a->add_option("--blocks", blocks, "encoder blocks: 1 | 1-2 | 1-3 | all");
  auto* a_adabn =
      a->add_option("--adabn", adabn_flag, "re-estimate BN statistics on target")
          ->transform(CLI::CheckedTransformer(
              std::map<std::string, bool>{{"on", true}, {"off", false}}));
  a->add_option("--seeds", seeds, "number of seed replicates");
  auto* a_epochs = a->add_option("--epochs", epochs, "adaptation epochs");
  auto* a_batch = a->add_option("--batch-size", batch_size, "batch size");
  auto* a_lr = a->add_option("--lr", lr, "learning rate");
  auto* a_seed = a->add_option("--seed", seed, "adaptation seed");
  auto* a_count = a->add_option("--count", count, "target images used");
  auto* a_full = a->add_flag("--full-pass", full_pass,
                             "exact one-sweep target statistics instead of EMA");
  a->add_flag("--matrix", matrix, "run the full placement grid and emit a table");

  auto* v = app.add_subcommand("eval", "evaluate a checkpoint");
  add_config(v);
  v->add_option("--base", base, "base checkpoint")->required();
  v->add_option("--adapter", adapters, "adapter checkpoint (repeatable)");
  v->add_option("--data", data, "dataset root")->required();
  v->add_option("--domain", domain, "domain to evaluate");
  auto* v_tol = v->add_option("--tolerance", tolerance, "surface dice tolerance, px");
  v->add_option("--out", out, "report directory");

  auto* m = app.add_subcommand("merge", "fold an adapter into a standalone checkpoint");
  add_config(m);
  m->add_option("--base", base, "base checkpoint")->required();
  m->add_option("--adapter", adapter, "adapter checkpoint")->required();
  m->add_option("--out", out, "output directory")->required();

  auto* q = app.add_subcommand("params", "parameter accounting");
  q->add_option("--base", base, "base checkpoint")->required();
  q->add_option("--adapter-spec", adapter_spec, "rank,blocks of a hypothetical adapter");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = load_config(config_path);

    if (g->parsed()) {
      if (g_seed->count()) cfg.data.seed = seed;
      if (g_size->count()) cfg.data.image_size = size;
      if (g_ntr->count()) {
        cfg.data.n_train = n_train;
        cfg.data.n_val = std::max<std::size_t>(2, n_train / 8);
      }
      if (g_nte->count()) cfg.data.n_test = n_test;
      return cmd_gen_data(cfg, out, cmdline);
    }
    if (p->parsed()) {
      if (p_epochs->count()) cfg.pretrain.epochs = epochs;
      if (p_batch->count()) cfg.pretrain.batch_size = batch_size;
      if (p_lr->count()) cfg.pretrain.lr = lr;
      if (p_seed->count()) cfg.pretrain.seed = seed;
      return cmd_pretrain(cfg, data, out, cmdline);
    }
    if (e->parsed()) {
      if (e_epochs->count()) cfg.esh.epochs = epochs;
      if (e_lr->count()) cfg.esh.lr = lr;
      if (e_seed->count()) cfg.esh.seed = seed;
      return cmd_train_esh(cfg, base, data, out, cmdline);
    }
    if (a->parsed()) {
      if (a_rank->count()) cfg.adapt.rank = rank;
      if (a_blocks->count()) cfg.adapt_blocks = blocks;
      if (a_adabn->count()) cfg.adapt.adabn = adabn_flag;
      if (a_epochs->count()) cfg.adapt.epochs = epochs;
      if (a_batch->count()) cfg.adapt.batch_size = batch_size;
      if (a_lr->count()) cfg.adapt.lr = lr;
      if (a_seed->count()) cfg.adapt.seed = seed;
      if (a_count->count()) cfg.adapt.target_sample_count = count;
      if (a_full->count()) cfg.adapt.full_pass = full_pass;
      return cmd_adapt(cfg, base, data, out, domains, seeds, matrix, cmdline);
    }
    if (v->parsed()) {
      if (v_tol->count()) cfg.eval_tolerance = tolerance;
      return cmd_eval(cfg, base, adapters, data, domain, out, cmdline);
    }
    if (m->parsed()) return cmd_merge(cfg, base, adapter, out, cmdline);
    if (q->parsed()) return cmd_params(base, adapter_spec);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 1;
}
