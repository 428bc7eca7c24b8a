#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "convlora/serialize.hpp"

using doctest::Contains;
namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  if (const char* env = std::getenv("CONVLORA_CLI")) return env;
  return "../tools/convlora";
}

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunResult run(const std::string& args) {
  auto dir = fs::temp_directory_path() / "convlora_cli_test";
  fs::create_directories(dir);
  auto out_f = dir / "stdout.txt";
  auto err_f = dir / "stderr.txt";
  std::string cmd = cli_path() + " " + args + " > " + out_f.string() + " 2> " +
                    err_f.string();
  int rc = std::system(cmd.c_str());
  RunResult r;
  r.code = WEXITSTATUS(rc);
  r.out = slurp(out_f);
  r.err = slurp(err_f);
  return r;
}

// One tiny dataset + pretrained/head-trained base, shared across cases.
struct Fixture {
  fs::path root;
  fs::path data;
  fs::path cfg;
  fs::path base;  // after head training
};

const Fixture& fixture() {
  static Fixture f = [] {
    Fixture x;
    x.root = fs::temp_directory_path() / "convlora_cli_test" / "fix";
    fs::remove_all(x.root);
    fs::create_directories(x.root);
    x.data = x.root / "data";
    x.cfg = x.root / "cfg.json";
    std::ofstream(x.cfg) << R"({
      "model": {"base_channels": 4, "depth": 2},
      "data": {"image_size": 16, "n_train": 6, "n_val": 2, "n_test": 2, "seed": 5},
      "pretrain": {"epochs": 10, "batch_size": 3, "seed": 3},
      "esh": {"epochs": 4, "batch_size": 3, "seed": 4},
      "adapt": {"epochs": 1, "target_sample_count": 4, "seed": 6}
    })";
    auto g = run("gen-data --config " + x.cfg.string() + " --out " + x.data.string());
    if (g.code != 0) throw std::runtime_error("fixture gen-data failed: " + g.err);
    auto p = run("pretrain --config " + x.cfg.string() + " --data " + x.data.string() +
                 " --out " + (x.root / "pre").string());
    if (p.code != 0) throw std::runtime_error("fixture pretrain failed: " + p.err);
    auto e = run("train-esh --config " + x.cfg.string() + " --base " +
                 (x.root / "pre" / "base.clra").string() + " --data " + x.data.string() +
                 " --out " + (x.root / "esh").string());
    if (e.code != 0) throw std::runtime_error("fixture train-esh failed: " + e.err);
    x.base = x.root / "esh" / "base.clra";
    return x;
  }();
  return f;
}

double parse_after(const std::string& text, const std::string& key) {
  auto pos = text.find(key);
  REQUIRE(pos != std::string::npos);
  return std::stod(text.substr(pos + key.size()));
}

}  // namespace

TEST_CASE("gen-data writes a complete suite and an effective config") {
  const auto& f = fixture();
  CHECK(fs::exists(f.data / "manifest.txt"));
  CHECK(fs::exists(f.data / "effective_config.json"));
  auto manifest = slurp(f.data / "manifest.txt");
  for (const char* d : {"source", "mild", "light", "moderate", "strong", "severe"})
    CHECK(manifest.find(d) != std::string::npos);
  auto echoed = slurp(f.data / "effective_config.json");
  CHECK(echoed.find("\"seed\": 5") != std::string::npos);
  CHECK(echoed.find("\"command\"") != std::string::npos);
}

TEST_CASE("unknown config keys are rejected") {
  const auto& f = fixture();
  auto bad = f.root / "bad.json";
  std::ofstream(bad) << R"({"pretrain": {"epoch": 3}})";
  auto r = run("pretrain --config " + bad.string() + " --data " + f.data.string() +
               " --out " + (f.root / "never").string());
  CHECK(r.code != 0);
  CHECK(r.err.find("unknown key") != std::string::npos);
  CHECK(r.err.find("epoch") != std::string::npos);
  CHECK_FALSE(fs::exists(f.root / "never" / "base.clra"));
}

TEST_CASE("pretraining emits checkpoint, line log, and config echo") {
  const auto& f = fixture();
  CHECK(fs::exists(f.root / "pre" / "base.clra"));
  auto log = slurp(f.root / "pre" / "pretrain_log.txt");
  CHECK(log.find("epoch 1 loss ") != std::string::npos);
  CHECK(log.find("epoch 10 loss ") != std::string::npos);
  CHECK(log.find("lr 0.001") != std::string::npos);
  CHECK(log.find("val sds ") != std::string::npos);
  auto echoed = slurp(f.root / "pre" / "effective_config.json");
  CHECK(echoed.find("\"epochs\": 10") != std::string::npos);
}

TEST_CASE("flags override their config file counterparts") {
  const auto& f = fixture();
  auto out = f.root / "override";
  auto r = run("pretrain --config " + f.cfg.string() + " --data " + f.data.string() +
               " --out " + out.string() + " --epochs 2");
  REQUIRE(r.code == 0);
  auto log = slurp(out / "pretrain_log.txt");
  CHECK(log.find("epoch 2 loss ") != std::string::npos);
  CHECK(log.find("epoch 3 loss ") == std::string::npos);
  auto echoed = slurp(out / "effective_config.json");
  CHECK(echoed.find("\"epochs\": 2") != std::string::npos);
}

TEST_CASE("head training writes its own artifacts") {
  const auto& f = fixture();
  CHECK(fs::exists(f.base));
  auto log = slurp(f.root / "esh" / "esh_log.txt");
  CHECK(log.find("epoch 4 loss ") != std::string::npos);
  CHECK(log.find("val sds full ") != std::string::npos);
}

TEST_CASE("narrower placements train fewer parameters") {
  const auto& f = fixture();
  auto run_adapt = [&](const std::string& blocks, const fs::path& out) {
    auto r = run("adapt --config " + f.cfg.string() + " --base " + f.base.string() +
                 " --data " + f.data.string() + " --out " + out.string() +
                 " --target-domain mild --seeds 1 --blocks " + blocks);
    REQUIRE(r.code == 0);
    return parse_after(slurp(out / "adapt_log.txt"), "trainable ");
  };
  auto narrow = run_adapt("1", f.root / "adapt_b1");
  auto wide = run_adapt("all", f.root / "adapt_ball");
  CHECK(narrow < wide);
  CHECK(fs::exists(f.root / "adapt_b1" / "s0" / "adapter_mild.clra"));
}

TEST_CASE("adaptation outputs are deterministic in the seed") {
  const auto& f = fixture();
  for (const char* out : {"det1", "det2"}) {
    auto r = run("adapt --config " + f.cfg.string() + " --base " + f.base.string() +
                 " --data " + f.data.string() + " --out " + (f.root / out).string() +
                 " --target-domain light --seeds 1");
    REQUIRE(r.code == 0);
  }
  auto h1 = convlora::to_hex(
      convlora::sha256_file(f.root / "det1" / "s0" / "adapter_light.clra"));
  auto h2 = convlora::to_hex(
      convlora::sha256_file(f.root / "det2" / "s0" / "adapter_light.clra"));
  CHECK(h1 == h2);
}

TEST_CASE("evaluation aggregates adapter seeds and matches the merged model") {
  const auto& f = fixture();
  auto out = f.root / "adapt_eval";
  auto r = run("adapt --config " + f.cfg.string() + " --base " + f.base.string() +
               " --data " + f.data.string() + " --out " + out.string() +
               " --target-domain mild --seeds 2");
  REQUIRE(r.code == 0);

  auto ev = run("eval --base " + f.base.string() + " --adapter " +
                (out / "s0" / "adapter_mild.clra").string() + " --adapter " +
                (out / "s1" / "adapter_mild.clra").string() + " --data " +
                f.data.string() + " --out " + (f.root / "eval").string());
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("domain mild seeds 2 sds ") != std::string::npos);
  CHECK(fs::exists(f.root / "eval" / "eval_report.txt"));

  auto mg = run("merge --base " + f.base.string() + " --adapter " +
                (out / "s0" / "adapter_mild.clra").string() + " --out " +
                (f.root / "merge").string());
  REQUIRE(mg.code == 0);
  auto ev_adapter = run("eval --base " + f.base.string() + " --adapter " +
                        (out / "s0" / "adapter_mild.clra").string() + " --data " +
                        f.data.string());
  auto ev_merged = run("eval --base " + (f.root / "merge" / "merged.clra").string() +
                       " --data " + f.data.string() + " --domain mild");
  REQUIRE(ev_adapter.code == 0);
  REQUIRE(ev_merged.code == 0);
  CHECK(parse_after(ev_adapter.out, "sds ") ==
        doctest::Approx(parse_after(ev_merged.out, "sds ")).epsilon(1e-5));
}

TEST_CASE("failures exit nonzero with a message") {
  const auto& f = fixture();
  auto r = run("eval --base /nonexistent.clra --data " + f.data.string());
  CHECK(r.code != 0);
  CHECK(r.err.find("error:") != std::string::npos);

  auto bad_blocks = run("adapt --config " + f.cfg.string() + " --base " +
                        f.base.string() + " --data " + f.data.string() + " --out " +
                        (f.root / "nope").string() + " --blocks 9");
  CHECK(bad_blocks.code != 0);

  auto bad_domain = run("adapt --config " + f.cfg.string() + " --base " +
                        f.base.string() + " --data " + f.data.string() + " --out " +
                        (f.root / "nope2").string() + " --target-domain venus");
  CHECK(bad_domain.code != 0);
}
