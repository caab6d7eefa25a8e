#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "satts/cli.hpp"
#include "satts/io.hpp"
#include "satts/srcstats.hpp"
#include "satts/surrogate.hpp"

using namespace satts;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("satts_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bytes(const std::string& a, const std::string& b) {
  return io::read_file_bytes(a) == io::read_file_bytes(b);
}

// One tiny end-to-end pipeline, built once and shared read-only by the cases.
// Datasets are deliberately small so the whole suite stays fast.
struct Workspace {
  TempDir dir;
  std::string data_dir, ckpt, ckpt_other, artifact;

  Workspace() {
    data_dir = dir.file("data");
    REQUIRE(cli::run({"gen", "--task", "bump", "--grid-size", "16", "--gap", "1", "--n-train",
                      "64", "--n-val", "32", "--n-target", "48", "--noise", "0.01", "--seed", "5",
                      "--out", data_dir}) == 0);

    const std::string pre = dir.file("pre");
    REQUIRE(cli::run({"pretrain", "--data", data_dir, "--out", pre, "--hidden", "16", "--latent",
                      "6", "--epochs", "8", "--patience", "8", "--batch-size", "32", "--seed",
                      "1"}) == 0);
    ckpt = pre + "/checkpoint.sttc";

    const std::string pre2 = dir.file("pre_other");
    REQUIRE(cli::run({"pretrain", "--data", data_dir, "--out", pre2, "--hidden", "16", "--latent",
                      "6", "--epochs", "8", "--patience", "8", "--batch-size", "32", "--seed",
                      "9"}) == 0);
    ckpt_other = pre2 + "/checkpoint.sttc";

    artifact = dir.file("artifact.stta");
    REQUIRE(cli::run({"stats", "--checkpoint", ckpt, "--data", data_dir + "/val.sttd", "--m", "6",
                      "--tau", "0.95", "--out", artifact}) == 0);
  }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

}  // namespace

// ===== gen =================================================================

TEST_CASE("gen writes datasets and an audit manifest") {
  const std::string dir = ws().data_dir;
  CHECK(fs::exists(dir + "/train.sttd"));
  CHECK(fs::exists(dir + "/val.sttd"));
  CHECK(fs::exists(dir + "/target.sttd"));
  CHECK(fs::exists(dir + "/manifest.jsonl"));

  std::ifstream in(dir + "/manifest.jsonl");
  std::string line;
  REQUIRE(std::getline(in, line));
  const json entry = json::parse(line);
  CHECK(entry.at("command") == "gen");
  CHECK(entry.at("resolved").at("grid_size") == 16);
  CHECK(entry.at("outputs").size() == 3);
  for (const auto& [path, crc] : entry.at("outputs").items()) {
    CHECK(crc.get<std::string>().size() == 8);  // crc32 hex of each written file
    CHECK(fs::exists(path));
  }
}

TEST_CASE("gen is deterministic for a fixed seed") {
  TempDir tmp;
  const std::vector<std::string> base = {"gen",     "--task", "bump", "--grid-size", "16",
                                         "--gap",   "1",      "--n-train", "64", "--n-val", "32",
                                         "--n-target", "48",  "--noise", "0.01"};
  auto with = [&](const std::string& seed, const std::string& out) {
    std::vector<std::string> args = base;
    args.insert(args.end(), {"--seed", seed, "--out", out});
    return args;
  };
  REQUIRE(cli::run(with("5", tmp.file("a"))) == 0);
  REQUIRE(cli::run(with("5", tmp.file("b"))) == 0);
  REQUIRE(cli::run(with("6", tmp.file("c"))) == 0);

  CHECK(same_bytes(tmp.file("a") + "/train.sttd", tmp.file("b") + "/train.sttd"));
  CHECK(same_bytes(tmp.file("a") + "/target.sttd", tmp.file("b") + "/target.sttd"));
  CHECK_FALSE(same_bytes(tmp.file("a") + "/train.sttd", tmp.file("c") + "/train.sttd"));
}

TEST_CASE("gen rejects bad usage without writing files") {
  TempDir tmp;
  CHECK(cli::run({"gen", "--task", "pendulum", "--out", tmp.file("x")}) == 2);
  CHECK(cli::run({"gen", "--gap", "9", "--out", tmp.file("x")}) == 2);

  // overlapping source/target bands supplied through a config file
  const std::string cfg = tmp.file("bands.json");
  {
    std::ofstream out(cfg);
    out << R"({"shift_src": {"lo": 0.2, "hi": 0.5}, "shift_tgt": {"lo": 0.4, "hi": 0.7}})";
  }
  CHECK(cli::run({"gen", "--config", cfg, "--out", tmp.file("x")}) == 2);
  CHECK_FALSE(fs::exists(tmp.file("x") + "/train.sttd"));
}

// ===== pretrain ============================================================

TEST_CASE("pretrain produces a loadable checkpoint and a history log") {
  surrogate::SurrogateModel model = surrogate::load_checkpoint(ws().ckpt);
  CHECK(model.spec().hidden == std::vector<int>{16});
  CHECK(model.spec().latent_dim == 6);
  CHECK(model.spec().input_dim == 3);

  const std::string history = fs::path(ws().ckpt).parent_path() / "history.csv";
  const std::string text = slurp(history);
  CHECK(text.rfind("epoch,train_loss,val_loss,val_rmse,lr", 0) == 0);
  int lines = 0;
  for (char c : text)
    if (c == '\n') ++lines;
  CHECK(lines >= 2);  // header plus at least one epoch row
}

TEST_CASE("pretrain is deterministic for a fixed seed") {
  TempDir tmp;
  auto train_to = [&](const std::string& out) {
    return cli::run({"pretrain", "--data", ws().data_dir, "--out", out, "--hidden", "16",
                     "--latent", "6", "--epochs", "4", "--patience", "4", "--batch-size", "32",
                     "--seed", "3"});
  };
  REQUIRE(train_to(tmp.file("p1")) == 0);
  REQUIRE(train_to(tmp.file("p2")) == 0);
  CHECK(same_bytes(tmp.file("p1") + "/checkpoint.sttc", tmp.file("p2") + "/checkpoint.sttc"));
}

// ===== stats ===============================================================

TEST_CASE("stats binds the artifact to the exact checkpoint file") {
  const srcstats::SourceStatsArtifact art = srcstats::load_artifact(ws().artifact);
  CHECK(art.checkpoint_crc == io::file_crc32_hex(ws().ckpt));
  CHECK(art.subset.m() == 6);
  CHECK(art.stats.retained >= 1);
  REQUIRE(static_cast<int>(art.stats.alpha.size()) == art.stats.retained);
  for (double a : art.stats.alpha) CHECK(a >= 1.0);
}

// ===== adapt ===============================================================

TEST_CASE("adapt method none copies the checkpoint untouched") {
  TempDir tmp;
  const std::string out = tmp.file("none");
  REQUIRE(cli::run({"adapt", "--checkpoint", ws().ckpt, "--data", ws().data_dir + "/target.sttd",
                    "--method", "none", "--out", out}) == 0);
  CHECK(same_bytes(out + "/adapted.sttc", ws().ckpt));
}

TEST_CASE("adapt satts writes the adapted model, trace, and selection report") {
  TempDir tmp;
  const std::string out = tmp.file("satts");
  REQUIRE(cli::run({"adapt", "--checkpoint", ws().ckpt, "--artifact", ws().artifact, "--data",
                    ws().data_dir + "/target.sttd", "--method", "satts", "--grid", "0.01,0.002",
                    "--batch-size", "16", "--out", out}) == 0);

  surrogate::SurrogateModel adapted = surrogate::load_checkpoint(out + "/adapted.sttc");
  CHECK(adapted.spec().latent_dim == 6);

  const std::string trace = slurp(out + "/trace.csv");
  CHECK(trace.rfind("step,", 0) == 0);

  const std::string report = slurp(out + "/selection.txt");
  CHECK(report.find("grid: 0.01 0.002") != std::string::npos);
  CHECK(report.find("chosen_lr") != std::string::npos);

  std::ifstream in(out + "/manifest.jsonl");
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(json::parse(line).at("command") == "adapt");
}

TEST_CASE("adapt refuses an artifact built from a different checkpoint") {
  TempDir tmp;
  CHECK(cli::run({"adapt", "--checkpoint", ws().ckpt_other, "--artifact", ws().artifact, "--data",
                  ws().data_dir + "/target.sttd", "--method", "satts", "--grid", "0.01", "--out",
                  tmp.file("x")}) == 2);
}

TEST_CASE("adapt validates method, alpha mode, grid, and required options") {
  TempDir tmp;
  const std::string tgt = ws().data_dir + "/target.sttd";
  CHECK(cli::run({"adapt", "--checkpoint", ws().ckpt, "--artifact", ws().artifact, "--data", tgt,
                  "--method", "bogus", "--out", tmp.file("x")}) == 2);
  CHECK(cli::run({"adapt", "--checkpoint", ws().ckpt, "--artifact", ws().artifact, "--data", tgt,
                  "--alpha-mode", "bogus", "--out", tmp.file("x")}) == 2);
  CHECK(cli::run({"adapt", "--checkpoint", ws().ckpt, "--artifact", ws().artifact, "--data", tgt,
                  "--grid", "0.01,abc", "--out", tmp.file("x")}) == 2);
  CHECK(cli::run({"adapt", "--data", tgt, "--out", tmp.file("x")}) == 2);          // no checkpoint
  CHECK(cli::run({"adapt", "--checkpoint", ws().ckpt, "--data", tgt, "--method", "satts", "--out",
                  tmp.file("x")}) == 2);  // satts needs an artifact
}

// ===== eval ================================================================

TEST_CASE("eval writes a metrics file") {
  TempDir tmp;
  const std::string out = tmp.file("metrics.json");
  REQUIRE(cli::run({"eval", "--checkpoint", ws().ckpt, "--data", ws().data_dir + "/val.sttd",
                    "--out", out}) == 0);
  const json metrics = json::parse(slurp(out));
  CHECK(metrics.at("rmse").get<double>() >= 0.0);
  CHECK(metrics.at("mae").get<double>() >= 0.0);
  CHECK(metrics.at("r2").get<double>() <= 1.0);
}

// ===== failure modes =======================================================

TEST_CASE("missing or corrupt files exit with the file error code") {
  TempDir tmp;
  CHECK(cli::run({"eval", "--checkpoint", tmp.file("no_such.sttc"), "--data",
                  ws().data_dir + "/val.sttd", "--out", tmp.file("m.json")}) == 4);
  CHECK(cli::run({"eval", "--checkpoint", ws().ckpt, "--data", tmp.file("no_such.sttd"), "--out",
                  tmp.file("m.json")}) == 4);

  // flip one payload byte in a copy of the checkpoint
  std::vector<uint8_t> bytes = io::read_file_bytes(ws().ckpt);
  bytes[bytes.size() / 2] ^= 0xFF;
  io::write_file_bytes(tmp.file("bad.sttc"), bytes);
  CHECK(cli::run({"eval", "--checkpoint", tmp.file("bad.sttc"), "--data",
                  ws().data_dir + "/val.sttd", "--out", tmp.file("m.json")}) == 4);
}

TEST_CASE("usage errors exit with the usage code") {
  CHECK(cli::run({}) == 2);                  // a subcommand is required
  CHECK(cli::run({"frobnicate"}) == 2);      // unknown subcommand
  CHECK(cli::run({"stats"}) == 2);           // missing --checkpoint / --data
  CHECK(cli::run({"eval", "--data", ws().data_dir + "/val.sttd"}) == 2);
}

// ===== bench ===============================================================

TEST_CASE("bench refuses the oracle arm without explicit acknowledgement") {
  TempDir tmp;
  const std::string out = tmp.file("bench");
  CHECK(cli::run({"bench", "--methods", "source,oracle", "--seeds", "1", "--epochs", "2",
                  "--grid-size", "16", "--out", out}) == 2);
  CHECK_FALSE(fs::exists(out + "/report.json"));
}

TEST_CASE("bench tiny run emits the report bundle") {
  TempDir tmp;
  const std::string out = tmp.file("bench");
  REQUIRE(cli::run({"bench", "--methods", "source,oracle", "--oracle-labels", "--seeds", "1",
                    "--epochs", "2", "--grid-size", "16", "--latent", "6", "--out", out}) == 0);
  CHECK(fs::exists(out + "/table.txt"));
  CHECK(fs::exists(out + "/plot.svg"));
  CHECK(fs::exists(out + "/manifest.jsonl"));

  const json report = json::parse(slurp(out + "/report.json"));
  REQUIRE(report.at("arms").size() == 2);
  std::vector<std::string> methods;
  for (const auto& arm : report.at("arms")) methods.push_back(arm.at("method"));
  CHECK(methods == std::vector<std::string>{"source", "oracle"});
  CHECK(report.at("pad").get<double>() >= 0.0);
}
