// End-to-end tests for the command-line tool: spawn the real binary (its path
// is injected by the build as PII_CLI_PATH), drive train / invert / sweep /
// evaluate through a scratch directory, and check exit codes, the JSON lines
// on stdout/stderr and byte-level artifact reproducibility.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "pii/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE_MESSAGE(f.good(), "cannot open " << p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct CmdResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI through /bin/sh so env assignments can prefix the command.
CmdResult run_cli(const fs::path& scratch, const std::string& args,
                  const std::string& env_prefix = "") {
  static int call = 0;
  fs::path so = scratch / ("stdout_" + std::to_string(call) + ".txt");
  fs::path se = scratch / ("stderr_" + std::to_string(call) + ".txt");
  ++call;
  std::string cmd = env_prefix + (env_prefix.empty() ? "" : " ") + PII_CLI_PATH + " " + args +
                    " >" + so.string() + " 2>" + se.string();
  int rc = std::system(cmd.c_str());
  CmdResult r;
  r.exit_code = (rc >= 0 && WIFEXITED(rc)) ? WEXITSTATUS(rc) : -1;
  r.out = slurp(so);
  r.err = slurp(se);
  return r;
}

// One scratch directory and one trained model shared by every case; training
// through the CLI is the expensive step so it runs once.
struct Fixture {
  fs::path root;
  fs::path model;
  json train_report;

  Fixture() {
    root = fs::temp_directory_path() / ("pii_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    model = root / "judge.pii";
    CmdResult r = run_cli(root, "train --arch cnn_bn --epochs 1 --seed 7 --out " + model.string());
    REQUIRE_MESSAGE(r.exit_code == 0, r.err);
    train_report = json::parse(r.out);
  }
  ~Fixture() { fs::remove_all(root); }
};

Fixture& fx() {
  static Fixture f;
  return f;
}

// Cheap inversion settings reused across cases; two stages keep the staged
// schedule on the execution path without costing real time.
std::string tiny_flags() {
  return "--resolution 16 --stages 2 --iters 4 --ensemble 2 --lr 0.05 --seed 11 --jitter 1";
}

}  // namespace

TEST_CASE("train reports accuracy and writes loadable weights") {
  Fixture& f = fx();
  CHECK(f.train_report.at("arch") == "cnn_bn");
  CHECK(f.train_report.at("dataset") == "synthetic");
  CHECK(f.train_report.at("epochs") == 1);
  CHECK(f.train_report.at("seed") == 7);
  CHECK(f.train_report.at("test_accuracy").get<double>() > 0.3);
  CHECK(f.train_report.at("out") == f.model.string());
  CHECK(fs::exists(f.model));
  CHECK(fs::exists(f.model.string() + ".json"));

  json manifest = json::parse(slurp(f.model.string() + ".json"));
  CHECK(manifest.at("arch") == "cnn_bn");
  CHECK(manifest.at("num_classes") == 10);
  CHECK(manifest.at("weight_hash") == f.train_report.at("weight_hash"));
  CHECK(manifest.at("normalization").at("mean").size() == 3);
}

TEST_CASE("invert writes PNG, sidecar and trace, and reruns are byte-identical") {
  Fixture& f = fx();
  std::string base = "invert --model " + f.model.string() + " --class 3 " + tiny_flags();
  fs::path a = f.root / "a.png";
  fs::path b = f.root / "b.png";

  CmdResult ra = run_cli(f.root, base + " --out " + a.string() + " --trace " +
                                     (f.root / "a.jsonl").string());
  REQUIRE_MESSAGE(ra.exit_code == 0, ra.err);
  json ja = json::parse(ra.out);
  CHECK(ja.at("final_resolution") == 16);
  CHECK(ja.at("stages") == 2);
  CHECK(ja.at("seed") == 11);
  CHECK(std::isfinite(ja.at("losses").at("total").get<double>()));
  double conf = ja.at("judge_scores").at("self_confidence").get<double>();
  CHECK(conf >= 0.0);
  CHECK(conf <= 1.0);

  CmdResult rb = run_cli(f.root, base + " --out " + b.string() + " --trace " +
                                     (f.root / "b.jsonl").string());
  REQUIRE(rb.exit_code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(f.root / "a.json") == slurp(f.root / "b.json"));
  CHECK(slurp(f.root / "a.jsonl") == slurp(f.root / "b.jsonl"));

  // 2 stages x 4 iterations; records carry 1-based stage numbers.
  std::istringstream trace(slurp(f.root / "a.jsonl"));
  std::string line;
  int lines = 0;
  while (std::getline(trace, line)) {
    if (lines == 0) {
      json rec = json::parse(line);
      CHECK(rec.at("stage") == 1);
      CHECK(rec.at("iteration") == 0);
      CHECK(rec.at("lr").get<double>() == doctest::Approx(0.05));
    }
    ++lines;
  }
  CHECK(lines == 8);

  json sidecar = json::parse(slurp(f.root / "a.json"));
  CHECK(sidecar.at("config").at("target_class") == 3);
  CHECK(sidecar.at("config").at("mode") == "zoom_and_center");
  CHECK(sidecar.at("seed") == 11);
}

TEST_CASE("failures exit with distinct codes and structured error lines") {
  Fixture& f = fx();

  CmdResult missing = run_cli(
      f.root, "invert --model " + (f.root / "nope.pii").string() + " --class 0 " + tiny_flags() +
                  " --out " + (f.root / "x.png").string());
  CHECK(missing.exit_code == 2);
  CHECK(missing.out.empty());
  json jm = json::parse(missing.err);
  CHECK(jm.at("error") == "ingestion");
  CHECK(jm.at("message").get<std::string>().find("nope.pii") != std::string::npos);

  CmdResult preset = run_cli(f.root, "invert --model " + f.model.string() +
                                         " --preset nonsense --class 0 " + tiny_flags());
  CHECK(preset.exit_code == 2);
  CHECK(json::parse(preset.err).at("error") == "config");

  CmdResult range = run_cli(f.root, "invert --model " + f.model.string() + " --class 99 " +
                                        tiny_flags() + " --out " + (f.root / "x.png").string());
  CHECK(range.exit_code == 2);
  json jr = json::parse(range.err);
  CHECK(jr.at("error") == "config");
  CHECK(jr.at("message").get<std::string>().find("out of range") != std::string::npos);

  CmdResult badflag = run_cli(f.root, "invert --model " + f.model.string() + " --bogus 3");
  CHECK(badflag.exit_code == 2);
  CHECK(json::parse(badflag.err).at("error") == "config");

  CmdResult nosub = run_cli(f.root, "");
  CHECK(nosub.exit_code == 2);
  CHECK(json::parse(nosub.err).at("error") == "config");

  CmdResult help = run_cli(f.root, "--help");
  CHECK(help.exit_code == 0);
  CHECK(help.out.find("invert") != std::string::npos);
}

TEST_CASE("config files set fields and explicit flags win over them") {
  Fixture& f = fx();
  fs::path cfg_path = f.root / "run.cfg";
  {
    std::ofstream cf(cfg_path);
    cf << "# scratch run\n"
          "target_class = 4\n"
          "final_resolution = 16\n"
          "n_stages = 2\n"
          "iterations_per_stage = 3\n"
          "learning_rate = 0.02\n"
          "ensemble_size = 2\n"
          "jitter_max = 1\n"
          "tv_weight = 0.5\n"
          "seed = 9\n";
  }
  fs::path out = f.root / "cfg.png";
  CmdResult r = run_cli(f.root, "invert --model " + f.model.string() + " --config " +
                                    cfg_path.string() + " --class 5 --iters 2 --out " +
                                    out.string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  json top = json::parse(r.out);
  CHECK(top.at("final_resolution") == 16);
  CHECK(top.at("stages") == 2);
  CHECK(top.at("seed") == 9);

  json cfg = json::parse(slurp(f.root / "cfg.json")).at("config");
  CHECK(cfg.at("target_class") == 5);          // flag beat the file
  CHECK(cfg.at("iterations_per_stage") == 2);  // flag beat the file
  CHECK(cfg.at("learning_rate").get<double>() == doctest::Approx(0.02));
  CHECK(cfg.at("tv_weight").get<double>() == doctest::Approx(0.5));
  CHECK(cfg.at("ensemble_size") == 2);
}

TEST_CASE("presets choose defaults that flags can still override") {
  Fixture& f = fx();
  fs::path out = f.root / "dream.png";
  CmdResult r = run_cli(f.root, "invert --model " + f.model.string() +
                                    " --preset deepdream --class 1 --resolution 16 --stages 1 "
                                    "--iters 2 --tv 0.125 --seed 3 --out " +
                                    out.string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  json cfg = json::parse(slurp(f.root / "dream.json")).at("config");
  CHECK(cfg.at("mode") == "none");  // classical baseline: no staged schedule
  CHECK(cfg.at("ensemble_size") == 1);
  CHECK(cfg.at("alpha").get<double>() == 0.0);
  CHECK(cfg.at("tv_weight").get<double>() == doctest::Approx(0.125));  // flag beat the preset
  CHECK(cfg.at("l2_weight").get<double>() > 0.0);                      // preset survives

  fs::path out2 = f.root / "di.png";
  CmdResult r2 = run_cli(f.root, "invert --model " + f.model.string() +
                                     " --preset deepinversion --class 1 --resolution 16 "
                                     "--stages 1 --iters 2 --seed 3 --out " +
                                     out2.string());
  REQUIRE_MESSAGE(r2.exit_code == 0, r2.err);
  json cfg2 = json::parse(slurp(f.root / "di.json")).at("config");
  CHECK(cfg2.at("feature_weight").get<double>() > 0.0);
}

TEST_CASE("sweep derives per-cell seeds and a rerun reproduces a cell bitwise") {
  Fixture& f = fx();
  fs::path dir = f.root / "sw";
  std::string shared = "--model " + f.model.string() +
                       " --class 2 --resolution 16 --stages 1 --iters 3 --ensemble 2 --lr 0.05 "
                       "--jitter 1";
  CmdResult r = run_cli(f.root, "sweep " + shared + " --seed 5 --axis tv_weight --values 0,0.001 "
                                    "--out " + dir.string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);

  json summary = json::parse(r.out);
  CHECK(summary.at("axis") == "tv_weight");
  CHECK(summary.at("base_seed") == 5);
  REQUIRE(summary.at("cells").size() == 2);
  CHECK(json::parse(slurp(dir / "summary.json")) == summary);
  for (size_t i = 0; i < 2; ++i) {
    const json& cell = summary.at("cells").at(i);
    CHECK(cell.at("seed").get<uint64_t>() == pii::derive_seed(5, i));
    CHECK(fs::exists(cell.at("png").get<std::string>()));
    CHECK(fs::exists(cell.at("sidecar").get<std::string>()));
  }
  CHECK(summary.at("cells").at(1).at("losses").at("tv").get<double>() > 0.0);

  // Re-running one cell as a plain inversion with the derived seed must
  // reproduce the sweep's PNG byte for byte.
  uint64_t cell_seed = summary.at("cells").at(1).at("seed").get<uint64_t>();
  fs::path redo = f.root / "redo.png";
  CmdResult r2 = run_cli(f.root, "invert " + shared + " --tv 0.001 --seed " +
                                     std::to_string(cell_seed) + " --out " + redo.string());
  REQUIRE_MESSAGE(r2.exit_code == 0, r2.err);
  CHECK(slurp(redo) == slurp(dir / "cell_001.png"));

  CmdResult bad_axis = run_cli(f.root, "sweep " + shared + " --seed 5 --axis bogus --values 1");
  CHECK(bad_axis.exit_code == 2);
  CHECK(json::parse(bad_axis.err).at("error") == "config");

  CmdResult no_values = run_cli(f.root, "sweep " + shared + " --seed 5 --axis tv_weight");
  CHECK(no_values.exit_code == 2);
  CHECK(json::parse(no_values.err).at("message").get<std::string>().find("--values") !=
        std::string::npos);
}

TEST_CASE("evaluate scores exported images and honors explicit targets") {
  Fixture& f = fx();
  fs::path dir = f.root / "sw";  // populated by the sweep case above
  REQUIRE(fs::exists(dir / "cell_000.png"));
  std::string imgs = (dir / "cell_000.png").string() + " " + (dir / "cell_001.png").string();

  CmdResult r = run_cli(f.root, "evaluate --model " + f.model.string() + " --images " + imgs +
                                    " --splits 1");
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  json j = json::parse(r.out);
  CHECK(j.at("n") == 2);
  CHECK(j.at("splits") == 1);
  double is_mean = j.at("inception_score").at("mean").get<double>();
  CHECK(is_mean >= 1.0);
  CHECK(is_mean <= 10.0);
  REQUIRE(!j.at("accuracy").is_null());  // targets read from the sidecars
  CHECK(j.at("accuracy").at("k") == 5);
  CHECK(j.at("accuracy").at("top1").get<double>() >= 0.0);
  CHECK(j.at("accuracy").at("top1").get<double>() <= 1.0);

  CmdResult rt = run_cli(f.root, "evaluate --model " + f.model.string() + " --images " + imgs +
                                     " --targets 2,2");
  REQUIRE(rt.exit_code == 0);
  CHECK(!json::parse(rt.out).at("accuracy").is_null());

  CmdResult mismatch = run_cli(f.root, "evaluate --model " + f.model.string() + " --images " +
                                           imgs + " --targets 2");
  CHECK(mismatch.exit_code == 2);
  CHECK(json::parse(mismatch.err).at("message").get<std::string>().find("one class per image") !=
        std::string::npos);

  // Without a sidecar there is no intended class, so accuracy is null.
  fs::copy_file(dir / "cell_000.png", f.root / "lone.png",
                fs::copy_options::overwrite_existing);
  CmdResult lone = run_cli(f.root, "evaluate --model " + f.model.string() + " --images " +
                                       (f.root / "lone.png").string());
  REQUIRE(lone.exit_code == 0);
  CHECK(json::parse(lone.out).at("accuracy").is_null());
}

TEST_CASE("model aliases resolve through the models directory env var") {
  Fixture& f = fx();
  fs::path menv = f.root / "menv";
  fs::create_directories(menv);
  fs::copy_file(f.model, menv / "toy-cnn.pii", fs::copy_options::overwrite_existing);
  fs::copy_file(f.model.string() + ".json", menv / "toy-cnn.pii.json",
                fs::copy_options::overwrite_existing);

  CmdResult r = run_cli(f.root, "invert --model toy-cnn --class 0 " + tiny_flags() + " --out " +
                                    (f.root / "alias.png").string(),
                        "PII_MODELS_DIR=" + menv.string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.err);
  CHECK(fs::exists(f.root / "alias.png"));
}
