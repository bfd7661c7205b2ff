// Drives the installed command-line binary as a subprocess: argument and
// settings validation, exit codes, stdout key=value contract, artifact
// layout on disk, and run-to-run determinism of generation and training.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fpcnn/config.hpp"
#include "fpcnn/nn.hpp"
#include "fpcnn/patches.hpp"
#include "fpcnn/phantom.hpp"
#include "fpcnn/pipeline.hpp"
#include "fpcnn/volume.hpp"

namespace fs = std::filesystem;
using namespace fpcnn;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

const fs::path& scratch_root() {
  static const fs::path root = [] {
    const fs::path p = fs::temp_directory_path() / "fpcnn_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "cannot open " << path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path out_path =
      scratch_root() / ("stdout_" + std::to_string(counter) + ".txt");
  const fs::path err_path =
      scratch_root() / ("stderr_" + std::to_string(counter) + ".txt");
  ++counter;
  const std::string cmd = std::string("\"") + FPCNN_CLI_PATH + "\" " + args +
                          " > \"" + out_path.string() + "\" 2> \"" +
                          err_path.string() + "\"";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  REQUIRE(WIFEXITED(status));
  CliResult r;
  r.exit_code = WEXITSTATUS(status);
  r.out = read_file(out_path);
  r.err = read_file(err_path);
  return r;
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

// Small corpus and model shared by the pipeline-level cases below; each is
// produced once by the first case that needs it.
const std::string kGenSets =
    " --set subjects=10 --set lesioned=5 --set grid_nx=64 --set grid_ny=64"
    " --set grid_nz=2 --set inner_radius_mm=12 --set outer_radius_mm=24"
    " --set radius_jitter_mm=1 --set center_jitter_mm=2";

const std::string kTrainSets =
    " --set patch_size=5 --set stride=3 --set conv1_channels=2"
    " --set conv2_channels=2 --set hidden_units=4 --set batch_size=32"
    " --set max_epochs=2";

const fs::path& corpus_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch_root() / "corpus";
    const CliResult r = run_cli("phantom-gen --out " + quoted(d) + kGenSets);
    REQUIRE(r.exit_code == 0);
    return d;
  }();
  return dir;
}

const fs::path& model_dir() {
  static const fs::path dir = [] {
    const fs::path d = scratch_root() / "run_a";
    const CliResult r = run_cli("train --corpus " + quoted(corpus_dir()) +
                                " --out " + quoted(d) + kTrainSets);
    REQUIRE(r.exit_code == 0);
    return d;
  }();
  return dir;
}

fs::path model_file() { return model_dir() / "model.fpcnn"; }

}  // namespace

TEST_CASE("usage and argument errors exit with code 2") {
  const CliResult help = run_cli("--help");
  CHECK(help.exit_code == 0);
  CHECK(help.out.find("phantom-gen") != std::string::npos);
  CHECK(help.out.find("predict") != std::string::npos);

  CHECK(run_cli("").exit_code == 2);            // a subcommand is required
  CHECK(run_cli("frobnicate").exit_code == 2);  // unknown subcommand
  CHECK(run_cli("phantom-gen").exit_code == 2);  // missing --out

  const fs::path unused = scratch_root() / "never_created";
  CHECK(run_cli("phantom-gen --out " + quoted(unused) + " --set nonsense")
            .exit_code == 2);  // --set needs key=value
  CHECK(run_cli("phantom-gen --out " + quoted(unused) + " --set bogus_knob=1")
            .exit_code == 2);  // unknown setting
  CHECK(run_cli("phantom-gen --out " + quoted(unused) +
                " --set subjects=2 --set lesioned=3")
            .exit_code == 2);  // more lesioned than subjects
  CHECK_FALSE(fs::exists(unused));  // rejected before touching the disk
}

TEST_CASE("settings files merge with --set overrides") {
  const fs::path missing_cfg = scratch_root() / "no_such.cfg";
  const fs::path out = scratch_root() / "never_created_cfg";
  CHECK(run_cli("phantom-gen --out " + quoted(out) + " --config " +
                quoted(missing_cfg))
            .exit_code == 3);

  const fs::path broken_cfg = scratch_root() / "broken.cfg";
  std::ofstream(broken_cfg) << "just some words without a separator\n";
  CHECK(run_cli("phantom-gen --out " + quoted(out) + " --config " +
                quoted(broken_cfg))
            .exit_code == 2);

  const fs::path good_cfg = scratch_root() / "small.cfg";
  std::ofstream(good_cfg) << "# tiny corpus\nsubjects = 3\nlesioned = 2\n"
                          << "grid_nx = 48\ngrid_ny = 48\ngrid_nz = 1\n"
                          << "inner_radius_mm = 12\nouter_radius_mm = 24\n"
                          << "radius_jitter_mm = 1\ncenter_jitter_mm = 2\n";
  const fs::path gen3 = scratch_root() / "gen3";
  const CliResult r = run_cli("phantom-gen --out " + quoted(gen3) +
                              " --config " + quoted(good_cfg) +
                              " --set lesioned=1");
  CHECK(r.exit_code == 0);
  const auto kv = parse_kv(r.out);
  CHECK(kv.at("subjects") == "3");
  CHECK(kv.at("lesioned") == "1");  // --set beats the file value

  config::KeyValueConfig resolved =
      config::KeyValueConfig::from_file((gen3 / "resolved.cfg").string());
  CHECK(resolved.get_u64("subjects", 0) == 3);
  CHECK(resolved.get_u64("lesioned", 0) == 1);
  CHECK(resolved.get_u64("grid_nx", 0) == 48);
}

TEST_CASE("missing inputs map to file errors") {
  const fs::path nowhere = scratch_root() / "no_corpus";
  const fs::path out = scratch_root() / "never_created_io";
  CHECK(run_cli("extract --corpus " + quoted(nowhere) + " --out " +
                quoted(out))
            .exit_code == 3);
  CHECK(run_cli("eval --corpus " + quoted(corpus_dir()) + " --model " +
                quoted(nowhere / "model.fpcnn") + " --out " + quoted(out))
            .exit_code == 3);
}

TEST_CASE("corpus generation is deterministic and self-describing") {
  const fs::path& a = corpus_dir();
  const fs::path b = scratch_root() / "corpus_b";
  const CliResult r = run_cli("phantom-gen --out " + quoted(b) + kGenSets);
  REQUIRE(r.exit_code == 0);

  const auto kv = parse_kv(r.out);
  CHECK(kv.at("subjects") == "10");
  CHECK(kv.at("lesioned") == "5");
  CHECK(kv.at("seed") == "1");

  CHECK(read_file(a / "manifest.csv") == read_file(b / "manifest.csv"));
  CHECK(read_file(a / "s000_cine.fvol") == read_file(b / "s000_cine.fvol"));
  CHECK(read_file(a / "s003_lesion.fvol") == read_file(b / "s003_lesion.fvol"));

  const auto entries =
      phantom::read_manifest((a / "manifest.csv").string());
  REQUIRE(entries.size() == 10);
  CHECK(entries.front().subject_id == "s000");
  for (std::size_t s = 0; s < entries.size(); ++s) {
    CHECK(entries[s].has_lesion == (s < 5));
  }

  const imgvol::Volume3D cine =
      imgvol::load_volume((a / "s000_cine.fvol").string());
  CHECK(cine.nx() == 64);
  CHECK(cine.ny() == 64);
  CHECK(cine.nz() == 2);
}

TEST_CASE("extract writes loadable patch datasets") {
  const fs::path out = scratch_root() / "extracted";
  const CliResult r = run_cli("extract --corpus " + quoted(corpus_dir()) +
                              " --out " + quoted(out) + kTrainSets);
  REQUIRE(r.exit_code == 0);
  const auto kv = parse_kv(r.out);

  const patches::PatchSet train =
      patches::load_patches((out / "train.bin").string());
  const patches::PatchSet val =
      patches::load_patches((out / "val.bin").string());
  const patches::PatchSet test =
      patches::load_patches((out / "test.bin").string());
  CHECK(std::to_string(train.patches.size()) == kv.at("train_patches"));
  CHECK(std::to_string(val.patches.size()) == kv.at("val_patches"));
  CHECK(std::to_string(test.patches.size()) == kv.at("test_patches"));
  REQUIRE(!train.patches.empty());
  CHECK(train.patch_size == 5);
  CHECK(train.normalized);

  const auto counts = patches::label_counts(train);
  CHECK(counts[0] == counts[1]);  // training split arrives balanced
  for (const patches::Patch& p : train.patches) {
    for (double v : p.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("training is reproducible and reports its run") {
  const fs::path& a = model_dir();
  const fs::path b = scratch_root() / "run_b";
  const CliResult r = run_cli("train --corpus " + quoted(corpus_dir()) +
                              " --out " + quoted(b) + kTrainSets);
  REQUIRE(r.exit_code == 0);

  for (const std::string name : {"model.fpcnn", "metrics.csv"}) {
    CHECK(read_file(a / name) == read_file(b / name));
  }

  // stdout is machine-readable: every non-empty line is key=value.
  std::istringstream lines(r.out);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    CHECK(line.find('=') != std::string::npos);
  }
  const auto kv = parse_kv(r.out);
  CHECK(kv.count("train_patches") == 1);
  CHECK(kv.count("val_patches") == 1);
  CHECK(kv.at("epochs_run") == "2");
  const int best_epoch = std::stoi(kv.at("best_epoch"));
  CHECK(best_epoch >= 1);
  CHECK(best_epoch <= 2);
  const double best_acc = std::stod(kv.at("best_val_accuracy"));
  CHECK(best_acc >= 0.0);
  CHECK(best_acc <= 1.0);

  const nn::Model model = nn::load_model(model_file().string());
  CHECK(model.config().patch_size == 5);
  CHECK(model.config().conv1_channels == 2);

  const auto rows = pipeline::read_metrics_csv((a / "metrics.csv").string());
  REQUIRE(rows.size() == 4);  // two epochs, train row then val row each
  CHECK(rows[0].epoch == 1);
  CHECK(rows[0].split == "train");
  CHECK(rows[1].split == "val");
  CHECK(rows[3].epoch == 2);

  config::KeyValueConfig resolved =
      config::KeyValueConfig::from_file((a / "resolved.cfg").string());
  CHECK(resolved.get_size("patch_size", 0) == 5);
  CHECK(resolved.get_size("max_epochs", 0) == 2);
}

TEST_CASE("eval reports patch and subject metrics") {
  const fs::path out = scratch_root() / "evaluated";
  const CliResult r =
      run_cli("eval --corpus " + quoted(corpus_dir()) + " --model " +
              quoted(model_file()) + " --out " + quoted(out) + kTrainSets);
  REQUIRE(r.exit_code == 0);
  const auto kv = parse_kv(r.out);

  const double val_acc = std::stod(kv.at("val_accuracy"));
  CHECK(val_acc >= 0.0);
  CHECK(val_acc <= 1.0);
  CHECK(std::stod(kv.at("val_loss")) >= 0.0);
  CHECK(kv.count("test_patch_accuracy") == 1);
  CHECK(kv.at("n_test_subjects") == "2");
  const double subj_acc = std::stod(kv.at("subject_accuracy"));
  CHECK(subj_acc >= 0.0);
  CHECK(subj_acc <= 1.0);

  std::istringstream scores(read_file(out / "subject_scores.csv"));
  std::string line;
  REQUIRE(std::getline(scores, line));
  CHECK(line == "subject_id,has_lesion,mean_score,decision");
  std::size_t rows = 0;
  while (std::getline(scores, line)) {
    if (line.empty()) continue;
    ++rows;
    CHECK(line.front() == 's');
  }
  CHECK(rows == 2);
}

TEST_CASE("eval adopts the model patch size and rejects contradictions") {
  const std::string base_sets =
      " --set stride=3 --set conv1_channels=2 --set conv2_channels=2"
      " --set hidden_units=4 --set batch_size=32 --set max_epochs=2";

  // No patch_size given: the model's own size drives extraction.
  const fs::path out = scratch_root() / "evaluated_adopt";
  const CliResult ok =
      run_cli("eval --corpus " + quoted(corpus_dir()) + " --model " +
              quoted(model_file()) + " --out " + quoted(out) + base_sets);
  CHECK(ok.exit_code == 0);

  // An explicit size that differs from the model file is a hard error.
  const CliResult clash = run_cli(
      "eval --corpus " + quoted(corpus_dir()) + " --model " +
      quoted(model_file()) + " --out " + quoted(out) + base_sets +
      " --set patch_size=7");
  CHECK(clash.exit_code == 2);
}

TEST_CASE("predict writes a damage map and per-slice images") {
  const fs::path out = scratch_root() / "predicted";
  const CliResult r = run_cli(
      "predict --corpus " + quoted(corpus_dir()) + " --model " +
      quoted(model_file()) + " --subject s000 --out " + quoted(out));
  REQUIRE(r.exit_code == 0);
  const auto kv = parse_kv(r.out);
  CHECK(kv.at("subject_id") == "s000");
  const double mean_score = std::stod(kv.at("mean_score"));
  CHECK(mean_score >= 0.0);
  CHECK(mean_score <= 1.0);
  CHECK((kv.at("decision") == "0" || kv.at("decision") == "1"));

  const imgvol::Volume3D dm =
      imgvol::load_volume((out / "damage.fvol").string());
  CHECK(dm.nx() == 64);
  CHECK(dm.ny() == 64);
  CHECK(dm.nz() == 2);
  for (double v : dm.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  for (const std::string name : {"damage_slice_000.pgm", "damage_slice_001.pgm"}) {
    const std::string pgm = read_file(out / name);
    const std::string header = "P5\n64 64\n255\n";
    REQUIRE(pgm.size() == header.size() + 64 * 64);
    CHECK(pgm.compare(0, header.size(), header) == 0);
  }

  config::KeyValueConfig resolved =
      config::KeyValueConfig::from_file((out / "resolved.cfg").string());
  CHECK(resolved.get_double("coverage_min", -1.0) == 0.5);

  CHECK(run_cli("predict --corpus " + quoted(corpus_dir()) + " --model " +
                quoted(model_file()) + " --subject s999 --out " + quoted(out))
            .exit_code == 2);
}

TEST_CASE("sweep compares patch sizes") {
  const fs::path out = scratch_root() / "swept";
  const CliResult r = run_cli("sweep --corpus " + quoted(corpus_dir()) +
                              " --out " + quoted(out) + " --sizes 5,7" +
                              kTrainSets);
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("patch_size=5") != std::string::npos);
  CHECK(r.out.find("patch_size=7") != std::string::npos);

  std::istringstream csv(read_file(out / "sweep.csv"));
  std::string line;
  REQUIRE(std::getline(csv, line));
  CHECK(line == "patch_size,patches,val_accuracy");
  std::vector<std::size_t> patch_counts;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string size_tok, count_tok, acc_tok;
    REQUIRE(std::getline(row, size_tok, ','));
    REQUIRE(std::getline(row, count_tok, ','));
    REQUIRE(std::getline(row, acc_tok, ','));
    patch_counts.push_back(std::stoull(count_tok));
    const double acc = std::stod(acc_tok);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
  }
  REQUIRE(patch_counts.size() == 2);
  CHECK(patch_counts[1] <= patch_counts[0]);  // bigger windows fit fewer spots

  CHECK(run_cli("sweep --corpus " + quoted(corpus_dir()) + " --out " +
                quoted(out) + " --sizes 5,x" + kTrainSets)
            .exit_code == 2);
}
