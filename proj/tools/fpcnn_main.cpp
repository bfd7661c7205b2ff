#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "fpcnn/config.hpp"
#include "fpcnn/error.hpp"
#include "fpcnn/nn.hpp"
#include "fpcnn/patches.hpp"
#include "fpcnn/phantom.hpp"
#include "fpcnn/pipeline.hpp"
#include "fpcnn/volume.hpp"

// Exit codes: 0 success, 2 bad arguments or settings, 3 file problems,
// 4 pipeline failures. stdout carries key=value pairs only; everything
// meant for humans goes to stderr.

namespace {

namespace fs = std::filesystem;
using fpcnn::Error;
using fpcnn::ErrorCode;
namespace config = fpcnn::config;
namespace phantom = fpcnn::phantom;
namespace patches = fpcnn::patches;
namespace pipeline = fpcnn::pipeline;
namespace nn = fpcnn::nn;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
      return 2;
    case ErrorCode::file_not_found:
    case ErrorCode::malformed_header:
    case ErrorCode::data_length_mismatch:
    case ErrorCode::io_failure:
    case ErrorCode::fingerprint_mismatch:
      return 3;
    default:
      return 4;
  }
}

void emit(const std::string& key, const std::string& value) {
  std::cout << key << '=' << value << '\n';
}

void emit(const std::string& key, double value) {
  emit(key, config::format_double(value));
}

void emit(const std::string& key, std::size_t value) {
  emit(key, std::to_string(value));
}

config::KeyValueConfig merged_config(const std::string& config_path,
                                     const std::vector<std::string>& sets) {
  config::KeyValueConfig kv;
  if (!config_path.empty()) kv = config::KeyValueConfig::from_file(config_path);
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      fpcnn::fail(ErrorCode::invalid_argument,
                  "--set expects key=value, got: " + s);
    }
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return kv;
}

void reject_unknown(const config::KeyValueConfig& kv) {
  const auto unknown = kv.unconsumed();
  if (!unknown.empty()) {
    fpcnn::fail(ErrorCode::invalid_argument,
                "unknown setting: " + unknown.front());
  }
}

struct PhantomSpec {
  std::size_t subjects = 75;
  std::size_t lesioned = 35;
  phantom::PhantomParams params;
};

PhantomSpec read_phantom_spec(config::KeyValueConfig& kv) {
  PhantomSpec spec;
  phantom::PhantomParams& p = spec.params;
  spec.subjects = kv.get_size("subjects", spec.subjects);
  spec.lesioned = kv.get_size("lesioned", spec.lesioned);
  p.grid.dims[0] = kv.get_size("grid_nx", p.grid.dims[0]);
  p.grid.dims[1] = kv.get_size("grid_ny", p.grid.dims[1]);
  p.grid.dims[2] = kv.get_size("grid_nz", p.grid.dims[2]);
  p.grid.spacing[0] = kv.get_double("spacing_x", p.grid.spacing[0]);
  p.grid.spacing[1] = kv.get_double("spacing_y", p.grid.spacing[1]);
  p.grid.spacing[2] = kv.get_double("spacing_z", p.grid.spacing[2]);
  p.grid.origin[0] = kv.get_double("origin_x", p.grid.origin[0]);
  p.grid.origin[1] = kv.get_double("origin_y", p.grid.origin[1]);
  p.grid.origin[2] = kv.get_double("origin_z", p.grid.origin[2]);
  p.inner_radius_mm = kv.get_double("inner_radius_mm", p.inner_radius_mm);
  p.outer_radius_mm = kv.get_double("outer_radius_mm", p.outer_radius_mm);
  p.radius_jitter_mm = kv.get_double("radius_jitter_mm", p.radius_jitter_mm);
  p.center_jitter_mm = kv.get_double("center_jitter_mm", p.center_jitter_mm);
  p.base_mean = kv.get_double("base_mean", p.base_mean);
  p.base_std = kv.get_double("base_std", p.base_std);
  p.base_corr_vox = kv.get_double("base_corr_vox", p.base_corr_vox);
  p.lesion_corr_vox = kv.get_double("lesion_corr_vox", p.lesion_corr_vox);
  p.lesion_var_ratio = kv.get_double("lesion_var_ratio", p.lesion_var_ratio);
  p.lesion_extent_rad = kv.get_double("lesion_extent_rad", p.lesion_extent_rad);
  p.extent_jitter_frac =
      kv.get_double("extent_jitter_frac", p.extent_jitter_frac);
  p.lesion_transmural_frac =
      kv.get_double("lesion_transmural_frac", p.lesion_transmural_frac);
  p.noise_floor = kv.get_double("noise_floor", p.noise_floor);
  p.seed = kv.get_u64("seed", p.seed);
  return spec;
}

std::vector<std::pair<std::string, std::string>> phantom_entries(
    const PhantomSpec& spec) {
  const phantom::PhantomParams& p = spec.params;
  auto d = config::format_double;
  return {
      {"subjects", std::to_string(spec.subjects)},
      {"lesioned", std::to_string(spec.lesioned)},
      {"grid_nx", std::to_string(p.grid.dims[0])},
      {"grid_ny", std::to_string(p.grid.dims[1])},
      {"grid_nz", std::to_string(p.grid.dims[2])},
      {"spacing_x", d(p.grid.spacing[0])},
      {"spacing_y", d(p.grid.spacing[1])},
      {"spacing_z", d(p.grid.spacing[2])},
      {"origin_x", d(p.grid.origin[0])},
      {"origin_y", d(p.grid.origin[1])},
      {"origin_z", d(p.grid.origin[2])},
      {"inner_radius_mm", d(p.inner_radius_mm)},
      {"outer_radius_mm", d(p.outer_radius_mm)},
      {"radius_jitter_mm", d(p.radius_jitter_mm)},
      {"center_jitter_mm", d(p.center_jitter_mm)},
      {"base_mean", d(p.base_mean)},
      {"base_std", d(p.base_std)},
      {"base_corr_vox", d(p.base_corr_vox)},
      {"lesion_corr_vox", d(p.lesion_corr_vox)},
      {"lesion_var_ratio", d(p.lesion_var_ratio)},
      {"lesion_extent_rad", d(p.lesion_extent_rad)},
      {"extent_jitter_frac", d(p.extent_jitter_frac)},
      {"lesion_transmural_frac", d(p.lesion_transmural_frac)},
      {"noise_floor", d(p.noise_floor)},
      {"seed", std::to_string(p.seed)},
  };
}

pipeline::TrainConfig read_train_config(config::KeyValueConfig& kv) {
  pipeline::TrainConfig c;
  c.patch_size = kv.get_size("patch_size", c.patch_size);
  c.stride = kv.get_size("stride", c.stride);
  c.coverage_min = kv.get_double("coverage_min", c.coverage_min);
  c.label_min = kv.get_double("label_min", c.label_min);
  c.train_frac = kv.get_double("train_frac", c.train_frac);
  c.val_frac = kv.get_double("val_frac", c.val_frac);
  c.test_frac = kv.get_double("test_frac", c.test_frac);
  c.conv1_channels = kv.get_size("conv1_channels", c.conv1_channels);
  c.conv2_channels = kv.get_size("conv2_channels", c.conv2_channels);
  c.hidden_units = kv.get_size("hidden_units", c.hidden_units);
  c.use_position = kv.get_bool("use_position", c.use_position);
  c.augment = kv.get_bool("augment", c.augment);
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  c.lr = kv.get_double("lr", c.lr);
  c.max_epochs = kv.get_size("max_epochs", c.max_epochs);
  c.patience = kv.get_size("patience", c.patience);
  c.seed = kv.get_u64("seed", c.seed);
  return c;
}

std::vector<std::pair<std::string, std::string>> train_entries(
    const pipeline::TrainConfig& c) {
  auto d = config::format_double;
  return {
      {"patch_size", std::to_string(c.patch_size)},
      {"stride", std::to_string(c.stride)},
      {"coverage_min", d(c.coverage_min)},
      {"label_min", d(c.label_min)},
      {"train_frac", d(c.train_frac)},
      {"val_frac", d(c.val_frac)},
      {"test_frac", d(c.test_frac)},
      {"conv1_channels", std::to_string(c.conv1_channels)},
      {"conv2_channels", std::to_string(c.conv2_channels)},
      {"hidden_units", std::to_string(c.hidden_units)},
      {"use_position", c.use_position ? "true" : "false"},
      {"augment", c.augment ? "true" : "false"},
      {"batch_size", std::to_string(c.batch_size)},
      {"lr", d(c.lr)},
      {"max_epochs", std::to_string(c.max_epochs)},
      {"patience", std::to_string(c.patience)},
      {"seed", std::to_string(c.seed)},
  };
}

void run_phantom_gen(const std::string& config_path,
                     const std::vector<std::string>& sets,
                     const std::string& out) {
  config::KeyValueConfig kv = merged_config(config_path, sets);
  PhantomSpec spec = read_phantom_spec(kv);
  reject_unknown(kv);
  if (spec.lesioned > spec.subjects) {
    fpcnn::fail(ErrorCode::invalid_argument,
                "lesioned must not exceed subjects");
  }
  fs::create_directories(out);
  std::vector<phantom::ManifestEntry> entries;
  entries.reserve(spec.subjects);
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    const phantom::PhantomSubject subject =
        phantom::generate_corpus_subject(spec.params, s, s < spec.lesioned);
    phantom::write_subject(subject, out);
    entries.push_back({subject.subject_id, subject.has_lesion, subject.seed});
    std::cerr << "generated " << subject.subject_id << '\n';
  }
  phantom::write_manifest(entries, (fs::path(out) / "manifest.csv").string());
  config::write_resolved(phantom_entries(spec),
                         (fs::path(out) / "resolved.cfg").string());
  emit("subjects", spec.subjects);
  emit("lesioned", spec.lesioned);
  emit("seed", std::to_string(spec.params.seed));
}

void run_extract(const std::string& config_path,
                 const std::vector<std::string>& sets,
                 const std::string& corpus, const std::string& out) {
  config::KeyValueConfig kv = merged_config(config_path, sets);
  const pipeline::TrainConfig cfg = read_train_config(kv);
  reject_unknown(kv);
  const pipeline::DirectorySource source(corpus);
  const pipeline::DataBundle bundle = pipeline::prepare_data(source, cfg);
  fs::create_directories(out);
  patches::save_patches(bundle.train, (fs::path(out) / "train.bin").string());
  patches::save_patches(bundle.val, (fs::path(out) / "val.bin").string());
  patches::save_patches(bundle.test, (fs::path(out) / "test.bin").string());
  config::write_resolved(train_entries(cfg),
                         (fs::path(out) / "resolved.cfg").string());
  emit("extracted", bundle.n_extracted);
  emit("train_patches", bundle.train.patches.size());
  emit("val_patches", bundle.val.patches.size());
  emit("test_patches", bundle.test.patches.size());
}

void run_train(const std::string& config_path,
               const std::vector<std::string>& sets, const std::string& corpus,
               const std::string& out) {
  config::KeyValueConfig kv = merged_config(config_path, sets);
  const pipeline::TrainConfig cfg = read_train_config(kv);
  reject_unknown(kv);
  const pipeline::DirectorySource source(corpus);
  const pipeline::DataBundle bundle = pipeline::prepare_data(source, cfg);
  const pipeline::TrainResult result = pipeline::train_model(bundle, cfg);
  fs::create_directories(out);
  nn::save_model(result.model, (fs::path(out) / "model.fpcnn").string());
  pipeline::write_metrics_csv(result.metrics,
                              (fs::path(out) / "metrics.csv").string());
  config::write_resolved(train_entries(cfg),
                         (fs::path(out) / "resolved.cfg").string());
  emit("train_patches", bundle.train.patches.size());
  emit("val_patches", bundle.val.patches.size());
  emit("epochs_run", result.metrics.size() / 2);
  emit("best_epoch", result.best_epoch);
  emit("best_val_accuracy", result.best_val_accuracy);
}

void run_eval(const std::string& config_path,
              const std::vector<std::string>& sets, const std::string& corpus,
              const std::string& model_path, const std::string& out) {
  config::KeyValueConfig kv = merged_config(config_path, sets);
  pipeline::TrainConfig cfg = read_train_config(kv);
  reject_unknown(kv);
  const nn::Model model = nn::load_model(model_path);
  if (kv.has("patch_size") && cfg.patch_size != model.config().patch_size) {
    fpcnn::fail(ErrorCode::invalid_argument,
                "patch_size contradicts the model file");
  }
  cfg.patch_size = model.config().patch_size;
  const pipeline::DirectorySource source(corpus);
  const pipeline::DataBundle bundle = pipeline::prepare_data(source, cfg);
  const pipeline::EvalMetrics val = pipeline::evaluate_patches(model, bundle.val);
  const std::vector<pipeline::SubjectEval> rows = pipeline::evaluate_subjects(
      model, source, bundle.split.test, cfg.coverage_min);

  fs::create_directories(out);
  {
    std::ofstream scores(fs::path(out) / "subject_scores.csv",
                         std::ios::binary);
    if (!scores) {
      fpcnn::fail(ErrorCode::io_failure, "cannot write subject_scores.csv");
    }
    scores << "subject_id,has_lesion,mean_score,decision\n";
    for (const pipeline::SubjectEval& r : rows) {
      scores << r.subject_id << ',' << (r.has_lesion ? 1 : 0) << ','
             << config::format_double(r.mean_score) << ','
             << (r.decision ? 1 : 0) << '\n';
    }
  }
  config::write_resolved(train_entries(cfg),
                         (fs::path(out) / "resolved.cfg").string());

  emit("val_accuracy", val.accuracy);
  emit("val_loss", val.loss);
  if (!bundle.test.patches.empty()) {
    const pipeline::EvalMetrics test =
        pipeline::evaluate_patches(model, bundle.test);
    emit("test_patch_accuracy", test.accuracy);
  }
  std::size_t correct = 0;
  for (const pipeline::SubjectEval& r : rows) {
    if (r.decision == r.has_lesion) ++correct;
  }
  emit("n_test_subjects", rows.size());
  if (!rows.empty()) {
    emit("subject_accuracy",
         static_cast<double>(correct) / static_cast<double>(rows.size()));
  }
}

void run_sweep(const std::string& config_path,
               const std::vector<std::string>& sets, const std::string& corpus,
               const std::string& sizes_arg, const std::string& out) {
  config::KeyValueConfig kv = merged_config(config_path, sets);
  const pipeline::TrainConfig cfg = read_train_config(kv);
  reject_unknown(kv);
  std::vector<std::size_t> sizes;
  std::istringstream ss(sizes_arg);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      sizes.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      fpcnn::fail(ErrorCode::invalid_argument, "bad patch size list: " + sizes_arg);
    }
  }
  const pipeline::DirectorySource source(corpus);
  const std::vector<pipeline::SweepRow> rows =
      pipeline::sweep_patch_sizes(source, cfg, sizes);

  fs::create_directories(out);
  {
    std::ofstream csv(fs::path(out) / "sweep.csv", std::ios::binary);
    if (!csv) fpcnn::fail(ErrorCode::io_failure, "cannot write sweep.csv");
    csv << "patch_size,patches,val_accuracy\n";
    for (const pipeline::SweepRow& r : rows) {
      csv << r.patch_size << ',' << r.n_patches << ','
          << config::format_double(r.val_accuracy) << '\n';
    }
  }
  auto entries = train_entries(cfg);
  entries.emplace_back("sweep_sizes", sizes_arg);
  config::write_resolved(entries, (fs::path(out) / "resolved.cfg").string());

  for (const pipeline::SweepRow& r : rows) {
    std::cout << "patch_size=" << r.patch_size << " patches=" << r.n_patches
              << " val_accuracy=" << config::format_double(r.val_accuracy)
              << '\n';
  }
}

void run_predict(const std::string& config_path,
                 const std::vector<std::string>& sets,
                 const std::string& corpus, const std::string& model_path,
                 const std::string& subject_id, const std::string& out) {
  config::KeyValueConfig kv = merged_config(config_path, sets);
  const double coverage_min = kv.get_double("coverage_min", 0.5);
  reject_unknown(kv);
  const nn::Model model = nn::load_model(model_path);
  const pipeline::DirectorySource source(corpus);
  const phantom::PhantomSubject subject = source.load(subject_id);
  const patches::SubjectStats stats =
      patches::subject_stats(subject_id, subject.cine, subject.myo_mask);
  const pipeline::DamageMap dm = pipeline::damage_map(
      model, subject.cine, subject.myo_mask, stats, coverage_min);

  fs::create_directories(out);
  fpcnn::imgvol::save_volume(dm.map, (fs::path(out) / "damage.fvol").string());
  pipeline::write_damage_pgms(dm.map, out);
  config::write_resolved({{"coverage_min", config::format_double(coverage_min)}},
                         (fs::path(out) / "resolved.cfg").string());
  emit("subject_id", subject_id);
  emit("mean_score", dm.mean_score);
  emit("decision", std::string(dm.decision ? "1" : "0"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic cine fibrosis pipeline: corpus generation, patch "
               "extraction, CNN training and per-subject damage maps"};
  app.require_subcommand(1);

  std::string config_path, corpus, out, model_path, subject_id;
  std::string sizes = "5,7,9,11";
  std::vector<std::string> sets;
  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value settings file");
    cmd->add_option("--set", sets, "override one setting (key=value)");
  };

  CLI::App* gen = app.add_subcommand("phantom-gen", "generate a synthetic corpus");
  gen->add_option("--out", out, "corpus directory")->required();
  add_common(gen);

  CLI::App* ext = app.add_subcommand("extract", "extract patch datasets");
  ext->add_option("--corpus", corpus, "corpus directory")->required();
  ext->add_option("--out", out, "output directory")->required();
  add_common(ext);

  CLI::App* train = app.add_subcommand("train", "train the patch classifier");
  train->add_option("--corpus", corpus, "corpus directory")->required();
  train->add_option("--out", out, "output directory")->required();
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a trained model");
  eval->add_option("--corpus", corpus, "corpus directory")->required();
  eval->add_option("--model", model_path, "model file")->required();
  eval->add_option("--out", out, "output directory")->required();
  add_common(eval);

  CLI::App* sweep = app.add_subcommand("sweep", "compare patch sizes");
  sweep->add_option("--corpus", corpus, "corpus directory")->required();
  sweep->add_option("--out", out, "output directory")->required();
  sweep->add_option("--sizes", sizes, "comma-separated odd patch sizes");
  add_common(sweep);

  CLI::App* predict = app.add_subcommand("predict", "damage map for one subject");
  predict->add_option("--corpus", corpus, "corpus directory")->required();
  predict->add_option("--model", model_path, "model file")->required();
  predict->add_option("--subject", subject_id, "subject id")->required();
  predict->add_option("--out", out, "output directory")->required();
  add_common(predict);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) run_phantom_gen(config_path, sets, out);
    if (ext->parsed()) run_extract(config_path, sets, corpus, out);
    if (train->parsed()) run_train(config_path, sets, corpus, out);
    if (eval->parsed()) run_eval(config_path, sets, corpus, model_path, out);
    if (sweep->parsed()) run_sweep(config_path, sets, corpus, sizes, out);
    if (predict->parsed()) {
      run_predict(config_path, sets, corpus, model_path, subject_id, out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}
