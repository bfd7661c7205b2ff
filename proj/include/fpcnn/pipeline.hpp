#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fpcnn/nn.hpp"
#include "fpcnn/patches.hpp"
#include "fpcnn/phantom.hpp"
#include "fpcnn/volume.hpp"

namespace fpcnn::pipeline {

// Subject access behind one interface so training and evaluation run the
// same way off generated corpora, in-memory fixtures, or directories of
// volume files. Subjects load one at a time to keep the footprint small.
class SubjectSource {
 public:
  virtual ~SubjectSource() = default;
  virtual std::vector<phantom::ManifestEntry> manifest() const = 0;
  virtual phantom::PhantomSubject load(const std::string& subject_id) const = 0;
};

// Regenerates each subject on demand from its derived seed; no disk or
// whole-corpus memory involved.
class GeneratedSource : public SubjectSource {
 public:
  GeneratedSource(std::size_t n_subjects, std::size_t n_lesioned,
                  const phantom::PhantomParams& params);
  std::vector<phantom::ManifestEntry> manifest() const override;
  phantom::PhantomSubject load(const std::string& subject_id) const override;

 private:
  phantom::PhantomParams params_;
  std::vector<phantom::ManifestEntry> entries_;
  std::vector<bool> lesioned_;
};

class MemorySource : public SubjectSource {
 public:
  explicit MemorySource(std::vector<phantom::PhantomSubject> subjects);
  std::vector<phantom::ManifestEntry> manifest() const override;
  phantom::PhantomSubject load(const std::string& subject_id) const override;

 private:
  std::vector<phantom::PhantomSubject> subjects_;
};

// Reads a corpus directory written by write_corpus: manifest.csv plus
// <id>_cine/_myo/_lesion.fvol per subject.
class DirectorySource : public SubjectSource {
 public:
  explicit DirectorySource(const std::string& dir);
  std::vector<phantom::ManifestEntry> manifest() const override;
  phantom::PhantomSubject load(const std::string& subject_id) const override;

 private:
  std::string dir_;
  std::vector<phantom::ManifestEntry> entries_;
};

struct TrainConfig {
  std::size_t patch_size = 9;
  std::size_t stride = 9;  // training lattice; dense evaluation always uses 1
  double coverage_min = 0.5;
  double label_min = 0.5;
  double train_frac = 0.72;
  double val_frac = 0.14;
  double test_frac = 0.14;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t hidden_units = 32;
  bool use_position = true;
  bool augment = true;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;  // epochs without a new best val accuracy
  std::uint64_t seed = 1;
};

struct DataBundle {
  patches::SplitAssignment split;
  patches::PatchSet train, val, test;  // normalized; train/val balanced
  std::size_t n_extracted = 0;         // across splits, before balancing
};

// Splits subjects, extracts lattice patches per split, normalizes, then
// balances labels (test is balanced only when it holds both labels).
DataBundle prepare_data(const SubjectSource& source, const TrainConfig& cfg);

struct EpochRow {
  std::size_t epoch = 0;
  std::string split;  // train or val
  double accuracy = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  nn::Model model;  // best-val-accuracy snapshot, earliest epoch on ties
  std::vector<EpochRow> metrics;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
};

// Minibatch Adam with on-the-fly dihedral augmentation and early stopping
// on validation accuracy. Fully determined by cfg.seed.
TrainResult train_model(const DataBundle& data, const TrainConfig& cfg);

struct EvalMetrics {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t count = 0;
};

// Probability >= 0.5 counts as a lesion call.
EvalMetrics evaluate_patches(const nn::Model& model,
                             const patches::PatchSet& set);

struct DamageMap {
  imgvol::Volume3D map;      // per-voxel lesion probability, 0 off the wall
  double mean_score = 0.0;   // mean over myocardium voxels
  bool decision = false;     // mean_score > 0.5
};

// Dense (stride 1) window sweep; each myocardium voxel averages the
// probabilities of every qualifying window that contains it. Myocardium
// voxels no window reached copy the nearest covered voxel in their slice.
DamageMap damage_map(const nn::Model& model, const imgvol::Volume3D& cine,
                     const imgvol::Volume3D& myo,
                     const patches::SubjectStats& stats, double coverage_min);

struct SubjectEval {
  std::string subject_id;
  bool has_lesion = false;
  double mean_score = 0.0;
  bool decision = false;
};

std::vector<SubjectEval> evaluate_subjects(const nn::Model& model,
                                           const SubjectSource& source,
                                           const std::vector<std::string>& ids,
                                           double coverage_min);

struct SweepRow {
  std::size_t patch_size = 0;
  std::size_t n_patches = 0;  // extracted across splits, before balancing
  double val_accuracy = 0.0;
};

// Re-runs the pipeline per patch size with the lattice stride following the
// window size.
std::vector<SweepRow> sweep_patch_sizes(const SubjectSource& source,
                                        const TrainConfig& base,
                                        const std::vector<std::size_t>& sizes);

void write_metrics_csv(const std::vector<EpochRow>& rows,
                       const std::string& path);
std::vector<EpochRow> read_metrics_csv(const std::string& path);

// One 8-bit PGM per slice, probability times 255 rounded half up.
void write_damage_pgms(const imgvol::Volume3D& map, const std::string& dir);

}  // namespace fpcnn::pipeline
