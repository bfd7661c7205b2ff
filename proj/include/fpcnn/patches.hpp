#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fpcnn/phantom.hpp"
#include "fpcnn/volume.hpp"

namespace fpcnn::patches {

// Per-subject values every patch of that subject is normalized with.
struct SubjectStats {
  std::string subject_id;
  double p1 = 0.0;      // 1st percentile of the raw cine volume
  double p99 = 0.0;     // 99th percentile of the raw cine volume
  double r_norm = 0.0;  // largest myocardial distance from its slice centroid, mm
};

struct Patch {
  std::uint32_t subject_index = 0;  // row in PatchSet::subjects
  std::uint32_t slice_index = 0;
  std::int32_t ci = 0;  // window center, x voxel index
  std::int32_t cj = 0;  // window center, y voxel index
  std::uint8_t label = 0;
  std::array<double, 3> pos{};  // (dx, dy, dist) / r_norm from slice centroid
  std::vector<double> pixels;   // patch_size^2, x fastest
};

struct PatchSet {
  std::size_t patch_size = 9;
  std::string split = "all";
  bool normalized = false;
  std::vector<SubjectStats> subjects;
  std::vector<Patch> patches;
};

struct ExtractConfig {
  std::size_t patch_size = 9;
  std::size_t stride = 9;     // lattice step; 1 gives a dense sweep
  double coverage_min = 0.5;  // myocardium fraction a window must reach
  double label_min = 0.5;     // lesion fraction over myocardial pixels for label 1
};

// Linear-interpolation percentile at rank q*(N-1), q in [0, 1].
double percentile(std::vector<double> values, double q);

SubjectStats subject_stats(const std::string& subject_id,
                           const imgvol::Volume3D& cine,
                           const imgvol::Volume3D& myo);

// Windows on a lattice starting at (p-1)/2 with the given stride, kept only
// when fully inside the slice and covering enough myocardium. Pixels stay in
// raw intensity units; pos is already divided by r_norm.
std::vector<Patch> extract_subject_patches(const imgvol::Volume3D& cine,
                                           const imgvol::Volume3D& myo,
                                           const imgvol::Volume3D& lesion,
                                           std::uint32_t subject_index,
                                           const SubjectStats& stats,
                                           const ExtractConfig& cfg);

// clamp((v - p1) / (p99 - p1), 0, 1) per patch, using its subject's row.
void normalize_pixels(PatchSet& set);

// Undersamples the majority label to an exact 50/50 set; kept patches stay
// in their original order.
void balance_patches(PatchSet& set, std::uint64_t seed);

std::array<std::size_t, 2> label_counts(const PatchSet& set);

struct SplitAssignment {
  std::vector<std::string> train, val, test;
};

// Subject-level split, stratified by has_lesion so both labels land in every
// split at near-identical proportions. Counts per stratum come from
// largest-remainder rounding (ties favor train, then val); membership is a
// seeded shuffle of the stratum's subjects.
SplitAssignment stratified_split(const std::vector<phantom::ManifestEntry>& entries,
                                 double train_frac, double val_frac,
                                 double test_frac, std::uint64_t seed);

// Dihedral transform g in [0, 8): g < 4 rotates g times by 90 degrees, CCW
// in (x, y); g >= 4 first mirrors x then rotates g - 4 times. Applied to the
// pixel window and the (dx, dy) offset alike; label and distance never change.
Patch augment_patch(const Patch& patch, int g, std::size_t patch_size);

void save_patches(const PatchSet& set, const std::string& path);
PatchSet load_patches(const std::string& path);

}  // namespace fpcnn::patches
