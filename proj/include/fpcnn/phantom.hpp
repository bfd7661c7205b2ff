#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpcnn/volume.hpp"

namespace fpcnn::phantom {

// Synthetic cine-like cohort: annular myocardium on a smoothed-noise
// background, with lesions that differ from healthy wall only in texture
// statistics (correlation length / variance), never in mean intensity.
struct PhantomParams {
  imgvol::GridGeometry grid{
      {256, 256, 12}, {1.25, 1.25, 10.0}, {0.0, 0.0, 0.0}};
  double inner_radius_mm = 20.0;
  double outer_radius_mm = 40.0;
  double radius_jitter_mm = 1.5;   // per-subject radius variation
  double center_jitter_mm = 3.0;   // per-subject annulus center offset
  double base_mean = 100.0;
  double base_std = 12.0;
  double base_corr_vox = 1.1;      // correlation length of healthy texture
  double lesion_corr_vox = 2.4;    // correlation length inside the lesion
  double lesion_var_ratio = 1.5;   // lesion variance / base variance
  double lesion_extent_rad = 5.5;  // nominal angular extent of the sector
  double extent_jitter_frac = 0.1; // per-subject extent variation
  double lesion_transmural_frac = 0.85;  // radial depth from the inner wall
  double noise_floor = 1.0;        // white-noise std added everywhere
  std::uint64_t seed = 1;
};

struct PhantomSubject {
  std::string subject_id;
  imgvol::Volume3D cine;
  imgvol::Volume3D myo_mask;
  imgvol::Volume3D lesion_mask;
  bool has_lesion = false;
  std::uint64_t seed = 0;  // the seed this subject was built from
};

// Deterministic in (params, with_lesion, subject_id). Checks the
// mean-intensity camouflage property and regenerates with a derived seed
// on failure, at most 5 retries.
PhantomSubject generate_subject(const PhantomParams& params, bool with_lesion,
                                const std::string& subject_id = "s000");

// Subject at position `index` of a corpus: id s<index>, seed derived from
// params.seed and the index. Growing the corpus never changes earlier
// subjects.
PhantomSubject generate_corpus_subject(const PhantomParams& params,
                                       std::size_t index, bool with_lesion);

// The first n_lesioned subjects carry lesions.
std::vector<PhantomSubject> generate_corpus(std::size_t n_subjects,
                                            std::size_t n_lesioned,
                                            const PhantomParams& params);

// |mean(cine over lesion) - mean(cine over healthy myocardium)| must stay
// below 0.05 * std(cine over myocardium). Vacuously true without a lesion.
bool camouflage_ok(const imgvol::Volume3D& cine, const imgvol::Volume3D& myo,
                   const imgvol::Volume3D& lesion);

struct ManifestEntry {
  std::string subject_id;
  bool has_lesion = false;
  std::uint64_t seed = 0;
};

// Corpus layout on disk: <id>_cine.fvol, <id>_myo.fvol, <id>_lesion.fvol
// per subject plus manifest.csv (subject_id,has_lesion,seed).
void write_subject(const PhantomSubject& subject, const std::string& dir);
void write_corpus(const std::vector<PhantomSubject>& corpus,
                  const std::string& dir);
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::string& path);

}  // namespace fpcnn::phantom
