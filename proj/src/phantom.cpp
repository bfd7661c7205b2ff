#include "fpcnn/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "fpcnn/error.hpp"
#include "fpcnn/rng.hpp"

namespace fpcnn::phantom {

namespace {

constexpr std::uint64_t kGeomStream = 1;
constexpr std::uint64_t kSectorStream = 2;
constexpr std::uint64_t kBaseNoiseStream = 3;
constexpr std::uint64_t kLesionNoiseStream = 4;
constexpr std::uint64_t kFloorNoiseStream = 5;
constexpr std::uint64_t kRetryStream = 7700;

void validate_params(const PhantomParams& p) {
  if (!(p.inner_radius_mm > 0.0) ||
      !(p.outer_radius_mm > p.inner_radius_mm)) {
    fail(ErrorCode::invalid_argument, "annulus radii must satisfy 0 < inner < outer");
  }
  if (p.radius_jitter_mm < 0.0 || p.center_jitter_mm < 0.0) {
    fail(ErrorCode::invalid_argument, "jitter amplitudes must be non-negative");
  }
  if (p.radius_jitter_mm * 2.0 >= p.outer_radius_mm - p.inner_radius_mm) {
    fail(ErrorCode::invalid_argument, "radius jitter can invert the annulus");
  }
  if (!(p.base_std > 0.0) || p.base_corr_vox < 0.0 || p.lesion_corr_vox < 0.0) {
    fail(ErrorCode::invalid_argument, "texture parameters out of range");
  }
  if (!(p.lesion_var_ratio > 0.0)) {
    fail(ErrorCode::invalid_argument, "lesion variance ratio must be positive");
  }
  if (!(p.lesion_extent_rad > 0.0) ||
      p.lesion_extent_rad > 2.0 * std::numbers::pi) {
    fail(ErrorCode::invalid_argument, "lesion extent must be in (0, 2*pi]");
  }
  if (p.extent_jitter_frac < 0.0 || p.extent_jitter_frac >= 1.0) {
    fail(ErrorCode::invalid_argument, "extent jitter fraction must be in [0, 1)");
  }
  if (!(p.lesion_transmural_frac > 0.0) || p.lesion_transmural_frac > 1.0) {
    fail(ErrorCode::invalid_argument, "transmural fraction must be in (0, 1]");
  }
  if (p.noise_floor < 0.0) {
    fail(ErrorCode::invalid_argument, "noise floor must be non-negative");
  }
}

// Gaussian taps at integer offsets, normalized to unit sum. sigma is the
// correlation length in voxels.
std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
    const double v = std::exp(-0.5 * (static_cast<double>(t) / sigma) *
                              (static_cast<double>(t) / sigma));
    w[static_cast<std::size_t>(t + radius)] = v;
    sum += v;
  }
  for (double& v : w) v /= sum;
  return w;
}

// Unit-variance correlated field: white gaussian noise smoothed per slice
// with a separable circular-boundary filter, then rescaled by the kernel
// energy so every voxel keeps variance 1 regardless of sigma.
imgvol::Volume3D smoothed_noise_volume(const imgvol::GridGeometry& geom,
                                       double corr_vox, SplitMix64& rng) {
  imgvol::Volume3D vol = imgvol::Volume3D::zeros(geom);
  const std::size_t nx = geom.dims[0], ny = geom.dims[1], nz = geom.dims[2];
  for (double& v : vol.data()) v = rng.next_gaussian();
  if (corr_vox <= 0.0) return vol;

  const std::vector<double> w = gaussian_kernel(corr_vox);
  const auto radius = static_cast<std::ptrdiff_t>(w.size() / 2);
  double energy = 0.0;  // variance shrink factor of one filter pass
  for (double v : w) energy += v * v;
  const double restore = 1.0 / energy;  // two passes shrink by energy^2

  std::vector<double> tmp(nx * ny);
  for (std::size_t k = 0; k < nz; ++k) {
    double* slice = vol.data().data() + k * nx * ny;
    for (std::size_t j = 0; j < ny; ++j) {
      for (std::size_t i = 0; i < nx; ++i) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
          const std::size_t ii = static_cast<std::size_t>(
              (static_cast<std::ptrdiff_t>(i + nx) + t) %
              static_cast<std::ptrdiff_t>(nx));
          acc += w[static_cast<std::size_t>(t + radius)] * slice[ii + nx * j];
        }
        tmp[i + nx * j] = acc;
      }
    }
    for (std::size_t j = 0; j < ny; ++j) {
      for (std::size_t i = 0; i < nx; ++i) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
          const std::size_t jj = static_cast<std::size_t>(
              (static_cast<std::ptrdiff_t>(j + ny) + t) %
              static_cast<std::ptrdiff_t>(ny));
          acc += w[static_cast<std::size_t>(t + radius)] * tmp[i + nx * jj];
        }
        slice[i + nx * j] = acc * restore;
      }
    }
  }
  return vol;
}

struct SubjectShape {
  double cx, cy;          // annulus center, mm
  double r_in, r_out;     // wall radii, mm
  double theta0, extent;  // lesion sector start angle and width, rad
};

PhantomSubject build_once(const PhantomParams& p, bool with_lesion,
                          const std::string& subject_id, std::uint64_t seed) {
  SplitMix64 geom_rng(derive_seed(seed, kGeomStream));
  SplitMix64 sector_rng(derive_seed(seed, kSectorStream));
  SplitMix64 base_rng(derive_seed(seed, kBaseNoiseStream));
  SplitMix64 lesion_rng(derive_seed(seed, kLesionNoiseStream));
  SplitMix64 floor_rng(derive_seed(seed, kFloorNoiseStream));

  const auto& g = p.grid;
  const double mid_x = g.origin[0] + 0.5 * g.spacing[0] * static_cast<double>(g.dims[0]);
  const double mid_y = g.origin[1] + 0.5 * g.spacing[1] * static_cast<double>(g.dims[1]);

  SubjectShape s{};
  s.cx = mid_x + geom_rng.next_range(-p.center_jitter_mm, p.center_jitter_mm);
  s.cy = mid_y + geom_rng.next_range(-p.center_jitter_mm, p.center_jitter_mm);
  s.r_in = p.inner_radius_mm +
           geom_rng.next_range(-p.radius_jitter_mm, p.radius_jitter_mm);
  s.r_out = p.outer_radius_mm +
            geom_rng.next_range(-p.radius_jitter_mm, p.radius_jitter_mm);
  // Sector draws happen for every subject so that lesioned and clean
  // subjects with the same seed share identical anatomy and textures.
  s.theta0 = sector_rng.next_range(-std::numbers::pi, std::numbers::pi);
  s.extent = p.lesion_extent_rad *
             sector_rng.next_range(1.0 - p.extent_jitter_frac,
                                   1.0 + p.extent_jitter_frac);
  s.extent = std::min(s.extent, 2.0 * std::numbers::pi);
  const double r_lesion = s.r_in + p.lesion_transmural_frac * (s.r_out - s.r_in);

  PhantomSubject out;
  out.subject_id = subject_id;
  out.seed = seed;
  out.myo_mask = imgvol::Volume3D::zeros(g);
  out.lesion_mask = imgvol::Volume3D::zeros(g);

  const std::size_t nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  for (std::size_t j = 0; j < ny; ++j) {
    for (std::size_t i = 0; i < nx; ++i) {
      const imgvol::PointMM c = out.myo_mask.voxel_center(i, j, 0);
      const double dx = c.x - s.cx, dy = c.y - s.cy;
      const double r = std::hypot(dx, dy);
      if (r < s.r_in || r > s.r_out) continue;
      bool in_lesion = false;
      if (with_lesion && r <= r_lesion) {
        const double two_pi = 2.0 * std::numbers::pi;
        double d = std::fmod(std::atan2(dy, dx) - s.theta0 + 2.0 * two_pi, two_pi);
        in_lesion = d < s.extent;
      }
      for (std::size_t k = 0; k < nz; ++k) {  // cylinder: same shape each slice
        out.myo_mask.at(i, j, k) = 1.0;
        if (in_lesion) out.lesion_mask.at(i, j, k) = 1.0;
      }
    }
  }

  out.cine = smoothed_noise_volume(g, p.base_corr_vox, base_rng);
  imgvol::Volume3D lesion_tex =
      smoothed_noise_volume(g, p.lesion_corr_vox, lesion_rng);
  const double lesion_std = p.base_std * std::sqrt(p.lesion_var_ratio);
  for (std::size_t v = 0; v < out.cine.size(); ++v) {
    const bool les = out.lesion_mask.data()[v] != 0.0;
    const double unit = les ? lesion_tex.data()[v] : out.cine.data()[v];
    double value = p.base_mean + (les ? lesion_std : p.base_std) * unit;
    if (p.noise_floor > 0.0) value += p.noise_floor * floor_rng.next_gaussian();
    out.cine.data()[v] = value;
  }

  // Remove any mean-intensity cue: shift the lesion region so its average
  // matches the healthy wall exactly.
  double sum_l = 0.0, sum_h = 0.0;
  std::size_t n_l = 0, n_h = 0;
  for (std::size_t v = 0; v < out.cine.size(); ++v) {
    if (out.myo_mask.data()[v] == 0.0) continue;
    if (out.lesion_mask.data()[v] != 0.0) {
      sum_l += out.cine.data()[v];
      ++n_l;
    } else {
      sum_h += out.cine.data()[v];
      ++n_h;
    }
  }
  if (n_l > 0 && n_h > 0) {
    const double shift = sum_h / static_cast<double>(n_h) -
                         sum_l / static_cast<double>(n_l);
    for (std::size_t v = 0; v < out.cine.size(); ++v) {
      if (out.lesion_mask.data()[v] != 0.0) out.cine.data()[v] += shift;
    }
  }

  out.has_lesion = n_l > 0;
  return out;
}

}  // namespace

bool camouflage_ok(const imgvol::Volume3D& cine, const imgvol::Volume3D& myo,
                   const imgvol::Volume3D& lesion) {
  if (cine.geometry() != myo.geometry() ||
      cine.geometry() != lesion.geometry()) {
    fail(ErrorCode::geometry_mismatch, "camouflage check needs one common grid");
  }
  double sum_l = 0.0, sum_h = 0.0, sum_m = 0.0, sum_m2 = 0.0;
  std::size_t n_l = 0, n_h = 0;
  for (std::size_t v = 0; v < cine.size(); ++v) {
    if (myo.data()[v] == 0.0) continue;
    const double x = cine.data()[v];
    sum_m += x;
    sum_m2 += x * x;
    if (lesion.data()[v] != 0.0) {
      sum_l += x;
      ++n_l;
    } else {
      sum_h += x;
      ++n_h;
    }
  }
  if (n_l == 0 || n_h == 0) return true;
  const double n_m = static_cast<double>(n_l + n_h);
  const double mean_m = sum_m / n_m;
  const double sd = std::sqrt(std::max(0.0, sum_m2 / n_m - mean_m * mean_m));
  const double gap = std::abs(sum_l / static_cast<double>(n_l) -
                              sum_h / static_cast<double>(n_h));
  return gap < 0.05 * sd;
}

PhantomSubject generate_subject(const PhantomParams& params, bool with_lesion,
                                const std::string& subject_id) {
  validate_params(params);
  for (std::uint64_t attempt = 0; attempt <= 5; ++attempt) {
    const std::uint64_t seed =
        attempt == 0 ? params.seed
                     : derive_seed(params.seed, kRetryStream + attempt);
    PhantomSubject subject = build_once(params, with_lesion, subject_id, seed);
    if (camouflage_ok(subject.cine, subject.myo_mask, subject.lesion_mask)) {
      return subject;
    }
  }
  fail(ErrorCode::pipeline_error,
       "camouflage property failed after 5 regenerations for " + subject_id);
}

PhantomSubject generate_corpus_subject(const PhantomParams& params,
                                       std::size_t index, bool with_lesion) {
  PhantomParams sub = params;
  sub.seed = derive_seed(params.seed, index);
  char id[32];
  std::snprintf(id, sizeof id, "s%03zu", index);
  return generate_subject(sub, with_lesion, id);
}

std::vector<PhantomSubject> generate_corpus(std::size_t n_subjects,
                                            std::size_t n_lesioned,
                                            const PhantomParams& params) {
  if (n_lesioned > n_subjects) {
    fail(ErrorCode::invalid_argument, "more lesioned subjects than subjects");
  }
  std::vector<PhantomSubject> corpus;
  corpus.reserve(n_subjects);
  for (std::size_t s = 0; s < n_subjects; ++s) {
    corpus.push_back(generate_corpus_subject(params, s, s < n_lesioned));
  }
  return corpus;
}

void write_subject(const PhantomSubject& subject, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path base = fs::path(dir) / subject.subject_id;
  imgvol::save_volume(subject.cine, base.string() + "_cine.fvol");
  imgvol::save_volume(subject.myo_mask, base.string() + "_myo.fvol");
  imgvol::save_volume(subject.lesion_mask, base.string() + "_lesion.fvol");
}

void write_corpus(const std::vector<PhantomSubject>& corpus,
                  const std::string& dir) {
  std::vector<ManifestEntry> entries;
  entries.reserve(corpus.size());
  for (const PhantomSubject& s : corpus) {
    write_subject(s, dir);
    entries.push_back({s.subject_id, s.has_lesion, s.seed});
  }
  write_manifest(entries, (std::filesystem::path(dir) / "manifest.csv").string());
}

void write_manifest(const std::vector<ManifestEntry>& entries,
                    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io_failure, "cannot open for write: " + path);
  out << "subject_id,has_lesion,seed\n";
  for (const ManifestEntry& e : entries) {
    out << e.subject_id << ',' << (e.has_lesion ? 1 : 0) << ',' << e.seed
        << '\n';
  }
  if (!out.flush()) fail(ErrorCode::io_failure, "write failed: " + path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::file_not_found, "cannot open: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "subject_id,has_lesion,seed") {
    fail(ErrorCode::malformed_header, "bad manifest header in " + path);
  }
  std::vector<ManifestEntry> entries;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    ManifestEntry e;
    std::string flag, seed;
    if (!std::getline(ss, e.subject_id, ',') || !std::getline(ss, flag, ',') ||
        !std::getline(ss, seed) || e.subject_id.empty() ||
        (flag != "0" && flag != "1")) {
      fail(ErrorCode::malformed_header, "bad manifest row: " + line);
    }
    e.has_lesion = flag == "1";
    try {
      std::size_t used = 0;
      e.seed = std::stoull(seed, &used);
      if (used != seed.size()) throw std::invalid_argument(seed);
    } catch (const std::exception&) {
      fail(ErrorCode::malformed_header, "bad manifest seed: " + line);
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace fpcnn::phantom
