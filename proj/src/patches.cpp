#include "fpcnn/patches.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fpcnn/binio.hpp"
#include "fpcnn/error.hpp"
#include "fpcnn/rng.hpp"

namespace fpcnn::patches {

namespace {

void require_single_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos) {
    fail(ErrorCode::invalid_argument,
         std::string(what) + " must be a single non-empty token: '" + s + "'");
  }
}

void validate_extract_config(const ExtractConfig& cfg) {
  if (cfg.patch_size < 3 || cfg.patch_size % 2 == 0) {
    fail(ErrorCode::invalid_argument, "patch size must be odd and >= 3");
  }
  if (cfg.stride == 0) {
    fail(ErrorCode::invalid_argument, "stride must be >= 1");
  }
  if (cfg.coverage_min < 0.0 || cfg.coverage_min > 1.0 ||
      cfg.label_min < 0.0 || cfg.label_min > 1.0) {
    fail(ErrorCode::invalid_argument, "coverage/label thresholds must be in [0, 1]");
  }
}

}  // namespace

double percentile(std::vector<double> values, double q) {
  if (values.empty()) {
    fail(ErrorCode::invalid_argument, "percentile of an empty sample");
  }
  if (q < 0.0 || q > 1.0) {
    fail(ErrorCode::invalid_argument, "percentile rank must be in [0, 1]");
  }
  const double rank = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(rank);
  std::nth_element(values.begin(),
                   values.begin() + static_cast<std::ptrdiff_t>(lo),
                   values.end());
  const double v_lo = values[lo];
  if (static_cast<double>(lo) == rank) return v_lo;
  const double v_hi = *std::min_element(
      values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
  return v_lo + (rank - static_cast<double>(lo)) * (v_hi - v_lo);
}

SubjectStats subject_stats(const std::string& subject_id,
                           const imgvol::Volume3D& cine,
                           const imgvol::Volume3D& myo) {
  require_single_token(subject_id, "subject id");
  if (cine.geometry() != myo.geometry()) {
    fail(ErrorCode::geometry_mismatch, "cine/myo grids differ for " + subject_id);
  }
  if (!imgvol::is_binary_mask(myo)) {
    fail(ErrorCode::invalid_argument, "myocardium mask must be binary");
  }
  SubjectStats st;
  st.subject_id = subject_id;
  st.p1 = percentile(cine.data(), 0.01);
  st.p99 = percentile(cine.data(), 0.99);
  if (!(st.p99 > st.p1)) {
    fail(ErrorCode::degenerate_stats,
         "intensity percentiles collapsed for " + subject_id);
  }

  const auto& g = myo.geometry();
  bool any = false;
  for (std::size_t k = 0; k < g.dims[2]; ++k) {
    bool slice_any = false;
    for (std::size_t j = 0; j < g.dims[1] && !slice_any; ++j) {
      for (std::size_t i = 0; i < g.dims[0] && !slice_any; ++i) {
        slice_any = myo.at(i, j, k) != 0.0;
      }
    }
    if (!slice_any) continue;
    any = true;
    const imgvol::PointMM com = imgvol::slice_center_of_mass(myo, k);
    for (std::size_t j = 0; j < g.dims[1]; ++j) {
      for (std::size_t i = 0; i < g.dims[0]; ++i) {
        if (myo.at(i, j, k) == 0.0) continue;
        const imgvol::PointMM c = myo.voxel_center(i, j, k);
        st.r_norm = std::max(st.r_norm, std::hypot(c.x - com.x, c.y - com.y));
      }
    }
  }
  if (!any) fail(ErrorCode::empty_mask, "no myocardium voxels for " + subject_id);
  if (!(st.r_norm > 0.0)) {
    fail(ErrorCode::degenerate_stats,
         "myocardium collapses to its centroid for " + subject_id);
  }
  return st;
}

std::vector<Patch> extract_subject_patches(const imgvol::Volume3D& cine,
                                           const imgvol::Volume3D& myo,
                                           const imgvol::Volume3D& lesion,
                                           std::uint32_t subject_index,
                                           const SubjectStats& stats,
                                           const ExtractConfig& cfg) {
  validate_extract_config(cfg);
  if (cine.geometry() != myo.geometry() ||
      cine.geometry() != lesion.geometry()) {
    fail(ErrorCode::geometry_mismatch, "cine/myo/lesion grids differ");
  }
  if (!(stats.r_norm > 0.0)) {
    fail(ErrorCode::invalid_argument, "subject stats carry no usable r_norm");
  }
  const auto& g = cine.geometry();
  const std::size_t p = cfg.patch_size;
  const std::size_t h = (p - 1) / 2;
  std::vector<Patch> out;
  if (g.dims[0] < p || g.dims[1] < p) return out;

  for (std::size_t k = 0; k < g.dims[2]; ++k) {
    bool slice_any = false;
    for (std::size_t j = 0; j < g.dims[1] && !slice_any; ++j) {
      for (std::size_t i = 0; i < g.dims[0] && !slice_any; ++i) {
        slice_any = myo.at(i, j, k) != 0.0;
      }
    }
    if (!slice_any) continue;  // no centroid, so no windows on this slice
    const imgvol::PointMM com = imgvol::slice_center_of_mass(myo, k);

    for (std::size_t cj = h; cj + h < g.dims[1]; cj += cfg.stride) {
      for (std::size_t ci = h; ci + h < g.dims[0]; ci += cfg.stride) {
        std::size_t n_myo = 0, n_lesion = 0;
        for (std::size_t r = 0; r < p; ++r) {
          for (std::size_t c = 0; c < p; ++c) {
            const std::size_t x = ci - h + c, y = cj - h + r;
            if (myo.at(x, y, k) == 0.0) continue;
            ++n_myo;
            if (lesion.at(x, y, k) != 0.0) ++n_lesion;
          }
        }
        const double coverage =
            static_cast<double>(n_myo) / static_cast<double>(p * p);
        if (coverage < cfg.coverage_min || n_myo == 0) continue;

        Patch patch;
        patch.subject_index = subject_index;
        patch.slice_index = static_cast<std::uint32_t>(k);
        patch.ci = static_cast<std::int32_t>(ci);
        patch.cj = static_cast<std::int32_t>(cj);
        patch.label = static_cast<double>(n_lesion) /
                                  static_cast<double>(n_myo) >=
                              cfg.label_min
                          ? 1
                          : 0;
        const imgvol::PointMM c = cine.voxel_center(ci, cj, k);
        const double dx = c.x - com.x, dy = c.y - com.y;
        patch.pos = {dx / stats.r_norm, dy / stats.r_norm,
                     std::hypot(dx, dy) / stats.r_norm};
        patch.pixels.resize(p * p);
        for (std::size_t r = 0; r < p; ++r) {
          for (std::size_t c2 = 0; c2 < p; ++c2) {
            patch.pixels[r * p + c2] = cine.at(ci - h + c2, cj - h + r, k);
          }
        }
        out.push_back(std::move(patch));
      }
    }
  }
  return out;
}

void normalize_pixels(PatchSet& set) {
  if (set.normalized) {
    fail(ErrorCode::invalid_argument, "patch set is already normalized");
  }
  for (Patch& patch : set.patches) {
    if (patch.subject_index >= set.subjects.size()) {
      fail(ErrorCode::invalid_argument, "patch references an unknown subject");
    }
    const SubjectStats& st = set.subjects[patch.subject_index];
    const double denom = st.p99 - st.p1;
    if (!(denom > 0.0)) {
      fail(ErrorCode::degenerate_stats,
           "cannot normalize with collapsed percentiles: " + st.subject_id);
    }
    for (double& v : patch.pixels) {
      v = std::clamp((v - st.p1) / denom, 0.0, 1.0);
    }
  }
  set.normalized = true;
}

std::array<std::size_t, 2> label_counts(const PatchSet& set) {
  std::array<std::size_t, 2> n{0, 0};
  for (const Patch& patch : set.patches) ++n[patch.label ? 1 : 0];
  return n;
}

void balance_patches(PatchSet& set, std::uint64_t seed) {
  const auto n = label_counts(set);
  if (n[0] == 0 || n[1] == 0) {
    fail(ErrorCode::empty_dataset, "cannot balance: one class is absent");
  }
  if (n[0] == n[1]) return;
  const std::uint8_t majority = n[1] > n[0] ? 1 : 0;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < set.patches.size(); ++i) {
    if ((set.patches[i].label ? 1 : 0) == majority) candidates.push_back(i);
  }
  SplitMix64 rng(seed);
  shuffle(candidates, rng);
  candidates.resize(std::min(n[0], n[1]));
  std::vector<bool> keep(set.patches.size(), false);
  for (std::size_t i = 0; i < set.patches.size(); ++i) {
    keep[i] = (set.patches[i].label ? 1 : 0) != majority;
  }
  for (std::size_t i : candidates) keep[i] = true;
  std::vector<Patch> kept;
  kept.reserve(2 * std::min(n[0], n[1]));
  for (std::size_t i = 0; i < set.patches.size(); ++i) {
    if (keep[i]) kept.push_back(std::move(set.patches[i]));
  }
  set.patches = std::move(kept);
}

namespace {

// Largest-remainder rounding of n into three buckets; remainder ties go to
// the earlier bucket, so train wins over val, val over test.
std::array<std::size_t, 3> bucket_counts(std::size_t n,
                                         const std::array<double, 3>& frac) {
  std::array<std::size_t, 3> c{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double ideal = frac[i] * static_cast<double>(n);
    c[i] = static_cast<std::size_t>(ideal);
    rem[i] = ideal - static_cast<double>(c[i]);
    used += c[i];
  }
  while (used < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (rem[i] > rem[best]) best = i;
    }
    ++c[best];
    rem[best] -= 1.0;
    ++used;
  }
  return c;
}

}  // namespace

SplitAssignment stratified_split(const std::vector<phantom::ManifestEntry>& entries,
                                 double train_frac, double val_frac,
                                 double test_frac, std::uint64_t seed) {
  if (entries.empty()) fail(ErrorCode::empty_dataset, "no subjects to split");
  if (train_frac < 0.0 || val_frac < 0.0 || test_frac < 0.0 ||
      std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    fail(ErrorCode::invalid_argument, "split fractions must be >= 0 and sum to 1");
  }
  std::vector<std::string> strata[2];  // [0] clean, [1] lesioned
  for (const phantom::ManifestEntry& e : entries) {
    strata[e.has_lesion ? 1 : 0].push_back(e.subject_id);
  }
  SplitAssignment split;
  for (int s = 0; s < 2; ++s) {
    std::vector<std::string>& ids = strata[s];
    std::sort(ids.begin(), ids.end());
    for (std::size_t i = 1; i < ids.size(); ++i) {
      if (ids[i] == ids[i - 1]) {
        fail(ErrorCode::invalid_argument, "duplicate subject id: " + ids[i]);
      }
    }
    SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(s + 1)));
    shuffle(ids, rng);
    const auto c = bucket_counts(ids.size(), {train_frac, val_frac, test_frac});
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto& dst = i < c[0]          ? split.train
                  : i < c[0] + c[1] ? split.val
                                    : split.test;
      dst.push_back(std::move(ids[i]));
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

Patch augment_patch(const Patch& patch, int g, std::size_t patch_size) {
  if (g < 0 || g > 7) {
    fail(ErrorCode::invalid_argument, "dihedral element must be in [0, 8)");
  }
  const std::size_t p = patch_size;
  if (p == 0 || p % 2 == 0 || patch.pixels.size() != p * p) {
    fail(ErrorCode::invalid_argument, "pixel window does not match patch size");
  }
  Patch out = patch;
  if (g >= 4) {  // mirror x: (x, y) -> (-x, y)
    for (std::size_t r = 0; r < p; ++r) {
      for (std::size_t c = 0; c < p / 2; ++c) {
        std::swap(out.pixels[r * p + c], out.pixels[r * p + (p - 1 - c)]);
      }
    }
    out.pos[0] = -out.pos[0];
  }
  const int rotations = g % 4;
  for (int step = 0; step < rotations; ++step) {  // (x, y) -> (-y, x)
    std::vector<double> rotated(p * p);
    for (std::size_t r = 0; r < p; ++r) {
      for (std::size_t c = 0; c < p; ++c) {
        rotated[r * p + c] = out.pixels[(p - 1 - c) * p + r];
      }
    }
    out.pixels = std::move(rotated);
    const double dx = out.pos[0], dy = out.pos[1];
    out.pos[0] = -dy;
    out.pos[1] = dx;
  }
  return out;
}

void save_patches(const PatchSet& set, const std::string& path) {
  if (set.patch_size < 3 || set.patch_size % 2 == 0) {
    fail(ErrorCode::invalid_argument, "patch size must be odd and >= 3");
  }
  require_single_token(set.split, "split tag");
  for (const Patch& patch : set.patches) {
    if (patch.subject_index >= set.subjects.size()) {
      fail(ErrorCode::invalid_argument, "patch references an unknown subject");
    }
    if (patch.pixels.size() != set.patch_size * set.patch_size) {
      fail(ErrorCode::invalid_argument, "pixel window does not match patch size");
    }
    if (patch.label > 1) {
      fail(ErrorCode::invalid_argument, "labels must be 0 or 1");
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io_failure, "cannot open for write: " + path);
  out << "FPATCH1\n";
  out << "patch_size " << set.patch_size << '\n';
  out << "split " << set.split << '\n';
  out << "normalized " << (set.normalized ? 1 : 0) << '\n';
  out << "subjects " << set.subjects.size() << '\n';
  char buf[96];
  for (const SubjectStats& st : set.subjects) {
    require_single_token(st.subject_id, "subject id");
    std::snprintf(buf, sizeof buf, " %.17g %.17g %.17g", st.p1, st.p99,
                  st.r_norm);
    out << st.subject_id << buf << '\n';
  }
  out << "count " << set.patches.size() << '\n';
  out << "end\n";
  for (const Patch& patch : set.patches) {
    binio::put_u32(out, patch.subject_index);
    binio::put_u32(out, patch.slice_index);
    binio::put_i32(out, patch.ci);
    binio::put_i32(out, patch.cj);
    binio::put_u8(out, patch.label);
    for (double v : patch.pos) binio::put_f64(out, v);
    for (double v : patch.pixels) binio::put_f64(out, v);
  }
  if (!out.flush()) fail(ErrorCode::io_failure, "write failed: " + path);
}

namespace {

std::string expect_line(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) {
    fail(ErrorCode::malformed_header, "truncated header in " + path);
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::size_t parse_counted(const std::string& line, const std::string& key,
                          const std::string& path) {
  std::istringstream ss(line);
  std::string word;
  long long value = -1;
  if (!(ss >> word >> value) || word != key || value < 0 || (ss >> word)) {
    fail(ErrorCode::malformed_header,
         "expected '" + key + " <n>' in " + path + ", got: " + line);
  }
  return static_cast<std::size_t>(value);
}

}  // namespace

PatchSet load_patches(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::file_not_found, "cannot open: " + path);
  if (expect_line(in, path) != "FPATCH1") {
    fail(ErrorCode::malformed_header, "bad magic in " + path);
  }
  PatchSet set;
  set.patch_size = parse_counted(expect_line(in, path), "patch_size", path);
  if (set.patch_size < 3 || set.patch_size % 2 == 0) {
    fail(ErrorCode::malformed_header, "bad patch size in " + path);
  }
  {
    std::istringstream ss(expect_line(in, path));
    std::string word;
    if (!(ss >> word >> set.split) || word != "split" || (ss >> word)) {
      fail(ErrorCode::malformed_header, "bad split line in " + path);
    }
  }
  {
    const std::size_t flag =
        parse_counted(expect_line(in, path), "normalized", path);
    if (flag > 1) fail(ErrorCode::malformed_header, "bad normalized flag in " + path);
    set.normalized = flag == 1;
  }
  const std::size_t n_subjects =
      parse_counted(expect_line(in, path), "subjects", path);
  set.subjects.resize(n_subjects);
  for (SubjectStats& st : set.subjects) {
    std::istringstream ss(expect_line(in, path));
    std::string extra;
    if (!(ss >> st.subject_id >> st.p1 >> st.p99 >> st.r_norm) ||
        (ss >> extra)) {
      fail(ErrorCode::malformed_header, "bad subject stats row in " + path);
    }
  }
  const std::size_t count = parse_counted(expect_line(in, path), "count", path);
  if (expect_line(in, path) != "end") {
    fail(ErrorCode::malformed_header, "missing header terminator in " + path);
  }

  set.patches.resize(count);
  const std::size_t n_px = set.patch_size * set.patch_size;
  for (Patch& patch : set.patches) {
    bool ok = binio::get_u32(in, patch.subject_index) &&
              binio::get_u32(in, patch.slice_index) &&
              binio::get_i32(in, patch.ci) && binio::get_i32(in, patch.cj) &&
              binio::get_u8(in, patch.label);
    for (double& v : patch.pos) ok = ok && binio::get_f64(in, v);
    patch.pixels.resize(n_px);
    for (double& v : patch.pixels) ok = ok && binio::get_f64(in, v);
    if (!ok) fail(ErrorCode::data_length_mismatch, "truncated records in " + path);
    if (patch.subject_index >= n_subjects || patch.label > 1) {
      fail(ErrorCode::data_length_mismatch, "corrupt record in " + path);
    }
  }
  if (in.get() != std::char_traits<char>::eof()) {
    fail(ErrorCode::data_length_mismatch, "trailing bytes in " + path);
  }
  return set;
}

}  // namespace fpcnn::patches
