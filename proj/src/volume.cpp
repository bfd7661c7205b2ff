#include "fpcnn/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fpcnn/error.hpp"

namespace fpcnn::imgvol {

namespace {

void validate_geometry(const GridGeometry& g) {
  for (int a = 0; a < 3; ++a) {
    if (g.dims[a] < 1) fail(ErrorCode::invalid_argument, "dims must be >= 1");
    if (!(g.spacing[a] > 0.0) || !std::isfinite(g.spacing[a]))
      fail(ErrorCode::invalid_argument, "spacing must be positive and finite");
    if (!std::isfinite(g.origin[a]))
      fail(ErrorCode::invalid_argument, "origin must be finite");
  }
}

std::size_t voxel_count(const GridGeometry& g) {
  return g.dims[0] * g.dims[1] * g.dims[2];
}

void append_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b)
    out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b)
    bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Reads one header line (terminated by '\n').
bool read_line(std::istream& in, std::string& line) {
  line.clear();
  return static_cast<bool>(std::getline(in, line));
}

}  // namespace

Volume3D::Volume3D(GridGeometry geom, std::vector<double> data)
    : geom_(geom), data_(std::move(data)) {
  validate_geometry(geom_);
  if (data_.size() != voxel_count(geom_))
    fail(ErrorCode::data_length_mismatch,
         "data length does not match dims product");
}

Volume3D Volume3D::zeros(const GridGeometry& geom) {
  validate_geometry(geom);
  return Volume3D(geom, std::vector<double>(voxel_count(geom), 0.0));
}

bool is_binary_mask(const Volume3D& v) {
  for (double x : v.data())
    if (x != 0.0 && x != 1.0) return false;
  return true;
}

Volume3D load_volume(const std::string& path) {
  if (!std::filesystem::exists(path))
    fail(ErrorCode::file_not_found, "no such file: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io_failure, "cannot open " + path);

  std::string line;
  if (!read_line(in, line) || line != "FVOL1")
    fail(ErrorCode::malformed_header, path + ": bad magic");

  GridGeometry g;
  if (!read_line(in, line))
    fail(ErrorCode::malformed_header, path + ": truncated header");
  {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> g.dims[0] >> g.dims[1] >> g.dims[2]) || tag != "dims")
      fail(ErrorCode::malformed_header, path + ": bad dims line");
  }
  if (!read_line(in, line))
    fail(ErrorCode::malformed_header, path + ": truncated header");
  {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> g.spacing[0] >> g.spacing[1] >> g.spacing[2]) ||
        tag != "spacing")
      fail(ErrorCode::malformed_header, path + ": bad spacing line");
  }
  if (!read_line(in, line))
    fail(ErrorCode::malformed_header, path + ": truncated header");
  {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> g.origin[0] >> g.origin[1] >> g.origin[2]) ||
        tag != "origin")
      fail(ErrorCode::malformed_header, path + ": bad origin line");
  }
  if (!read_line(in, line) || line != "dtype f64")
    fail(ErrorCode::malformed_header, path + ": bad dtype line");
  if (!read_line(in, line) || !line.empty())
    fail(ErrorCode::malformed_header, path + ": missing blank separator");

  try {
    validate_geometry(g);
  } catch (const Error&) {
    fail(ErrorCode::malformed_header, path + ": invalid geometry");
  }

  const std::size_t n = voxel_count(g);
  std::vector<unsigned char> raw(n * 8);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    fail(ErrorCode::data_length_mismatch, path + ": payload shorter than dims");
  char extra;
  if (in.read(&extra, 1))
    fail(ErrorCode::data_length_mismatch, path + ": payload longer than dims");

  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = read_f64_le(&raw[i * 8]);
  return Volume3D(g, std::move(data));
}

void save_volume(const Volume3D& v, const std::string& path) {
  const GridGeometry& g = v.geometry();
  std::string out;
  out += "FVOL1\n";
  out += "dims " + std::to_string(g.dims[0]) + " " + std::to_string(g.dims[1]) +
         " " + std::to_string(g.dims[2]) + "\n";
  out += "spacing " + format_g17(g.spacing[0]) + " " + format_g17(g.spacing[1]) +
         " " + format_g17(g.spacing[2]) + "\n";
  out += "origin " + format_g17(g.origin[0]) + " " + format_g17(g.origin[1]) +
         " " + format_g17(g.origin[2]) + "\n";
  out += "dtype f64\n";
  out += "\n";
  out.reserve(out.size() + v.size() * 8);
  for (double x : v.data()) append_f64_le(out, x);

  std::ofstream fs(path, std::ios::binary | std::ios::trunc);
  if (!fs) fail(ErrorCode::io_failure, "cannot open for write: " + path);
  fs.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!fs) fail(ErrorCode::io_failure, "write failed: " + path);
}

std::vector<double> load_zpos(const std::string& path) {
  if (!std::filesystem::exists(path))
    fail(ErrorCode::file_not_found, "no such file: " + path);
  std::ifstream in(path);
  if (!in) fail(ErrorCode::io_failure, "cannot open " + path);
  std::vector<double> zs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    double z;
    if (!(ls >> z)) fail(ErrorCode::malformed_header, path + ": bad zpos line");
    zs.push_back(z);
  }
  if (zs.empty()) fail(ErrorCode::malformed_header, path + ": empty zpos file");
  return zs;
}

void save_zpos(const std::string& path, const std::vector<double>& zs) {
  if (zs.empty()) fail(ErrorCode::invalid_argument, "empty zpos list");
  std::ofstream fs(path, std::ios::trunc);
  if (!fs) fail(ErrorCode::io_failure, "cannot open for write: " + path);
  for (double z : zs) fs << format_g17(z) << "\n";
  if (!fs) fail(ErrorCode::io_failure, "write failed: " + path);
}

std::string zpos_path_for(const std::string& fvol_path) {
  std::filesystem::path p(fvol_path);
  p.replace_extension(".zpos");
  return p.string();
}

std::vector<double> slice_positions(const Volume3D& v) {
  std::vector<double> zs(v.nz());
  for (std::size_t k = 0; k < v.nz(); ++k)
    zs[k] = v.origin()[2] + (static_cast<double>(k) + 0.5) * v.spacing()[2];
  return zs;
}

namespace {

// Shared accumulation for full-volume and single-slice center of mass.
// Index sums are accumulated first and converted to physical coordinates
// once, keeping the result independent of grid translation round-off.
PointMM weighted_center(const Volume3D& mask, std::size_t k_lo,
                        std::size_t k_hi) {
  double total = 0.0, sx = 0.0, sy = 0.0, sz = 0.0;
  for (std::size_t k = k_lo; k < k_hi; ++k)
    for (std::size_t j = 0; j < mask.ny(); ++j)
      for (std::size_t i = 0; i < mask.nx(); ++i) {
        const double w = mask.at(i, j, k);
        if (w == 0.0) continue;
        total += w;
        sx += w * (static_cast<double>(i) + 0.5);
        sy += w * (static_cast<double>(j) + 0.5);
        sz += w * (static_cast<double>(k) + 0.5);
      }
  if (total <= 0.0)
    fail(ErrorCode::empty_mask, "center_of_mass: mask has no nonzero voxels");
  return {mask.origin()[0] + (sx / total) * mask.spacing()[0],
          mask.origin()[1] + (sy / total) * mask.spacing()[1],
          mask.origin()[2] + (sz / total) * mask.spacing()[2]};
}

}  // namespace

PointMM center_of_mass(const Volume3D& mask) {
  return weighted_center(mask, 0, mask.nz());
}

PointMM slice_center_of_mass(const Volume3D& mask, std::size_t k) {
  if (k >= mask.nz())
    fail(ErrorCode::invalid_argument, "slice index out of range");
  return weighted_center(mask, k, k + 1);
}

namespace {

struct AxisMap {
  std::vector<std::size_t> index;  // nearest source index per target index
  std::vector<char> inside;        // target center within source extent
};

// Nearest source index along one axis for every target position. The
// fractional source coordinate f puts voxel centers at f = i + 0.5, so the
// nearest index with ties to the lower one is ceil(f - 1), clamped to the
// grid. The extent test is the closed interval [origin, origin + n*spacing].
AxisMap build_axis_map(std::size_t src_n, double src_origin, double src_spacing,
                       std::size_t dst_n, double dst_origin,
                       double dst_spacing) {
  AxisMap m;
  m.index.resize(dst_n, 0);
  m.inside.resize(dst_n, 0);
  const double hi = src_origin + static_cast<double>(src_n) * src_spacing;
  for (std::size_t t = 0; t < dst_n; ++t) {
    const double pos = dst_origin + (static_cast<double>(t) + 0.5) * dst_spacing;
    if (pos < src_origin || pos > hi) continue;
    m.inside[t] = 1;
    const double f = (pos - src_origin) / src_spacing;
    double idx = std::ceil(f - 1.0);
    if (idx < 0.0) idx = 0.0;
    const double last = static_cast<double>(src_n - 1);
    if (idx > last) idx = last;
    m.index[t] = static_cast<std::size_t>(idx);
  }
  return m;
}

}  // namespace

Volume3D resample_nearest(const Volume3D& src, const GridGeometry& target) {
  validate_geometry(target);
  const GridGeometry& sg = src.geometry();
  const AxisMap mx = build_axis_map(sg.dims[0], sg.origin[0], sg.spacing[0],
                                    target.dims[0], target.origin[0],
                                    target.spacing[0]);
  const AxisMap my = build_axis_map(sg.dims[1], sg.origin[1], sg.spacing[1],
                                    target.dims[1], target.origin[1],
                                    target.spacing[1]);
  const AxisMap mz = build_axis_map(sg.dims[2], sg.origin[2], sg.spacing[2],
                                    target.dims[2], target.origin[2],
                                    target.spacing[2]);

  Volume3D out = Volume3D::zeros(target);
  for (std::size_t k = 0; k < target.dims[2]; ++k) {
    if (!mz.inside[k]) continue;
    for (std::size_t j = 0; j < target.dims[1]; ++j) {
      if (!my.inside[j]) continue;
      for (std::size_t i = 0; i < target.dims[0]; ++i) {
        if (!mx.inside[i]) continue;
        out.at(i, j, k) = src.at(mx.index[i], my.index[j], mz.index[k]);
      }
    }
  }
  return out;
}

Volume3D align_by_centers(const Volume3D& moving, const PointMM& moving_center,
                          const PointMM& fixed_center) {
  for (double c : {moving_center.x, moving_center.y, moving_center.z,
                   fixed_center.x, fixed_center.y, fixed_center.z})
    if (!std::isfinite(c))
      fail(ErrorCode::invalid_argument, "align_by_centers: non-finite center");
  GridGeometry g = moving.geometry();
  g.origin[0] += fixed_center.x - moving_center.x;
  g.origin[1] += fixed_center.y - moving_center.y;
  g.origin[2] += fixed_center.z - moving_center.z;
  return Volume3D(g, moving.data());
}

std::vector<std::size_t> nearest_slice_map(const std::vector<double>& src_z,
                                           const std::vector<double>& dst_z) {
  if (src_z.empty() || dst_z.empty())
    fail(ErrorCode::invalid_argument, "nearest_slice_map: empty slice list");
  if (!std::is_sorted(src_z.begin(), src_z.end()) ||
      !std::is_sorted(dst_z.begin(), dst_z.end()))
    fail(ErrorCode::invalid_argument, "nearest_slice_map: lists must be sorted");

  std::vector<std::size_t> map(dst_z.size(), 0);
  for (std::size_t d = 0; d < dst_z.size(); ++d) {
    std::size_t best = 0;
    double best_dz = std::abs(dst_z[d] - src_z[0]);
    for (std::size_t s = 1; s < src_z.size(); ++s) {
      const double dz = std::abs(dst_z[d] - src_z[s]);
      if (dz < best_dz) {
        best_dz = dz;
        best = s;
      }
    }
    map[d] = best;
  }
  return map;
}

}  // namespace fpcnn::imgvol
