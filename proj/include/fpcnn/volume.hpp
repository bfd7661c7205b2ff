#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace fpcnn::imgvol {

struct GridGeometry {
  std::array<std::size_t, 3> dims{1, 1, 1};    // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm

  bool operator==(const GridGeometry&) const = default;
};

struct PointMM {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// Scalar voxel grid with physical geometry. Data is x-fastest, 64-bit.
// Voxel-center convention used everywhere: position = origin + (index + 0.5) * spacing.
// Mask volumes hold exactly 0.0 or 1.0.
class Volume3D {
 public:
  Volume3D() : data_(1, 0.0) {}
  Volume3D(GridGeometry geom, std::vector<double> data);

  static Volume3D zeros(const GridGeometry& geom);

  const GridGeometry& geometry() const { return geom_; }
  std::size_t nx() const { return geom_.dims[0]; }
  std::size_t ny() const { return geom_.dims[1]; }
  std::size_t nz() const { return geom_.dims[2]; }
  const std::array<double, 3>& spacing() const { return geom_.spacing; }
  const std::array<double, 3>& origin() const { return geom_.origin; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return i + geom_.dims[0] * (j + geom_.dims[1] * k);
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[index(i, j, k)];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[index(i, j, k)];
  }

  PointMM voxel_center(std::size_t i, std::size_t j, std::size_t k) const {
    return {geom_.origin[0] + (static_cast<double>(i) + 0.5) * geom_.spacing[0],
            geom_.origin[1] + (static_cast<double>(j) + 0.5) * geom_.spacing[1],
            geom_.origin[2] + (static_cast<double>(k) + 0.5) * geom_.spacing[2]};
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool operator==(const Volume3D&) const = default;

 private:
  GridGeometry geom_;
  std::vector<double> data_;
};

bool is_binary_mask(const Volume3D& v);

// FVOL format: ASCII header (FVOL1, dims, spacing, origin, dtype f64),
// blank line, then little-endian 64-bit floats, x-fastest. Round trips
// are bit-exact.
Volume3D load_volume(const std::string& path);
void save_volume(const Volume3D& v, const std::string& path);

// Optional .zpos sidecar: one physical slice-z per line, for non-uniform
// long-axis positions.
std::vector<double> load_zpos(const std::string& path);
void save_zpos(const std::string& path, const std::vector<double>& zs);
std::string zpos_path_for(const std::string& fvol_path);

// Uniform slice centers derived from the grid: origin.z + (k + 0.5) * spacing.z.
std::vector<double> slice_positions(const Volume3D& v);

// Value-weighted mean of voxel physical centers. Errors when total weight
// is zero (empty mask).
PointMM center_of_mass(const Volume3D& mask);
// Same, restricted to slice k.
PointMM slice_center_of_mass(const Volume3D& mask, std::size_t k);

// Each target voxel takes the value of the spatially nearest source voxel
// center; equidistant candidates resolve to the lower index. Targets whose
// center lies outside the closed source extent
// [origin, origin + dims * spacing] get 0.0.
Volume3D resample_nearest(const Volume3D& src, const GridGeometry& target);

// Rigid translation: shifts origin by (fixed_center - moving_center); the
// voxel data is untouched.
Volume3D align_by_centers(const Volume3D& moving, const PointMM& moving_center,
                          const PointMM& fixed_center);

// For each dst slice position, the index of the src slice with minimal |dz|;
// ties break to the lower index. Both lists must be nonempty and sorted.
std::vector<std::size_t> nearest_slice_map(const std::vector<double>& src_z,
                                           const std::vector<double>& dst_z);

}  // namespace fpcnn::imgvol
