// Volume containers and NIfTI-1 I/O.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace neors {

/// Storage scalar kinds accepted on read (NIfTI-1 datatype codes).
enum class Datatype : std::int16_t {
  UInt8 = 2,
  Int16 = 4,
  Int32 = 8,
  Float32 = 16,
  Float64 = 64,
};

std::size_t bytes_per_voxel(Datatype dt);
const char* datatype_name(Datatype dt);

/// Errors raised by file I/O; message carries the path and byte offset.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct VolumeHeader {
  /// nx, ny, nz, nt (nt == 1 for 3D volumes).
  std::array<std::size_t, 4> dims{1, 1, 1, 1};
  /// mm per spatial axis.
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
  /// voxel index -> world mm.
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
  Datatype datatype = Datatype::Float64;
  double tr_seconds = 0.0;

  std::size_t nx() const { return dims[0]; }
  std::size_t ny() const { return dims[1]; }
  std::size_t nz() const { return dims[2]; }
  std::size_t nt() const { return dims[3]; }
  std::size_t voxels_per_frame() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t total_voxels() const { return voxels_per_frame() * dims[3]; }
  bool is_4d() const { return dims[3] > 1; }

  /// Throws std::invalid_argument if an invariant is broken.
  void validate() const;

  /// Header describing a single frame of this grid.
  VolumeHeader spatial() const;

  Eigen::Vector3d voxel_to_world(double i, double j, double k) const {
    return (affine * Eigen::Vector4d(i, j, k, 1.0)).head<3>();
  }
};

/// Builds a 3D header with diagonal affine and the given origin (world mm of voxel 0).
VolumeHeader make_grid(std::array<std::size_t, 3> dims, std::array<double, 3> voxel_size,
                       Eigen::Vector3d origin = Eigen::Vector3d::Zero());

/// Voxel data is stored x-fastest, then y, z, t; always double precision in memory.
class Volume {
 public:
  Volume() = default;
  explicit Volume(VolumeHeader header, double fill = 0.0);
  Volume(VolumeHeader header, std::vector<double> data);

  const VolumeHeader& header() const { return header_; }
  VolumeHeader& header() { return header_; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z, std::size_t t = 0) const {
    return ((t * header_.dims[2] + z) * header_.dims[1] + y) * header_.dims[0] + x;
  }
  double& at(std::size_t x, std::size_t y, std::size_t z, std::size_t t = 0) {
    return data_[index(x, y, z, t)];
  }
  double at(std::size_t x, std::size_t y, std::size_t z, std::size_t t = 0) const {
    return data_[index(x, y, z, t)];
  }

  /// Copy of one frame as a 3D volume.
  Volume frame(std::size_t t) const;
  void set_frame(std::size_t t, const Volume& v);
  /// Time series of one voxel.
  std::vector<double> series(std::size_t voxel) const;

  /// True when any voxel was NaN in the source file.
  bool has_nan() const { return has_nan_; }
  void set_has_nan(bool v) { has_nan_ = v; }

 private:
  VolumeHeader header_;
  std::vector<double> data_;
  bool has_nan_ = false;
};

/// Assembles a 4D volume from equally shaped 3D frames.
Volume stack_frames(const std::vector<Volume>& frames, double tr_seconds);

Volume read_volume(const std::filesystem::path& path);

/// `.nii.gz` triggers gzip. Values not representable in the header datatype
/// are written as float32 when exact, else float64.
void write_volume(const Volume& v, const std::filesystem::path& path);

/// Permutes/flips voxel axes so they run closest to RAS world order; world
/// coordinates of every voxel are unchanged.
Volume reorient_to_standard(const Volume& v);

/// Output axis of each input voxel axis under reorient_to_standard.
std::array<int, 3> standard_axis_map(const VolumeHeader& h);

}  // namespace neors
