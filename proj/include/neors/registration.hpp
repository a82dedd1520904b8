// Intensity-based rigid/affine registration and resampling.
#pragma once

#include "neors/volume.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace neors {

enum class Dof { Rigid = 6, Affine = 12 };

/// Parameter vector layout: tx ty tz (mm), rx ry rz (rad), sx sy sz, hxy hxz hyz.
struct AffineParams {
  std::array<double, 12> v{0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0};

  Eigen::Vector3d translation() const { return {v[0], v[1], v[2]}; }
  Eigen::Vector3d rotation() const { return {v[3], v[4], v[5]}; }
  Eigen::Vector3d scales() const { return {v[6], v[7], v[8]}; }
  Eigen::Vector3d shears() const { return {v[9], v[10], v[11]}; }
};

/// World->world map x' = R U (x - c) + c + t, with R = Rx Ry Rz (intrinsic x-y-z
/// Euler angles) and U = diag(s) * unit-upper-triangular(shears).
class AffineTransform {
 public:
  AffineTransform() = default;
  AffineTransform(AffineParams params, Dof dof, Eigen::Vector3d pivot);

  static AffineTransform identity(Dof dof = Dof::Rigid,
                                  Eigen::Vector3d pivot = Eigen::Vector3d::Zero());
  static AffineTransform rigid(const Eigen::Vector3d& translation, const Eigen::Vector3d& rotation,
                               Eigen::Vector3d pivot = Eigen::Vector3d::Zero());
  /// Decomposes a 4x4 world map. Throws if det <= 0, or if dof is Rigid and the
  /// linear block is not a rotation (to 1e-6).
  static AffineTransform from_matrix(const Eigen::Matrix4d& m, Dof dof,
                                     Eigen::Vector3d pivot = Eigen::Vector3d::Zero());

  const AffineParams& params() const { return params_; }
  Dof dof() const { return dof_; }
  const Eigen::Vector3d& pivot() const { return pivot_; }
  Eigen::Matrix4d matrix() const;

  AffineTransform inverse() const;
  /// (*this) after `first`: x -> this(first(x)).
  AffineTransform compose(const AffineTransform& first) const;
  Eigen::Vector3d apply(const Eigen::Vector3d& x) const;

  /// Same map, parameters re-expressed about another pivot.
  AffineTransform with_pivot(const Eigen::Vector3d& pivot) const;

 private:
  AffineParams params_{};
  Dof dof_ = Dof::Rigid;
  Eigen::Vector3d pivot_ = Eigen::Vector3d::Zero();
};

Eigen::Matrix3d euler_xyz(const Eigen::Vector3d& angles);

enum class Interpolation { Nearest, Trilinear, Sinc };

/// Hann-windowed sinc weight, radius 7 samples.
double hann_sinc(double x, int radius = 7);

/// Samples `v` (every frame) on `target_grid`. `t` maps v's world space into the
/// target's world space. Points outside the source extent become 0. No anti-alias
/// blur is applied.
Volume resample(const Volume& v, const AffineTransform& t, const VolumeHeader& target_grid,
                Interpolation interp);

/// Interpolated value at a continuous voxel coordinate of frame `frame`; 0 outside.
double sample(const Volume& v, const Eigen::Vector3d& voxel, Interpolation interp,
              std::size_t frame = 0);

/// Correlation ratio tolerates contrast differences; normalized correlation
/// (cost 1 - r) is sharper for same-contrast problems such as realignment.
enum class CostFunction { CorrelationRatio, NormalizedCorrelation };

struct RegistrationOptions {
  Dof dof = Dof::Rigid;
  CostFunction cost = CostFunction::CorrelationRatio;
  /// Prefiltered cubic B-spline instead of trilinear sampling of the moving image inside the cost;
  /// removes the pull of trilinear blur toward grid-aligned solutions.
  bool cubic_sampling = false;
  /// Pyramid sample spacings (mm), coarse to fine. Empty selects 8/4/2 for fixed
  /// voxels <= 1.5 mm, else 2b / 4b/3 / b for voxel size b.
  std::vector<double> level_spacing_mm;
  /// Gaussian smoothing of both images at each level.
  bool smooth = true;
  int bins = 64;
  double tolerance = 1e-4;
  int max_iterations = 200;
  double background_fraction = 0.02;
  /// Starting point; default aligns centers of mass.
  std::optional<AffineTransform> initial;
};

struct RegistrationResult {
  /// Maps moving world space into fixed world space.
  AffineTransform transform;
  double final_cost = 1.0;
  int pyramid_levels_used = 0;
  bool converged = false;
  /// Cost after each accepted step, finest level last.
  std::vector<double> cost_history;
};

class RegistrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Correlation-ratio cost (1 - eta^2) of `moving` mapped through `t` onto `fixed`.
double correlation_ratio_cost(const Volume& moving, const Volume& fixed, const AffineTransform& t,
                              int bins = 64, double background_fraction = 0.02);

RegistrationResult register_images(const Volume& moving, const Volume& fixed,
                                   const RegistrationOptions& options);
RegistrationResult register_images(const Volume& moving, const Volume& fixed, Dof dof);

struct TemplateAlignment {
  Volume aligned_1mm;
  Volume aligned_3mm;
  RegistrationResult registration;
};

/// One 12-DOF registration against the 1 mm template, resampled onto both grids.
TemplateAlignment register_t2_to_template(const Volume& t2, const Volume& template_1mm,
                                          const Volume& template_3mm);

RegistrationResult register_epi_to_template(const Volume& mean_epi, const Volume& template_3mm);

/// 4x4 row-major text matrix plus a JSON descriptor (`<path>.json`) with dof, pivot, cost.
void save_transform(const RegistrationResult& r, const std::filesystem::path& path);
AffineTransform load_transform(const std::filesystem::path& path);

}  // namespace neors
