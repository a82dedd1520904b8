// Synthetic structural and functional data with known ground truth.
#pragma once

#include "neors/registration.hpp"
#include "neors/volume.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace neors {

/// Smooth-edged ellipsoid (tanh edge of the given width).
struct Ellipsoid {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d radii = Eigen::Vector3d::Constant(10.0);
  double intensity = 1.0;
  double edge_mm = 2.0;
};

/// Sum of ellipsoids evaluated in world mm; infinitely differentiable.
struct AnalyticPhantom {
  std::vector<Ellipsoid> parts;
  double operator()(const Eigen::Vector3d& world) const;
};

/// Asymmetric head-like phantom centered on `center`, sized for a neonatal head at scale 1.
AnalyticPhantom smooth_head(double scale = 1.0, Eigen::Vector3d center = Eigen::Vector3d::Zero(),
                            bool inverted_contrast = false);

/// Evaluates f(T(x)) at every voxel center x of `grid` (T omitted = identity).
Volume render(const AnalyticPhantom& f, const VolumeHeader& grid,
              const std::optional<AffineTransform>& t = std::nullopt);

// ---------------------------------------------------------------------------
// Structural phantom

enum class TissueLabel : int { Background = 0, Skull = 1, Csf = 2, Gm = 3, Wm = 4 };

struct Layer {
  TissueLabel label;
  /// Outer radius in mm (spherical, scaled per axis by `aspect`).
  double outer_radius_mm;
  double intensity;
};

struct StructuralPhantomSpec {
  std::array<std::size_t, 3> dims{80, 80, 80};
  std::array<double, 3> voxel_size{2.0, 2.0, 2.0};
  /// Innermost first.
  std::vector<Layer> layers{{TissueLabel::Wm, 35.0, 900.0},
                            {TissueLabel::Gm, 48.0, 600.0},
                            {TissueLabel::Csf, 55.0, 300.0},
                            {TissueLabel::Skull, 62.0, 200.0}};
  Eigen::Vector3d aspect = Eigen::Vector3d::Ones();
  double scale = 1.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 1;
};

struct StructuralPhantom {
  Volume image;
  /// Integer TissueLabel values.
  Volume labels;
};

/// Grid is centered on world origin.
StructuralPhantom make_structural_phantom(const StructuralPhantomSpec& spec);

// ---------------------------------------------------------------------------
// Functional phantom

struct PlantedRegion {
  std::string name;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius_mm = 6.0;
  /// Regions sharing a group id share a common signal component.
  int group = 0;
};

struct FieldSpec {
  double peak_mm = 0.0;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double width_mm = 20.0;
  /// Phase-encoding axis index.
  int pe_axis = 1;

  /// Displacement (mm) along the PE axis at world x, and its PE derivative.
  double displacement(const Eigen::Vector3d& x) const;
  double derivative(const Eigen::Vector3d& x) const;
};

struct FunctionalPhantomSpec {
  std::array<std::size_t, 3> dims{52, 46, 36};
  std::array<double, 3> voxel_size{2.0, 2.0, 2.0};
  std::size_t frames = 420;
  double tr_seconds = 0.8;
  double head_scale = 0.75;
  double baseline = 1000.0;
  /// Fractional BOLD modulation amplitude inside planted regions.
  double signal_amplitude = 0.02;
  /// Within-group shared-component correlation target.
  double group_correlation = 0.6;
  std::vector<PlantedRegion> regions;
  /// Per-frame rigid transforms (moving frame world -> reference world); empty = motionless.
  std::vector<AffineTransform> motion;
  /// Random motion when `motion` is empty and amplitudes are > 0.
  double motion_translation_mm = 0.0;
  double motion_rotation_rad = 0.0;
  FieldSpec field;
  double noise_sigma = 0.0;
  std::uint64_t seed = 1;
  /// EPI-contrast anatomy in reference world mm (scaled by `baseline`); unset uses the
  /// contrast-inverted smooth_head at `head_scale`.
  std::function<double(const Eigen::Vector3d&)> anatomy;
};

struct FunctionalGroundTruth {
  std::vector<Eigen::Matrix4d> transforms;
  /// Pivot used for parameterizing the transforms (center of mass of frame 0).
  Eigen::Vector3d pivot = Eigen::Vector3d::Zero();
  std::vector<std::string> region_names;
  /// Planted signal per region (unit variance before scaling).
  std::vector<std::vector<double>> signals;
  /// Pearson correlation of the stored signals, row-major n x n.
  std::vector<double> signal_correlations;
  /// Displacement field in mm on the phantom grid.
  Volume field_mm;
  int pe_axis = 1;
  /// Binary mask of every planted region (label = region index + 1).
  Volume region_labels;

  nlohmann::json to_json() const;
};

struct FunctionalPhantom {
  /// Frames acquired with forward phase encoding (+field).
  Volume forward;
  /// Same content acquired with reversed phase encoding (-field).
  Volume reverse;
  /// Undistorted, motionless-reference content (for oracle comparisons).
  Volume undistorted;
  FunctionalGroundTruth truth;
};

FunctionalPhantom make_functional_phantom(const FunctionalPhantomSpec& spec);

/// Image acquired through displacement field d along the PE axis: output(y) = I(x) / (1 + d'(x))
/// with y = x + sign * d(x). `image` is evaluated in world mm.
Volume distort(const std::function<double(const Eigen::Vector3d&)>& image, const FieldSpec& field,
               const VolumeHeader& grid, double sign);

/// Pearson correlation (test and ground-truth helper).
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace neors
