// Susceptibility distortion: field estimation from a reversed phase-encoding pair and unwarping.
#pragma once

#include "neors/bids.hpp"
#include "neors/volume.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace neors {

class DistortionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Displacement along the phase-encoding axis, in mm, for the forward acquisition.
/// The reverse acquisition is displaced by the negated field.
struct DisplacementField {
  Volume field_mm;
  int pe_axis = 1;
  double readout_time = 0.0;
  std::vector<std::string> warnings;
  /// Gauss-Newton iterations summed over levels.
  int iterations = 0;
};

struct FieldOptions {
  /// Decimation factors, coarse to fine; levels too small along the PE axis are skipped.
  std::vector<int> levels{8, 4, 2, 1};
  /// Regularization weight relative to the mean data-term curvature at each level's start.
  double lambda_scale = 0.1;
  int max_gauss_newton = 12;
  int max_cg = 60;
  double tolerance = 1e-5;
};

/// Frames of each input are averaged first. Throws DistortionError when grids differ or
/// the images share no content.
DisplacementField estimate_field(const Volume& pe_forward, const Volume& pe_reverse, int pe_axis,
                                 double readout_time, const FieldOptions& opt = {});

enum class Polarity { Forward, Reverse };

/// Forward frames become F(x + d)(1 + d'), reverse frames R(x - d)(1 - d'), with d in voxels
/// of the EPI grid. A field on another grid is resampled first.
Volume apply_field(const Volume& epi, const DisplacementField& field, Polarity polarity,
                   std::optional<int> epi_pe_axis = std::nullopt);

/// Rows "<unit PE vector> <readout time>" for the forward then reverse acquisition.
void write_acqparams(const SidecarMeta& forward, const SidecarMeta& reverse, const std::filesystem::path& out,
                     const std::string& forward_name = "forward sidecar",
                     const std::string& reverse_name = "reverse sidecar");
void write_acqparams(const std::filesystem::path& forward_sidecar, const std::filesystem::path& reverse_sidecar,
                     const std::filesystem::path& out);

}  // namespace neors
