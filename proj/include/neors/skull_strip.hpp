// Brain extraction on the template-aligned T2.
#pragma once

#include "neors/volume.hpp"

#include <filesystem>
#include <stdexcept>

namespace neors {

class SkullStripError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BrainMask {
  /// Binary, one 6-connected component, never touching the grid border.
  Volume mask;
  double f_threshold = 0.5;
  double g_gradient = 0.0;
};

/// Threshold at p2 + f (p98 - p2) of the intensity window, scaled by (1 + g z) where z runs
/// from -1 (inferior edge of the grid) to +1 (superior), then largest component, closing by a
/// 2-voxel ball and hole filling. Positive g enlarges the mask inferiorly.
BrainMask strip_skull(const Volume& t2_aligned, double f = 0.5, double g = 0.0);

/// Contour of the mask over the unstripped T2, three orthogonal mid-slices.
void render_strip_overlay(const Volume& t2, const BrainMask& mask, const std::filesystem::path& out);

}  // namespace neors
