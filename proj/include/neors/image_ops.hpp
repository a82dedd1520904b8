// Voxelwise helpers shared by the structural and functional stages.
#pragma once

#include "neors/volume.hpp"

#include <span>
#include <vector>

namespace neors {

/// Linear-interpolated percentile (p in [0, 100]) of the values.
double percentile(std::span<const double> values, double p);

/// Normalized, truncated (radius ceil(4 sigma)) sampled Gaussian kernel; sigma in voxels.
std::vector<double> gaussian_kernel(double sigma_voxels);

/// Separable 3D Gaussian applied to every frame. Zero padding outside the grid.
Volume gaussian_smooth(const Volume& v, const std::array<double, 3>& sigma_voxels);

/// Binary masks are volumes holding 0/1.
Volume binary_threshold(const Volume& v, double above);
std::size_t count_nonzero(const Volume& v);

/// One 6-connected erosion step; voxels outside the grid count as background.
Volume erode6(const Volume& mask);
Volume dilate6(const Volume& mask);

/// Dilation / erosion by a Euclidean ball of the given radius in voxels.
Volume dilate_ball(const Volume& mask, double radius);
Volume erode_ball(const Volume& mask, double radius);

/// Keeps the largest 6-connected foreground component (ties: lowest first voxel index).
Volume largest_component(const Volume& mask);
std::size_t component_count(const Volume& mask);

/// Fills background regions not 6-connected to the grid border.
Volume fill_holes(const Volume& mask);

/// Intensity-weighted center of mass in world mm (negative values ignored).
Eigen::Vector3d center_of_mass(const Volume& v);

double dice(const Volume& a, const Volume& b);

/// Mean across frames.
Volume temporal_mean(const Volume& v);

}  // namespace neors
