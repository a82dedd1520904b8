// Seed-based correlation: seed-to-voxel maps and seed-to-seed matrices.
#pragma once

#include "neors/motion.hpp"
#include "neors/volume.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace neors {

class ConnectivityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Seed {
  std::string name;
  std::string network;
  /// World mm in template space.
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius_mm = 6.0;
};

struct SeedSet {
  std::vector<Seed> seeds;
  std::string space = "template";
};

/// Tab-separated with a header row `name network x y z radius`; lines starting with '#' are
/// comments. A `# space: <id>` comment sets the space.
SeedSet load_seeds(const std::filesystem::path& path);
void write_seeds(const SeedSet& s, const std::filesystem::path& path);

/// Flat indices of voxels whose centers lie within the seed radius.
std::vector<std::size_t> seed_voxels(const VolumeHeader& grid, const Seed& seed);

/// Per-frame mean over the seed sphere (all frames; censoring is applied by the correlations).
std::vector<double> seed_timeseries(const Volume& bold, const Seed& seed);

/// Pearson r over the given frames; 0 if either series is constant there.
double pearson_over(std::span<const double> a, std::span<const double> b, std::span<const std::size_t> frames);

struct SeedMap {
  Volume r;
  /// atanh(r), clamped to |r| <= 1 - 1e-15.
  Volume z;
  /// Voxels whose kept-frame series is constant (r set to 0).
  std::size_t constant_voxels = 0;
};

SeedMap seed_to_voxel_map(const Volume& bold, const Seed& seed, const CensorMask& censor);

struct CorrelationMatrix {
  std::vector<std::string> labels;
  /// Row-major n x n.
  std::vector<double> values;

  std::size_t size() const { return labels.size(); }
  double at(std::size_t i, std::size_t j) const { return values[i * labels.size() + j]; }
};

CorrelationMatrix seed_to_seed_matrix(const Volume& bold, const SeedSet& seeds, const CensorMask& censor);

/// Header row of labels, then one labeled row per seed.
void write_matrix_tsv(const CorrelationMatrix& m, const std::filesystem::path& path);

}  // namespace neors
