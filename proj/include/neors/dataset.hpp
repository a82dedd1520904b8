// Synthetic BIDS datasets: subjects, templates, priors, seeds and a ready-to-run config.
#pragma once

#include "neors/bids.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace neors {

/// Layered ellipsoidal head in template world mm: scalp, skull, outer CSF, cortical GM, WM
/// with two ventricles. Fractions blend over `edge_mm`.
struct HeadModel {
  Eigen::Vector3d semi_axes{40.0, 48.0, 36.0};

  struct Fractions {
    double scalp = 0, skull = 0, csf = 0, gm = 0, wm = 0;
  };
  Fractions fractions(const Eigen::Vector3d& p, double edge_mm) const;
  /// Neonatal T2 contrast (WM brighter than GM).
  double t2(const Eigen::Vector3d& p) const;
  /// EPI contrast relative to a unit baseline.
  double epi(const Eigen::Vector3d& p) const;
  /// Point in the cortical ribbon along direction `u` (normalized radius 0.71).
  Eigen::Vector3d cortex_point(const Eigen::Vector3d& u) const;
};

struct PhantomDatasetSpec {
  std::filesystem::path output;
  int subjects = 2;
  int runs = 1;
  std::size_t frames = 240;
  /// Longer than the neonatal protocol's 0.8 s so that 240 frames leave enough in-band
  /// degrees of freedom after nuisance regression.
  double tr_seconds = 2.0;
  std::array<std::size_t, 3> epi_dims{32, 36, 28};
  double epi_voxel_mm = 3.0;
  std::array<std::size_t, 3> t2_dims{80, 92, 72};
  double t2_voxel_mm = 1.25;
  double noise_sigma = 4.0;
  double t2_noise_sigma = 10.0;
  double signal_amplitude = 0.03;
  double group_correlation = 0.6;
  /// Fractional amplitudes of whole-brain, CSF and WM fluctuations.
  double global_amplitude = 0.01;
  double csf_amplitude = 0.03;
  double wm_amplitude = 0.01;
  /// Per-frame random-walk step sizes of the injected head motion.
  double motion_step_mm = 0.02;
  double motion_step_rad = 0.0004;
  /// 1-based subject indices whose motion steps are multiplied by `high_motion_factor`.
  std::vector<int> high_motion_subjects;
  double high_motion_factor = 8.0;
  /// Bounds of each subject's head pose relative to the template.
  double pose_translation_mm = 4.0;
  double pose_rotation_rad = 0.05;
  bool fieldmaps = true;
  double field_peak_mm = 3.0;
  double readout_time = 0.05;
  std::uint64_t seed = 7;
  /// Config keys overriding the generated defaults (values as written in a config file).
  std::map<std::string, std::string> config;

  /// Relative `output` is resolved against `base_dir`. Unknown keys throw std::invalid_argument.
  static PhantomDatasetSpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static PhantomDatasetSpec load(const std::filesystem::path& path);
};

struct PhantomDatasetPaths {
  std::filesystem::path root;
  std::filesystem::path config;
  std::filesystem::path ground_truth;
};

/// Writes sub-XX/{anat,func,fmap}, resources/ (templates, priors, mapping, seeds), neopipe.cfg
/// and resources/ground_truth.json. Deterministic for a given spec.
PhantomDatasetPaths make_phantom_dataset(const PhantomDatasetSpec& spec);

}  // namespace neors
