// Atlas-prior Gaussian-mixture tissue segmentation and the derived regression masks.
#pragma once

#include "neors/volume.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace neors {

class SegmentationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MaskClass { Gm, Wm, Csf, Discard };

const char* mask_class_name(MaskClass c);
/// Accepts GM, WM, CSF, discard (case-insensitive).
MaskClass parse_mask_class(const std::string& s);

struct TissuePriors {
  std::vector<std::string> names;
  /// One probability volume per name, all on one grid.
  std::vector<Volume> maps;
  std::map<std::string, MaskClass> class_to_mask;

  /// Throws SegmentationError: grids differ, prior sum outside [0, 1 + 1e-6], unmapped class,
  /// fewer than 3 or more than 8 classes.
  void validate() const;
};

/// gm -> GM, wm -> WM, csf -> CSF.
std::map<std::string, MaskClass> default_mapping();
/// JSON object {"class name": "GM" | "WM" | "CSF" | "discard"}.
std::map<std::string, MaskClass> load_mapping(const std::filesystem::path& path);
void write_mapping(const std::map<std::string, MaskClass>& m, const std::filesystem::path& path);

/// One `<class>.nii[.gz]` per class in `dir`, classes ordered by name. `mapping` empty uses the
/// default mapping.
TissuePriors load_priors(const std::filesystem::path& dir, const std::filesystem::path& mapping = {});

struct Segmentation {
  std::vector<std::string> names;
  /// Posterior per class; 0 outside the brain.
  std::vector<Volume> posteriors;
  std::vector<double> means, variances;
  /// Log-likelihood after each iteration.
  std::vector<double> log_likelihood;
  std::vector<std::string> warnings;
  bool converged = false;
};

struct EmOptions {
  int max_iterations = 100;
  double relative_tolerance = 1e-6;
  /// Variance floor relative to the in-brain data variance.
  double variance_floor = 1e-4;
};

/// EM over voxels of the brain (nonzero T2 unless `brain` is given); the spatial priors act as
/// per-voxel mixing proportions.
Segmentation segment_em(const Volume& t2_stripped, const TissuePriors& priors,
                        const std::optional<Volume>& brain = std::nullopt, const EmOptions& opt = {});

struct TissueMasks {
  Volume gm_1mm, wm_1mm, csf_1mm;
  Volume gm_3mm, wm_3mm, csf_3mm;
};

/// Classes are summed per mapped mask and thresholded at > 0.5; WM is eroded once (6-connected)
/// at both resolutions. The coarse masks come from trilinear resampling of the summed
/// probabilities onto `grid_3mm`. Throws SegmentationError if WM erodes to nothing.
TissueMasks build_masks(const std::vector<std::string>& names, const std::vector<Volume>& probabilities,
                        const std::map<std::string, MaskClass>& mapping, const VolumeHeader& grid_3mm);

}  // namespace neors
