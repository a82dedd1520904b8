// Confound assembly, censored single-step regression with band-pass, smoothing and run merging.
#pragma once

#include "neors/motion.hpp"
#include "neors/volume.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace neors {

class DenoiseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named regressor columns, each one value per frame.
struct RegressorBlock {
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;

  std::size_t size() const { return columns.size(); }
  void append(const RegressorBlock& other);
};

struct TissueSignals {
  std::vector<double> wm_mean;
  std::vector<double> csf_mean;
  std::vector<double> gm_mean;
};

/// Per-frame means over each binary mask (grids must match the EPI).
TissueSignals extract_tissue_signals(const Volume& epi, const Volume& gm_mask, const Volume& wm_mask,
                                     const Volume& csf_mask);

/// 6: rx ry rz tx ty tz; 12 adds backward differences (first element 0); 24 adds squares of all 12.
RegressorBlock expand_motion(const MotionTrace& trace, int order);

struct BandSpec {
  double high_pass_hz = 0.01;
  double low_pass_hz = 0.1;
  double tr_seconds = 0.8;
  std::size_t n_frames = 0;

  double nyquist() const { return 0.5 / tr_seconds; }
  /// Spacing of the DFT grid, 1 / (n_frames * tr).
  double delta_f() const { return 1.0 / (static_cast<double>(n_frames) * tr_seconds); }
  /// A low-pass at or beyond Nyquist means no low-pass.
  bool has_low_pass() const { return low_pass_hz < nyquist(); }
  void validate() const;
};

/// Degrees-of-freedom accounting for a band-passed, censored regression.
struct DofReport {
  std::size_t n_frames = 0;
  std::size_t kept_frames = 0;
  double tr_seconds = 0.0;
  double t_max_seconds = 0.0;
  double delta_f_hz = 0.0;
  double f_max_hz = 0.0;
  /// DFT frequencies k > 0 inside the band.
  std::size_t in_band_frequencies = 0;
  std::size_t stop_columns = 0;
  std::size_t nuisance_columns = 0;

  /// kept - stop - nuisance (negative when over-determined).
  long residual_dof() const;
  std::string describe() const;
};

DofReport dof_report(const BandSpec& band, std::size_t kept_frames, std::size_t nuisance_columns);

/// Number of polynomial columns (constant + linear) in every design.
inline constexpr std::size_t kPolynomialColumns = 2;

/// Cosine/sine pairs at k / (n tr) for every k > 0 outside [high_pass, low_pass], sampled at the
/// original frame times (the sine at exactly Nyquist vanishes and is omitted). Throws DenoiseError
/// "insufficient degrees of freedom" when the basis plus the polynomial block leaves no
/// residual dof on `kept_frames` (defaults to all frames).
RegressorBlock fourier_stop_basis(const BandSpec& band, std::size_t kept_frames = 0);

/// Constant and linear (centered, unit step per frame) columns.
RegressorBlock polynomial_block(std::size_t n_frames);

struct ConfoundMatrix {
  RegressorBlock block;
  CensorMask censor;
  std::size_t n_frames() const { return censor.keep.size(); }
};

/// Column order: motion, wm_mean, csf_mean, [global_gm_mean], constant, linear, Fourier stop pairs.
ConfoundMatrix build_confounds(const RegressorBlock& motion, const TissueSignals& tissue, bool global_signal,
                               const BandSpec& band, const CensorMask& censor);

/// Least-squares residuals of every voxel against all confound columns, fitted on kept frames
/// only. Censored frames are written as exactly 0. Throws DenoiseError (with the dof report)
/// when the design leaves no residual degrees of freedom.
Volume project_confounds(const Volume& epi, const ConfoundMatrix& confounds);

/// Separable Gaussian, sigma = fwhm / (2 sqrt(2 ln 2)) converted per axis to voxels; fwhm 0 copies.
Volume smooth_gaussian(const Volume& epi, double fwhm_mm);

struct FrameSpan {
  std::size_t start = 0;
  std::size_t length = 0;
};

struct MergedRuns {
  Volume data;
  std::vector<FrameSpan> spans;
};

/// Temporal concatenation in the given order; grids must match.
MergedRuns merge_runs(const std::vector<Volume>& runs);

/// Tab-separated, header row of column names, one row per frame.
void write_confounds_tsv(const ConfoundMatrix& c, const std::filesystem::path& path);

}  // namespace neors
