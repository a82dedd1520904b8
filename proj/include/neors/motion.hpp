// Volume realignment, framewise displacement, censoring and run-level motion decisions.
#pragma once

#include "neors/registration.hpp"
#include "neors/volume.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace neors {

/// Per-frame rigid parameters relative to the reference frame.
struct MotionTrace {
  /// rx ry rz (rad) tx ty tz (mm) per frame.
  std::vector<std::array<double, 6>> params;
  std::vector<double> fd_mm;
  double radius_mm = 35.0;

  std::size_t frames() const { return params.size(); }
};

struct RealignOptions {
  std::size_t reference_frame = 0;
  double radius_mm = 35.0;
  Interpolation interpolation = Interpolation::Sinc;
};

struct RealignResult {
  Volume corrected;
  MotionTrace trace;
  /// Frame world -> reference world.
  std::vector<AffineTransform> transforms;
  /// Frames whose registration did not converge (passed through with their last estimate).
  std::vector<bool> flagged;
};

/// Rigidly registers every frame to the reference frame without pre-smoothing.
RealignResult realign(const Volume& epi, const RealignOptions& opt = {});

/// Motion parameters (rx ry rz tx ty tz) of a rigid transform.
std::array<double, 6> motion_params(const AffineTransform& t);

/// FD_i = sum|d trans| + radius * sum|d rot| with backward differences; FD_0 = 0.
std::vector<double> framewise_displacement(std::span<const std::array<double, 6>> params, double radius_mm);
std::vector<double> framewise_displacement(const MotionTrace& trace, double radius_mm);

enum class CensorReason { Kept, FirstFive, FdExceeded };

std::string censor_reason_name(CensorReason r);

struct CensorMask {
  std::vector<bool> keep;
  std::vector<CensorReason> reason;

  std::size_t frames() const { return keep.size(); }
  std::size_t kept_count() const;
  std::vector<std::size_t> excluded() const;
  std::vector<std::size_t> kept() const;
};

inline constexpr std::size_t kDiscardedLeadingFrames = 5;

/// Frames 0-4 and frames with FD >= fd_max are excluded.
CensorMask build_censor_mask(std::span<const double> fd, double fd_max_mm);

/// Restricts an existing mask to frames [start, start + length); frames outside are excluded.
CensorMask restrict_mask(const CensorMask& m, std::size_t start, std::size_t length);

struct FrameInterval {
  std::size_t start = 0;
  std::size_t length = 0;
  double mean_fd = 0.0;
  bool operator==(const FrameInterval&) const = default;
};

/// Window of ceil(section_seconds / tr) frames starting at or after frame 5 with the lowest
/// mean FD, earliest start on ties. Throws std::invalid_argument when the series is too short
/// or section_seconds < 300.
FrameInterval select_best_section(std::span<const double> fd, double tr_seconds, double section_seconds);

struct RunEvaluation {
  bool accepted = true;
  double mean_fd = 0.0;
};

/// Mean FD over frames 5..end (before censoring); rejected iff mean > fd_average_max.
RunEvaluation evaluate_run(std::span<const double> fd, double fd_average_max_mm);

/// One row per frame: rx ry rz tx ty tz.
void write_motion_params(const MotionTrace& trace, const std::filesystem::path& path);
MotionTrace read_motion_params(const std::filesystem::path& path, double radius_mm);

/// Zero-based excluded frame indices, one per line.
void write_censor_list(const CensorMask& m, const std::filesystem::path& path);

/// Three stacked panels (rotations, translations, FD with threshold line) as PNG.
void render_motion_plot(const MotionTrace& trace, double fd_threshold_mm, const std::filesystem::path& out,
                        const std::string& title = "");

}  // namespace neors
