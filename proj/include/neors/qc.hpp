// Static QC figures and the per-subject JSON summary.
#pragma once

#include "neors/volume.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace neors {

/// Voxel (u, v) of a mid-slice maps to the pixel block starting at
/// (x0 + u * scale, y0 + (height - 1 - v) * scale), `height` being the slice extent along v.
struct OverlayPanel {
  std::string plane;  ///< axial, coronal or sagittal
  int fixed_axis = 2;
  std::size_t slice = 0;
  int u_axis = 0, v_axis = 1;
  int x0 = 0, y0 = 0;
  int scale = 1;
};

/// In-slice boundary of a mask: voxels in the mask with a 4-neighbour (within the slice) that is
/// outside the mask or outside the grid. Returned as (u, v) pairs.
std::vector<std::pair<std::size_t, std::size_t>> slice_boundary(const Volume& mask, const OverlayPanel& panel);

/// Three orthogonal mid-slices of `base` (grayscale, 2-98 percentile window) with the mask
/// boundary in yellow. An empty mask draws a warning banner. The panel layout is stored as JSON
/// in the PNG text key "panels".
std::vector<OverlayPanel> render_contour_overlay(const Volume& base, const Volume& contour_mask,
                                                 const std::filesystem::path& out, const std::string& title = "");

/// Five labeled mid-axial panels A-E: T2 reference, AP raw, PA raw, AP corrected, PA corrected.
void render_distortion_panel(const Volume& t2, const Volume& ap_raw, const Volume& pa_raw, const Volume& ap_corr,
                             const Volume& pa_corr, const std::filesystem::path& out);

struct RunSummary {
  std::string name;
  double mean_fd_mm = 0.0;
  std::size_t frames = 0;
  std::size_t kept_frames = 0;
  bool accepted = true;
};

struct StageStatus {
  std::string stage;
  std::string status;  ///< ok, skipped, failed
  std::string detail;
};

struct SubjectReport {
  std::string subject;
  std::vector<StageStatus> stages;
  std::vector<RunSummary> runs;
  std::vector<std::string> warnings;
  std::vector<std::string> artifacts;

  nlohmann::json to_json() const;
  static SubjectReport from_json(const nlohmann::json& j);
};

/// Writes `<output_files>/summary.json`. Errors are swallowed; returns false if writing failed.
bool write_subject_report(const SubjectReport& report, const std::filesystem::path& output_files);

}  // namespace neors
