// BIDS dataset discovery, JSON sidecars and the pipeline configuration file.
#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace neors {

namespace fs = std::filesystem;

class BidsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FuncRun {
  fs::path bold;
  std::optional<fs::path> sidecar;
  /// Empty for sessionless layouts.
  std::string session;
  int run_index = 1;
  /// File name without the NIfTI extension, used to name outputs.
  std::string stem;
};

struct FmapPair {
  fs::path pe_forward;
  fs::path pe_reverse;
  std::optional<fs::path> forward_sidecar;
  std::optional<fs::path> reverse_sidecar;
};

struct SubjectLayout {
  /// Label without the "sub-" prefix.
  std::string subject_id;
  fs::path directory;
  fs::path anat_t2;
  std::vector<FuncRun> func_runs;
  std::optional<FmapPair> fmap_pairs;

  std::string name() const { return "sub-" + subject_id; }
};

struct ScanDiagnostic {
  std::string subject;
  std::string message;
};

struct DatasetScan {
  std::vector<SubjectLayout> subjects;
  /// Subjects excluded for missing requirements, in subject order.
  std::vector<ScanDiagnostic> diagnostics;
};

/// Throws BidsError when `root` is missing or contains no sub-* directories.
DatasetScan scan_dataset(const fs::path& root);

/// Phase-encoding token such as "j-": axis 0/1/2 for i/j/k, sign +1 or -1.
struct PhaseEncoding {
  int axis = 1;
  int sign = 1;

  std::string token() const;
  bool operator==(const PhaseEncoding&) const = default;
};

/// Throws std::invalid_argument on anything other than [ijk] with optional '-'.
PhaseEncoding parse_phase_encoding(const std::string& token);

struct SidecarMeta {
  std::optional<std::vector<double>> slice_timing;
  std::optional<PhaseEncoding> phase_encoding;
  std::optional<double> total_readout_time;
  std::optional<double> repetition_time;
};

/// Throws BidsError on unreadable or malformed JSON and on invalid recognized values.
SidecarMeta parse_sidecar(const fs::path& path);

enum class SliceOrder { BottomUp, TopDown, InterleavedBottomUp, InterleavedTopDown, FromSidecar };

std::string slice_order_token(SliceOrder o);
/// Accepts the tokens above or the integer codes 1..5.
SliceOrder parse_slice_order(const std::string& s);

struct PipelineConfig {
  /// Empty: <dataset>/derivatives/neors.
  fs::path working_dir;
  /// 0: taken from the sidecar or the NIfTI header.
  double tr_seconds = 0.0;
  int motion_order = 12;
  SliceOrder slice_order = SliceOrder::FromSidecar;
  double fwhm_mm = 6.0;
  double head_radius_mm = 35.0;
  double fd_max_mm = 0.25;
  double fd_average_max_mm = 0.25;
  std::pair<double, double> band_hz{0.01, 0.1};
  int n_cores = 1;
  bool enable_slice_timing = true;
  bool enable_fmap = false;
  bool enable_best_volumes = false;
  bool enable_run_exclusion = true;
  double best_section_seconds = 300.0;

  // Extensions: inputs the original tool ships with its installation.
  fs::path template_1mm;
  fs::path template_3mm;
  /// Directory of tissue probability maps on the 1 mm template grid, one `<class>.nii[.gz]` per class.
  fs::path priors;
  /// JSON class-to-mask mapping; empty uses the default three-class mapping.
  fs::path tissue_mapping;
  fs::path seeds;
  double bet_f = 0.5;
  double bet_g = 0.0;
  bool global_signal = true;
  int reference_frame = 0;

  /// Throws ConfigError on violated invariants.
  void validate() const;
  bool operator==(const PipelineConfig&) const = default;
};

/// Flat key=value text, one key per line, '#' starts a comment. Relative paths are
/// resolved against the config file's directory.
PipelineConfig load_config(const fs::path& path);
PipelineConfig parse_config(const std::string& text, const fs::path& base_dir = {});
std::string serialize_config(const PipelineConfig& c);

}  // namespace neors
