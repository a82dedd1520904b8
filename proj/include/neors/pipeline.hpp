// Per-subject orchestration of the full workflow with subject-level parallelism and resumable stages.
#pragma once

#include "neors/bids.hpp"
#include "neors/qc.hpp"

#include <filesystem>
#include <functional>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

namespace neors {

enum class SubjectState { Ok, NoUsableRuns, Failed };

const char* subject_state_name(SubjectState s);

struct SubjectOutcome {
  std::string subject;
  SubjectState state = SubjectState::Ok;
  /// Failing stage and its error for Failed subjects.
  std::string message;
  SubjectReport report;
  /// Stages actually computed (not skipped as up to date).
  std::size_t stages_computed = 0;
};

struct PipelineReport {
  std::vector<SubjectOutcome> subjects;
  /// Subjects dropped by the dataset scan.
  std::vector<ScanDiagnostic> scan_diagnostics;

  bool any_failed() const;
  /// 0 when no subject failed, 1 otherwise.
  int exit_code() const;
};

/// Serialized line output shared by concurrent subject workers.
class Console {
 public:
  explicit Console(std::ostream* out) : out_(out) {}
  void line(const std::string& s);

 private:
  std::ostream* out_;
  std::mutex mu_;
};

/// Output layout under the working directory.
std::filesystem::path subject_dir(const PipelineConfig& c, const std::filesystem::path& dataset,
                                  const std::string& subject);
std::filesystem::path output_files_dir(const PipelineConfig& c, const std::filesystem::path& dataset,
                                       const std::string& subject);

/// Processes one subject end to end. Never throws for data errors; they end in a Failed outcome.
SubjectOutcome run_subject(const PipelineConfig& config, const std::filesystem::path& dataset,
                           const SubjectLayout& subject, Console& console);

/// Runs every scanned subject (or those named in `subjects`, "sub-" prefix optional) on
/// `n_cores` workers (0: config.n_cores). Throws ConfigError for missing template, priors or
/// seed inputs and BidsError for an unscannable dataset or an unknown subject name.
PipelineReport run_pipeline(const PipelineConfig& config, const std::filesystem::path& dataset,
                            const std::vector<std::string>& subjects = {}, int n_cores = 0,
                            std::ostream* console = nullptr);

}  // namespace neors
