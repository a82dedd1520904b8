// neopipe: run the pipeline, generate phantom datasets, inspect subject QC.
#include "neors/dataset.hpp"
#include "neors/pipeline.hpp"
#include "neors/qc.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

constexpr int kInvocationError = 2;

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string tok; std::getline(in, tok, ',');)
    if (!tok.empty()) out.push_back(tok);
  return out;
}

int cmd_run(const fs::path& config_path, const fs::path& dataset, const std::string& subjects, int cores, bool quiet) {
  neors::PipelineConfig cfg;
  try {
    cfg = neors::load_config(config_path);
  } catch (const std::exception& e) {
    std::cerr << "neopipe: " << e.what() << "\n";
    return kInvocationError;
  }
  neors::PipelineReport report;
  try {
    report = neors::run_pipeline(cfg, dataset, split_commas(subjects), cores, quiet ? nullptr : &std::cout);
  } catch (const neors::ConfigError& e) {
    std::cerr << "neopipe: config: " << e.what() << "\n";
    return kInvocationError;
  } catch (const neors::BidsError& e) {
    std::cerr << "neopipe: dataset: " << e.what() << "\n";
    return kInvocationError;
  }
  std::cout << "\nsubject\tstatus\tdetail\n";
  for (const auto& s : report.subjects)
    std::cout << s.subject << "\t" << neors::subject_state_name(s.state) << "\t" << s.message << "\n";
  for (const auto& d : report.scan_diagnostics) std::cout << d.subject << "\texcluded\t" << d.message << "\n";
  return report.exit_code();
}

int cmd_phantom(const fs::path& spec_path) {
  try {
    const auto spec = neors::PhantomDatasetSpec::load(spec_path);
    const auto paths = neors::make_phantom_dataset(spec);
    std::cout << "dataset: " << paths.root.string() << "\nconfig: " << paths.config.string()
              << "\nground truth: " << paths.ground_truth.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "neopipe: phantom: " << e.what() << "\n";
    return kInvocationError;
  }
}

int cmd_qc(const fs::path& subject_dir) {
  fs::path summary = subject_dir / "Output_files" / "summary.json";
  if (!fs::exists(summary)) summary = subject_dir / "summary.json";
  std::ifstream f(summary);
  if (!f) {
    std::cerr << "neopipe: qc: no summary.json under " << subject_dir.string() << "\n";
    return kInvocationError;
  }
  neors::SubjectReport r;
  try {
    r = neors::SubjectReport::from_json(nlohmann::json::parse(f));
  } catch (const std::exception& e) {
    std::cerr << "neopipe: qc: " << summary.string() << ": " << e.what() << "\n";
    return kInvocationError;
  }
  bool failed = false;
  std::cout << r.subject << "\n\nstage\tstatus\tdetail\n";
  for (const auto& s : r.stages) {
    std::cout << s.stage << "\t" << s.status << "\t" << s.detail << "\n";
    failed = failed || s.status == "failed";
  }
  std::cout << "\nrun\tmean_fd_mm\tframes\tkept\tstatus\n";
  char buf[32];
  for (const auto& run : r.runs) {
    std::snprintf(buf, sizeof buf, "%.4f", run.mean_fd_mm);
    std::cout << run.name << "\t" << buf << "\t" << run.frames << "\t" << run.kept_frames << "\t"
              << (run.accepted ? "accepted" : "rejected") << "\n";
  }
  std::size_t missing = 0;
  const fs::path base = summary.parent_path();
  for (const auto& a : r.artifacts)
    if (!fs::exists(base / a)) {
      std::cout << "missing artifact: " << a << "\n";
      ++missing;
    }
  std::cout << "\nartifacts: " << r.artifacts.size() << " (" << missing << " missing)\n";
  for (const auto& w : r.warnings) std::cout << "warning: " << w << "\n";
  return failed || missing > 0 ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neonatal resting-state fMRI preprocessing and connectivity"};
  app.require_subcommand(1);

  fs::path config, dataset;
  std::string subjects;
  int cores = 0;
  bool quiet = false;
  auto* run = app.add_subcommand("run", "Process every subject of a BIDS dataset");
  run->add_option("--config", config, "Pipeline config file")->required()->check(CLI::ExistingFile);
  run->add_option("--dataset", dataset, "BIDS dataset root")->required();
  run->add_option("--subjects", subjects, "Comma-separated subject labels (default: all)");
  run->add_option("--cores", cores, "Subjects processed in parallel (default: config n_cores)")->check(CLI::PositiveNumber);
  run->add_flag("--quiet", quiet, "Only print the final status table");

  fs::path spec;
  auto* phantom = app.add_subcommand("phantom", "Synthetic datasets");
  phantom->require_subcommand(1);
  auto* make = phantom->add_subcommand("make", "Write a phantom BIDS dataset with templates, priors, seeds and config");
  make->add_option("--spec", spec, "Phantom dataset spec (JSON)")->required()->check(CLI::ExistingFile);

  fs::path subject_dir;
  auto* qc = app.add_subcommand("qc", "Summarize a processed subject");
  qc->add_option("subject-dir", subject_dir, "Subject directory under the working directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kInvocationError;
  }
  if (*run) return cmd_run(config, dataset, subjects, cores, quiet);
  if (*make) return cmd_phantom(spec);
  if (*qc) return cmd_qc(subject_dir);
  return kInvocationError;
}
