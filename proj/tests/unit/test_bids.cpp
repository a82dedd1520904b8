#include "neors/bids.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

using namespace neors;
using neors::testing::TempDir;

namespace {

void touch(const fs::path& p, const std::string& content = "") {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << content;
}

void make_subject(const fs::path& root, const std::string& label, bool t2, int runs, bool fmaps) {
  const fs::path s = root / ("sub-" + label);
  fs::create_directories(s);
  if (t2) touch(s / "anat" / ("sub-" + label + "_T2w.nii.gz"));
  for (int r = runs; r >= 1; --r) {
    const std::string stem = "sub-" + label + "_task-rest_run-" + std::to_string(r) + "_bold";
    touch(s / "func" / (stem + ".nii.gz"));
    touch(s / "func" / (stem + ".json"), R"({"RepetitionTime":0.8})");
  }
  if (fmaps) {
    touch(s / "fmap" / ("sub-" + label + "_dir-AP_epi.nii.gz"));
    touch(s / "fmap" / ("sub-" + label + "_dir-PA_epi.nii.gz"));
    touch(s / "fmap" / ("sub-" + label + "_dir-PA_epi.json"), R"({"PhaseEncodingDirection":"j"})");
  }
}

}  // namespace

TEST(ScanDataset, SingleSubjectWithFmaps) {
  TempDir tmp;
  make_subject(tmp.path(), "01", true, 2, true);
  const auto scan = scan_dataset(tmp.path());
  ASSERT_EQ(scan.subjects.size(), 1u);
  const auto& s = scan.subjects[0];
  EXPECT_EQ(s.subject_id, "01");
  EXPECT_EQ(s.func_runs.size(), 2u);
  EXPECT_EQ(s.func_runs[0].run_index, 1);
  EXPECT_EQ(s.func_runs[1].run_index, 2);
  EXPECT_TRUE(s.func_runs[0].sidecar.has_value());
  ASSERT_TRUE(s.fmap_pairs.has_value());
  EXPECT_EQ(s.fmap_pairs->pe_forward.filename(), "sub-01_dir-AP_epi.nii.gz");
  EXPECT_FALSE(s.fmap_pairs->forward_sidecar.has_value());
  EXPECT_TRUE(s.fmap_pairs->reverse_sidecar.has_value());
  EXPECT_TRUE(scan.diagnostics.empty());
}

TEST(ScanDataset, MissingT2ReportedNotDropped) {
  TempDir tmp;
  make_subject(tmp.path(), "01", true, 1, false);
  make_subject(tmp.path(), "02", false, 1, false);
  make_subject(tmp.path(), "03", true, 0, false);
  const auto scan = scan_dataset(tmp.path());
  ASSERT_EQ(scan.subjects.size(), 1u);
  ASSERT_EQ(scan.diagnostics.size(), 2u);
  EXPECT_EQ(scan.diagnostics[0].subject, "sub-02");
  EXPECT_EQ(scan.diagnostics[0].message, "missing T2w");
  EXPECT_EQ(scan.diagnostics[1].subject, "sub-03");
  EXPECT_EQ(scan.diagnostics[1].message, "missing BOLD");
}

TEST(ScanDataset, TenSubjectsLexicographicAndStable) {
  TempDir tmp;
  std::vector<std::string> labels;
  for (int i = 0; i < 10; ++i) labels.push_back("s" + std::to_string(i * 7 % 10));
  for (const auto& l : labels) make_subject(tmp.path(), l, true, 1, false);
  const auto a = scan_dataset(tmp.path());
  ASSERT_EQ(a.subjects.size(), 10u);
  for (std::size_t i = 1; i < 10; ++i) EXPECT_LT(a.subjects[i - 1].subject_id, a.subjects[i].subject_id);
  const auto b = scan_dataset(tmp.path());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(a.subjects[i].func_runs[0].bold, b.subjects[i].func_runs[0].bold);
}

TEST(ScanDataset, SessionsFlattenedInOrder) {
  TempDir tmp;
  const fs::path s = tmp / "sub-01";
  touch(s / "ses-b" / "anat" / "sub-01_ses-b_T2w.nii");
  touch(s / "ses-b" / "func" / "sub-01_ses-b_task-rest_run-1_bold.nii");
  touch(s / "ses-a" / "func" / "sub-01_ses-a_task-rest_run-2_bold.nii");
  touch(s / "ses-a" / "func" / "sub-01_ses-a_task-rest_run-1_bold.nii");
  touch(tmp / "task-rest_bold.json", R"({"RepetitionTime":2})");
  const auto scan = scan_dataset(tmp.path());
  ASSERT_EQ(scan.subjects.size(), 1u);
  const auto& runs = scan.subjects[0].func_runs;
  ASSERT_EQ(runs.size(), 3u);
  EXPECT_EQ(runs[0].stem, "sub-01_ses-a_task-rest_run-1_bold");
  EXPECT_EQ(runs[1].stem, "sub-01_ses-a_task-rest_run-2_bold");
  EXPECT_EQ(runs[2].stem, "sub-01_ses-b_task-rest_run-1_bold");
  ASSERT_TRUE(runs[0].sidecar.has_value());
  EXPECT_EQ(runs[0].sidecar->filename(), "task-rest_bold.json");
}

TEST(ScanDataset, EmptyAndMissingRootThrow) {
  TempDir tmp;
  EXPECT_THROW(scan_dataset(tmp.path()), BidsError);
  EXPECT_THROW(scan_dataset(tmp / "nope"), BidsError);
}

TEST(Sidecar, RecognizedKeys) {
  TempDir tmp;
  touch(tmp / "a.json", R"({"RepetitionTime":0.8,"SliceTiming":[0,0.4],"Unknown":{"x":1}})");
  const auto a = parse_sidecar(tmp / "a.json");
  EXPECT_EQ(a.repetition_time, 0.8);
  ASSERT_TRUE(a.slice_timing);
  EXPECT_EQ(a.slice_timing->size(), 2u);
  EXPECT_FALSE(a.phase_encoding);

  touch(tmp / "b.json", R"({"PhaseEncodingDirection":"j-","TotalReadoutTime":0.05})");
  const auto b = parse_sidecar(tmp / "b.json");
  ASSERT_TRUE(b.phase_encoding);
  EXPECT_EQ(b.phase_encoding->axis, 1);
  EXPECT_EQ(b.phase_encoding->sign, -1);
  EXPECT_EQ(b.phase_encoding->token(), "j-");
  EXPECT_EQ(b.total_readout_time, 0.05);

  touch(tmp / "c.json", "{}");
  const auto c = parse_sidecar(tmp / "c.json");
  EXPECT_FALSE(c.repetition_time || c.slice_timing || c.phase_encoding || c.total_readout_time);

  touch(tmp / "d.json", "{\"RepetitionTime\": ");
  EXPECT_THROW(parse_sidecar(tmp / "d.json"), BidsError);
  touch(tmp / "e.json", R"({"TotalReadoutTime":-1})");
  EXPECT_THROW(parse_sidecar(tmp / "e.json"), BidsError);
}

TEST(Config, EmptyConfigGivesDefaults) {
  const auto c = parse_config("working_dir = /data/work\n");
  EXPECT_EQ(c.working_dir, fs::path("/data/work"));
  EXPECT_EQ(c.motion_order, 12);
  EXPECT_EQ(c.fwhm_mm, 6.0);
  EXPECT_EQ(c.head_radius_mm, 35.0);
  EXPECT_EQ(c.fd_max_mm, 0.25);
  EXPECT_EQ(c.fd_average_max_mm, 0.25);
  EXPECT_EQ(c.band_hz.first, 0.01);
  EXPECT_EQ(c.band_hz.second, 0.1);
  EXPECT_EQ(c.slice_order, SliceOrder::FromSidecar);
  EXPECT_TRUE(c.enable_slice_timing);
  EXPECT_FALSE(c.enable_fmap);
  EXPECT_FALSE(c.enable_best_volumes);
}

TEST(Config, ValuesAndErrors) {
  EXPECT_EQ(parse_config("motion = 24").motion_order, 24);
  EXPECT_EQ(parse_config("slice_order = 3").slice_order, SliceOrder::InterleavedBottomUp);
  EXPECT_EQ(parse_config("fd_max = 0.3").fd_average_max_mm, 0.3);
  EXPECT_EQ(parse_config("band = [0.01, 999]").band_hz.second, 999.0);
  EXPECT_THROW(parse_config("motion = 7"), ConfigError);
  EXPECT_THROW(parse_config("slice_order = sideways"), ConfigError);
  EXPECT_THROW(parse_config("fwhm = six"), ConfigError);
  EXPECT_THROW(parse_config("colour = red"), ConfigError);
  EXPECT_THROW(parse_config("best_volumes = 1\nbest_section_seconds = 200"), ConfigError);
  try {
    parse_config("band = 0.1, 0.01");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_STREQ(e.what(), "band edges inverted");
  }
}

TEST(Config, RelativePathsResolvedAgainstConfigDir) {
  TempDir tmp;
  touch(tmp / "cfg" / "neors.conf", "template_3mm = tpl/t3.nii.gz  # comment\nseeds=/abs/seeds.tsv\n");
  const auto c = load_config(tmp / "cfg" / "neors.conf");
  EXPECT_EQ(c.template_3mm, tmp / "cfg" / "tpl/t3.nii.gz");
  EXPECT_EQ(c.seeds, fs::path("/abs/seeds.tsv"));
}

TEST(Config, SerializeRoundTripProperty) {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    PipelineConfig c;
    c.working_dir = "/w/" + std::to_string(trial);
    c.tr_seconds = u(rng) * 3.0;
    c.motion_order = std::array{6, 12, 24}[trial % 3];
    c.slice_order = static_cast<SliceOrder>(trial % 5);
    c.fwhm_mm = u(rng) * 10.0;
    c.head_radius_mm = 1.0 + u(rng) * 60.0;
    c.fd_max_mm = 0.01 + u(rng);
    c.fd_average_max_mm = 0.01 + u(rng);
    c.band_hz = {0.001 + u(rng) * 0.05, 0.06 + u(rng)};
    c.n_cores = 1 + trial % 8;
    c.enable_slice_timing = trial & 1;
    c.enable_fmap = trial & 2;
    c.enable_best_volumes = trial & 4;
    c.enable_run_exclusion = trial & 8;
    c.best_section_seconds = 300.0 + u(rng) * 100.0;
    if (trial % 2) c.seeds = "/s/seeds.tsv";
    c.bet_f = u(rng);
    c.bet_g = u(rng) - 0.5;
    c.global_signal = trial & 16;
    c.reference_frame = trial % 4;
    EXPECT_EQ(parse_config(serialize_config(c)), c) << serialize_config(c);
  }
}
