#include "neors/image_ops.hpp"
#include "neors/phantom.hpp"
#include "neors/qc.hpp"
#include "neors/raster.hpp"
#include "neors/segmentation.hpp"
#include "neors/skull_strip.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <set>

using namespace neors;

namespace {

StructuralPhantom sphere_in_skull(double scale) {
  StructuralPhantomSpec s;
  s.layers = {{TissueLabel::Wm, 60.0, 1000.0}, {TissueLabel::Skull, 68.0, 200.0}};
  s.dims = {80, 80, 80};
  s.noise_sigma = 20.0;
  s.scale = scale;
  s.seed = 5;
  return make_structural_phantom(s);
}

Volume label_mask(const Volume& labels, TissueLabel l) {
  Volume m(labels.header());
  for (std::size_t i = 0; i < m.data().size(); ++i) m.data()[i] = labels.data()[i] == double(l) ? 1.0 : 0.0;
  return m;
}

std::size_t count_in_half(const Volume& m, bool lower) {
  std::size_t n = 0;
  const auto& h = m.header();
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x)
        if (m.at(x, y, z) != 0.0 && (z < h.nz() / 2) == lower) ++n;
  return n;
}

// Three-tissue phantom with Gaussian intensities and soft priors favouring the true label.
struct TissueCase {
  Volume t2, labels;
  TissuePriors priors;
};

TissueCase tissue_case(double wm_mean, double gm_mean, double csf_mean, double true_prior) {
  StructuralPhantomSpec s;
  s.dims = {48, 48, 48};
  s.layers = {{TissueLabel::Wm, 20.0, 0}, {TissueLabel::Gm, 32.0, 0}, {TissueLabel::Csf, 40.0, 0}};
  auto p = make_structural_phantom(s);
  std::mt19937 rng(9);
  std::normal_distribution<double> g(0.0, 30.0);
  TissueCase c{p.image, p.labels, {}};
  c.priors.names = {"csf", "gm", "wm"};
  c.priors.class_to_mask = default_mapping();
  for (int k = 0; k < 3; ++k) c.priors.maps.emplace_back(p.image.header());
  const double other = 0.5 * (1.0 - true_prior);
  for (std::size_t i = 0; i < c.t2.data().size(); ++i) {
    const auto l = static_cast<TissueLabel>(static_cast<int>(p.labels.data()[i]));
    double mu = 0.0;
    int k = -1;
    if (l == TissueLabel::Csf) mu = csf_mean, k = 0;
    if (l == TissueLabel::Gm) mu = gm_mean, k = 1;
    if (l == TissueLabel::Wm) mu = wm_mean, k = 2;
    if (k < 0) {
      c.t2.data()[i] = 0.0;
      continue;
    }
    c.t2.data()[i] = mu + g(rng);
    for (int j = 0; j < 3; ++j) c.priors.maps[j].data()[i] = j == k ? true_prior : other;
  }
  return c;
}

double label_accuracy(const Segmentation& seg, const Volume& labels) {
  static const TissueLabel order[3] = {TissueLabel::Csf, TissueLabel::Gm, TissueLabel::Wm};
  std::size_t n = 0, ok = 0;
  for (std::size_t i = 0; i < labels.data().size(); ++i) {
    if (labels.data()[i] < 2.0) continue;
    std::size_t best = 0;
    for (std::size_t c = 1; c < 3; ++c)
      if (seg.posteriors[c].data()[i] > seg.posteriors[best].data()[i]) best = c;
    ++n;
    ok += order[best] == static_cast<TissueLabel>(static_cast<int>(labels.data()[i]));
  }
  return double(ok) / double(n);
}

Volume grid_volume(std::array<std::size_t, 3> dims, std::array<double, 3> vox) { return Volume(make_grid(dims, vox)); }

}  // namespace

TEST(SkullStrip, SphereInsideShell) {
  const auto p = sphere_in_skull(1.0);
  const auto m = strip_skull(p.image, 0.5);
  EXPECT_GE(dice(m.mask, label_mask(p.labels, TissueLabel::Wm)), 0.95);
  EXPECT_EQ(component_count(m.mask), 1u);
  EXPECT_EQ(m.mask.header().datatype, Datatype::UInt8);
}

TEST(SkullStrip, SmallerBrainWithDefaults) {
  const auto p = sphere_in_skull(0.8);
  const auto m = strip_skull(p.image);
  EXPECT_GE(dice(m.mask, label_mask(p.labels, TissueLabel::Wm)), 0.95);
}

TEST(SkullStrip, MonotoneInFAndDeterministic) {
  const auto p = sphere_in_skull(1.0);
  std::size_t prev = std::numeric_limits<std::size_t>::max();
  for (double f : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const std::size_t n = count_nonzero(strip_skull(p.image, f).mask);
    EXPECT_LE(n, prev) << f;
    prev = n;
  }
  EXPECT_EQ(dice(strip_skull(p.image, 0.4).mask, strip_skull(p.image, 0.4).mask), 1.0);
}

TEST(SkullStrip, GradientTiltsAlongZ) {
  const VolumeHeader h = make_grid({40, 40, 40}, {2, 2, 2}, Eigen::Vector3d(-39, -39, -39));
  Volume v(h);
  for (std::size_t z = 0; z < 40; ++z)
    for (std::size_t y = 0; y < 40; ++y)
      for (std::size_t x = 0; x < 40; ++x)
        v.at(x, y, z) = 1000.0 * std::exp(-h.voxel_to_world(x, y, z).squaredNorm() / (2.0 * 18.0 * 18.0));
  const auto flat = strip_skull(v, 0.5, 0.0).mask;
  const auto tilted = strip_skull(v, 0.5, 0.3).mask;
  EXPECT_GT(count_in_half(tilted, true), count_in_half(flat, true));
  EXPECT_LT(count_in_half(tilted, false), count_in_half(flat, false));
}

TEST(SkullStrip, MaskStaysInsideBorder) {
  const auto m = strip_skull(sphere_in_skull(1.25).image).mask;
  const auto& h = m.header();
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y) {
      EXPECT_EQ(m.at(0, y, z), 0.0);
      EXPECT_EQ(m.at(h.nx() - 1, y, z), 0.0);
    }
}

TEST(SkullStrip, Errors) {
  Volume zero = grid_volume({10, 10, 10}, {1, 1, 1});
  EXPECT_THROW(strip_skull(zero), SkullStripError);
  Volume face = zero;
  for (std::size_t z = 0; z < 10; ++z)
    for (std::size_t y = 0; y < 10; ++y) face.at(0, y, z) = 100.0;
  try {
    strip_skull(face, 0.5);
    FAIL();
  } catch (const SkullStripError& e) {
    EXPECT_NE(std::string(e.what()).find("lower f"), std::string::npos);
  }
  EXPECT_THROW(strip_skull(sphere_in_skull(1.0).image, 1.0), std::invalid_argument);
}

TEST(ContourOverlay, BoundaryPixelsMatchOracle) {
  neors::testing::TempDir dir;
  const auto p = sphere_in_skull(1.0);
  const auto m = strip_skull(p.image);
  render_strip_overlay(p.image, m, dir / "strip.png");
  const auto png = read_png(dir / "strip.png");
  const auto layout = nlohmann::json::parse(png.text.at("panels"));
  ASSERT_EQ(layout.size(), 3u);
  std::size_t total = 0;
  for (const auto& jp : layout) {
    OverlayPanel panel;
    panel.fixed_axis = jp["fixed_axis"];
    panel.slice = jp["slice"];
    panel.u_axis = jp["u_axis"];
    panel.v_axis = jp["v_axis"];
    panel.x0 = jp["x0"];
    panel.y0 = jp["y0"];
    panel.scale = jp["scale"];
    const auto nu = m.mask.header().dims[panel.u_axis], nv = m.mask.header().dims[panel.v_axis];
    std::set<std::pair<std::size_t, std::size_t>> expect;
    for (auto b : slice_boundary(m.mask, panel)) expect.insert(b);
    // independent boundary oracle: mask voxel with an in-slice 4-neighbour outside
    std::size_t oracle = 0;
    for (std::size_t b = 0; b < nv; ++b)
      for (std::size_t a = 0; a < nu; ++a) {
        auto at = [&](long aa, long bb) {
          if (aa < 0 || bb < 0 || aa >= long(nu) || bb >= long(nv)) return false;
          std::size_t idx[3];
          idx[panel.fixed_axis] = panel.slice;
          idx[panel.u_axis] = std::size_t(aa);
          idx[panel.v_axis] = std::size_t(bb);
          return m.mask.at(idx[0], idx[1], idx[2]) != 0.0;
        };
        const bool boundary = at(a, b) && (!at(a - 1, b) || !at(a + 1, b) || !at(a, b - 1) || !at(a, b + 1));
        oracle += boundary;
        const Rgb px = png.image.get(panel.x0 + int(a) * panel.scale + panel.scale / 2,
                                     panel.y0 + int(nv - 1 - b) * panel.scale + panel.scale / 2);
        EXPECT_EQ(px == kYellow, boundary) << a << "," << b;
      }
    EXPECT_EQ(oracle, expect.size());
    total += oracle;
  }
  EXPECT_GT(total, 0u);
  EXPECT_EQ(png.text.at("contour_voxels"), std::to_string(total));
}

TEST(ContourOverlay, EmptyMaskWarnsAndBadPathThrows) {
  neors::testing::TempDir dir;
  const auto p = sphere_in_skull(1.0);
  render_contour_overlay(p.image, Volume(p.image.header()), dir / "empty.png", "CSF");
  const auto png = read_png(dir / "empty.png");
  EXPECT_EQ(png.text.at("warning"), "empty mask");
  EXPECT_GT(std::filesystem::file_size(dir / "empty.png"), 0u);
  EXPECT_THROW(render_contour_overlay(p.image, p.labels, dir / "missing" / "x.png"), IoError);
}

TEST(Segmentation, RecoversThreeClasses) {
  const auto c = tissue_case(900, 600, 300, 0.6);
  const auto seg = segment_em(c.t2, c.priors);
  EXPECT_GE(label_accuracy(seg, c.labels), 0.99);
  for (std::size_t i = 1; i < seg.log_likelihood.size(); ++i)
    EXPECT_GE(seg.log_likelihood[i], seg.log_likelihood[i - 1] - 1e-9 * std::abs(seg.log_likelihood[i - 1]));
  for (std::size_t i = 0; i < c.t2.data().size(); ++i) {
    if (c.t2.data()[i] == 0.0) continue;
    double s = 0.0;
    for (const auto& p : seg.posteriors) s += p.data()[i];
    ASSERT_NEAR(s, 1.0, 1e-6);  // float32 storage
  }
  EXPECT_TRUE(seg.converged);
}

TEST(Segmentation, ContrastInversionRecoveredThroughPriors) {
  const auto c = tissue_case(600, 900, 300, 0.6);
  EXPECT_GE(label_accuracy(segment_em(c.t2, c.priors), c.labels), 0.95);
}

TEST(Segmentation, UniformIntensityReturnsPriors) {
  auto c = tissue_case(900, 600, 300, 0.6);
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (std::size_t i = 0; i < c.t2.data().size(); ++i) {
    if (c.t2.data()[i] == 0.0) continue;
    c.t2.data()[i] = 500.0;
    double a = u(rng), b = u(rng), d = u(rng), s = a + b + d;
    c.priors.maps[0].data()[i] = a / s;
    c.priors.maps[1].data()[i] = b / s;
    c.priors.maps[2].data()[i] = d / s;
  }
  const auto seg = segment_em(c.t2, c.priors);
  for (std::size_t i = 0; i < c.t2.data().size(); ++i)
    if (c.t2.data()[i] != 0.0)
      for (int k = 0; k < 3; ++k) ASSERT_NEAR(seg.posteriors[k].data()[i], c.priors.maps[k].data()[i], 1e-6);
}

TEST(Segmentation, CollapsedClassWarns) {
  auto c = tissue_case(900, 600, 300, 0.6);
  c.priors.names.push_back("zz_empty");
  c.priors.maps.emplace_back(c.t2.header());
  c.priors.class_to_mask["zz_empty"] = MaskClass::Discard;
  const auto seg = segment_em(c.t2, c.priors);
  ASSERT_FALSE(seg.warnings.empty());
  EXPECT_NE(seg.warnings[0].find("zz_empty"), std::string::npos);
}

TEST(Segmentation, PriorValidation) {
  auto c = tissue_case(900, 600, 300, 0.6);
  c.priors.maps[0].data()[0] = 0.9;
  c.priors.maps[1].data()[0] = 0.9;
  EXPECT_THROW(c.priors.validate(), SegmentationError);
  auto d = tissue_case(900, 600, 300, 0.6);
  d.priors.class_to_mask.erase("wm");
  EXPECT_THROW(d.priors.validate(), SegmentationError);
}

TEST(Segmentation, PriorsAndMappingFromDisk) {
  neors::testing::TempDir dir;
  const auto c = tissue_case(900, 600, 300, 0.6);
  std::filesystem::create_directories(dir / "priors");
  for (int k = 0; k < 3; ++k) write_volume(c.priors.maps[k], dir.path() / "priors" / (c.priors.names[k] + ".nii.gz"));
  auto mapping = default_mapping();
  write_mapping(mapping, dir / "mapping.json");
  EXPECT_EQ(load_mapping(dir / "mapping.json"), mapping);
  const auto p = load_priors(dir / "priors", dir / "mapping.json");
  EXPECT_EQ(p.names, c.priors.names);
  EXPECT_THROW(parse_mask_class("bone"), SegmentationError);
}

TEST(BuildMasks, StrictThresholdAndDisjoint) {
  const VolumeHeader fine = make_grid({21, 21, 21}, {1, 1, 1});
  std::vector<Volume> probs(3, Volume(fine));
  // probs: gm, wm, csf
  for (std::size_t z = 5; z < 16; ++z)
    for (std::size_t y = 5; y < 16; ++y)
      for (std::size_t x = 5; x < 16; ++x) probs[1].at(x, y, z) = 1.0;
  probs[0].at(1, 1, 1) = 0.51;
  probs[0].at(1, 3, 1) = 0.50;
  probs[2].at(18, 18, 18) = 0.8;
  const VolumeHeader coarse = make_grid({7, 7, 7}, {3, 3, 3}, Eigen::Vector3d(1, 1, 1));
  const auto m = build_masks({"gm", "wm", "csf"}, probs, default_mapping(), coarse);
  EXPECT_EQ(m.gm_1mm.at(1, 1, 1), 1.0);
  EXPECT_EQ(m.gm_1mm.at(1, 3, 1), 0.0);
  EXPECT_EQ(m.csf_1mm.at(18, 18, 18), 1.0);
  EXPECT_EQ(count_nonzero(m.wm_1mm), 9u * 9u * 9u);
  for (const auto* pair : {&m.gm_1mm, &m.csf_1mm})
    for (std::size_t i = 0; i < pair->data().size(); ++i) EXPECT_FALSE(pair->data()[i] != 0 && m.wm_1mm.data()[i] != 0);
  EXPECT_EQ(m.wm_3mm.header().nx(), 7u);
  EXPECT_GT(count_nonzero(m.wm_3mm), 0u);
}

TEST(BuildMasks, CoarseMasksComeFromResampledProbabilities) {
  // a 1 mm checkerboard of 0.6 WM / 0.4 GM sums to WM everywhere at 3 mm
  const VolumeHeader fine = make_grid({30, 30, 30}, {1, 1, 1});
  std::vector<Volume> probs(2, Volume(fine));
  for (std::size_t i = 0; i < probs[0].data().size(); ++i) {
    probs[0].data()[i] = 0.4;
    probs[1].data()[i] = 0.6;
  }
  const VolumeHeader coarse = make_grid({10, 10, 10}, {3, 3, 3}, Eigen::Vector3d(1, 1, 1));
  const auto m = build_masks({"gm", "wm"}, probs, {{"gm", MaskClass::Gm}, {"wm", MaskClass::Wm}}, coarse);
  EXPECT_EQ(m.wm_3mm.at(5, 5, 5), 1.0);
  EXPECT_EQ(count_nonzero(m.gm_3mm), 0u);
  EXPECT_EQ(count_nonzero(m.wm_3mm), 8u * 8u * 8u);
}

TEST(BuildMasks, ErosionGeometry) {
  const VolumeHeader fine = make_grid({30, 30, 30}, {1, 1, 1});
  const VolumeHeader coarse = make_grid({10, 10, 10}, {3, 3, 3}, Eigen::Vector3d(1, 1, 1));
  // a 5-voxel slab plus a block large enough to survive erosion at 3 mm
  std::vector<Volume> slab(3, Volume(fine));
  for (std::size_t z = 0; z < 30; ++z)
    for (std::size_t y = 0; y < 30; ++y)
      for (std::size_t x = 0; x < 30; ++x)
        if ((x >= 3 && x < 8) || (x >= 16 && x < 29 && y >= 10 && y < 29 && z >= 10 && z < 29)) slab[1].at(x, y, z) = 1.0;
  const auto m = build_masks({"gm", "wm", "csf"}, slab, default_mapping(), coarse);
  std::size_t width = 0;
  for (std::size_t x = 0; x < 14; ++x) width += m.wm_1mm.at(x, 5, 5) != 0.0;
  EXPECT_EQ(width, 3u);
  for (std::size_t i = 0; i < m.wm_1mm.data().size(); ++i)
    if (m.wm_1mm.data()[i] != 0.0) ASSERT_EQ(slab[1].data()[i], 1.0);

  const VolumeHeader small = make_grid({21, 21, 21}, {1, 1, 1});
  std::vector<Volume> sheet(3, Volume(small));
  for (std::size_t z = 0; z < 21; ++z)
    for (std::size_t y = 0; y < 21; ++y) sheet[1].at(10, y, z) = 1.0;
  EXPECT_THROW(build_masks({"gm", "wm", "csf"}, sheet, default_mapping(), coarse), SegmentationError);
}

TEST(DistortionPanel, FiveLabeledPanels) {
  neors::testing::TempDir dir;
  const auto p = sphere_in_skull(1.0);
  Volume epi(make_grid({30, 30, 20}, {3, 3, 3}), 1.0);
  epi.at(15, 15, 10) = 5.0;
  render_distortion_panel(p.image, epi, epi, epi, epi, dir / "fig.png");
  const auto png = read_png(dir / "fig.png");
  EXPECT_EQ(png.text.at("panels"), "5");
  EXPECT_EQ(png.text.at("labels"), "A,B,C,D,E");
  EXPECT_GT(png.image.width(), 5 * 180);
  EXPECT_THROW(render_distortion_panel(p.image, epi, epi, epi, epi, dir / "no" / "fig.png"), IoError);
}

TEST(SubjectReport, JsonRoundTripAndRejectedRun) {
  neors::testing::TempDir dir;
  SubjectReport r;
  r.subject = "sub-01";
  r.stages = {{"registration", "ok", ""}, {"denoise", "ok", ""}};
  r.runs = {{"run-1", 0.12, 420, 410, true}, {"run-2", 0.31, 420, 300, false}};
  r.warnings = {"a warning"};
  ASSERT_TRUE(write_subject_report(r, dir / "Output_files"));
  std::ifstream f(dir / "Output_files" / "summary.json");
  const auto j = nlohmann::json::parse(f);
  EXPECT_EQ(j["runs"][1]["status"], "rejected");
  EXPECT_DOUBLE_EQ(j["runs"][1]["mean_fd_mm"].template get<double>(), 0.31);
  const auto back = SubjectReport::from_json(j);
  EXPECT_EQ(back.to_json(), r.to_json());
  for (const auto& s : back.stages) EXPECT_EQ(s.status, "ok");
}
