// Acceptance suite: one PASS/FAIL line per criterion. Arguments select criteria by number.
#include "neors/bids.hpp"
#include "neors/connectivity.hpp"
#include "neors/dataset.hpp"
#include "neors/denoise.hpp"
#include "neors/distortion.hpp"
#include "neors/image_ops.hpp"
#include "neors/motion.hpp"
#include "neors/phantom.hpp"
#include "neors/pipeline.hpp"
#include "neors/registration.hpp"
#include "neors/segmentation.hpp"
#include "neors/volume.hpp"
#include "test_support.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

using namespace neors;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

constexpr double kTwoPi = 2.0 * std::numbers::pi;

using Params = std::vector<std::array<double, 6>>;

// Straight Pearson correlation, independent of the library's helpers.
double oracle_r(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

Params truth_params(const FunctionalGroundTruth& t, const Eigen::Vector3d& pivot) {
  Params p;
  for (const auto& m : t.transforms) p.push_back(motion_params(AffineTransform::from_matrix(m, Dof::Rigid, pivot)));
  return p;
}

// 1 ------------------------------------------------------------------------

Verdict fd_formula() {
  const auto t0 = Clock::now();
  std::mt19937 rng(101);
  std::normal_distribution<double> g;
  double worst = 0.0, worst_linear = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Params p(20 + rng() % 200);
    for (auto& row : p) {
      for (int k = 0; k < 3; ++k) row[k] = 0.02 * g(rng);
      for (int k = 3; k < 6; ++k) row[k] = 0.8 * g(rng);
    }
    const auto fd = framewise_displacement(p, 35.0);
    const auto fd0 = framewise_displacement(p, 0.0);
    const auto fd70 = framewise_displacement(p, 70.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      double trans = 0.0, rot = 0.0;
      if (i > 0)
        for (int k = 0; k < 3; ++k) {
          rot += std::abs(p[i][k] - p[i - 1][k]);
          trans += std::abs(p[i][k + 3] - p[i - 1][k + 3]);
        }
      worst = std::max(worst, std::abs(fd[i] - (trans + 35.0 * rot)));
      worst_linear = std::max(worst_linear, std::abs((fd70[i] - fd0[i]) - 2.0 * (fd[i] - fd0[i])));
      worst_linear = std::max(worst_linear, std::abs(fd0[i] - trans));
    }
  }
  const double secs = since(t0);
  return {worst <= 1e-10 && worst_linear <= 1e-10 && secs < 5.0,
          fmt("max |FD - oracle| %.2e mm, radius linearity residual %.2e mm, %.2f s", worst, worst_linear, secs)};
}

// 2 ------------------------------------------------------------------------

Verdict censoring() {
  const std::vector<double> fd{0.0, 0.3, 0.0, 0.0, 0.0, 0.249, 0.25, 0.2500000001, 0.24999999, 0.26, 0.0, 1.0, 0.249};
  const std::vector<bool> expected{false, false, false, false, false, true, false, false, true, false, true, false, true};
  const CensorMask m = build_censor_mask(fd, 0.25);
  bool ok = m.keep == expected;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const CensorReason want = i < 5 ? CensorReason::FirstFive : expected[i] ? CensorReason::Kept : CensorReason::FdExceeded;
    ok = ok && m.reason[i] == want;
  }
  std::mt19937 rng(202);
  std::uniform_int_distribution<int> pick(0, 4);
  const double near[] = {0.25, std::nextafter(0.25, 0.0), std::nextafter(0.25, 1.0), 0.249, 0.1};
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> t(30);
    for (auto& x : t) x = near[pick(rng)];
    const auto c = build_censor_mask(t, 0.25);
    for (std::size_t i = 0; i < t.size(); ++i) mismatches += c.keep[i] != (i >= 5 && t[i] < 0.25);
  }
  return {ok && mismatches == 0, fmt("constructed trace %s, %zu mismatches on 200 boundary traces",
                                     ok ? "exact" : "WRONG", mismatches)};
}

// 3 ------------------------------------------------------------------------

Verdict run_exclusion() {
  std::string detail;
  bool ok = true;
  for (double d : {0.26, 0.24}) {
    FunctionalPhantomSpec s;
    s.dims = {32, 36, 28};
    s.voxel_size = {3, 3, 3};
    s.frames = 25;
    s.noise_sigma = 1.0;
    for (std::size_t f = 0; f < s.frames; ++f)
      s.motion.push_back(AffineTransform::rigid({f % 2 ? d : 0.0, 0.0, 0.0}, Eigen::Vector3d::Zero()));
    const auto p = make_functional_phantom(s);
    const auto injected = evaluate_run(framewise_displacement(truth_params(p.truth, p.truth.pivot), 35.0), 0.25);
    const auto realigned = realign(p.forward);
    const auto measured = evaluate_run(realigned.trace.fd_mm, 0.25);
    const bool want = d < 0.25;
    ok = ok && std::abs(injected.mean_fd - d) < 1e-9 && injected.accepted == want && measured.accepted == want;
    detail += fmt("%sinjected %.2f: mean FD %.4f %s, realigned mean FD %.4f %s", detail.empty() ? "" : "; ", d,
                  injected.mean_fd, injected.accepted ? "accepted" : "rejected", measured.mean_fd,
                  measured.accepted ? "accepted" : "rejected");
  }
  return {ok, detail};
}

// 4 ------------------------------------------------------------------------

Verdict registration() {
  const auto t0 = Clock::now();
  const VolumeHeader grid = make_grid({52, 46, 36}, {2, 2, 2}, {-51, -45, -35});
  const AnalyticPhantom head = smooth_head(0.75);
  const Volume fixed = render(head, grid);
  const Eigen::Vector3d pivot = center_of_mass(fixed);
  std::mt19937 rng(404);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto direction = [&] {
    Eigen::Vector3d v(g(rng), g(rng), g(rng));
    return Eigen::Vector3d(v.normalized());
  };
  int recovered = 0;
  double worst_t = 0.0, worst_r = 0.0;
  for (int c = 0; c < 20; ++c) {
    // the first case sits on the bounds
    const double tm = c == 0 ? 8.0 : 8.0 * u(rng), rm = c == 0 ? 0.1 : 0.1 * u(rng);
    const Eigen::Vector3d t = tm * direction(), r = rm * direction();
    const Volume moving = render(head, grid, AffineTransform::rigid(t, r, pivot));
    const auto est = register_images(moving, fixed, Dof::Rigid).transform.with_pivot(pivot);
    const double et = (est.params().translation() - t).norm();
    const double er = (est.params().rotation() - r).cwiseAbs().maxCoeff();
    worst_t = std::max(worst_t, et);
    worst_r = std::max(worst_r, er);
    recovered += et <= 0.5 && er <= 0.01;
  }
  AffineParams sp;
  sp.v[6] = sp.v[7] = sp.v[8] = 1.0 / 1.10;
  const Volume enlarged = render(head, grid, AffineTransform(sp, Dof::Affine, pivot));
  const auto scales = register_images(enlarged, fixed, Dof::Affine).transform.params().scales();
  double worst_s = 0.0;
  for (int k = 0; k < 3; ++k) worst_s = std::max(worst_s, std::abs(1.0 / scales[k] - 1.10));
  const double secs = since(t0);
  return {recovered == 20 && worst_s <= 0.02 && secs < 120.0,
          fmt("%d/20 rigid (worst %.3f mm, %.4f rad), scale 1.10 recovered within %.4f, %.1f s", recovered, worst_t,
              worst_r, worst_s, secs)};
}

// 5 ------------------------------------------------------------------------

Verdict realignment() {
  FunctionalPhantomSpec s;
  s.frames = 40;
  s.motion_translation_mm = 2.0;
  s.motion_rotation_rad = 0.05;
  s.noise_sigma = 1.0;
  s.seed = 505;
  const auto p = make_functional_phantom(s);
  const auto r = realign(p.forward);
  const Params truth = truth_params(p.truth, r.transforms[0].pivot());
  double et = 0.0, er = 0.0, efd = 0.0;
  for (std::size_t f = 0; f < s.frames; ++f)
    for (int k = 0; k < 3; ++k) {
      er = std::max(er, std::abs(r.trace.params[f][k] - truth[f][k]));
      et = std::max(et, std::abs(r.trace.params[f][k + 3] - truth[f][k + 3]));
    }
  const auto fd_truth = framewise_displacement(truth, 35.0);
  for (std::size_t f = 0; f < s.frames; ++f) efd = std::max(efd, std::abs(r.trace.fd_mm[f] - fd_truth[f]));
  return {et <= 0.1 && er <= 0.002 && efd <= 0.05,
          fmt("worst error %.4f mm, %.5f rad; worst FD error %.4f mm over %zu frames", et, er, efd, s.frames)};
}

// 6 ------------------------------------------------------------------------

double rms_in(const Volume& a, const Volume& b, const std::vector<bool>& mask) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      const double d = a.data()[i] - b.data()[i];
      s += d * d;
      ++n;
    }
  return std::sqrt(s / static_cast<double>(n));
}

Verdict distortion() {
  FunctionalPhantomSpec s;
  s.frames = 1;
  s.field.peak_mm = 4.0;
  s.field.width_mm = 18.0;
  s.field.pe_axis = 1;
  s.field.center = Eigen::Vector3d(4.0, 6.0, -2.0);
  const auto p = make_functional_phantom(s);
  const auto t0 = Clock::now();
  const auto field = estimate_field(p.forward, p.reverse, 1, 0.05);
  const double secs = since(t0);
  const double robust_max = percentile(p.undistorted.data(), 98.0);
  std::vector<bool> mask(p.undistorted.data().size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = p.undistorted.data()[i] > 0.1 * robust_max;
  const double field_rms = rms_in(field.field_mm, p.truth.field_mm, mask);
  const double before = rms_in(p.forward, p.reverse, mask);
  const double after =
      rms_in(apply_field(p.forward, field, Polarity::Forward), apply_field(p.reverse, field, Polarity::Reverse), mask);
  return {field_rms < 0.5 && after <= 0.2 * before && secs < 60.0,
          fmt("field RMS error %.3f mm, AP/PA residual %.1f -> %.1f (%.1f%%), estimation %.1f s", field_rms, before,
              after, 100.0 * after / before, secs)};
}

// 7 ------------------------------------------------------------------------

Verdict regression() {
  const std::size_t n = 420;
  const BandSpec band{0.01, 0.1, 0.8, n};
  std::mt19937 rng(707);
  std::normal_distribution<double> g;
  MotionTrace trace;
  std::array<double, 6> pos{};
  for (std::size_t t = 0; t < n; ++t) {
    for (int k = 0; k < 6; ++k) pos[k] += (k < 3 ? 0.0003 : 0.015) * g(rng);
    trace.params.push_back(pos);
  }
  std::vector<double> fd = framewise_displacement(trace.params, 35.0);
  for (std::size_t t : {60, 61, 150, 151, 152, 300}) fd[t] = 0.4;
  const CensorMask censor = build_censor_mask(fd, 0.25);
  TissueSignals ts;
  double a = 0, b = 0, c = 0;
  for (std::size_t t = 0; t < n; ++t) {
    a = 0.8 * a + g(rng), b = 0.6 * b + g(rng), c = 0.9 * c + g(rng);
    ts.wm_mean.push_back(500 + a);
    ts.csf_mean.push_back(300 + b);
    ts.gm_mean.push_back(400 + c);
  }
  const ConfoundMatrix cm = build_confounds(expand_motion(trace, 12), ts, true, band, censor);
  const auto& cols = cm.block.columns;

  VolumeHeader h = make_grid({4, 4, 2}, {3, 3, 3});
  h.dims[3] = n;
  h.tr_seconds = 0.8;
  Volume v(h);
  const std::size_t nv = h.voxels_per_frame();
  for (std::size_t i = 0; i < nv; ++i)
    for (std::size_t t = 0; t < n; ++t) v.data()[t * nv + i] = 100.0 + 5.0 * g(rng);
  // voxels 0 and 1 lie exactly in the confound span
  for (std::size_t t = 0; t < n; ++t) {
    v.data()[t * nv] = 3.0 * cols[0][t] - 2.0 * cols[4][t] + 7.0;
    v.data()[t * nv + 1] = 0.5 * cols[9][t] + 2.0 * cols.back()[t] - 4.0 * cols[cols.size() / 2][t];
  }
  const Volume res = project_confounds(v, cm);
  const auto kept = censor.kept();

  double worst_r = 0.0, worst_mean = 0.0, worst_exact = 0.0;
  bool censored_zero = true;
  for (std::size_t i = 0; i < nv; ++i) {
    const auto y = res.series(i);
    for (auto t : censor.excluded()) censored_zero = censored_zero && y[t] == 0.0;
    if (i < 2) {
      const auto x = v.series(i);
      double scale = 0.0;
      for (double q : x) scale = std::max(scale, std::abs(q));
      for (double q : y) worst_exact = std::max(worst_exact, std::abs(q) / scale);
      continue;
    }
    std::vector<double> yk;
    double ym = 0.0, yscale = 0.0;
    for (auto t : kept) yk.push_back(y[t]), ym += y[t], yscale = std::max(yscale, std::abs(y[t]));
    worst_mean = std::max(worst_mean, std::abs(ym / double(kept.size())) / yscale);
    for (const auto& col : cols) {
      std::vector<double> ck;
      for (auto t : kept) ck.push_back(col[t]);
      if (std::all_of(ck.begin(), ck.end(), [&](double q) { return q == ck[0]; })) continue;
      worst_r = std::max(worst_r, std::abs(oracle_r(yk, ck)));
    }
  }
  return {worst_r < 1e-8 && worst_mean < 1e-8 && censored_zero && worst_exact < 1e-8,
          fmt("%zu columns, %zu/%zu frames kept: max |r| %.1e, censored frames %s, exact-confound residual %.1e",
              cols.size(), kept.size(), n, worst_r, censored_zero ? "zero" : "NONZERO", worst_exact)};
}

// 8 ------------------------------------------------------------------------

// Least-squares amplitude of a sinusoid at f (Hz) over all frames.
double amplitude_at(const std::vector<double>& y, double f, double tr) {
  double cc = 0, ss = 0, cs = 0, yc = 0, ys = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const double co = std::cos(kTwoPi * f * t * tr), si = std::sin(kTwoPi * f * t * tr);
    cc += co * co, ss += si * si, cs += co * si, yc += y[t] * co, ys += y[t] * si;
  }
  const double det = cc * ss - cs * cs;
  const double ac = (yc * ss - ys * cs) / det, as = (ys * cc - yc * cs) / det;
  return std::hypot(ac, as);
}

Verdict band_pass() {
  const std::size_t n = 420;
  const double tr = 0.8;
  const BandSpec band{0.01, 0.1, tr, n};
  ConfoundMatrix cm;
  cm.censor = build_censor_mask(std::vector<double>(n, 0.0), 0.25);
  cm.censor.keep.assign(n, true);
  cm.censor.reason.assign(n, CensorReason::Kept);
  cm.block = polynomial_block(n);
  cm.block.append(fourier_stop_basis(band));

  VolumeHeader h = make_grid({2, 1, 1}, {3, 3, 3});
  h.dims[3] = n;
  h.tr_seconds = tr;
  Volume v(h);
  // the drift and the oscillation sit on the DFT grid nearest 0.005 and 0.3 Hz
  const double f_drift = 2.0 / (n * tr), f_fast = 101.0 / (n * tr);
  for (std::size_t t = 0; t < n; ++t) {
    v.data()[2 * t] = std::sin(kTwoPi * 0.05 * t * tr);
    v.data()[2 * t + 1] = std::cos(kTwoPi * f_drift * t * tr + 0.4) + std::sin(kTwoPi * f_fast * t * tr + 1.1);
  }
  const Volume res = project_confounds(v, cm);
  const double kept_amp = amplitude_at(res.series(0), 0.05, tr);
  double removed = 0.0;
  for (double x : res.series(1)) removed = std::max(removed, std::abs(x));
  const double drift_amp = amplitude_at(res.series(1), f_drift, tr), fast_amp = amplitude_at(res.series(1), f_fast, tr);

  const DofReport rep = dof_report(band, n, 0);
  std::string failure;
  try {
    fourier_stop_basis(band, 300);
  } catch (const DenoiseError& e) {
    failure = e.what();
  }
  const bool message_ok = rep.f_max_hz == 0.625 && std::abs(rep.delta_f_hz * 336.0 - 1.0) < 1e-12 &&
                          failure.find("t_max 336 s") != std::string::npos &&
                          failure.find("delta_f = 1/t_max = 0.00297619 Hz") != std::string::npos &&
                          failure.find("f_max = 1/(2 tr) = 0.625 Hz") != std::string::npos;
  return {kept_amp >= 0.95 && removed < 1e-9 && drift_amp < 1e-9 && fast_amp < 1e-9 && message_ok,
          fmt("0.05 Hz retains %.4f; %.4f/%.4f Hz residual amplitude %.1e/%.1e (max %.1e); dof message %s", kept_amp,
              f_drift, f_fast, drift_amp, fast_amp, removed, message_ok ? "ok" : ("WRONG: " + failure).c_str())};
}

// 9 ------------------------------------------------------------------------

// 6-connected erosion with out-of-grid neighbours counted as background.
std::vector<bool> oracle_erode(const std::vector<bool>& m, std::array<std::size_t, 3> d) {
  std::vector<bool> out(m.size(), false);
  auto idx = [&](long x, long y, long z) { return (static_cast<std::size_t>(z) * d[1] + y) * d[0] + x; };
  for (long z = 0; z < long(d[2]); ++z)
    for (long y = 0; y < long(d[1]); ++y)
      for (long x = 0; x < long(d[0]); ++x) {
        if (!m[idx(x, y, z)]) continue;
        bool keep = true;
        const long nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
        for (const auto& q : nb) {
          const bool inside = q[0] >= 0 && q[1] >= 0 && q[2] >= 0 && q[0] < long(d[0]) && q[1] < long(d[1]) &&
                              q[2] < long(d[2]);
          keep = keep && inside && m[idx(q[0], q[1], q[2])];
        }
        out[idx(x, y, z)] = keep;
      }
  return out;
}

Verdict masks() {
  const std::array<std::size_t, 3> d{30, 30, 30};
  const VolumeHeader fine = make_grid(d, {1, 1, 1});
  const VolumeHeader coarse = make_grid({10, 10, 10}, {3, 3, 3}, Eigen::Vector3d(1, 1, 1));
  bool ok = true;
  std::string detail;

  // slab of 5 voxels plus a block that survives erosion at 3 mm; hand oracle for the eroded shape
  std::vector<Volume> slab(3, Volume(fine));
  for (std::size_t z = 0; z < 30; ++z)
    for (std::size_t y = 0; y < 30; ++y)
      for (std::size_t x = 0; x < 30; ++x)
        if ((x >= 3 && x < 8) || (x >= 16 && x < 29 && y >= 10 && y < 29 && z >= 10 && z < 29)) slab[1].at(x, y, z) = 1.0;
  slab[0].at(12, 1, 1) = 0.51;
  slab[0].at(12, 3, 1) = 0.50;
  slab[2].at(12, 5, 1) = 0.51;
  slab[2].at(12, 7, 1) = 0.50;
  const auto m = build_masks({"gm", "wm", "csf"}, slab, default_mapping(), coarse);
  std::size_t wrong = 0;
  for (std::size_t z = 0; z < 30; ++z)
    for (std::size_t y = 0; y < 30; ++y)
      for (std::size_t x = 0; x < 30; ++x) {
        const bool in_slab = x >= 4 && x < 7 && y >= 1 && y < 29 && z >= 1 && z < 29;
        const bool in_block = x >= 17 && x < 28 && y >= 11 && y < 28 && z >= 11 && z < 28;
        wrong += (m.wm_1mm.at(x, y, z) != 0.0) != (in_slab || in_block);
      }
  const bool threshold_ok = m.gm_1mm.at(12, 1, 1) == 1.0 && m.gm_1mm.at(12, 3, 1) == 0.0 &&
                            m.csf_1mm.at(12, 5, 1) == 1.0 && m.csf_1mm.at(12, 7, 1) == 0.0;
  ok = ok && wrong == 0 && threshold_ok;
  detail = fmt("0.51 in / 0.50 out %s; slab erosion %zu voxels off the hand oracle", threshold_ok ? "ok" : "WRONG", wrong);

  // noisy layered probabilities: 1 mm masks against an independent threshold-and-erode oracle
  std::mt19937 rng(909);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Volume> probs(3, Volume(fine));
  for (std::size_t z = 0; z < 30; ++z)
    for (std::size_t y = 0; y < 30; ++y)
      for (std::size_t x = 0; x < 30; ++x) {
        const double r = std::sqrt(std::pow(x - 14.5, 2) + std::pow(y - 14.5, 2) + std::pow(z - 14.5, 2));
        double w[3] = {r >= 8 && r < 11 ? 1.0 : 0.0, r < 8 ? 1.0 : 0.0, r >= 11 && r < 13 ? 1.0 : 0.0};
        double sum = 0.0;
        for (auto& q : w) q += 0.6 * u(rng), sum += q;
        const double total = r < 13 ? 1.0 : 0.3;
        for (int k = 0; k < 3; ++k) probs[k].at(x, y, z) = total * w[k] / sum;
      }
  const auto n = build_masks({"gm", "wm", "csf"}, probs, default_mapping(), coarse);
  std::vector<bool> wm_thr(fine.voxels_per_frame());
  for (std::size_t i = 0; i < wm_thr.size(); ++i) wm_thr[i] = probs[1].data()[i] > 0.5;
  const auto wm_oracle = oracle_erode(wm_thr, d);
  std::size_t off = 0, overlaps = 0;
  for (std::size_t i = 0; i < wm_thr.size(); ++i) {
    off += (n.wm_1mm.data()[i] != 0.0) != wm_oracle[i];
    off += (n.gm_1mm.data()[i] != 0.0) != (probs[0].data()[i] > 0.5);
    off += (n.csf_1mm.data()[i] != 0.0) != (probs[2].data()[i] > 0.5);
  }
  auto count_overlap = [&](const Volume& a, const Volume& b, const Volume& c) {
    for (std::size_t i = 0; i < a.data().size(); ++i)
      overlaps += (a.data()[i] != 0.0) + (b.data()[i] != 0.0) + (c.data()[i] != 0.0) > 1;
  };
  count_overlap(n.gm_1mm, n.wm_1mm, n.csf_1mm);
  count_overlap(n.gm_3mm, n.wm_3mm, n.csf_3mm);
  count_overlap(m.gm_1mm, m.wm_1mm, m.csf_1mm);
  count_overlap(m.gm_3mm, m.wm_3mm, m.csf_3mm);
  ok = ok && off == 0 && overlaps == 0 && count_nonzero(n.wm_3mm) > 0;
  detail += fmt("; noisy priors %zu voxels off the oracle; %zu overlapping voxels", off, overlaps);
  return {ok, detail};
}

// 10 -----------------------------------------------------------------------

struct TissueCase {
  Volume t2, labels;
  TissuePriors priors;
};

// Spherical WM/GM/CSF layers with Gaussian intensities; priors put `true_prior` on the true class.
TissueCase tissue_case(double wm_mean, double gm_mean, double csf_mean, double true_prior) {
  StructuralPhantomSpec s;
  s.dims = {48, 48, 48};
  s.layers = {{TissueLabel::Wm, 20.0, 0}, {TissueLabel::Gm, 32.0, 0}, {TissueLabel::Csf, 40.0, 0}};
  auto p = make_structural_phantom(s);
  std::mt19937 rng(1010);
  std::normal_distribution<double> g(0.0, 60.0);
  TissueCase c{p.image, p.labels, {}};
  c.priors.names = {"csf", "gm", "wm"};
  c.priors.class_to_mask = default_mapping();
  for (int k = 0; k < 3; ++k) c.priors.maps.emplace_back(p.image.header());
  const double other = 0.5 * (1.0 - true_prior);
  for (std::size_t i = 0; i < c.t2.data().size(); ++i) {
    const auto l = static_cast<TissueLabel>(static_cast<int>(p.labels.data()[i]));
    const int k = l == TissueLabel::Csf ? 0 : l == TissueLabel::Gm ? 1 : l == TissueLabel::Wm ? 2 : -1;
    if (k < 0) {
      c.t2.data()[i] = 0.0;
      continue;
    }
    c.t2.data()[i] = (k == 0 ? csf_mean : k == 1 ? gm_mean : wm_mean) + g(rng);
    for (int j = 0; j < 3; ++j) c.priors.maps[j].data()[i] = j == k ? true_prior : other;
  }
  return c;
}

double accuracy(const Segmentation& seg, const Volume& labels) {
  const TissueLabel order[3] = {TissueLabel::Csf, TissueLabel::Gm, TissueLabel::Wm};
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

bool monotone(const std::vector<double>& ll) {
  for (std::size_t i = 1; i < ll.size(); ++i)
    if (ll[i] < ll[i - 1] - 1e-9 * std::abs(ll[i - 1])) return false;
  return !ll.empty();
}

Verdict segmentation() {
  const auto normal = tissue_case(900, 600, 300, 0.6);
  const auto swapped = tissue_case(600, 900, 300, 0.6);
  const auto a = segment_em(normal.t2, normal.priors);
  const auto b = segment_em(swapped.t2, swapped.priors);
  const double acc_a = accuracy(a, normal.labels), acc_b = accuracy(b, swapped.labels);
  const bool mono = monotone(a.log_likelihood) && monotone(b.log_likelihood);
  return {acc_a >= 0.99 && acc_b >= 0.95 && mono,
          fmt("accuracy %.4f, swapped contrast %.4f; log-likelihood %s over %zu/%zu iterations", acc_a, acc_b,
              mono ? "monotone" : "NOT monotone", a.log_likelihood.size(), b.log_likelihood.size())};
}

// 11 -----------------------------------------------------------------------

// Width at half maximum of a sampled profile, linear interpolation between samples.
double half_max_width(const std::vector<double>& y, double step) {
  const std::size_t c = static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin());
  const double half = 0.5 * y[c];
  std::size_t r = c, l = c;
  while (r + 1 < y.size() && y[r + 1] > half) ++r;
  while (l > 0 && y[l - 1] > half) --l;
  const double xr = r + (y[r] - half) / (y[r] - y[r + 1]);
  const double xl = l - (y[l] - half) / (y[l] - y[l - 1]);
  return (xr - xl) * step;
}

Verdict smoothing() {
  const double fwhm = parse_config("").fwhm_mm;
  // 3 mm functional grid: second moment of the impulse response along each axis
  Volume v(make_grid({31, 31, 31}, {3, 3, 3}));
  v.at(15, 15, 15) = 1.0;
  const Volume out = smooth_gaussian(v, fwhm);
  double worst = 0.0;
  std::string widths;
  for (int axis = 0; axis < 3; ++axis) {
    double s = 0.0, m2 = 0.0;
    for (std::size_t k = 0; k < 31; ++k) {
      const double w = axis == 0 ? out.at(k, 15, 15) : axis == 1 ? out.at(15, k, 15) : out.at(15, 15, k);
      const double dmm = (double(k) - 15.0) * 3.0;
      s += w, m2 += w * dmm * dmm;
    }
    const double width = 2.0 * std::sqrt(2.0 * std::log(2.0)) * std::sqrt(m2 / s);
    worst = std::max(worst, std::abs(width - 6.0));
    widths += fmt("%s%.3f", widths.empty() ? "" : "/", width);
  }
  // 1 mm grid: direct half-maximum crossing
  Volume fine(make_grid({41, 41, 41}, {1, 1, 1}));
  fine.at(20, 20, 20) = 1.0;
  const Volume fo = smooth_gaussian(fine, fwhm);
  std::vector<double> prof;
  for (std::size_t x = 0; x < 41; ++x) prof.push_back(fo.at(x, 20, 20));
  const double direct = half_max_width(prof, 1.0);
  worst = std::max(worst, std::abs(direct - 6.0));
  return {fwhm == 6.0 && worst <= 0.3,
          fmt("default %.1f mm; 3 mm grid moments %s mm, 1 mm grid half-maximum %.3f mm", fwhm, widths.c_str(), direct)};
}

// 12 -----------------------------------------------------------------------

Seed seed_at(const std::string& name, const Eigen::Vector3d& c, double radius) {
  Seed s;
  s.name = name;
  s.network = "test";
  s.center = c;
  s.radius_mm = radius;
  return s;
}

Verdict connectivity() {
  const std::vector<Eigen::Vector3d> centers{{-10, 8, 4}, {10, 8, 4}, {-8, -12, 0}, {8, -12, 0}};
  auto phantom = [&](bool planted) {
    FunctionalPhantomSpec s;
    s.dims = {32, 36, 28};
    s.frames = 400;
    s.noise_sigma = 3.0;
    // the null phantom carries noise only
    s.signal_amplitude = planted ? 0.03 : 0.0;
    s.seed = planted ? 1212 : 1213;
    for (std::size_t i = 0; i < centers.size(); ++i)
      s.regions.push_back({"r" + std::to_string(i), centers[i], 6.0, i < 2 ? 0 : int(i)});
    return make_functional_phantom(s);
  };
  SeedSet set;
  for (std::size_t i = 0; i < centers.size(); ++i) set.seeds.push_back(seed_at("r" + std::to_string(i), centers[i], 4.0));
  const CensorMask all = build_censor_mask(std::vector<double>(400, 0.0), 0.25);
  CensorMask keep_all = all;
  keep_all.keep.assign(400, true);
  keep_all.reason.assign(400, CensorReason::Kept);

  const auto p = phantom(true);
  const auto m = seed_to_seed_matrix(p.forward, set, keep_all);
  const double oracle = oracle_r(p.truth.signals[0], p.truth.signals[1]);
  const double err = std::abs(m.at(0, 1) - oracle);

  const auto q = phantom(false);
  const auto nm = seed_to_seed_matrix(q.forward, set, all);
  bool exact = true;
  double worst_null = 0.0;
  for (const auto* mat : {&m, &nm})
    for (std::size_t i = 0; i < mat->size(); ++i)
      for (std::size_t j = 0; j < mat->size(); ++j) {
        exact = exact && (i == j ? mat->at(i, j) == 1.0 : mat->at(i, j) == mat->at(j, i));
        if (mat == &nm && i != j) worst_null = std::max(worst_null, std::abs(mat->at(i, j)));
      }
  return {err <= 0.05 && exact && worst_null <= 0.15,
          fmt("planted r %.4f vs stored-series %.4f (|diff| %.4f); symmetry and unit diagonal %s; null max |r| %.4f",
              m.at(0, 1), oracle, err, exact ? "exact" : "BROKEN", worst_null)};
}

// 13 -----------------------------------------------------------------------

FrameInterval exhaustive(const std::vector<double>& fd, std::size_t length) {
  FrameInterval best{0, length, std::numeric_limits<double>::infinity()};
  for (std::size_t s = 5; s + length <= fd.size(); ++s) {
    double sum = 0.0;
    for (std::size_t k = 0; k < length; ++k) sum += fd[s + k];
    if (sum / double(length) < best.mean_fd) best = {s, length, sum / double(length)};
  }
  return best;
}

Verdict best_section() {
  const double tr = 0.8, section = 300.0;
  const std::size_t length = 375;
  std::mt19937 rng(1313);
  std::uniform_real_distribution<double> u(0.0, 0.5);
  std::uniform_int_distribution<int> q(0, 8);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> fd(380 + rng() % 300);
    // half the traces are dyadic steps, which makes equal window means common
    for (auto& x : fd) x = trial % 2 ? u(rng) : q(rng) / 64.0;
    mismatches += !(select_best_section(fd, tr, section) == exhaustive(fd, length));
  }
  bool ties = true;
  for (double c : {0.0, 0.1, 0.3}) ties = ties && select_best_section(std::vector<double>(500, c), tr, section).start == 5;
  std::vector<double> periodic(600);
  for (std::size_t i = 0; i < periodic.size(); ++i) periodic[i] = i % 4 == 0 ? 0.5 : 0.125;
  ties = ties && select_best_section(periodic, tr, section) == exhaustive(periodic, length);
  return {mismatches == 0 && ties, fmt("%zu/100 traces differ from exhaustive search; earliest start on ties %s",
                                       mismatches, ties ? "ok" : "WRONG")};
}

// 14 -----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<fs::path> tree(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

Verdict end_to_end() {
  neors::testing::TempDir dir;
  PhantomDatasetSpec spec;
  spec.output = dir / "ds";
  spec.subjects = 2;
  auto t0 = Clock::now();
  const auto paths = make_phantom_dataset(spec);
  const double gen = since(t0);
  PipelineConfig cfg = load_config(paths.config);

  cfg.working_dir = dir / "sequential";
  t0 = Clock::now();
  const auto seq = run_pipeline(cfg, paths.root, {}, 1);
  const double t_seq = since(t0);
  cfg.working_dir = dir / "parallel";
  t0 = Clock::now();
  const auto par = run_pipeline(cfg, paths.root, {}, 2);
  const double t_par = since(t0);

  bool all_ok = seq.exit_code() == 0 && par.exit_code() == 0;
  for (const auto* r : {&seq, &par})
    for (const auto& s : r->subjects) all_ok = all_ok && s.state == SubjectState::Ok;
  std::size_t files = 0, differing = 0;
  for (const auto& s : seq.subjects) {
    cfg.working_dir = dir / "sequential";
    const fs::path sa = output_files_dir(cfg, paths.root, s.subject);
    cfg.working_dir = dir / "parallel";
    const fs::path sb = output_files_dir(cfg, paths.root, s.subject);
    const auto ta = tree(sa), tb = tree(sb);
    if (ta != tb) ++differing;
    for (const auto& f : ta) {
      ++files;
      differing += slurp(sa / f) != slurp(sb / f);
    }
  }
  const double ratio = t_par / t_seq;
  const unsigned hw = std::thread::hardware_concurrency();
  return {all_ok && differing == 0 && ratio <= 0.75 && gen + t_seq < 600.0,
          fmt("subjects %s; %zu output files, %zu differ; generation %.0f s, sequential %.0f s, 2 workers %.0f s "
              "(ratio %.2f, %u hardware threads)",
              all_ok ? "ok" : "NOT ok", files, differing, gen, t_seq, t_par, ratio, hw)};
}

// 15 -----------------------------------------------------------------------

Volume random_volume(Datatype dt, std::mt19937& rng) {
  VolumeHeader h = make_grid({5, 4, 3}, {1.5, 2.0, 2.5}, {-10.0, 4.0, 7.25});
  h.dims[3] = 2;
  h.tr_seconds = 0.8f;
  h.datatype = dt;
  Volume v(h);
  std::uniform_real_distribution<double> u(-1000.0, 1000.0);
  for (auto& x : v.data()) switch (dt) {
      case Datatype::UInt8: x = static_cast<double>(rng() % 256); break;
      case Datatype::Int16: x = static_cast<double>(static_cast<int>(rng() % 65536) - 32768); break;
      case Datatype::Int32: x = static_cast<double>(static_cast<std::int32_t>(rng())); break;
      case Datatype::Float32: x = static_cast<float>(u(rng)); break;
      case Datatype::Float64: x = u(rng); break;
    }
  return v;
}

Verdict format_fidelity() {
  neors::testing::TempDir dir;
  std::mt19937 rng(1515);
  std::size_t cases = 0, failures = 0;
  for (Datatype dt : {Datatype::UInt8, Datatype::Int16, Datatype::Int32, Datatype::Float32, Datatype::Float64})
    for (const char* suffix : {".nii", ".nii.gz"}) {
      const Volume v = random_volume(dt, rng);
      const fs::path p = dir / (std::string("a_") + datatype_name(dt) + suffix);
      const fs::path p2 = dir / (std::string("b_") + datatype_name(dt) + suffix);
      write_volume(v, p);
      const Volume r = read_volume(p);
      write_volume(r, p2);
      ++cases;
      const bool same = r.header().datatype == dt && r.header().dims == v.header().dims &&
                        r.header().affine == v.header().affine && r.header().voxel_size == v.header().voxel_size &&
                        r.header().tr_seconds == v.header().tr_seconds && r.data().size() == v.data().size() &&
                        std::memcmp(r.data().data(), v.data().data(), v.data().size() * sizeof(double)) == 0 &&
                        slurp(p) == slurp(p2);
      failures += !same;
    }
  const PipelineConfig c = parse_config("");
  const bool defaults = c.motion_order == 12 && c.fwhm_mm == 6.0 && c.head_radius_mm == 35.0 && c.fd_max_mm == 0.25 &&
                        c.band_hz.first == 0.01 && c.band_hz.second == 0.1;
  return {failures == 0 && defaults,
          fmt("%zu/%zu datatype/compression round trips bit-exact; defaults motion %d, FWHM %g, radius %g, FD %g, band "
              "%g-%g",
              cases - failures, cases, c.motion_order, c.fwhm_mm, c.head_radius_mm, c.fd_max_mm, c.band_hz.first,
              c.band_hz.second)};
}

struct Criterion {
  int id;
  const char* title;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "FD formula fidelity", fd_formula},
      {2, "Censoring thresholds", censoring},
      {3, "Run exclusion", run_exclusion},
      {4, "Registration recovery", registration},
      {5, "Motion realignment", realignment},
      {6, "Distortion correction", distortion},
      {7, "Regression contract", regression},
      {8, "Band-pass contract", band_pass},
      {9, "Mask pipeline", masks},
      {10, "Segmentation", segmentation},
      {11, "Smoothing", smoothing},
      {12, "Connectivity", connectivity},
      {13, "Best-section", best_section},
      {14, "End-to-end determinism and parallel equivalence", end_to_end},
      {15, "Format fidelity", format_fidelity},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int run = 0, passed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    ++run;
    passed += v.pass;
    std::printf("%s %2d. %s: %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", c.id, c.title, v.detail.c_str(), since(t0));
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", passed, run);
  return passed == run ? 0 : 1;
}
