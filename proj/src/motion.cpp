#include "neors/motion.hpp"

#include "neors/image_ops.hpp"
#include "neors/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace neors {

std::array<double, 6> motion_params(const AffineTransform& t) {
  const auto& v = t.params().v;
  return {v[3], v[4], v[5], v[0], v[1], v[2]};
}

RealignResult realign(const Volume& epi, const RealignOptions& opt) {
  const auto& h = epi.header();
  const std::size_t n = h.nt();
  if (n < 2) throw std::invalid_argument("realign: need at least 2 frames");
  if (opt.reference_frame >= n) throw std::invalid_argument("realign: reference frame out of range");

  const Volume reference = epi.frame(opt.reference_frame);
  const Eigen::Vector3d pivot = center_of_mass(reference);

  RealignResult out;
  out.transforms.assign(n, AffineTransform::identity(Dof::Rigid, pivot));
  out.flagged.assign(n, false);

  RegistrationOptions ro;
  ro.dof = Dof::Rigid;
  ro.smooth = false;
  ro.cost = CostFunction::NormalizedCorrelation;
  ro.cubic_sampling = true;
  // neighbouring frames start close to the optimum, so the coarsest level is dropped
  const double b = *std::max_element(h.voxel_size.begin(), h.voxel_size.end());
  ro.level_spacing_mm = {2.0 * b, b};
  ro.tolerance = 5e-4;
  auto solve = [&](std::size_t i, const AffineTransform& start) {
    ro.initial = start;
    const auto r = register_images(epi.frame(i), reference, ro);
    out.transforms[i] = r.transform;
    out.flagged[i] = !r.converged;
  };
  // Each frame starts from its temporal neighbour's estimate.
  for (std::size_t i = opt.reference_frame + 1; i < n; ++i) solve(i, out.transforms[i - 1]);
  for (std::size_t i = opt.reference_frame; i-- > 0;) solve(i, out.transforms[i + 1]);

  out.corrected = Volume(h);
  for (std::size_t i = 0; i < n; ++i) {
    if (i == opt.reference_frame) {
      out.corrected.set_frame(i, reference);
      continue;
    }
    out.corrected.set_frame(i, resample(epi.frame(i), out.transforms[i], h.spatial(), opt.interpolation));
  }

  out.trace.radius_mm = opt.radius_mm;
  for (const auto& t : out.transforms) out.trace.params.push_back(motion_params(t));
  out.trace.fd_mm = framewise_displacement(out.trace, opt.radius_mm);
  return out;
}

std::vector<double> framewise_displacement(std::span<const std::array<double, 6>> params, double radius_mm) {
  std::vector<double> fd(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (double v : params[i])
      if (!std::isfinite(v)) throw std::invalid_argument("framewise_displacement: non-finite motion parameter");
  for (std::size_t i = 1; i < params.size(); ++i) {
    double rot = 0.0, trans = 0.0;
    for (int k = 0; k < 3; ++k) rot += std::abs(params[i][k] - params[i - 1][k]);
    for (int k = 3; k < 6; ++k) trans += std::abs(params[i][k] - params[i - 1][k]);
    fd[i] = trans + radius_mm * rot;
  }
  return fd;
}

std::vector<double> framewise_displacement(const MotionTrace& trace, double radius_mm) {
  return framewise_displacement(std::span<const std::array<double, 6>>(trace.params), radius_mm);
}

std::string censor_reason_name(CensorReason r) {
  switch (r) {
    case CensorReason::Kept: return "kept";
    case CensorReason::FirstFive: return "first-five";
    case CensorReason::FdExceeded: return "fd-exceeded";
  }
  return "kept";
}

std::size_t CensorMask::kept_count() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true)); }

std::vector<std::size_t> CensorMask::excluded() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (!keep[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> CensorMask::kept() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.push_back(i);
  return out;
}

CensorMask build_censor_mask(std::span<const double> fd, double fd_max_mm) {
  if (!(fd_max_mm > 0.0)) throw std::invalid_argument("build_censor_mask: fd_max must be positive");
  CensorMask m;
  m.keep.resize(fd.size());
  m.reason.resize(fd.size());
  for (std::size_t i = 0; i < fd.size(); ++i) {
    if (i < kDiscardedLeadingFrames) m.reason[i] = CensorReason::FirstFive;
    else if (fd[i] >= fd_max_mm) m.reason[i] = CensorReason::FdExceeded;
    else m.reason[i] = CensorReason::Kept;
    m.keep[i] = m.reason[i] == CensorReason::Kept;
  }
  return m;
}

CensorMask restrict_mask(const CensorMask& m, std::size_t start, std::size_t length) {
  CensorMask out = m;
  for (std::size_t i = 0; i < m.frames(); ++i)
    if (i < start || i >= start + length) out.keep[i] = false;
  return out;
}

FrameInterval select_best_section(std::span<const double> fd, double tr_seconds, double section_seconds) {
  if (!(tr_seconds > 0.0)) throw std::invalid_argument("select_best_section: tr must be positive");
  if (section_seconds < 300.0) throw std::invalid_argument("select_best_section: section must be at least 300 s");
  // tolerance keeps e.g. 300 / 0.8 at 375 frames despite rounding
  const auto length = static_cast<std::size_t>(std::ceil(section_seconds / tr_seconds - 1e-9));
  const std::size_t first = kDiscardedLeadingFrames;
  if (fd.size() < first || fd.size() - first < length) {
    std::ostringstream msg;
    msg << "select_best_section: series of " << fd.size() << " frames is shorter than the " << length
        << "-frame window after removing the first " << first << " frames";
    throw std::invalid_argument(msg.str());
  }
  FrameInterval best{first, length, 0.0};
  bool have = false;
  for (std::size_t s = first; s + length <= fd.size(); ++s) {
    double sum = 0.0;
    for (std::size_t i = s; i < s + length; ++i) sum += fd[i];
    const double mean = sum / static_cast<double>(length);
    if (!have || mean < best.mean_fd) {
      best = {s, length, mean};
      have = true;
    }
  }
  return best;
}

RunEvaluation evaluate_run(std::span<const double> fd, double fd_average_max_mm) {
  if (fd.empty()) throw std::invalid_argument("evaluate_run: empty FD series");
  RunEvaluation e;
  if (fd.size() > kDiscardedLeadingFrames) {
    double sum = 0.0;
    for (std::size_t i = kDiscardedLeadingFrames; i < fd.size(); ++i) sum += fd[i];
    e.mean_fd = sum / static_cast<double>(fd.size() - kDiscardedLeadingFrames);
  }
  e.accepted = !(e.mean_fd > fd_average_max_mm);
  return e;
}

void write_motion_params(const MotionTrace& trace, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  char buf[32];
  for (const auto& p : trace.params) {
    for (int k = 0; k < 6; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", p[k]);
      f << (k ? " " : "") << buf;
    }
    f << "\n";
  }
}

MotionTrace read_motion_params(const std::filesystem::path& path, double radius_mm) {
  std::ifstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open");
  MotionTrace t;
  t.radius_mm = radius_mm;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::array<double, 6> p{};
    for (auto& v : p)
      if (!(ls >> v)) throw IoError(path.string() + ": line " + std::to_string(lineno) + ": expected 6 values");
    t.params.push_back(p);
  }
  t.fd_mm = framewise_displacement(t, radius_mm);
  return t;
}

void write_censor_list(const CensorMask& m, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  for (std::size_t i = 0; i < m.frames(); ++i)
    if (!m.keep[i]) f << i << "\n";
}

// ---------------------------------------------------------------------------
// Plot

namespace {

std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Series {
  std::vector<double> values;
  Rgb color;
};

void plot_panel(Image& img, int x0, int y0, int w, int h, const std::string& label, const std::vector<Series>& series,
                const double* threshold) {
  double lo = 0.0, hi = 0.0;
  for (const auto& s : series)
    for (double v : s.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (threshold) hi = std::max(hi, *threshold * 1.2);
  if (hi - lo < 1e-12) hi = lo + 1.0;

  const int left = 56, bottom = 14;
  const int pw = w - left - 8, ph = h - bottom - 16;
  const int px = x0 + left, py = y0 + 14;
  draw_text(img, x0 + 4, y0 + 2, label, kBlack);
  img.fill_rect(px, py, pw, ph, kWhite);
  draw_line(img, px, py, px, py + ph, kBlack);
  draw_line(img, px, py + ph, px + pw, py + ph, kBlack);
  draw_text(img, x0 + 2, py, short_number(hi), kBlack);
  draw_text(img, x0 + 2, py + ph - kGlyphHeight, short_number(lo), kBlack);

  auto ymap = [&](double v) { return py + ph - static_cast<int>(std::lround((v - lo) / (hi - lo) * (ph - 1))); };
  if (lo < 0.0 && hi > 0.0) draw_line(img, px, ymap(0.0), px + pw, ymap(0.0), kGray);
  if (threshold) {
    const int ty = ymap(*threshold);
    for (int x = px; x < px + pw; x += 6) draw_line(img, x, ty, std::min(x + 3, px + pw), ty, kRed);
    draw_text(img, px + pw - text_width("FD_MAX " + short_number(*threshold)) - 2, ty - 9,
              "FD_MAX " + short_number(*threshold), kRed);
  }
  for (const auto& s : series) {
    const std::size_t n = s.values.size();
    if (n == 0) continue;
    auto xmap = [&](std::size_t i) {
      return px + (n > 1 ? static_cast<int>(std::lround(double(i) / double(n - 1) * (pw - 1))) : 0);
    };
    for (std::size_t i = 1; i < n; ++i)
      draw_line(img, xmap(i - 1), ymap(s.values[i - 1]), xmap(i), ymap(s.values[i]), s.color);
    if (n == 1) img.set(xmap(0), ymap(s.values[0]), s.color);
  }
  draw_text(img, px, py + ph + 4, "0", kBlack);
  const std::string last = std::to_string(series.empty() ? 0 : series.front().values.size() - 1);
  draw_text(img, px + pw - text_width(last), py + ph + 4, last, kBlack);
}

}  // namespace

void render_motion_plot(const MotionTrace& trace, double fd_threshold_mm, const std::filesystem::path& out,
                        const std::string& title) {
  if (trace.params.empty()) throw std::invalid_argument("render_motion_plot: empty trace");
  const int w = 720, panel_h = 170, top = title.empty() ? 4 : 18;
  Image img(w, top + 3 * panel_h + 4, Rgb{235, 235, 235});
  if (!title.empty()) draw_text(img, 6, 5, title, kBlack);

  const std::array<Rgb, 3> colors{kRed, kGreen, kBlue};
  std::vector<Series> rot, trans;
  for (int k = 0; k < 3; ++k) {
    Series r{{}, colors[k]}, t{{}, colors[k]};
    for (const auto& p : trace.params) {
      r.values.push_back(p[k]);
      t.values.push_back(p[k + 3]);
    }
    rot.push_back(std::move(r));
    trans.push_back(std::move(t));
  }
  const std::vector<double> fd =
      trace.fd_mm.size() == trace.params.size() ? trace.fd_mm : framewise_displacement(trace, trace.radius_mm);

  plot_panel(img, 0, top, w, panel_h, "ROTATION (RAD)  X Y Z", rot, nullptr);
  plot_panel(img, 0, top + panel_h, w, panel_h, "TRANSLATION (MM)  X Y Z", trans, nullptr);
  plot_panel(img, 0, top + 2 * panel_h, w, panel_h, "FRAMEWISE DISPLACEMENT (MM)", {Series{fd, kBlack}},
             &fd_threshold_mm);

  write_png(img, out,
            {{"panels", "3"},
             {"panel_labels", "rotation (rad);translation (mm);framewise displacement (mm)"},
             {"fd_threshold_mm", short_number(fd_threshold_mm)},
             {"frames", std::to_string(trace.frames())}});
}

}  // namespace neors
