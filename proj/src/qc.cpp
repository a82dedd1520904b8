#include "neors/qc.hpp"

#include "neors/image_ops.hpp"
#include "neors/raster.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace neors {

namespace {

constexpr int kTitleHeight = 28;
constexpr int kGap = 8;

double voxel(const Volume& v, int fixed_axis, std::size_t slice, int u_axis, std::size_t u, std::size_t vv) {
  std::size_t idx[3];
  idx[fixed_axis] = slice;
  idx[u_axis] = u;
  idx[3 - fixed_axis - u_axis] = vv;
  return v.at(idx[0], idx[1], idx[2]);
}

struct Window {
  double lo, hi;
  std::uint8_t gray(double x) const {
    const double t = hi > lo ? (x - lo) / (hi - lo) : 0.0;
    return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t, 0.0, 1.0)));
  }
};

Window window_of(const Volume& v) {
  const std::span<const double> f(v.data().data(), v.header().voxels_per_frame());
  return {percentile(f, 2.0), percentile(f, 98.0)};
}

std::size_t extent(const Volume& v, int axis) { return v.header().dims[static_cast<std::size_t>(axis)]; }

void paint_slice(Image& img, const Volume& v, const OverlayPanel& p, const Window& w) {
  const std::size_t nu = extent(v, p.u_axis), nv = extent(v, p.v_axis);
  for (std::size_t b = 0; b < nv; ++b)
    for (std::size_t a = 0; a < nu; ++a) {
      const std::uint8_t g = w.gray(voxel(v, p.fixed_axis, p.slice, p.u_axis, a, b));
      img.fill_rect(p.x0 + static_cast<int>(a) * p.scale, p.y0 + static_cast<int>(nv - 1 - b) * p.scale, p.scale,
                    p.scale, Rgb{g, g, g});
    }
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> slice_boundary(const Volume& mask, const OverlayPanel& p) {
  const std::size_t nu = extent(mask, p.u_axis), nv = extent(mask, p.v_axis);
  auto in = [&](long a, long b) {
    if (a < 0 || b < 0 || a >= static_cast<long>(nu) || b >= static_cast<long>(nv)) return false;
    return voxel(mask, p.fixed_axis, p.slice, p.u_axis, static_cast<std::size_t>(a), static_cast<std::size_t>(b)) != 0.0;
  };
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (long b = 0; b < static_cast<long>(nv); ++b)
    for (long a = 0; a < static_cast<long>(nu); ++a)
      if (in(a, b) && (!in(a - 1, b) || !in(a + 1, b) || !in(a, b - 1) || !in(a, b + 1)))
        out.emplace_back(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
  return out;
}

std::vector<OverlayPanel> render_contour_overlay(const Volume& base, const Volume& mask,
                                                 const std::filesystem::path& out, const std::string& title) {
  const auto& h = base.header();
  const auto& mh = mask.header();
  if (h.nx() != mh.nx() || h.ny() != mh.ny() || h.nz() != mh.nz())
    throw std::invalid_argument("contour overlay: base and mask shapes differ");
  const std::size_t longest = std::max({h.nx(), h.ny(), h.nz()});
  const int scale = std::max(1, static_cast<int>(200 / longest));

  std::vector<OverlayPanel> panels{{"axial", 2, h.nz() / 2, 0, 1},
                                   {"coronal", 1, h.ny() / 2, 0, 2},
                                   {"sagittal", 0, h.nx() / 2, 1, 2}};
  int x = kGap, height = 0;
  for (auto& p : panels) {
    p.scale = scale;
    p.x0 = x;
    p.y0 = kTitleHeight;
    x += static_cast<int>(extent(base, p.u_axis)) * scale + kGap;
    height = std::max(height, static_cast<int>(extent(base, p.v_axis)) * scale);
  }
  Image img(x, kTitleHeight + height + kGap, kBlack);
  const Window w = window_of(base);
  const bool empty = count_nonzero(mask.header().nt() > 1 ? mask.frame(0) : mask) == 0;
  draw_text(img, kGap, 4, title, kWhite);
  if (empty) draw_text(img, kGap, 16, "WARNING: EMPTY MASK", kRed);

  nlohmann::json layout = nlohmann::json::array();
  std::size_t contour_pixels = 0;
  for (const auto& p : panels) {
    paint_slice(img, base, p, w);
    const std::size_t nv = extent(base, p.v_axis);
    for (auto [a, b] : slice_boundary(mask, p)) {
      img.fill_rect(p.x0 + static_cast<int>(a) * scale, p.y0 + static_cast<int>(nv - 1 - b) * scale, scale, scale,
                    kYellow);
      ++contour_pixels;
    }
    layout.push_back({{"plane", p.plane},
                      {"fixed_axis", p.fixed_axis},
                      {"slice", p.slice},
                      {"u_axis", p.u_axis},
                      {"v_axis", p.v_axis},
                      {"x0", p.x0},
                      {"y0", p.y0},
                      {"scale", p.scale}});
  }
  std::map<std::string, std::string> text{{"panels", layout.dump()},
                                          {"contour_voxels", std::to_string(contour_pixels)}};
  if (empty) text["warning"] = "empty mask";
  write_png(img, out, text);
  return panels;
}

void render_distortion_panel(const Volume& t2, const Volume& ap_raw, const Volume& pa_raw, const Volume& ap_corr,
                             const Volume& pa_corr, const std::filesystem::path& out) {
  constexpr int kBox = 180;
  const Volume* vols[5] = {&t2, &ap_raw, &pa_raw, &ap_corr, &pa_corr};
  static const char* kLabels[5] = {"A", "B", "C", "D", "E"};
  static const char* kCaptions[5] = {"T2", "AP RAW", "PA RAW", "AP CORR", "PA CORR"};
  Image img(kGap + 5 * (kBox + kGap), kTitleHeight + kBox + 2 * kGap + 12, kBlack);
  for (int i = 0; i < 5; ++i) {
    const Volume& v = *vols[i];
    const auto& h = v.header();
    const int scale = std::max(1, static_cast<int>(kBox / std::max(h.nx(), h.ny())));
    OverlayPanel p{"axial", 2, h.nz() / 2, 0, 1};
    p.scale = scale;
    p.x0 = kGap + i * (kBox + kGap) + (kBox - static_cast<int>(h.nx()) * scale) / 2;
    p.y0 = kTitleHeight + (kBox - static_cast<int>(h.ny()) * scale) / 2;
    paint_slice(img, h.nt() > 1 ? temporal_mean(v) : v, p, window_of(v));
    const int bx = kGap + i * (kBox + kGap);
    draw_text(img, bx, 4, kLabels[i], kYellow, 2);
    draw_text(img, bx, kTitleHeight + kBox + kGap, kCaptions[i], kWhite);
  }
  write_png(img, out, {{"panels", "5"}, {"labels", "A,B,C,D,E"}, {"captions", "T2,AP RAW,PA RAW,AP CORR,PA CORR"}});
}

nlohmann::json SubjectReport::to_json() const {
  nlohmann::json j;
  j["subject"] = subject;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : stages) j["stages"].push_back({{"stage", s.stage}, {"status", s.status}, {"detail", s.detail}});
  j["runs"] = nlohmann::json::array();
  for (const auto& r : runs)
    j["runs"].push_back({{"name", r.name},
                         {"mean_fd_mm", r.mean_fd_mm},
                         {"frames", r.frames},
                         {"kept_frames", r.kept_frames},
                         {"status", r.accepted ? "accepted" : "rejected"}});
  j["warnings"] = warnings;
  j["artifacts"] = artifacts;
  return j;
}

SubjectReport SubjectReport::from_json(const nlohmann::json& j) {
  SubjectReport r;
  r.subject = j.at("subject").get<std::string>();
  for (const auto& s : j.at("stages"))
    r.stages.push_back({s.at("stage").get<std::string>(), s.at("status").get<std::string>(),
                        s.value("detail", std::string())});
  for (const auto& x : j.at("runs"))
    r.runs.push_back({x.at("name").get<std::string>(), x.at("mean_fd_mm").get<double>(),
                      x.at("frames").get<std::size_t>(), x.at("kept_frames").get<std::size_t>(),
                      x.at("status").get<std::string>() == "accepted"});
  r.warnings = j.value("warnings", std::vector<std::string>{});
  r.artifacts = j.value("artifacts", std::vector<std::string>{});
  return r;
}

bool write_subject_report(const SubjectReport& report, const std::filesystem::path& output_files) {
  std::error_code ec;
  std::filesystem::create_directories(output_files, ec);
  std::ofstream f(output_files / "summary.json");
  if (!f) return false;
  f << report.to_json().dump(2) << "\n";
  return static_cast<bool>(f);
}

}  // namespace neors
