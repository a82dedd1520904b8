#include "neors/segmentation.hpp"

#include "neors/image_ops.hpp"
#include "neors/registration.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>

namespace neors {

const char* mask_class_name(MaskClass c) {
  switch (c) {
    case MaskClass::Gm: return "GM";
    case MaskClass::Wm: return "WM";
    case MaskClass::Csf: return "CSF";
    case MaskClass::Discard: return "discard";
  }
  return "?";
}

MaskClass parse_mask_class(const std::string& s) {
  std::string u = s;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (u == "GM") return MaskClass::Gm;
  if (u == "WM") return MaskClass::Wm;
  if (u == "CSF") return MaskClass::Csf;
  if (u == "DISCARD") return MaskClass::Discard;
  throw SegmentationError("unknown mask class '" + s + "' (expected GM, WM, CSF or discard)");
}

std::map<std::string, MaskClass> default_mapping() {
  return {{"gm", MaskClass::Gm}, {"wm", MaskClass::Wm}, {"csf", MaskClass::Csf}};
}

std::map<std::string, MaskClass> load_mapping(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw SegmentationError(path.string() + ": cannot open tissue mapping");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw SegmentationError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw SegmentationError(path.string() + ": tissue mapping must be a JSON object");
  std::map<std::string, MaskClass> m;
  for (auto& [k, v] : j.items()) {
    if (!v.is_string()) throw SegmentationError(path.string() + ": mapping for '" + k + "' is not a string");
    m[k] = parse_mask_class(v.get<std::string>());
  }
  return m;
}

void write_mapping(const std::map<std::string, MaskClass>& m, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[k] = mask_class_name(v);
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << j.dump(2) << "\n";
}

void TissuePriors::validate() const {
  if (names.size() != maps.size()) throw SegmentationError("priors: names and maps differ in count");
  if (names.size() < 3 || names.size() > 8)
    throw SegmentationError("priors: need 3 to 8 classes, got " + std::to_string(names.size()));
  const auto& h0 = maps[0].header();
  for (std::size_t c = 0; c < maps.size(); ++c) {
    const auto& h = maps[c].header();
    if (h.nx() != h0.nx() || h.ny() != h0.ny() || h.nz() != h0.nz() || !h.affine.isApprox(h0.affine, 1e-6))
      throw SegmentationError("priors: map '" + names[c] + "' is on a different grid");
    if (!class_to_mask.contains(names[c])) throw SegmentationError("priors: class '" + names[c] + "' is not mapped");
  }
  for (std::size_t i = 0; i < h0.voxels_per_frame(); ++i) {
    double s = 0.0;
    for (const auto& m : maps) {
      const double p = m.data()[i];
      if (p < 0.0) throw SegmentationError("priors: negative probability");
      s += p;
    }
    if (s > 1.0 + 1e-6) throw SegmentationError("priors: probabilities sum to " + std::to_string(s) + " > 1");
  }
}

TissuePriors load_priors(const std::filesystem::path& dir, const std::filesystem::path& mapping) {
  if (!std::filesystem::is_directory(dir)) throw SegmentationError(dir.string() + ": priors directory not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    if (n.ends_with(".nii") || n.ends_with(".nii.gz")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  TissuePriors p;
  for (const auto& f : files) {
    std::string n = f.filename().string();
    n = n.substr(0, n.find(".nii"));
    p.names.push_back(n);
    p.maps.push_back(read_volume(f));
  }
  p.class_to_mask = mapping.empty() ? default_mapping() : load_mapping(mapping);
  p.validate();
  return p;
}

Segmentation segment_em(const Volume& t2, const TissuePriors& priors, const std::optional<Volume>& brain,
                        const EmOptions& opt) {
  priors.validate();
  const auto& h = t2.header();
  const auto& ph = priors.maps[0].header();
  if (h.nx() != ph.nx() || h.ny() != ph.ny() || h.nz() != ph.nz())
    throw SegmentationError("segmentation: T2 and priors are on different grids");
  const std::size_t nc = priors.maps.size(), nv = h.voxels_per_frame();

  std::vector<std::size_t> vox;
  for (std::size_t i = 0; i < nv; ++i)
    if (brain ? brain->data()[i] != 0.0 : t2.data()[i] != 0.0) vox.push_back(i);
  if (vox.empty()) throw SegmentationError("segmentation: empty brain");
  const std::size_t n = vox.size();

  // per-voxel priors, normalized (an all-zero prior becomes uniform)
  std::vector<double> pi(n * nc), y(n), resp(n * nc);
  for (std::size_t k = 0; k < n; ++k) {
    y[k] = t2.data()[vox[k]];
    double s = 0.0;
    for (std::size_t c = 0; c < nc; ++c) s += priors.maps[c].data()[vox[k]];
    for (std::size_t c = 0; c < nc; ++c)
      pi[k * nc + c] = s > 0.0 ? priors.maps[c].data()[vox[k]] / s : 1.0 / static_cast<double>(nc);
  }
  double ym = 0.0, yv = 0.0;
  for (double v : y) ym += v;
  ym /= static_cast<double>(n);
  for (double v : y) yv += (v - ym) * (v - ym);
  yv /= static_cast<double>(n);
  const double floor = std::max(opt.variance_floor * yv, 1e-12 * std::max(1.0, ym * ym));

  Segmentation seg;
  seg.names = priors.names;
  seg.means.assign(nc, 0.0);
  seg.variances.assign(nc, floor);

  // M step from given responsibilities; returns false for a collapsed class
  auto m_step = [&](const std::vector<double>& w) {
    for (std::size_t c = 0; c < nc; ++c) {
      double sw = 0.0, sy = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        sw += w[k * nc + c];
        sy += w[k * nc + c] * y[k];
      }
      if (sw <= 1e-12 * static_cast<double>(n)) {
        seg.variances[c] = floor;
        const std::string msg = "class '" + seg.names[c] + "' collapsed; variance floored";
        if (std::find(seg.warnings.begin(), seg.warnings.end(), msg) == seg.warnings.end()) seg.warnings.push_back(msg);
        continue;
      }
      const double mu = sy / sw;
      double sv = 0.0;
      for (std::size_t k = 0; k < n; ++k) sv += w[k * nc + c] * (y[k] - mu) * (y[k] - mu);
      seg.means[c] = mu;
      seg.variances[c] = std::max(sv / sw, floor);
    }
  };

  // E step; returns the log-likelihood of the current parameters
  auto e_step = [&]() {
    double ll = 0.0;
    std::vector<double> logp(nc);
    for (std::size_t k = 0; k < n; ++k) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < nc; ++c) {
        const double p = pi[k * nc + c];
        const double d = y[k] - seg.means[c];
        logp[c] = p > 0.0 ? std::log(p) - 0.5 * std::log(2.0 * std::numbers::pi * seg.variances[c]) -
                                0.5 * d * d / seg.variances[c]
                          : -std::numeric_limits<double>::infinity();
        mx = std::max(mx, logp[c]);
      }
      double s = 0.0;
      for (std::size_t c = 0; c < nc; ++c) s += std::exp(logp[c] - mx);
      for (std::size_t c = 0; c < nc; ++c) resp[k * nc + c] = std::exp(logp[c] - mx) / s;
      ll += mx + std::log(s);
    }
    return ll;
  };

  m_step(pi);
  double prev = e_step();
  seg.log_likelihood.push_back(prev);
  for (int it = 0; it < opt.max_iterations; ++it) {
    m_step(resp);
    const double ll = e_step();
    seg.log_likelihood.push_back(ll);
    if (std::abs(ll - prev) < opt.relative_tolerance * std::abs(prev)) {
      seg.converged = true;
      break;
    }
    prev = ll;
  }

  VolumeHeader oh = h.spatial();
  oh.datatype = Datatype::Float32;
  for (std::size_t c = 0; c < nc; ++c) {
    Volume p(oh);
    for (std::size_t k = 0; k < n; ++k) p.data()[vox[k]] = resp[k * nc + c];
    seg.posteriors.push_back(std::move(p));
  }
  return seg;
}

namespace {

// Binary masks from summed class probabilities; a voxel claimed by two masks goes to the larger sum.
std::array<Volume, 3> threshold_sums(const std::array<Volume, 3>& sums) {
  std::array<Volume, 3> out;
  for (int m = 0; m < 3; ++m) {
    VolumeHeader h = sums[m].header();
    h.datatype = Datatype::UInt8;
    out[m] = Volume(h);
  }
  for (std::size_t i = 0; i < sums[0].data().size(); ++i) {
    int best = -1;
    for (int m = 0; m < 3; ++m)
      if (sums[m].data()[i] > 0.5 && (best < 0 || sums[m].data()[i] > sums[best].data()[i])) best = m;
    if (best >= 0) out[best].data()[i] = 1.0;
  }
  return out;
}

}  // namespace

TissueMasks build_masks(const std::vector<std::string>& names, const std::vector<Volume>& probs,
                        const std::map<std::string, MaskClass>& mapping, const VolumeHeader& grid_3mm) {
  if (names.size() != probs.size() || probs.empty()) throw SegmentationError("build_masks: names/probabilities mismatch");
  const VolumeHeader fine = probs[0].header().spatial();
  std::array<Volume, 3> sums{Volume(fine), Volume(fine), Volume(fine)};
  for (auto& s : sums) s.header().datatype = Datatype::Float32;
  for (std::size_t c = 0; c < names.size(); ++c) {
    const auto it = mapping.find(names[c]);
    if (it == mapping.end()) throw SegmentationError("build_masks: class '" + names[c] + "' is not mapped");
    if (it->second == MaskClass::Discard) continue;
    const int m = it->second == MaskClass::Gm ? 0 : it->second == MaskClass::Wm ? 1 : 2;
    for (std::size_t i = 0; i < fine.voxels_per_frame(); ++i) {
      const double p = probs[c].data()[i];
      if (p < -1e-9 || p > 1.0 + 1e-9) throw SegmentationError("build_masks: probability outside [0, 1]");
      sums[m].data()[i] += p;
    }
  }
  std::array<Volume, 3> coarse_sums;
  for (int m = 0; m < 3; ++m)
    coarse_sums[m] = resample(sums[m], AffineTransform::identity(), grid_3mm.spatial(), Interpolation::Trilinear);

  auto fine_masks = threshold_sums(sums);
  auto coarse_masks = threshold_sums(coarse_sums);
  TissueMasks t{fine_masks[0], erode6(fine_masks[1]), fine_masks[2],
                coarse_masks[0], erode6(coarse_masks[1]), coarse_masks[2]};
  if (count_nonzero(t.wm_1mm) == 0) throw SegmentationError("WM mask is empty after erosion (1 mm)");
  if (count_nonzero(t.wm_3mm) == 0) throw SegmentationError("WM mask is empty after erosion (3 mm)");
  return t;
}

}  // namespace neors
