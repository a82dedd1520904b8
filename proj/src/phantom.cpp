#include "neors/phantom.hpp"

#include "neors/image_ops.hpp"

#include <json.hpp>

#include <cmath>
#include <numbers>
#include <map>
#include <random>
#include <stdexcept>

namespace neors {

double AnalyticPhantom::operator()(const Eigen::Vector3d& x) const {
  double v = 0.0;
  for (const auto& e : parts) {
    const double rho = ((x - e.center).array() / e.radii.array()).matrix().norm();
    const double r_eff = e.radii.mean();
    const double d = (1.0 - rho) * r_eff;
    v += e.intensity * 0.5 * (1.0 + std::tanh(d / e.edge_mm));
  }
  return v;
}

AnalyticPhantom smooth_head(double s, Eigen::Vector3d c, bool inverted) {
  AnalyticPhantom p;
  const Eigen::Vector3d head(45.0, 50.0, 38.0);
  const double edge = 3.0 * s;
  auto add = [&](Eigen::Vector3d center, Eigen::Vector3d radii, double intensity) {
    p.parts.push_back({c + s * center, s * radii, intensity, edge});
  };
  const double skull = inverted ? 0.4 : 0.5;
  add({0, 0, 0}, head, skull);
  add({0, 0, 0}, 0.9 * head, 1.0 - skull);
  const double flip = inverted ? -1.0 : 1.0;
  add({8, 5, 5}, {5, 12, 6}, flip * 0.6);
  add({-9, 3, 4}, {4, 10, 5}, flip * 0.5);
  add({15, -20, 10}, {8, 8, 8}, flip * -0.4);
  add({-20, 15, -8}, {6, 6, 6}, flip * 0.4);
  add({5, 25, 15}, {10, 6, 5}, flip * 0.3);
  add({-12, -28, -12}, {7, 5, 9}, flip * 0.35);
  return p;
}

Volume render(const AnalyticPhantom& f, const VolumeHeader& grid,
              const std::optional<AffineTransform>& t) {
  VolumeHeader h = grid.spatial();
  h.datatype = Datatype::Float64;
  Volume out(h);
  const Eigen::Matrix4d m = t ? Eigen::Matrix4d(t->matrix() * h.affine) : h.affine;
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x)
        out.at(x, y, z) = f((m * Eigen::Vector4d(double(x), double(y), double(z), 1.0)).head<3>());
  return out;
}

namespace {

VolumeHeader centered_grid(const std::array<std::size_t, 3>& dims, const std::array<double, 3>& vox) {
  Eigen::Vector3d origin;
  for (int i = 0; i < 3; ++i) origin[i] = -0.5 * static_cast<double>(dims[i] - 1) * vox[i];
  return make_grid(dims, vox, origin);
}

}  // namespace

StructuralPhantom make_structural_phantom(const StructuralPhantomSpec& spec) {
  if (spec.layers.empty()) throw std::invalid_argument("structural phantom needs at least one layer");
  const VolumeHeader h = centered_grid(spec.dims, spec.voxel_size);
  StructuralPhantom p{Volume(h), Volume(h)};
  p.labels.header().datatype = Datatype::UInt8;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x) {
        const Eigen::Vector3d w = h.voxel_to_world(double(x), double(y), double(z));
        const double r = (w.array() / spec.aspect.array()).matrix().norm() / spec.scale;
        TissueLabel label = TissueLabel::Background;
        double value = 0.0;
        for (const auto& layer : spec.layers) {
          if (r <= layer.outer_radius_mm) {
            label = layer.label;
            value = layer.intensity;
            break;
          }
        }
        p.labels.at(x, y, z) = static_cast<double>(label);
        p.image.at(x, y, z) = value + (spec.noise_sigma > 0.0 ? spec.noise_sigma * noise(rng) : 0.0);
      }
  return p;
}

double FieldSpec::displacement(const Eigen::Vector3d& x) const {
  if (peak_mm == 0.0) return 0.0;
  return peak_mm * std::exp(-(x - center).squaredNorm() / (2.0 * width_mm * width_mm));
}

double FieldSpec::derivative(const Eigen::Vector3d& x) const {
  if (peak_mm == 0.0) return 0.0;
  return -displacement(x) * (x[pe_axis] - center[pe_axis]) / (width_mm * width_mm);
}

Volume distort(const std::function<double(const Eigen::Vector3d&)>& image, const FieldSpec& field,
               const VolumeHeader& grid, double sign) {
  VolumeHeader h = grid.spatial();
  h.datatype = Datatype::Float64;
  Volume out(h);
  const int a = field.pe_axis;
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x) {
        const Eigen::Vector3d target = h.voxel_to_world(double(x), double(y), double(z));
        // solve p + sign*d(p) = target along the PE axis
        Eigen::Vector3d p = target;
        for (int it = 0; it < 50; ++it) {
          const double g = p[a] + sign * field.displacement(p) - target[a];
          const double dg = 1.0 + sign * field.derivative(p);
          const double step = g / dg;
          p[a] -= step;
          if (std::abs(step) < 1e-12) break;
        }
        out.at(x, y, z) = image(p) / (1.0 + sign * field.derivative(p));
      }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("pearson: length mismatch");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

namespace {

// Unit-variance, zero-mean sum of random-phase sinusoids on DFT frequencies in [lo, hi] Hz.
std::vector<double> band_limited_series(std::size_t n, double tr, double lo, double hi, std::mt19937_64& rng) {
  std::vector<double> s(n, 0.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> amp(0.0, 1.0);
  const double duration = static_cast<double>(n) * tr;
  bool any = false;
  for (std::size_t k = 1; k <= n / 2; ++k) {
    const double f = static_cast<double>(k) / duration;
    if (f < lo || f > hi) continue;
    const double a = amp(rng), ph = phase(rng);
    for (std::size_t t = 0; t < n; ++t)
      s[t] += a * std::cos(2.0 * std::numbers::pi * f * static_cast<double>(t) * tr + ph);
    any = true;
  }
  if (!any) {
    std::normal_distribution<double> z(0.0, 1.0);
    for (auto& v : s) v = z(rng);
  }
  double mean = 0.0, var = 0.0;
  for (double v : s) mean += v;
  mean /= static_cast<double>(n);
  for (double v : s) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  for (auto& v : s) v = sd > 0.0 ? (v - mean) / sd : 0.0;
  return s;
}

}  // namespace

FunctionalPhantom make_functional_phantom(const FunctionalPhantomSpec& spec) {
  if (spec.frames < 1) throw std::invalid_argument("functional phantom needs frames >= 1");
  const VolumeHeader grid = centered_grid(spec.dims, spec.voxel_size);
  const AnalyticPhantom default_head = smooth_head(spec.head_scale, Eigen::Vector3d::Zero(), true);
  const std::function<double(const Eigen::Vector3d&)> head =
      spec.anatomy ? spec.anatomy : std::function<double(const Eigen::Vector3d&)>(default_head);
  std::mt19937_64 rng(spec.seed);

  FunctionalGroundTruth truth;
  truth.pe_axis = spec.field.pe_axis;

  Volume reference(grid);
  for (std::size_t z = 0; z < grid.nz(); ++z)
    for (std::size_t y = 0; y < grid.ny(); ++y)
      for (std::size_t x = 0; x < grid.nx(); ++x) reference.at(x, y, z) = head(grid.voxel_to_world(double(x), double(y), double(z)));
  truth.pivot = center_of_mass(reference);

  if (!spec.motion.empty()) {
    if (spec.motion.size() != spec.frames) throw std::invalid_argument("motion list length != frames");
    for (const auto& t : spec.motion) truth.transforms.push_back(t.matrix());
  } else {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t f = 0; f < spec.frames; ++f) {
      if (f == 0 || (spec.motion_translation_mm == 0.0 && spec.motion_rotation_rad == 0.0)) {
        truth.transforms.push_back(Eigen::Matrix4d::Identity());
        continue;
      }
      Eigen::Vector3d t, r;
      for (int i = 0; i < 3; ++i) t[i] = spec.motion_translation_mm * u(rng);
      for (int i = 0; i < 3; ++i) r[i] = spec.motion_rotation_rad * u(rng);
      truth.transforms.push_back(AffineTransform::rigid(t, r, truth.pivot).matrix());
    }
  }

  // planted signals
  const std::size_t nr = spec.regions.size();
  std::map<int, std::vector<double>> shared;
  for (const auto& r : spec.regions)
    if (!shared.contains(r.group)) shared[r.group] = band_limited_series(spec.frames, spec.tr_seconds, 0.01, 0.1, rng);
  const double rho = std::clamp(spec.group_correlation, 0.0, 1.0);
  for (const auto& r : spec.regions) {
    const auto unique = band_limited_series(spec.frames, spec.tr_seconds, 0.01, 0.1, rng);
    std::vector<double> s(spec.frames);
    for (std::size_t t = 0; t < spec.frames; ++t)
      s[t] = std::sqrt(rho) * shared[r.group][t] + std::sqrt(1.0 - rho) * unique[t];
    truth.signals.push_back(std::move(s));
    truth.region_names.push_back(r.name);
  }
  truth.signal_correlations.assign(nr * nr, 1.0);
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t j = 0; j < nr; ++j)
      if (i != j) truth.signal_correlations[i * nr + j] = pearson(truth.signals[i], truth.signals[j]);

  VolumeHeader labels_h = grid;
  labels_h.datatype = Datatype::UInt8;
  truth.region_labels = Volume(labels_h);
  for (std::size_t z = 0; z < grid.nz(); ++z)
    for (std::size_t y = 0; y < grid.ny(); ++y)
      for (std::size_t x = 0; x < grid.nx(); ++x) {
        const Eigen::Vector3d w = grid.voxel_to_world(double(x), double(y), double(z));
        for (std::size_t r = 0; r < nr; ++r)
          if ((w - spec.regions[r].center).norm() <= spec.regions[r].radius_mm) {
            truth.region_labels.at(x, y, z) = static_cast<double>(r + 1);
            break;
          }
      }

  VolumeHeader fh = grid;
  fh.datatype = Datatype::Float64;
  truth.field_mm = Volume(fh);
  for (std::size_t z = 0; z < grid.nz(); ++z)
    for (std::size_t y = 0; y < grid.ny(); ++y)
      for (std::size_t x = 0; x < grid.nx(); ++x)
        truth.field_mm.at(x, y, z) = spec.field.displacement(grid.voxel_to_world(double(x), double(y), double(z)));

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<Volume> fwd, rev, clean;
  fwd.reserve(spec.frames);
  rev.reserve(spec.frames);
  for (std::size_t f = 0; f < spec.frames; ++f) {
    const Eigen::Matrix4d m = truth.transforms[f];
    auto content = [&](const Eigen::Vector3d& x) {
      const Eigen::Vector3d ref = (m * x.homogeneous()).head<3>();
      double mod = 1.0;
      for (std::size_t r = 0; r < nr; ++r)
        if ((ref - spec.regions[r].center).norm() <= spec.regions[r].radius_mm) {
          mod += spec.signal_amplitude * truth.signals[r][f];
          break;
        }
      return spec.baseline * head(ref) * mod;
    };
    Volume a = distort(content, spec.field, grid, +1.0);
    Volume b = distort(content, spec.field, grid, -1.0);
    if (f == 0) {
      FieldSpec none = spec.field;
      none.peak_mm = 0.0;
      clean.push_back(distort(content, none, grid, +1.0));
    }
    if (spec.noise_sigma > 0.0) {
      for (auto& v : a.data()) v += spec.noise_sigma * noise(rng);
      for (auto& v : b.data()) v += spec.noise_sigma * noise(rng);
    }
    fwd.push_back(std::move(a));
    rev.push_back(std::move(b));
  }

  FunctionalPhantom out;
  out.forward = stack_frames(fwd, spec.tr_seconds);
  out.reverse = stack_frames(rev, spec.tr_seconds);
  out.undistorted = clean.front();
  out.truth = std::move(truth);
  return out;
}

nlohmann::json FunctionalGroundTruth::to_json() const {
  nlohmann::json j;
  j["pivot"] = {pivot.x(), pivot.y(), pivot.z()};
  auto& tr = j["transforms"] = nlohmann::json::array();
  for (const auto& m : transforms) {
    std::vector<double> rows;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) rows.push_back(m(r, c));
    tr.push_back(rows);
  }
  j["region_names"] = region_names;
  j["signals"] = signals;
  j["signal_correlations"] = signal_correlations;
  j["pe_axis"] = pe_axis;
  return j;
}

}  // namespace neors
