#include "neors/image_ops.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

namespace neors {

double percentile(std::span<const double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of empty set");
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return s[lo] * (1.0 - w) + s[hi] * w;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (auto& w : k) w /= sum;
  return k;
}

namespace {

void convolve_axis(std::vector<double>& data, const std::array<std::size_t, 3>& dims, int axis,
                   const std::vector<double>& kernel) {
  if (kernel.size() == 1) return;
  const int radius = static_cast<int>(kernel.size() / 2);
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? dims[0] : dims[0] * dims[1];
  const auto n = static_cast<int>(dims[axis]);
  std::vector<double> line(static_cast<std::size_t>(n)), outl(static_cast<std::size_t>(n));
  const std::size_t total = dims[0] * dims[1] * dims[2];
  for (std::size_t base = 0; base < total; ++base) {
    // visit each line once: base must have coordinate 0 along axis
    const std::size_t coord = (base / stride) % dims[axis];
    if (coord != 0) continue;
    for (int i = 0; i < n; ++i) line[i] = data[base + static_cast<std::size_t>(i) * stride];
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      const int lo = std::max(0, i - radius), hi = std::min(n - 1, i + radius);
      for (int j = lo; j <= hi; ++j) acc += kernel[j - i + radius] * line[j];
      outl[i] = acc;
    }
    for (int i = 0; i < n; ++i) data[base + static_cast<std::size_t>(i) * stride] = outl[i];
  }
}

struct Grid {
  std::size_t nx, ny, nz;
  explicit Grid(const VolumeHeader& h) : nx(h.nx()), ny(h.ny()), nz(h.nz()) {}
  std::size_t size() const { return nx * ny * nz; }
};

template <typename F>
void for_neighbors6(const Grid& g, std::size_t idx, F&& f) {
  const std::size_t x = idx % g.nx, y = (idx / g.nx) % g.ny, z = idx / (g.nx * g.ny);
  if (x > 0) f(idx - 1, true); else f(0, false);
  if (x + 1 < g.nx) f(idx + 1, true); else f(0, false);
  if (y > 0) f(idx - g.nx, true); else f(0, false);
  if (y + 1 < g.ny) f(idx + g.nx, true); else f(0, false);
  if (z > 0) f(idx - g.nx * g.ny, true); else f(0, false);
  if (z + 1 < g.nz) f(idx + g.nx * g.ny, true); else f(0, false);
}

Volume as_mask_like(const Volume& m) {
  VolumeHeader h = m.header().spatial();
  h.datatype = Datatype::UInt8;
  return Volume(h, 0.0);
}

}  // namespace

Volume gaussian_smooth(const Volume& v, const std::array<double, 3>& sigma) {
  Volume out = v;
  const auto& h = v.header();
  const std::array<std::size_t, 3> dims{h.nx(), h.ny(), h.nz()};
  const std::size_t n = h.voxels_per_frame();
  for (std::size_t t = 0; t < h.nt(); ++t) {
    std::vector<double> frame(out.data().begin() + static_cast<std::ptrdiff_t>(t * n),
                              out.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * n));
    for (int a = 0; a < 3; ++a) convolve_axis(frame, dims, a, gaussian_kernel(sigma[a]));
    std::copy(frame.begin(), frame.end(), out.data().begin() + static_cast<std::ptrdiff_t>(t * n));
  }
  return out;
}

Volume binary_threshold(const Volume& v, double above) {
  Volume m = as_mask_like(v);
  for (std::size_t i = 0; i < m.data().size(); ++i) m.data()[i] = v.data()[i] > above ? 1.0 : 0.0;
  return m;
}

std::size_t count_nonzero(const Volume& v) {
  return static_cast<std::size_t>(
      std::count_if(v.data().begin(), v.data().end(), [](double x) { return x != 0.0; }));
}

Volume erode6(const Volume& mask) {
  const Grid g(mask.header());
  Volume out = as_mask_like(mask);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (mask.data()[i] == 0.0) continue;
    bool keep = true;
    for_neighbors6(g, i, [&](std::size_t j, bool inside) {
      if (!inside || mask.data()[j] == 0.0) keep = false;
    });
    out.data()[i] = keep ? 1.0 : 0.0;
  }
  return out;
}

Volume dilate6(const Volume& mask) {
  const Grid g(mask.header());
  Volume out = as_mask_like(mask);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (mask.data()[i] == 0.0) continue;
    out.data()[i] = 1.0;
    for_neighbors6(g, i, [&](std::size_t j, bool inside) {
      if (inside) out.data()[j] = 1.0;
    });
  }
  return out;
}

namespace {

std::vector<std::array<int, 3>> ball_offsets(double radius) {
  std::vector<std::array<int, 3>> offs;
  const int r = static_cast<int>(std::floor(radius));
  for (int dz = -r; dz <= r; ++dz)
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx)
        if (dx * dx + dy * dy + dz * dz <= radius * radius + 1e-9) offs.push_back({dx, dy, dz});
  return offs;
}

Volume ball_morph(const Volume& mask, double radius, bool dilate) {
  const auto& h = mask.header();
  const auto offs = ball_offsets(radius);
  Volume out = as_mask_like(mask);
  const auto nx = static_cast<long>(h.nx()), ny = static_cast<long>(h.ny()),
             nz = static_cast<long>(h.nz());
  for (long z = 0; z < nz; ++z)
    for (long y = 0; y < ny; ++y)
      for (long x = 0; x < nx; ++x) {
        bool hit = !dilate;
        for (const auto& o : offs) {
          const long xx = x + o[0], yy = y + o[1], zz = z + o[2];
          const bool inside = xx >= 0 && yy >= 0 && zz >= 0 && xx < nx && yy < ny && zz < nz;
          const bool fg = inside && mask.at(static_cast<std::size_t>(xx), static_cast<std::size_t>(yy),
                                            static_cast<std::size_t>(zz)) != 0.0;
          if (dilate && fg) { hit = true; break; }
          if (!dilate && !fg) { hit = false; break; }
        }
        out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(z)) =
            hit ? 1.0 : 0.0;
      }
  return out;
}

std::vector<int> label_components(const Volume& mask, std::vector<std::size_t>& sizes) {
  const Grid g(mask.header());
  std::vector<int> label(g.size(), -1);
  sizes.clear();
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (mask.data()[i] == 0.0 || label[i] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    std::size_t count = 0;
    stack.push_back(i);
    label[i] = id;
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      ++count;
      for_neighbors6(g, c, [&](std::size_t j, bool inside) {
        if (inside && mask.data()[j] != 0.0 && label[j] < 0) {
          label[j] = id;
          stack.push_back(j);
        }
      });
    }
    sizes.push_back(count);
  }
  return label;
}

}  // namespace

Volume dilate_ball(const Volume& mask, double radius) { return ball_morph(mask, radius, true); }
Volume erode_ball(const Volume& mask, double radius) { return ball_morph(mask, radius, false); }

Volume largest_component(const Volume& mask) {
  std::vector<std::size_t> sizes;
  const auto label = label_components(mask, sizes);
  Volume out = as_mask_like(mask);
  if (sizes.empty()) return out;
  const auto best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < label.size(); ++i) out.data()[i] = label[i] == best ? 1.0 : 0.0;
  return out;
}

std::size_t component_count(const Volume& mask) {
  std::vector<std::size_t> sizes;
  label_components(mask, sizes);
  return sizes.size();
}

Volume fill_holes(const Volume& mask) {
  const Grid g(mask.header());
  std::vector<char> outside(g.size(), 0);
  std::queue<std::size_t> q;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (mask.data()[i] != 0.0) continue;
    const std::size_t x = i % g.nx, y = (i / g.nx) % g.ny, z = i / (g.nx * g.ny);
    if (x == 0 || y == 0 || z == 0 || x + 1 == g.nx || y + 1 == g.ny || z + 1 == g.nz) {
      outside[i] = 1;
      q.push(i);
    }
  }
  while (!q.empty()) {
    const std::size_t c = q.front();
    q.pop();
    for_neighbors6(g, c, [&](std::size_t j, bool inside) {
      if (inside && !outside[j] && mask.data()[j] == 0.0) {
        outside[j] = 1;
        q.push(j);
      }
    });
  }
  Volume out = as_mask_like(mask);
  for (std::size_t i = 0; i < g.size(); ++i) out.data()[i] = outside[i] ? 0.0 : 1.0;
  return out;
}

Eigen::Vector3d center_of_mass(const Volume& v) {
  const auto& h = v.header();
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  double w = 0.0;
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x) {
        const double val = v.at(x, y, z);
        if (!(val > 0.0)) continue;
        acc += val * Eigen::Vector3d(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z));
        w += val;
      }
  if (w <= 0.0) {
    acc = Eigen::Vector3d((h.nx() - 1) / 2.0, (h.ny() - 1) / 2.0, (h.nz() - 1) / 2.0);
  } else {
    acc /= w;
  }
  return h.voxel_to_world(acc.x(), acc.y(), acc.z());
}

double dice(const Volume& a, const Volume& b) {
  if (a.data().size() != b.data().size()) throw std::invalid_argument("dice: shape mismatch");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const bool x = a.data()[i] != 0.0, y = b.data()[i] != 0.0;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

Volume temporal_mean(const Volume& v) {
  const auto& h = v.header();
  Volume out(h.spatial());
  const std::size_t n = h.voxels_per_frame();
  for (std::size_t t = 0; t < h.nt(); ++t)
    for (std::size_t i = 0; i < n; ++i) out.data()[i] += v.data()[t * n + i];
  for (auto& x : out.data()) x /= static_cast<double>(h.nt());
  return out;
}

}  // namespace neors
