#include "neors/distortion.hpp"

#include "neors/image_ops.hpp"
#include "neors/registration.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace neors {

namespace {

struct Dims {
  std::array<std::size_t, 3> n{};
  std::size_t stride(int axis) const { return axis == 0 ? 1 : axis == 1 ? n[0] : n[0] * n[1]; }
  std::size_t size() const { return n[0] * n[1] * n[2]; }
};

// Block average by factor f along every axis (partial blocks at the far edges).
std::vector<double> decimate(const std::vector<double>& img, const Dims& d, int f, Dims& out) {
  for (int a = 0; a < 3; ++a) out.n[a] = (d.n[a] + f - 1) / f;
  std::vector<double> sum(out.size(), 0.0), cnt(out.size(), 0.0);
  for (std::size_t z = 0; z < d.n[2]; ++z)
    for (std::size_t y = 0; y < d.n[1]; ++y)
      for (std::size_t x = 0; x < d.n[0]; ++x) {
        const std::size_t o = (z / f * out.n[1] + y / f) * out.n[0] + x / f;
        sum[o] += img[(z * d.n[1] + y) * d.n[0] + x];
        cnt[o] += 1.0;
      }
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= cnt[i];
  return sum;
}

// Trilinear resampling of a level-`fc` array onto level `ff` (same original grid).
std::vector<double> upsample(const std::vector<double>& c, const Dims& cd, int fc, const Dims& fd, int ff) {
  std::vector<double> out(fd.size());
  auto coord = [&](std::size_t j, int a, std::size_t& i0, double& t) {
    double p = ((static_cast<double>(j) + 0.5) * ff) / fc - 0.5;
    p = std::clamp(p, 0.0, static_cast<double>(cd.n[a] - 1));
    i0 = std::min(static_cast<std::size_t>(p), cd.n[a] >= 2 ? cd.n[a] - 2 : 0);
    t = cd.n[a] >= 2 ? p - static_cast<double>(i0) : 0.0;
  };
  for (std::size_t z = 0; z < fd.n[2]; ++z) {
    std::size_t z0;
    double tz;
    coord(z, 2, z0, tz);
    const std::size_t z1 = std::min(z0 + 1, cd.n[2] - 1);
    for (std::size_t y = 0; y < fd.n[1]; ++y) {
      std::size_t y0;
      double ty;
      coord(y, 1, y0, ty);
      const std::size_t y1 = std::min(y0 + 1, cd.n[1] - 1);
      for (std::size_t x = 0; x < fd.n[0]; ++x) {
        std::size_t x0;
        double tx;
        coord(x, 0, x0, tx);
        const std::size_t x1 = std::min(x0 + 1, cd.n[0] - 1);
        auto at = [&](std::size_t xx, std::size_t yy, std::size_t zz) { return c[(zz * cd.n[1] + yy) * cd.n[0] + xx]; };
        const double c00 = at(x0, y0, z0) + tx * (at(x1, y0, z0) - at(x0, y0, z0));
        const double c10 = at(x0, y1, z0) + tx * (at(x1, y1, z0) - at(x0, y1, z0));
        const double c01 = at(x0, y0, z1) + tx * (at(x1, y0, z1) - at(x0, y0, z1));
        const double c11 = at(x0, y1, z1) + tx * (at(x1, y1, z1) - at(x0, y1, z1));
        const double c0 = c00 + ty * (c10 - c00), c1 = c01 + ty * (c11 - c01);
        out[(z * fd.n[1] + y) * fd.n[0] + x] = c0 + tz * (c1 - c0);
      }
    }
  }
  return out;
}

// Catmull-Rom value and derivative of a line at fractional position p (indices clamped).
inline void sample_line(const double* line, std::size_t stride, std::size_t n, double p, double& v, double& dv) {
  if (n == 1) {
    v = line[0];
    dv = 0.0;
    return;
  }
  p = std::clamp(p, 0.0, static_cast<double>(n - 1));
  const double fl = std::floor(p);
  const double t = p - fl, t2 = t * t, t3 = t2 * t;
  const double w[4] = {0.5 * (-t3 + 2 * t2 - t), 0.5 * (3 * t3 - 5 * t2 + 2), 0.5 * (-3 * t3 + 4 * t2 + t),
                       0.5 * (t3 - t2)};
  const double dw[4] = {0.5 * (-3 * t2 + 4 * t - 1), 0.5 * (9 * t2 - 10 * t), 0.5 * (-9 * t2 + 8 * t + 1),
                        0.5 * (3 * t2 - 2 * t)};
  v = 0.0;
  dv = 0.0;
  const long i0 = static_cast<long>(fl) - 1;
  for (int k = 0; k < 4; ++k) {
    const auto idx = static_cast<std::size_t>(std::clamp(i0 + k, 0L, static_cast<long>(n) - 1));
    v += w[k] * line[idx * stride];
    dv += dw[k] * line[idx * stride];
  }
}

// Index along `axis` of flat index i.
inline std::size_t axis_index(const Dims& d, std::size_t i, int axis) {
  if (axis == 0) return i % d.n[0];
  if (axis == 1) return (i / d.n[0]) % d.n[1];
  return i / (d.n[0] * d.n[1]);
}

// Central difference along the PE axis with clamped neighbours.
void central_diff(const std::vector<double>& u, const Dims& d, int axis, std::vector<double>& out) {
  const std::size_t s = d.stride(axis), n = d.n[axis];
  for (std::size_t i = 0; i < u.size(); ++i) {
    const std::size_t k = axis_index(d, i, axis);
    const double up = k + 1 < n ? u[i + s] : u[i];
    const double dn = k > 0 ? u[i - s] : u[i];
    out[i] = 0.5 * (up - dn);
  }
}

// Exact transpose of central_diff.
void central_diff_t(const std::vector<double>& v, const Dims& d, int axis, std::vector<double>& out) {
  std::fill(out.begin(), out.end(), 0.0);
  const std::size_t s = d.stride(axis), n = d.n[axis];
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t k = axis_index(d, i, axis);
    out[k + 1 < n ? i + s : i] += 0.5 * v[i];
    out[k > 0 ? i - s : i] -= 0.5 * v[i];
  }
}

// Neumann Laplacian (symmetric).
void laplacian(const std::vector<double>& u, const Dims& d, std::vector<double>& out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (int a = 0; a < 3; ++a) {
    if (d.n[a] < 2) continue;
    const std::size_t s = d.stride(a), n = d.n[a];
    for (std::size_t i = 0; i < u.size(); ++i) {
      const std::size_t k = axis_index(d, i, a);
      if (k + 1 < n) out[i] += u[i + s] - u[i];
      if (k > 0) out[i] += u[i - s] - u[i];
    }
  }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

struct Level {
  Dims dims;
  int axis;
  const std::vector<double>* f;
  const std::vector<double>* r;
  double lambda = 0.0;

  // Residual and linearization at field u (voxels).
  struct Lin {
    std::vector<double> res, a, b;
    double data = 0.0, reg = 0.0;
    double cost() const { return data + reg; }
  };

  Lin linearize(const std::vector<double>& u) const {
    const std::size_t n = dims.size(), s = dims.stride(axis), na = dims.n[axis];
    Lin l;
    l.res.resize(n);
    l.a.resize(n);
    l.b.resize(n);
    std::vector<double> du(n), lap(n);
    central_diff(u, dims, axis, du);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = axis_index(dims, i, axis);
      const std::size_t base = i - k * s;
      double fv, fd, rv, rd;
      sample_line(f->data() + base, s, na, static_cast<double>(k) + u[i], fv, fd);
      sample_line(r->data() + base, s, na, static_cast<double>(k) - u[i], rv, rd);
      l.res[i] = fv * (1.0 + du[i]) - rv * (1.0 - du[i]);
      l.a[i] = fd * (1.0 + du[i]) + rd * (1.0 - du[i]);
      l.b[i] = fv + rv;
      l.data += l.res[i] * l.res[i];
    }
    laplacian(u, dims, lap);
    l.reg = lambda * dot(lap, lap);
    return l;
  }

  // (J^T J + lambda L^2 + eps) x
  void normal_apply(const Lin& l, double eps, const std::vector<double>& x, std::vector<double>& out,
                    std::vector<double>& t1, std::vector<double>& t2) const {
    const std::size_t n = x.size();
    central_diff(x, dims, axis, t1);
    for (std::size_t i = 0; i < n; ++i) t1[i] = l.a[i] * x[i] + l.b[i] * t1[i];  // J x
    for (std::size_t i = 0; i < n; ++i) t2[i] = l.b[i] * t1[i];
    central_diff_t(t2, dims, axis, out);
    for (std::size_t i = 0; i < n; ++i) out[i] += l.a[i] * t1[i] + eps * x[i];
    laplacian(x, dims, t1);
    laplacian(t1, dims, t2);
    for (std::size_t i = 0; i < n; ++i) out[i] += lambda * t2[i];
  }
};

std::vector<double> mean_frame(const Volume& v) {
  const auto& h = v.header();
  const std::size_t nv = h.voxels_per_frame(), nt = h.nt();
  std::vector<double> m(nv, 0.0);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t i = 0; i < nv; ++i) m[i] += v.data()[t * nv + i];
  for (auto& x : m) x /= static_cast<double>(nt);
  return m;
}

}  // namespace

DisplacementField estimate_field(const Volume& pe_forward, const Volume& pe_reverse, int pe_axis,
                                 double readout_time, const FieldOptions& opt) {
  const auto& hf = pe_forward.header();
  const auto& hr = pe_reverse.header();
  if (pe_axis < 0 || pe_axis > 2) throw DistortionError("phase-encoding axis must be 0, 1 or 2");
  if (hf.nx() != hr.nx() || hf.ny() != hr.ny() || hf.nz() != hr.nz() || !hf.affine.isApprox(hr.affine, 1e-6))
    throw DistortionError("forward and reverse phase-encoding images are on different grids");

  const std::vector<double> f0 = mean_frame(pe_forward), r0 = mean_frame(pe_reverse);
  const double pf = percentile(f0, 98.0), pr = percentile(r0, 98.0);
  Dims full;
  full.n = {hf.nx(), hf.ny(), hf.nz()};

  // object support: union of both acquisitions above 10% of their robust maxima
  std::vector<bool> object(full.size());
  std::size_t nf = 0, nr = 0, both = 0;
  for (std::size_t i = 0; i < full.size(); ++i) {
    const bool a = pf > 0.0 && f0[i] > 0.1 * pf, b = pr > 0.0 && r0[i] > 0.1 * pr;
    nf += a;
    nr += b;
    both += a && b;
    object[i] = a || b;
  }
  if (nf == 0 || nr == 0 || both == 0)
    throw DistortionError("forward and reverse phase-encoding images share no content");

  DisplacementField out;
  out.pe_axis = pe_axis;
  out.readout_time = readout_time;

  std::vector<int> levels;
  for (int f : opt.levels)
    if (f >= 1 && (f == 1 || (full.n[pe_axis] + f - 1) / f >= 8)) levels.push_back(f);
  if (levels.empty() || levels.back() != 1) levels.push_back(1);

  std::vector<double> u;  // voxels at the current level
  Dims prev_dims;
  int prev_f = 0;
  for (int f : levels) {
    Dims d;
    std::vector<double> fl, rl;
    if (f == 1) {
      d = full;
      fl = f0;
      rl = r0;
    } else {
      fl = decimate(f0, full, f, d);
      rl = decimate(r0, full, f, d);
    }
    if (prev_f == 0) u.assign(d.size(), 0.0);
    else {
      u = upsample(u, prev_dims, prev_f, d, f);
      for (auto& x : u) x *= static_cast<double>(prev_f) / f;
    }

    Level lv{d, pe_axis, &fl, &rl};
    auto lin = lv.linearize(u);
    double curvature = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) curvature += lin.a[i] * lin.a[i] + 0.5 * lin.b[i] * lin.b[i];
    curvature /= static_cast<double>(d.size());
    if (!(curvature > 0.0)) break;
    lv.lambda = opt.lambda_scale * curvature;
    lin = lv.linearize(u);
    const double eps = 1e-8 * curvature;

    std::vector<double> best = u;
    double best_cost = lin.cost();
    int increases = 0;
    const std::size_t n = d.size();
    std::vector<double> rhs(n), x(n), rr(n), z(n), p(n), ap(n), t1(n), t2(n), precond(n);
    for (int it = 0; it < opt.max_gauss_newton; ++it) {
      ++out.iterations;
      // rhs = -(J^T r + lambda L^2 u)
      for (std::size_t i = 0; i < n; ++i) t1[i] = lin.b[i] * lin.res[i];
      central_diff_t(t1, d, pe_axis, rhs);
      for (std::size_t i = 0; i < n; ++i) rhs[i] += lin.a[i] * lin.res[i];
      laplacian(u, d, t1);
      laplacian(t1, d, t2);
      for (std::size_t i = 0; i < n; ++i) rhs[i] = -(rhs[i] + lv.lambda * t2[i]);
      for (std::size_t i = 0; i < n; ++i)
        precond[i] = 1.0 / (lin.a[i] * lin.a[i] + 0.5 * lin.b[i] * lin.b[i] + 42.0 * lv.lambda + eps);

      // preconditioned conjugate gradients from zero
      std::fill(x.begin(), x.end(), 0.0);
      rr = rhs;
      for (std::size_t i = 0; i < n; ++i) z[i] = precond[i] * rr[i];
      p = z;
      double rz = dot(rr, z);
      const double r0n = std::sqrt(dot(rr, rr));
      for (int k = 0; k < opt.max_cg && r0n > 0.0; ++k) {
        lv.normal_apply(lin, eps, p, ap, t1, t2);
        const double pap = dot(p, ap);
        if (!(pap > 0.0)) break;
        const double alpha = rz / pap;
        for (std::size_t i = 0; i < n; ++i) {
          x[i] += alpha * p[i];
          rr[i] -= alpha * ap[i];
        }
        if (std::sqrt(dot(rr, rr)) < 1e-6 * r0n) break;
        for (std::size_t i = 0; i < n; ++i) z[i] = precond[i] * rr[i];
        const double rz_new = dot(rr, z);
        const double beta = rz_new / rz;
        rz = rz_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
      }

      // damped update: halve the step until the cost decreases
      const double before = lin.cost();
      std::vector<double> trial(n);
      bool improved = false;
      decltype(lin) trial_lin;
      for (double step = 1.0; step >= 1.0 / 16.0; step *= 0.5) {
        for (std::size_t i = 0; i < n; ++i) trial[i] = u[i] + step * x[i];
        trial_lin = lv.linearize(trial);
        if (trial_lin.cost() < before) {
          improved = true;
          break;
        }
      }
      u = trial;
      lin = std::move(trial_lin);
      if (lin.cost() < best_cost) {
        best_cost = lin.cost();
        best = u;
      }
      if (!improved) {
        if (++increases >= 2) {
          out.warnings.push_back("field estimation diverged at decimation " + std::to_string(f) +
                                 "; best iterate returned");
          break;
        }
        continue;
      }
      increases = 0;
      if ((before - lin.cost()) < opt.tolerance * before) break;
    }
    u = best;
    prev_dims = d;
    prev_f = f;
  }

  // back to the full grid in mm, zero outside the dilated object bounding box
  VolumeHeader fh = hf.spatial();
  fh.datatype = Datatype::Float32;
  out.field_mm = Volume(fh);
  const double vox = hf.voxel_size[pe_axis];
  std::array<std::size_t, 3> lo{full.n[0], full.n[1], full.n[2]}, hi{0, 0, 0};
  for (std::size_t i = 0; i < full.size(); ++i) {
    if (!object[i]) continue;
    for (int a = 0; a < 3; ++a) {
      const std::size_t k = axis_index(full, i, a);
      lo[a] = std::min(lo[a], k);
      hi[a] = std::max(hi[a], k);
    }
  }
  for (int a = 0; a < 3; ++a) {
    lo[a] = lo[a] >= 2 ? lo[a] - 2 : 0;
    hi[a] = std::min(hi[a] + 2, full.n[a] - 1);
  }
  for (std::size_t i = 0; i < full.size(); ++i) {
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const std::size_t k = axis_index(full, i, a);
      inside = inside && k >= lo[a] && k <= hi[a];
    }
    out.field_mm.data()[i] = inside ? u[i] * vox : 0.0;
  }
  return out;
}

Volume apply_field(const Volume& epi, const DisplacementField& field, Polarity polarity, std::optional<int> epi_pe_axis) {
  if (epi_pe_axis && *epi_pe_axis != field.pe_axis)
    throw DistortionError("phase-encoding axis of the EPI (" + std::to_string(*epi_pe_axis) +
                          ") does not match the field (" + std::to_string(field.pe_axis) + ")");
  const auto& h = epi.header();
  const auto& fh = field.field_mm.header();
  Volume fmm = field.field_mm;
  if (fh.nx() != h.nx() || fh.ny() != h.ny() || fh.nz() != h.nz() || !fh.affine.isApprox(h.affine, 1e-6))
    fmm = resample(field.field_mm, AffineTransform::identity(), h.spatial(), Interpolation::Trilinear);

  Dims d;
  d.n = {h.nx(), h.ny(), h.nz()};
  const int axis = field.pe_axis;
  const double sign = polarity == Polarity::Forward ? 1.0 : -1.0;
  const double vox = h.voxel_size[axis];
  std::vector<double> u(d.size()), du(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) u[i] = sign * fmm.data()[i] / vox;
  central_diff(u, d, axis, du);

  Volume out(h);
  const std::size_t s = d.stride(axis), na = d.n[axis], nv = d.size();
  for (std::size_t t = 0; t < h.nt(); ++t) {
    const double* src = epi.data().data() + t * nv;
    double* dst = out.data().data() + t * nv;
    for (std::size_t i = 0; i < nv; ++i) {
      if (u[i] == 0.0 && du[i] == 0.0) {
        dst[i] = src[i];
        continue;
      }
      const std::size_t k = axis_index(d, i, axis);
      double v, dv;
      sample_line(src + (i - k * s), s, na, static_cast<double>(k) + u[i], v, dv);
      dst[i] = v * (1.0 + du[i]);
    }
  }
  return out;
}

void write_acqparams(const SidecarMeta& fwd, const SidecarMeta& rev, const std::filesystem::path& out,
                     const std::string& fwd_name, const std::string& rev_name) {
  auto check = [](const SidecarMeta& m, const std::string& name) {
    if (!m.phase_encoding) throw DistortionError(name + ": missing PhaseEncodingDirection");
    if (!m.total_readout_time) throw DistortionError(name + ": missing TotalReadoutTime");
  };
  check(fwd, fwd_name);
  check(rev, rev_name);
  if (fwd.phase_encoding->axis != rev.phase_encoding->axis || fwd.phase_encoding->sign == rev.phase_encoding->sign)
    throw DistortionError(fwd_name + " (" + fwd.phase_encoding->token() + ") and " + rev_name + " (" +
                          rev.phase_encoding->token() + ") are not a reversed pair");
  std::ofstream f(out);
  if (!f) throw IoError(out.string() + ": cannot open for writing");
  for (const SidecarMeta* m : {&fwd, &rev}) {
    int v[3] = {0, 0, 0};
    v[m->phase_encoding->axis] = m->phase_encoding->sign;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%d %d %d %.10g\n", v[0], v[1], v[2], *m->total_readout_time);
    f << buf;
  }
}

void write_acqparams(const std::filesystem::path& forward_sidecar, const std::filesystem::path& reverse_sidecar,
                     const std::filesystem::path& out) {
  write_acqparams(parse_sidecar(forward_sidecar), parse_sidecar(reverse_sidecar), out, forward_sidecar.string(),
                  reverse_sidecar.string());
}

}  // namespace neors
