#include "neors/registration.hpp"

#include "neors/image_ops.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace neors {

// ---------------------------------------------------------------------------
// Transform algebra

Eigen::Matrix3d euler_xyz(const Eigen::Vector3d& a) {
  const double ca = std::cos(a.x()), sa = std::sin(a.x());
  const double cb = std::cos(a.y()), sb = std::sin(a.y());
  const double cc = std::cos(a.z()), sc = std::sin(a.z());
  Eigen::Matrix3d rx, ry, rz;
  rx << 1, 0, 0, 0, ca, -sa, 0, sa, ca;
  ry << cb, 0, sb, 0, 1, 0, -sb, 0, cb;
  rz << cc, -sc, 0, sc, cc, 0, 0, 0, 1;
  return rx * ry * rz;
}

AffineTransform::AffineTransform(AffineParams params, Dof dof, Eigen::Vector3d pivot)
    : params_(params), dof_(dof), pivot_(std::move(pivot)) {
  if (dof_ == Dof::Rigid) {
    for (int i = 6; i < 9; ++i) params_.v[i] = 1.0;
    for (int i = 9; i < 12; ++i) params_.v[i] = 0.0;
  }
}

AffineTransform AffineTransform::identity(Dof dof, Eigen::Vector3d pivot) {
  return AffineTransform(AffineParams{}, dof, std::move(pivot));
}

AffineTransform AffineTransform::rigid(const Eigen::Vector3d& t, const Eigen::Vector3d& r,
                                       Eigen::Vector3d pivot) {
  AffineParams p;
  for (int i = 0; i < 3; ++i) {
    p.v[i] = t[i];
    p.v[3 + i] = r[i];
  }
  return AffineTransform(p, Dof::Rigid, std::move(pivot));
}

Eigen::Matrix4d AffineTransform::matrix() const {
  const auto& v = params_.v;
  Eigen::Matrix3d u;
  u << v[6], v[6] * v[9], v[6] * v[10], 0, v[7], v[7] * v[11], 0, 0, v[8];
  const Eigen::Matrix3d lin = euler_xyz(params_.rotation()) * u;
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 3>(0, 0) = lin;
  m.block<3, 1>(0, 3) = -lin * pivot_ + pivot_ + params_.translation();
  return m;
}

AffineTransform AffineTransform::from_matrix(const Eigen::Matrix4d& m, Dof dof,
                                             Eigen::Vector3d pivot) {
  const Eigen::Matrix3d lin = m.block<3, 3>(0, 0);
  if (!(lin.determinant() > 0.0))
    throw std::invalid_argument("transform matrix must have positive determinant");
  Eigen::HouseholderQR<Eigen::Matrix3d> qr(lin);
  Eigen::Matrix3d q = qr.householderQ();
  Eigen::Matrix3d r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int i = 0; i < 3; ++i) {
    if (r(i, i) < 0.0) {
      r.row(i) = -r.row(i);
      q.col(i) = -q.col(i);
    }
  }
  AffineParams p;
  p.v[6] = r(0, 0);
  p.v[7] = r(1, 1);
  p.v[8] = r(2, 2);
  p.v[9] = r(0, 1) / r(0, 0);
  p.v[10] = r(0, 2) / r(0, 0);
  p.v[11] = r(1, 2) / r(1, 1);
  if (dof == Dof::Rigid) {
    const double dev = std::abs(p.v[6] - 1) + std::abs(p.v[7] - 1) + std::abs(p.v[8] - 1) +
                       std::abs(p.v[9]) + std::abs(p.v[10]) + std::abs(p.v[11]);
    if (dev > 1e-6) throw std::invalid_argument("matrix is not rigid");
  }
  p.v[4] = std::asin(std::clamp(q(0, 2), -1.0, 1.0));
  p.v[5] = std::atan2(-q(0, 1), q(0, 0));
  p.v[3] = std::atan2(-q(1, 2), q(2, 2));
  const Eigen::Vector3d t = m.block<3, 1>(0, 3) + lin * pivot - pivot;
  for (int i = 0; i < 3; ++i) p.v[i] = t[i];
  return AffineTransform(p, dof, std::move(pivot));
}

AffineTransform AffineTransform::inverse() const {
  return from_matrix(matrix().inverse(), dof_, pivot_);
}

AffineTransform AffineTransform::compose(const AffineTransform& first) const {
  const Dof d = (dof_ == Dof::Rigid && first.dof_ == Dof::Rigid) ? Dof::Rigid : Dof::Affine;
  return from_matrix(matrix() * first.matrix(), d, pivot_);
}

Eigen::Vector3d AffineTransform::apply(const Eigen::Vector3d& x) const {
  return (matrix() * x.homogeneous()).head<3>();
}

AffineTransform AffineTransform::with_pivot(const Eigen::Vector3d& pivot) const {
  return from_matrix(matrix(), dof_, pivot);
}

// ---------------------------------------------------------------------------
// Interpolation

double hann_sinc(double x, int radius) {
  const double ax = std::abs(x);
  if (ax >= radius) return 0.0;
  if (ax < 1e-12) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px * 0.5 * (1.0 + std::cos(std::numbers::pi * x / radius));
}

namespace {

constexpr double kEdgeTol = 1e-6;
constexpr int kSincRadius = 7;

struct AxisTaps {
  int first = 0;
  int count = 0;
  std::array<double, 2 * kSincRadius> w{};
  std::array<int, 2 * kSincRadius> idx{};
};

// Returns false when p lies outside [0, n-1].
bool axis_taps(double p, int n, Interpolation interp, AxisTaps& taps) {
  if (p < -kEdgeTol || p > n - 1 + kEdgeTol) return false;
  p = std::clamp(p, 0.0, static_cast<double>(n - 1));
  switch (interp) {
    case Interpolation::Nearest: {
      taps.count = 1;
      taps.idx[0] = static_cast<int>(std::lround(p));
      taps.w[0] = 1.0;
      return true;
    }
    case Interpolation::Trilinear: {
      const int i0 = std::min(static_cast<int>(std::floor(p)), n - 1);
      const double f = p - i0;
      if (f == 0.0 || i0 + 1 >= n) {
        taps.count = 1;
        taps.idx[0] = i0;
        taps.w[0] = 1.0;
      } else {
        taps.count = 2;
        taps.idx[0] = i0;
        taps.idx[1] = i0 + 1;
        taps.w[0] = 1.0 - f;
        taps.w[1] = f;
      }
      return true;
    }
    case Interpolation::Sinc: {
      const double fl = std::floor(p);
      if (std::abs(p - std::round(p)) < 1e-9) {
        taps.count = 1;
        taps.idx[0] = static_cast<int>(std::lround(p));
        taps.w[0] = 1.0;
        return true;
      }
      const int base = static_cast<int>(fl);
      double sum = 0.0;
      taps.count = 0;
      for (int i = base - kSincRadius + 1; i <= base + kSincRadius; ++i) {
        const double w = hann_sinc(p - i, kSincRadius);
        taps.idx[taps.count] = std::clamp(i, 0, n - 1);
        taps.w[taps.count] = w;
        sum += w;
        ++taps.count;
      }
      for (int k = 0; k < taps.count; ++k) taps.w[k] /= sum;
      return true;
    }
  }
  return false;
}

double apply_taps(const double* frame, std::size_t nx, std::size_t nxy, const AxisTaps& tx,
                  const AxisTaps& ty, const AxisTaps& tz) {
  double acc = 0.0;
  for (int c = 0; c < tz.count; ++c) {
    const double* plane = frame + static_cast<std::size_t>(tz.idx[c]) * nxy;
    double accy = 0.0;
    for (int b = 0; b < ty.count; ++b) {
      const double* row = plane + static_cast<std::size_t>(ty.idx[b]) * nx;
      double accx = 0.0;
      for (int a = 0; a < tx.count; ++a) accx += tx.w[a] * row[tx.idx[a]];
      accy += ty.w[b] * accx;
    }
    acc += tz.w[c] * accy;
  }
  return acc;
}

}  // namespace

double sample(const Volume& v, const Eigen::Vector3d& p, Interpolation interp, std::size_t frame) {
  const auto& h = v.header();
  AxisTaps tx, ty, tz;
  if (!axis_taps(p.x(), static_cast<int>(h.nx()), interp, tx) ||
      !axis_taps(p.y(), static_cast<int>(h.ny()), interp, ty) ||
      !axis_taps(p.z(), static_cast<int>(h.nz()), interp, tz))
    return 0.0;
  const double* base = v.data().data() + frame * h.voxels_per_frame();
  return apply_taps(base, h.nx(), h.nx() * h.ny(), tx, ty, tz);
}

Volume resample(const Volume& v, const AffineTransform& t, const VolumeHeader& target_grid,
                Interpolation interp) {
  VolumeHeader out_h = target_grid;
  out_h.validate();
  const auto& src = v.header();
  out_h.dims[3] = src.nt();
  out_h.tr_seconds = src.tr_seconds;
  out_h.datatype = Datatype::Float64;
  Volume out(out_h);

  // target voxel -> source voxel
  const Eigen::Matrix4d g = src.affine.inverse() * t.matrix().inverse() * target_grid.affine;
  const std::size_t n_out = out_h.voxels_per_frame();
  const std::size_t n_src = src.voxels_per_frame();
  const std::size_t nx = src.nx(), nxy = src.nx() * src.ny();
  AxisTaps tx, ty, tz;
  for (std::size_t z = 0; z < out_h.nz(); ++z)
    for (std::size_t y = 0; y < out_h.ny(); ++y)
      for (std::size_t x = 0; x < out_h.nx(); ++x) {
        const Eigen::Vector3d p =
            (g * Eigen::Vector4d(static_cast<double>(x), static_cast<double>(y), static_cast<double>(z), 1.0))
                .head<3>();
        if (!axis_taps(p.x(), static_cast<int>(src.nx()), interp, tx) ||
            !axis_taps(p.y(), static_cast<int>(src.ny()), interp, ty) ||
            !axis_taps(p.z(), static_cast<int>(src.nz()), interp, tz))
          continue;
        const std::size_t o = (z * out_h.ny() + y) * out_h.nx() + x;
        for (std::size_t f = 0; f < src.nt(); ++f)
          out.data()[f * n_out + o] = apply_taps(v.data().data() + f * n_src, nx, nxy, tx, ty, tz);
      }
  return out;
}

// ---------------------------------------------------------------------------
// Cost function

namespace {

// Cubic B-spline weights for fractional offset t in [0, 1).
inline void bspline_weights(double t, double w[4]) {
  const double t2 = t * t, t3 = t2 * t, u = 1.0 - t;
  w[0] = u * u * u / 6.0;
  w[1] = (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0;
  w[2] = (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0;
  w[3] = t3 / 6.0;
}

// In-place interpolating cubic B-spline prefilter of one line (mirror boundaries).
void bspline_prefilter_line(double* c, std::size_t n, std::size_t stride) {
  if (n < 2) return;
  const double z = std::sqrt(3.0) - 2.0;
  for (std::size_t k = 0; k < n; ++k) c[k * stride] *= 6.0;
  double sum = c[0], zk = z;
  const std::size_t horizon = std::min<std::size_t>(n, 30);
  for (std::size_t k = 1; k < horizon; ++k, zk *= z) sum += zk * c[k * stride];
  c[0] = sum;
  for (std::size_t k = 1; k < n; ++k) c[k * stride] += z * c[(k - 1) * stride];
  c[(n - 1) * stride] = z / (z * z - 1.0) * (c[(n - 1) * stride] + z * c[(n - 2) * stride]);
  for (std::size_t k = n - 1; k-- > 0;) c[k * stride] = z * (c[(k + 1) * stride] - c[k * stride]);
}

std::vector<double> bspline_coefficients(const Volume& v) {
  const auto& h = v.header();
  const std::size_t nx = h.nx(), ny = h.ny(), nz = h.nz();
  std::vector<double> c(v.data().begin(), v.data().begin() + static_cast<std::ptrdiff_t>(nx * ny * nz));
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t y = 0; y < ny; ++y) bspline_prefilter_line(&c[(z * ny + y) * nx], nx, 1);
  for (std::size_t z = 0; z < nz; ++z)
    for (std::size_t x = 0; x < nx; ++x) bspline_prefilter_line(&c[z * ny * nx + x], ny, nx);
  for (std::size_t y = 0; y < ny; ++y)
    for (std::size_t x = 0; x < nx; ++x) bspline_prefilter_line(&c[y * nx + x], nz, nx * ny);
  return c;
}

inline std::size_t mirror(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i = std::abs(i) % period;
  return static_cast<std::size_t>(i >= n ? period - i : i);
}

double cubic_at(const double* d, std::size_t nx, std::size_t ny, std::size_t nz, const Eigen::Vector3d& p) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  double wx[4], wy[4], wz[4];
  bspline_weights(p.x() - fx, wx);
  bspline_weights(p.y() - fy, wy);
  bspline_weights(p.z() - fz, wz);
  std::size_t ix[4], iy[4], iz[4];
  for (int k = 0; k < 4; ++k) {
    ix[k] = mirror(static_cast<long>(fx) - 1 + k, static_cast<long>(nx));
    iy[k] = mirror(static_cast<long>(fy) - 1 + k, static_cast<long>(ny)) * nx;
    iz[k] = mirror(static_cast<long>(fz) - 1 + k, static_cast<long>(nz)) * nx * ny;
  }
  double acc = 0.0;
  for (int c = 0; c < 4; ++c) {
    double accy = 0.0;
    for (int b = 0; b < 4; ++b) {
      const double* row = d + iz[c] + iy[b];
      accy += wy[b] * (wx[0] * row[ix[0]] + wx[1] * row[ix[1]] + wx[2] * row[ix[2]] + wx[3] * row[ix[3]]);
    }
    acc += wz[c] * accy;
  }
  return acc;
}

class CorrelationRatio {
 public:
  CorrelationRatio(const Volume& moving, const Volume& fixed_level, int bins, double threshold,
                   CostFunction kind = CostFunction::CorrelationRatio, bool cubic = false)
      : moving_(moving), fixed_(fixed_level), bins_(bins), threshold_(threshold), kind_(kind), cubic_(cubic) {
    if (cubic_) coeffs_ = bspline_coefficients(moving_);
    const auto& d = fixed_.data();
    const auto [lo, hi] = std::minmax_element(d.begin(), d.end());
    lo_ = *lo;
    const double range = *hi - *lo;
    scale_ = range > 0.0 ? bins_ / range : 0.0;
    bin_of_.resize(d.size());
    for (std::size_t i = 0; i < d.size(); ++i)
      bin_of_[i] = std::min(bins_ - 1, static_cast<int>((d[i] - lo_) * scale_));
    moving_to_voxel_ = moving_.header().affine.inverse();
  }

  /// Returns cost and number of contributing samples.
  std::pair<double, std::size_t> operator()(const Eigen::Matrix4d& moving_to_fixed) const {
    const auto& fh = fixed_.header();
    const auto& mh = moving_.header();
    const Eigen::Matrix4d g = moving_to_voxel_ * moving_to_fixed.inverse() * fh.affine;
    const Eigen::Vector3d dx = g.block<3, 1>(0, 0);
    std::vector<double> n(bins_, 0.0), s(bins_, 0.0), ss(bins_, 0.0);
    double nc_n = 0.0, nc_f = 0.0, nc_m = 0.0, nc_ff = 0.0, nc_mm = 0.0, nc_fm = 0.0;
    const auto mx = static_cast<double>(mh.nx() - 1), my = static_cast<double>(mh.ny() - 1),
               mz = static_cast<double>(mh.nz() - 1);
    const std::size_t snx = mh.nx(), snxy = mh.nx() * mh.ny();
    const double* md = moving_.data().data();
    std::size_t idx = 0;
    for (std::size_t z = 0; z < fh.nz(); ++z)
      for (std::size_t y = 0; y < fh.ny(); ++y) {
        Eigen::Vector3d p =
            (g * Eigen::Vector4d(0.0, static_cast<double>(y), static_cast<double>(z), 1.0)).head<3>();
        for (std::size_t x = 0; x < fh.nx(); ++x, ++idx, p += dx) {
          if (p.x() < 0.0 || p.y() < 0.0 || p.z() < 0.0 || p.x() > mx || p.y() > my || p.z() > mz) continue;
          double val;
          if (cubic_) {
            val = cubic_at(coeffs_.data(), snx, mh.ny(), mh.nz(), p);
          } else {
          const auto ix = std::min(static_cast<std::size_t>(p.x()), snx - 2 + (snx == 1));
          const auto iy = std::min(static_cast<std::size_t>(p.y()), mh.ny() - 2 + (mh.ny() == 1));
          const auto iz = std::min(static_cast<std::size_t>(p.z()), mh.nz() - 2 + (mh.nz() == 1));
          const double fx = p.x() - ix, fy = p.y() - iy, fz = p.z() - iz;
          const double* c = md + iz * snxy + iy * snx + ix;
          const double c00 = c[0] + fx * (c[1] - c[0]);
          const double c10 = c[snx] + fx * (c[snx + 1] - c[snx]);
          const double c01 = c[snxy] + fx * (c[snxy + 1] - c[snxy]);
          const double c11 = c[snxy + snx] + fx * (c[snxy + snx + 1] - c[snxy + snx]);
          const double c0 = c00 + fy * (c10 - c00);
          const double c1 = c01 + fy * (c11 - c01);
          val = c0 + fz * (c1 - c0);
          }
          if (val <= threshold_) continue;
          if (kind_ == CostFunction::NormalizedCorrelation) {
            const double fv = fixed_.data()[idx];
            nc_n += 1.0;
            nc_f += fv;
            nc_m += val;
            nc_ff += fv * fv;
            nc_mm += val * val;
            nc_fm += fv * val;
            continue;
          }
          const int b = bin_of_[idx];
          n[b] += 1.0;
          s[b] += val;
          ss[b] += val * val;
        }
      }
    if (kind_ == CostFunction::NormalizedCorrelation) {
      if (nc_n < 32.0) return {1.0, static_cast<std::size_t>(nc_n)};
      const double vf = nc_ff - nc_f * nc_f / nc_n, vm = nc_mm - nc_m * nc_m / nc_n;
      if (vf <= 0.0 || vm <= 0.0) return {1.0, static_cast<std::size_t>(nc_n)};
      const double r = (nc_fm - nc_f * nc_m / nc_n) / std::sqrt(vf * vm);
      return {std::clamp(1.0 - r, 0.0, 2.0), static_cast<std::size_t>(nc_n)};
    }
    double total_n = 0.0, total_s = 0.0, total_ss = 0.0, within = 0.0;
    for (int b = 0; b < bins_; ++b) {
      if (n[b] == 0.0) continue;
      total_n += n[b];
      total_s += s[b];
      total_ss += ss[b];
      within += ss[b] - s[b] * s[b] / n[b];
    }
    const double total = total_ss - total_s * total_s / std::max(total_n, 1.0);
    if (total_n < 32.0 || total <= 0.0) return {1.0, static_cast<std::size_t>(total_n)};
    return {std::clamp(within / total, 0.0, 1.0), static_cast<std::size_t>(total_n)};
  }

 private:
  const Volume& moving_;
  const Volume& fixed_;
  int bins_;
  double threshold_;
  CostFunction kind_;
  bool cubic_;
  std::vector<double> coeffs_;
  double lo_ = 0.0, scale_ = 0.0;
  std::vector<int> bin_of_;
  Eigen::Matrix4d moving_to_voxel_;
};

double background_threshold(const Volume& moving, double fraction) {
  std::vector<double> vals(moving.data().begin(),
                           moving.data().begin() + static_cast<std::ptrdiff_t>(moving.header().voxels_per_frame()));
  return fraction * percentile(vals, 98.0);
}

std::array<double, 3> level_sigma_voxels(const VolumeHeader& h, double spacing) {
  std::array<double, 3> s{};
  for (int i = 0; i < 3; ++i) {
    const double v = h.voxel_size[i];
    const double fwhm = std::sqrt(std::max(spacing * spacing - v * v, 0.0));
    s[i] = fwhm / (2.0 * std::sqrt(2.0 * std::log(2.0))) / v;
  }
  return s;
}

VolumeHeader level_grid(const VolumeHeader& h, double spacing) {
  VolumeHeader g = h.spatial();
  for (int i = 0; i < 3; ++i) {
    const double factor = spacing / h.voxel_size[i];
    if (factor <= 1.0) continue;
    const double extent = static_cast<double>(h.dims[i] - 1) * h.voxel_size[i];
    g.dims[i] = static_cast<std::size_t>(std::floor(extent / spacing)) + 1;
    g.voxel_size[i] = spacing;
    g.affine.col(i) *= factor;
  }
  return g;
}

// Minimizes f on the bracket a < b < c (f(b) <= f(a), f(c)) to absolute tolerance tol.
std::pair<double, double> brent_minimize(const std::function<double(double)>& f, double a, double b,
                                         double c, double fb, double tol, int max_iter = 60) {
  constexpr double golden = 0.3819660112501051;
  double lo = std::min(a, c), hi = std::max(a, c);
  double x = b, w = b, v = b, fx = fb, fw = fb, fv = fb;
  double d = 0.0, e = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double tol1 = tol * 0.5 + 1e-12;
    const double tol2 = 2.0 * tol1;
    if (std::abs(x - mid) <= tol2 - 0.5 * (hi - lo)) break;
    bool golden_step = true;
    if (std::abs(e) > tol1) {
      double r = (x - w) * (fx - fv);
      double q = (x - v) * (fx - fw);
      double p = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      q = std::abs(q);
      const double etemp = e;
      e = d;
      if (!(std::abs(p) >= std::abs(0.5 * q * etemp) || p <= q * (lo - x) || p >= q * (hi - x))) {
        d = p / q;
        const double u = x + d;
        if (u - lo < tol2 || hi - u < tol2) d = mid - x >= 0 ? tol1 : -tol1;
        golden_step = false;
      }
    }
    if (golden_step) {
      e = x >= mid ? lo - x : hi - x;
      d = golden * e;
    }
    const double u = std::abs(d) >= tol1 ? x + d : x + (d >= 0 ? tol1 : -tol1);
    const double fu = f(u);
    if (fu <= fx) {
      if (u >= x) lo = x; else hi = x;
      v = w; fv = fw;
      w = x; fw = fx;
      x = u; fx = fu;
    } else {
      if (u < x) lo = u; else hi = u;
      if (fu <= fw || w == x) {
        v = w; fv = fw;
        w = u; fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u; fv = fu;
      }
    }
  }
  return {x, fx};
}

}  // namespace

double correlation_ratio_cost(const Volume& moving, const Volume& fixed, const AffineTransform& t,
                              int bins, double background_fraction) {
  CorrelationRatio cr(moving, fixed, bins, background_threshold(moving, background_fraction));
  return cr(t.matrix()).first;
}

RegistrationResult register_images(const Volume& moving, const Volume& fixed, Dof dof) {
  RegistrationOptions o;
  o.dof = dof;
  return register_images(moving, fixed, o);
}

RegistrationResult register_images(const Volume& moving_in, const Volume& fixed_in,
                                   const RegistrationOptions& opt) {
  const Volume moving = moving_in.header().is_4d() ? moving_in.frame(0) : moving_in;
  const Volume fixed = fixed_in.header().is_4d() ? fixed_in.frame(0) : fixed_in;
  moving.header().validate();
  fixed.header().validate();

  std::vector<double> levels = opt.level_spacing_mm;
  if (levels.empty()) {
    const double b = *std::max_element(fixed.header().voxel_size.begin(), fixed.header().voxel_size.end());
    if (b <= 1.5) levels = {8.0, 4.0, 2.0};
    else levels = {2.0 * b, 4.0 * b / 3.0, b};
  }

  const Eigen::Vector3d pivot = center_of_mass(fixed);
  AffineTransform current;
  if (opt.initial) {
    current = AffineTransform::from_matrix(opt.initial->matrix(), opt.dof, pivot);
  } else {
    AffineParams p;
    const Eigen::Vector3d t = pivot - center_of_mass(moving);
    for (int i = 0; i < 3; ++i) p.v[i] = t[i];
    current = AffineTransform(p, opt.dof, pivot);
  }
  const double threshold = background_threshold(moving, opt.background_fraction);
  const int nparams = opt.dof == Dof::Rigid ? 6 : 12;

  RegistrationResult result;
  result.transform = current;
  const double finest = levels.back();

  for (std::size_t li = 0; li < levels.size(); ++li) {
    const double spacing = levels[li];
    const VolumeHeader grid = level_grid(fixed.header(), spacing);
    Volume fixed_level = opt.smooth ? gaussian_smooth(fixed, level_sigma_voxels(fixed.header(), spacing)) : fixed;
    if (grid.dims != fixed.header().dims || grid.affine != fixed.header().affine)
      fixed_level = resample(fixed_level, AffineTransform::identity(), grid, Interpolation::Trilinear);
    const Volume moving_level =
        opt.smooth ? gaussian_smooth(moving, level_sigma_voxels(moving.header(), spacing)) : moving;
    CorrelationRatio cost(moving_level, fixed_level, opt.bins, threshold, opt.cost, opt.cubic_sampling);

    AffineParams params = current.params();
    auto evaluate = [&](const AffineParams& p) {
      for (int i = 6; i < 9; ++i)
        if (p.v[i] < 0.2 || p.v[i] > 5.0) return 1.0;
      return cost(AffineTransform(p, opt.dof, pivot).matrix()).first;
    };
    const auto [c0, samples] = cost(AffineTransform(params, opt.dof, pivot).matrix());
    if (li == 0 && samples < 32)
      throw RegistrationError("registration: moving and fixed volumes do not overlap");
    double fcur = c0;
    result.cost_history.push_back(fcur);

    const double level_tol = opt.tolerance * spacing / finest;
    std::array<double, 12> init_step{};
    for (int i = 0; i < 12; ++i) init_step[i] = i < 3 ? spacing : spacing / 50.0;
    std::array<double, 12> step = init_step;

    bool converged = false;
    for (int iter = 0; iter < opt.max_iterations; ++iter) {
      double max_change = 0.0;
      for (int i = 0; i < nparams; ++i) {
        const double origin = params.v[i];
        auto f = [&](double alpha) {
          AffineParams p = params;
          p.v[i] = origin + alpha;
          return evaluate(p);
        };
        const double h = step[i];
        double a, b, c, fb;
        const double fp = f(h);
        if (fp < fcur) {
          a = 0.0; b = h; fb = fp;
          c = b + 1.618 * (b - a);
          double fc = f(c);
          for (int k = 0; k < 20 && fc < fb; ++k) {
            a = b; b = c; fb = fc;
            c = b + 1.618 * (b - a);
            fc = f(c);
          }
        } else {
          const double fm = f(-h);
          if (fm < fcur) {
            a = 0.0; b = -h; fb = fm;
            c = b + 1.618 * (b - a);
            double fc = f(c);
            for (int k = 0; k < 20 && fc < fb; ++k) {
              a = b; b = c; fb = fc;
              c = b + 1.618 * (b - a);
              fc = f(c);
            }
          } else {
            a = -h; b = 0.0; c = h; fb = fcur;
          }
        }
        const double param_tol = level_tol;
        const auto [xmin, fmin] = brent_minimize(f, a, b, c, fb, param_tol);
        if (fmin < fcur) {
          params.v[i] = origin + xmin;
          fcur = fmin;
          result.cost_history.push_back(fcur);
          max_change = std::max(max_change, std::abs(xmin));
          step[i] = std::clamp(2.0 * std::abs(xmin), 20.0 * param_tol, init_step[i]);
        } else {
          step[i] = std::max(0.5 * step[i], 20.0 * param_tol);
        }
      }
      if (max_change < level_tol) {
        converged = true;
        break;
      }
    }
    current = AffineTransform(params, opt.dof, pivot);
    result.final_cost = fcur;
    result.converged = converged;
    result.pyramid_levels_used = static_cast<int>(li + 1);
  }
  result.transform = current;
  return result;
}

TemplateAlignment register_t2_to_template(const Volume& t2, const Volume& template_1mm,
                                          const Volume& template_3mm) {
  TemplateAlignment out;
  out.registration = register_images(t2, template_1mm, Dof::Affine);
  out.aligned_1mm = resample(t2, out.registration.transform, template_1mm.header().spatial(),
                             Interpolation::Trilinear);
  out.aligned_3mm = resample(t2, out.registration.transform, template_3mm.header().spatial(),
                             Interpolation::Trilinear);
  return out;
}

RegistrationResult register_epi_to_template(const Volume& mean_epi, const Volume& template_3mm) {
  return register_images(mean_epi, template_3mm, Dof::Affine);
}

void save_transform(const RegistrationResult& r, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  const Eigen::Matrix4d m = r.transform.matrix();
  f << std::setprecision(17);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) f << (j ? " " : "") << m(i, j);
    f << "\n";
  }
  nlohmann::json j;
  j["dof"] = static_cast<int>(r.transform.dof());
  j["pivot"] = {r.transform.pivot().x(), r.transform.pivot().y(), r.transform.pivot().z()};
  j["cost"] = r.final_cost;
  j["converged"] = r.converged;
  j["pyramid_levels"] = r.pyramid_levels_used;
  j["params"] = r.transform.params().v;
  std::ofstream js(path.string() + ".json");
  js << j.dump(2) << "\n";
}

AffineTransform load_transform(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open");
  Eigen::Matrix4d m;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (!(f >> m(i, j))) throw IoError(path.string() + ": malformed 4x4 matrix");
  Dof dof = Dof::Affine;
  Eigen::Vector3d pivot = Eigen::Vector3d::Zero();
  std::ifstream js(path.string() + ".json");
  if (js) {
    const auto j = nlohmann::json::parse(js);
    dof = j.at("dof").get<int>() == 6 ? Dof::Rigid : Dof::Affine;
    const auto p = j.at("pivot").get<std::array<double, 3>>();
    pivot = {p[0], p[1], p[2]};
  }
  return AffineTransform::from_matrix(m, dof, pivot);
}

}  // namespace neors
