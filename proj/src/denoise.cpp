#include "neors/denoise.hpp"

#include "neors/image_ops.hpp"

#include <Eigen/QR>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace neors {

namespace {

bool same_grid(const VolumeHeader& a, const VolumeHeader& b) {
  return a.nx() == b.nx() && a.ny() == b.ny() && a.nz() == b.nz() && a.affine.isApprox(b.affine, 1e-6);
}

std::vector<double> mask_mean(const Volume& epi, const Volume& mask, const char* name) {
  if (!same_grid(epi.header(), mask.header()))
    throw DenoiseError(std::string(name) + " mask grid does not match the functional data");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.data().size(); ++i)
    if (mask.data()[i] != 0.0) idx.push_back(i);
  if (idx.empty()) throw DenoiseError(std::string(name) + " mask is empty");
  const std::size_t nv = epi.header().voxels_per_frame();
  std::vector<double> out(epi.header().nt());
  for (std::size_t t = 0; t < out.size(); ++t) {
    double s = 0.0;
    for (std::size_t i : idx) s += epi.data()[t * nv + i];
    out[t] = s / static_cast<double>(idx.size());
  }
  return out;
}

// Number of k > 0 on the DFT grid and whether each is in band.
template <class F>
void for_each_frequency(const BandSpec& b, F&& f) {
  for (std::size_t k = 1; k <= b.n_frames / 2; ++k) {
    const double freq = static_cast<double>(k) * b.delta_f();
    const bool in_band = freq >= b.high_pass_hz && (!b.has_low_pass() || freq <= b.low_pass_hz);
    // the sine at exactly Nyquist is identically zero
    const bool nyquist = 2 * k == b.n_frames;
    f(k, freq, in_band, nyquist);
  }
}

}  // namespace

void RegressorBlock::append(const RegressorBlock& other) {
  names.insert(names.end(), other.names.begin(), other.names.end());
  columns.insert(columns.end(), other.columns.begin(), other.columns.end());
}

TissueSignals extract_tissue_signals(const Volume& epi, const Volume& gm, const Volume& wm, const Volume& csf) {
  return {mask_mean(epi, wm, "WM"), mask_mean(epi, csf, "CSF"), mask_mean(epi, gm, "GM")};
}

RegressorBlock expand_motion(const MotionTrace& trace, int order) {
  if (order != 6 && order != 12 && order != 24)
    throw std::invalid_argument("motion order must be 6, 12 or 24, got " + std::to_string(order));
  static const char* kNames[6] = {"rx", "ry", "rz", "tx", "ty", "tz"};
  const std::size_t n = trace.frames();
  RegressorBlock b;
  for (int p = 0; p < 6; ++p) {
    std::vector<double> c(n);
    for (std::size_t t = 0; t < n; ++t) c[t] = trace.params[t][p];
    b.names.emplace_back(kNames[p]);
    b.columns.push_back(std::move(c));
  }
  if (order >= 12)
    for (int p = 0; p < 6; ++p) {
      std::vector<double> c(n, 0.0);
      for (std::size_t t = 1; t < n; ++t) c[t] = b.columns[p][t] - b.columns[p][t - 1];
      b.names.push_back(std::string("d_") + kNames[p]);
      b.columns.push_back(std::move(c));
    }
  if (order == 24)
    for (int p = 0; p < 12; ++p) {
      std::vector<double> c = b.columns[p];
      for (double& v : c) v *= v;
      b.names.push_back(b.names[p] + "_sq");
      b.columns.push_back(std::move(c));
    }
  return b;
}

void BandSpec::validate() const {
  if (!(tr_seconds > 0.0)) throw std::invalid_argument("band: tr must be positive");
  if (n_frames < 1) throw std::invalid_argument("band: no frames");
  if (!(high_pass_hz > 0.0 && high_pass_hz < low_pass_hz))
    throw std::invalid_argument("band: need 0 < high_pass < low_pass");
}

long DofReport::residual_dof() const {
  return static_cast<long>(kept_frames) - static_cast<long>(stop_columns) - static_cast<long>(nuisance_columns);
}

std::string DofReport::describe() const {
  std::ostringstream o;
  o << n_frames << " frames x tr " << tr_seconds << " s: t_max " << t_max_seconds << " s, delta_f = 1/t_max = "
    << delta_f_hz << " Hz, f_max = 1/(2 tr) = " << f_max_hz << " Hz; " << in_band_frequencies
    << " in-band frequencies, " << stop_columns << " band-stop columns + " << nuisance_columns
    << " nuisance columns against " << kept_frames << " kept frames (residual dof " << residual_dof() << ")";
  return o.str();
}

DofReport dof_report(const BandSpec& band, std::size_t kept_frames, std::size_t nuisance_columns) {
  band.validate();
  DofReport r;
  r.n_frames = band.n_frames;
  r.kept_frames = kept_frames;
  r.tr_seconds = band.tr_seconds;
  r.t_max_seconds = static_cast<double>(band.n_frames) * band.tr_seconds;
  r.delta_f_hz = band.delta_f();
  r.f_max_hz = band.nyquist();
  r.nuisance_columns = nuisance_columns;
  for_each_frequency(band, [&](std::size_t, double, bool in_band, bool nyquist) {
    if (in_band) ++r.in_band_frequencies;
    else r.stop_columns += nyquist ? 1 : 2;
  });
  return r;
}

RegressorBlock fourier_stop_basis(const BandSpec& band, std::size_t kept_frames) {
  if (kept_frames == 0) kept_frames = band.n_frames;
  const DofReport rep = dof_report(band, kept_frames, kPolynomialColumns);
  if (rep.residual_dof() <= 0) throw DenoiseError("insufficient degrees of freedom: " + rep.describe());
  RegressorBlock b;
  const double tr = band.tr_seconds;
  for_each_frequency(band, [&](std::size_t k, double freq, bool in_band, bool nyquist) {
    if (in_band) return;
    std::vector<double> c(band.n_frames), s(band.n_frames);
    for (std::size_t t = 0; t < band.n_frames; ++t) {
      const double ph = 2.0 * std::numbers::pi * freq * static_cast<double>(t) * tr;
      c[t] = std::cos(ph);
      s[t] = std::sin(ph);
    }
    b.names.push_back("cos_" + std::to_string(k));
    b.columns.push_back(std::move(c));
    if (!nyquist) {
      b.names.push_back("sin_" + std::to_string(k));
      b.columns.push_back(std::move(s));
    }
  });
  return b;
}

RegressorBlock polynomial_block(std::size_t n) {
  RegressorBlock b;
  b.names = {"constant", "linear"};
  std::vector<double> lin(n);
  const double mid = 0.5 * static_cast<double>(n - 1);
  for (std::size_t t = 0; t < n; ++t) lin[t] = static_cast<double>(t) - mid;
  b.columns = {std::vector<double>(n, 1.0), std::move(lin)};
  return b;
}

ConfoundMatrix build_confounds(const RegressorBlock& motion, const TissueSignals& tissue, bool global_signal,
                               const BandSpec& band, const CensorMask& censor) {
  const std::size_t n = censor.frames();
  if (band.n_frames != n) throw DenoiseError("band frame count does not match the censor mask");
  auto check = [&](const std::vector<double>& c, const std::string& name) {
    if (c.size() != n) throw DenoiseError("regressor " + name + " has " + std::to_string(c.size()) + " frames, expected " + std::to_string(n));
    for (double v : c)
      if (!std::isfinite(v)) throw DenoiseError("regressor " + name + " is not finite");
  };
  ConfoundMatrix m;
  m.censor = censor;
  m.block = motion;
  m.block.names.push_back("wm_mean");
  m.block.columns.push_back(tissue.wm_mean);
  m.block.names.push_back("csf_mean");
  m.block.columns.push_back(tissue.csf_mean);
  if (global_signal) {
    m.block.names.push_back("global_gm_mean");
    m.block.columns.push_back(tissue.gm_mean);
  }
  m.block.append(polynomial_block(n));
  const std::size_t nuisance = m.block.size();
  const DofReport rep = dof_report(band, censor.kept_count(), nuisance);
  if (rep.residual_dof() <= 0) throw DenoiseError("insufficient degrees of freedom: " + rep.describe());
  m.block.append(fourier_stop_basis(band, censor.kept_count()));
  for (std::size_t c = 0; c < m.block.size(); ++c) check(m.block.columns[c], m.block.names[c]);
  return m;
}

Volume project_confounds(const Volume& epi, const ConfoundMatrix& cm) {
  const auto& h = epi.header();
  const std::size_t nt = h.nt(), nv = h.voxels_per_frame();
  if (cm.n_frames() != nt)
    throw DenoiseError("confound matrix has " + std::to_string(cm.n_frames()) + " frames, data has " + std::to_string(nt));
  const auto kept = cm.censor.kept();
  const std::size_t nk = kept.size(), p = cm.block.size();

  Eigen::MatrixXd x(nk, p);
  for (std::size_t c = 0; c < p; ++c)
    for (std::size_t r = 0; r < nk; ++r) x(r, c) = cm.block.columns[c][kept[r]];
  // columns scaled to unit norm so the rank threshold is scale-free
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double nrm = x.col(c).norm();
    if (nrm > 0.0) x.col(c) /= nrm;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  const auto rank = static_cast<std::size_t>(qr.rank());
  if (rank >= nk) {
    std::ostringstream o;
    o << "insufficient degrees of freedom: design rank " << rank << " with " << p << " columns against " << nk
      << " kept frames";
    throw DenoiseError(o.str());
  }
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(nk), static_cast<Eigen::Index>(rank));

  Volume out(h);
  Eigen::VectorXd y(nk), coef(rank);
  for (std::size_t v = 0; v < nv; ++v) {
    bool any = false;
    for (std::size_t r = 0; r < nk; ++r) {
      y[r] = epi.data()[kept[r] * nv + v];
      any = any || y[r] != 0.0;
    }
    if (!any) continue;
    coef.noalias() = q.transpose() * y;
    y.noalias() -= q * coef;
    for (std::size_t r = 0; r < nk; ++r) out.data()[kept[r] * nv + v] = y[r];
  }
  return out;
}

Volume smooth_gaussian(const Volume& epi, double fwhm_mm) {
  if (fwhm_mm < 0.0) throw std::invalid_argument("smoothing FWHM must be >= 0");
  if (fwhm_mm == 0.0) return epi;
  const double sigma = fwhm_mm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  const auto& vs = epi.header().voxel_size;
  return gaussian_smooth(epi, {sigma / vs[0], sigma / vs[1], sigma / vs[2]});
}

MergedRuns merge_runs(const std::vector<Volume>& runs) {
  if (runs.empty()) throw DenoiseError("no accepted runs to merge");
  MergedRuns m;
  std::vector<Volume> frames;
  std::size_t start = 0;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    if (!same_grid(runs[r].header(), runs[0].header()))
      throw DenoiseError("run " + std::to_string(r) + " grid differs from run 0");
    const std::size_t nt = runs[r].header().nt();
    m.spans.push_back({start, nt});
    start += nt;
  }
  if (runs.size() == 1) {
    m.data = runs[0];
    return m;
  }
  VolumeHeader h = runs[0].header();
  h.dims[3] = start;
  std::vector<double> data;
  data.reserve(h.total_voxels());
  for (const auto& r : runs) data.insert(data.end(), r.data().begin(), r.data().end());
  m.data = Volume(h, std::move(data));
  return m;
}

void write_confounds_tsv(const ConfoundMatrix& c, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  for (std::size_t j = 0; j < c.block.size(); ++j) f << (j ? "\t" : "") << c.block.names[j];
  f << "\n";
  char buf[32];
  for (std::size_t t = 0; t < c.n_frames(); ++t) {
    for (std::size_t j = 0; j < c.block.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.10g", c.block.columns[j][t]);
      f << (j ? "\t" : "") << buf;
    }
    f << "\n";
  }
}

}  // namespace neors
