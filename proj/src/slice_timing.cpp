#include "neors/slice_timing.hpp"

#include "neors/registration.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace neors {

std::vector<double> slice_order_to_times(SliceOrder mode, std::size_t n, double tr,
                                         const std::optional<SidecarMeta>& sidecar) {
  if (n < 1) throw std::invalid_argument("slice_order_to_times: need at least one slice");
  if (!(tr > 0.0)) throw std::invalid_argument("slice_order_to_times: tr must be positive");

  if (mode == SliceOrder::FromSidecar) {
    if (!sidecar || !sidecar->slice_timing)
      throw std::invalid_argument("slice order from-sidecar requested but the sidecar has no SliceTiming");
    const auto& st = *sidecar->slice_timing;
    if (st.size() != n) {
      std::ostringstream msg;
      msg << "SliceTiming has " << st.size() << " entries but the volume has " << n << " slices";
      throw std::invalid_argument(msg.str());
    }
    return st;
  }

  // acquisition sequence: order[k] = slice acquired k-th
  std::vector<std::size_t> order;
  switch (mode) {
    case SliceOrder::BottomUp:
      for (std::size_t i = 0; i < n; ++i) order.push_back(i);
      break;
    case SliceOrder::TopDown:
      for (std::size_t i = n; i-- > 0;) order.push_back(i);
      break;
    case SliceOrder::InterleavedBottomUp:
      for (std::size_t i = 0; i < n; i += 2) order.push_back(i);
      for (std::size_t i = 1; i < n; i += 2) order.push_back(i);
      break;
    case SliceOrder::InterleavedTopDown:
      for (std::size_t i = n; i-- > 0;)
        if ((n - 1 - i) % 2 == 0) order.push_back(i);
      for (std::size_t i = n; i-- > 0;)
        if ((n - 1 - i) % 2 == 1) order.push_back(i);
      break;
    case SliceOrder::FromSidecar: break;
  }
  std::vector<double> times(n);
  const double dt = tr / static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) times[order[k]] = static_cast<double>(k) * dt;
  return times;
}

std::vector<double> temporal_shift(std::span<const double> x, double shift) {
  const auto n = static_cast<long>(x.size());
  std::vector<double> out(x.size());
  for (long k = 0; k < n; ++k) {
    const double p = static_cast<double>(k) + shift;
    const long lo = static_cast<long>(std::floor(p)) - kTemporalSincRadius + 1;
    double acc = 0.0, wsum = 0.0;
    for (long j = std::max(0L, lo); j <= std::min(n - 1, lo + 2 * kTemporalSincRadius - 1); ++j) {
      const double w = hann_sinc(p - static_cast<double>(j), kTemporalSincRadius);
      acc += w * x[static_cast<std::size_t>(j)];
      wsum += w;
    }
    // beyond the series end the nearest sample is held
    out[static_cast<std::size_t>(k)] =
        wsum != 0.0 ? acc / wsum : x[static_cast<std::size_t>(std::clamp(std::lround(p), 0L, n - 1))];
  }
  return out;
}

Volume correct_slice_timing(const Volume& epi, std::span<const double> offsets, double tr,
                            std::optional<double> reference_time) {
  const auto& h = epi.header();
  const std::size_t nz = h.nz(), nt = h.nt(), nxy = h.nx() * h.ny(), nvox = h.voxels_per_frame();
  if (offsets.size() != nz) {
    std::ostringstream msg;
    msg << "slice timing: " << offsets.size() << " offsets for " << nz << " slices";
    throw std::invalid_argument(msg.str());
  }
  if (!(tr > 0.0)) throw std::invalid_argument("slice timing: tr must be positive");
  for (double o : offsets)
    if (!(o >= 0.0 && o < tr)) {
      std::ostringstream msg;
      msg << "slice timing: offset " << o << " s outside [0, " << tr << ")";
      throw std::invalid_argument(msg.str());
    }
  const double ref = reference_time.value_or(0.5 * tr);

  Volume out = epi;
  std::vector<double> series(nt);
  for (std::size_t z = 0; z < nz; ++z) {
    const double shift = (ref - offsets[z]) / tr;
    if (shift == 0.0) continue;
    for (std::size_t i = 0; i < nxy; ++i) {
      const std::size_t v = z * nxy + i;
      for (std::size_t t = 0; t < nt; ++t) series[t] = epi.data()[t * nvox + v];
      const auto shifted = temporal_shift(series, shift);
      for (std::size_t t = 0; t < nt; ++t) out.data()[t * nvox + v] = shifted[t];
    }
  }
  return out;
}

}  // namespace neors
