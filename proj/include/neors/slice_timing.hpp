// Slice acquisition times and temporal resampling of each slice to a common reference time.
#pragma once

#include "neors/bids.hpp"
#include "neors/volume.hpp"

#include <optional>
#include <span>
#include <vector>

namespace neors {

/// Per-slice acquisition offsets (s) along the volume's third axis. Generated modes space
/// slices uniformly at tr / n_slices; from-sidecar returns SliceTiming verbatim.
std::vector<double> slice_order_to_times(SliceOrder mode, std::size_t n_slices, double tr_seconds,
                                         const std::optional<SidecarMeta>& sidecar = std::nullopt);

/// Resamples `series` at fractional frame positions k + shift (Hann-windowed sinc, radius
/// 4 frames, weights renormalized so constants are preserved exactly).
std::vector<double> temporal_shift(std::span<const double> series, double shift_frames);

/// Every slice is moved from its acquisition time to `reference_time` (default tr / 2).
Volume correct_slice_timing(const Volume& epi, std::span<const double> offsets, double tr_seconds,
                            std::optional<double> reference_time = std::nullopt);

inline constexpr int kTemporalSincRadius = 4;

}  // namespace neors
