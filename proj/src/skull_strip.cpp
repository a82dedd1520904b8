#include "neors/skull_strip.hpp"

#include "neors/image_ops.hpp"
#include "neors/qc.hpp"

#include <cmath>
#include <sstream>

namespace neors {

BrainMask strip_skull(const Volume& t2, double f, double g) {
  if (!(f > 0.0 && f < 1.0)) throw std::invalid_argument("skull strip: f must lie in (0, 1)");
  if (!(g > -1.0 && g < 1.0)) throw std::invalid_argument("skull strip: g must lie in (-1, 1)");
  const auto& h = t2.header();
  bool any = false;
  for (std::size_t i = 0; i < h.voxels_per_frame() && !any; ++i) any = t2.data()[i] != 0.0;
  if (!any) throw SkullStripError("skull strip: input image is all zero");

  const std::span<const double> frame(t2.data().data(), h.voxels_per_frame());
  const double lo = percentile(frame, 2.0), hi = percentile(frame, 98.0);
  const double base = lo + f * (hi - lo);

  // superior direction in voxel k: sign of the world-z component of the k axis
  const double kz = h.affine(2, 2) >= 0.0 ? 1.0 : -1.0;
  const double half = 0.5 * static_cast<double>(h.nz() > 1 ? h.nz() - 1 : 1);

  VolumeHeader mh = h.spatial();
  mh.datatype = Datatype::UInt8;
  Volume m(mh);
  for (std::size_t z = 0; z < h.nz(); ++z) {
    const double zn = kz * (static_cast<double>(z) - half) / half;
    const double thr = base * (1.0 + g * zn);
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x) m.at(x, y, z) = t2.at(x, y, z) > thr ? 1.0 : 0.0;
  }
  m = largest_component(m);
  m = fill_holes(erode_ball(dilate_ball(m, 2.0), 2.0));
  // keep strictly inside the grid border
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x)
        if (x == 0 || y == 0 || z == 0 || x + 1 == h.nx() || y + 1 == h.ny() || z + 1 == h.nz()) m.at(x, y, z) = 0.0;
  m = largest_component(m);
  if (count_nonzero(m) == 0) {
    std::ostringstream msg;
    msg << "skull strip: mask is empty at f = " << f << "; try a lower f";
    throw SkullStripError(msg.str());
  }
  return {std::move(m), f, g};
}

void render_strip_overlay(const Volume& t2, const BrainMask& mask, const std::filesystem::path& out) {
  render_contour_overlay(t2, mask.mask, out, "SKULL STRIP F=" + std::to_string(mask.f_threshold).substr(0, 4));
}

}  // namespace neors
