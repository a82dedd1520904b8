#include "neors/volume.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace neors {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;

std::string describe(const std::filesystem::path& path, std::size_t offset, const std::string& what) {
  std::ostringstream os;
  os << path.string() << " (byte " << offset << "): " << what;
  return os.str();
}

bool is_gz(const std::filesystem::path& path) {
  const std::string s = path.string();
  return s.size() >= 3 && s.compare(s.size() - 3, 3, ".gz") == 0;
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError(describe(path, 0, "file does not exist"));
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError(describe(path, 0, "cannot open"));
  std::vector<unsigned char> buf;
  std::vector<unsigned char> chunk(1 << 20);
  for (;;) {
    int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      int err = 0;
      std::string msg = gzerror(f, &err);
      std::size_t at = buf.size();
      gzclose(f);
      throw IoError(describe(path, at, "decompression failed: " + msg));
    }
    if (n == 0) break;
    buf.insert(buf.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return buf;
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& buf, bool swap) : buf_(buf), swap_(swap) {}

  template <typename T>
  T get(std::size_t offset) const {
    T v;
    std::memcpy(&v, buf_.data() + offset, sizeof(T));
    if (swap_) v = byteswap(v);
    return v;
  }

  template <typename T>
  static T byteswap(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

 private:
  const std::vector<unsigned char>& buf_;
  bool swap_;
};

bool valid_datatype(std::int16_t code) {
  switch (code) {
    case 2: case 4: case 8: case 16: case 64: return true;
    default: return false;
  }
}

Eigen::Matrix4d qform_affine(const Reader& r, const std::array<double, 3>& pix, double qfac) {
  double b = r.get<float>(256), c = r.get<float>(260), d = r.get<float>(264);
  double a2 = 1.0 - (b * b + c * c + d * d);
  double a = a2 > 0.0 ? std::sqrt(a2) : 0.0;
  if (a2 <= 0.0) {
    double n = std::sqrt(b * b + c * c + d * d);
    b /= n; c /= n; d /= n;
  }
  Eigen::Matrix3d R;
  R << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
      2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
      2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 3>(0, 0) = R * Eigen::Vector3d(pix[0], pix[1], qfac * pix[2]).asDiagonal();
  m(0, 3) = r.get<float>(268);
  m(1, 3) = r.get<float>(272);
  m(2, 3) = r.get<float>(276);
  return m;
}

template <typename T>
bool exactly_as(double v) {
  if (std::isnan(v)) return std::numeric_limits<T>::has_quiet_NaN;
  if constexpr (std::is_integral_v<T>) {
    if (v < static_cast<double>(std::numeric_limits<T>::min()) ||
        v > static_cast<double>(std::numeric_limits<T>::max()))
      return false;
  }
  return static_cast<double>(static_cast<T>(v)) == v;
}

bool representable(const std::vector<double>& data, Datatype dt) {
  auto all = [&](auto pred) { return std::all_of(data.begin(), data.end(), pred); };
  switch (dt) {
    case Datatype::UInt8: return all(exactly_as<std::uint8_t>);
    case Datatype::Int16: return all(exactly_as<std::int16_t>);
    case Datatype::Int32: return all(exactly_as<std::int32_t>);
    case Datatype::Float32: return all([](double v) { return std::isinf(v) || exactly_as<float>(v); });
    case Datatype::Float64: return true;
  }
  return false;
}

template <typename T>
void put(std::vector<unsigned char>& buf, std::size_t offset, T v) {
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

template <typename T>
void encode(const std::vector<double>& data, std::vector<unsigned char>& out, std::size_t offset) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    T v = static_cast<T>(data[i]);
    std::memcpy(out.data() + offset + i * sizeof(T), &v, sizeof(T));
  }
}

// Unit quaternion (b, c, d) and qfac for the rotation part of an affine, if it is orthogonal.
bool quaternion_of(const Eigen::Matrix4d& affine, std::array<double, 3>& bcd, double& qfac) {
  Eigen::Matrix3d m = affine.block<3, 3>(0, 0);
  for (int j = 0; j < 3; ++j) {
    double n = m.col(j).norm();
    if (n <= 0.0) return false;
    m.col(j) /= n;
  }
  if ((m.transpose() * m - Eigen::Matrix3d::Identity()).norm() > 1e-4) return false;
  qfac = 1.0;
  if (m.determinant() < 0) {
    qfac = -1.0;
    m.col(2) = -m.col(2);
  }
  double a = 1.0 + m(0, 0) + m(1, 1) + m(2, 2);
  double b, c, d;
  if (a > 0.5) {
    a = 0.5 * std::sqrt(a);
    b = 0.25 * (m(2, 1) - m(1, 2)) / a;
    c = 0.25 * (m(0, 2) - m(2, 0)) / a;
    d = 0.25 * (m(1, 0) - m(0, 1)) / a;
  } else {
    double xd = 1.0 + m(0, 0) - (m(1, 1) + m(2, 2));
    double yd = 1.0 + m(1, 1) - (m(0, 0) + m(2, 2));
    double zd = 1.0 + m(2, 2) - (m(0, 0) + m(1, 1));
    if (xd > 1.0) {
      b = 0.5 * std::sqrt(xd);
      c = 0.25 * (m(0, 1) + m(1, 0)) / b;
      d = 0.25 * (m(0, 2) + m(2, 0)) / b;
      a = 0.25 * (m(2, 1) - m(1, 2)) / b;
    } else if (yd > 1.0) {
      c = 0.5 * std::sqrt(yd);
      b = 0.25 * (m(0, 1) + m(1, 0)) / c;
      d = 0.25 * (m(1, 2) + m(2, 1)) / c;
      a = 0.25 * (m(0, 2) - m(2, 0)) / c;
    } else {
      d = 0.5 * std::sqrt(zd);
      b = 0.25 * (m(0, 2) + m(2, 0)) / d;
      c = 0.25 * (m(1, 2) + m(2, 1)) / d;
      a = 0.25 * (m(1, 0) - m(0, 1)) / d;
    }
    if (a < 0.0) { b = -b; c = -c; d = -d; }
  }
  bcd = {b, c, d};
  return true;
}

}  // namespace

std::size_t bytes_per_voxel(Datatype dt) {
  switch (dt) {
    case Datatype::UInt8: return 1;
    case Datatype::Int16: return 2;
    case Datatype::Int32: return 4;
    case Datatype::Float32: return 4;
    case Datatype::Float64: return 8;
  }
  return 0;
}

const char* datatype_name(Datatype dt) {
  switch (dt) {
    case Datatype::UInt8: return "uint8";
    case Datatype::Int16: return "int16";
    case Datatype::Int32: return "int32";
    case Datatype::Float32: return "float32";
    case Datatype::Float64: return "float64";
  }
  return "unknown";
}

void VolumeHeader::validate() const {
  for (auto d : dims)
    if (d < 1) throw std::invalid_argument("volume dims must all be >= 1");
  for (auto s : voxel_size)
    if (!(s > 0.0)) throw std::invalid_argument("voxel sizes must be > 0");
  if (std::abs(affine.block<3, 3>(0, 0).determinant()) < 1e-12)
    throw std::invalid_argument("affine is not invertible");
  if (dims[3] > 1 && !(tr_seconds > 0.0))
    throw std::invalid_argument("4D volume requires tr_seconds > 0");
}

VolumeHeader VolumeHeader::spatial() const {
  VolumeHeader h = *this;
  h.dims[3] = 1;
  h.tr_seconds = 0.0;
  return h;
}

VolumeHeader make_grid(std::array<std::size_t, 3> dims, std::array<double, 3> voxel_size,
                       Eigen::Vector3d origin) {
  VolumeHeader h;
  h.dims = {dims[0], dims[1], dims[2], 1};
  h.voxel_size = voxel_size;
  h.affine = Eigen::Matrix4d::Identity();
  for (int i = 0; i < 3; ++i) {
    h.affine(i, i) = voxel_size[i];
    h.affine(i, 3) = origin[i];
  }
  return h;
}

Volume::Volume(VolumeHeader header, double fill)
    : header_(std::move(header)), data_(header_.total_voxels(), fill) {}

Volume::Volume(VolumeHeader header, std::vector<double> data)
    : header_(std::move(header)), data_(std::move(data)) {
  if (data_.size() != header_.total_voxels())
    throw std::invalid_argument("volume data length does not match dims");
}

Volume Volume::frame(std::size_t t) const {
  const std::size_t n = header_.voxels_per_frame();
  std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(t * n),
                        data_.begin() + static_cast<std::ptrdiff_t>((t + 1) * n));
  return Volume(header_.spatial(), std::move(d));
}

void Volume::set_frame(std::size_t t, const Volume& v) {
  const std::size_t n = header_.voxels_per_frame();
  if (v.data().size() != n) throw std::invalid_argument("frame size mismatch");
  std::copy(v.data().begin(), v.data().end(), data_.begin() + static_cast<std::ptrdiff_t>(t * n));
}

std::vector<double> Volume::series(std::size_t voxel) const {
  const std::size_t n = header_.voxels_per_frame();
  std::vector<double> s(header_.nt());
  for (std::size_t t = 0; t < s.size(); ++t) s[t] = data_[t * n + voxel];
  return s;
}

Volume stack_frames(const std::vector<Volume>& frames, double tr_seconds) {
  if (frames.empty()) throw std::invalid_argument("no frames to stack");
  VolumeHeader h = frames.front().header().spatial();
  h.dims[3] = frames.size();
  h.tr_seconds = frames.size() > 1 ? tr_seconds : 0.0;
  Volume out(h);
  for (std::size_t t = 0; t < frames.size(); ++t) out.set_frame(t, frames[t]);
  return out;
}

Volume read_volume(const std::filesystem::path& path) {
  const auto buf = slurp(path);
  if (buf.size() < kHeaderSize)
    throw IoError(describe(path, buf.size(), "truncated header (need 348 bytes)"));

  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, buf.data(), 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    std::int32_t swapped = Reader::byteswap(sizeof_hdr);
    if (swapped == 348) {
      swap = true;
    } else if (sizeof_hdr == 540 || swapped == 540) {
      throw IoError(describe(path, 0, "NIfTI-2 files are not supported"));
    } else {
      throw IoError(describe(path, 0, "bad header size field"));
    }
  }
  if (std::memcmp(buf.data() + 344, "n+1\0", 4) != 0)
    throw IoError(describe(path, 344, "bad magic (expected single-file NIfTI-1 'n+1')"));

  Reader r(buf, swap);
  const auto ndim = r.get<std::int16_t>(40);
  if (ndim < 1 || ndim > 7) throw IoError(describe(path, 40, "invalid dim[0]"));
  if (ndim > 4) {
    for (int i = 5; i <= ndim; ++i)
      if (r.get<std::int16_t>(40 + 2 * i) > 1)
        throw IoError(describe(path, 40, "more than 4 dimensions not supported"));
  }
  const auto dtcode = r.get<std::int16_t>(70);
  if (!valid_datatype(dtcode))
    throw IoError(describe(path, 70, "unsupported datatype code " + std::to_string(dtcode)));

  VolumeHeader h;
  h.datatype = static_cast<Datatype>(dtcode);
  for (int i = 0; i < 4; ++i) {
    std::int16_t d = i < ndim ? r.get<std::int16_t>(42 + 2 * i) : 1;
    if (d < 1) throw IoError(describe(path, 42 + 2 * i, "non-positive dimension"));
    h.dims[i] = static_cast<std::size_t>(d);
  }
  const double qfac = r.get<float>(76) < 0 ? -1.0 : 1.0;
  std::array<double, 3> pix{};
  for (int i = 0; i < 3; ++i) pix[i] = std::abs(static_cast<double>(r.get<float>(80 + 4 * i)));
  if (h.dims[3] > 1) {
    double tr = r.get<float>(92);
    const unsigned char units = buf[123] & 0x38;
    if (units == 16) tr /= 1000.0;
    else if (units == 24) tr /= 1e6;
    h.tr_seconds = tr;
  }

  const auto qcode = r.get<std::int16_t>(252);
  const auto scode = r.get<std::int16_t>(254);
  Eigen::Matrix4d sform = Eigen::Matrix4d::Identity();
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 4; ++col) sform(row, col) = r.get<float>(280 + 16 * row + 4 * col);
  auto invertible = [](const Eigen::Matrix4d& m) {
    return std::isfinite(m.sum()) && std::abs(m.block<3, 3>(0, 0).determinant()) > 1e-12;
  };
  std::array<double, 3> safe_pix = pix;
  for (auto& p : safe_pix)
    if (!(p > 0.0)) p = 1.0;
  if (scode > 0 && invertible(sform)) {
    h.affine = sform;
  } else if (qcode > 0 && invertible(qform_affine(r, safe_pix, qfac))) {
    h.affine = qform_affine(r, safe_pix, qfac);
  } else {
    h.affine = Eigen::Matrix4d::Identity();
    for (int i = 0; i < 3; ++i) h.affine(i, i) = safe_pix[i];
  }
  for (int i = 0; i < 3; ++i)
    h.voxel_size[i] = pix[i] > 0.0 ? pix[i] : h.affine.block<3, 1>(0, i).norm();

  const double vox_offset = r.get<float>(108);
  const auto offset = static_cast<std::size_t>(vox_offset);
  const std::size_t bpv = bytes_per_voxel(h.datatype);
  const std::size_t n = h.total_voxels();
  if (buf.size() < offset + n * bpv)
    throw IoError(describe(path, buf.size(),
                           "truncated data section (expected " + std::to_string(offset + n * bpv) +
                               " bytes)"));

  std::vector<double> data(n);
  bool nan = false;
  auto decode = [&](auto tag) {
    using T = decltype(tag);
    for (std::size_t i = 0; i < n; ++i) {
      T v = r.get<T>(offset + i * sizeof(T));
      data[i] = static_cast<double>(v);
      if constexpr (std::is_floating_point_v<T>)
        if (std::isnan(v)) nan = true;
    }
  };
  switch (h.datatype) {
    case Datatype::UInt8: decode(std::uint8_t{}); break;
    case Datatype::Int16: decode(std::int16_t{}); break;
    case Datatype::Int32: decode(std::int32_t{}); break;
    case Datatype::Float32: decode(float{}); break;
    case Datatype::Float64: decode(double{}); break;
  }

  const double slope = r.get<float>(112);
  const double inter = r.get<float>(116);
  if (std::isfinite(slope) && slope != 0.0 && !(slope == 1.0 && inter == 0.0)) {
    for (auto& v : data) v = v * slope + inter;
  }

  Volume vol(h, std::move(data));
  vol.set_has_nan(nan);
  return vol;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
  const VolumeHeader& h = v.header();
  h.validate();
  if (v.data().size() != h.total_voxels())
    throw IoError(describe(path, 0, "dims/data mismatch"));

  Datatype dt = h.datatype;
  if (!representable(v.data(), dt))
    dt = representable(v.data(), Datatype::Float32) ? Datatype::Float32 : Datatype::Float64;

  const std::size_t bpv = bytes_per_voxel(dt);
  std::vector<unsigned char> out(kVoxOffset + v.data().size() * bpv, 0);
  put<std::int32_t>(out, 0, 348);
  const bool four = h.dims[3] > 1;
  put<std::int16_t>(out, 40, four ? 4 : 3);
  for (int i = 0; i < 4; ++i) put<std::int16_t>(out, 42 + 2 * i, static_cast<std::int16_t>(h.dims[i]));
  for (int i = 4; i < 7; ++i) put<std::int16_t>(out, 42 + 2 * i, 1);
  put<std::int16_t>(out, 70, static_cast<std::int16_t>(dt));
  put<std::int16_t>(out, 72, static_cast<std::int16_t>(bpv * 8));

  std::array<double, 3> bcd{0, 0, 0};
  double qfac = 1.0;
  const bool have_q = quaternion_of(h.affine, bcd, qfac);
  put<float>(out, 76, static_cast<float>(qfac));
  for (int i = 0; i < 3; ++i) put<float>(out, 80 + 4 * i, static_cast<float>(h.voxel_size[i]));
  put<float>(out, 92, static_cast<float>(four ? h.tr_seconds : 0.0));
  put<float>(out, 108, static_cast<float>(kVoxOffset));
  put<float>(out, 112, 0.0f);
  put<float>(out, 116, 0.0f);
  out[123] = 2 | 8;  // mm, seconds
  put<std::int16_t>(out, 252, have_q ? 1 : 0);
  put<std::int16_t>(out, 254, 1);
  for (int i = 0; i < 3; ++i) put<float>(out, 256 + 4 * i, static_cast<float>(bcd[i]));
  for (int i = 0; i < 3; ++i) put<float>(out, 268 + 4 * i, static_cast<float>(h.affine(i, 3)));
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 4; ++col)
      put<float>(out, 280 + 16 * row + 4 * col, static_cast<float>(h.affine(row, col)));
  std::memcpy(out.data() + 344, "n+1\0", 4);

  switch (dt) {
    case Datatype::UInt8: encode<std::uint8_t>(v.data(), out, kVoxOffset); break;
    case Datatype::Int16: encode<std::int16_t>(v.data(), out, kVoxOffset); break;
    case Datatype::Int32: encode<std::int32_t>(v.data(), out, kVoxOffset); break;
    case Datatype::Float32: encode<float>(v.data(), out, kVoxOffset); break;
    case Datatype::Float64: encode<double>(v.data(), out, kVoxOffset); break;
  }

  if (is_gz(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    if (!f) throw IoError(describe(path, 0, "cannot open for writing"));
    std::size_t done = 0;
    while (done < out.size()) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(out.size() - done, 1u << 30));
      if (gzwrite(f, out.data() + done, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        throw IoError(describe(path, done, "write failed"));
      }
      done += chunk;
    }
    if (gzclose(f) != Z_OK) throw IoError(describe(path, done, "write failed on close"));
  } else {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(describe(path, 0, "cannot open for writing"));
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError(describe(path, 0, "write failed"));
  }
}

std::array<int, 3> standard_axis_map(const VolumeHeader& h) {
  const Eigen::Matrix3d lin = h.affine.block<3, 3>(0, 0);
  if (std::abs(lin.determinant()) < 1e-12) throw std::invalid_argument("degenerate affine");

  // Greedy assignment of voxel axes to world axes by largest direction cosine.
  std::array<int, 3> world_of{-1, -1, -1};
  std::array<bool, 3> axis_used{false, false, false}, world_used{false, false, false};
  Eigen::Matrix3d cosines;
  for (int j = 0; j < 3; ++j) cosines.col(j) = lin.col(j).cwiseAbs() / lin.col(j).norm();
  for (int pass = 0; pass < 3; ++pass) {
    double best = -1.0;
    int bj = -1, bw = -1;
    for (int j = 0; j < 3; ++j) {
      if (axis_used[j]) continue;
      for (int w = 0; w < 3; ++w) {
        if (world_used[w]) continue;
        if (cosines(w, j) > best) {
          best = cosines(w, j);
          bj = j;
          bw = w;
        }
      }
    }
    world_of[bj] = bw;
    axis_used[bj] = world_used[bw] = true;
  }
  return world_of;
}

Volume reorient_to_standard(const Volume& v) {
  const VolumeHeader& h = v.header();
  const Eigen::Matrix3d lin = h.affine.block<3, 3>(0, 0);
  const std::array<int, 3> world_of = standard_axis_map(h);
  std::array<bool, 3> flip{};
  for (int j = 0; j < 3; ++j) flip[j] = lin(world_of[j], j) < 0.0;

  bool identity = true;
  for (int j = 0; j < 3; ++j) identity = identity && world_of[j] == j && !flip[j];
  if (identity) return v;

  // P maps output voxel index -> input voxel index.
  Eigen::Matrix4d P = Eigen::Matrix4d::Zero();
  P(3, 3) = 1.0;
  VolumeHeader out_h = h;
  for (int j = 0; j < 3; ++j) {
    const int a = world_of[j];
    out_h.dims[a] = h.dims[j];
    out_h.voxel_size[a] = h.voxel_size[j];
    P(j, a) = flip[j] ? -1.0 : 1.0;
    P(j, 3) = flip[j] ? static_cast<double>(h.dims[j] - 1) : 0.0;
  }
  out_h.affine = h.affine * P;

  Volume out(out_h);
  out.set_has_nan(v.has_nan());
  for (std::size_t t = 0; t < h.nt(); ++t) {
    for (std::size_t z = 0; z < out_h.nz(); ++z)
      for (std::size_t y = 0; y < out_h.ny(); ++y)
        for (std::size_t x = 0; x < out_h.nx(); ++x) {
          const std::array<std::size_t, 3> o{x, y, z};
          std::array<std::size_t, 3> in{};
          for (int j = 0; j < 3; ++j) {
            const std::size_t c = o[world_of[j]];
            in[j] = flip[j] ? h.dims[j] - 1 - c : c;
          }
          out.at(x, y, z, t) = v.at(in[0], in[1], in[2], t);
        }
  }
  return out;
}

}  // namespace neors
