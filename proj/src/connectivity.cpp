#include "neors/connectivity.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace neors {

namespace {

std::vector<std::string> split_tabs_or_spaces(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

double parse_number(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConnectivityError(where + ": '" + s + "' is not a number");
  }
}

std::vector<std::size_t> kept_frames(const CensorMask& censor, std::size_t nt) {
  if (censor.frames() != nt)
    throw ConnectivityError("censor mask has " + std::to_string(censor.frames()) + " frames, data has " +
                            std::to_string(nt));
  auto k = censor.kept();
  if (k.size() < 3) throw ConnectivityError("need at least 3 kept frames, have " + std::to_string(k.size()));
  return k;
}

}  // namespace

SeedSet load_seeds(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConnectivityError(path.string() + ": cannot open seed file");
  SeedSet s;
  std::set<std::string> names;
  bool header = false;
  int row = 0;
  for (std::string line; std::getline(f, line);) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.starts_with("#")) {
      const auto p = line.find("space:");
      if (p != std::string::npos) {
        std::istringstream in(line.substr(p + 6));
        in >> s.space;
      }
      continue;
    }
    const auto tok = split_tabs_or_spaces(line);
    if (tok.empty()) continue;
    const std::string where = path.string() + " row " + std::to_string(row);
    if (!header) {
      if (tok != std::vector<std::string>{"name", "network", "x", "y", "z", "radius"})
        throw ConnectivityError(where + ": expected header 'name network x y z radius'");
      header = true;
      continue;
    }
    if (tok.size() != 6) throw ConnectivityError(where + ": expected 6 columns, got " + std::to_string(tok.size()));
    Seed seed;
    seed.name = tok[0];
    seed.network = tok[1];
    seed.center = {parse_number(tok[2], where), parse_number(tok[3], where), parse_number(tok[4], where)};
    seed.radius_mm = parse_number(tok[5], where);
    if (!(seed.radius_mm > 0.0)) throw ConnectivityError(where + ": radius must be positive");
    if (!names.insert(seed.name).second) throw ConnectivityError(where + ": duplicate seed name '" + seed.name + "'");
    s.seeds.push_back(std::move(seed));
  }
  if (!header) throw ConnectivityError(path.string() + ": missing header row");
  return s;
}

void write_seeds(const SeedSet& s, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << "# space: " << s.space << "\n";
  f << "name\tnetwork\tx\ty\tz\tradius\n";
  for (const auto& seed : s.seeds)
    f << seed.name << "\t" << seed.network << "\t" << seed.center.x() << "\t" << seed.center.y() << "\t"
      << seed.center.z() << "\t" << seed.radius_mm << "\n";
}

std::vector<std::size_t> seed_voxels(const VolumeHeader& h, const Seed& seed) {
  std::vector<std::size_t> out;
  const double r2 = seed.radius_mm * seed.radius_mm + 1e-9;
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x)
        if ((h.voxel_to_world(double(x), double(y), double(z)) - seed.center).squaredNorm() <= r2)
          out.push_back((z * h.ny() + y) * h.nx() + x);
  return out;
}

std::vector<double> seed_timeseries(const Volume& bold, const Seed& seed) {
  const auto vox = seed_voxels(bold.header(), seed);
  if (vox.empty()) throw ConnectivityError("seed '" + seed.name + "' contains no voxels of the data grid");
  const std::size_t nv = bold.header().voxels_per_frame();
  std::vector<double> s(bold.header().nt());
  for (std::size_t t = 0; t < s.size(); ++t) {
    double acc = 0.0;
    for (std::size_t i : vox) acc += bold.data()[t * nv + i];
    s[t] = acc / static_cast<double>(vox.size());
  }
  return s;
}

double pearson_over(std::span<const double> a, std::span<const double> b, std::span<const std::size_t> frames) {
  const double n = static_cast<double>(frames.size());
  double ma = 0.0, mb = 0.0;
  for (auto t : frames) {
    ma += a[t];
    mb += b[t];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (auto t : frames) {
    const double da = a[t] - ma, db = b[t] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

SeedMap seed_to_voxel_map(const Volume& bold, const Seed& seed, const CensorMask& censor) {
  const auto& h = bold.header();
  const auto frames = kept_frames(censor, h.nt());
  const auto s = seed_timeseries(bold, seed);
  const std::size_t nv = h.voxels_per_frame(), nk = frames.size();

  // centered, normalized seed over kept frames
  double ms = 0.0;
  for (auto t : frames) ms += s[t];
  ms /= static_cast<double>(nk);
  std::vector<double> sc(nk);
  double ss = 0.0;
  for (std::size_t k = 0; k < nk; ++k) {
    sc[k] = s[frames[k]] - ms;
    ss += sc[k] * sc[k];
  }

  VolumeHeader oh = h.spatial();
  oh.datatype = Datatype::Float32;
  SeedMap out{Volume(oh), Volume(oh), 0};
  std::vector<double> y(nk);
  for (std::size_t v = 0; v < nv; ++v) {
    double my = 0.0;
    for (std::size_t k = 0; k < nk; ++k) {
      y[k] = bold.data()[frames[k] * nv + v];
      my += y[k];
    }
    my /= static_cast<double>(nk);
    double sy = 0.0, sxy = 0.0;
    for (std::size_t k = 0; k < nk; ++k) {
      const double d = y[k] - my;
      sy += d * d;
      sxy += d * sc[k];
    }
    double r = 0.0;
    if (sy > 0.0 && ss > 0.0) r = std::clamp(sxy / std::sqrt(sy * ss), -1.0, 1.0);
    else ++out.constant_voxels;
    out.r.data()[v] = r;
    out.z.data()[v] = std::atanh(std::clamp(r, -1.0 + 1e-15, 1.0 - 1e-15));
  }
  return out;
}

CorrelationMatrix seed_to_seed_matrix(const Volume& bold, const SeedSet& seeds, const CensorMask& censor) {
  if (seeds.seeds.size() < 2) throw ConnectivityError("seed-to-seed matrix needs at least 2 seeds");
  const auto frames = kept_frames(censor, bold.header().nt());
  std::vector<std::vector<double>> series;
  CorrelationMatrix m;
  for (const auto& s : seeds.seeds) {
    series.push_back(seed_timeseries(bold, s));
    m.labels.push_back(s.name);
  }
  const std::size_t n = series.size();
  m.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    m.values[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double r = pearson_over(series[i], series[j], frames);
      m.values[i * n + j] = r;
      m.values[j * n + i] = r;
    }
  }
  return m;
}

void write_matrix_tsv(const CorrelationMatrix& m, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << "seed";
  for (const auto& l : m.labels) f << "\t" << l;
  f << "\n";
  char buf[32];
  for (std::size_t i = 0; i < m.size(); ++i) {
    f << m.labels[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.10g", m.at(i, j));
      f << "\t" << buf;
    }
    f << "\n";
  }
}

}  // namespace neors
