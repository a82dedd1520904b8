#include "neors/bids.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

namespace neors {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Strips .nii or .nii.gz; returns empty when the name is not a NIfTI file.
std::string nifti_stem(const std::string& name) {
  if (ends_with(name, ".nii.gz")) return name.substr(0, name.size() - 7);
  if (ends_with(name, ".nii")) return name.substr(0, name.size() - 4);
  return {};
}

std::optional<fs::path> sidecar_for(const fs::path& dir, const std::string& stem) {
  const fs::path p = dir / (stem + ".json");
  if (fs::is_regular_file(p)) return p;
  return std::nullopt;
}

std::vector<fs::path> sorted_entries(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

struct Collected {
  std::vector<std::pair<std::string, fs::path>> t2;  // (session, path)
  std::vector<FuncRun> runs;
  std::map<std::string, std::map<std::string, fs::path>> fmaps;  // session -> dir label -> path
};

void collect(const fs::path& dir, const std::string& session, const fs::path& root, Collected& c) {
  static const std::regex run_re("_run-([0-9]+)");
  static const std::regex dir_re("_dir-([A-Za-z]+)_epi$");
  for (const auto& p : sorted_entries(dir / "anat")) {
    const std::string stem = nifti_stem(p.filename().string());
    if (!stem.empty() && ends_with(stem, "_T2w")) c.t2.emplace_back(session, p);
  }
  for (const auto& p : sorted_entries(dir / "func")) {
    const std::string stem = nifti_stem(p.filename().string());
    if (stem.empty() || !ends_with(stem, "_bold")) continue;
    FuncRun r;
    r.bold = p;
    r.stem = stem;
    r.session = session;
    r.sidecar = sidecar_for(p.parent_path(), stem);
    if (!r.sidecar) {
      // dataset-level inherited sidecar, e.g. task-rest_bold.json
      static const std::regex task_re("(task-[A-Za-z0-9]+)");
      std::smatch m;
      if (std::regex_search(stem, m, task_re)) r.sidecar = sidecar_for(root, m[1].str() + "_bold");
    }
    std::smatch m;
    if (std::regex_search(stem, m, run_re)) r.run_index = std::stoi(m[1].str());
    c.runs.push_back(std::move(r));
  }
  for (const auto& p : sorted_entries(dir / "fmap")) {
    const std::string stem = nifti_stem(p.filename().string());
    std::smatch m;
    if (!stem.empty() && std::regex_search(stem, m, dir_re)) c.fmaps[session][m[1].str()] = p;
  }
}

}  // namespace

DatasetScan scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw BidsError(root.string() + ": dataset directory does not exist");
  DatasetScan scan;
  bool any = false;
  for (const auto& sub : sorted_entries(root)) {
    const std::string name = sub.filename().string();
    if (!fs::is_directory(sub) || name.rfind("sub-", 0) != 0 || name.size() <= 4) continue;
    any = true;
    Collected c;
    collect(sub, "", root, c);
    for (const auto& ses : sorted_entries(sub)) {
      const std::string sname = ses.filename().string();
      if (fs::is_directory(ses) && sname.rfind("ses-", 0) == 0) collect(ses, sname.substr(4), root, c);
    }

    std::vector<std::string> missing;
    if (c.t2.empty()) missing.push_back("missing T2w");
    if (c.runs.empty()) missing.push_back("missing BOLD");
    if (!missing.empty()) {
      std::string msg;
      for (const auto& m : missing) msg += (msg.empty() ? "" : "; ") + m;
      scan.diagnostics.push_back({name, msg});
      continue;
    }

    SubjectLayout s;
    s.subject_id = name.substr(4);
    s.directory = sub;
    s.anat_t2 = c.t2.front().second;
    s.func_runs = std::move(c.runs);
    std::stable_sort(s.func_runs.begin(), s.func_runs.end(), [](const FuncRun& a, const FuncRun& b) {
      if (a.session != b.session) return a.session < b.session;
      if (a.run_index != b.run_index) return a.run_index < b.run_index;
      return a.stem < b.stem;
    });
    for (const auto& [session, dirs] : c.fmaps) {
      const auto ap = dirs.find("AP"), pa = dirs.find("PA");
      if (ap == dirs.end() || pa == dirs.end()) continue;
      FmapPair f;
      f.pe_forward = ap->second;
      f.pe_reverse = pa->second;
      f.forward_sidecar = sidecar_for(ap->second.parent_path(), nifti_stem(ap->second.filename().string()));
      f.reverse_sidecar = sidecar_for(pa->second.parent_path(), nifti_stem(pa->second.filename().string()));
      s.fmap_pairs = f;
      break;
    }
    scan.subjects.push_back(std::move(s));
  }
  if (!any) throw BidsError(root.string() + ": empty dataset (no sub-* directories)");
  return scan;
}

std::string PhaseEncoding::token() const {
  std::string t(1, "ijk"[axis]);
  if (sign < 0) t += '-';
  return t;
}

PhaseEncoding parse_phase_encoding(const std::string& token) {
  if (token.empty() || token.size() > 2 || (token.size() == 2 && token[1] != '-'))
    throw std::invalid_argument("invalid phase-encoding direction '" + token + "'");
  const auto pos = std::string("ijk").find(token[0]);
  if (pos == std::string::npos) throw std::invalid_argument("invalid phase-encoding direction '" + token + "'");
  return {static_cast<int>(pos), token.size() == 2 ? -1 : 1};
}

SidecarMeta parse_sidecar(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw BidsError(path.string() + ": cannot open sidecar");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw BidsError(path.string() + ": malformed JSON: " + e.what());
  }
  if (!j.is_object()) throw BidsError(path.string() + ": sidecar is not a JSON object");
  SidecarMeta m;
  try {
    if (j.contains("RepetitionTime")) m.repetition_time = j["RepetitionTime"].get<double>();
    if (j.contains("SliceTiming")) m.slice_timing = j["SliceTiming"].get<std::vector<double>>();
    if (j.contains("PhaseEncodingDirection"))
      m.phase_encoding = parse_phase_encoding(j["PhaseEncodingDirection"].get<std::string>());
    if (j.contains("TotalReadoutTime")) {
      m.total_readout_time = j["TotalReadoutTime"].get<double>();
      if (!(*m.total_readout_time > 0.0)) throw BidsError(path.string() + ": TotalReadoutTime must be positive");
    }
  } catch (const nlohmann::json::exception& e) {
    throw BidsError(path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw BidsError(path.string() + ": " + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

const std::array<std::pair<SliceOrder, const char*>, 5> kSliceOrders{{
    {SliceOrder::BottomUp, "bottom-up"},
    {SliceOrder::TopDown, "top-down"},
    {SliceOrder::InterleavedBottomUp, "interleaved-bottom-up"},
    {SliceOrder::InterleavedTopDown, "interleaved-top-down"},
    {SliceOrder::FromSidecar, "from-sidecar"},
}};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': non-numeric value '" + v + "'");
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': non-integer value '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected 0/1, got '" + v + "'");
}

fs::path to_path(const std::string& v, const fs::path& base) {
  fs::path p(v);
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

}  // namespace

std::string slice_order_token(SliceOrder o) {
  for (const auto& [k, name] : kSliceOrders)
    if (k == o) return name;
  return "from-sidecar";
}

SliceOrder parse_slice_order(const std::string& s) {
  for (std::size_t i = 0; i < kSliceOrders.size(); ++i)
    if (s == kSliceOrders[i].second || s == std::to_string(i + 1)) return kSliceOrders[i].first;
  throw ConfigError("invalid slice_order '" + s +
                    "' (expected bottom-up, top-down, interleaved-bottom-up, interleaved-top-down, "
                    "from-sidecar or 1-5)");
}

void PipelineConfig::validate() const {
  if (motion_order != 6 && motion_order != 12 && motion_order != 24)
    throw ConfigError("motion must be 6, 12 or 24 (got " + std::to_string(motion_order) + ")");
  if (!(band_hz.first > 0.0)) throw ConfigError("band high-pass edge must be positive");
  if (!(band_hz.first < band_hz.second)) throw ConfigError("band edges inverted");
  if (!(fd_max_mm > 0.0)) throw ConfigError("fd_max must be positive");
  if (!(fd_average_max_mm > 0.0)) throw ConfigError("fd_average_max must be positive");
  if (!(head_radius_mm > 0.0)) throw ConfigError("radius must be positive");
  if (!(fwhm_mm >= 0.0)) throw ConfigError("fwhm must be non-negative");
  if (!(tr_seconds >= 0.0)) throw ConfigError("tr must be non-negative");
  if (n_cores < 1) throw ConfigError("n_cores must be at least 1");
  if (enable_best_volumes && best_section_seconds < 300.0)
    throw ConfigError("best_section_seconds must be at least 300 when best_volumes is enabled");
  if (reference_frame < 0) throw ConfigError("reference_frame must be non-negative");
}

PipelineConfig parse_config(const std::string& text, const fs::path& base_dir) {
  PipelineConfig c;
  bool fd_average_set = false;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (!seen.insert(key).second)
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");

    if (key == "working_dir") c.working_dir = to_path(v, base_dir);
    else if (key == "tr") c.tr_seconds = to_double(key, v);
    else if (key == "motion") c.motion_order = to_int(key, v);
    else if (key == "slice_order") c.slice_order = parse_slice_order(v);
    else if (key == "fwhm") c.fwhm_mm = to_double(key, v);
    else if (key == "radius") c.head_radius_mm = to_double(key, v);
    else if (key == "fd_max") c.fd_max_mm = to_double(key, v);
    else if (key == "fd_average_max") {
      c.fd_average_max_mm = to_double(key, v);
      fd_average_set = true;
    } else if (key == "band") {
      std::string s = v;
      std::replace_if(s.begin(), s.end(), [](char ch) { return ch == '[' || ch == ']' || ch == ','; }, ' ');
      std::istringstream bs(s);
      std::string lo, hi, extra;
      if (!(bs >> lo >> hi) || (bs >> extra))
        throw ConfigError("config key 'band': expected two frequencies, got '" + v + "'");
      c.band_hz = {to_double(key, lo), to_double(key, hi)};
    } else if (key == "n_cores") c.n_cores = to_int(key, v);
    else if (key == "slice_timing") c.enable_slice_timing = to_bool(key, v);
    else if (key == "fmap") c.enable_fmap = to_bool(key, v);
    else if (key == "best_volumes") c.enable_best_volumes = to_bool(key, v);
    else if (key == "fd_average") c.enable_run_exclusion = to_bool(key, v);
    else if (key == "best_section_seconds") c.best_section_seconds = to_double(key, v);
    else if (key == "template_1mm") c.template_1mm = to_path(v, base_dir);
    else if (key == "template_3mm") c.template_3mm = to_path(v, base_dir);
    else if (key == "priors") c.priors = to_path(v, base_dir);
    else if (key == "tissue_mapping") c.tissue_mapping = to_path(v, base_dir);
    else if (key == "seeds") c.seeds = to_path(v, base_dir);
    else if (key == "bet_f") c.bet_f = to_double(key, v);
    else if (key == "bet_g") c.bet_g = to_double(key, v);
    else if (key == "global_signal") c.global_signal = to_bool(key, v);
    else if (key == "reference_frame") c.reference_frame = to_int(key, v);
    else throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  if (!fd_average_set) c.fd_average_max_mm = c.fd_max_mm;
  c.validate();
  return c;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str(), path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string serialize_config(const PipelineConfig& c) {
  std::ostringstream o;
  auto path_line = [&](const char* key, const fs::path& p) {
    if (!p.empty()) o << key << " = " << p.string() << "\n";
  };
  path_line("working_dir", c.working_dir);
  o << "tr = " << fmt(c.tr_seconds) << "\n";
  o << "motion = " << c.motion_order << "\n";
  o << "slice_order = " << slice_order_token(c.slice_order) << "\n";
  o << "fwhm = " << fmt(c.fwhm_mm) << "\n";
  o << "radius = " << fmt(c.head_radius_mm) << "\n";
  o << "fd_max = " << fmt(c.fd_max_mm) << "\n";
  o << "fd_average_max = " << fmt(c.fd_average_max_mm) << "\n";
  o << "band = " << fmt(c.band_hz.first) << "," << fmt(c.band_hz.second) << "\n";
  o << "n_cores = " << c.n_cores << "\n";
  o << "slice_timing = " << int(c.enable_slice_timing) << "\n";
  o << "fmap = " << int(c.enable_fmap) << "\n";
  o << "best_volumes = " << int(c.enable_best_volumes) << "\n";
  o << "fd_average = " << int(c.enable_run_exclusion) << "\n";
  o << "best_section_seconds = " << fmt(c.best_section_seconds) << "\n";
  path_line("template_1mm", c.template_1mm);
  path_line("template_3mm", c.template_3mm);
  path_line("priors", c.priors);
  path_line("tissue_mapping", c.tissue_mapping);
  path_line("seeds", c.seeds);
  o << "bet_f = " << fmt(c.bet_f) << "\n";
  o << "bet_g = " << fmt(c.bet_g) << "\n";
  o << "global_signal = " << int(c.global_signal) << "\n";
  o << "reference_frame = " << c.reference_frame << "\n";
  return o.str();
}

}  // namespace neors
