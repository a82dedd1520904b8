#include "neors/dataset.hpp"

#include "neors/motion.hpp"
#include "neors/phantom.hpp"
#include "neors/registration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace neors {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double inside(double rho, double boundary, double scale_mm, double edge_mm) {
  return 0.5 * (1.0 + std::tanh((boundary - rho) * scale_mm / edge_mm));
}

VolumeHeader centered(std::array<std::size_t, 3> dims, double vox) {
  Eigen::Vector3d origin;
  for (int i = 0; i < 3; ++i) origin[i] = -0.5 * static_cast<double>(dims[i] - 1) * vox;
  return make_grid(dims, {vox, vox, vox}, origin);
}

Volume sample(const VolumeHeader& grid, const std::function<double(const Eigen::Vector3d&)>& f) {
  VolumeHeader h = grid;
  h.datatype = Datatype::Float32;
  Volume v(h);
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x)
        v.at(x, y, z) = static_cast<float>(f(h.voxel_to_world(double(x), double(y), double(z))));
  return v;
}

void to_float(Volume& v) {
  for (double& x : v.data()) x = static_cast<double>(static_cast<float>(x));
  v.header().datatype = Datatype::Float32;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  if (!f) throw IoError(p.string() + ": cannot open for writing");
  f << j.dump(2) << "\n";
}

json vec(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

std::string subject_label(int i) {
  char b[16];
  std::snprintf(b, sizeof b, "%02d", i);
  return b;
}

// AR(1) series with unit stationary variance.
std::vector<double> ar1(std::size_t n, double phi, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> s(n);
  const double scale = std::sqrt(1.0 - phi * phi);
  s[0] = g(rng);
  for (std::size_t t = 1; t < n; ++t) s[t] = phi * s[t - 1] + scale * g(rng);
  return s;
}

// Whole-brain, CSF and WM fluctuations at the reference pose, so that tissue mean regressors are
// dominated by their own signal rather than by leakage from the planted regions.
void add_tissue_fluctuations(Volume& bold, const PhantomDatasetSpec& spec, const HeadModel& head,
                             const AffineTransform& pose, std::mt19937_64& rng) {
  const auto& h = bold.header();
  const std::size_t nv = h.voxels_per_frame(), nt = h.nt();
  const auto global = ar1(nt, 0.9, rng), csf = ar1(nt, 0.5, rng), wm = ar1(nt, 0.9, rng);
  for (std::size_t z = 0; z < h.nz(); ++z)
    for (std::size_t y = 0; y < h.ny(); ++y)
      for (std::size_t x = 0; x < h.nx(); ++x) {
        const auto f = head.fractions(pose.apply(h.voxel_to_world(double(x), double(y), double(z))), 1.5);
        const double brain = f.gm + f.wm + f.csf;
        if (brain < 1e-3) continue;
        const std::size_t i = (z * h.ny() + y) * h.nx() + x;
        for (std::size_t t = 0; t < nt; ++t)
          bold.data()[t * nv + i] += 1000.0 * (spec.global_amplitude * brain * global[t] +
                                               spec.csf_amplitude * f.csf * csf[t] + spec.wm_amplitude * f.wm * wm[t]);
      }
}

}  // namespace

HeadModel::Fractions HeadModel::fractions(const Eigen::Vector3d& p, double edge_mm) const {
  const double scale = semi_axes.mean();
  const double rho = (p.array() / semi_axes.array()).matrix().norm();
  const double in100 = inside(rho, 1.0, scale, edge_mm), in94 = inside(rho, 0.94, scale, edge_mm);
  const double in88 = inside(rho, 0.88, scale, edge_mm), in80 = inside(rho, 0.80, scale, edge_mm);
  const double in62 = inside(rho, 0.62, scale, edge_mm);
  double vent = 0.0;
  const Eigen::Vector3d vr(4.0, 12.0, 6.0);
  for (double side : {-1.0, 1.0}) {
    const Eigen::Vector3d c(8.0 * side, 4.0, 4.0);
    const double r = ((p - c).array() / vr.array()).matrix().norm();
    vent = std::max(vent, inside(r, 1.0, vr.mean(), edge_mm));
  }
  Fractions f;
  f.scalp = in100 - in94;
  f.skull = in94 - in88;
  f.csf = (in88 - in80) + in62 * vent;
  f.gm = in80 - in62;
  f.wm = in62 * (1.0 - vent);
  return f;
}

double HeadModel::t2(const Eigen::Vector3d& p) const {
  const Fractions f = fractions(p, 1.0);
  return 350.0 * f.scalp + 40.0 * f.skull + 1000.0 * f.csf + 600.0 * f.gm + 800.0 * f.wm;
}

double HeadModel::epi(const Eigen::Vector3d& p) const {
  const Fractions f = fractions(p, 1.5);
  return 0.3 * f.scalp + 0.1 * f.skull + 1.3 * f.csf + 1.0 * f.gm + 0.8 * f.wm;
}

Eigen::Vector3d HeadModel::cortex_point(const Eigen::Vector3d& u) const {
  return 0.71 * semi_axes.cwiseProduct(u.normalized());
}

PhantomDatasetSpec PhantomDatasetSpec::from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw std::invalid_argument("phantom spec must be a JSON object");
  PhantomDatasetSpec s;
  for (auto& [k, v] : j.items()) {
    if (k == "output") s.output = v.get<std::string>();
    else if (k == "subjects") s.subjects = v.get<int>();
    else if (k == "runs") s.runs = v.get<int>();
    else if (k == "frames") s.frames = v.get<std::size_t>();
    else if (k == "tr") s.tr_seconds = v.get<double>();
    else if (k == "epi_dims") s.epi_dims = v.get<std::array<std::size_t, 3>>();
    else if (k == "epi_voxel_mm") s.epi_voxel_mm = v.get<double>();
    else if (k == "t2_dims") s.t2_dims = v.get<std::array<std::size_t, 3>>();
    else if (k == "t2_voxel_mm") s.t2_voxel_mm = v.get<double>();
    else if (k == "noise_sigma") s.noise_sigma = v.get<double>();
    else if (k == "t2_noise_sigma") s.t2_noise_sigma = v.get<double>();
    else if (k == "signal_amplitude") s.signal_amplitude = v.get<double>();
    else if (k == "group_correlation") s.group_correlation = v.get<double>();
    else if (k == "motion_step_mm") s.motion_step_mm = v.get<double>();
    else if (k == "motion_step_rad") s.motion_step_rad = v.get<double>();
    else if (k == "high_motion_subjects") s.high_motion_subjects = v.get<std::vector<int>>();
    else if (k == "high_motion_factor") s.high_motion_factor = v.get<double>();
    else if (k == "pose_translation_mm") s.pose_translation_mm = v.get<double>();
    else if (k == "pose_rotation_rad") s.pose_rotation_rad = v.get<double>();
    else if (k == "fieldmaps") s.fieldmaps = v.get<bool>();
    else if (k == "field_peak_mm") s.field_peak_mm = v.get<double>();
    else if (k == "readout_time") s.readout_time = v.get<double>();
    else if (k == "global_amplitude") s.global_amplitude = v.get<double>();
    else if (k == "csf_amplitude") s.csf_amplitude = v.get<double>();
    else if (k == "wm_amplitude") s.wm_amplitude = v.get<double>();
    else if (k == "seed") s.seed = v.get<std::uint64_t>();
    else if (k == "config") {
      for (auto& [ck, cv] : v.items()) s.config[ck] = cv.is_string() ? cv.get<std::string>() : cv.dump();
    } else {
      throw std::invalid_argument("phantom spec: unknown key '" + k + "'");
    }
  }
  if (s.output.empty()) throw std::invalid_argument("phantom spec: 'output' is required");
  if (s.output.is_relative() && !base_dir.empty()) s.output = base_dir / s.output;
  if (s.subjects < 1 || s.runs < 1 || s.frames < 10)
    throw std::invalid_argument("phantom spec: need subjects >= 1, runs >= 1, frames >= 10");
  return s;
}

PhantomDatasetSpec PhantomDatasetSpec::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument(path.string() + ": cannot open phantom spec");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

PhantomDatasetPaths make_phantom_dataset(const PhantomDatasetSpec& spec) {
  const HeadModel head;
  const fs::path root = spec.output;
  const fs::path res = root / "resources";
  fs::create_directories(res / "priors");
  write_json(root / "dataset_description.json",
             json{{"Name", "neors phantom"}, {"BIDSVersion", "1.8.0"}, {"DatasetType", "raw"}});

  // template space
  const VolumeHeader g1 = centered({96, 112, 88}, 1.0);
  const VolumeHeader g3 = centered({33, 39, 31}, 3.0);
  write_volume(sample(g1, [&](const Eigen::Vector3d& p) { return head.t2(p); }), res / "template_1mm.nii.gz");
  write_volume(sample(g3, [&](const Eigen::Vector3d& p) { return head.t2(p); }), res / "template_3mm.nii.gz");
  write_volume(sample(g1, [&](const Eigen::Vector3d& p) { return head.fractions(p, 2.5).gm; }), res / "priors" / "gm.nii.gz");
  write_volume(sample(g1, [&](const Eigen::Vector3d& p) { return head.fractions(p, 2.5).wm; }), res / "priors" / "wm.nii.gz");
  write_volume(sample(g1, [&](const Eigen::Vector3d& p) { return head.fractions(p, 2.5).csf; }), res / "priors" / "csf.nii.gz");
  {
    std::ofstream f(res / "tissue_mapping.json");
    f << "{\n  \"csf\": \"CSF\",\n  \"gm\": \"GM\",\n  \"wm\": \"WM\"\n}\n";
  }

  // planted regions (template mm): two correlated pairs plus an independent fifth region
  struct Site {
    std::string name;
    Eigen::Vector3d dir;
    int group;
  };
  const std::vector<Site> sites{{"left_post", {-1, -1, 0.3}, 0},
                                {"right_post", {1, -1, 0.3}, 0},
                                {"left_ant", {-1, 1, 0.3}, 1},
                                {"right_ant", {1, 1, 0.3}, 1},
                                {"superior", {0, 0, 1}, 2}};
  const double region_radius = 5.0;
  {
    std::ofstream f(res / "seeds.tsv");
    f << "# phantom seeds at the planted regions\n# space: template\n";
    f << "name\tnetwork\tx\ty\tz\tradius\n";
    for (const auto& s : sites) {
      const Eigen::Vector3d c = head.cortex_point(s.dir);
      f << s.name << "\tgroup" << s.group << "\t" << c.x() << "\t" << c.y() << "\t" << c.z() << "\t" << region_radius << "\n";
    }
  }

  // config: generated defaults plus overrides
  std::map<std::string, std::string> keys;
  {
    PipelineConfig c;
    c.template_1mm = "resources/template_1mm.nii.gz";
    c.template_3mm = "resources/template_3mm.nii.gz";
    c.priors = "resources/priors";
    c.tissue_mapping = "resources/tissue_mapping.json";
    c.seeds = "resources/seeds.tsv";
    c.enable_fmap = spec.fieldmaps;
    std::istringstream in(serialize_config(c));
    for (std::string line; std::getline(in, line);) {
      const auto eq = line.find(" = ");
      keys[line.substr(0, eq)] = line.substr(eq + 3);
    }
    for (const auto& [k, v] : spec.config) keys[k] = v;
    std::string text = "# generated by neopipe phantom make\n";
    for (const auto& [k, v] : keys) text += k + " = " + v + "\n";
    parse_config(text, root);
    std::ofstream(root / "neopipe.cfg") << text;
  }

  json truth;
  truth["template_regions"] = json::array();
  for (const auto& s : sites)
    truth["template_regions"].push_back(
        {{"name", s.name}, {"group", s.group}, {"center", vec(head.cortex_point(s.dir))}, {"radius", region_radius}});
  truth["subjects"] = json::array();

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int si = 1; si <= spec.subjects; ++si) {
    const std::string sub = "sub-" + subject_label(si);
    const fs::path sd = root / sub;
    for (const char* d : {"anat", "func", "fmap"}) fs::create_directories(sd / d);

    // scanner world -> template world
    Eigen::Vector3d pt, pr;
    for (int i = 0; i < 3; ++i) pt[i] = spec.pose_translation_mm * u(rng);
    for (int i = 0; i < 3; ++i) pr[i] = spec.pose_rotation_rad * u(rng);
    const AffineTransform pose = AffineTransform::rigid(pt, pr);
    const AffineTransform inv = pose.inverse();
    auto t2_scanner = [&](const Eigen::Vector3d& x) { return head.t2(pose.apply(x)); };
    auto epi_scanner = [&](const Eigen::Vector3d& x) { return head.epi(pose.apply(x)); };

    Volume t2 = sample(centered(spec.t2_dims, spec.t2_voxel_mm), t2_scanner);
    for (double& v : t2.data()) v = std::max(0.0, v + spec.t2_noise_sigma * n01(rng));
    to_float(t2);
    write_volume(t2, sd / "anat" / (sub + "_T2w.nii.gz"));

    json js;
    js["subject"] = sub;
    js["pose_matrix"] = json::array();
    for (int r = 0; r < 4; ++r) js["pose_matrix"].push_back({pose.matrix()(r, 0), pose.matrix()(r, 1), pose.matrix()(r, 2), pose.matrix()(r, 3)});
    const bool high = std::find(spec.high_motion_subjects.begin(), spec.high_motion_subjects.end(), si) !=
                      spec.high_motion_subjects.end();
    js["high_motion"] = high;
    js["runs"] = json::array();

    FieldSpec field;
    field.peak_mm = spec.fieldmaps ? spec.field_peak_mm : 0.0;
    field.center = inv.apply(Eigen::Vector3d(0.0, 6.0, -4.0));
    field.width_mm = 20.0;
    field.pe_axis = 1;

    // frames are rendered at a single instant, so every slice is acquired at time 0
    const std::vector<double> slice_times(spec.epi_dims[2], 0.0);

    for (int run = 1; run <= spec.runs; ++run) {
      FunctionalPhantomSpec f;
      f.dims = spec.epi_dims;
      f.voxel_size = {spec.epi_voxel_mm, spec.epi_voxel_mm, spec.epi_voxel_mm};
      f.frames = spec.frames;
      f.tr_seconds = spec.tr_seconds;
      f.signal_amplitude = spec.signal_amplitude;
      f.group_correlation = spec.group_correlation;
      f.noise_sigma = spec.noise_sigma;
      f.field = field;
      f.anatomy = epi_scanner;
      f.seed = spec.seed * 1000 + static_cast<std::uint64_t>(si * 10 + run);
      for (const auto& s : sites) f.regions.push_back({s.name, inv.apply(head.cortex_point(s.dir)), region_radius, s.group});

      // mean-reverting random walk about the head center
      const double k = high ? spec.high_motion_factor : 1.0;
      const Eigen::Vector3d pivot = inv.apply(Eigen::Vector3d::Zero());
      Eigen::Vector3d t = Eigen::Vector3d::Zero(), r = Eigen::Vector3d::Zero();
      for (std::size_t fr = 0; fr < spec.frames; ++fr) {
        if (fr > 0)
          for (int i = 0; i < 3; ++i) {
            t[i] = 0.9 * t[i] + k * spec.motion_step_mm * n01(rng);
            r[i] = 0.9 * r[i] + k * spec.motion_step_rad * n01(rng);
          }
        f.motion.push_back(AffineTransform::rigid(t, r, pivot));
      }
      const FunctionalPhantom p = make_functional_phantom(f);
      Volume bold = p.forward;
      add_tissue_fluctuations(bold, spec, head, pose, rng);
      to_float(bold);
      const std::string stem = sub + "_task-rest_run-" + std::to_string(run) + "_bold";
      write_volume(bold, sd / "func" / (stem + ".nii.gz"));
      write_json(sd / "func" / (stem + ".json"), json{{"TaskName", "rest"},
                                                     {"RepetitionTime", spec.tr_seconds},
                                                     {"SliceTiming", slice_times},
                                                     {"PhaseEncodingDirection", "j"},
                                                     {"TotalReadoutTime", spec.readout_time}});
      std::vector<std::array<double, 6>> params;
      for (const auto& m : p.truth.transforms)
        params.push_back(motion_params(AffineTransform::from_matrix(m, Dof::Rigid, p.truth.pivot)));
      const auto fd = framewise_displacement(params, 35.0);
      double mean_fd = 0.0;
      for (std::size_t i = kDiscardedLeadingFrames; i < fd.size(); ++i) mean_fd += fd[i];
      mean_fd /= static_cast<double>(fd.size() - kDiscardedLeadingFrames);
      js["runs"].push_back({{"stem", stem},
                            {"injected_mean_fd_mm", mean_fd},
                            {"region_names", p.truth.region_names},
                            {"signal_correlations", p.truth.signal_correlations}});
    }

    if (spec.fieldmaps) {
      FunctionalPhantomSpec f;
      f.dims = spec.epi_dims;
      f.voxel_size = {spec.epi_voxel_mm, spec.epi_voxel_mm, spec.epi_voxel_mm};
      f.frames = 3;
      f.tr_seconds = 6.0;
      f.noise_sigma = spec.noise_sigma;
      f.field = field;
      f.anatomy = epi_scanner;
      f.seed = spec.seed * 1000 + static_cast<std::uint64_t>(si * 10);
      const FunctionalPhantom p = make_functional_phantom(f);
      Volume ap = p.forward, pa = p.reverse;
      to_float(ap);
      to_float(pa);
      const std::string base = sub + "_dir-";
      write_volume(ap, sd / "fmap" / (base + "AP_epi.nii.gz"));
      write_volume(pa, sd / "fmap" / (base + "PA_epi.nii.gz"));
      write_json(sd / "fmap" / (base + "AP_epi.json"),
                 json{{"PhaseEncodingDirection", "j"}, {"TotalReadoutTime", spec.readout_time}});
      write_json(sd / "fmap" / (base + "PA_epi.json"),
                 json{{"PhaseEncodingDirection", "j-"}, {"TotalReadoutTime", spec.readout_time}});
      js["field_peak_mm"] = spec.field_peak_mm;
      js["field_center_scanner"] = vec(field.center);
    }
    truth["subjects"].push_back(js);
  }
  write_json(res / "ground_truth.json", truth);
  return {root, root / "neopipe.cfg", res / "ground_truth.json"};
}

}  // namespace neors
