#include "neors/pipeline.hpp"

#include "neors/connectivity.hpp"
#include "neors/denoise.hpp"
#include "neors/distortion.hpp"
#include "neors/image_ops.hpp"
#include "neors/motion.hpp"
#include "neors/registration.hpp"
#include "neors/segmentation.hpp"
#include "neors/skull_strip.hpp"
#include "neors/slice_timing.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace neors {

namespace fs = std::filesystem;
using nlohmann::json;

const char* subject_state_name(SubjectState s) {
  switch (s) {
    case SubjectState::Ok: return "ok";
    case SubjectState::NoUsableRuns: return "no usable runs";
    case SubjectState::Failed: return "failed";
  }
  return "?";
}

bool PipelineReport::any_failed() const {
  return std::any_of(subjects.begin(), subjects.end(), [](const auto& s) { return s.state == SubjectState::Failed; });
}

int PipelineReport::exit_code() const { return any_failed() ? 1 : 0; }

void Console::line(const std::string& s) {
  if (!out_) return;
  std::lock_guard lock(mu_);
  *out_ << s << "\n";
  out_->flush();
}

fs::path subject_dir(const PipelineConfig& c, const fs::path& dataset, const std::string& subject) {
  const fs::path root = c.working_dir.empty() ? dataset / "derivatives" / "neors" : c.working_dir;
  return root / subject;
}

fs::path output_files_dir(const PipelineConfig& c, const fs::path& dataset, const std::string& subject) {
  return subject_dir(c, dataset, subject) / "Output_files";
}

namespace {

struct StageFailure : std::runtime_error {
  StageFailure(std::string stage, const std::string& what) : std::runtime_error(what), stage(std::move(stage)) {}
  std::string stage;
};

// Computed volumes are stored as float32; values are rounded first so the file holds them exactly
// and a resumed run reads back what a fresh run passes on.
void save_f32(Volume v, const fs::path& path) {
  for (double& x : v.data()) x = static_cast<double>(static_cast<float>(x));
  v.header().datatype = Datatype::Float32;
  write_volume(v, path);
}

void save_mask(Volume v, const fs::path& path) {
  v.header().datatype = Datatype::UInt8;
  write_volume(v, path);
}

std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.6g", v);
  return b;
}

void write_lines(const fs::path& path, std::span<const double> values) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  char b[32];
  for (double v : values) {
    std::snprintf(b, sizeof b, "%.10g", v);
    f << b << "\n";
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open");
  return json::parse(f);
}

std::vector<double> fd_of(const fs::path& motion_par, double radius) {
  return read_motion_params(motion_par, radius).fd_mm;
}

// Outline of a template: voxels above 20% of its 98th percentile of nonzero values.
Volume template_outline(const Volume& t) {
  std::vector<double> nz;
  for (double v : t.data())
    if (v > 0.0) nz.push_back(v);
  if (nz.empty()) return binary_threshold(t, 0.0);
  return binary_threshold(t, 0.2 * percentile(nz, 98.0));
}

Volume crop_frames(const Volume& v, std::size_t start, std::size_t length) {
  VolumeHeader h = v.header();
  h.dims[3] = length;
  const std::size_t nv = h.voxels_per_frame();
  std::vector<double> d(v.data().begin() + static_cast<std::ptrdiff_t>(start * nv),
                        v.data().begin() + static_cast<std::ptrdiff_t>((start + length) * nv));
  return Volume(h, std::move(d));
}

CensorMask slice_mask(const CensorMask& m, std::size_t start, std::size_t length) {
  CensorMask out;
  out.keep.assign(m.keep.begin() + static_cast<std::ptrdiff_t>(start),
                  m.keep.begin() + static_cast<std::ptrdiff_t>(start + length));
  out.reason.assign(m.reason.begin() + static_cast<std::ptrdiff_t>(start),
                    m.reason.begin() + static_cast<std::ptrdiff_t>(start + length));
  return out;
}

class SubjectRunner {
 public:
  SubjectRunner(const PipelineConfig& cfg, const fs::path& dataset, const SubjectLayout& s, Console& console)
      : cfg_(cfg), layout_(s), console_(console) {
    root_ = subject_dir(cfg, dataset, s.name());
    out_ = root_ / "Output_files";
    state_ = root_ / ".neors";
    for (const char* d : {"anat", "anat/seg", "func", "fmap", "qc", "final", "connectivity"})
      fs::create_directories(out_ / d);
    fs::create_directories(state_);
    log_.open(root_ / "neopipe.log", std::ios::trunc);
    PipelineConfig key = cfg;
    key.working_dir.clear();
    key.n_cores = 1;
    config_key_ = serialize_config(key);
    report_.subject = s.name();
  }

  SubjectOutcome run();

 private:
  using Paths = std::vector<fs::path>;

  void note(const std::string& stage, const std::string& status, const std::string& detail, double seconds = -1.0) {
    report_.stages.push_back({stage, status, detail});
    std::string line = stage + ": " + status + (detail.empty() ? "" : " (" + detail + ")");
    if (seconds >= 0.0) line += " [" + fmt(seconds) + " s]";
    log_ << line << "\n";
    log_.flush();
    console_.line(layout_.name() + " " + line);
  }

  void skip(const std::string& stage, const std::string& why) { note(stage, "skipped", why); }

  void warn(const std::string& w) {
    report_.warnings.push_back(w);
    log_ << "warning: " << w << "\n";
  }

  std::string rel(const fs::path& p) const { return fs::relative(p, out_).generic_string(); }

  bool up_to_date(const fs::path& stamp, const std::string& key, const Paths& inputs, const Paths& outputs,
                  std::vector<std::string>& warnings) const {
    if (!fs::exists(stamp)) return false;
    json j;
    try {
      j = read_json(stamp);
    } catch (const std::exception&) {
      return false;
    }
    if (j.value("key", std::string()) != key) return false;
    fs::file_time_type newest_input = fs::file_time_type::min();
    for (const auto& p : inputs) {
      if (!fs::exists(p)) return false;
      newest_input = std::max(newest_input, fs::last_write_time(p));
    }
    for (const auto& p : outputs)
      if (!fs::exists(p) || fs::last_write_time(p) < newest_input) return false;
    warnings = j.value("warnings", std::vector<std::string>{});
    return true;
  }

  // Runs `fn` unless every output exists, is at least as new as every input, and the stage stamp
  // matches the current configuration. `fn` returns the stage's warnings.
  void stage(const std::string& name, const Paths& inputs, const Paths& outputs,
             const std::function<std::vector<std::string>()>& fn, const std::string& extra = "") {
    std::string key = config_key_ + "stage=" + name + "\n" + extra;
    for (const auto& p : inputs) key += "in=" + p.generic_string() + "\n";
    for (const auto& p : outputs) key += "out=" + p.generic_string() + "\n";
    std::string file = name;
    std::replace(file.begin(), file.end(), '/', '_');
    const fs::path stamp = state_ / (file + ".stamp");
    std::vector<std::string> warnings;
    if (up_to_date(stamp, key, inputs, outputs, warnings)) {
      for (const auto& w : warnings) warn(w);
      for (const auto& p : outputs) report_.artifacts.push_back(rel(p));
      note(name, "ok", "up to date");
      return;
    }
    fs::remove(stamp);
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    try {
      warnings = fn();
    } catch (const std::exception& e) {
      note(name, "failed", e.what(), elapsed());
      throw StageFailure(name, e.what());
    }
    for (const auto& w : warnings) warn(w);
    for (const auto& p : outputs) report_.artifacts.push_back(rel(p));
    write_json(stamp, json{{"key", key}, {"warnings", warnings}});
    ++computed_;
    note(name, "ok", "", elapsed());
  }

  double run_tr(const FuncRun& r, const Volume& v) const {
    if (cfg_.tr_seconds > 0.0) return cfg_.tr_seconds;
    if (r.sidecar) {
      const auto meta = parse_sidecar(*r.sidecar);
      if (meta.repetition_time && *meta.repetition_time > 0.0) return *meta.repetition_time;
    }
    if (v.header().tr_seconds > 0.0) return v.header().tr_seconds;
    throw ConfigError(r.bold.string() + ": repetition time unknown (set tr_seconds)");
  }

  void run_structural();
  void ensure_field();
  void run_functional(const FuncRun& r);
  void finish_functional();

  const PipelineConfig& cfg_;
  const SubjectLayout& layout_;
  Console& console_;
  fs::path root_, out_, state_;
  std::ofstream log_;
  std::string config_key_;
  SubjectReport report_;
  std::size_t computed_ = 0;

  fs::path t2_reoriented_, aligned_1mm_, aligned_3mm_, brain_1mm_;
  fs::path gm3_, wm3_, csf3_;
  bool field_ready_ = false;
  fs::path field_path_, field_meta_;
  std::vector<fs::path> accepted_runs_;
  std::vector<fs::path> accepted_censor_;
  std::vector<std::string> accepted_names_;
};

void SubjectRunner::run_structural() {
  t2_reoriented_ = out_ / "anat" / "T2w_reoriented.nii";
  Paths outs{t2_reoriented_};
  Paths ins{layout_.anat_t2};
  for (const auto& r : layout_.func_runs) {
    fs::create_directories(out_ / "func" / r.stem);
    ins.push_back(r.bold);
    outs.push_back(out_ / "func" / r.stem / "bold_reoriented.nii");
  }
  if (layout_.fmap_pairs) {
    ins.push_back(layout_.fmap_pairs->pe_forward);
    ins.push_back(layout_.fmap_pairs->pe_reverse);
    outs.push_back(out_ / "fmap" / "forward_reoriented.nii");
    outs.push_back(out_ / "fmap" / "reverse_reoriented.nii");
  }
  stage("reorient", ins, outs, [&] {
    for (std::size_t i = 0; i < ins.size(); ++i) write_volume(reorient_to_standard(read_volume(ins[i])), outs[i]);
    return std::vector<std::string>{};
  });

  aligned_1mm_ = out_ / "anat" / "T2w_template_1mm.nii";
  aligned_3mm_ = out_ / "anat" / "T2w_template_3mm.nii";
  const fs::path xfm = out_ / "anat" / "T2w_to_template.mat";
  const fs::path qc_reg = out_ / "qc" / "t2_to_template.png";
  stage("t2_to_template", {t2_reoriented_, cfg_.template_1mm, cfg_.template_3mm},
        {aligned_1mm_, aligned_3mm_, xfm, qc_reg}, [&] {
          const Volume t1 = read_volume(cfg_.template_1mm);
          const auto a = register_t2_to_template(read_volume(t2_reoriented_), t1, read_volume(cfg_.template_3mm));
          save_f32(a.aligned_1mm, aligned_1mm_);
          save_f32(a.aligned_3mm, aligned_3mm_);
          save_transform(a.registration, xfm);
          render_contour_overlay(a.aligned_1mm, template_outline(t1), qc_reg, layout_.name() + " T2 to template");
          std::vector<std::string> w;
          if (!a.registration.converged) w.push_back("T2 to template registration did not converge");
          return w;
        });

  const fs::path mask = out_ / "anat" / "brain_mask_1mm.nii";
  brain_1mm_ = out_ / "anat" / "T2w_brain_1mm.nii";
  const fs::path qc_strip = out_ / "qc" / "skull_strip.png";
  stage("skull_strip", {aligned_1mm_}, {mask, brain_1mm_, qc_strip}, [&] {
    const Volume t2 = read_volume(aligned_1mm_);
    const BrainMask m = strip_skull(t2, cfg_.bet_f, cfg_.bet_g);
    Volume brain = t2;
    for (std::size_t i = 0; i < brain.data().size(); ++i)
      if (m.mask.data()[i] == 0.0) brain.data()[i] = 0.0;
    save_mask(m.mask, mask);
    save_f32(brain, brain_1mm_);
    render_strip_overlay(t2, m, qc_strip);
    return std::vector<std::string>{};
  });

  // priors are listed in name order, matching load_priors
  Paths prior_files;
  if (fs::is_directory(cfg_.priors))
    for (const auto& e : fs::directory_iterator(cfg_.priors)) {
      const std::string n = e.path().filename().string();
      if (n.ends_with(".nii") || n.ends_with(".nii.gz")) prior_files.push_back(e.path());
    }
  std::sort(prior_files.begin(), prior_files.end());
  Paths seg_ins{brain_1mm_, mask, cfg_.template_3mm};
  seg_ins.insert(seg_ins.end(), prior_files.begin(), prior_files.end());
  if (!cfg_.tissue_mapping.empty()) seg_ins.push_back(cfg_.tissue_mapping);
  const fs::path a = out_ / "anat";
  gm3_ = a / "GM_mask_3mm.nii";
  wm3_ = a / "WM_mask_3mm.nii";
  csf3_ = a / "CSF_mask_3mm.nii";
  Paths seg_outs{a / "GM_mask_1mm.nii", a / "WM_mask_1mm.nii", a / "CSF_mask_1mm.nii", gm3_, wm3_, csf3_,
                 out_ / "qc" / "csf_mask.png", out_ / "qc" / "wm_mask.png"};
  for (const auto& p : prior_files) {
    std::string n = p.filename().string();
    seg_outs.push_back(a / "seg" / (n.substr(0, n.find(".nii")) + "_prob.nii"));
  }
  stage("segmentation", seg_ins, seg_outs, [&] {
    const TissuePriors priors = load_priors(cfg_.priors, cfg_.tissue_mapping);
    const Volume brain = read_volume(brain_1mm_);
    const Segmentation seg = segment_em(brain, priors, read_volume(mask));
    for (std::size_t c = 0; c < seg.names.size(); ++c)
      save_f32(seg.posteriors[c], a / "seg" / (seg.names[c] + "_prob.nii"));
    const TissueMasks m = build_masks(seg.names, seg.posteriors, priors.class_to_mask, read_volume(cfg_.template_3mm).header());
    save_mask(m.gm_1mm, seg_outs[0]);
    save_mask(m.wm_1mm, seg_outs[1]);
    save_mask(m.csf_1mm, seg_outs[2]);
    save_mask(m.gm_3mm, seg_outs[3]);
    save_mask(m.wm_3mm, seg_outs[4]);
    save_mask(m.csf_3mm, seg_outs[5]);
    const Volume t2 = read_volume(aligned_1mm_);
    render_contour_overlay(t2, m.csf_1mm, seg_outs[6], layout_.name() + " CSF mask");
    render_contour_overlay(t2, m.wm_1mm, seg_outs[7], layout_.name() + " WM mask (eroded)");
    std::vector<std::string> w = seg.warnings;
    if (!seg.converged) w.push_back("tissue segmentation stopped at the iteration limit");
    return w;
  });
}

void SubjectRunner::ensure_field() {
  if (field_ready_) return;
  const auto& fm = *layout_.fmap_pairs;
  if (!fm.forward_sidecar || !fm.reverse_sidecar)
    throw StageFailure("distortion_field", "fieldmap pair lacks JSON sidecars");
  const fs::path fwd = out_ / "fmap" / "forward_reoriented.nii";
  const fs::path rev = out_ / "fmap" / "reverse_reoriented.nii";
  field_path_ = out_ / "fmap" / "field_mm.nii";
  field_meta_ = out_ / "fmap" / "field.json";
  const fs::path acq = out_ / "fmap" / "acqparams.txt";
  const fs::path qc = out_ / "qc" / "distortion.png";
  stage("distortion_field", {fwd, rev, *fm.forward_sidecar, *fm.reverse_sidecar, t2_reoriented_},
        {field_path_, field_meta_, acq, qc}, [&] {
          write_acqparams(*fm.forward_sidecar, *fm.reverse_sidecar, acq);
          const SidecarMeta meta = parse_sidecar(*fm.forward_sidecar);
          const Volume f = read_volume(fwd), r = read_volume(rev);
          const int axis = standard_axis_map(read_volume(fm.pe_forward).header())[meta.phase_encoding->axis];
          const DisplacementField d = estimate_field(f, r, axis, *meta.total_readout_time);
          save_f32(d.field_mm, field_path_);
          write_json(field_meta_, json{{"pe_axis", axis},
                                       {"readout_time", d.readout_time},
                                       {"phase_encoding", meta.phase_encoding->token()},
                                       {"iterations", d.iterations}});
          const DisplacementField stored{read_volume(field_path_), axis, d.readout_time, {}, d.iterations};
          const Volume fm_mean = temporal_mean(f), rm_mean = temporal_mean(r);
          render_distortion_panel(read_volume(t2_reoriented_), fm_mean, rm_mean,
                                  apply_field(fm_mean, stored, Polarity::Forward),
                                  apply_field(rm_mean, stored, Polarity::Reverse), qc);
          return d.warnings;
        });
  field_ready_ = true;
}

void SubjectRunner::run_functional(const FuncRun& r) {
  const fs::path F = out_ / "func" / r.stem;
  const std::string tag = "[" + r.stem + "]";
  const fs::path raw = F / "bold_reoriented.nii";

  // slice timing
  const fs::path st = F / "bold_st.nii";
  Paths st_ins{raw};
  if (r.sidecar) st_ins.push_back(*r.sidecar);
  if (cfg_.enable_slice_timing) {
    stage("slice_timing" + tag, st_ins, {st}, [&] {
      const Volume v = read_volume(raw);
      const double tr = run_tr(r, v);
      std::optional<SidecarMeta> meta;
      if (r.sidecar) meta = parse_sidecar(*r.sidecar);
      // slice axis after reorientation
      const auto axes = standard_axis_map(read_volume(r.bold).header());
      if (axes[2] != 2) throw std::invalid_argument("slice axis is not the inferior-superior axis after reorientation");
      const auto times = slice_order_to_times(cfg_.slice_order, v.header().nz(), tr, meta);
      save_f32(correct_slice_timing(v, times, tr), st);
      return std::vector<std::string>{};
    });
  } else {
    stage("slice_timing" + tag, {raw}, {st}, [&] {
      fs::copy_file(raw, st, fs::copy_options::overwrite_existing);
      return std::vector<std::string>{"slice timing disabled; output is a copy of the input"};
    }, "disabled\n");
  }

  // realignment and FD
  const fs::path realigned = F / "bold_realigned.nii";
  const fs::path motion = F / "motion.par";
  const fs::path fd_file = F / "fd.txt";
  const fs::path qc_motion = out_ / "qc" / (r.stem + "_motion.png");
  stage("realign" + tag, {st}, {realigned, motion, fd_file, qc_motion}, [&] {
    const Volume v = read_volume(st);
    RealignOptions o;
    o.reference_frame = static_cast<std::size_t>(cfg_.reference_frame);
    o.radius_mm = cfg_.head_radius_mm;
    const RealignResult res = realign(v, o);
    save_f32(res.corrected, realigned);
    write_motion_params(res.trace, motion);
    const MotionTrace back = read_motion_params(motion, cfg_.head_radius_mm);
    write_lines(fd_file, back.fd_mm);
    render_motion_plot(back, cfg_.fd_max_mm, qc_motion, r.stem);
    std::vector<std::string> w;
    const auto flagged = std::count(res.flagged.begin(), res.flagged.end(), true);
    if (flagged > 0) w.push_back(r.stem + ": " + std::to_string(flagged) + " frames did not converge in realignment");
    return w;
  });

  // best section
  fs::path bold = realigned;
  std::size_t section_start = 0;
  std::optional<std::size_t> section_length;
  const fs::path section_json = F / "section.json";
  if (cfg_.enable_best_volumes) {
    const fs::path cropped = F / "bold_section.nii";
    stage("best_section" + tag, {realigned, motion}, {section_json, cropped}, [&] {
      const Volume v = read_volume(realigned);
      const auto fd = fd_of(motion, cfg_.head_radius_mm);
      const FrameInterval iv = select_best_section(fd, run_tr(r, v), cfg_.best_section_seconds);
      write_json(section_json, json{{"start", iv.start}, {"length", iv.length}, {"mean_fd", iv.mean_fd}});
      save_f32(crop_frames(v, iv.start, iv.length), cropped);
      return std::vector<std::string>{};
    });
    const json j = read_json(section_json);
    section_start = j.at("start").get<std::size_t>();
    section_length = j.at("length").get<std::size_t>();
    bold = cropped;
  } else {
    skip("best_section" + tag, "disabled");
  }

  // distortion
  if (cfg_.enable_fmap && layout_.fmap_pairs) {
    ensure_field();
    const fs::path unwarped = F / "bold_unwarped.nii";
    Paths ins{bold, field_path_, field_meta_};
    if (r.sidecar) ins.push_back(*r.sidecar);
    const fs::path src = bold;
    stage("distortion" + tag, ins, {unwarped}, [&] {
      std::vector<std::string> w;
      const json meta = read_json(field_meta_);
      const PhaseEncoding fwd = parse_phase_encoding(meta.at("phase_encoding").get<std::string>());
      Polarity pol = Polarity::Forward;
      std::optional<SidecarMeta> sc;
      if (r.sidecar) sc = parse_sidecar(*r.sidecar);
      if (sc && sc->phase_encoding) {
        if (sc->phase_encoding->axis != fwd.axis)
          throw DistortionError(r.stem + ": BOLD phase encoding " + sc->phase_encoding->token() +
                                " is not along the fieldmap axis " + fwd.token());
        if (sc->phase_encoding->sign != fwd.sign) pol = Polarity::Reverse;
      } else {
        w.push_back(r.stem + ": no PhaseEncodingDirection in sidecar; assuming the fieldmap's forward direction");
      }
      const DisplacementField field{read_volume(field_path_), meta.at("pe_axis").get<int>(),
                                    meta.at("readout_time").get<double>(), {}, 0};
      save_f32(apply_field(read_volume(src), field, pol, field.pe_axis), unwarped);
      return w;
    });
    bold = unwarped;
  } else {
    skip("distortion" + tag, cfg_.enable_fmap ? "no fieldmap pair" : "disabled");
  }

  // EPI to template
  const fs::path mean_epi = F / "mean_epi.nii";
  const fs::path epi_xfm = F / "epi_to_template.mat";
  const fs::path in_template = F / "bold_template.nii";
  const fs::path qc_epi = out_ / "qc" / (r.stem + "_epi_to_template.png");
  stage("epi_to_template" + tag, {bold, cfg_.template_3mm, gm3_}, {mean_epi, epi_xfm, in_template, qc_epi}, [&] {
    const Volume v = read_volume(bold);
    const Volume tmpl = read_volume(cfg_.template_3mm);
    const Volume m = temporal_mean(v);
    save_f32(m, mean_epi);
    const RegistrationResult reg = register_epi_to_template(m, tmpl);
    save_transform(reg, epi_xfm);
    Volume out = resample(v, reg.transform, tmpl.header().spatial(), Interpolation::Trilinear);
    out.header().tr_seconds = v.header().tr_seconds;
    save_f32(out, in_template);
    render_contour_overlay(temporal_mean(read_volume(in_template)), read_volume(gm3_), qc_epi,
                           r.stem + " mean EPI, GM contour");
    std::vector<std::string> w;
    if (!reg.converged) w.push_back(r.stem + ": EPI to template registration did not converge");
    return w;
  });

  // censoring and run exclusion
  const fs::path censor_file = F / "censor.txt";
  const fs::path run_json = F / "run.json";
  Paths cins{motion};
  if (cfg_.enable_best_volumes) cins.push_back(section_json);
  auto censor_of = [&]() {
    const auto fd = fd_of(motion, cfg_.head_radius_mm);
    CensorMask c = build_censor_mask(fd, cfg_.fd_max_mm);
    if (section_length) c = slice_mask(c, section_start, *section_length);
    return c;
  };
  stage("censor" + tag, cins, {censor_file, run_json}, [&] {
    const auto fd = fd_of(motion, cfg_.head_radius_mm);
    const CensorMask c = censor_of();
    write_censor_list(c, censor_file);
    double mean_fd = 0.0;
    bool accepted = true;
    if (section_length) {
      // the selected section stands in for the run
      for (std::size_t t = section_start; t < section_start + *section_length; ++t) mean_fd += fd[t];
      mean_fd /= static_cast<double>(*section_length);
      accepted = !(mean_fd > cfg_.fd_average_max_mm);
    } else {
      const RunEvaluation e = evaluate_run(fd, cfg_.fd_average_max_mm);
      mean_fd = e.mean_fd;
      accepted = e.accepted;
    }
    if (!cfg_.enable_run_exclusion) accepted = true;
    write_json(run_json, json{{"mean_fd_mm", mean_fd},
                              {"frames", c.frames()},
                              {"kept_frames", c.kept_count()},
                              {"accepted", accepted}});
    return std::vector<std::string>{};
  });
  const json rj = read_json(run_json);
  RunSummary summary{r.stem, rj.at("mean_fd_mm").get<double>(), rj.at("frames").get<std::size_t>(),
                     rj.at("kept_frames").get<std::size_t>(), rj.at("accepted").get<bool>()};
  report_.runs.push_back(summary);
  if (!summary.accepted) {
    warn(r.stem + ": rejected, mean FD " + fmt(summary.mean_fd_mm) + " mm > " + fmt(cfg_.fd_average_max_mm) + " mm");
    skip("regress" + tag, "run rejected");
    skip("smooth" + tag, "run rejected");
    return;
  }

  // confound regression with band-pass
  const fs::path confounds = F / "confounds.tsv";
  const fs::path denoised = F / "bold_denoised.nii";
  Paths rins{in_template, motion, gm3_, wm3_, csf3_};
  if (cfg_.enable_best_volumes) rins.push_back(section_json);
  stage("regress" + tag, rins, {confounds, denoised}, [&] {
    const Volume v = read_volume(in_template);
    MotionTrace trace = read_motion_params(motion, cfg_.head_radius_mm);
    if (section_length) {
      trace.params.assign(trace.params.begin() + static_cast<std::ptrdiff_t>(section_start),
                          trace.params.begin() + static_cast<std::ptrdiff_t>(section_start + *section_length));
      trace.fd_mm.assign(trace.fd_mm.begin() + static_cast<std::ptrdiff_t>(section_start),
                         trace.fd_mm.begin() + static_cast<std::ptrdiff_t>(section_start + *section_length));
    }
    const TissueSignals tissue = extract_tissue_signals(v, read_volume(gm3_), read_volume(wm3_), read_volume(csf3_));
    BandSpec band;
    band.high_pass_hz = cfg_.band_hz.first;
    band.low_pass_hz = cfg_.band_hz.second;
    band.tr_seconds = v.header().tr_seconds > 0.0 ? v.header().tr_seconds : run_tr(r, v);
    band.n_frames = v.header().nt();
    const ConfoundMatrix cm =
        build_confounds(expand_motion(trace, cfg_.motion_order), tissue, cfg_.global_signal, band, censor_of());
    write_confounds_tsv(cm, confounds);
    save_f32(project_confounds(v, cm), denoised);
    return std::vector<std::string>{};
  });

  const fs::path smoothed = F / "bold_smoothed.nii";
  stage("smooth" + tag, {denoised}, {smoothed}, [&] {
    save_f32(smooth_gaussian(read_volume(denoised), cfg_.fwhm_mm), smoothed);
    return std::vector<std::string>{};
  });
  accepted_runs_.push_back(smoothed);
  accepted_censor_.push_back(censor_file);
  accepted_names_.push_back(r.stem);
}

CensorMask read_censor(const fs::path& list, std::size_t frames) {
  CensorMask c;
  c.keep.assign(frames, true);
  c.reason.assign(frames, CensorReason::Kept);
  std::ifstream f(list);
  for (std::size_t t; f >> t;)
    if (t < frames) {
      c.keep[t] = false;
      c.reason[t] = t < kDiscardedLeadingFrames ? CensorReason::FirstFive : CensorReason::FdExceeded;
    }
  return c;
}

void SubjectRunner::finish_functional() {
  const fs::path final_bold = out_ / "final" / "final_BOLD.nii";
  const fs::path runs_json = out_ / "final" / "runs.json";
  const fs::path final_censor = out_ / "final" / "censor.txt";
  Paths ins = accepted_runs_;
  ins.insert(ins.end(), accepted_censor_.begin(), accepted_censor_.end());
  std::string names;
  for (const auto& n : accepted_names_) names += n + "\n";
  stage("merge", ins, {final_bold, runs_json, final_censor}, [&] {
    std::vector<Volume> runs;
    for (const auto& p : accepted_runs_) runs.push_back(read_volume(p));
    const MergedRuns m = merge_runs(runs);
    CensorMask all;
    json spans = json::array();
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const CensorMask c = read_censor(accepted_censor_[i], runs[i].header().nt());
      all.keep.insert(all.keep.end(), c.keep.begin(), c.keep.end());
      all.reason.insert(all.reason.end(), c.reason.begin(), c.reason.end());
      spans.push_back({{"run", accepted_names_[i]}, {"start", m.spans[i].start}, {"length", m.spans[i].length}});
    }
    save_f32(m.data, final_bold);
    write_json(runs_json, json{{"runs", spans}});
    write_censor_list(all, final_censor);
    return std::vector<std::string>{};
  }, names);

  const SeedSet seeds = load_seeds(cfg_.seeds);
  const fs::path matrix = out_ / "connectivity" / "seed_matrix.tsv";
  Paths couts{matrix};
  for (const auto& s : seeds.seeds) {
    couts.push_back(out_ / "connectivity" / (s.name + "_r.nii"));
    couts.push_back(out_ / "connectivity" / (s.name + "_z.nii"));
  }
  stage("connectivity", {final_bold, final_censor, cfg_.seeds}, couts, [&] {
    std::vector<std::string> w;
    if (seeds.space != "template") w.push_back("seed file space '" + seeds.space + "' is not 'template'");
    const Volume bold = read_volume(final_bold);
    const CensorMask c = read_censor(final_censor, bold.header().nt());
    for (std::size_t i = 0; i < seeds.seeds.size(); ++i) {
      const SeedMap m = seed_to_voxel_map(bold, seeds.seeds[i], c);
      save_f32(m.r, couts[1 + 2 * i]);
      save_f32(m.z, couts[2 + 2 * i]);
    }
    if (seeds.seeds.size() >= 2) write_matrix_tsv(seed_to_seed_matrix(bold, seeds, c), matrix);
    else std::ofstream(matrix) << "seed\n";
    return w;
  });
}

SubjectOutcome SubjectRunner::run() {
  SubjectOutcome o;
  o.subject = layout_.name();
  try {
    run_structural();
    for (const auto& r : layout_.func_runs) run_functional(r);
    if (accepted_runs_.empty()) {
      o.state = SubjectState::NoUsableRuns;
      o.message = "no usable runs";
      skip("merge", "no usable runs");
      skip("connectivity", "no usable runs");
    } else {
      finish_functional();
    }
  } catch (const StageFailure& e) {
    o.state = SubjectState::Failed;
    o.message = e.stage + ": " + e.what();
  } catch (const std::exception& e) {
    o.state = SubjectState::Failed;
    o.message = e.what();
    note("pipeline", "failed", e.what());
  }
  if (o.state == SubjectState::NoUsableRuns) report_.warnings.push_back("no usable runs");
  if (!write_subject_report(report_, out_)) log_ << "warning: summary.json could not be written\n";
  log_ << "subject: " << subject_state_name(o.state) << (o.message.empty() ? "" : " (" + o.message + ")") << "\n";
  console_.line(layout_.name() + " done: " + subject_state_name(o.state) +
                (o.state == SubjectState::Failed ? " (" + o.message + ")" : ""));
  o.report = report_;
  o.stages_computed = computed_;
  return o;
}

}  // namespace

SubjectOutcome run_subject(const PipelineConfig& config, const fs::path& dataset, const SubjectLayout& subject,
                           Console& console) {
  try {
    SubjectRunner runner(config, dataset, subject, console);
    return runner.run();
  } catch (const std::exception& e) {
    SubjectOutcome o;
    o.subject = subject.name();
    o.state = SubjectState::Failed;
    o.message = e.what();
    console.line(subject.name() + " done: failed (" + o.message + ")");
    return o;
  }
}

PipelineReport run_pipeline(const PipelineConfig& config, const fs::path& dataset,
                            const std::vector<std::string>& subjects, int n_cores, std::ostream* console_out) {
  config.validate();
  auto require = [](const fs::path& p, const char* key) {
    if (p.empty()) throw ConfigError(std::string(key) + " is not set");
    if (!fs::exists(p)) throw ConfigError(std::string(key) + ": " + p.string() + " does not exist");
  };
  require(config.template_1mm, "template_1mm");
  require(config.template_3mm, "template_3mm");
  require(config.priors, "priors");
  require(config.seeds, "seeds");
  if (!config.tissue_mapping.empty()) require(config.tissue_mapping, "tissue_mapping");

  const DatasetScan scan = scan_dataset(dataset);
  std::vector<const SubjectLayout*> todo;
  if (subjects.empty()) {
    for (const auto& s : scan.subjects) todo.push_back(&s);
  } else {
    for (std::string name : subjects) {
      if (!name.starts_with("sub-")) name = "sub-" + name;
      const auto it = std::find_if(scan.subjects.begin(), scan.subjects.end(),
                                   [&](const SubjectLayout& s) { return s.name() == name; });
      if (it == scan.subjects.end()) throw BidsError(name + ": subject not found or incomplete in " + dataset.string());
      todo.push_back(&*it);
    }
  }

  PipelineReport report;
  report.scan_diagnostics = scan.diagnostics;
  Console console(console_out);
  for (const auto& d : scan.diagnostics) console.line(d.subject + " excluded: " + d.message);

  report.subjects.resize(todo.size());
  const int workers = std::max(1, std::min<int>(n_cores > 0 ? n_cores : config.n_cores, static_cast<int>(todo.size())));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < todo.size();)
      report.subjects[i] = run_subject(config, dataset, *todo[i], console);
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  return report;
}

}  // namespace neors
