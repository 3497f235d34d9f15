// Copyright 2026 The beamsplat Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "beamsplat/cli.hpp"

#include "beamsplat/grad.hpp"
#include "beamsplat/metrics.hpp"
#include "beamsplat/oracle.hpp"
#include "beamsplat/parallel.hpp"
#include "beamsplat/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace beamsplat {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Ablations {
  bool pseudo_plane = false;
  bool disable_aabb = false;
  bool disable_ls = false;
  bool disable_lalpha = false;
  bool disable_ngs_view_inputs = false;

  void apply(TrainConfig& cfg) const {
    if (pseudo_plane) cfg.projection = "pseudo";
    if (disable_aabb) cfg.compact_aabb = false;
    if (disable_ls) cfg.w_scale = 0.0;
    if (disable_lalpha) cfg.w_alpha = 0.0;
    if (disable_ngs_view_inputs) cfg.view_inputs = false;
  }
  ordered_json json() const {
    return {{"pseudo-plane", pseudo_plane},
            {"disable-aabb", disable_aabb},
            {"disable-ls", disable_ls},
            {"disable-lalpha", disable_lalpha},
            {"disable-ngs-view-inputs", disable_ngs_view_inputs}};
  }
};

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  bool deterministic = true;
  bool fast = false;
  Ablations ablations;
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string frame_name(int i, const char* ext) {
  std::ostringstream s;
  s << std::setw(4) << std::setfill('0') << i << ext;
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

/// Effective config: file (when given), then command-line overrides.
TrainConfig effective_config(const Common& c) {
  TrainConfig cfg;
  if (!c.config.empty()) cfg = load_train_config(c.config);
  if (c.seed_set) cfg.seed = c.seed;
  if (c.threads > 0) cfg.threads = c.threads;
  cfg.deterministic = c.deterministic && !c.fast;
  c.ablations.apply(cfg);
  cfg.validate();
  return cfg;
}

ordered_json manifest_base(const std::string& command, const Common& c, const std::vector<std::string>& args) {
  ordered_json m;
  m["command"] = command;
  m["argv"] = args;
  m["config"] = c.config;
  m["seed"] = c.seed_set ? ordered_json(c.seed) : ordered_json(nullptr);
  m["threads"] = thread_count();
  m["deterministic"] = c.deterministic && !c.fast;
  m["ablations"] = c.ablations.json();
  m["started"] = timestamp();
  return m;
}

void finish_manifest(ordered_json m, const fs::path& dir) {
  m["finished"] = timestamp();
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

Vec3d parse_triple(const std::string& s, const std::string& what) {
  std::string t = s;
  std::replace(t.begin(), t.end(), ',', ' ');
  std::istringstream in(t);
  Vec3d v;
  if (!(in >> v.x() >> v.y() >> v.z())) throw DomainError("bad " + what + " '" + s + "', expected x,y,z");
  return v;
}

Pose parse_pose_arg(const std::string& s) {
  std::string t = s;
  std::replace(t.begin(), t.end(), ',', ' ');
  std::istringstream in(t);
  double x, y, z, yaw = 0.0;
  if (!(in >> x >> y >> z)) throw DomainError("bad pose '" + s + "', expected x,y,z[,yaw]");
  if (!(in >> yaw)) yaw = 0.0;
  return make_pose(Vec3d(x, y, z), yaw);
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  std::string scene = "urban-toy";
  std::string trajectory;
  std::string spec;
  std::string out;
  int frames = 54;
  int val = 4;
  double step = 1.0;
  double height = 1.8;
  int beams = 0;
};

AnalyticScene resolve_scene(const std::string& name) {
  if (name == "urban-toy") return urban_toy(true);
  if (name == "urban-toy-static") return urban_toy(false);
  return load_scene(name);
}

int cmd_synth(const SynthArgs& a, const Common& c, const std::vector<std::string>& args, std::ostream& out) {
  AnalyticScene scene = resolve_scene(a.scene);
  if (c.seed_set) scene.seed = c.seed;
  SensorSpec spec = a.spec.empty() ? urban_toy_spec() : [&] {
    std::ifstream in(a.spec);
    if (!in) throw std::runtime_error("cannot read " + a.spec);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_sensor_spec(ss.str());
  }();
  if (a.beams > 0) spec.beams = a.beams;
  const std::vector<Pose> traj =
      a.trajectory.empty() ? straight_trajectory(a.frames, a.step, a.height) : load_poses(a.trajectory);
  if (traj.empty()) throw DomainError("synth: empty trajectory");
  if (a.val < 0 || a.val >= static_cast<int>(traj.size()))
    throw DomainError("synth: validation count must leave at least one training frame");
  const Dataset data = generate_sequence(scene, traj, spec, a.val);
  save_dataset(data, a.out);
  write_text(fs::path(a.out) / "scene.txt", format_scene(scene));
  write_text(fs::path(a.out) / "spec.txt", format_sensor_spec(spec));
  auto m = manifest_base("synth", c, args);
  m["inputs"] = {{"scene", a.scene}, {"trajectory", a.trajectory}, {"spec", a.spec}};
  m["outputs"] = {{"dataset", a.out}};
  m["frames"] = data.frames.size();
  m["train"] = data.train.size();
  m["val"] = data.val.size();
  finish_manifest(m, a.out);
  out << "wrote " << data.frames.size() << " frames (" << data.train.size() << " train, " << data.val.size()
      << " val) to " << a.out << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string data;
  std::string out;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, const Common& c, const std::vector<std::string>& args, std::ostream& out,
              std::ostream& err) {
  const TrainConfig cfg = effective_config(c);
  if (cfg.threads > 0) set_thread_count(cfg.threads);
  const Dataset data = load_dataset(a.data);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.txt", format_train_config(cfg));
  auto m = manifest_base("train", c, args);
  m["inputs"] = {{"dataset", a.data}};
  m["outputs"] = {{"checkpoint", (fs::path(a.out) / "checkpoint.bsck").string()},
                  {"curves", (fs::path(a.out) / "curves.csv").string()},
                  {"config", (fs::path(a.out) / "config.txt").string()}};
  m["effective_seed"] = cfg.seed;

  TrainHooks hooks;
  hooks.checkpoint = [&](const TrainState& s, int it) {
    save_checkpoint(make_checkpoint(s, data.spec), fs::path(a.out) / ("checkpoint_" + std::to_string(it) + ".bsck"));
  };
  if (!a.quiet) {
    hooks.progress = [&](const CurveRow& r) {
      if (r.iteration % 100 == 0 || r.iteration == cfg.iterations)
        out << "iter " << r.iteration << " loss " << r.loss.total << " depth " << r.loss.depth << " anchors "
            << r.anchors << " t " << r.wall_seconds << "s\n"
            << std::flush;
    };
  }
  TrainState state = TrainState::create(initialize_field(data, cfg));
  try {
    const auto rows = train_loop(state, data, cfg, hooks);
    save_curves(rows, fs::path(a.out) / "curves.csv");
  } catch (const DivergenceError& e) {
    save_curves(e.curves, fs::path(a.out) / "curves.csv");
    m["status"] = "diverged";
    m["diagnostic"] = e.what();
    finish_manifest(m, a.out);
    err << "error: " << e.what() << "\n";
    return kExitDivergence;
  }
  save_checkpoint(make_checkpoint(state, data.spec), fs::path(a.out) / "checkpoint.bsck");
  m["status"] = "ok";
  m["anchors"] = state.field.anchor_count();
  m["rejected_steps"] = state.rejected;
  finish_manifest(m, a.out);
  return kExitOk;
}

// ------------------------------------------------------------------ render

struct RenderArgs {
  std::string checkpoint;
  std::string out;
  std::string data;
  std::string poses;
  std::vector<std::string> pose;
  std::vector<int> frames;
  bool val_only = false;
  std::string offset;
  int beams = 0;
  bool png = false;
  bool ply = false;
};

int cmd_render(const RenderArgs& a, const Common& c, const std::vector<std::string>& args, std::ostream& out) {
  const TrainConfig cfg = effective_config(c);
  if (cfg.threads > 0) set_thread_count(cfg.threads);
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  SensorSpec spec = ckpt.spec;
  if (a.beams > 0) spec.beams = a.beams;
  spec.validate();
  const RenderOptions ropt = cfg.render_options();

  // (frame id for latents and instance poses, pose)
  std::vector<std::pair<int, Pose>> views;
  if (!a.data.empty()) {
    const Dataset data = load_dataset(a.data);
    std::vector<int> ids = a.frames;
    if (ids.empty()) ids = a.val_only ? data.val : [&] {
      std::vector<int> all(data.frames.size());
      std::iota(all.begin(), all.end(), 0);
      return all;
    }();
    for (int f : ids) {
      if (f < 0 || f >= static_cast<int>(data.poses.size()))
        throw DomainError("render: frame " + std::to_string(f) + " is not in the dataset");
      views.emplace_back(f, data.poses[static_cast<std::size_t>(f)]);
    }
  }
  if (!a.poses.empty()) {
    const auto ps = load_poses(a.poses);
    for (std::size_t i = 0; i < ps.size(); ++i) views.emplace_back(-1, ps[i]);
  }
  for (const auto& p : a.pose) views.emplace_back(-1, parse_pose_arg(p));
  if (views.empty()) throw DomainError("render: no poses given (use --data, --poses or --pose)");
  const Vec3d shift = a.offset.empty() ? Vec3d::Zero() : parse_triple(a.offset, "offset");

  fs::create_directories(a.out);
  ordered_json listing = ordered_json::array();
  for (std::size_t k = 0; k < views.size(); ++k) {
    auto [frame, pose] = views[k];
    require_rigid(pose);
    pose.translation() += shift;
    const RangeImage img = render(ckpt.field, frame, pose, spec, ropt);
    const int id = frame >= 0 ? frame : static_cast<int>(k);
    const fs::path base = fs::path(a.out) / frame_name(id, "");
    save_rangeimage(img, base.string() + ".rv");
    if (a.ply) save_ply(rangeimage_to_points(img, pose), base.string() + ".ply");
    if (a.png) save_png(img, base.string() + ".png");
    listing.push_back({{"file", frame_name(id, ".rv")}, {"frame", frame}, {"valid", img.valid_count()}});
  }
  save_poses([&] {
    std::vector<Pose> ps;
    for (auto [f, p] : views) {
      p.translation() += shift;
      ps.push_back(p);
    }
    return ps;
  }(), fs::path(a.out) / "poses.csv");
  auto m = manifest_base("render", c, args);
  m["inputs"] = {{"checkpoint", a.checkpoint}, {"dataset", a.data}, {"poses", a.poses}};
  m["outputs"] = {{"dir", a.out}};
  m["beams"] = spec.beams;
  m["offset"] = {shift.x(), shift.y(), shift.z()};
  m["frames"] = listing;
  finish_manifest(m, a.out);
  out << "rendered " << views.size() << " view(s) to " << a.out << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ eval

struct EvalArgs {
  std::string pred;
  std::string gt;
  double tau = 0.05;
  std::string json_out;
};

std::map<int, fs::path> list_frames(const fs::path& dir) {
  std::map<int, fs::path> out;
  if (!fs::is_directory(dir)) throw DomainError("eval: not a directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".rv") continue;
    const std::string stem = e.path().stem().string();
    if (stem.empty() || !std::all_of(stem.begin(), stem.end(), ::isdigit)) continue;
    out[std::stoi(stem)] = e.path();
  }
  return out;
}

int cmd_eval(const EvalArgs& a, const Common& c, const std::vector<std::string>& args, std::ostream& out) {
  const auto pred = list_frames(a.pred);
  const fs::path gt_dir = fs::is_directory(fs::path(a.gt) / "frames") ? fs::path(a.gt) / "frames" : fs::path(a.gt);
  const auto gt = list_frames(gt_dir);
  if (pred.empty()) throw DomainError("eval: no predicted frames in " + a.pred);
  std::vector<int> missing;
  for (const auto& [id, p] : pred)
    if (!gt.count(id)) missing.push_back(id);
  if (!missing.empty()) {
    std::ostringstream s;
    s << "eval: ground truth is missing frame(s)";
    for (int id : missing) s << ' ' << id;
    throw DomainError(s.str());
  }
  std::vector<EvalReport> reports;
  ordered_json per = ordered_json::object();
  out << report_table_header() << "\n";
  for (const auto& [id, p] : pred) {
    const EvalReport r = image_metrics(load_rangeimage(p), load_rangeimage(gt.at(id)), a.tau);
    reports.push_back(r);
    per[std::to_string(id)] = ordered_json::parse(report_json(r));
    out << report_table_row(frame_name(id, ""), r) << "\n";
  }
  const EvalReport mean = mean_report(reports);
  out << report_table_row("mean", mean) << "\n";
  ordered_json doc;
  doc["mean"] = ordered_json::parse(report_json(mean));
  doc["frames"] = per;
  const fs::path json_path = a.json_out.empty() ? fs::path(a.pred) / "eval.json" : fs::path(a.json_out);
  write_text(json_path, doc.dump(2) + "\n");
  auto m = manifest_base("eval", c, args);
  m["inputs"] = {{"pred", a.pred}, {"gt", a.gt}};
  m["outputs"] = {{"report", json_path.string()}};
  m["finished"] = timestamp();
  write_text(json_path.parent_path() / "eval_manifest.json", m.dump(2) + "\n");
  return kExitOk;
}

// ------------------------------------------------------------------ gradcheck

struct GradcheckArgs {
  int beams = 8, width = 32, anchors = 20;
  int coords = 400;
  std::string projection = "micro";
  double tolerance = 1e-3;
};

int cmd_gradcheck(const GradcheckArgs& a, const Common& c, std::ostream& out) {
  GradcheckOptions opt;
  opt.beams = a.beams;
  opt.width = a.width;
  opt.anchors = a.anchors;
  opt.max_coords_per_group = a.coords;
  if (c.seed_set) opt.seed = c.seed;
  if (a.projection == "pseudo" || c.ablations.pseudo_plane) opt.projection = ProjectionMode::kPseudoPlane;
  else if (a.projection != "micro") throw DomainError("gradcheck: projection must be 'micro' or 'pseudo'");
  const GradcheckResult r = pipeline_gradcheck(opt);
  out << "gaussians " << r.gaussians << ", checked pixels " << r.safe_pixels << "\n";
  out << std::left << std::setw(18) << "group" << std::setw(9) << "checked" << std::setw(9) << "skipped"
      << "max rel err\n";
  for (const auto& g : r.groups)
    out << std::left << std::setw(18) << g.name << std::setw(9) << g.report.checked << std::setw(9) << g.skipped
        << g.report.max_rel << "\n";
  const bool ok = r.max_rel() < a.tolerance;
  out << (ok ? "PASS" : "FAIL") << " max relative error " << r.max_rel() << " (tolerance " << a.tolerance << ")\n";
  return ok ? kExitOk : kExitValidation;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"beamsplat: differentiable LiDAR re-simulation with Gaussian beam splatting"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "training/render config file (key = value)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { c.seed = s; c.seed_set = true; }, "random seed");
    sub->add_option("--threads", c.threads, "worker thread cap (0 = all cores)");
    sub->add_flag("--deterministic", c.deterministic, "ordered reductions and fixed seeds (default)");
    sub->add_flag("--fast", c.fast, "allow unordered reductions");
    sub->add_flag("--pseudo-plane", c.ablations.pseudo_plane, "project with four perspective faces");
    sub->add_flag("--disable-aabb", c.ablations.disable_aabb, "square footprint boxes");
    sub->add_flag("--disable-ls", c.ablations.disable_ls, "drop the scale regularizer");
    sub->add_flag("--disable-lalpha", c.ablations.disable_lalpha, "drop the alpha entropy term");
    sub->add_flag("--disable-ngs-view-inputs", c.ablations.disable_ngs_view_inputs,
                  "feed no view direction or distance to the field");
  };

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "ray-cast an analytic scene into a dataset");
  synth->add_option("--scene", sa.scene, "scene file, or urban-toy / urban-toy-static");
  synth->add_option("--trajectory", sa.trajectory, "poses.csv; default is a straight drive");
  synth->add_option("--spec", sa.spec, "sensor spec file");
  synth->add_option("--frames", sa.frames, "frames of the default drive");
  synth->add_option("--step", sa.step, "m per frame of the default drive");
  synth->add_option("--height", sa.height, "sensor height of the default drive");
  synth->add_option("--val", sa.val, "held-out frames");
  synth->add_option("--beams", sa.beams, "override the beam count");
  synth->add_option("--out", sa.out, "dataset directory")->required();
  add_common(synth);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "fit a field to a dataset");
  train->add_option("--data", ta.data, "dataset directory")->required();
  train->add_option("--out", ta.out, "run directory")->required();
  train->add_flag("--quiet", ta.quiet, "no progress lines");
  add_common(train);

  RenderArgs ra;
  auto* rend = app.add_subcommand("render", "render range images from a checkpoint");
  rend->add_option("--checkpoint", ra.checkpoint, "checkpoint file")->required();
  rend->add_option("--out", ra.out, "output directory")->required();
  rend->add_option("--data", ra.data, "dataset whose poses to render");
  rend->add_option("--frames", ra.frames, "dataset frame ids");
  rend->add_flag("--val", ra.val_only, "only the dataset's held-out frames");
  rend->add_option("--poses", ra.poses, "poses.csv of novel views");
  rend->add_option("--pose", ra.pose, "novel view x,y,z[,yaw]");
  rend->add_option("--offset", ra.offset, "world shift dx,dy,dz applied to every pose");
  rend->add_option("--beams", ra.beams, "override the beam count");
  rend->add_flag("--png", ra.png, "also write PNG previews");
  rend->add_flag("--ply", ra.ply, "also write PLY point clouds");
  add_common(rend);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "compare rendered frames with ground truth");
  eval->add_option("--pred", ea.pred, "directory of NNNN.rv predictions")->required();
  eval->add_option("--gt", ea.gt, "dataset directory or directory of NNNN.rv")->required();
  eval->add_option("--tau", ea.tau, "F-score distance threshold (m)");
  eval->add_option("--json", ea.json_out, "report path (default <pred>/eval.json)");
  add_common(eval);

  GradcheckArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full pipeline");
  grad->add_option("--beams", ga.beams);
  grad->add_option("--width", ga.width);
  grad->add_option("--anchors", ga.anchors);
  grad->add_option("--coords", ga.coords, "coordinates sampled per parameter group");
  grad->add_option("--projection", ga.projection, "micro | pseudo");
  grad->add_option("--tolerance", ga.tolerance);
  add_common(grad);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitValidation;
  }

  try {
    set_thread_count(c.threads);
    if (*synth) return cmd_synth(sa, c, args, out);
    if (*train) return cmd_train(ta, c, args, out, err);
    if (*rend) return cmd_render(ra, c, args, out);
    if (*eval) return cmd_eval(ea, c, args, out);
    if (*grad) return cmd_gradcheck(ga, c, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitValidation;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace beamsplat
