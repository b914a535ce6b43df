#pragma once

// Command-line entry points: train, evolve, field, stability, eigencheck,
// adjoint.  Exit codes: 0 success, 1 numerical failure, 2 usage/IO error.

#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "direl/export.hpp"
#include "direl/train.hpp"

namespace direl::cli {

namespace fs = std::filesystem;

inline std::string join_args(const std::vector<std::string>& args) {
  std::string s = "direl";
  for (const auto& a : args) s += " " + a;
  return s;
}

inline void write_history_csv(const std::string& path, const History& hist,
                              const ExportMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  write_export_header(out, meta);
  out << "epoch,r_f,r_lambda,r_n,r_adj,total,lipschitz_bound\n";
  for (const auto& row : hist) {
    out << row.epoch << "," << fmt_g17(row.r_f) << "," << fmt_g17(row.r_lambda) << ","
        << fmt_g17(row.r_n) << "," << fmt_g17(row.r_adj) << "," << fmt_g17(row.total) << ","
        << fmt_g17(row.lipschitz_bound) << "\n";
  }
  if (!out) throw io_error("write failed: " + path);
}

namespace detail {

inline TrainConfig load_config_arg(const std::string& arg) {
  if (const auto builtin = builtin_config(arg)) return *builtin;
  std::ifstream in(arg);
  if (!in) throw io_error("cannot open config: " + arg);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

inline PointCloud builtin_dataset(const TrainConfig& cfg) {
  if (cfg.dataset == "circle") return make_circle(cfg.n_points, cfg.radius, cfg.noise, cfg.seed);
  return make_scurve(cfg.n_points, cfg.noise, cfg.seed);
}

inline Checkpoint load_model(const std::string& path) { return load_checkpoint(path); }

struct PointSource {
  std::string file;
  int random_n = 0;
  std::vector<double> bounds = {-4.0, 4.0, -4.0, 4.0};
  uint64_t seed = 1;

  void add_options(CLI::App* cmd) {
    cmd->add_option("--points", file, "CSV file with input points");
    cmd->add_option("--random", random_n, "draw N uniform random points instead of reading a file");
    cmd->add_option("--bounds", bounds, "random-point box: xmin xmax ymin ymax")->expected(4);
    cmd->add_option("--seed", seed, "seed for random points");
  }

  PointCloud load(int dim) const {
    if (!file.empty()) return read_points_csv(file);
    if (random_n > 0) {
      PointCloud pc{DenseMatrix(random_n, dim)};
      Rng rng(seed);
      std::uniform_real_distribution<double> ux(bounds[0], bounds[1]);
      std::uniform_real_distribution<double> uy(bounds[2], bounds[3]);
      for (int i = 0; i < random_n; ++i) {
        pc.points(i, 0) = ux(rng);
        if (dim > 1) pc.points(i, 1) = uy(rng);
        for (int j = 2; j < dim; ++j) pc.points(i, j) = ux(rng);
      }
      return pc;
    }
    throw config_error("either --points or --random is required");
  }
};

inline GridExport field_grid(const LocalizedField& field, const std::vector<double>& bounds,
                             int res) {
  GridExport g;
  g.xmin = bounds[0];
  g.xmax = bounds[1];
  g.ymin = bounds[2];
  g.ymax = bounds[3];
  g.res = res;
  const size_t cells = static_cast<size_t>(res) * res;
  std::vector<double> fx(cells), fy(cells), norm_sq(cells);
  DenseMatrix row_batch(2, res);
  for (int i = 0; i < res; ++i) {
    for (int j = 0; j < res; ++j) {
      row_batch(0, j) = g.x_at(j);
      row_batch(1, j) = g.y_at(i);
    }
    const DenseMatrix f = field.eval_batch(row_batch);
    for (int j = 0; j < res; ++j) {
      const size_t t = g.index(i, j);
      fx[t] = f(0, j);
      fy[t] = f(1, j);
      norm_sq[t] = f(0, j) * f(0, j) + f(1, j) * f(1, j);
    }
  }
  g.channels.emplace_back("Fx", std::move(fx));
  g.channels.emplace_back("Fy", std::move(fy));
  g.channels.emplace_back("normF2", std::move(norm_sq));
  return g;
}

inline void render_field_svg(const std::string& path, const GridExport& g,
                             const PointCloud* overlay) {
  SvgCanvas svg(g.xmin, g.xmax, g.ymin, g.ymax);
  const auto& fx = g.channels[0].second;
  const auto& fy = g.channels[1].second;
  const auto& n2 = g.channels[2].second;
  // contours of ||F||^2 at geometric levels below the median magnitude
  std::vector<double> sorted = n2;
  std::sort(sorted.begin(), sorted.end());
  const double lo = std::max(sorted[sorted.size() / 100], 1e-12);
  const double hi = std::max(sorted[sorted.size() - 1 - sorted.size() / 100], 2e-12);
  for (int k = 0; k < 7; ++k) {
    const double level = lo * std::pow(hi / lo, (k + 0.5) / 7.0);
    for (const Segment& s : contour_segments(n2, g, level))
      svg.line(s.x1, s.y1, s.x2, s.y2, "#9ecae1", 0.8);
  }
  // quiver on a subsampled lattice
  const int stride = std::max(1, g.res / 24);
  double max_norm = 0.0;
  for (size_t t = 0; t < n2.size(); ++t) max_norm = std::max(max_norm, std::sqrt(n2[t]));
  const double cell = (g.xmax - g.xmin) * stride / (g.res - 1);
  const double scale = max_norm > 0 ? 0.9 * cell / max_norm : 0.0;
  for (int i = 0; i < g.res; i += stride)
    for (int j = 0; j < g.res; j += stride) {
      const size_t t = g.index(i, j);
      svg.arrow(g.x_at(j), g.y_at(i), scale * fx[t], scale * fy[t], "#333333");
    }
  if (overlay)
    for (int i = 0; i < overlay->size(); ++i)
      svg.circle(overlay->points(i, 0), overlay->points(i, 1), 2.0, "#d62728");
  svg.save(path);
}

}  // namespace detail

// ---------------------------------------------------------------------------

inline int cmd_train(const std::string& config_arg, const std::string& data_arg,
                     const std::string& out_dir, const ExportMeta& meta) {
  TrainConfig cfg = detail::load_config_arg(config_arg);
  PointCloud data = data_arg.empty() ? detail::builtin_dataset(cfg) : read_points_csv(data_arg);
  fs::create_directories(out_dir);
  const TrainResult res = train(cfg, data);
  save_checkpoint(make_checkpoint(res), (fs::path(out_dir) / "checkpoint.json").string());
  ExportMeta m = meta;
  m.seed = std::to_string(cfg.seed);
  write_history_csv((fs::path(out_dir) / "history.csv").string(), res.history, m);
  log_info("wrote " + out_dir + "/checkpoint.json and history.csv");
  return 0;
}

inline int cmd_evolve(const std::string& model_path, const detail::PointSource& source, int steps,
                      int every, const std::string& out_dir, const std::string& ref_path,
                      const std::string& svg_path, ExportMeta meta) {
  if (source.file.empty()) meta.seed = std::to_string(source.seed);
  const Checkpoint ck = detail::load_model(model_path);
  const PointCloud start = source.load(ck.field.dim());
  if (start.dim() != ck.field.dim()) throw io_error("evolve: point dimension does not match model");
  fs::create_directories(out_dir);
  const Trajectory tr = evolve(ck.field, to_batch(start), steps, every, ck.field.scheme);
  for (size_t s = 0; s < tr.states.size(); ++s) {
    char name[32];
    std::snprintf(name, sizeof(name), "points_t%04d.csv", tr.times[s]);
    write_points_csv((fs::path(out_dir) / name).string(), from_batch(tr.states[s]), meta);
  }
  nlohmann::ordered_json summary;
  summary["version"] = kVersion;
  summary["command"] = meta.command;
  if (!meta.seed.empty()) summary["seed"] = meta.seed;
  summary["times"] = tr.times;
  summary["complete"] = tr.complete;
  if (!ref_path.empty()) {
    const PointCloud ref = read_points_csv(ref_path);
    const DenseMatrix ref_batch = to_batch(ref);
    std::vector<double> dist;
    for (const DenseMatrix& s : tr.states) dist.push_back(mean_nearest_distance(s, ref_batch));
    summary["mean_nearest_distance"] = dist;
  }
  write_json((fs::path(out_dir) / "summary.json").string(), summary);
  if (!svg_path.empty() && ck.field.dim() == 2) {
    SvgCanvas svg(-5, 5, -5, 5);
    const std::vector<std::string> colors = {"#cccccc", "#9ecae1", "#6baed6", "#3182bd",
                                             "#d62728"};
    for (size_t s = 0; s < tr.states.size(); ++s) {
      const std::string& color = colors[std::min(s, colors.size() - 1)];
      const DenseMatrix& st = tr.states[s];
      for (int j = 0; j < st.cols(); ++j) svg.circle(st(0, j), st(1, j), 1.5, color);
    }
    svg.save(svg_path);
  }
  if (!tr.complete) {
    std::fprintf(stderr, "direl evolve: solver did not converge at step %d\n", tr.failed_step);
    return 1;
  }
  return 0;
}

inline int cmd_field(const std::string& model_path, const std::vector<double>& bounds, int res,
                     const std::string& out_path, const std::string& svg_path,
                     const std::string& overlay_path, const ExportMeta& meta) {
  const Checkpoint ck = detail::load_model(model_path);
  if (ck.field.dim() != 2) throw io_error("field: grid export requires a 2-dimensional model");
  if (res < 2) throw config_error("field: --res must be >= 2");
  const GridExport g = detail::field_grid(ck.field, bounds, res);
  write_grid_csv(out_path, g, meta);
  if (!svg_path.empty()) {
    PointCloud overlay;
    const bool has_overlay = !overlay_path.empty();
    if (has_overlay) overlay = read_points_csv(overlay_path);
    detail::render_field_svg(svg_path, g, has_overlay ? &overlay : nullptr);
  }
  return 0;
}

inline int cmd_stability(double theta, const std::vector<double>& bounds, int res,
                         const std::vector<double>& disk_args, const std::string& out_path,
                         const std::string& svg_path, const ExportMeta& meta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw config_error("stability: theta must be in [0, 1]");
  if (res < 2) throw config_error("stability: --res must be >= 2");
  const RegionGrid rg = region_grid(theta, bounds[0], bounds[1], bounds[2], bounds[3], res);
  GridExport g;
  g.xmin = bounds[0];
  g.xmax = bounds[1];
  g.ymin = bounds[2];
  g.ymax = bounds[3];
  g.res = res;
  std::vector<double> mag(rg.magnitude);
  std::vector<double> inside(rg.inside.begin(), rg.inside.end());
  std::vector<double> pole(rg.pole.begin(), rg.pole.end());
  g.channels.emplace_back("stab_mag", std::move(mag));
  g.channels.emplace_back("in_region", std::move(inside));
  g.channels.emplace_back("pole", std::move(pole));
  write_grid_csv(out_path, g, meta);

  StabilityDisk disk;
  const bool has_disk = !disk_args.empty();
  if (has_disk) {
    disk = StabilityDisk::from_targets(theta, disk_args[0], disk_args[1]);
    const DiskSupResult sup = disk_sup_detail(theta, disk);
    nlohmann::ordered_json side;
    side["version"] = kVersion;
    side["command"] = meta.command;
    side["theta"] = theta;
    side["c_hat"] = disk.c_hat;
    side["L"] = disk.L;
    side["c"] = disk.c;
    side["r"] = disk.r;
    side["point_c_hat"] = disk.c;                       // R^{-1}(c_hat)
    side["point_L"] = stab_inverse_real(theta, disk.L);  // R^{-1}(L)
    side["disk_sup"] = sup.sup;
    side["argmax_re"] = sup.argmax.real();
    side["argmax_im"] = sup.argmax.imag();
    write_json(out_path + ".disk.json", side);
  }
  if (!svg_path.empty()) {
    SvgCanvas svg(bounds[0], bounds[1], bounds[2], bounds[3]);
    const auto& magnitude = g.channels[0].second;
    for (double level : {0.25, 0.5, 0.75, 1.5, 2.0, 3.0})
      for (const Segment& s : contour_segments(magnitude, g, level))
        svg.line(s.x1, s.y1, s.x2, s.y2, "#9ecae1", 0.8);
    for (const Segment& s : contour_segments(magnitude, g, 1.0))
      svg.line(s.x1, s.y1, s.x2, s.y2, "#333333", 1.6);  // region boundary
    if (has_disk) {
      const int samples = 256;
      for (int k = 0; k < samples; ++k) {
        const double a0 = 2.0 * M_PI * k / samples;
        const double a1 = 2.0 * M_PI * (k + 1) / samples;
        svg.line(disk.c + disk.r * std::cos(a0), disk.r * std::sin(a0),
                 disk.c + disk.r * std::cos(a1), disk.r * std::sin(a1), "#2ca02c", 1.2);
      }
      svg.circle(disk.c, 0.0, 4.0, "#e6b800");
      svg.circle(stab_inverse_real(theta, disk.L), 0.0, 4.0, "#d62728");
    }
    svg.save(svg_path);
  }
  return 0;
}

inline int cmd_eigencheck(const std::string& model_path, const std::string& points_path,
                          const std::string& out_path, const ExportMeta& meta) {
  const Checkpoint ck = detail::load_model(model_path);
  const PointCloud pts = read_points_csv(points_path);
  if (pts.size() > 0 && pts.dim() != ck.field.dim())
    throw io_error("eigencheck: point dimension does not match model");
  const Localization l = ck.field.localize();
  const double theta = ck.field.scheme.theta;

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + out_path);
  write_export_header(out, meta);
  const auto names = point_column_names(ck.field.dim());
  out << "point";
  for (const auto& n : names) out << "," << n;
  out << ",eig_re,eig_im,stab_mag,disk_dist,in_region\n";

  bool dissipative = true;
  int violations = 0;
  int eig_failures = 0;
  double max_mag = 0.0;
  const DenseMatrix batch = to_batch(pts);
  for (int p = 0; p < pts.size(); ++p) {
    EigenDecomposition e;
    try {
      e = eigenvalues(ck.field.jacobian(get_col(batch, p)));
    } catch (const convergence_error&) {
      ++eig_failures;
      dissipative = false;
      continue;
    }
    for (const Complex& lam : e.values) {
      const RegionCell cell = classify_point(theta, lam);
      const double mag = cell.magnitude;
      const double disk_dist = std::max(0.0, std::abs(lam - Complex(l.c, 0.0)) - l.r);
      out << p;
      for (int j = 0; j < pts.dim(); ++j) out << "," << fmt_g17(pts.points(p, j));
      out << "," << fmt_g17(lam.real()) << "," << fmt_g17(lam.imag()) << "," << fmt_g17(mag) << ","
          << fmt_g17(disk_dist) << "," << (cell.inside ? 1 : 0) << "\n";
      max_mag = std::max(max_mag, mag);
      if (!cell.inside) {
        dissipative = false;
        ++violations;
      }
    }
  }
  if (!out) throw io_error("write failed: " + out_path);
  out.close();

  nlohmann::ordered_json summary;
  summary["version"] = kVersion;
  summary["command"] = meta.command;
  summary["points"] = pts.size();
  summary["dissipative"] = dissipative;
  summary["violations"] = violations;
  summary["eig_failures"] = eig_failures;
  summary["max_stab_mag"] = max_mag;
  summary["c"] = l.c;
  summary["r"] = l.r;
  summary["lipschitz_bound"] = lipschitz_bound(ck.field).value;
  write_json(out_path + ".summary.json", summary);
  std::printf("dissipative: %s\n", dissipative ? "yes" : "no");
  return 0;
}

inline int cmd_adjoint(const std::string& model_path, const detail::PointSource& source,
                       double alpha, int steps, const std::string& out_path,
                       const std::string& svg_path, ExportMeta meta) {
  meta.seed = std::to_string(source.seed);  // drives the normal-direction draws
  if (steps < 1) throw config_error("adjoint: --steps must be >= 1");
  if (!(alpha > 0.0)) throw config_error("adjoint: --alpha must be positive");
  const Checkpoint ck = detail::load_model(model_path);
  const PointCloud pts = source.load(ck.field.dim());
  if (pts.size() == 0) throw io_error("adjoint: no input points");
  if (pts.dim() != ck.field.dim()) throw io_error("adjoint: point dimension does not match model");
  const int d = ck.field.dim();
  const DenseMatrix x = to_batch(pts);

  Rng rng(source.seed);
  DenseMatrix p0 = x;
  std::vector<uint8_t> degenerate(pts.size(), 0);
  for (int j = 0; j < pts.size(); ++j) {
    const NormalDirection nd = normal_direction(ck.field, get_col(x, j), 1e-2, rng);
    if (nd.degenerate) {
      degenerate[j] = 1;
      continue;
    }
    for (int i = 0; i < d; ++i) p0(i, j) += alpha * nd.n[i];
  }
  const Trajectory tr = adjoint_trajectory(ck.field, p0, steps, ck.field.scheme);

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + out_path);
  write_export_header(out, meta);
  const auto names = point_column_names(d);
  out << "point,step";
  for (const auto& n : names) out << "," << n;
  out << ",degenerate\n";
  for (size_t s = 0; s < tr.states.size(); ++s) {
    for (int j = 0; j < pts.size(); ++j) {
      out << j << "," << tr.times[s];
      for (int i = 0; i < d; ++i) out << "," << fmt_g17(tr.states[s](i, j));
      out << "," << static_cast<int>(degenerate[j]) << "\n";
    }
  }
  if (!out) throw io_error("write failed: " + out_path);
  out.close();

  if (!svg_path.empty() && d == 2) {
    SvgCanvas svg(-5, 5, -5, 5);
    for (int j = 0; j < pts.size(); ++j) {
      for (size_t s = 0; s + 1 < tr.states.size(); ++s)
        svg.line(tr.states[s](0, j), tr.states[s](1, j), tr.states[s + 1](0, j),
                 tr.states[s + 1](1, j), "#6baed6", 0.9);
      svg.circle(x(0, j), x(1, j), 1.8, "#d62728");
    }
    svg.save(svg_path);
  }
  if (!tr.complete) {
    std::fprintf(stderr, "direl adjoint: solver did not converge at step %d\n", tr.failed_step);
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"dissipative implicit residual layers: training, evolution and analysis exports"};
  app.set_version_flag("--version", std::string("direl ") + kVersion);
  app.require_subcommand(1);
  ExportMeta meta;
  meta.command = join_args(args);

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model from a config (file or builtin)");
  std::string config_arg, data_arg, out_dir;
  train_cmd->add_option("--config", config_arg,
                        "config file path or builtin name (scurve-1step, scurve-3step, circle-L1, "
                        "circle-L5, scurve-dissipative)")
      ->required();
  train_cmd->add_option("--data", data_arg, "points CSV overriding the config dataset");
  train_cmd->add_option("--out", out_dir, "output directory")->required();

  // evolve
  auto* evolve_cmd = app.add_subcommand("evolve", "apply the trained layer repeatedly");
  std::string model_path, ref_path, svg_path, out_path;
  detail::PointSource evolve_src;
  int steps = 20, every = 5;
  evolve_cmd->add_option("--model", model_path, "checkpoint file")->required();
  evolve_src.add_options(evolve_cmd);
  evolve_cmd->add_option("--steps", steps, "number of forward steps");
  evolve_cmd->add_option("--every", every, "record interval");
  evolve_cmd->add_option("--out", out_dir, "output directory")->required();
  evolve_cmd->add_option("--ref", ref_path, "reference cloud for the distance metric");
  evolve_cmd->add_option("--svg", svg_path, "optional SVG scatter path");

  // field
  auto* field_cmd = app.add_subcommand("field", "export the vector field and its level sets");
  std::vector<double> bounds = {-5.0, 5.0, -5.0, 5.0};
  int res = 401;
  std::string overlay_path;
  field_cmd->add_option("--model", model_path, "checkpoint file")->required();
  field_cmd->add_option("--bounds", bounds, "grid box: xmin xmax ymin ymax")->expected(4);
  field_cmd->add_option("--res", res, "grid resolution per axis");
  field_cmd->add_option("--out", out_path, "output CSV path")->required();
  field_cmd->add_option("--svg", svg_path, "optional SVG quiver/contour path");
  field_cmd->add_option("--overlay", overlay_path, "points CSV drawn over the SVG");

  // stability
  auto* stab_cmd = app.add_subcommand("stability", "export |R_theta| grids and region masks");
  double theta = 0.5;
  std::vector<double> disk_args;
  stab_cmd->add_option("--theta", theta, "scheme parameter in [0, 1]")->required();
  stab_cmd->add_option("--bounds", bounds, "grid box: xmin xmax ymin ymax")->expected(4);
  stab_cmd->add_option("--res", res, "grid resolution per axis");
  stab_cmd->add_option("--disk", disk_args, "disk targets: c_hat L (adds a JSON sidecar)")
      ->expected(2);
  stab_cmd->add_option("--out", out_path, "output CSV path")->required();
  stab_cmd->add_option("--svg", svg_path, "optional SVG contour path");

  // eigencheck
  auto* eig_cmd = app.add_subcommand("eigencheck", "audit Jacobian eigenvalues against B(c, r)");
  std::string points_path;
  eig_cmd->add_option("--model", model_path, "checkpoint file")->required();
  eig_cmd->add_option("--points", points_path, "points CSV")->required();
  eig_cmd->add_option("--out", out_path, "output CSV path")->required();

  // adjoint
  auto* adj_cmd = app.add_subcommand("adjoint", "export backward-in-time trajectories");
  detail::PointSource adj_src;
  double alpha = 0.5;
  int adj_steps = 1;
  adj_cmd->add_option("--model", model_path, "checkpoint file")->required();
  adj_src.add_options(adj_cmd);
  adj_cmd->add_option("--alpha", alpha, "perturbation distance along the normal");
  adj_cmd->add_option("--steps", adj_steps, "number of backward steps");
  adj_cmd->add_option("--out", out_path, "output CSV path")->required();
  adj_cmd->add_option("--svg", svg_path, "optional SVG trajectory path");

  std::vector<const char*> argv;
  argv.push_back("direl");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
    if (train_cmd->parsed()) return cmd_train(config_arg, data_arg, out_dir, meta);
    if (evolve_cmd->parsed())
      return cmd_evolve(model_path, evolve_src, steps, every, out_dir, ref_path, svg_path, meta);
    if (field_cmd->parsed())
      return cmd_field(model_path, bounds, res, out_path, svg_path, overlay_path, meta);
    if (stab_cmd->parsed())
      return cmd_stability(theta, bounds, res, disk_args, out_path, svg_path, meta);
    if (eig_cmd->parsed()) return cmd_eigencheck(model_path, points_path, out_path, meta);
    if (adj_cmd->parsed())
      return cmd_adjoint(model_path, adj_src, alpha, adj_steps, out_path, svg_path, meta);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const config_error& e) {
    std::fprintf(stderr, "direl: %s\n", e.what());
    return 2;
  } catch (const io_error& e) {
    std::fprintf(stderr, "direl: %s\n", e.what());
    return 2;
  } catch (const checkpoint_error& e) {
    std::fprintf(stderr, "direl: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "direl: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    // numerical failures: pole, singular, convergence, divergence
    std::fprintf(stderr, "direl: %s\n", e.what());
    return 1;
  }
}

}  // namespace direl::cli
