#pragma once

// Deterministic data exports: point/grid CSV with full-precision floats and a
// header echoing version, command line and seed; JSON sidecars; minimal SVG
// renderings (quiver, contours, scatter) with no plotting dependency.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "direl/dataset.hpp"

namespace direl {

// 17 significant digits: round-trip exact for binary64
inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct ExportMeta {
  std::string command;  // echoed command line
  std::string seed;     // empty: no seed line
};

inline void write_export_header(std::ostream& out, const ExportMeta& meta) {
  out << "# direl " << kVersion << "\n";
  if (!meta.command.empty()) out << "# command: " << meta.command << "\n";
  if (!meta.seed.empty()) out << "# seed: " << meta.seed << "\n";
}

inline std::vector<std::string> point_column_names(int d) {
  if (d == 2) return {"x", "y"};
  std::vector<std::string> names;
  for (int i = 0; i < d; ++i) names.push_back("x" + std::to_string(i));
  return names;
}

inline void write_points_csv(const std::string& path, const PointCloud& pc,
                             const ExportMeta& meta = {}) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  write_export_header(out, meta);
  const auto names = point_column_names(pc.dim());
  for (int j = 0; j < pc.dim(); ++j) out << (j ? "," : "") << names[j];
  out << "\n";
  for (int i = 0; i < pc.size(); ++i) {
    for (int j = 0; j < pc.dim(); ++j) out << (j ? "," : "") << fmt_g17(pc.points(i, j));
    out << "\n";
  }
  if (!out) throw io_error("write failed: " + path);
}

inline PointCloud read_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open points file: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        size_t pos = 0;
        const double v = std::stod(cell, &pos);
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (!numeric) {
      if (rows.empty()) continue;  // header row
      throw io_error(path + ": non-numeric data at line " + std::to_string(lineno));
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw io_error(path + ": ragged row at line " + std::to_string(lineno));
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) return PointCloud{DenseMatrix(0, 0)};
  PointCloud pc{DenseMatrix(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()))};
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j)
      pc.points(static_cast<int>(i), static_cast<int>(j)) = rows[i][j];
  for (double v : pc.points.flat())
    if (!std::isfinite(v)) throw io_error(path + ": non-finite point entry");
  return pc;
}

// ---------------------------------------------------------------------------
// grid export

struct GridExport {
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  int res = 0;
  // row-major over (y, x): index = i_y * res + j_x
  std::vector<std::pair<std::string, std::vector<double>>> channels;

  double x_at(int j) const { return xmin + (xmax - xmin) * j / (res - 1); }
  double y_at(int i) const { return ymin + (ymax - ymin) * i / (res - 1); }
  size_t index(int i, int j) const { return static_cast<size_t>(i) * res + j; }

  void validate() const {
    const size_t cells = static_cast<size_t>(res) * res;
    for (const auto& [name, values] : channels) {
      if (values.size() != cells) throw std::invalid_argument("GridExport: bad channel size");
      int dup = 0;
      for (const auto& [other, unused] : channels)
        if (other == name) ++dup;
      if (dup != 1) throw std::invalid_argument("GridExport: duplicate channel name " + name);
    }
  }
};

inline void write_grid_csv(const std::string& path, const GridExport& g,
                           const ExportMeta& meta = {}) {
  g.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  write_export_header(out, meta);
  out << "x,y";
  for (const auto& [name, unused] : g.channels) out << "," << name;
  out << "\n";
  for (int i = 0; i < g.res; ++i) {
    const std::string ys = fmt_g17(g.y_at(i));
    for (int j = 0; j < g.res; ++j) {
      out << fmt_g17(g.x_at(j)) << "," << ys;
      for (const auto& [unused, values] : g.channels) out << "," << fmt_g17(values[g.index(i, j)]);
      out << "\n";
    }
  }
  if (!out) throw io_error("write failed: " + path);
}

inline void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw io_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// SVG rendering

class SvgCanvas {
 public:
  SvgCanvas(double xmin, double xmax, double ymin, double ymax, int px = 720)
      : xmin_(xmin), xmax_(xmax), ymin_(ymin), ymax_(ymax), px_(px) {}

  double px_x(double x) const { return (x - xmin_) / (xmax_ - xmin_) * px_; }
  double px_y(double y) const { return (ymax_ - y) / (ymax_ - ymin_) * px_; }

  void line(double x1, double y1, double x2, double y2, const std::string& stroke,
            double width = 1.0) {
    body_ += "<line x1=\"" + num(px_x(x1)) + "\" y1=\"" + num(px_y(y1)) + "\" x2=\"" +
             num(px_x(x2)) + "\" y2=\"" + num(px_y(y2)) + "\" stroke=\"" + stroke +
             "\" stroke-width=\"" + num(width) + "\"/>\n";
  }

  void circle(double x, double y, double radius_px, const std::string& fill) {
    body_ += "<circle cx=\"" + num(px_x(x)) + "\" cy=\"" + num(px_y(y)) + "\" r=\"" +
             num(radius_px) + "\" fill=\"" + fill + "\"/>\n";
  }

  // arrow from (x, y) along (dx, dy) in data units
  void arrow(double x, double y, double dx, double dy, const std::string& stroke) {
    const double x2 = x + dx, y2 = y + dy;
    line(x, y, x2, y2, stroke, 1.0);
    const double nrm = std::hypot(dx, dy);
    if (nrm <= 0.0) return;
    const double hx = -dx / nrm, hy = -dy / nrm;  // back along the shaft
    const double wing = 0.25 * nrm;
    line(x2, y2, x2 + wing * (hx * 0.866 - hy * 0.5), y2 + wing * (hx * 0.5 + hy * 0.866), stroke,
         1.0);
    line(x2, y2, x2 + wing * (hx * 0.866 + hy * 0.5), y2 + wing * (-hx * 0.5 + hy * 0.866), stroke,
         1.0);
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << px_ << "\" height=\"" << px_
        << "\" viewBox=\"0 0 " << px_ << " " << px_ << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << body_ << "</svg>\n";
    if (!out) throw io_error("write failed: " + path);
  }

 private:
  static std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
  }

  double xmin_, xmax_, ymin_, ymax_;
  int px_;
  std::string body_;
};

struct Segment {
  double x1, y1, x2, y2;
};

// Marching-squares iso-contour of a row-major scalar grid.
inline std::vector<Segment> contour_segments(const std::vector<double>& values, const GridExport& g,
                                             double level) {
  std::vector<Segment> segs;
  auto interp = [level](double a, double b, double pa, double pb) {
    const double t = (level - a) / (b - a);
    return pa + t * (pb - pa);
  };
  for (int i = 0; i + 1 < g.res; ++i) {
    for (int j = 0; j + 1 < g.res; ++j) {
      const double v00 = values[g.index(i, j)];
      const double v10 = values[g.index(i, j + 1)];
      const double v01 = values[g.index(i + 1, j)];
      const double v11 = values[g.index(i + 1, j + 1)];
      if (!std::isfinite(v00) || !std::isfinite(v10) || !std::isfinite(v01) || !std::isfinite(v11))
        continue;
      const double x0 = g.x_at(j), x1 = g.x_at(j + 1);
      const double y0 = g.y_at(i), y1 = g.y_at(i + 1);
      int mask = 0;
      if (v00 >= level) mask |= 1;
      if (v10 >= level) mask |= 2;
      if (v11 >= level) mask |= 4;
      if (v01 >= level) mask |= 8;
      if (mask == 0 || mask == 15) continue;
      // edge crossings: bottom (00-10), right (10-11), top (01-11), left (00-01)
      double bx = 0, rx = 0, tx = 0, lx = 0, by = 0, ry = 0, ty = 0, ly = 0;
      auto cross_bottom = [&] { bx = interp(v00, v10, x0, x1), by = y0; };
      auto cross_right = [&] { rx = x1, ry = interp(v10, v11, y0, y1); };
      auto cross_top = [&] { tx = interp(v01, v11, x0, x1), ty = y1; };
      auto cross_left = [&] { lx = x0, ly = interp(v00, v01, y0, y1); };
      auto emit = [&](double ax, double ay, double cx, double cy) {
        segs.push_back({ax, ay, cx, cy});
      };
      switch (mask) {
        case 1: case 14: cross_bottom(); cross_left(); emit(bx, by, lx, ly); break;
        case 2: case 13: cross_bottom(); cross_right(); emit(bx, by, rx, ry); break;
        case 3: case 12: cross_left(); cross_right(); emit(lx, ly, rx, ry); break;
        case 4: case 11: cross_right(); cross_top(); emit(rx, ry, tx, ty); break;
        case 6: case 9: cross_bottom(); cross_top(); emit(bx, by, tx, ty); break;
        case 7: case 8: cross_left(); cross_top(); emit(lx, ly, tx, ty); break;
        case 5:
          cross_bottom(); cross_left(); emit(bx, by, lx, ly);
          cross_right(); cross_top(); emit(rx, ry, tx, ty);
          break;
        case 10:
          cross_bottom(); cross_right(); emit(bx, by, rx, ry);
          cross_left(); cross_top(); emit(lx, ly, tx, ty);
          break;
        default: break;
      }
    }
  }
  return segs;
}

}  // namespace direl
