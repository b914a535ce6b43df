#pragma once

// Versioned checkpoint serialization.  JSON with full-precision numbers; a
// save -> load -> save round trip is byte-identical and the loaded field
// evaluates bit-exactly like the in-memory one.

#include <fstream>
#include <string>

#include <json.hpp>

#include "direl/config.hpp"
#include "direl/field.hpp"

namespace direl {

struct HistoryRow {
  int epoch = 0;
  double r_f = 0.0;
  double r_lambda = 0.0;
  double r_n = 0.0;
  double r_adj = 0.0;
  double total = 0.0;
  double lipschitz_bound = 0.0;
};

using History = std::vector<HistoryRow>;

struct Checkpoint {
  int version = 1;
  TrainConfig config;
  LocalizedField field;
  History history;
};

namespace detail {

using ordered_json = nlohmann::ordered_json;

inline ordered_json vector_to_json(std::span<const double> v) {
  ordered_json a = ordered_json::array();
  for (double x : v) a.push_back(x);
  return a;
}

inline std::vector<double> json_to_vector(const ordered_json& a, size_t expect,
                                          const char* what) {
  if (!a.is_array() || a.size() != expect)
    throw checkpoint_error(std::string("checkpoint: bad array for ") + what);
  std::vector<double> v;
  v.reserve(a.size());
  for (const auto& x : a) {
    if (!x.is_number()) throw checkpoint_error(std::string("checkpoint: non-numeric ") + what);
    v.push_back(x.get<double>());
  }
  return v;
}

inline ordered_json config_to_json(const TrainConfig& c) {
  ordered_json j;
  for (const auto& [k, v] : config_key_values(c)) j[k] = v;
  return j;
}

inline TrainConfig config_from_json(const ordered_json& j) {
  std::string text;
  for (const auto& [k, v] : j.items()) text += k + " = " + v.get<std::string>() + "\n";
  try {
    return parse_config(text);
  } catch (const config_error& e) {
    throw checkpoint_error(std::string("checkpoint: bad config echo: ") + e.what());
  }
}

}  // namespace detail

inline std::string checkpoint_to_string(const Checkpoint& ck) {
  using detail::ordered_json;
  ordered_json j;
  j["format"] = "direl-checkpoint";
  j["version"] = ck.version;
  j["config"] = detail::config_to_json(ck.config);
  ordered_json field;
  field["dim"] = ck.field.base.d;
  field["activation"] = to_string(ck.field.base.activation);
  field["theta"] = ck.field.scheme.theta;
  field["fp_tol"] = ck.field.scheme.fp_tol;
  field["fp_max_iter"] = ck.field.scheme.fp_max_iter;
  field["mode"] = to_string(ck.field.loc.mode);
  field["c_hat_1"] = ck.field.loc.c_hat_1;
  field["c_hat_2"] = ck.field.loc.c_hat_2;
  field["L_1"] = ck.field.loc.L_1;
  field["L_2"] = ck.field.loc.L_2;
  field["gamma_c"] = ck.field.loc.gamma_c;
  field["gamma_L"] = ck.field.loc.gamma_L;
  ordered_json layers = ordered_json::array();
  for (const auto& l : ck.field.base.layers) {
    ordered_json jl;
    jl["rows"] = l.w.rows();
    jl["cols"] = l.w.cols();
    jl["w"] = detail::vector_to_json(l.w.flat());
    jl["b"] = detail::vector_to_json(l.b);
    jl["u"] = detail::vector_to_json(l.u);
    jl["v"] = detail::vector_to_json(l.v);
    layers.push_back(std::move(jl));
  }
  field["layers"] = std::move(layers);
  j["field"] = std::move(field);
  ordered_json hist;
  ordered_json epochs = ordered_json::array(), rf = ordered_json::array(),
               rl = ordered_json::array(), rn = ordered_json::array(),
               ra = ordered_json::array(), tot = ordered_json::array(),
               lip = ordered_json::array();
  for (const auto& row : ck.history) {
    epochs.push_back(row.epoch);
    rf.push_back(row.r_f);
    rl.push_back(row.r_lambda);
    rn.push_back(row.r_n);
    ra.push_back(row.r_adj);
    tot.push_back(row.total);
    lip.push_back(row.lipschitz_bound);
  }
  hist["epoch"] = std::move(epochs);
  hist["r_f"] = std::move(rf);
  hist["r_lambda"] = std::move(rl);
  hist["r_n"] = std::move(rn);
  hist["r_adj"] = std::move(ra);
  hist["total"] = std::move(tot);
  hist["lipschitz_bound"] = std::move(lip);
  j["history"] = std::move(hist);
  return j.dump(2) + "\n";
}

inline Checkpoint checkpoint_from_string(const std::string& text) {
  using detail::ordered_json;
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw checkpoint_error(std::string("checkpoint: corrupt payload: ") + e.what());
  }
  if (!j.is_object() || j.value("format", std::string()) != "direl-checkpoint")
    throw checkpoint_error("checkpoint: not a direl checkpoint");
  if (!j.contains("version") || !j["version"].is_number_integer())
    throw checkpoint_error("checkpoint: missing version");
  const int version = j["version"].get<int>();
  if (version != 1)
    throw checkpoint_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.version = version;
  try {
    ck.config = detail::config_from_json(j.at("config"));
    const auto& f = j.at("field");
    ck.field.base.d = f.at("dim").get<int>();
    ck.field.base.activation = parse_activation(f.at("activation").get<std::string>());
    ck.field.scheme = ThetaScheme(f.at("theta").get<double>(), f.at("fp_tol").get<double>(),
                                  f.at("fp_max_iter").get<int>());
    ck.field.loc.mode = parse_localization_mode(f.at("mode").get<std::string>());
    ck.field.loc.c_hat_1 = f.at("c_hat_1").get<double>();
    ck.field.loc.c_hat_2 = f.at("c_hat_2").get<double>();
    ck.field.loc.L_1 = f.at("L_1").get<double>();
    ck.field.loc.L_2 = f.at("L_2").get<double>();
    ck.field.loc.gamma_c = f.at("gamma_c").get<double>();
    ck.field.loc.gamma_L = f.at("gamma_L").get<double>();
    int prev_cols = ck.field.base.d;
    for (const auto& jl : f.at("layers")) {
      MlpLayer l;
      const int rows = jl.at("rows").get<int>();
      const int cols = jl.at("cols").get<int>();
      if (rows < 1 || cols < 1 || cols != prev_cols)
        throw checkpoint_error("checkpoint: inconsistent layer dimensions");
      const auto w = detail::json_to_vector(jl.at("w"), static_cast<size_t>(rows) * cols, "w");
      l.w = DenseMatrix(rows, cols);
      std::copy(w.begin(), w.end(), l.w.flat().begin());
      l.b = detail::json_to_vector(jl.at("b"), rows, "b");
      l.u = detail::json_to_vector(jl.at("u"), rows, "u");
      l.v = detail::json_to_vector(jl.at("v"), cols, "v");
      prev_cols = rows;
      ck.field.base.layers.push_back(std::move(l));
    }
    if (prev_cols != ck.field.base.d)
      throw checkpoint_error("checkpoint: last layer does not map back to dim");
    const auto& h = j.at("history");
    const auto& epochs = h.at("epoch");
    const size_t n = epochs.size();
    auto series = [&](const char* key) {
      const auto& a = h.at(key);
      if (a.size() != n) throw checkpoint_error("checkpoint: ragged history");
      return a;
    };
    const auto rf = series("r_f");
    const auto rl = series("r_lambda");
    const auto rn = series("r_n");
    const auto ra = series("r_adj");
    const auto tot = series("total");
    const auto lip = series("lipschitz_bound");
    for (size_t i = 0; i < n; ++i) {
      HistoryRow row;
      row.epoch = epochs[i].get<int>();
      row.r_f = rf[i].get<double>();
      row.r_lambda = rl[i].get<double>();
      row.r_n = rn[i].get<double>();
      row.r_adj = ra[i].get<double>();
      row.total = tot[i].get<double>();
      row.lipschitz_bound = lip[i].get<double>();
      ck.history.push_back(row);
    }
  } catch (const checkpoint_error&) {
    throw;
  } catch (const std::exception& e) {
    throw checkpoint_error(std::string("checkpoint: corrupt payload: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open for writing: " + path);
  out << checkpoint_to_string(ck);
  if (!out) throw io_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_string(text);
}

}  // namespace direl
