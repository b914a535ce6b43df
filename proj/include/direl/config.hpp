#pragma once

// Flat key-value training configuration: parser, serializer and the shipped
// experiment presets.

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "direl/regularize.hpp"

namespace direl {

struct TrainConfig {
  // scheme
  double theta = 0.0;
  double fp_tol = 1e-10;
  int fp_max_iter = 100;
  // architecture
  std::vector<int> widths = {32, 32};
  std::string activation = "tanh";
  // localization
  std::string mode = "ranged";
  double c_hat_1 = 0.5;
  double c_hat_2 = 1.0;
  double L_1 = 1.0;
  double L_2 = 5.0;
  double gamma_c_init = 0.0;
  double gamma_L_init = 0.0;
  // regularizers
  RegWeights reg;
  // optimizer
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int epochs = 2000;
  int batch_size = 0;  // 0: full batch for N <= 2000, else 256
  uint64_t seed = 1;
  // builtin dataset
  std::string dataset = "scurve";  // scurve | circle
  int n_points = 500;
  double noise = 0.05;
  double radius = 3.0;

  ThetaScheme scheme() const { return ThetaScheme(theta, fp_tol, fp_max_iter); }

  LocalizationParams localization_params() const {
    LocalizationParams p;
    p.mode = parse_localization_mode(mode);
    p.gamma_c = gamma_c_init;
    p.gamma_L = gamma_L_init;
    p.c_hat_1 = c_hat_1;
    p.c_hat_2 = c_hat_2;
    p.L_1 = L_1;
    p.L_2 = L_2;
    return p;
  }

  void validate() const {
    scheme().validate();
    localization_params().validate();
    reg.validate();
    parse_activation(activation);
    if (epochs < 0) throw config_error("epochs must be >= 0");
    if (batch_size < 0) throw config_error("batch_size must be >= 0");
    if (!(lr > 0.0)) throw config_error("lr must be positive");
    if (dataset != "scurve" && dataset != "circle")
      throw config_error("dataset must be 'scurve' or 'circle'");
    if (n_points < 1) throw config_error("n_points must be >= 1");
    for (int w : widths)
      if (w < 1) throw config_error("widths must be positive");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(std::stoi(item));
  }
  return out;
}

inline std::string int_list_to_string(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(v[i]);
  }
  return s;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw config_error("config key '" + key + "': expected true/false, got '" + s + "'");
}

}  // namespace detail

// Parses `key = value` lines; '#' starts a comment; unknown keys are errors.
inline TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    try {
      if (key == "theta") cfg.theta = std::stod(val);
      else if (key == "fp_tol") cfg.fp_tol = std::stod(val);
      else if (key == "fp_max_iter") cfg.fp_max_iter = std::stoi(val);
      else if (key == "widths") cfg.widths = detail::parse_int_list(val);
      else if (key == "activation") cfg.activation = val;
      else if (key == "mode") cfg.mode = val;
      else if (key == "c_hat_1") cfg.c_hat_1 = std::stod(val);
      else if (key == "c_hat_2") cfg.c_hat_2 = std::stod(val);
      else if (key == "L_1") cfg.L_1 = std::stod(val);
      else if (key == "L_2") cfg.L_2 = std::stod(val);
      else if (key == "gamma_c_init") cfg.gamma_c_init = std::stod(val);
      else if (key == "gamma_L_init") cfg.gamma_L_init = std::stod(val);
      else if (key == "w_f") cfg.reg.w_f = std::stod(val);
      else if (key == "w_lambda") cfg.reg.w_lambda = std::stod(val);
      else if (key == "w_n") cfg.reg.w_n = std::stod(val);
      else if (key == "w_adj") cfg.reg.w_adj = std::stod(val);
      else if (key == "alpha_max") cfg.reg.alpha_max = std::stod(val);
      else if (key == "eps_scale") cfg.reg.eps_scale = std::stod(val);
      else if (key == "adjoint_steps") cfg.reg.adjoint_steps = std::stoi(val);
      else if (key == "probes") cfg.reg.probes = std::stoi(val);
      else if (key == "normalize_n") cfg.reg.normalize_n = detail::parse_bool(val, key);
      else if (key == "lr") cfg.lr = std::stod(val);
      else if (key == "beta1") cfg.beta1 = std::stod(val);
      else if (key == "beta2") cfg.beta2 = std::stod(val);
      else if (key == "epochs") cfg.epochs = std::stoi(val);
      else if (key == "batch_size") cfg.batch_size = std::stoi(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else if (key == "dataset") cfg.dataset = val;
      else if (key == "n_points") cfg.n_points = std::stoi(val);
      else if (key == "noise") cfg.noise = std::stod(val);
      else if (key == "radius") cfg.radius = std::stod(val);
      else throw config_error("unknown config key '" + key + "' (line " + std::to_string(lineno) + ")");
    } catch (const config_error&) {
      throw;
    } catch (const std::exception&) {
      throw config_error("config key '" + key + "': cannot parse value '" + val + "'");
    }
  }
  cfg.validate();
  return cfg;
}

// Canonical key order; parse(serialize(cfg)) reproduces cfg.
inline std::vector<std::pair<std::string, std::string>> config_key_values(const TrainConfig& c) {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  return {
      {"theta", fmt(c.theta)},
      {"fp_tol", fmt(c.fp_tol)},
      {"fp_max_iter", std::to_string(c.fp_max_iter)},
      {"widths", detail::int_list_to_string(c.widths)},
      {"activation", c.activation},
      {"mode", c.mode},
      {"c_hat_1", fmt(c.c_hat_1)},
      {"c_hat_2", fmt(c.c_hat_2)},
      {"L_1", fmt(c.L_1)},
      {"L_2", fmt(c.L_2)},
      {"gamma_c_init", fmt(c.gamma_c_init)},
      {"gamma_L_init", fmt(c.gamma_L_init)},
      {"w_f", fmt(c.reg.w_f)},
      {"w_lambda", fmt(c.reg.w_lambda)},
      {"w_n", fmt(c.reg.w_n)},
      {"w_adj", fmt(c.reg.w_adj)},
      {"alpha_max", fmt(c.reg.alpha_max)},
      {"eps_scale", fmt(c.reg.eps_scale)},
      {"adjoint_steps", std::to_string(c.reg.adjoint_steps)},
      {"probes", std::to_string(c.reg.probes)},
      {"normalize_n", c.reg.normalize_n ? "true" : "false"},
      {"lr", fmt(c.lr)},
      {"beta1", fmt(c.beta1)},
      {"beta2", fmt(c.beta2)},
      {"epochs", std::to_string(c.epochs)},
      {"batch_size", std::to_string(c.batch_size)},
      {"seed", std::to_string(c.seed)},
      {"dataset", c.dataset},
      {"n_points", std::to_string(c.n_points)},
      {"noise", fmt(c.noise)},
      {"radius", fmt(c.radius)},
  };
}

inline std::string serialize_config(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_key_values(c)) out += k + " = " + v + "\n";
  return out;
}

// Shipped experiment presets (also available as files under configs/).
inline std::optional<TrainConfig> builtin_config(const std::string& name) {
  TrainConfig c;
  c.reg.w_lambda = 0.1;  // eigenvalue concentration strong enough to damp the
                         // layer dynamics transversally to the manifold
  c.reg.alpha_max = 1.0;
  c.lr = 2e-3;
  if (name == "scurve-1step" || name == "scurve-3step") {
    c.dataset = "scurve";
    c.reg.adjoint_steps = name == "scurve-3step" ? 3 : 1;
    c.epochs = name == "scurve-3step" ? 4000 : 9000;
    return c;
  }
  if (name == "circle-L1" || name == "circle-L5") {
    c.dataset = "circle";
    c.radius = 3.0;
    const double lip = name == "circle-L5" ? 5.0 : 1.0;
    c.L_1 = lip;
    c.L_2 = lip;
    c.reg.adjoint_steps = 1;
    c.epochs = 4000;
    return c;
  }
  if (name == "scurve-dissipative") {
    c.dataset = "scurve";
    c.mode = "dissipative";
    c.theta = 1.0;
    c.gamma_L_init = -1.0;  // gamma_L = 0 makes r = 0 exactly and stalls training
    c.reg.adjoint_steps = 1;
    c.epochs = 2500;
    return c;
  }
  return std::nullopt;
}

inline std::vector<std::string> builtin_config_names() {
  return {"scurve-1step", "scurve-3step", "circle-L1", "circle-L5", "scurve-dissipative"};
}

}  // namespace direl
