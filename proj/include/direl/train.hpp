#pragma once

// Loss assembly and the optimization loop.

#include <numeric>

#include "direl/checkpoint.hpp"
#include "direl/dataset.hpp"

namespace direl {

struct LossTerms {
  double r_f = 0.0;
  double r_lambda = 0.0;
  double r_n = 0.0;
  double r_adj = 0.0;
  double total = 0.0;
  bool adj_truncated = false;
  int total_node = -1;
};

// Weighted sum of the enabled regularizers on `tape`; terms with zero weight
// are skipped entirely (neither evaluated nor recorded as nodes).
inline LossTerms total_loss_on_tape(Tape& tape, StagedField& sf, const DenseMatrix& x,
                                    const RegWeights& reg, const ThetaScheme& scheme, Rng& rng) {
  LossTerms out;
  int total = -1;
  auto add_term = [&](double w, int node) {
    const int weighted = tape.scale_const(node, w);
    total = total < 0 ? weighted : tape.add(total, weighted);
  };
  if (reg.w_f > 0.0 || reg.w_lambda > 0.0) {
    StagedEval ev = eval_on_tape(sf, tape.constant(x));
    if (reg.w_f > 0.0) {
      const int node = r_f_on_tape(sf, ev);
      out.r_f = tape.scalar_value(node);
      add_term(reg.w_f, node);
    }
    if (reg.w_lambda > 0.0) {
      const int node = r_lambda_on_tape(sf, ev);
      out.r_lambda = tape.scalar_value(node);
      add_term(reg.w_lambda, node);
    }
  }
  if (reg.w_n > 0.0) {
    const OffManifoldSample s = sample_off_manifold(*sf.field, x, reg, rng);
    const int node = r_n_on_tape(sf, s);
    out.r_n = tape.scalar_value(node);
    add_term(reg.w_n, node);
  }
  if (reg.w_adj > 0.0) {
    const OffManifoldSample s = sample_off_manifold(*sf.field, x, reg, rng);
    const RAdjTapeResult r = r_adj_on_tape(sf, x, s, scheme, reg.adjoint_steps);
    out.r_adj = tape.scalar_value(r.node);
    out.adj_truncated = r.truncated;
    add_term(reg.w_adj, r.node);
  }
  out.total_node = total < 0 ? tape.constant_scalar(0.0) : total;
  out.total = tape.scalar_value(out.total_node);
  return out;
}

// Evaluation-only convenience wrapper.
inline LossTerms total_loss(const LocalizedField& f, const PointCloud& batch,
                            const RegWeights& reg, Rng& rng) {
  Tape tape;
  StagedField sf = stage(tape, f);
  return total_loss_on_tape(tape, sf, to_batch(batch), reg, f.scheme, rng);
}

// ---------------------------------------------------------------------------
// Adam on the flat parameter vector

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m, v;
  long t = 0;

  void step(std::vector<double>& p, const std::vector<double>& g) {
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
};

struct TrainResult {
  LocalizedField field;
  History history;
  TrainConfig config;
};

inline LocalizedField field_from_config(const TrainConfig& cfg) {
  return make_localized_field(2, cfg.widths, parse_activation(cfg.activation),
                              cfg.localization_params(), cfg.scheme(), cfg.seed);
}

// Adam over all learnable parameters (weights, biases, gamma_c, gamma_L) with
// the power-iteration state refreshed once per step.  Deterministic under a
// fixed (config, seed, data) triple.
inline TrainResult train(const TrainConfig& cfg, const PointCloud& data) {
  cfg.validate();
  if (data.dim() != 2) throw train_error("train: expected 2-dimensional data");
  TrainResult res;
  res.config = cfg;
  res.field = field_from_config(cfg);
  LocalizedField& field = res.field;
  const ThetaScheme scheme = cfg.scheme();
  const int n = data.size();
  const int batch = cfg.batch_size > 0 ? std::min(cfg.batch_size, n) : (n <= 2000 ? n : 256);
  const DenseMatrix full = to_batch(data);
  const bool dissipative = field.loc.mode == LocalizationMode::dissipative;

  Rng rng(cfg.seed ^ 0x10555EEDull);
  Adam adam{cfg.lr, cfg.beta1, cfg.beta2};
  std::vector<double> params = collect_params(field);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const int log_every = std::max(1, cfg.epochs / 20);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    HistoryRow row;
    row.epoch = epoch;
    int batches = 0;
    if (batch < n) std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < n; start += batch) {
      const int count = std::min(batch, n - start);
      DenseMatrix xb(2, count);
      for (int j = 0; j < count; ++j)
        for (int i = 0; i < 2; ++i) xb(i, j) = full(i, order[start + j]);
      refresh_spectral_state(field.base, 1);
      Tape tape;
      tape.reserve(64 + 16 * static_cast<size_t>(count));
      StagedField sf = stage(tape, field);
      const LossTerms lt = total_loss_on_tape(tape, sf, xb, cfg.reg, scheme, rng);
      if (!std::isfinite(lt.total))
        throw train_error("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(lt.total_node);
      const std::vector<double> grads = collect_gradients(sf, tape);
      adam.step(params, grads);
      set_params(field, params);
      row.r_f += lt.r_f;
      row.r_lambda += lt.r_lambda;
      row.r_n += lt.r_n;
      row.r_adj += lt.r_adj;
      row.total += lt.total;
      ++batches;
    }
    row.r_f /= batches;
    row.r_lambda /= batches;
    row.r_n /= batches;
    row.r_adj /= batches;
    row.total /= batches;
    const LipschitzBound lb = lipschitz_bound(field);
    row.lipschitz_bound = lb.value;
    if (dissipative && !(lb.value < 1.0))
      throw train_error("dissipative-mode invariant violated at epoch " + std::to_string(epoch));
    res.history.push_back(row);
    if (epoch % log_every == 0)
      log_info("epoch " + std::to_string(epoch) + " total " + std::to_string(row.total) +
               " r_f " + std::to_string(row.r_f));
  }
  return res;
}

inline Checkpoint make_checkpoint(const TrainResult& res) {
  return Checkpoint{1, res.config, res.field, res.history};
}

}  // namespace direl
