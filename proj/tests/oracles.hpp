#pragma once

// Plain double-loop reference implementations used as independent oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "dccl/losses.hpp"
#include "dccl/nets.hpp"
#include "dccl/random.hpp"
#include "dccl/tensor.hpp"

namespace dccl::testing {

using Rows = std::vector<std::vector<double>>;

inline Rows rows_of(const Tensor& t) {
  Rows r(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) r[i][j] = t.at(i, j);
  return r;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

inline double oracle_erm(const Rows& logits, const std::vector<std::size_t>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v);
    total += std::log(z) - logits[i][labels[i]];
  }
  return total / static_cast<double>(logits.size());
}

/// Reference contrastive loss straight from the definition.
inline double oracle_infonce(const Rows& q, const Rows& keys, const Rows* anchors, const std::vector<Positive>& pos,
                             const std::vector<char>& neg, double tau, DenominatorMode mode) {
  std::size_t n = q.size(), m = keys.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = pos[i].anchor ? dot(q[i], (*anchors)[i]) / tau : dot(q[i], keys[pos[i].key]) / tau;
    double denom = 0.0;
    for (std::size_t k = 0; k < m; ++k)
      if (neg[i * m + k]) denom += std::exp(dot(q[i], keys[k]) / tau);
    if (mode == DenominatorMode::StandardInfoNCE) denom += std::exp(p);
    total += -(p - std::log(denom));
  }
  return total / static_cast<double>(n);
}

/// Reference generative loss for an affine decoder (W, b) and per-dimension sigma.
inline double oracle_gen(const Rows& z, const Rows& z_pre, const Rows& noise, const std::vector<double>& sigma,
                         const Rows& W, const std::vector<double>& bias) {
  double total = 0.0;
  std::size_t d = sigma.size(), dp = bias.size();
  for (std::size_t i = 0; i < z.size(); ++i) {
    std::vector<double> lat(d);
    for (std::size_t j = 0; j < d; ++j) lat[j] = z[i][j] + sigma[j] * noise[i][j];
    double recon = 0.0;
    for (std::size_t k = 0; k < dp; ++k) {
      double out = bias[k];
      for (std::size_t j = 0; j < d; ++j) out += lat[j] * W[j][k];
      recon += (z_pre[i][k] - out) * (z_pre[i][k] - out);
    }
    double kl = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      kl += 0.5 * (sigma[j] * sigma[j] + z[i][j] * z[i][j] - 1.0 - std::log(sigma[j] * sigma[j]));
    total += recon + kl;
  }
  return total / static_cast<double>(z.size());
}

inline Rows random_unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  Rows r(n, std::vector<double>(d));
  for (auto& row : r) {
    double s = 0.0;
    for (auto& v : row) {
      v = rng.normal();
      s += v * v;
    }
    for (auto& v : row) v /= std::sqrt(s);
  }
  return r;
}

inline Tensor to_tensor(const Rows& r) {
  std::vector<double> flat;
  for (const auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
  return Tensor({r.size(), r.front().size()}, std::move(flat));
}

/// A fixed mini-batch of the full objective: two views, labels, domains, anchor embeddings,
/// positive choices and reparameterization noise, all frozen so the loss is a deterministic
/// function of the model parameters.
struct ObjectiveBatch {
  Tensor xa, xb;
  std::vector<std::size_t> labels, domains;
  Tensor z_pre;
  std::vector<Positive> positives;
  Tensor noise;
};

inline ObjectiveBatch random_objective_batch(const Model& m, std::size_t n, Rng& rng) {
  ObjectiveBatch b;
  std::size_t c = m.arch.classes;
  b.xa = rng.normal({n, m.arch.input_dim});
  b.xb = rng.normal({n, m.arch.input_dim});
  for (std::size_t i = 0; i < n; ++i) {
    b.labels.push_back(i % c);
    b.domains.push_back(rng.index(3));
  }
  b.z_pre = to_tensor(random_unit_rows(rng, n, m.arch.output_dim()));
  LossConfig cfg;
  cfg.cdc_enabled = cfg.pma_enabled = true;
  b.positives = resolve_positives(cfg, b.labels, b.domains, rng);
  b.noise = rng.normal({n, m.arch.output_dim()});
  return b;
}

/// Combined objective on a fixed batch; Train-mode batch standardization over both views.
inline LossBreakdown objective(const Model& m, Binder& bind, const ObjectiveBatch& ob, const LossConfig& cfg) {
  Tape& tape = bind.tape();
  std::size_t n = ob.labels.size();
  Var feats = m.net.encoder.forward(bind, concat_rows(tape.constant(ob.xa), tape.constant(ob.xb)));
  Var z = m.net.project(bind, feats, Mode::Train);
  Var za = slice_rows(z, 0, n), zb = slice_rows(z, n, n);
  Var logits = m.classifier.forward(bind, slice_rows(feats, 0, n));
  Var z_pre = tape.constant(ob.z_pre);
  std::vector<Positive> pos = ob.positives;
  if (!cfg.pma_enabled)
    for (auto& p : pos) p.anchor = false;
  if (cfg.self_contrast_only)
    for (std::size_t i = 0; i < n; ++i) pos[i] = {i, false};
  auto cb = make_two_view_batch(za, zb, z_pre, pos, ob.labels, cfg.anchors_as_negatives);
  GenInputs gi{&m.gen, &bind, za, z_pre, ob.noise};
  return total_loss(logits, ob.labels, cfg, &cb, &gi);
}

}  // namespace dccl::testing
