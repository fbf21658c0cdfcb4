#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dccl/error.hpp"
#include "dccl/nets.hpp"
#include "dccl/random.hpp"
#include "dccl/tensor.hpp"

namespace dccl {

/// Whether the positive logit also appears in the softmax denominator.
enum class DenominatorMode {
  NegativesOnly,    // the literal form: sum over the negative pool only
  StandardInfoNCE,  // positive + negatives
};

struct LossConfig {
  double lambda = 1.0;
  double beta = 0.05;
  double temperature = 0.1;
  bool cdc_enabled = false;
  bool pma_enabled = false;
  bool gt_enabled = false;
  bool self_contrast_only = false;
  bool aggressive_augmentation = false;
  DenominatorMode denominator = DenominatorMode::NegativesOnly;
  double pma_probability = 0.5;
  /// Other samples' anchor embeddings join each negative pool.
  bool anchors_as_negatives = false;

  bool contrast_active() const { return cdc_enabled || pma_enabled || self_contrast_only; }
  bool needs_anchor() const { return pma_enabled || gt_enabled; }

  /// Throws ConfigError naming the offending key.
  void validate(bool anchor_available = true) const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive", "loss.temperature");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be nonnegative", "loss.lambda");
    if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative", "loss.beta");
    if (!(pma_probability >= 0.0 && pma_probability <= 1.0)) {
      throw ConfigError("pma_probability must lie in [0, 1]", "loss.pma_probability");
    }
    if (self_contrast_only && cdc_enabled) {
      throw ConfigError("self_contrast_only cannot be combined with cdc", "loss.self_contrast_only");
    }
    if (pma_enabled && !anchor_available) throw ConfigError("pma requires anchor embeddings", "loss.pma");
    if (gt_enabled && !anchor_available) throw ConfigError("gt requires anchor embeddings", "loss.gt");
  }
};

// ---------------------------------------------------------------------------
// Supervised term.

/// Mean softmax cross-entropy.
inline Var erm_loss(const Var& logits, const std::vector<std::size_t>& labels) {
  const auto& L = logits.value();
  if (L.rank() != 2) throw ShapeError("logits must be a matrix, got " + shape_str(L.shape()));
  std::size_t n = L.shape()[0], c = L.shape()[1];
  if (c < 2) throw ShapeError("need at least 2 classes, got " + std::to_string(c));
  if (labels.size() != n) {
    throw ShapeError(std::to_string(labels.size()) + " labels for " + std::to_string(n) + " logit rows");
  }
  Tensor onehot = Tensor::zeros({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) {
      throw Error("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(c) + " classes");
    }
    onehot.at(i, labels[i]) = 1.0;
  }
  Var picked = sum_axis(logits * logits.tape().constant(std::move(onehot)), 1);
  return mean(log_sum_exp(logits) - picked);
}

// ---------------------------------------------------------------------------
// Contrastive terms.

/// Where a query's positive comes from: a key row, or the query's own anchor embedding.
struct Positive {
  std::size_t key = 0;
  bool anchor = false;

  friend bool operator==(const Positive&, const Positive&) = default;
};

/// Queries z (n x d), candidate keys (m x d), optional detached anchor embeddings (n x d),
/// one resolved positive per query and a row-major n x m negative mask over the keys.
struct ContrastBatch {
  Var queries;
  Var keys;
  std::optional<Var> anchors;
  std::vector<Positive> positives;
  std::vector<char> negatives;
  /// Optional; when both are set every key positive is checked for class agreement.
  std::vector<std::size_t> labels;
  std::vector<std::size_t> key_labels;

  std::size_t size() const { return queries.value().rows(); }
  std::size_t key_count() const { return keys.value().rows(); }
};

namespace detail {
inline void require_unit_rows(const Tensor& t, const char* what) {
  std::size_t c = t.cols();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += t[i * c + j] * t[i * c + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-9) {
      throw Error(std::string(what) + " row " + std::to_string(i) + " is not unit-norm");
    }
  }
}
}  // namespace detail

inline void validate(const ContrastBatch& b) {
  const auto& Q = b.queries.value();
  const auto& K = b.keys.value();
  if (Q.rank() != 2 || K.rank() != 2 || Q.cols() != K.cols()) {
    throw ShapeError("queries " + shape_str(Q.shape()) + " and keys " + shape_str(K.shape()) + " are incompatible");
  }
  std::size_t n = Q.rows(), m = K.rows();
  detail::require_unit_rows(Q, "query");
  detail::require_unit_rows(K, "key");
  if (b.anchors) {
    if (b.anchors->shape() != Q.shape()) {
      throw ShapeError("anchors " + shape_str(b.anchors->shape()) + " do not match queries " + shape_str(Q.shape()));
    }
    if (b.anchors->requires_grad()) throw Error("anchor embeddings must be detached");
    detail::require_unit_rows(b.anchors->value(), "anchor");
  }
  if (b.positives.size() != n) throw ShapeError("need one positive per query");
  if (b.negatives.size() != n * m) throw ShapeError("negative mask must be queries x keys");
  bool check_labels = !b.labels.empty() && !b.key_labels.empty();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = b.positives[i];
    if (p.anchor) {
      if (!b.anchors) throw Error("query " + std::to_string(i) + " uses an anchor positive but no anchors were given");
    } else {
      if (p.key >= m) throw Error("query " + std::to_string(i) + " positive key out of range");
      if (check_labels && b.key_labels[p.key] != b.labels[i]) {
        throw Error("query " + std::to_string(i) + " has a cross-class positive");
      }
    }
    bool any = false;
    for (std::size_t k = 0; k < m && !any; ++k) any = b.negatives[i * m + k] != 0;
    if (!any) throw Error("query " + std::to_string(i) + " has an empty negative pool");
  }
}

/// Mean over queries of -log[exp(z.z+/t) / sum exp(z.z-/t)]; the positive joins the sum
/// under StandardInfoNCE. Covers self-contrast, cross-domain and anchored positives alike.
inline Var infonce_loss(const ContrastBatch& b, const LossConfig& cfg) {
  validate(b);
  if (!(cfg.temperature > 0.0)) throw ConfigError("temperature must be positive", "loss.temperature");
  Tape& tape = b.queries.tape();
  std::size_t n = b.size(), m = b.key_count();
  double inv_t = 1.0 / cfg.temperature;
  Var logits = matmul(b.queries, transpose(b.keys)) * inv_t;
  std::size_t width = m;
  if (b.anchors) {
    logits = concat_cols(logits, row_dot(b.queries, *b.anchors) * inv_t);
    width = m + 1;
  }
  Tensor pos_mask = Tensor::zeros({n, width});
  std::vector<char> denom(n * width, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t col = b.positives[i].anchor ? m : b.positives[i].key;
    pos_mask.at(i, col) = 1.0;
    for (std::size_t k = 0; k < m; ++k) denom[i * width + k] = b.negatives[i * m + k];
    if (cfg.denominator == DenominatorMode::StandardInfoNCE) denom[i * width + col] = 1;
  }
  Var positive = sum_axis(logits * tape.constant(std::move(pos_mask)), 1);
  return mean(masked_log_sum_exp(logits, denom) - positive);
}

/// For each i, a uniformly drawn same-class index j != i from any domain; i itself when i is
/// the only member of its class (the caller then uses i's second augmentation view).
inline std::vector<std::size_t> sample_positives_cdc(const std::vector<std::size_t>& labels,
                                                     const std::vector<std::size_t>& domains, Rng& rng) {
  if (!domains.empty() && domains.size() != labels.size()) throw ShapeError("labels and domains differ in length");
  std::size_t n = labels.size();
  std::vector<std::size_t> out(n);
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < n; ++i) {
    eligible.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) eligible.push_back(j);
    out[i] = eligible.empty() ? i : eligible[rng.index(eligible.size())];
  }
  return out;
}

/// Self-contrast: every sample is paired with its own second view.
inline std::vector<std::size_t> self_positives(std::size_t n) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

/// Each sample independently takes its anchor embedding as positive with probability p.
inline std::vector<Positive> mix_anchor_positives(const std::vector<std::size_t>& assignment, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("pma_probability must lie in [0, 1]", "loss.pma_probability");
  std::vector<Positive> out(assignment.size());
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    out[i].key = assignment[i];
    out[i].anchor = rng.bernoulli(p);
  }
  return out;
}

/// Per-sample positive choice for the configured objective. Indices refer to samples;
/// `anchor` marks the anchor embedding.
inline std::vector<Positive> resolve_positives(const LossConfig& cfg, const std::vector<std::size_t>& labels,
                                               const std::vector<std::size_t>& domains, Rng& rng) {
  auto base = cfg.cdc_enabled ? sample_positives_cdc(labels, domains, rng) : self_positives(labels.size());
  if (cfg.pma_enabled) return mix_anchor_positives(base, cfg.pma_probability, rng);
  std::vector<Positive> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) out[i].key = base[i];
  return out;
}

/// Two-view batch: queries are first views, keys are [first views; second views] and, when
/// requested, [... ; anchors]. A sample-level positive j maps to key n + j (j's second view).
/// Query i's negatives are every key of another sample, minus its positive key.
inline ContrastBatch make_two_view_batch(const Var& first, const Var& second, std::optional<Var> anchors,
                                         const std::vector<Positive>& sample_positives,
                                         const std::vector<std::size_t>& labels, bool anchors_as_negatives) {
  std::size_t n = first.value().rows();
  if (second.value().rows() != n || sample_positives.size() != n) throw ShapeError("two-view batch sizes differ");
  ContrastBatch b;
  b.queries = first;
  b.keys = concat_rows(first, second);
  std::size_t views = 2;
  if (anchors_as_negatives && anchors) {
    b.keys = concat_rows(b.keys, *anchors);
    views = 3;
  }
  b.anchors = anchors;
  std::size_t m = views * n;
  b.positives.resize(n);
  b.negatives.assign(n * m, 0);
  for (std::size_t i = 0; i < n; ++i) {
    b.positives[i] = sample_positives[i].anchor ? Positive{0, true} : Positive{n + sample_positives[i].key, false};
    for (std::size_t k = 0; k < m; ++k) {
      bool own = k % n == i;
      bool is_pos = !b.positives[i].anchor && k == b.positives[i].key;
      b.negatives[i * m + k] = (!own && !is_pos) ? 1 : 0;
    }
  }
  if (!labels.empty()) {
    b.labels = labels;
    for (std::size_t v = 0; v < views; ++v) b.key_labels.insert(b.key_labels.end(), labels.begin(), labels.end());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Generative transformation term.

struct GenLoss {
  Var loss;            // scalar
  Var reconstruction;  // n x 1 squared reconstruction errors
  Var kl;              // n x 1
};

/// Mean over the batch of ||z_pre - psi(z_lat)||^2 + KL[q(z_lat | z) || N(0, I)].
inline GenLoss gen_loss(const GenerativeTransformer& g, Binder& b, const Var& z, const Var& z_pre, const Tensor& noise) {
  if (z_pre.requires_grad()) throw Error("anchor embeddings must be detached");
  auto t = transform(g, b, z, noise);
  if (t.reconstruction.shape() != z_pre.shape()) {
    throw ShapeError("reconstruction " + shape_str(t.reconstruction.shape()) + " does not match anchor embeddings " +
                     shape_str(z_pre.shape()));
  }
  Var recon = sum_axis(square(z_pre - t.reconstruction), 1);
  return {mean(recon + t.kl), recon, t.kl};
}

// ---------------------------------------------------------------------------
// Combined objective.

struct GenInputs {
  const GenerativeTransformer* transformer = nullptr;
  Binder* binder = nullptr;
  Var z;
  Var z_pre;
  Tensor noise;
};

struct LossBreakdown {
  Var total;
  double erm = 0.0;
  double contrast = 0.0;  // unweighted
  double gen = 0.0;       // unweighted
  double weighted_contrast = 0.0;
  double weighted_gen = 0.0;
  double total_value = 0.0;
};

/// L = L_erm + lambda * L_contrast + beta * L_gen, each term present only when enabled.
inline LossBreakdown total_loss(const Var& logits, const std::vector<std::size_t>& labels, const LossConfig& cfg,
                                const ContrastBatch* contrast, const GenInputs* gen) {
  LossBreakdown out;
  out.total = erm_loss(logits, labels);
  out.erm = out.total.value().item();
  if (cfg.contrast_active()) {
    if (!contrast) throw Error("contrastive term enabled but no contrast batch supplied");
    Var c = infonce_loss(*contrast, cfg);
    Var wc = c * cfg.lambda;
    out.contrast = c.value().item();
    out.weighted_contrast = wc.value().item();
    out.total = out.total + wc;
  }
  if (cfg.gt_enabled) {
    if (!gen || !gen->transformer || !gen->binder) throw Error("generative term enabled but no inputs supplied");
    Var gl = gen_loss(*gen->transformer, *gen->binder, gen->z, gen->z_pre, gen->noise).loss;
    Var wg = gl * cfg.beta;
    out.gen = gl.value().item();
    out.weighted_gen = wg.value().item();
    out.total = out.total + wg;
  }
  out.total_value = out.total.value().item();
  return out;
}

}  // namespace dccl
