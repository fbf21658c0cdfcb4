#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "dccl/error.hpp"
#include "dccl/nets.hpp"
#include "dccl/random.hpp"
#include "dccl/synthdata.hpp"
#include "dccl/tensor.hpp"

namespace dccl {

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Per-domain shuffled split of `pool`. Every domain with at least two samples keeps at least
/// one sample on each side.
inline Split split_by_domain(const Dataset& data, std::span<const std::size_t> pool, double fraction,
                             std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)", "optimizer.split_fraction");
  std::map<std::size_t, std::vector<std::size_t>> by_domain;
  for (auto i : pool) by_domain[data.samples.at(i).domain].push_back(i);
  Split s;
  for (auto& [dom, idx] : by_domain) {
    Rng rng(derive_seed(seed, "split", dom));
    rng.shuffle(idx);
    std::size_t n = idx.size();
    auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    if (n >= 2) k = std::clamp<std::size_t>(k, 1, n - 1);
    else k = n;
    s.train.insert(s.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    s.val.insert(s.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

/// Exactly ceil(ratio * |pool|) samples of `pool`, chosen by seed.
inline std::vector<std::size_t> label_subset(std::span<const std::size_t> pool, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("label ratio must lie in (0, 1]", "optimizer.label_ratio");
  std::vector<std::size_t> idx(pool.begin(), pool.end());
  auto keep = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(idx.size())));
  if (keep >= idx.size()) return idx;
  Rng rng(derive_seed(seed, "label-subset"));
  rng.shuffle(idx);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Fraction of `idx` classified correctly in evaluation mode without augmentation.
inline double accuracy(const Model& model, const Dataset& data, std::span<const std::size_t> idx) {
  if (idx.empty()) throw Error("accuracy over an empty sample set");
  auto pred = argmax_rows(model.logits_eval(data.features(idx)));
  std::size_t correct = 0;
  for (std::size_t k = 0; k < idx.size(); ++k)
    if (pred[k] == data.samples[idx[k]].label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

/// Unit-norm encoder features in evaluation mode: the representation the classifier reads.
inline Tensor representation(const Model& model, const Tensor& x) {
  Tape tape;
  Binder b(tape, false);
  return l2_normalize(model.net.encoder.forward(b, tape.constant(x))).value();
}

/// Projection-head embeddings of a whole set standardized with that set's own moments.
/// Independent of running statistics, so comparable across training time.
inline Tensor set_embeddings(const Model& model, const Tensor& x) {
  Tape tape;
  Binder b(tape, false);
  return model.net.embed(b, tape.constant(x), Mode::Train).value();
}

/// Replaces the head's running statistics with the exact moments over `x`.
inline void calibrate_statistics(Model& model, const Tensor& x) {
  if (!model.net.head || !model.net.head->norm) return;
  Tape tape;
  Binder b(tape, false);
  BatchMoments moments;
  model.net.head->forward(b, model.net.encoder.forward(b, tape.constant(x)), Mode::Train, &moments);
  auto& norm = *model.net.head->norm;
  norm.running_mean = moments.front().first;
  norm.running_var = moments.front().second;
}

/// Mean over classes of the within-class total variance (trace of the class covariance).
inline double intra_class_variance(const Tensor& z, const std::vector<std::size_t>& labels) {
  if (z.rows() != labels.size()) throw ShapeError("embedding rows and label count differ");
  std::size_t d = z.cols();
  std::map<std::size_t, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) rows[labels[i]].push_back(i);
  double total = 0.0;
  for (const auto& [cls, members] : rows) {
    std::vector<double> centroid(d, 0.0);
    for (auto i : members)
      for (std::size_t j = 0; j < d; ++j) centroid[j] += z[i * d + j];
    for (auto& c : centroid) c /= static_cast<double>(members.size());
    double ss = 0.0;
    for (auto i : members)
      for (std::size_t j = 0; j < d; ++j) ss += (z[i * d + j] - centroid[j]) * (z[i * d + j] - centroid[j]);
    total += ss / static_cast<double>(members.size());
  }
  return total / static_cast<double>(rows.size());
}

}  // namespace dccl
