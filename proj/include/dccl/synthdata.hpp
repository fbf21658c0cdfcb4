#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dccl/error.hpp"
#include "dccl/random.hpp"
#include "dccl/tensor.hpp"
#include "dccl/textio.hpp"

namespace dccl {

struct LabeledSample {
  std::vector<double> x;
  std::size_t label = 0;
  std::size_t domain = 0;
};

/// A labeled multi-domain dataset plus the generator metadata needed to reproduce it.
struct Dataset {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::size_t domains = 0;
  std::uint64_t seed = 0;
  std::string generator;
  std::vector<std::pair<std::string, std::string>> params;
  std::vector<LabeledSample> samples;

  std::size_t size() const { return samples.size(); }

  void validate() const {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.x.size() != dim) throw Error("sample " + std::to_string(i) + " has wrong dimension");
      if (s.label >= classes) throw Error("sample " + std::to_string(i) + " label out of range");
      if (s.domain >= domains) throw Error("sample " + std::to_string(i) + " domain out of range");
    }
  }

  /// Stacks the selected samples' features into a matrix.
  Tensor features(std::span<const std::size_t> idx) const {
    std::vector<double> data;
    data.reserve(idx.size() * dim);
    for (auto i : idx) data.insert(data.end(), samples[i].x.begin(), samples[i].x.end());
    return Tensor({idx.size(), dim}, std::move(data));
  }

  std::vector<std::size_t> labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(samples[i].label);
    return out;
  }

  std::vector<std::size_t> domain_ids(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(samples[i].domain);
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }

  std::vector<std::size_t> indices_in_domain(std::size_t domain) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].domain == domain) idx.push_back(i);
    return idx;
  }
};

/// FNV-1a over labels, domains and the bit patterns of every coordinate.
inline std::uint64_t data_hash(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  mix(d.dim);
  mix(d.classes);
  mix(d.domains);
  for (const auto& s : d.samples) {
    mix(s.label);
    mix(s.domain);
    for (double v : s.x) mix(std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

// ---------------------------------------------------------------------------
// The two-domain toy construction with closed-form optimal maps.

/// sgn(v) = 1 for v >= 0, -1 otherwise.
inline int sgn(double v) { return v >= 0.0 ? 1 : -1; }

/// Class id 0 carries label -1 and class id 1 carries label +1.
inline int toy_label(std::size_t class_id) { return class_id == 0 ? -1 : 1; }

/// Domain 1 or 2; samples get domain ids 0 and 1 respectively.
inline Dataset gen_example31(std::size_t n_per_class, int domain, std::uint64_t seed) {
  if (domain != 1 && domain != 2) throw ConfigError("toy domain must be 1 or 2, got " + std::to_string(domain));
  if (n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
  Dataset d;
  d.dim = 2;
  d.classes = 2;
  d.domains = 2;
  d.seed = seed;
  d.generator = "example31";
  d.params = {{"n_per_class", std::to_string(n_per_class)}, {"domain", std::to_string(domain)}};
  Rng rng(derive_seed(seed, "example31", static_cast<std::uint64_t>(domain)));
  for (std::size_t cls = 0; cls < 2; ++cls) {
    double y = toy_label(cls);
    for (std::size_t i = 0; i < n_per_class; ++i) {
      double wide = rng.uniform(1.25, 1.75) * y;
      double narrow = rng.uniform(0.25, 0.75) * y;
      LabeledSample s;
      s.x = domain == 1 ? std::vector<double>{wide, narrow} : std::vector<double>{narrow, wide};
      s.label = cls;
      s.domain = static_cast<std::size_t>(domain - 1);
      d.samples.push_back(std::move(s));
    }
  }
  return d;
}

enum class ToyMapKind { Weak, Aggressive };

/// Angle-parametrized map onto the unit circle that minimizes the contrastive loss on domain 1
/// under weak or aggressive augmentation. Both closed forms read the training label y (+1/-1).
inline std::array<double, 2> toy_optimal_map(ToyMapKind kind, std::span<const double> x, int y) {
  if (x.size() != 2) throw ShapeError("toy map expects 2-d input, got " + std::to_string(x.size()));
  double theta = kind == ToyMapKind::Weak ? (x[0] - sgn(y)) * std::numbers::pi
                                          : (sgn(x[0]) + y) * std::numbers::pi / 3.0;
  return {std::cos(theta), std::sin(theta)};
}

/// Accuracy of the rule "predict sgn(second coordinate)" applied on top of the toy map.
inline double toy_sign_accuracy(ToyMapKind kind, const Dataset& d) {
  if (d.samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : d.samples) {
    int y = toy_label(s.label);
    auto z = toy_optimal_map(kind, s.x, y);
    if (sgn(z[1]) == y) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(d.samples.size());
}

// ---------------------------------------------------------------------------
// Rotated Gaussian family.

struct RotatedGaussianSpec {
  std::size_t domains = 4;
  std::size_t classes = 3;
  std::size_t per_domain_class = 100;
  double rotation_step = 0.35;
  double class_separation = 3.0;
  double noise_std = 0.3;
  std::uint64_t seed = 0;
  /// Extra coordinates carrying a domain-specific class cue: for each (domain, class) a fixed
  /// vector drawn from N(0, style_scale^2 I), plus noise_std noise per sample. 0 disables them.
  std::size_t style_dims = 0;
  double style_scale = 0.0;
};

/// Class k of domain m is centred at radius `class_separation`, angle 2*pi*k/C + m*step.
inline Dataset gen_rotated_gaussians(const RotatedGaussianSpec& spec) {
  if (spec.domains < 2) throw ConfigError("rotated gaussians need at least 2 domains", "dataset.domains");
  if (spec.classes < 2) throw ConfigError("rotated gaussians need at least 2 classes", "dataset.classes");
  if (spec.per_domain_class < 1) throw ConfigError("per-domain-class count must be positive", "dataset.per_domain_class");
  if (!(spec.class_separation > 0.0)) throw ConfigError("class separation must be positive", "dataset.class_separation");
  if (!(spec.noise_std >= 0.0)) throw ConfigError("noise std must be nonnegative", "dataset.noise_std");
  if (!(spec.style_scale >= 0.0)) throw ConfigError("style scale must be nonnegative", "dataset.style_scale");
  Dataset d;
  d.dim = 2 + spec.style_dims;
  d.classes = spec.classes;
  d.domains = spec.domains;
  d.seed = spec.seed;
  d.generator = "rotated_gaussians";
  d.params = {{"per_domain_class", std::to_string(spec.per_domain_class)},
              {"rotation_step", format_double(spec.rotation_step)},
              {"class_separation", format_double(spec.class_separation)},
              {"noise_std", format_double(spec.noise_std)}};
  if (spec.style_dims > 0) {
    d.params.emplace_back("style_dims", std::to_string(spec.style_dims));
    d.params.emplace_back("style_scale", format_double(spec.style_scale));
  }
  Rng rng(derive_seed(spec.seed, "rotated_gaussians"));
  Rng style_rng(derive_seed(spec.seed, "rotated_gaussians_style"));
  for (std::size_t m = 0; m < spec.domains; ++m) {
    for (std::size_t k = 0; k < spec.classes; ++k) {
      double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(spec.classes) +
                     static_cast<double>(m) * spec.rotation_step;
      double cx = spec.class_separation * std::cos(angle);
      double cy = spec.class_separation * std::sin(angle);
      std::vector<double> cue(spec.style_dims);
      for (auto& c : cue) c = spec.style_scale * style_rng.normal();
      for (std::size_t i = 0; i < spec.per_domain_class; ++i) {
        LabeledSample s;
        s.x = {cx + spec.noise_std * rng.normal(), cy + spec.noise_std * rng.normal()};
        for (double c : cue) s.x.push_back(c + spec.noise_std * style_rng.normal());
        s.label = k;
        s.domain = m;
        d.samples.push_back(std::move(s));
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Augmentation.

struct AugmentationSpec {
  enum class Kind { AdditiveUniform, CoordinateScaling, Compose };
  Kind kind = Kind::AdditiveUniform;
  double intensity = 0.0;
  /// Applied in order when kind == Compose.
  std::vector<AugmentationSpec> parts;

  static AugmentationSpec additive(double a) { return {Kind::AdditiveUniform, a, {}}; }
  static AugmentationSpec scaling(double a) { return {Kind::CoordinateScaling, a, {}}; }
  static AugmentationSpec compose(std::vector<AugmentationSpec> parts) { return {Kind::Compose, 0.0, std::move(parts)}; }

  bool is_identity() const {
    if (kind != Kind::Compose) return intensity == 0.0;
    for (const auto& p : parts)
      if (!p.is_identity()) return false;
    return true;
  }
};

inline void augment_inplace(std::span<double> x, const AugmentationSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case AugmentationSpec::Kind::AdditiveUniform:
      if (spec.intensity == 0.0) return;
      for (auto& v : x) v += rng.uniform(-spec.intensity, spec.intensity);
      return;
    case AugmentationSpec::Kind::CoordinateScaling:
      if (spec.intensity == 0.0) return;
      for (auto& v : x) v *= rng.uniform(1.0 - spec.intensity, 1.0 + spec.intensity);
      return;
    case AugmentationSpec::Kind::Compose:
      for (const auto& p : spec.parts) augment_inplace(x, p, rng);
      return;
  }
}

/// A random augmentation view; intensity 0 returns x unchanged. Labels are never touched.
inline std::vector<double> augment(std::span<const double> x, const AugmentationSpec& spec, Rng& rng) {
  std::vector<double> out(x.begin(), x.end());
  augment_inplace(out, spec, rng);
  return out;
}

/// Row-wise augmentation of a feature matrix.
inline Tensor augment_rows(const Tensor& x, const AugmentationSpec& spec, Rng& rng) {
  Tensor out = x;
  std::size_t c = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) augment_inplace(out.data().subspan(r * c, c), spec, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Per-domain-balanced batching.

/// Balanced batches need a batch size divisible by the number of training domains.
inline void check_batch_size(std::size_t batch_size, std::size_t domains) {
  if (batch_size != 0 && batch_size % domains == 0) return;
  std::size_t lower = batch_size / domains * domains;
  std::size_t upper = lower + domains;
  std::string hint = lower > 0 ? std::to_string(lower) + " or " + std::to_string(upper) : std::to_string(upper);
  throw ConfigError("batch size " + std::to_string(batch_size) + " is not divisible by the " + std::to_string(domains) +
                        " training domains; try " + hint,
                    "optimizer.batch_size");
}

/// Infinite stream of batches drawing batch_size / M samples from each of the M domains
/// present in the pool. Each domain is walked in a shuffled order and reshuffled when exhausted.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::span<const std::size_t> pool, std::size_t batch_size, std::uint64_t seed)
      : rng_(derive_seed(seed, "batches")) {
    std::map<std::size_t, std::vector<std::size_t>> by_domain;
    for (auto i : pool) by_domain[data.samples.at(i).domain].push_back(i);
    if (by_domain.empty()) throw ConfigError("batch pool is empty");
    std::size_t m = by_domain.size();
    check_batch_size(batch_size, m);
    per_domain_ = batch_size / m;
    for (auto& [dom, idx] : by_domain) {
      domains_.push_back(dom);
      orders_.push_back(std::move(idx));
      cursors_.push_back(0);
    }
    for (auto& order : orders_) rng_.shuffle(order);
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> batch;
    batch.reserve(per_domain_ * orders_.size());
    for (std::size_t d = 0; d < orders_.size(); ++d) {
      for (std::size_t k = 0; k < per_domain_; ++k) {
        if (cursors_[d] == orders_[d].size()) {
          rng_.shuffle(orders_[d]);
          cursors_[d] = 0;
        }
        batch.push_back(orders_[d][cursors_[d]++]);
      }
    }
    return batch;
  }

  const std::vector<std::size_t>& domains() const { return domains_; }
  std::size_t per_domain() const { return per_domain_; }

 private:
  Rng rng_;
  std::size_t per_domain_ = 0;
  std::vector<std::size_t> domains_;
  std::vector<std::vector<std::size_t>> orders_;
  std::vector<std::size_t> cursors_;
};

inline BatchStream make_batches(const Dataset& data, std::span<const std::size_t> pool, std::size_t batch_size,
                                std::uint64_t seed) {
  return BatchStream(data, pool, batch_size, seed);
}

// ---------------------------------------------------------------------------
// Text dump format:
//   # dccl-data v1 generator=<name> M=<M> C=<C> dim=<d> seed=<s> [key=value ...]
//   domain,label,x1,...,xd

inline void write_dataset(std::ostream& os, const Dataset& d) {
  os << "# dccl-data v1 generator=" << d.generator << " M=" << d.domains << " C=" << d.classes << " dim=" << d.dim
     << " seed=" << d.seed;
  for (const auto& [k, v] : d.params) os << ' ' << k << '=' << v;
  os << '\n';
  for (const auto& s : d.samples) {
    os << s.domain << ',' << s.label;
    for (double v : s.x) os << ',' << format_double(v);
    os << '\n';
  }
}

inline Dataset read_dataset(std::istream& is) {
  Dataset d;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) throw ParseError("empty dataset file", 1);
  ++lineno;
  auto fields = split_ws(line);
  if (fields.size() < 3 || fields[0] != "#" || fields[1] != "dccl-data" || fields[2] != "v1") {
    throw ParseError("missing '# dccl-data v1' header", lineno);
  }
  bool have_m = false, have_c = false, have_dim = false;
  for (std::size_t i = 3; i < fields.size(); ++i) {
    auto eq = fields[i].find('=');
    if (eq == std::string::npos) throw ParseError("bad header field '" + fields[i] + "'", lineno);
    auto key = fields[i].substr(0, eq), val = fields[i].substr(eq + 1);
    try {
      if (key == "generator") d.generator = val;
      else if (key == "M") d.domains = parse_size(val), have_m = true;
      else if (key == "C") d.classes = parse_size(val), have_c = true;
      else if (key == "dim") d.dim = parse_size(val), have_dim = true;
      else if (key == "seed") d.seed = parse_u64(val);
      else d.params.emplace_back(key, val);
    } catch (const Error& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  if (!have_m || !have_c || !have_dim) throw ParseError("header must define M, C and dim", lineno);
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != d.dim + 2) {
      throw ParseError("expected " + std::to_string(d.dim + 2) + " fields, got " + std::to_string(cells.size()), lineno);
    }
    LabeledSample s;
    try {
      s.domain = parse_size(cells[0]);
      s.label = parse_size(cells[1]);
      for (std::size_t j = 0; j < d.dim; ++j) s.x.push_back(parse_double(cells[2 + j]));
    } catch (const Error& e) {
      throw ParseError(e.what(), lineno);
    }
    if (s.domain >= d.domains) throw ParseError("domain id out of range", lineno);
    if (s.label >= d.classes) throw ParseError("class id out of range", lineno);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace dccl
