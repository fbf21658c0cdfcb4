#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "dccl/error.hpp"
#include "dccl/random.hpp"
#include "dccl/tensor.hpp"
#include "dccl/textio.hpp"

namespace dccl {

enum class Mode { Train, Eval };

/// Batch (mean, variance) pairs produced by training-mode standardization layers.
using BatchMoments = std::vector<std::pair<Tensor, Tensor>>;

/// Lifts parameter tensors onto a tape, once per tensor. Trainable binders create leaves that
/// receive gradients; frozen binders create constants.
class Binder {
 public:
  Binder(Tape& tape, bool trainable) : tape_(tape), trainable_(trainable) {}

  Var operator()(const Tensor& param) {
    if (const auto* v = find(param)) return *v;
    Var v = trainable_ ? tape_.variable(param) : tape_.constant(param);
    bound_.emplace_back(&param, v);
    return v;
  }

  const Var* find(const Tensor& param) const {
    for (const auto& [p, v] : bound_)
      if (p == &param) return &v;
    return nullptr;
  }

  Tape& tape() const { return tape_; }
  bool trainable() const { return trainable_; }

 private:
  Tape& tape_;
  bool trainable_;
  std::vector<std::pair<const Tensor*, Var>> bound_;
};

/// Gradient for each parameter in order; null where the parameter never reached the root.
inline std::vector<const Tensor*> collect_grads(const Gradients& grads, const Binder& binder,
                                                const std::vector<Tensor*>& params) {
  std::vector<const Tensor*> out;
  out.reserve(params.size());
  for (auto* p : params) {
    const Var* v = binder.find(*p);
    out.push_back(v ? grads.find(*v) : nullptr);
  }
  return out;
}

/// y = x W + b with W stored in x out layout.
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear random(std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.weight = rng.normal({in, out}, std::sqrt(2.0 / static_cast<double>(in)));
    l.bias = Tensor::zeros({1, out});
    return l;
  }

  static Linear identity(std::size_t n) {
    Linear l;
    l.weight = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) l.weight.at(i, i) = 1.0;
    l.bias = Tensor::zeros({1, n});
    return l;
  }

  std::size_t in_dim() const { return weight.shape()[0]; }
  std::size_t out_dim() const { return weight.shape()[1]; }

  Var forward(Binder& b, const Var& x) const { return matmul(x, b(weight)) + b(bias); }
};

/// Affine layers with a rectifier between consecutive layers (none after the last).
struct Encoder {
  std::vector<Linear> layers;

  /// widths = {input, hidden..., output}
  static Encoder random(const std::vector<std::size_t>& widths, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("encoder needs at least input and output widths", "model.encoder");
    Encoder e;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) e.layers.push_back(Linear::random(widths[i], widths[i + 1], rng));
    return e;
  }

  std::size_t input_dim() const { return layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.back().out_dim(); }

  Var forward(Binder& b, Var x) const {
    if (x.value().rank() != 2 || x.value().shape()[1] != input_dim()) {
      throw ShapeError("input width " + std::to_string(x.value().cols()) + " does not match encoder input dimension " +
                       std::to_string(input_dim()));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].forward(b, x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }
};

/// Per-feature batch standardization with a learned affine and running statistics.
struct BatchStandardize {
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  static BatchStandardize make(std::size_t width) {
    return {Tensor::full({1, width}, 1.0), Tensor::zeros({1, width}), Tensor::zeros({1, width}),
            Tensor::full({1, width}, 1.0)};
  }

  /// Training mode standardizes with batch moments and appends them to `moments` when given.
  /// Evaluation mode uses the running estimates only.
  Var forward(Binder& b, const Var& x, Mode mode, BatchMoments* moments) const {
    Tape& tape = b.tape();
    Var xhat;
    if (mode == Mode::Train) {
      Var mu = mean_axis(x, 0);
      Var centered = x - mu;
      Var var = mean_axis(square(centered), 0);
      xhat = centered / sqrt(add_scalar(var, kEps));
      if (moments) moments->emplace_back(mu.value(), var.value());
    } else {
      Tensor inv_std = running_var;
      for (auto& v : inv_std.data()) v = 1.0 / std::sqrt(v + kEps);
      xhat = (x - tape.constant(running_mean)) * tape.constant(inv_std);
    }
    return xhat * b(gamma) + b(beta);
  }

  void absorb(const Tensor& mean, const Tensor& var) {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t j = 0; j < rm.size(); ++j) {
      rm[j] = (1.0 - kMomentum) * rm[j] + kMomentum * mean[j];
      rv[j] = (1.0 - kMomentum) * rv[j] + kMomentum * var[j];
    }
  }
};

/// Two affine layers with a rectifier between them and optional batch standardization after
/// the first. Output is unnormalized; `embed` normalizes.
struct ProjectionHead {
  Linear first;
  std::optional<BatchStandardize> norm;
  Linear second;

  static ProjectionHead random(std::size_t in, std::size_t hidden, std::size_t out, bool batchnorm, Rng& rng) {
    ProjectionHead h;
    h.first = Linear::random(in, hidden, rng);
    if (batchnorm) h.norm = BatchStandardize::make(hidden);
    h.second = Linear::random(hidden, out, rng);
    return h;
  }

  std::size_t output_dim() const { return second.out_dim(); }

  Var forward(Binder& b, const Var& x, Mode mode, BatchMoments* moments) const {
    Var h = first.forward(b, x);
    if (norm) h = norm->forward(b, h, mode, moments);
    return second.forward(b, relu(h));
  }
};

/// Encoder followed by an optional projection head; outputs rows of unit norm.
struct Embedder {
  Encoder encoder;
  std::optional<ProjectionHead> head;

  std::size_t input_dim() const { return encoder.input_dim(); }
  std::size_t feature_dim() const { return encoder.output_dim(); }
  std::size_t embed_dim() const { return head ? head->output_dim() : encoder.output_dim(); }

  Var project(Binder& b, const Var& features, Mode mode, BatchMoments* moments = nullptr) const {
    Var out = head ? head->forward(b, features, mode, moments) : features;
    return l2_normalize(out);
  }

  Var embed(Binder& b, const Var& x, Mode mode, BatchMoments* moments = nullptr) const {
    return project(b, encoder.forward(b, x), mode, moments);
  }

  /// Folds training-mode batch moments into the running statistics.
  void absorb(const BatchMoments& moments) {
    if (!head || !head->norm || moments.empty()) return;
    for (const auto& [mean, var] : moments) head->norm->absorb(mean, var);
  }
};

/// Variational map from a fine-tuned embedding z to an anchor embedding. The mean encoder is
/// the identity, the variance encoder a softplus of a learned bias, the decoder affine.
struct GenerativeTransformer {
  Tensor sigma_bias;  // 1 x d
  Linear decoder;     // d -> d_pre

  static GenerativeTransformer make(std::size_t latent_dim, std::size_t anchor_dim, Rng& rng) {
    GenerativeTransformer g;
    g.sigma_bias = Tensor::full({1, latent_dim}, softplus_inverse(1.0));
    g.decoder = latent_dim == anchor_dim ? Linear::identity(latent_dim) : Linear::random(latent_dim, anchor_dim, rng);
    return g;
  }

  std::size_t latent_dim() const { return sigma_bias.shape()[1]; }
  std::size_t anchor_dim() const { return decoder.out_dim(); }

  Tensor sigma() const {
    Tensor s = sigma_bias;
    for (auto& v : s.data()) v = softplus_value(v);
    return s;
  }
};

struct TransformOutput {
  Var z_lat;           // n x d
  Var reconstruction;  // n x d_pre
  Var kl;              // n x 1, closed-form KL to the unit Gaussian
};

/// Reparameterized draw z_lat = z + sigma * noise, decoded reconstruction, and per-sample
/// KL[N(z, diag sigma^2) || N(0, I)] = 1/2 sum_j (sigma_j^2 + z_j^2 - 1 - ln sigma_j^2).
inline TransformOutput transform(const GenerativeTransformer& g, Binder& b, const Var& z, const Tensor& noise) {
  if (noise.shape() != z.shape()) {
    throw ShapeError("noise shape " + shape_str(noise.shape()) + " does not match embedding shape " +
                     shape_str(z.shape()));
  }
  if (z.value().cols() != g.latent_dim()) {
    throw ShapeError("embedding width " + std::to_string(z.value().cols()) + " does not match latent dimension " +
                     std::to_string(g.latent_dim()));
  }
  Tape& tape = b.tape();
  Var sigma = softplus(b(g.sigma_bias));
  Var z_lat = z + sigma * tape.constant(noise);
  Var recon = g.decoder.forward(b, z_lat);
  Var prior_gap = add_scalar(square(sigma), -1.0) - 2.0 * log(sigma);  // 1 x d
  Var kl = 0.5 * (sum_axis(square(z), 1) + sum(prior_gap));
  return {z_lat, recon, kl};
}

// ---------------------------------------------------------------------------
// Full model: embedder, linear classifier on encoder features, generative transformer.

struct Architecture {
  std::size_t input_dim = 2;
  std::vector<std::size_t> encoder_hidden = {32};
  std::size_t feature_dim = 16;
  bool use_head = true;
  std::size_t head_hidden = 32;
  std::size_t embed_dim = 8;
  bool head_batchnorm = true;
  std::size_t classes = 3;

  std::vector<std::size_t> encoder_widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), encoder_hidden.begin(), encoder_hidden.end());
    w.push_back(feature_dim);
    return w;
  }
  std::size_t output_dim() const { return use_head ? embed_dim : feature_dim; }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Model {
  Architecture arch;
  Embedder net;
  Linear classifier;
  GenerativeTransformer gen;

  static Model random(const Architecture& arch, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "model-init"));
    Model m;
    m.arch = arch;
    m.net.encoder = Encoder::random(arch.encoder_widths(), rng);
    if (arch.use_head) {
      m.net.head = ProjectionHead::random(arch.feature_dim, arch.head_hidden, arch.embed_dim, arch.head_batchnorm, rng);
    }
    m.classifier = Linear::random(arch.feature_dim, arch.classes, rng);
    m.gen = GenerativeTransformer::make(arch.output_dim(), arch.output_dim(), rng);
    return m;
  }

  /// Named trainable tensors in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < net.encoder.layers.size(); ++i) {
      auto& l = net.encoder.layers[i];
      out.emplace_back("encoder." + std::to_string(i) + ".weight", &l.weight);
      out.emplace_back("encoder." + std::to_string(i) + ".bias", &l.bias);
    }
    if (net.head) {
      out.emplace_back("head.first.weight", &net.head->first.weight);
      out.emplace_back("head.first.bias", &net.head->first.bias);
      if (net.head->norm) {
        out.emplace_back("head.norm.gamma", &net.head->norm->gamma);
        out.emplace_back("head.norm.beta", &net.head->norm->beta);
      }
      out.emplace_back("head.second.weight", &net.head->second.weight);
      out.emplace_back("head.second.bias", &net.head->second.bias);
    }
    out.emplace_back("classifier.weight", &classifier.weight);
    out.emplace_back("classifier.bias", &classifier.bias);
    out.emplace_back("gen.sigma_bias", &gen.sigma_bias);
    out.emplace_back("gen.decoder.weight", &gen.decoder.weight);
    out.emplace_back("gen.decoder.bias", &gen.decoder.bias);
    return out;
  }

  /// Parameters plus non-trainable running statistics; everything a checkpoint stores.
  std::vector<std::pair<std::string, Tensor*>> named_tensors() {
    auto out = named_parameters();
    if (net.head && net.head->norm) {
      out.emplace_back("head.norm.running_mean", &net.head->norm->running_mean);
      out.emplace_back("head.norm.running_var", &net.head->norm->running_var);
    }
    return out;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [_, p] : named_parameters()) out.push_back(p);
    return out;
  }

  /// FNV-1a over the bit patterns of every stored tensor.
  std::uint64_t checksum() const {
    auto& self = const_cast<Model&>(*this);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& [name, t] : self.named_tensors()) {
      for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
      for (double v : t->data()) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        for (int k = 0; k < 8; ++k) h = (h ^ ((bits >> (8 * k)) & 0xff)) * 0x100000001b3ULL;
      }
    }
    return h;
  }

  /// Evaluation-mode embeddings as plain values.
  Tensor embed_eval(const Tensor& x) const {
    Tape tape;
    Binder b(tape, false);
    return net.embed(b, tape.constant(x), Mode::Eval).value();
  }

  /// Evaluation-mode class logits.
  Tensor logits_eval(const Tensor& x) const {
    Tape tape;
    Binder b(tape, false);
    return classifier.forward(b, net.encoder.forward(b, tape.constant(x))).value();
  }
};

inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out(logits.rows());
  std::size_t c = logits.cols();
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    out[i] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frozen anchor.

struct Provenance {
  std::string source;  // how the weights were produced
  std::uint64_t seed = 0;
  std::uint64_t data_hash = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Frozen encoder/head pair standing in for a pre-trained model. Immutable after construction.
class AnchorEncoder {
 public:
  AnchorEncoder(Model model, Provenance provenance)
      : model_(std::move(model)), provenance_(std::move(provenance)), checksum_(model_.checksum()) {}

  const Model& model() const { return model_; }
  const Provenance& provenance() const { return provenance_; }
  std::uint64_t checksum() const { return checksum_; }
  std::size_t embed_dim() const { return model_.arch.output_dim(); }

  std::size_t feature_dim() const { return model_.arch.feature_dim; }

  /// Evaluation-mode unit-norm embeddings through the anchor's own head.
  Tensor embed(const Tensor& x) const { return model_.embed_eval(x); }

  /// Encoder output before any head.
  Tensor features(const Tensor& x) const {
    Tape t;
    Binder b(t, false);
    return model_.net.encoder.forward(b, t.constant(x)).value();
  }

 private:
  Model model_;
  Provenance provenance_;
  std::uint64_t checksum_;
};

/// Anchor embeddings placed on `tape` as a constant: no gradient path reaches the anchor.
inline Var anchor_embed(const AnchorEncoder& anchor, Tape& tape, const Tensor& x) {
  return tape.constant(anchor.embed(x));
}

/// Anchor features mapped through the projection head of the model being trained, h(f_pre(x)),
/// normalized and placed on `tape` as a constant. Batch standardization uses the moments of
/// this batch of anchor features and leaves the running statistics untouched.
inline Var anchor_embed(const AnchorEncoder& anchor, const Embedder& net, Tape& tape, const Tensor& x) {
  if (anchor.feature_dim() != net.feature_dim()) throw ShapeError("anchor feature width differs from the model's");
  Tape scratch;
  Binder b(scratch, false);
  BatchMoments unused;
  Var f = scratch.constant(anchor.features(x));
  return tape.constant(net.project(b, f, x.rows() > 1 ? Mode::Train : Mode::Eval, &unused).value());
}

inline Var embed(const Model& model, Binder& b, const Var& x, Mode mode, BatchMoments* moments = nullptr) {
  return model.net.embed(b, x, mode, moments);
}

// ---------------------------------------------------------------------------
// Checkpoints: line-oriented text, every double at 17 significant digits.
//
//   dccl-checkpoint v1
//   source <text>
//   seed <u64>
//   data_hash <16 hex digits>
//   arch input=<n> encoder=<w,...> feature=<n> head=<0|1> head_hidden=<n> embed=<n> batchnorm=<0|1> classes=<n>
//   tensor <name> <d1>x<d2>
//   <values separated by spaces>
//   ...
//   checksum <16 hex digits>
//   end

inline void save_checkpoint(std::ostream& os, const Model& model, const Provenance& prov) {
  const auto& a = model.arch;
  os << "dccl-checkpoint v1\n";
  os << "source " << (prov.source.empty() ? "unknown" : prov.source) << '\n';
  os << "seed " << prov.seed << '\n';
  os << "data_hash " << hex64(prov.data_hash) << '\n';
  os << "arch input=" << a.input_dim << " encoder=";
  for (std::size_t i = 0; i < a.encoder_hidden.size(); ++i) os << (i ? "," : "") << a.encoder_hidden[i];
  if (a.encoder_hidden.empty()) os << "-";
  os << " feature=" << a.feature_dim << " head=" << a.use_head << " head_hidden=" << a.head_hidden
     << " embed=" << a.embed_dim << " batchnorm=" << a.head_batchnorm << " classes=" << a.classes << '\n';
  auto& m = const_cast<Model&>(model);
  for (auto& [name, t] : m.named_tensors()) {
    os << "tensor " << name << ' ';
    for (std::size_t d = 0; d < t->rank(); ++d) os << (d ? "x" : "") << t->shape()[d];
    os << '\n';
    for (std::size_t k = 0; k < t->numel(); ++k) os << (k ? " " : "") << format_double((*t)[k]);
    os << '\n';
  }
  os << "checksum " << hex64(model.checksum()) << '\n';
  os << "end\n";
}

struct Checkpoint {
  Model model;
  Provenance provenance;
};

inline Checkpoint load_checkpoint(std::istream& is) {
  std::string line;
  std::size_t lineno = 0;
  auto next = [&](const char* what) {
    if (!std::getline(is, line)) throw ParseError(std::string("unexpected end of checkpoint, expected ") + what, lineno + 1);
    ++lineno;
    return split_ws(line);
  };
  auto f = next("header");
  if (f.size() != 2 || f[0] != "dccl-checkpoint" || f[1] != "v1") throw ParseError("not a dccl-checkpoint v1 file", lineno);
  Provenance prov;
  if (!std::getline(is, line) || line.rfind("source ", 0) != 0) throw ParseError("expected source line", lineno + 1);
  ++lineno;
  prov.source = line.substr(7);
  try {
    f = next("seed");
    if (f.size() != 2 || f[0] != "seed") throw ParseError("expected seed line", lineno);
    prov.seed = parse_u64(f[1]);
    f = next("data_hash");
    if (f.size() != 2 || f[0] != "data_hash" || f[1].size() != 16) throw ParseError("expected data_hash line", lineno);
    prov.data_hash = std::stoull(f[1], nullptr, 16);
    f = next("arch");
    if (f.empty() || f[0] != "arch") throw ParseError("expected arch line", lineno);
    Architecture a;
    std::map<std::string, std::string> kv;
    for (std::size_t i = 1; i < f.size(); ++i) {
      auto eq = f[i].find('=');
      if (eq == std::string::npos) throw ParseError("bad arch field '" + f[i] + "'", lineno);
      kv[f[i].substr(0, eq)] = f[i].substr(eq + 1);
    }
    for (const char* key : {"input", "encoder", "feature", "head", "head_hidden", "embed", "batchnorm", "classes"}) {
      if (!kv.count(key)) throw ParseError(std::string("arch line lacks ") + key, lineno);
    }
    a.input_dim = parse_size(kv["input"]);
    a.encoder_hidden.clear();
    if (kv["encoder"] != "-")
      for (const auto& w : split(kv["encoder"], ',')) a.encoder_hidden.push_back(parse_size(w));
    a.feature_dim = parse_size(kv["feature"]);
    a.use_head = parse_bool(kv["head"]);
    a.head_hidden = parse_size(kv["head_hidden"]);
    a.embed_dim = parse_size(kv["embed"]);
    a.head_batchnorm = parse_bool(kv["batchnorm"]);
    a.classes = parse_size(kv["classes"]);
    if (a.input_dim == 0 || a.feature_dim == 0 || a.classes < 2 || (a.use_head && (a.head_hidden == 0 || a.embed_dim == 0))) {
      throw ParseError("invalid architecture", lineno);
    }
    for (auto w : a.encoder_hidden)
      if (w == 0) throw ParseError("invalid architecture", lineno);

    Model model = Model::random(a, 0);
    auto slots = model.named_tensors();
    for (auto& [name, t] : slots) {
      f = next("tensor");
      if (f.size() != 3 || f[0] != "tensor" || f[1] != name) throw ParseError("expected tensor " + name, lineno);
      Shape shape;
      for (const auto& d : split(f[2], 'x')) shape.push_back(parse_size(d));
      if (shape != t->shape()) {
        throw ParseError("tensor " + name + " has shape " + shape_str(shape) + ", architecture needs " +
                             shape_str(t->shape()),
                         lineno);
      }
      f = next("values");
      if (f.size() != t->numel()) throw ParseError("tensor " + name + " has wrong value count", lineno);
      for (std::size_t k = 0; k < f.size(); ++k) (*t)[k] = parse_double(f[k]);
    }
    f = next("checksum");
    if (f.size() != 2 || f[0] != "checksum") throw ParseError("expected checksum line", lineno);
    if (f[1] != hex64(model.checksum())) throw ParseError("checksum mismatch: parameters are corrupted", lineno);
    f = next("end");
    if (f.size() != 1 || f[0] != "end") throw ParseError("expected end marker", lineno);
    return {std::move(model), std::move(prov)};
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(e.what(), lineno);
  }
}

}  // namespace dccl
