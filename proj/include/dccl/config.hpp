#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dccl/error.hpp"
#include "dccl/harness.hpp"
#include "dccl/textio.hpp"

namespace dccl {

/// Everything a config file can set: the experiment plus CLI-level settings.
struct CliConfig {
  ExperimentConfig experiment;
  std::string output_dir = "runs";
  std::size_t workers = 1;
  std::vector<std::string> rows;  // ablation rows to run; empty means all
};

namespace detail {

inline std::string render_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string render_seeds(const std::vector<std::uint64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string render_augmentation(const AugmentationSpec& a) {
  switch (a.kind) {
    case AugmentationSpec::Kind::AdditiveUniform:
      return "additive:" + format_double(a.intensity);
    case AugmentationSpec::Kind::CoordinateScaling:
      return "scaling:" + format_double(a.intensity);
    case AugmentationSpec::Kind::Compose: {
      std::string s;
      for (std::size_t i = 0; i < a.parts.size(); ++i) s += (i ? "+" : "") + render_augmentation(a.parts[i]);
      return s;
    }
  }
  return {};
}

/// "additive:0.5", "scaling:0.1", or a '+'-joined composition applied left to right.
inline AugmentationSpec parse_augmentation(const std::string& text) {
  auto parts = split(text, '+');
  std::vector<AugmentationSpec> specs;
  for (const auto& p : parts) {
    auto colon = p.find(':');
    if (colon == std::string::npos) throw Error("expected kind:intensity, got '" + p + "'");
    std::string kind = trim(p.substr(0, colon));
    double a = parse_double(trim(p.substr(colon + 1)));
    if (!(a >= 0.0)) throw Error("augmentation intensity must be nonnegative");
    if (kind == "additive") specs.push_back(AugmentationSpec::additive(a));
    else if (kind == "scaling") specs.push_back(AugmentationSpec::scaling(a));
    else throw Error("unknown augmentation kind '" + kind + "'");
  }
  if (specs.size() == 1) return specs.front();
  return AugmentationSpec::compose(std::move(specs));
}

struct Field {
  std::string doc;
  std::function<std::string(const CliConfig&)> get;
  std::function<void(CliConfig&, const std::string&)> set;
};

inline std::vector<std::uint64_t> parse_seed_list(const std::string& v) {
  std::vector<std::uint64_t> out;
  for (const auto& s : split(v, ',')) out.push_back(parse_u64(s));
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  for (const auto& s : split(v, ',')) out.push_back(parse_size(s));
  return out;
}

/// Ordered schema: key -> documentation, getter, setter.
inline const std::vector<std::pair<std::string, Field>>& schema() {
  using C = CliConfig;
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"experiment.name", {"run directory name", [](const C& c) { return c.experiment.name; },
                           [](C& c, const std::string& v) { c.experiment.name = v; }}},
      {"experiment.output_dir", {"root of all run directories", [](const C& c) { return c.output_dir; },
                                 [](C& c, const std::string& v) { c.output_dir = v; }}},
      {"experiment.seeds", {"comma-separated run seeds", [](const C& c) { return render_seeds(c.experiment.seeds); },
                            [](C& c, const std::string& v) { c.experiment.seeds = parse_seed_list(v); }}},
      {"experiment.workers", {"concurrent runs", [](const C& c) { return std::to_string(c.workers); },
                              [](C& c, const std::string& v) { c.workers = parse_size(v); }}},
      {"experiment.rows", {"ablation rows to run (comma-separated names, empty for all)",
                           [](const C& c) {
                             std::string s;
                             for (std::size_t i = 0; i < c.rows.size(); ++i) s += (i ? "," : "") + c.rows[i];
                             return s;
                           },
                           [](C& c, const std::string& v) {
                             c.rows.clear();
                             if (!trim(v).empty()) c.rows = split(v, ',');
                           }}},
      {"dataset.domains", {"number of domains M", [](const C& c) { return std::to_string(c.experiment.dataset.domains); },
                           [](C& c, const std::string& v) { c.experiment.dataset.domains = parse_size(v); }}},
      {"dataset.classes", {"number of classes C", [](const C& c) { return std::to_string(c.experiment.dataset.classes); },
                           [](C& c, const std::string& v) { c.experiment.dataset.classes = parse_size(v); }}},
      {"dataset.per_domain_class",
       {"samples per (domain, class)", [](const C& c) { return std::to_string(c.experiment.dataset.per_domain_class); },
        [](C& c, const std::string& v) { c.experiment.dataset.per_domain_class = parse_size(v); }}},
      {"dataset.rotation_step",
       {"rotation between consecutive domains, radians",
        [](const C& c) { return format_double(c.experiment.dataset.rotation_step); },
        [](C& c, const std::string& v) { c.experiment.dataset.rotation_step = parse_double(v); }}},
      {"dataset.class_separation",
       {"radius of the class-mean circle", [](const C& c) { return format_double(c.experiment.dataset.class_separation); },
        [](C& c, const std::string& v) { c.experiment.dataset.class_separation = parse_double(v); }}},
      {"dataset.noise_std", {"isotropic noise standard deviation",
                             [](const C& c) { return format_double(c.experiment.dataset.noise_std); },
                             [](C& c, const std::string& v) { c.experiment.dataset.noise_std = parse_double(v); }}},
      {"dataset.style_dims", {"extra domain-specific cue coordinates",
                              [](const C& c) { return std::to_string(c.experiment.dataset.style_dims); },
                              [](C& c, const std::string& v) { c.experiment.dataset.style_dims = parse_size(v); }}},
      {"dataset.style_scale", {"cue vector standard deviation",
                               [](const C& c) { return format_double(c.experiment.dataset.style_scale); },
                               [](C& c, const std::string& v) { c.experiment.dataset.style_scale = parse_double(v); }}},
      {"dataset.seed", {"data generator seed", [](const C& c) { return std::to_string(c.experiment.dataset.seed); },
                        [](C& c, const std::string& v) { c.experiment.dataset.seed = parse_u64(v); }}},
      {"dataset.held_out", {"held-out domain for train", [](const C& c) { return std::to_string(c.experiment.held_out); },
                            [](C& c, const std::string& v) { c.experiment.held_out = parse_size(v); }}},
      {"loss.lambda", {"contrastive weight", [](const C& c) { return format_double(c.experiment.loss.lambda); },
                       [](C& c, const std::string& v) { c.experiment.loss.lambda = parse_double(v); }}},
      {"loss.beta", {"generative weight", [](const C& c) { return format_double(c.experiment.loss.beta); },
                     [](C& c, const std::string& v) { c.experiment.loss.beta = parse_double(v); }}},
      {"loss.temperature", {"softmax temperature", [](const C& c) { return format_double(c.experiment.loss.temperature); },
                            [](C& c, const std::string& v) { c.experiment.loss.temperature = parse_double(v); }}},
      {"loss.cdc", {"cross-domain positives", [](const C& c) { return std::string(c.experiment.loss.cdc_enabled ? "true" : "false"); },
                    [](C& c, const std::string& v) { c.experiment.loss.cdc_enabled = parse_bool(v); }}},
      {"loss.pma", {"anchor positives", [](const C& c) { return std::string(c.experiment.loss.pma_enabled ? "true" : "false"); },
                    [](C& c, const std::string& v) { c.experiment.loss.pma_enabled = parse_bool(v); }}},
      {"loss.gt", {"generative transformation term",
                   [](const C& c) { return std::string(c.experiment.loss.gt_enabled ? "true" : "false"); },
                   [](C& c, const std::string& v) { c.experiment.loss.gt_enabled = parse_bool(v); }}},
      {"loss.self_contrast_only", {"positives are the sample's own second view",
                                   [](const C& c) { return std::string(c.experiment.loss.self_contrast_only ? "true" : "false"); },
                                   [](C& c, const std::string& v) { c.experiment.loss.self_contrast_only = parse_bool(v); }}},
      {"loss.aggressive_augmentation",
       {"second view uses the aggressive augmentation",
        [](const C& c) { return std::string(c.experiment.loss.aggressive_augmentation ? "true" : "false"); },
        [](C& c, const std::string& v) { c.experiment.loss.aggressive_augmentation = parse_bool(v); }}},
      {"loss.denominator", {"negatives-only or standard",
                            [](const C& c) {
                              return std::string(c.experiment.loss.denominator == DenominatorMode::NegativesOnly
                                                     ? "negatives-only"
                                                     : "standard");
                            },
                            [](C& c, const std::string& v) {
                              if (v == "negatives-only") c.experiment.loss.denominator = DenominatorMode::NegativesOnly;
                              else if (v == "standard") c.experiment.loss.denominator = DenominatorMode::StandardInfoNCE;
                              else throw Error("expected negatives-only or standard");
                            }}},
      {"loss.pma_probability", {"probability of the anchor positive",
                                [](const C& c) { return format_double(c.experiment.loss.pma_probability); },
                                [](C& c, const std::string& v) { c.experiment.loss.pma_probability = parse_double(v); }}},
      {"loss.anchors_as_negatives",
       {"other samples' anchor embeddings join the negative pool",
        [](const C& c) { return std::string(c.experiment.loss.anchors_as_negatives ? "true" : "false"); },
        [](C& c, const std::string& v) { c.experiment.loss.anchors_as_negatives = parse_bool(v); }}},
      {"optimizer.learning_rate", {"Adam step size", [](const C& c) { return format_double(c.experiment.learning_rate); },
                                   [](C& c, const std::string& v) { c.experiment.learning_rate = parse_double(v); }}},
      {"optimizer.steps", {"training steps", [](const C& c) { return std::to_string(c.experiment.steps); },
                           [](C& c, const std::string& v) { c.experiment.steps = parse_size(v); }}},
      {"optimizer.batch_size", {"samples per batch, divisible by the training domain count",
                                [](const C& c) { return std::to_string(c.experiment.batch_size); },
                                [](C& c, const std::string& v) { c.experiment.batch_size = parse_size(v); }}},
      {"optimizer.eval_every", {"validation cadence in steps", [](const C& c) { return std::to_string(c.experiment.eval_every); },
                                [](C& c, const std::string& v) { c.experiment.eval_every = parse_size(v); }}},
      {"optimizer.split_fraction", {"training share of each source domain",
                                    [](const C& c) { return format_double(c.experiment.split_fraction); },
                                    [](C& c, const std::string& v) { c.experiment.split_fraction = parse_double(v); }}},
      {"optimizer.label_ratio", {"fraction of training samples kept",
                                 [](const C& c) { return format_double(c.experiment.label_ratio); },
                                 [](C& c, const std::string& v) { c.experiment.label_ratio = parse_double(v); }}},
      {"augmentation.standard", {"first view and non-aggressive second view",
                                 [](const C& c) { return render_augmentation(c.experiment.standard_augmentation); },
                                 [](C& c, const std::string& v) { c.experiment.standard_augmentation = parse_augmentation(v); }}},
      {"augmentation.aggressive", {"second view when aggressive augmentation is on",
                                   [](const C& c) { return render_augmentation(c.experiment.aggressive_augmentation); },
                                   [](C& c, const std::string& v) { c.experiment.aggressive_augmentation = parse_augmentation(v); }}},
      {"model.encoder_hidden", {"encoder hidden widths", [](const C& c) { return render_list(c.experiment.arch.encoder_hidden); },
                                [](C& c, const std::string& v) { c.experiment.arch.encoder_hidden = parse_size_list(v); }}},
      {"model.feature_dim", {"encoder output width", [](const C& c) { return std::to_string(c.experiment.arch.feature_dim); },
                             [](C& c, const std::string& v) { c.experiment.arch.feature_dim = parse_size(v); }}},
      {"model.head", {"use a projection head", [](const C& c) { return std::string(c.experiment.arch.use_head ? "true" : "false"); },
                      [](C& c, const std::string& v) { c.experiment.arch.use_head = parse_bool(v); }}},
      {"model.head_hidden", {"projection head hidden width", [](const C& c) { return std::to_string(c.experiment.arch.head_hidden); },
                             [](C& c, const std::string& v) { c.experiment.arch.head_hidden = parse_size(v); }}},
      {"model.embed_dim", {"embedding width", [](const C& c) { return std::to_string(c.experiment.arch.embed_dim); },
                           [](C& c, const std::string& v) { c.experiment.arch.embed_dim = parse_size(v); }}},
      {"model.batchnorm", {"batch standardization in the head",
                           [](const C& c) { return std::string(c.experiment.arch.head_batchnorm ? "true" : "false"); },
                           [](C& c, const std::string& v) { c.experiment.arch.head_batchnorm = parse_bool(v); }}},
      {"model.init_from_anchor", {"start encoder and head from the anchor",
                                  [](const C& c) { return std::string(c.experiment.init_from_anchor ? "true" : "false"); },
                                  [](C& c, const std::string& v) { c.experiment.init_from_anchor = parse_bool(v); }}},
      {"anchor.epochs", {"anchor pre-training epochs", [](const C& c) { return std::to_string(c.experiment.anchor_epochs); },
                         [](C& c, const std::string& v) { c.experiment.anchor_epochs = parse_size(v); }}},
      {"anchor.learning_rate", {"anchor pre-training step size",
                                [](const C& c) { return format_double(c.experiment.anchor_learning_rate); },
                                [](C& c, const std::string& v) { c.experiment.anchor_learning_rate = parse_double(v); }}},
  };
  return fields;
}

}  // namespace detail

/// Semantic checks beyond per-key parsing; errors name the key path.
inline void validate(const CliConfig& c) {
  if (c.workers == 0) throw ConfigError("worker count must be positive", "experiment.workers");
  if (c.output_dir.empty()) throw ConfigError("output directory must not be empty", "experiment.output_dir");
  const auto& d = c.experiment.dataset;
  if (d.domains < 2) throw ConfigError("at least 2 domains are required", "dataset.domains");
  if (d.classes < 2) throw ConfigError("at least 2 classes are required", "dataset.classes");
  if (d.per_domain_class == 0) throw ConfigError("per-domain-class count must be positive", "dataset.per_domain_class");
  if (!(d.noise_std >= 0.0)) throw ConfigError("noise std must be nonnegative", "dataset.noise_std");
  if (!(d.class_separation > 0.0)) throw ConfigError("class separation must be positive", "dataset.class_separation");
  if (!(d.style_scale >= 0.0)) throw ConfigError("style scale must be nonnegative", "dataset.style_scale");
  const auto& a = c.experiment.arch;
  if (a.feature_dim == 0) throw ConfigError("feature width must be positive", "model.feature_dim");
  if (a.use_head && (a.head_hidden == 0 || a.embed_dim == 0)) throw ConfigError("head widths must be positive", "model.head_hidden");
  for (auto w : a.encoder_hidden)
    if (w == 0) throw ConfigError("encoder widths must be positive", "model.encoder_hidden");
  std::vector<std::string> known;
  for (const auto& r : default_ablation_rows()) known.push_back(r.name);
  for (const auto& r : c.rows)
    if (std::find(known.begin(), known.end(), r) == known.end()) {
      throw ConfigError("unknown ablation row '" + r + "'", "experiment.rows");
    }
  c.experiment.validate();
}

/// Parses `block.key = value` lines. '#' starts a comment; blank lines are ignored. Unknown
/// keys and bad values throw ConfigError carrying the key path and line number.
inline CliConfig parse_config(std::istream& is) {
  CliConfig c;
  const auto& fields = detail::schema();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'", "");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (it == fields.end()) throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'", key);
    try {
      it->second.set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what(), e.key().empty() ? key : e.key());
    } catch (const std::exception& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": invalid value for '" + key + "': " + e.what(), key);
    }
  }
  validate(c);
  return c;
}

inline CliConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string(), "");
  return parse_config(is);
}

/// Every key with its current value; parse_config(write_config(c)) reproduces c.
inline void write_config(std::ostream& os, const CliConfig& c) {
  std::string block;
  for (const auto& [key, field] : detail::schema()) {
    std::string b = key.substr(0, key.find('.'));
    if (b != block) {
      if (!block.empty()) os << '\n';
      block = b;
    }
    os << key << " = " << field.get(c) << '\n';
  }
}

/// Key, default value and description for every supported key.
inline void write_schema(std::ostream& os) {
  CliConfig defaults;
  for (const auto& [key, field] : detail::schema()) {
    os << key << " = " << field.get(defaults) << "  # " << field.doc << '\n';
  }
}

inline std::string render_config(const CliConfig& c) {
  std::ostringstream os;
  write_config(os, c);
  return os.str();
}

}  // namespace dccl
