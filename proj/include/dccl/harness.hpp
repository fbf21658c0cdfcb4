#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "dccl/anchor.hpp"
#include "dccl/connectivity.hpp"
#include "dccl/error.hpp"
#include "dccl/losses.hpp"
#include "dccl/nets.hpp"
#include "dccl/optim.hpp"
#include "dccl/synthdata.hpp"
#include "dccl/textio.hpp"
#include "dccl/training.hpp"

namespace dccl {

struct ExperimentConfig {
  std::string name = "dccl";
  RotatedGaussianSpec dataset{4, 3, 100, 0.5, 3.0, 0.3, 0};
  std::size_t held_out = 0;
  LossConfig loss;
  Architecture arch;
  double learning_rate = 3e-3;
  std::size_t steps = 2000;
  std::size_t batch_size = 24;
  std::size_t eval_every = 50;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  double split_fraction = 0.8;
  double label_ratio = 1.0;
  AugmentationSpec standard_augmentation = AugmentationSpec::additive(0.1);
  AugmentationSpec aggressive_augmentation = AugmentationSpec::additive(0.5);
  /// Fine-tune from the anchor's encoder and head (fresh classifier), as with a pre-trained backbone.
  bool init_from_anchor = true;
  std::size_t anchor_epochs = 30;
  double anchor_learning_rate = 2e-3;

  AnchorOptions anchor_options() const {
    AnchorOptions o;
    o.arch = arch;
    o.batch_size = batch_size;
    o.learning_rate = anchor_learning_rate;
    o.split_fraction = split_fraction;
    o.augmentation = standard_augmentation.kind == AugmentationSpec::Kind::AdditiveUniform
                         ? standard_augmentation.intensity
                         : 0.1;
    return o;
  }

  bool needs_anchor() const { return init_from_anchor || loss.needs_anchor(); }

  void validate() const {
    if (name.empty()) throw ConfigError("experiment name must not be empty", "experiment.name");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive", "optimizer.learning_rate");
    if (steps == 0) throw ConfigError("step count must be positive", "optimizer.steps");
    if (eval_every == 0) throw ConfigError("evaluation cadence must be positive", "optimizer.eval_every");
    if (dataset.domains >= 2) check_batch_size(batch_size, dataset.domains - 1);
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
      throw ConfigError("split fraction must lie in (0, 1)", "optimizer.split_fraction");
    }
    if (!(label_ratio > 0.0 && label_ratio <= 1.0)) throw ConfigError("label ratio must lie in (0, 1]", "optimizer.label_ratio");
    if (seeds.empty()) throw ConfigError("at least one seed is required", "experiment.seeds");
    if (held_out >= dataset.domains) throw ConfigError("held-out domain id out of range", "dataset.held_out");
    if (anchor_epochs == 0) throw ConfigError("anchor epochs must be positive", "anchor.epochs");
    if (!(anchor_learning_rate > 0.0)) throw ConfigError("anchor learning rate must be positive", "anchor.learning_rate");
    loss.validate(true);
  }
};

inline Dataset make_dataset(const ExperimentConfig& cfg) { return gen_rotated_gaussians(cfg.dataset); }

struct LossRecord {
  std::size_t step = 0;
  double erm = 0.0;
  double contrast = 0.0;
  double gen = 0.0;
  double total = 0.0;
};

struct RunResult {
  std::uint64_t seed = 0;
  std::size_t held_out = 0;
  double test_accuracy = 0.0;
  double best_val_accuracy = 0.0;
  std::size_t selected_step = 0;
  std::vector<LossRecord> losses;
  std::vector<std::pair<std::size_t, double>> validation;  // (step, accuracy)
  double connectivity_init = 0.0;      // mean pooled score of the representation, all domains
  double connectivity_selected = 0.0;
  std::size_t training_samples = 0;
  std::size_t held_out_in_batches = 0;  // audit counter; must stay 0
  std::vector<std::vector<std::size_t>> batch_domains;  // domain ids of every training batch
  double wall_seconds = 0.0;            // informational; never written to result tables
  Model model;                          // selected checkpoint
};

/// Unit-norm representations of every sample (optionally skipping the held-out domain),
/// evaluation mode, no augmentation.
inline EmbeddingDump collect_embeddings(const Model& model, const Dataset& data, bool include_test_domain = true,
                                        std::size_t held_out = 0) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (include_test_domain || data.samples[i].domain != held_out) idx.push_back(i);
  EmbeddingDump dump;
  dump.dim = model.arch.feature_dim;
  dump.classes = data.classes;
  dump.domains = data.domains;
  if (idx.empty()) return dump;
  Tensor z = representation(model, data.features(idx));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    EmbeddingRecord r;
    r.id = idx[k];
    r.class_id = data.samples[idx[k]].label;
    r.domain = data.samples[idx[k]].domain;
    r.vector.assign(z.data().begin() + static_cast<std::ptrdiff_t>(k * dump.dim),
                    z.data().begin() + static_cast<std::ptrdiff_t>((k + 1) * dump.dim));
    dump.records.push_back(std::move(r));
  }
  return dump;
}

inline double mean_connectivity(const Model& model, const Dataset& data) {
  return connectivity_report(collect_embeddings(model, data)).mean_score;
}

/// Initial model for a run: fresh classifier and generative transformer; encoder and head
/// copied from the anchor when configured.
inline Model initial_model(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed,
                           const AnchorEncoder* anchor) {
  Model model = Model::random(fit_architecture(cfg.arch, data), derive_seed(seed, "model"));
  if (cfg.init_from_anchor) {
    if (!anchor) throw ConfigError("initialization from the anchor needs an anchor", "model.init_from_anchor");
    if (!(anchor->model().arch == model.arch)) {
      throw ConfigError("anchor architecture differs from the model architecture", "model");
    }
    model.net = anchor->model().net;
  }
  return model;
}

/// One optimization run of the combined objective on the source domains of `data`, with
/// validation-based checkpoint selection and a single test evaluation on the held-out domain.
inline RunResult train(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed,
                       const AnchorEncoder* anchor) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.loss.validate(anchor != nullptr);
  if (cfg.held_out >= data.domains) throw ConfigError("held-out domain id out of range", "dataset.held_out");
  if (cfg.steps == 0) throw ConfigError("step count must be positive", "optimizer.steps");
  if (cfg.eval_every == 0) throw ConfigError("evaluation cadence must be positive", "optimizer.eval_every");
  if (anchor && anchor->feature_dim() != cfg.arch.feature_dim) {
    throw ConfigError("anchor feature width " + std::to_string(anchor->feature_dim()) +
                          " differs from model feature width " + std::to_string(cfg.arch.feature_dim),
                      "model.feature_dim");
  }

  RunResult res;
  res.seed = seed;
  res.held_out = cfg.held_out;

  std::vector<std::size_t> source, test;
  for (std::size_t i = 0; i < data.size(); ++i) (data.samples[i].domain == cfg.held_out ? test : source).push_back(i);
  if (source.empty() || test.empty()) throw ConfigError("held-out split leaves no source or no test samples", "dataset.held_out");
  auto split = split_by_domain(data, source, cfg.split_fraction, derive_seed(seed, "split", cfg.held_out));
  auto train_pool = label_subset(split.train, cfg.label_ratio, derive_seed(seed, "labels", cfg.held_out));
  res.training_samples = train_pool.size();

  Model model = initial_model(cfg, data, seed, anchor);
  res.connectivity_init = mean_connectivity(model, data);

  BatchStream stream(data, train_pool, cfg.batch_size, derive_seed(seed, "stream", cfg.held_out));
  Rng aug_rng(derive_seed(seed, "augment", cfg.held_out));
  Rng pos_rng(derive_seed(seed, "positives", cfg.held_out));
  Rng noise_rng(derive_seed(seed, "noise", cfg.held_out));
  const auto& second_view = cfg.loss.aggressive_augmentation ? cfg.aggressive_augmentation : cfg.standard_augmentation;
  bool contrast = cfg.loss.contrast_active();
  bool gen = cfg.loss.gt_enabled;

  Adam adam(cfg.learning_rate);
  auto params = model.parameters();
  Model best = model;
  res.best_val_accuracy = -1.0;
  res.losses.reserve(cfg.steps);
  res.batch_domains.reserve(cfg.steps);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    auto idx = stream.next();
    auto labels = data.labels(idx);
    auto domains = data.domain_ids(idx);
    for (auto d : domains)
      if (d == cfg.held_out) ++res.held_out_in_batches;
    res.batch_domains.push_back(domains);
    std::size_t n = idx.size();

    Tensor x = data.features(idx);
    Tensor xa = augment_rows(x, cfg.standard_augmentation, aug_rng);
    Tape tape;
    Binder b(tape, true);
    BatchMoments moments;
    Var feats_a, z_a, z_b;
    if (contrast) {
      Tensor xb = augment_rows(x, second_view, aug_rng);
      Var feats = model.net.encoder.forward(b, concat_rows(tape.constant(xa), tape.constant(xb)));
      Var z = model.net.project(b, feats, Mode::Train, &moments);
      feats_a = slice_rows(feats, 0, n);
      z_a = slice_rows(z, 0, n);
      z_b = slice_rows(z, n, n);
    } else {
      feats_a = model.net.encoder.forward(b, tape.constant(xa));
      if (gen) z_a = model.net.project(b, feats_a, Mode::Train, &moments);
    }
    Var logits = model.classifier.forward(b, feats_a);
    for (double v : logits.value().data())
      if (!std::isfinite(v)) throw DivergenceError("non-finite logits", step);

    std::optional<Var> z_pre;
    if (anchor && (cfg.loss.needs_anchor() || cfg.loss.anchors_as_negatives)) z_pre = anchor_embed(*anchor, model.net, tape, xa);

    std::optional<ContrastBatch> cb;
    if (contrast) {
      auto positives = resolve_positives(cfg.loss, labels, domains, pos_rng);
      cb = make_two_view_batch(z_a, z_b, z_pre, positives, labels, cfg.loss.anchors_as_negatives);
    }
    std::optional<GenInputs> gi;
    if (gen) gi = GenInputs{&model.gen, &b, z_a, *z_pre, noise_rng.normal(z_a.shape())};

    auto br = total_loss(logits, labels, cfg.loss, cb ? &*cb : nullptr, gi ? &*gi : nullptr);
    if (!std::isfinite(br.total_value)) throw DivergenceError("non-finite loss", step);
    res.losses.push_back({step, br.erm, br.contrast, br.gen, br.total_value});

    auto grads = tape.backward(br.total);
    adam.step(params, collect_grads(grads, b, params));
    for (const Tensor* p : params)
      for (double v : p->data())
        if (!std::isfinite(v)) throw DivergenceError("non-finite parameter after update", step);
    model.net.absorb(moments);

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      double acc = accuracy(model, data, split.val);
      res.validation.emplace_back(step, acc);
      if (acc >= res.best_val_accuracy) {
        res.best_val_accuracy = acc;
        res.selected_step = step;
        best = model;
      }
    }
  }

  res.model = std::move(best);
  res.test_accuracy = accuracy(res.model, data, test);
  res.connectivity_selected = mean_connectivity(res.model, data);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

inline AnchorEncoder build_experiment_anchor(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed) {
  return build_anchor(data, cfg.anchor_epochs, derive_seed(seed, "anchor"), cfg.anchor_options());
}

/// Single run of `cfg` at `seed`, building the anchor when one is needed.
inline RunResult train(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset data = make_dataset(cfg);
  std::optional<AnchorEncoder> anchor;
  if (cfg.needs_anchor()) anchor.emplace(build_experiment_anchor(cfg, data, seed));
  return train(cfg, data, seed, anchor ? &*anchor : nullptr);
}

// ---------------------------------------------------------------------------
// Parallel execution of independent jobs; results land in job order.

inline void run_jobs(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

struct LooResult {
  std::vector<RunResult> runs;  // one per held-out domain, in domain order
  double average = 0.0;
};

inline double average_accuracy(const std::vector<RunResult>& runs) {
  double s = 0.0;
  for (const auto& r : runs) s += r.test_accuracy;
  return runs.empty() ? 0.0 : s / static_cast<double>(runs.size());
}

/// One run per held-out domain, sharing the anchor (which is pre-trained on all domains).
inline LooResult leave_one_out(const ExperimentConfig& base, const Dataset& data, std::uint64_t seed,
                               const AnchorEncoder* anchor, std::size_t workers = 1) {
  if (data.domains < 2) throw ConfigError("leave-one-domain-out needs at least 2 domains", "dataset.domains");
  LooResult out;
  out.runs.resize(data.domains);
  run_jobs(data.domains, workers, [&](std::size_t m) {
    ExperimentConfig cfg = base;
    cfg.held_out = m;
    out.runs[m] = train(cfg, data, seed, anchor);
  });
  out.average = average_accuracy(out.runs);
  return out;
}

inline LooResult leave_one_out(const ExperimentConfig& base, std::uint64_t seed, std::size_t workers = 1) {
  base.validate();
  Dataset data = make_dataset(base);
  std::optional<AnchorEncoder> anchor;
  if (base.needs_anchor()) anchor.emplace(build_experiment_anchor(base, data, seed));
  return leave_one_out(base, data, seed, anchor ? &*anchor : nullptr, workers);
}

// ---------------------------------------------------------------------------
// Ablation grid.

struct AblationRow {
  std::string name;
  std::string label;  // spans the flag columns when set ("with Self-Contrast", ...)
  bool cdc = false;
  bool pma = false;
  bool gt = false;
  bool self_contrast = false;
  bool aggressive = false;

  LossConfig apply(LossConfig base) const {
    base.cdc_enabled = cdc;
    base.pma_enabled = pma;
    base.gt_enabled = gt;
    base.self_contrast_only = self_contrast;
    base.aggressive_augmentation = aggressive;
    return base;
  }
};

/// The ten rows of the component ablation. CDC always brings the aggressive second view.
inline std::vector<AblationRow> default_ablation_rows() {
  return {
      {"erm", "", false, false, false, false, false},
      {"self-contrast", "with Self-Contrast", false, false, false, true, false},
      {"cdc", "", true, false, false, false, true},
      {"pma", "", false, true, false, false, false},
      {"gt", "", false, false, true, false, false},
      {"pma+gt", "", false, true, true, false, false},
      {"cdc+pma", "", true, true, false, false, true},
      {"cdc+gt", "", true, false, true, false, true},
      {"full-no-aggressive", "w/o Aggressive Aug", true, true, true, false, false},
      {"full", "", true, true, true, false, true},
  };
}

struct AblationEntry {
  AblationRow row;
  std::vector<LooResult> seeds;  // in cfg.seeds order

  /// Mean over seeds of the held-out accuracy for domain m.
  double domain_mean(std::size_t m) const {
    double s = 0.0;
    for (const auto& r : seeds) s += r.runs.at(m).test_accuracy;
    return s / static_cast<double>(seeds.size());
  }
  double mean() const {
    double s = 0.0;
    for (const auto& r : seeds) s += r.average;
    return s / static_cast<double>(seeds.size());
  }
  double min() const {
    double v = std::numeric_limits<double>::infinity();
    for (const auto& r : seeds) v = std::min(v, r.average);
    return v;
  }
  double max() const {
    double v = -std::numeric_limits<double>::infinity();
    for (const auto& r : seeds) v = std::max(v, r.average);
    return v;
  }
};

struct AblationTable {
  std::size_t domains = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationEntry> entries;

  const AblationEntry& at(const std::string& name) const {
    for (const auto& e : entries)
      if (e.row.name == name) return e;
    throw Error("no ablation row named '" + name + "'");
  }
};

/// Callback invoked once per finished (row, seed) leave-one-out block.
using RunSink = std::function<void(const AblationRow&, std::uint64_t seed, const LooResult&)>;

/// Every row x seed x held-out domain. Anchors are built once per seed and shared across rows.
inline AblationTable ablation_grid(const ExperimentConfig& base, const std::vector<AblationRow>& rows,
                                   std::size_t workers = 1, const RunSink& sink = {}) {
  base.validate();
  Dataset data = make_dataset(base);
  AblationTable table;
  table.domains = data.domains;
  table.seeds = base.seeds;
  bool any_anchor = base.init_from_anchor;
  for (const auto& r : rows) any_anchor = any_anchor || r.pma || r.gt;

  std::vector<std::unique_ptr<AnchorEncoder>> anchors(base.seeds.size());
  if (any_anchor) {
    run_jobs(base.seeds.size(), workers, [&](std::size_t s) {
      anchors[s] = std::make_unique<AnchorEncoder>(build_experiment_anchor(base, data, base.seeds[s]));
    });
  }

  std::size_t per_block = data.domains;
  std::size_t blocks = rows.size() * base.seeds.size();
  std::vector<RunResult> flat(blocks * per_block);
  run_jobs(flat.size(), workers, [&](std::size_t j) {
    std::size_t block = j / per_block, m = j % per_block;
    const auto& row = rows[block / base.seeds.size()];
    std::size_t s = block % base.seeds.size();
    ExperimentConfig cfg = base;
    cfg.loss = row.apply(base.loss);
    cfg.held_out = m;
    flat[j] = train(cfg, data, base.seeds[s], anchors[s].get());
  });

  for (std::size_t r = 0; r < rows.size(); ++r) {
    AblationEntry e;
    e.row = rows[r];
    for (std::size_t s = 0; s < base.seeds.size(); ++s) {
      LooResult loo;
      std::size_t block = r * base.seeds.size() + s;
      for (std::size_t m = 0; m < per_block; ++m) loo.runs.push_back(std::move(flat[block * per_block + m]));
      loo.average = average_accuracy(loo.runs);
      if (sink) sink(rows[r], base.seeds[s], loo);
      e.seeds.push_back(std::move(loo));
    }
    table.entries.push_back(std::move(e));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Result tables: aligned text and CSV with the ablation layout (flags, per-domain, average).

inline std::string percent(double v) { return format_fixed(100.0 * v, 2); }

inline std::vector<std::vector<std::string>> ablation_cells(const AblationTable& t) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{"row", "CDC", "PMA", "GT"};
  for (std::size_t m = 0; m < t.domains; ++m) head.push_back("d" + std::to_string(m));
  head.insert(head.end(), {"avg", "min", "max"});
  rows.push_back(head);
  for (const auto& e : t.entries) {
    std::vector<std::string> r{e.row.name};
    if (!e.row.label.empty()) {
      r.insert(r.end(), {e.row.label, "", ""});
    } else {
      r.push_back(e.row.cdc ? "x" : "-");
      r.push_back(e.row.pma ? "x" : "-");
      r.push_back(e.row.gt ? "x" : "-");
    }
    for (std::size_t m = 0; m < t.domains; ++m) r.push_back(percent(e.domain_mean(m)));
    r.insert(r.end(), {percent(e.mean()), percent(e.min()), percent(e.max())});
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_aligned(std::ostream& os, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    if (width.size() < r.size()) width.resize(r.size(), 0);
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) line += "  ";
      line += r[c] + std::string(width[c] - r[c].size(), ' ');
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    os << line << '\n';
  }
}

inline void write_csv(std::ostream& os, const std::vector<std::vector<std::string>>& rows) {
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "," : "") << r[c];
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Run directory layout:
//   <root>/<experiment>/<row>/seed-<s>/  config.txt, result.csv,
//                                        losses-heldout-<m>.csv, batches-heldout-<m>.csv,
//                                        checkpoint-heldout-<m>.txt, embeddings-heldout-<m>.dump

inline std::filesystem::path run_directory(const std::filesystem::path& root, const std::string& experiment,
                                           const std::string& row, std::uint64_t seed) {
  return root / experiment / row / ("seed-" + std::to_string(seed));
}

inline void write_loss_log(std::ostream& os, const RunResult& r) {
  os << "step,erm,contrast,gen,total\n";
  for (const auto& l : r.losses) {
    os << l.step << ',' << format_double(l.erm) << ',' << format_double(l.contrast) << ',' << format_double(l.gen)
       << ',' << format_double(l.total) << '\n';
  }
}

inline void write_batch_log(std::ostream& os, const RunResult& r) {
  os << "step,domains\n";
  for (std::size_t s = 0; s < r.batch_domains.size(); ++s) {
    os << s + 1 << ',';
    for (std::size_t k = 0; k < r.batch_domains[s].size(); ++k) os << (k ? " " : "") << r.batch_domains[s][k];
    os << '\n';
  }
}

/// Deterministic per-run summary (no timing).
inline void write_run_results(std::ostream& os, const LooResult& loo) {
  os << "held_out,seed,test_accuracy,best_val_accuracy,selected_step,training_samples,connectivity_init,"
        "connectivity_selected,held_out_in_batches\n";
  for (const auto& r : loo.runs) {
    os << r.held_out << ',' << r.seed << ',' << format_double(r.test_accuracy) << ','
       << format_double(r.best_val_accuracy) << ',' << r.selected_step << ',' << r.training_samples << ','
       << format_double(r.connectivity_init) << ',' << format_double(r.connectivity_selected) << ','
       << r.held_out_in_batches << '\n';
  }
  os << "average," << format_double(loo.average) << '\n';
}

inline void write_file(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  body(os);
  if (!os) throw Error("failed writing " + path.string());
}

/// Writes every artifact of one (row, seed) block. `config_snapshot` is the rendered config.
inline void write_run_artifacts(const std::filesystem::path& dir, const std::string& config_snapshot,
                                const Dataset& data, const LooResult& loo, const Provenance& prov) {
  write_file(dir / "config.txt", [&](std::ostream& os) { os << config_snapshot; });
  write_file(dir / "result.csv", [&](std::ostream& os) { write_run_results(os, loo); });
  for (const auto& r : loo.runs) {
    std::string tag = "heldout-" + std::to_string(r.held_out);
    write_file(dir / ("losses-" + tag + ".csv"), [&](std::ostream& os) { write_loss_log(os, r); });
    write_file(dir / ("batches-" + tag + ".csv"), [&](std::ostream& os) { write_batch_log(os, r); });
    write_file(dir / ("checkpoint-" + tag + ".txt"), [&](std::ostream& os) {
      save_checkpoint(os, r.model, Provenance{prov.source, r.seed, prov.data_hash});
    });
    write_file(dir / ("embeddings-" + tag + ".dump"),
               [&](std::ostream& os) { write_dump(os, collect_embeddings(r.model, data)); });
  }
}

}  // namespace dccl
