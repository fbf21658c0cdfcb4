#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "dccl/dccl.hpp"

namespace fs = std::filesystem;
using namespace dccl;

namespace {

constexpr int kUserError = 1;
constexpr int kRuntimeError = 2;

/// Failures caused by the invocation itself (bad input files, arguments, configs).
class UsageError : public Error {
 public:
  using Error::Error;
};

std::ifstream open_input(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open " + path.string());
  return is;
}

void print_table(const std::vector<std::vector<std::string>>& cells) {
  write_aligned(std::cout, cells);
  std::cout << '\n';
  write_csv(std::cout, cells);
}

void save_table(const fs::path& dir, const std::vector<std::vector<std::string>>& cells) {
  write_file(dir / "summary.txt", [&](std::ostream& os) { write_aligned(os, cells); });
  write_file(dir / "summary.csv", [&](std::ostream& os) { write_csv(os, cells); });
}

/// The ablation row matching a config's own loss flags.
AblationRow row_from(const ExperimentConfig& cfg) {
  const LossConfig& l = cfg.loss;
  AblationRow r{cfg.name, l.self_contrast_only ? "with Self-Contrast" : "", l.cdc_enabled, l.pma_enabled,
                l.gt_enabled, l.self_contrast_only, l.aggressive_augmentation};
  return r;
}

Provenance provenance_for(const CliConfig& c, const Dataset& data, const std::string& row) {
  return {c.experiment.name + "/" + row, 0, data_hash(data)};
}

// ---------------------------------------------------------------------------

int cmd_toy(const std::string& variant, std::size_t n, std::uint64_t seed) {
  ToyMapKind kind;
  if (variant == "weak") kind = ToyMapKind::Weak;
  else if (variant == "aggressive") kind = ToyMapKind::Aggressive;
  else throw UsageError("unknown variant '" + variant + "' (expected weak or aggressive)");
  Dataset d1 = gen_example31(n, 1, seed);
  Dataset d2 = gen_example31(n, 2, seed);
  std::cout << "variant = " << variant << '\n';
  std::cout << "samples_per_class = " << n << '\n';
  std::cout << "d1_accuracy = " << percent(toy_sign_accuracy(kind, d1)) << "%\n";
  std::cout << "d2_accuracy = " << percent(toy_sign_accuracy(kind, d2)) << "%\n";
  return 0;
}

int cmd_train(const CliConfig& c) {
  const ExperimentConfig& cfg = c.experiment;
  Dataset data = make_dataset(cfg);
  AblationRow row = row_from(cfg);
  fs::path root = fs::path(c.output_dir) / cfg.name;
  std::vector<RunResult> runs(cfg.seeds.size());
  run_jobs(runs.size(), c.workers, [&](std::size_t s) {
    std::optional<AnchorEncoder> anchor;
    if (cfg.needs_anchor()) anchor.emplace(build_experiment_anchor(cfg, data, cfg.seeds[s]));
    runs[s] = train(cfg, data, cfg.seeds[s], anchor ? &*anchor : nullptr);
  });
  std::vector<std::vector<std::string>> cells{{"row", "CDC", "PMA", "GT", "d" + std::to_string(cfg.held_out), "min", "max"}};
  double sum = 0.0, lo = 1.0, hi = 0.0;
  for (std::size_t s = 0; s < runs.size(); ++s) {
    const auto& r = runs[s];
    sum += r.test_accuracy;
    lo = std::min(lo, r.test_accuracy);
    hi = std::max(hi, r.test_accuracy);
    LooResult single{{r}, r.test_accuracy};
    write_run_artifacts(run_directory(c.output_dir, cfg.name, "train-heldout-" + std::to_string(cfg.held_out), cfg.seeds[s]),
                        render_config(c), data, single,
                        provenance_for(c, data, row.name));
  }
  std::vector<std::string> line{row.name};
  if (!row.label.empty()) line.insert(line.end(), {row.label, "", ""});
  else line.insert(line.end(), {row.cdc ? "x" : "-", row.pma ? "x" : "-", row.gt ? "x" : "-"});
  line.insert(line.end(), {percent(sum / runs.size()), percent(lo), percent(hi)});
  cells.push_back(line);
  save_table(root, cells);
  print_table(cells);
  return 0;
}

int run_grid(const CliConfig& c, const std::vector<AblationRow>& rows) {
  const ExperimentConfig& cfg = c.experiment;
  Dataset data = make_dataset(cfg);
  std::string snapshot = render_config(c);
  std::mutex io;
  auto sink = [&](const AblationRow& row, std::uint64_t seed, const LooResult& loo) {
    std::lock_guard lock(io);
    write_run_artifacts(run_directory(c.output_dir, cfg.name, row.name, seed), snapshot, data, loo,
                        provenance_for(c, data, row.name));
  };
  auto table = ablation_grid(cfg, rows, c.workers, sink);
  auto cells = ablation_cells(table);
  save_table(fs::path(c.output_dir) / cfg.name, cells);
  print_table(cells);
  return 0;
}

int cmd_loo(const CliConfig& c) { return run_grid(c, {row_from(c.experiment)}); }

int cmd_ablate(const CliConfig& c) {
  std::vector<AblationRow> rows;
  for (const auto& r : default_ablation_rows())
    if (c.rows.empty() || std::find(c.rows.begin(), c.rows.end(), r.name) != c.rows.end()) rows.push_back(r);
  return run_grid(c, rows);
}

int cmd_connectivity(const fs::path& dump_path, const std::string& mode_name, const std::optional<fs::path>& out) {
  ConnectivityMode mode;
  if (mode_name == "pooled") mode = ConnectivityMode::Pooled;
  else if (mode_name == "per-domain") mode = ConnectivityMode::PerDomain;
  else throw UsageError("unknown mode '" + mode_name + "' (expected pooled or per-domain)");
  auto is = open_input(dump_path);
  EmbeddingDump dump = read_dump(is);
  if (dump.records.empty()) throw UsageError("embedding dump " + dump_path.string() + " has no records");
  auto rep = connectivity_report(dump, mode);
  write_report_text(std::cout, rep);
  std::cout << '\n';
  write_report_csv(std::cout, rep);
  if (out) {
    write_file(*out / "connectivity.txt", [&](std::ostream& os) { write_report_text(os, rep); });
    write_file(*out / "connectivity.csv", [&](std::ostream& os) { write_report_csv(os, rep); });
  }
  return 0;
}

Dataset dataset_for(const std::optional<fs::path>& data_path, const std::optional<fs::path>& config_path) {
  if (data_path) {
    auto is = open_input(*data_path);
    return read_dataset(is);
  }
  CliConfig c = config_path ? load_config(*config_path) : CliConfig{};
  return make_dataset(c.experiment);
}

int cmd_dump_embeddings(const fs::path& ckpt_path, const std::optional<fs::path>& data_path,
                        const std::optional<fs::path>& config_path, const fs::path& out, bool source_only,
                        std::size_t held_out) {
  auto is = open_input(ckpt_path);
  Checkpoint ck = load_checkpoint(is);
  Dataset data = dataset_for(data_path, config_path);
  if (ck.model.arch.input_dim != data.dim) {
    throw UsageError("checkpoint input dimension " + std::to_string(ck.model.arch.input_dim) +
                     " differs from dataset dimension " + std::to_string(data.dim));
  }
  if (ck.model.arch.classes != data.classes) {
    throw UsageError("checkpoint class count " + std::to_string(ck.model.arch.classes) +
                     " differs from dataset class count " + std::to_string(data.classes));
  }
  auto dump = collect_embeddings(ck.model, data, !source_only, held_out);
  write_file(out, [&](std::ostream& os) { write_dump(os, dump); });
  std::cout << "records = " << dump.records.size() << "\ndim = " << dump.dim << "\nout = " << out.string() << '\n';
  return 0;
}

int cmd_anchor(const CliConfig& c, std::uint64_t seed, const fs::path& out) {
  Dataset data = make_dataset(c.experiment);
  auto anchor = build_experiment_anchor(c.experiment, data, seed);
  write_file(out, [&](std::ostream& os) { save_checkpoint(os, anchor.model(), anchor.provenance()); });
  auto val = anchor_validation_split(data, derive_seed(seed, "anchor"), c.experiment.anchor_options());
  std::cout << "validation_accuracy = " << percent(accuracy(anchor.model(), data, val)) << "%\n";
  std::cout << "checksum = " << hex64(anchor.checksum()) << "\nout = " << out.string() << '\n';
  return 0;
}

int cmd_gen_data(const std::string& family, const std::optional<fs::path>& config_path, std::size_t n, int domain,
                 std::uint64_t seed, const fs::path& out) {
  Dataset d;
  if (family == "rotated") {
    CliConfig c = config_path ? load_config(*config_path) : CliConfig{};
    d = make_dataset(c.experiment);
  } else if (family == "toy") {
    d = gen_example31(n, domain, seed);
  } else {
    throw UsageError("unknown family '" + family + "' (expected rotated or toy)");
  }
  write_file(out, [&](std::ostream& os) { write_dataset(os, d); });
  std::cout << "samples = " << d.size() << "\ndim = " << d.dim << "\nhash = " << hex64(data_hash(d))
            << "\nout = " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-connecting contrastive learning toolkit"};
  app.require_subcommand(1);

  std::string variant = "weak";
  std::size_t toy_n = 1000;
  std::uint64_t toy_seed = 0;
  auto* toy = app.add_subcommand("toy", "Closed-form maps of the two-domain toy example");
  toy->add_option("--variant", variant, "weak or aggressive")->capture_default_str();
  toy->add_option("--n", toy_n, "samples per class and domain")->capture_default_str()->check(CLI::PositiveNumber);
  toy->add_option("--seed", toy_seed, "sampling seed")->capture_default_str();

  std::string config_path;
  std::optional<std::string> out_override;
  std::optional<std::size_t> workers;
  auto add_run = [&](const char* name, const char* doc) {
    auto* sc = app.add_subcommand(name, doc);
    sc->add_option("config", config_path, "config file")->required();
    sc->add_option("--out", out_override, "output root (overrides experiment.output_dir)");
    sc->add_option("--workers", workers, "parallel runs (overrides experiment.workers)")->check(CLI::PositiveNumber);
    return sc;
  };
  auto* train_cmd = add_run("train", "Train on the configured held-out split for every seed");
  auto* loo_cmd = add_run("loo", "Leave-one-domain-out over every domain and seed");
  auto* ablate_cmd = add_run("ablate", "Component ablation grid");

  std::string dump_path, mode = "pooled";
  std::optional<std::string> conn_out;
  auto* conn = app.add_subcommand("connectivity", "Intra-class connectivity of an embedding dump");
  conn->add_option("dump", dump_path, "embedding dump")->required();
  conn->add_option("--mode", mode, "pooled or per-domain")->capture_default_str();
  conn->add_option("--out", conn_out, "directory for connectivity.txt and connectivity.csv");

  std::string ckpt_path, dump_out;
  std::optional<std::string> data_path, data_config;
  bool source_only = false;
  std::size_t dump_held_out = 0;
  auto* dump = app.add_subcommand("dump-embeddings", "Representation dump of a checkpoint over a dataset");
  dump->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  auto* data_opt = dump->add_option("--data", data_path, "dataset file written by gen-data");
  dump->add_option("--config", data_config, "config whose dataset block is generated")->excludes(data_opt);
  dump->add_option("--out", dump_out, "output dump path")->required();
  auto* src = dump->add_flag("--source-only", source_only, "skip the held-out domain");
  dump->add_option("--held-out", dump_held_out, "held-out domain for --source-only")->needs(src);

  std::string family = "rotated", gen_out;
  std::optional<std::string> gen_config;
  std::size_t gen_n = 1000;
  int gen_domain = 1;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  gen->add_option("--family", family, "rotated or toy")->capture_default_str();
  gen->add_option("--config", gen_config, "config whose dataset block is used (rotated)");
  gen->add_option("--n", gen_n, "samples per class (toy)")->capture_default_str();
  gen->add_option("--domain", gen_domain, "domain 1 or 2 (toy)")->capture_default_str();
  gen->add_option("--seed", gen_seed, "sampling seed (toy)")->capture_default_str();
  gen->add_option("--out", gen_out, "output path")->required();

  std::optional<std::string> anchor_config;
  std::uint64_t anchor_seed = 0;
  std::string anchor_out;
  auto* anc = app.add_subcommand("anchor", "Build the frozen anchor encoder on pooled data");
  anc->add_option("--config", anchor_config, "config file");
  anc->add_option("--seed", anchor_seed, "experiment seed")->capture_default_str();
  anc->add_option("--out", anchor_out, "checkpoint path")->required();

  std::optional<std::string> show_config;
  auto* schema = app.add_subcommand("schema", "Print every config key with its default and description");
  auto* show = app.add_subcommand("config", "Print the fully resolved config");
  show->add_option("config", show_config, "config file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kUserError;
  }

  auto load_run_config = [&]() {
    CliConfig c = load_config(config_path);
    if (out_override) c.output_dir = *out_override;
    if (workers) c.workers = *workers;
    validate(c);
    return c;
  };
  auto opt_path = [](const std::optional<std::string>& s) -> std::optional<fs::path> {
    return s ? std::optional<fs::path>(*s) : std::nullopt;
  };

  try {
    if (*toy) return cmd_toy(variant, toy_n, toy_seed);
    if (*train_cmd) return cmd_train(load_run_config());
    if (*loo_cmd) return cmd_loo(load_run_config());
    if (*ablate_cmd) return cmd_ablate(load_run_config());
    if (*conn) return cmd_connectivity(dump_path, mode, opt_path(conn_out));
    if (*dump) {
      return cmd_dump_embeddings(ckpt_path, opt_path(data_path), opt_path(data_config), dump_out, source_only,
                                 dump_held_out);
    }
    if (*gen) return cmd_gen_data(family, opt_path(gen_config), gen_n, gen_domain, gen_seed, gen_out);
    if (*anc) {
      CliConfig c = anchor_config ? load_config(*anchor_config) : CliConfig{};
      return cmd_anchor(c, anchor_seed, anchor_out);
    }
    if (*schema) {
      write_schema(std::cout);
      return 0;
    }
    if (*show) {
      write_config(std::cout, show_config ? load_config(*show_config) : CliConfig{});
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what();
    if (!e.key().empty()) std::cerr << " [" << e.key() << "]";
    std::cerr << '\n';
    return kUserError;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const DivergenceError& e) {
    std::cerr << "error: training diverged at step " << e.step() << ": " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUserError;
}
