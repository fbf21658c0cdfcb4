// Acceptance suite: one PASS/FAIL line per criterion with the measured values.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include "dccl/dccl.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace dccl;
using namespace dccl::testing;

namespace {

// Pinned tolerances and budgets.
constexpr double kToyD2Weak = 0.0;
constexpr double kToyD2Aggressive = 1.0;
constexpr double kToyBudget = 1.0;
constexpr int kGradBatches = 20;
constexpr double kGradTol = 1e-4;
constexpr double kGradZero = 1e-8;
constexpr double kGradBudget = 60.0;
constexpr int kConnSets = 200;
constexpr std::size_t kConnMaxPoints = 12;
constexpr double kConnBudget = 10.0;
constexpr double kAnchorBudget = 300.0;
constexpr double kSelfContrastSlack = 0.01;
constexpr double kAblationBudget = 1800.0;
constexpr double kVarianceRatio = 0.10;
constexpr double kPlateauRelChange = 0.05;
constexpr double kPropBudget = 120.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

struct Verdict {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [violated]");
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct Cli {
  explicit Cli(fs::path d) : dir(std::move(d)) {}
  fs::path dir;
  int code = -1;
  std::string out;
  double seconds = 0.0;

  void run(const std::string& args) {
    fs::path o = dir / "stdout.txt";
    std::string cmd = std::string(DCCL_CLI_PATH) + " " + args + " >" + o.string() + " 2>/dev/null";
    auto t0 = Clock::now();
    int status = std::system(cmd.c_str());
    seconds = seconds_since(t0);
    code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    out = slurp(o);
  }
};

// Audit state shared by every criterion that trains.
struct Audit {
  std::size_t runs = 0;
  std::size_t batches = 0;
  std::size_t leaks = 0;
  void scan(const RunResult& r) {
    ++runs;
    leaks += r.held_out_in_batches;
    for (const auto& b : r.batch_domains) {
      ++batches;
      for (auto d : b) leaks += d == r.held_out;
    }
  }
  // Batch logs written by the CLI: files named batches-heldout-<m>.csv, rows "step,d d d ...".
  void scan_logs(const fs::path& root) {
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      std::string name = e.path().filename().string();
      if (name.rfind("batches-heldout-", 0) != 0) continue;
      std::size_t held = std::stoul(name.substr(16));
      ++runs;
      std::ifstream is(e.path());
      std::string line;
      std::getline(is, line);
      while (std::getline(is, line)) {
        ++batches;
        std::istringstream ds(line.substr(line.find(',') + 1));
        std::size_t d;
        while (ds >> d) leaks += d == held;
      }
    }
  }
};

// 1 ------------------------------------------------------------------------
Verdict toy_exactness(const fs::path& dir) {
  Verdict v;
  Cli cli{dir};
  auto d2 = [](const std::string& out) {
    auto at = out.find("d2_accuracy = ");
    return at == std::string::npos ? std::string("?") : out.substr(at + 14, out.find('\n', at) - at - 14);
  };
  cli.run("toy --variant weak");
  v.require(cli.code == 0 && d2(cli.out) == format_fixed(100.0 * kToyD2Weak, 2) + "%",
            "weak d2 = " + d2(cli.out));
  v.require(cli.seconds < kToyBudget, "weak " + fmt(cli.seconds, 3) + " s");
  cli.run("toy --variant aggressive");
  v.require(cli.code == 0 && d2(cli.out) == format_fixed(100.0 * kToyD2Aggressive, 2) + "%",
            "aggressive d2 = " + d2(cli.out));
  v.require(cli.seconds < kToyBudget, "aggressive " + fmt(cli.seconds, 3) + " s");
  return v;
}

// 2 ------------------------------------------------------------------------
double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double x : t.data()) m = std::max(m, std::abs(x));
  return m;
}

double gradient_error(const Tensor& analytic, const Tensor& numeric) {
  if (max_abs(numeric) < kGradZero) return max_abs(analytic) < kGradZero ? 0.0 : 1.0;
  return max_relative_error(analytic, numeric);
}

// Contrastive loss of one kind on random raw rows, checked against both view inputs.
double contrast_trial(Rng& rng, int kind) {
  std::size_t n = 4 + rng.index(5), d = 3 + rng.index(3);
  Tensor ra = rng.normal({n, d}), rb = rng.normal({n, d});
  Tensor anchors = to_tensor(random_unit_rows(rng, n, d));
  std::vector<std::size_t> labels(n), domains(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = i % 2;
    domains[i] = rng.index(3);
  }
  LossConfig cfg;
  cfg.self_contrast_only = kind == 0;
  cfg.cdc_enabled = kind >= 1;
  cfg.pma_enabled = kind == 2;
  cfg.denominator = rng.index(2) ? DenominatorMode::StandardInfoNCE : DenominatorMode::NegativesOnly;
  auto pos = resolve_positives(cfg, labels, domains, rng);
  auto value = [&](const Tensor& a, const Tensor& b) {
    Tape t;
    auto cb = make_two_view_batch(l2_normalize(t.constant(a)), l2_normalize(t.constant(b)), t.constant(anchors), pos,
                                  labels, false);
    return infonce_loss(cb, cfg).value().item();
  };
  Tape t;
  Var va = t.variable(ra), vb = t.variable(rb);
  auto cb = make_two_view_batch(l2_normalize(va), l2_normalize(vb), t.constant(anchors), pos, labels, false);
  auto grads = t.backward(infonce_loss(cb, cfg));
  auto na = numeric_gradient([&](const Tensor& p) { return value(p, rb); }, ra);
  auto nb = numeric_gradient([&](const Tensor& p) { return value(ra, p); }, rb);
  return std::max(gradient_error(grads.at(va), na), gradient_error(grads.at(vb), nb));
}

// Generative loss w.r.t. the embedding, the variance bias and the decoder.
double gen_trial(Rng& rng) {
  std::size_t n = 3 + rng.index(5), d = 2 + rng.index(4), dp = 2 + rng.index(4);
  auto g = GenerativeTransformer::make(d, dp, rng);
  g.sigma_bias = rng.normal({1, d});
  g.decoder.bias = rng.normal({1, dp});
  Tensor z = rng.normal({n, d}), zp = rng.normal({n, dp}), noise = rng.normal({n, d});
  auto value = [&](const GenerativeTransformer& gg, const Tensor& zz) {
    Tape t;
    Binder b(t, false);
    return gen_loss(gg, b, t.constant(zz), t.constant(zp), noise).loss.value().item();
  };
  Tape t;
  Binder b(t, true);
  Var vz = t.variable(z);
  auto grads = t.backward(gen_loss(g, b, vz, t.constant(zp), noise).loss);
  double worst = gradient_error(grads.at(vz), numeric_gradient([&](const Tensor& p) { return value(g, p); }, z));
  std::vector<std::pair<Tensor*, std::function<void(GenerativeTransformer&, const Tensor&)>>> params{
      {&g.sigma_bias, [](GenerativeTransformer& x, const Tensor& p) { x.sigma_bias = p; }},
      {&g.decoder.weight, [](GenerativeTransformer& x, const Tensor& p) { x.decoder.weight = p; }},
      {&g.decoder.bias, [](GenerativeTransformer& x, const Tensor& p) { x.decoder.bias = p; }},
  };
  for (auto& [param, set] : params) {
    const Var* v = b.find(*param);
    if (!v) return 1.0;
    auto num = numeric_gradient(
        [&](const Tensor& p) {
          GenerativeTransformer probe = g;
          set(probe, p);
          return value(probe, z);
        },
        *param);
    worst = std::max(worst, gradient_error(grads.at(*v), num));
  }
  return worst;
}

// Full combined objective, every model parameter.
double total_trial(Rng& rng, int trial) {
  Architecture arch;
  arch.encoder_hidden = {6};
  arch.feature_dim = 5;
  arch.head_hidden = 6;
  arch.embed_dim = 4;
  LossConfig cfg;
  cfg.cdc_enabled = cfg.pma_enabled = cfg.gt_enabled = true;
  cfg.denominator = trial % 2 ? DenominatorMode::StandardInfoNCE : DenominatorMode::NegativesOnly;
  Model m = Model::random(arch, 500 + static_cast<std::uint64_t>(trial));
  m.gen.sigma_bias = rng.normal({1, arch.embed_dim});
  m.gen.decoder = Linear::random(arch.embed_dim, arch.embed_dim, rng);
  m.net.head->second.bias = rng.normal({1, arch.embed_dim});
  auto ob = random_objective_batch(m, 4, rng);
  Tape t;
  Binder b(t, true);
  auto grads = t.backward(objective(m, b, ob, cfg).total);
  auto named = m.named_parameters();
  double worst = 0.0;
  for (std::size_t k = 0; k < named.size(); ++k) {
    auto num = numeric_gradient(
        [&](const Tensor& p) {
          Model probe = m;
          *probe.named_parameters()[k].second = p;
          Tape t2;
          Binder b2(t2, false);
          return objective(probe, b2, ob, cfg).total_value;
        },
        *named[k].second);
    const Var* v = b.find(*named[k].second);
    worst = std::max(worst, v ? gradient_error(grads.at(*v), num) : 1.0);
  }
  return worst;
}

Verdict gradient_suite() {
  Verdict v;
  auto t0 = Clock::now();
  Rng rng(4242);
  const char* names[] = {"self-contrast", "cross-domain", "anchored"};
  for (int kind = 0; kind < 3; ++kind) {
    double worst = 0.0;
    for (int i = 0; i < kGradBatches; ++i) worst = std::max(worst, contrast_trial(rng, kind));
    v.require(worst <= kGradTol, std::string(names[kind]) + " max rel err " + fmt(worst, 3));
  }
  double worst = 0.0;
  for (int i = 0; i < kGradBatches; ++i) worst = std::max(worst, gen_trial(rng));
  v.require(worst <= kGradTol, "generative max rel err " + fmt(worst, 3));
  worst = 0.0;
  for (int i = 0; i < kGradBatches; ++i) worst = std::max(worst, total_trial(rng, i));
  v.require(worst <= kGradTol, "combined max rel err " + fmt(worst, 3));
  double secs = seconds_since(t0);
  v.require(secs < kGradBudget, std::to_string(kGradBatches) + " batches each, " + fmt(secs, 3) + " s");
  return v;
}

// 3 ------------------------------------------------------------------------
// Smallest candidate distance at which the threshold graph is connected.
double sweep_threshold(const PointSet& pts) {
  std::size_t k = pts.size();
  std::vector<double> cands;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) cands.push_back(euclidean(pts[i], pts[j]));
  std::sort(cands.begin(), cands.end());
  for (double t : cands) {
    std::vector<char> seen(k, 0);
    std::vector<std::size_t> stack{0};
    seen[0] = 1;
    std::size_t count = 1;
    while (!stack.empty()) {
      std::size_t a = stack.back();
      stack.pop_back();
      for (std::size_t b = 0; b < k; ++b)
        if (!seen[b] && euclidean(pts[a], pts[b]) <= t) {
          seen[b] = 1;
          ++count;
          stack.push_back(b);
        }
    }
    if (count == k) return t;
  }
  return 0.0;
}

Verdict connectivity_oracle() {
  Verdict v;
  auto t0 = Clock::now();
  Rng rng(777);
  std::size_t agree = 0;
  for (int s = 0; s < kConnSets; ++s) {
    std::size_t k = 2 + rng.index(kConnMaxPoints - 1), d = 1 + rng.index(4);
    PointSet pts(k, std::vector<double>(d));
    for (auto& p : pts)
      for (auto& x : p) x = rng.normal();
    auto tau = connecting_threshold(pts);
    agree += tau && *tau == sweep_threshold(pts);
  }
  v.require(agree == kConnSets, std::to_string(agree) + "/" + std::to_string(kConnSets) + " exact");
  auto line = group_connectivity({{0.0}, {1.0}, {3.0}});
  v.require(line.defined && line.score == 0.0, "collinear score " + fmt(line.score));
  auto square = group_connectivity({{0.0, 0.0}, {1.0, 0.0}, {1.0, 1.0}, {0.0, 1.0}});
  v.require(square.defined && square.tau == 1.0, "square tau " + fmt(square.tau));
  double secs = seconds_since(t0);
  v.require(secs < kConnBudget, fmt(secs, 3) + " s");
  return v;
}

// 4 ------------------------------------------------------------------------
Verdict anchor_contrast(const ExperimentConfig& bench, Audit& audit) {
  Verdict v;
  auto t0 = Clock::now();
  Dataset data = make_dataset(bench);
  std::size_t wins = 0;
  std::string values;
  for (auto seed : bench.seeds) {
    auto anchor = build_experiment_anchor(bench, data, seed);
    ExperimentConfig erm = bench;
    erm.loss = default_ablation_rows().front().apply(bench.loss);
    auto run = train(erm, data, seed, &anchor);
    audit.scan(run);
    double a = mean_connectivity(anchor.model(), data), e = mean_connectivity(run.model, data);
    wins += a < e;
    values += (values.empty() ? "" : ", ") + fmt(a) + " vs " + fmt(e);
  }
  v.require(wins == bench.seeds.size(), "anchor < erm in " + std::to_string(wins) + "/" +
                                            std::to_string(bench.seeds.size()) + " seeds (" + values + ")");
  double secs = seconds_since(t0);
  v.require(secs < kAnchorBudget, fmt(secs, 3) + " s");
  return v;
}

// 5 ------------------------------------------------------------------------
Verdict ablation_ordering(const ExperimentConfig& bench, Audit& audit, std::string& full_seed0) {
  Verdict v;
  auto t0 = Clock::now();
  auto table = ablation_grid(bench, default_ablation_rows(), 1, [&](const AblationRow& r, std::uint64_t s,
                                                                    const LooResult& loo) {
    for (const auto& run : loo.runs) audit.scan(run);
    if (r.name == "full" && s == bench.seeds.front()) {
      std::ostringstream os;
      write_run_results(os, loo);
      full_seed0 = os.str();
    }
  });
  auto mean = [&](const std::string& n) { return 100.0 * table.at(n).mean(); };
  double full = mean("full"), erm = mean("erm"), sc = mean("self-contrast");
  v.require(full >= erm, "(a) full " + format_fixed(full, 2) + " >= erm " + format_fixed(erm, 2));
  v.require(sc <= erm + 100.0 * kSelfContrastSlack,
            "(b) self-contrast " + format_fixed(sc, 2) + " <= erm + 1 = " + format_fixed(erm + 100.0 * kSelfContrastSlack, 2));
  for (const char* drop : {"pma+gt", "cdc+gt", "cdc+pma"})
    v.require(mean(drop) <= full, std::string("(c) ") + drop + " " + format_fixed(mean(drop), 2) + " <= full");
  double secs = seconds_since(t0);
  v.require(secs < kAblationBudget, fmt(secs, 4) + " s");
  std::ostringstream os;
  write_aligned(os, ablation_cells(table));
  std::cout << os.str();
  return v;
}

// 6 ------------------------------------------------------------------------
Verdict vanishing_variance(const ExperimentConfig& bench, Audit& audit) {
  Verdict v;
  auto t0 = Clock::now();
  ExperimentConfig cfg = bench;
  cfg.loss = default_ablation_rows().front().apply(bench.loss);
  cfg.loss.cdc_enabled = true;
  cfg.loss.aggressive_augmentation = true;
  cfg.eval_every = cfg.steps;
  std::uint64_t seed = bench.seeds.front();
  Dataset data = make_dataset(cfg);
  std::optional<AnchorEncoder> anchor;
  if (cfg.needs_anchor()) anchor.emplace(build_experiment_anchor(cfg, data, seed));
  const AnchorEncoder* a = anchor ? &*anchor : nullptr;
  std::vector<std::size_t> src;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.samples[i].domain != cfg.held_out) src.push_back(i);
  Tensor x = data.features(src);
  auto y = data.labels(src);
  double v0 = intra_class_variance(set_embeddings(initial_model(cfg, data, seed, a), x), y);
  auto run = train(cfg, data, seed, a);
  audit.scan(run);
  double v1 = intra_class_variance(set_embeddings(run.model, x), y);
  // Plateau: mean contrastive loss over the last tenth of training vs the tenth before it.
  std::size_t w = run.losses.size() / 10;
  auto window = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + w; ++i) s += run.losses[i].contrast;
    return s / static_cast<double>(w);
  };
  double last = window(run.losses.size() - w), prev = window(run.losses.size() - 2 * w);
  double change = std::abs(last - prev) / std::abs(prev);
  v.require(v1 < kVarianceRatio * v0, "variance " + fmt(v0) + " -> " + fmt(v1) + " (ratio " + fmt(v1 / v0, 3) + ")");
  v.require(change < kPlateauRelChange, "plateau: contrast loss " + fmt(prev) + " -> " + fmt(last));
  double secs = seconds_since(t0);
  v.require(secs < kPropBudget, fmt(secs, 3) + " s");
  return v;
}

// 7 ------------------------------------------------------------------------
Verdict determinism(const ExperimentConfig& bench, const std::string& full_seed0, const fs::path& dir, Audit& audit) {
  Verdict v;
  Cli cli{dir};
  std::vector<std::string> commands{"toy --variant weak", "toy --variant aggressive --n 50 --seed 3"};
  for (const auto& c : commands) {
    cli.run(c);
    std::string first = cli.out;
    cli.run(c);
    v.require(cli.code == 0 && !first.empty() && first == cli.out, "'" + c + "' identical");
  }
  fs::path cfg = dir / "det.cfg";
  std::ofstream(cfg) << "experiment.name = det\nexperiment.output_dir = " << (dir / "runs").string()
                     << "\ndataset.per_domain_class = 20\noptimizer.steps = 100\nanchor.epochs = 5\n";
  cli.run("ablate " + cfg.string());
  std::string out1 = cli.out, csv1 = slurp(dir / "runs/det/summary.csv");
  cli.run("ablate " + cfg.string() + " --workers 2");
  v.require(cli.code == 0 && out1 == cli.out && csv1 == slurp(dir / "runs/det/summary.csv") && !csv1.empty(),
            "CLI ablation table identical across reruns and worker counts");
  audit.scan_logs(dir / "runs");

  ExperimentConfig full = bench;
  full.loss = default_ablation_rows().back().apply(bench.loss);
  Dataset data = make_dataset(full);
  std::uint64_t seed = bench.seeds.front();
  auto anchor = build_experiment_anchor(full, data, seed);
  LooResult loo;
  for (std::size_t m = 0; m < data.domains; ++m) {
    full.held_out = m;
    loo.runs.push_back(train(full, data, seed, &anchor));
    audit.scan(loo.runs.back());
  }
  loo.average = average_accuracy(loo.runs);
  std::ostringstream os;
  write_run_results(os, loo);
  v.require(!full_seed0.empty() && os.str() == full_seed0, "benchmark 'full' seed " + std::to_string(seed) +
                                                               " rerun identical");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  // Optional criterion numbers restrict the run; the audit line is always printed.
  std::vector<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::stoul(argv[i]));
  fs::path dir = fs::temp_directory_path() / "dccl-acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  ExperimentConfig bench;
  Audit audit;
  std::string full_seed0;

  std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"toy augmentation maps", [&] { return toy_exactness(dir); }},
      {"gradient oracle suite", [&] { return gradient_suite(); }},
      {"connectivity oracle", [&] { return connectivity_oracle(); }},
      {"anchor connectivity contrast", [&] { return anchor_contrast(bench, audit); }},
      {"ablation ordering", [&] { return ablation_ordering(bench, audit, full_seed0); }},
      {"vanishing intra-class variance", [&] { return vanishing_variance(bench, audit); }},
      {"determinism", [&] { return determinism(bench, full_seed0, dir, audit); }},
  };
  std::vector<std::string> lines;
  int failures = 0;
  auto record = [&](std::size_t n, const std::string& name, const Verdict& v) {
    failures += !v.pass;
    lines.push_back("criterion " + std::to_string(n) + " " + (v.pass ? "PASS" : "FAIL") + "  " + name + ": " + v.detail);
    std::cout << lines.back() << std::endl;
  };
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && std::find(only.begin(), only.end(), i + 1) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.require(false, std::string("error: ") + e.what());
    }
    record(i + 1, criteria[i].first, v);
  }
  Verdict audit_v;
  audit_v.require(audit.leaks == 0 && audit.runs > 0, std::to_string(audit.leaks) + " held-out samples in " +
                                                          std::to_string(audit.batches) + " batches of " +
                                                          std::to_string(audit.runs) + " runs");
  record(8, "protocol audit", audit_v);

  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l << "\n";
  fs::remove_all(dir);
  return failures == 0 ? 0 : 1;
}
