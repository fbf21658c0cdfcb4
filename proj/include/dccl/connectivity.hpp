#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dccl/error.hpp"
#include "dccl/tensor.hpp"
#include "dccl/textio.hpp"

namespace dccl {

struct EmbeddingRecord {
  std::size_t id = 0;
  std::size_t class_id = 0;
  std::size_t domain = 0;
  std::vector<double> vector;
};

struct EmbeddingDump {
  std::size_t dim = 0;
  std::size_t classes = 0;
  std::size_t domains = 0;
  std::vector<EmbeddingRecord> records;
};

using PointSet = std::vector<std::vector<double>>;

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    double d = a[j] - b[j];
    s += d * d;
  }
  return std::sqrt(s);
}

struct PairwiseStats {
  double mu = 0.0;
  double sigma = 0.0;  // population standard deviation
  std::size_t count = 0;
};

/// Mean and population standard deviation over all k(k-1)/2 pairwise Euclidean distances.
/// Null for fewer than two points.
inline std::optional<PairwiseStats> pairwise_stats(const PointSet& points) {
  std::size_t k = points.size();
  if (k < 2) return std::nullopt;
  PairwiseStats s;
  s.count = k * (k - 1) / 2;
  double sum = 0.0;
  std::vector<double> dists;
  dists.reserve(s.count);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      dists.push_back(euclidean(points[i], points[j]));
      sum += dists.back();
    }
  s.mu = sum / static_cast<double>(s.count);
  double ss = 0.0;
  for (double d : dists) ss += (d - s.mu) * (d - s.mu);
  s.sigma = std::sqrt(ss / static_cast<double>(s.count));
  return s;
}

/// Smallest threshold t such that linking every pair at distance <= t connects all points:
/// the heaviest edge of a Euclidean minimum spanning tree (dense Prim, O(k^2)).
inline std::optional<double> connecting_threshold(const PointSet& points) {
  std::size_t k = points.size();
  if (k < 2) return std::nullopt;
  std::vector<double> best(k, std::numeric_limits<double>::infinity());
  std::vector<char> in_tree(k, 0);
  best[0] = 0.0;
  double tau = 0.0;
  for (std::size_t step = 0; step < k; ++step) {
    std::size_t u = k;
    for (std::size_t v = 0; v < k; ++v)
      if (!in_tree[v] && (u == k || best[v] < best[u])) u = v;
    in_tree[u] = 1;
    tau = std::max(tau, best[u]);
    for (std::size_t v = 0; v < k; ++v) {
      if (in_tree[v]) continue;
      double d = euclidean(points[u], points[v]);
      if (d < best[v]) best[v] = d;
    }
  }
  return tau;
}

enum class ConnectivityMode { Pooled, PerDomain };

struct GroupConnectivity {
  std::size_t class_id = 0;
  std::optional<std::size_t> domain;  // set in per-domain mode
  std::size_t nodes = 0;
  bool defined = false;  // false when nodes < 2 or sigma == 0
  double tau = 0.0;
  double mu = 0.0;
  double sigma = 0.0;
  double score = 0.0;
};

struct ConnectivityReport {
  ConnectivityMode mode = ConnectivityMode::Pooled;
  std::vector<GroupConnectivity> groups;  // ordered by class, then domain
  std::size_t defined_groups = 0;
  double mean_score = std::numeric_limits<double>::quiet_NaN();
  double max_score = std::numeric_limits<double>::quiet_NaN();
};

/// (tau - mu) / sigma for one group of points.
inline GroupConnectivity group_connectivity(const PointSet& points) {
  GroupConnectivity g;
  g.nodes = points.size();
  auto stats = pairwise_stats(points);
  if (!stats) return g;
  g.mu = stats->mu;
  g.sigma = stats->sigma;
  g.tau = *connecting_threshold(points);
  if (g.sigma > 0.0) {
    g.defined = true;
    g.score = (g.tau - g.mu) / g.sigma;
  }
  return g;
}

/// Per-class connectivity over an embedding dump. Pooled mode groups all domains of a class;
/// per-domain mode groups each (class, domain) pair. Aggregates skip undefined groups.
inline ConnectivityReport connectivity_report(const EmbeddingDump& dump,
                                              ConnectivityMode mode = ConnectivityMode::Pooled) {
  if (dump.records.empty()) throw Error("embedding dump is empty");
  std::map<std::pair<std::size_t, std::size_t>, PointSet> groups;
  for (const auto& r : dump.records) {
    std::size_t dom = mode == ConnectivityMode::PerDomain ? r.domain : 0;
    groups[{r.class_id, dom}].push_back(r.vector);
  }
  ConnectivityReport rep;
  rep.mode = mode;
  double sum = 0.0;
  for (const auto& [key, pts] : groups) {
    auto g = group_connectivity(pts);
    g.class_id = key.first;
    if (mode == ConnectivityMode::PerDomain) g.domain = key.second;
    if (g.defined) {
      ++rep.defined_groups;
      sum += g.score;
      rep.max_score = rep.defined_groups == 1 ? g.score : std::max(rep.max_score, g.score);
    }
    rep.groups.push_back(g);
  }
  if (rep.defined_groups) rep.mean_score = sum / static_cast<double>(rep.defined_groups);
  return rep;
}

// ---------------------------------------------------------------------------
// Dump format:
//   # dccl-dump v1 dim=<d> classes=<C> domains=<M>
//   id,domain,class,v1,...,vd

inline void write_dump(std::ostream& os, const EmbeddingDump& dump) {
  os << "# dccl-dump v1 dim=" << dump.dim << " classes=" << dump.classes << " domains=" << dump.domains << '\n';
  for (const auto& r : dump.records) {
    os << r.id << ',' << r.domain << ',' << r.class_id;
    for (double v : r.vector) os << ',' << format_double(v);
    os << '\n';
  }
}

inline EmbeddingDump read_dump(std::istream& is) {
  EmbeddingDump dump;
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty dump", 1);
  auto f = split_ws(line);
  bool ok = f.size() == 6 && f[0] == "#" && f[1] == "dccl-dump" && f[2] == "v1" && f[3].rfind("dim=", 0) == 0 &&
            f[4].rfind("classes=", 0) == 0 && f[5].rfind("domains=", 0) == 0;
  if (!ok) throw ParseError("expected '# dccl-dump v1 dim=<d> classes=<C> domains=<M>'", 1);
  try {
    dump.dim = parse_size(f[3].substr(4));
    dump.classes = parse_size(f[4].substr(8));
    dump.domains = parse_size(f[5].substr(8));
  } catch (const Error& e) {
    throw ParseError(e.what(), 1);
  }
  if (dump.dim == 0) throw ParseError("dim must be positive", 1);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != dump.dim + 3) {
      throw ParseError("expected " + std::to_string(dump.dim + 3) + " fields, got " + std::to_string(cells.size()),
                       lineno);
    }
    EmbeddingRecord r;
    try {
      r.id = parse_size(cells[0]);
      r.domain = parse_size(cells[1]);
      r.class_id = parse_size(cells[2]);
      r.vector.reserve(dump.dim);
      for (std::size_t j = 0; j < dump.dim; ++j) r.vector.push_back(parse_double(cells[3 + j]));
    } catch (const Error& e) {
      throw ParseError(e.what(), lineno);
    }
    if (r.class_id >= dump.classes) throw ParseError("class id out of range", lineno);
    if (r.domain >= dump.domains) throw ParseError("domain id out of range", lineno);
    dump.records.push_back(std::move(r));
  }
  return dump;
}

/// Structured key = value rendering.
inline void write_report_text(std::ostream& os, const ConnectivityReport& rep) {
  os << "mode = " << (rep.mode == ConnectivityMode::Pooled ? "pooled" : "per-domain") << '\n';
  os << "groups = " << rep.groups.size() << '\n';
  os << "defined_groups = " << rep.defined_groups << '\n';
  for (const auto& g : rep.groups) {
    std::string p = "class." + std::to_string(g.class_id);
    if (g.domain) p += ".domain." + std::to_string(*g.domain);
    os << p << ".nodes = " << g.nodes << '\n';
    if (!g.defined) {
      os << p << ".score = undefined\n";
      continue;
    }
    os << p << ".tau = " << format_double(g.tau) << '\n';
    os << p << ".mu = " << format_double(g.mu) << '\n';
    os << p << ".sigma = " << format_double(g.sigma) << '\n';
    os << p << ".score = " << format_double(g.score) << '\n';
  }
  if (rep.defined_groups) {
    os << "mean_score = " << format_double(rep.mean_score) << '\n';
    os << "max_score = " << format_double(rep.max_score) << '\n';
  } else {
    os << "mean_score = undefined\nmax_score = undefined\n";
  }
}

/// Comma-separated table, one row per group.
inline void write_report_csv(std::ostream& os, const ConnectivityReport& rep) {
  os << "class,domain,nodes,tau,mu,sigma,score\n";
  for (const auto& g : rep.groups) {
    os << g.class_id << ',' << (g.domain ? std::to_string(*g.domain) : std::string("all")) << ',' << g.nodes;
    if (g.defined) {
      os << ',' << format_double(g.tau) << ',' << format_double(g.mu) << ',' << format_double(g.sigma) << ','
         << format_double(g.score) << '\n';
    } else {
      os << ",undefined,undefined,undefined,undefined\n";
    }
  }
}

}  // namespace dccl
