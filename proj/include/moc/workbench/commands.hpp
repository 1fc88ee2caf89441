#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moc/attention.hpp"
#include "moc/cost_model.hpp"
#include "moc/oracle.hpp"
#include "moc/outer_router.hpp"
#include "moc/router.hpp"
#include "moc/token_lattice.hpp"
#include "moc/workbench/scene.hpp"

namespace moc::workbench {

struct RunConfig {
  RoutingConfig routing;
  std::size_t chunk_target = 64;

  /// Desk defaults: causal routing, cross-modal, intra-shot and self links
  /// forced, k = 5, one 64-token frame per chunk.
  static RunConfig desk() {
    RunConfig c;
    c.routing.k = 5;
    c.routing.causal = true;
    c.routing.force_cross_modal = true;
    c.routing.force_intra_shot = true;
    c.routing.force_self_chunk = true;
    c.chunk_target = 64;
    return c;
  }
};

/// Outer routing around the last shot: keeps the M best-scoring earlier
/// shots plus the global caption and the last shot itself, with shot ids
/// and per-token features carried over.
inline Scene curate_scene(const Scene& scene, std::size_t M, std::size_t chunk_target) {
  const ChunkPartition partition = build_chunks(scene.stream, chunk_target);
  const OuterPartition blocks = shot_blocks(scene.stream, partition, scene.stream.shot_count() - 1);
  require(blocks.query_block.has_value(), ErrorCode::InvalidArgument, "scene has no shot to query from");
  std::vector<std::uint32_t> query_rows(blocks.query_block->size());
  std::iota(query_rows.begin(), query_rows.end(), static_cast<std::uint32_t>(blocks.query_block->start));
  const OuterSelection selection = outer_route(scene.inputs.k, gather_rows(scene.inputs.q, query_rows), blocks, M);
  const CuratedContext context = curate_context(scene.stream, partition, selection);
  return Scene{scene.spec, context.stream, gather_inputs(scene.inputs, context.new_to_old), scene.shot_centroids};
}

// ---------------------------------------------------------------------------
// route

struct RouteReport {
  ChunkPartition partition;
  RoutingTable table;
  ChunkCounts counts;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> loops;
  SparsityReport sparsity;
};

inline RouteReport cmd_route(const Scene& scene, const RunConfig& config) {
  RouteReport r;
  r.partition = build_chunks(scene.stream, config.chunk_target);
  r.table = build_routing_table(scene.inputs, r.partition, scene.stream, config.routing);
  r.counts = aggregate_counts(r.table, r.partition);
  r.loops = detect_loop_closures(r.table, r.partition);
  r.sparsity = measured_sparsity(r.table, r.partition);
  return r;
}

inline void write_route_summary(std::ostream& os, const RouteReport& r) {
  os << std::fixed << std::setprecision(3);
  os << "chunks=" << r.partition.size() << " tokens=" << r.partition.length() << '\n';
  os << "loop_closures=" << r.loops.size();
  for (const auto& [a, b] : r.loops) os << " (" << a << ',' << b << ')';
  os << '\n';
  os << "sparsity=" << r.sparsity.sparsity << " measured_m_bar=" << r.sparsity.measured_m_bar
     << " mean_routed=" << r.sparsity.mean_routed << '\n';
  os << std::defaultfloat;
}

/// Routed selections from chunks of `target_shot` toward each shot, summed
/// over heads.
inline std::vector<std::uint64_t> routed_toward_shots(const RouteReport& r, std::uint32_t target_shot,
                                                      std::size_t shot_count) {
  std::vector<std::uint64_t> per_shot(shot_count, 0);
  for (const Chunk& from : r.partition.chunks()) {
    if (from.global || from.shot_id != target_shot) continue;
    for (const Chunk& to : r.partition.chunks()) {
      if (to.global) continue;
      per_shot[to.shot_id] += r.counts.total(Provenance::Routed, from.chunk_id, to.chunk_id);
    }
  }
  return per_shot;
}

// ---------------------------------------------------------------------------
// verify

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
};

inline void write_verify_report(std::ostream& os, const VerifyReport& report) {
  for (const CheckResult& c : report.checks) {
    os << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(22) << c.name << std::right
       << " value=" << std::scientific << std::setprecision(3) << c.value << " tol=" << c.tolerance
       << std::defaultfloat;
    if (!c.detail.empty()) os << "  " << c.detail;
    os << '\n';
  }
  os << (report.passed() ? "verify: all checks passed" : "verify: FAILED") << '\n';
}

/// Seven-token scene (global caption + three two-token single-frame shots),
/// one head, d <= 4, in double precision: small enough for finite
/// differences while still giving the router real choices.
struct TinyInstance {
  TokenStream stream;
  ChunkPartition partition;
  AttentionInputs<double> inputs;
};

inline TinyInstance tiny_instance(std::uint64_t seed, std::size_t dims = 4) {
  SceneSpec spec;
  spec.shots.assign(3, ShotSpec{1, 2, 0});
  spec.global_caption_tokens = 1;
  spec.d = std::clamp<std::size_t>(dims, 1, 4);
  spec.H = 1;
  spec.seed = seed;
  const Scene scene = gen_scene(spec);
  return {scene.stream, build_chunks(scene.stream, 2), scene.inputs.cast<double>()};
}

/// Tolerances of the verification suite.
struct VerifyTolerances {
  double saturated = 1e-5;
  double sparse_oracle = 1e-6;
  double gradient = 1e-4;
  double fd_step = 1e-4;
};

/// Max relative error of the VJP against finite differences over dQ, dK, dV.
inline double gradient_error(const AttentionInputs<double>& x, const RoutingTable* table,
                             const ChunkPartition* partition, double step, bool* zero_outside = nullptr) {
  Tensor3<double> upstream(x.heads(), x.length(), x.dim());
  CounterRng rng = CounterRng::keyed(0xfd, x.length(), x.dim());
  std::normal_distribution<double> normal;
  for (auto& u : upstream.flat()) u = normal(rng);

  AttentionGrads<double> g = table ? attention_vjp(x, *table, *partition, upstream) : attention_vjp(x, upstream);
  auto forward = [&](const AttentionInputs<double>& in) {
    return table ? moc_attention(in, *table, *partition).o : dense_attention(in).o;
  };
  const oracle::FiniteDifferenceGrads fd = oracle::finite_differences(x, upstream, forward, step);

  if (zero_outside && table) {
    *zero_outside = true;
    std::vector<std::uint8_t> touched(x.heads() * x.length(), 0);
    for (std::size_t h = 0; h < x.heads(); ++h) {
      for (std::size_t i = 0; i < x.length(); ++i) {
        for (const Selection& s : table->selected(h, i)) {
          const Chunk& ch = partition->chunk(s.chunk);
          for (std::size_t t = ch.start; t < ch.end; ++t) touched[h * x.length() + t] = 1;
        }
      }
    }
    for (std::size_t h = 0; h < x.heads(); ++h) {
      for (std::size_t j = 0; j < x.length(); ++j) {
        if (touched[h * x.length() + j]) continue;
        for (std::size_t c = 0; c < x.dim(); ++c) {
          if (g.dk(h, j, c) != 0.0 || g.dv(h, j, c) != 0.0) *zero_outside = false;
        }
      }
    }
  }
  return std::max({max_relative_error(g.dq, fd.dq), max_relative_error(g.dk, fd.dk), max_relative_error(g.dv, fd.dv)});
}

/// Count of Routed/DroppedIn edges that point to the query's own or a later
/// chunk.
inline std::size_t causal_violations(const RoutingTable& table, const ChunkPartition& partition) {
  std::size_t bad = 0;
  for (std::size_t h = 0; h < table.heads(); ++h) {
    for (std::size_t i = 0; i < table.length(); ++i) {
      const std::uint32_t own = partition.chunk_of_token()[i];
      for (const Selection& s : table.selected(h, i)) {
        if (s.provenance != Provenance::Mandatory && s.chunk >= own) ++bad;
      }
    }
  }
  return bad;
}

inline RoutingConfig saturated(std::size_t chunks) {
  RoutingConfig c;
  c.k = std::max<std::size_t>(1, chunks);
  return c;
}

inline VerifyReport cmd_verify(const Scene& scene, const RunConfig& config, const VerifyTolerances& tol = {}) {
  VerifyReport report;
  const ChunkPartition partition = build_chunks(scene.stream, config.chunk_target);
  const auto& x = scene.inputs;

  {
    const RoutingTable full = build_routing_table(x, partition, scene.stream, saturated(partition.size()));
    const double err = max_relative_error(moc_attention(x, full, partition).o, dense_attention(x).o);
    report.checks.push_back({"saturated_equivalence", err <= tol.saturated, err, tol.saturated,
                             "moc(k=C) vs dense over " + std::to_string(x.length()) + " tokens"});
  }

  const RoutingTable table = build_routing_table(x, partition, scene.stream, config.routing);
  const AttentionOutput<float> routed = moc_attention(x, table, partition);
  {
    const double err = max_relative_error(routed.o, oracle::gather_then_softmax(x, table, partition));
    report.checks.push_back({"sparse_oracle", err <= tol.sparse_oracle, err, tol.sparse_oracle,
                             "empty_rows=" + std::to_string(routed.empty_rows())});
  }
  {
    const TinyInstance tiny = tiny_instance(scene.spec.seed, scene.spec.d);
    RoutingConfig small_cfg = config.routing;
    small_cfg.k = 1;
    const RoutingTable small_table = build_routing_table(tiny.inputs, tiny.partition, tiny.stream, small_cfg);
    bool zero_outside = true;
    const double dense_err = gradient_error(tiny.inputs, nullptr, nullptr, tol.fd_step);
    const double sparse_err =
        gradient_error(tiny.inputs, &small_table, &tiny.partition, tol.fd_step, &zero_outside);
    const double err = std::max(dense_err, sparse_err);
    report.checks.push_back({"gradient_fd", err <= tol.gradient && zero_outside, err, tol.gradient,
                             std::string("7-token scene, k=1; unselected grads zero=") + (zero_outside ? "yes" : "no")});
  }
  {
    const std::size_t bad = causal_violations(table, partition);
    const bool applies = config.routing.causal;
    report.checks.push_back({"dag_causality", !applies || bad == 0, static_cast<double>(bad), 0.0,
                             applies ? "edges to equal-or-later chunks" : "causal routing off; informational"});
  }
  {
    const auto loops = detect_loop_closures(table, partition);
    const bool applies = config.routing.causal;
    report.checks.push_back({"loop_closures", !applies || loops.empty(), static_cast<double>(loops.size()), 0.0,
                             applies ? "isolated 2-cycles" : "causal routing off; informational"});
  }
  {
    const VarLenPack pack = build_varlen_pack(table, partition);
    const AttentionOutput<float> packed = varlen_attention(x, pack);
    const bool exact = packed.o == routed.o;
    report.checks.push_back({"packing_lossless", exact, exact ? 0.0 : max_relative_error(packed.o, routed.o), 0.0,
                             std::to_string(pack.group_count()) + " groups over " + std::to_string(x.heads()) +
                                 " heads"});
  }
  return report;
}

// ---------------------------------------------------------------------------
// bench

struct BenchRow {
  std::size_t shots = 0;
  std::size_t L = 0;
  double wall_time_dense = 0.0;  // seconds, median
  double wall_time_moc = 0.0;    // seconds, median; routing + attention
  double flops_dense = 0.0;      // all heads
  double flops_moc = 0.0;        // all heads, model at measured C / k / m_bar
  double sparsity = 0.0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  double slope_dense = 0.0;
  double slope_moc = 0.0;
};

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorCode::InvalidArgument, "slope needs at least two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    mx += std::log(x[n]);
    my += std::log(y[n]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    const double dx = std::log(x[n]) - mx;
    sxy += dx * (std::log(y[n]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

template <typename Fn>
double median_seconds(Fn&& fn, std::size_t warmup, std::size_t reps) {
  for (std::size_t n = 0; n < warmup; ++n) fn();
  std::vector<double> t;
  for (std::size_t n = 0; n < reps; ++n) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
}

struct BenchConfig {
  std::vector<std::size_t> shot_counts{1, 2, 4, 8, 16};
  RunConfig run = RunConfig::desk();
  ShotSpec shot;
  std::size_t global_caption_tokens = 16;
  std::size_t d = 32;
  std::size_t H = 4;
  std::uint64_t seed = 0;
  std::size_t warmup = 1;
  std::size_t reps = 5;
};

inline BenchResult cmd_bench(const BenchConfig& cfg) {
  require(!cfg.shot_counts.empty() && std::is_sorted(cfg.shot_counts.begin(), cfg.shot_counts.end()),
          ErrorCode::InvalidArgument, "shot counts must be non-empty and increasing");
  require(cfg.reps >= 5, ErrorCode::InvalidArgument, "bench needs at least 5 repetitions");
  BenchResult result;
  for (std::size_t shots : cfg.shot_counts) {
    SceneSpec spec = SceneSpec::desk(shots, cfg.seed);
    for (auto& s : spec.shots) s = cfg.shot;
    spec.global_caption_tokens = cfg.global_caption_tokens;
    spec.d = cfg.d;
    spec.H = cfg.H;
    const Scene scene = gen_scene(spec);

    BenchRow row;
    row.shots = shots;
    row.L = scene.stream.length();
    row.wall_time_dense = median_seconds([&] { (void)dense_attention(scene.inputs); }, cfg.warmup, cfg.reps);
    row.wall_time_moc = median_seconds(
        [&] {
          const ChunkPartition p = build_chunks(scene.stream, cfg.run.chunk_target);
          const RoutingTable t = build_routing_table(scene.inputs, p, scene.stream, cfg.run.routing);
          (void)moc_attention(scene.inputs, t, p);
        },
        cfg.warmup, cfg.reps);

    const ChunkPartition p = build_chunks(scene.stream, cfg.run.chunk_target);
    const RoutingTable t = build_routing_table(scene.inputs, p, scene.stream, cfg.run.routing);
    const CostReport cost = cost_report(t, p, spec.d);
    row.flops_dense = cost.flops_dense_total();
    row.flops_moc = cost.flops_moc_total();
    row.sparsity = cost.measured_sparsity;
    result.rows.push_back(row);
  }
  if (result.rows.size() >= 2) {
    std::vector<double> L, td, tm;
    for (const BenchRow& r : result.rows) {
      L.push_back(static_cast<double>(r.L));
      td.push_back(r.wall_time_dense);
      tm.push_back(r.wall_time_moc);
    }
    result.slope_dense = loglog_slope(L, td);
    result.slope_moc = loglog_slope(L, tm);
  }
  return result;
}

inline void write_bench_csv(std::ostream& os, const BenchResult& r) {
  os << "shots,L,wall_time_dense,wall_time_moc,flops_dense,flops_moc,sparsity\n";
  for (const BenchRow& row : r.rows) {
    os << row.shots << ',' << row.L << ',' << std::setprecision(6) << row.wall_time_dense << ','
       << row.wall_time_moc << ',' << std::setprecision(17) << row.flops_dense << ',' << row.flops_moc << ','
       << std::setprecision(6) << row.sparsity << '\n';
  }
}

}  // namespace moc::workbench
