#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "moc/attention.hpp"
#include "moc/errors.hpp"
#include "moc/router.hpp"
#include "moc/token_lattice.hpp"

namespace moc {

/// Per-head cost parameters: L tokens, C chunks, k routed chunks per query,
/// m_bar mean routed-chunk length, d head dim.
struct CostParams {
  double L = 0;
  double C = 0;
  double k = 0;
  double m_bar = 0;
  double d = 0;
};

/// Pooling (Ld) + routing (2LCd) + attention over the kept keys (4 L k m_bar d).
constexpr double flops_moc(const CostParams& p) {
  return p.L * p.d + 2.0 * p.L * p.C * p.d + 4.0 * p.L * p.k * p.m_bar * p.d;
}

/// QK^T and PV over all L^2 pairs.
constexpr double flops_dense(double L, double d) { return 4.0 * L * L * d; }

constexpr double flops_ratio(const CostParams& p) { return flops_dense(p.L, p.d) / flops_moc(p); }

struct SparsityReport {
  double sparsity = 0.0;        // 1 - attended pairs / (H L^2)
  double measured_m_bar = 0.0;  // mean token count of Routed selections
  double mean_routed = 0.0;     // mean |Routed| per (head, query)
  std::uint64_t attended_pairs = 0;
};

/// Counts attended token pairs per (head, query) from the table. Mandatory
/// links count as attended; tokens reached through several chunks are
/// impossible since chunks are disjoint, so each pair counts once.
inline SparsityReport measured_sparsity(const RoutingTable& table, const ChunkPartition& partition) {
  require(table.length() == partition.length() && table.chunk_count() == partition.size(), ErrorCode::ShapeMismatch,
          "routing table does not match the partition");
  SparsityReport r;
  std::uint64_t routed = 0;
  std::uint64_t routed_tokens = 0;
  for (std::size_t h = 0; h < table.heads(); ++h) {
    for (std::size_t i = 0; i < table.length(); ++i) {
      for (const Selection& s : table.selected(h, i)) {
        const std::size_t n = partition.chunk(s.chunk).token_count();
        r.attended_pairs += n;
        if (s.provenance == Provenance::Routed) {
          ++routed;
          routed_tokens += n;
        }
      }
    }
  }
  const double L = static_cast<double>(table.length());
  const double rows = static_cast<double>(table.heads()) * L;
  r.sparsity = 1.0 - static_cast<double>(r.attended_pairs) / (rows * L);
  r.measured_m_bar = routed > 0 ? static_cast<double>(routed_tokens) / static_cast<double>(routed) : 0.0;
  r.mean_routed = static_cast<double>(routed) / rows;
  return r;
}

struct CostReport {
  double flops_moc = 0.0;    // per head
  double flops_dense = 0.0;  // per head
  double ratio = 0.0;
  double heads = 1.0;
  double measured_sparsity = 0.0;
  double measured_m_bar = 0.0;

  double flops_moc_total() const { return flops_moc * heads; }
  double flops_dense_total() const { return flops_dense * heads; }

  /// Flat `key=value` lines, fixed key order.
  std::string to_record() const {
    std::ostringstream os;
    os.precision(17);
    os << "flops_moc=" << flops_moc << '\n'
       << "flops_dense=" << flops_dense << '\n'
       << "ratio=" << ratio << '\n'
       << "heads=" << heads << '\n'
       << "flops_moc_total=" << flops_moc_total() << '\n'
       << "flops_dense_total=" << flops_dense_total() << '\n'
       << "measured_sparsity=" << measured_sparsity << '\n'
       << "measured_m_bar=" << measured_m_bar << '\n';
    return os.str();
  }
};

inline CostReport cost_report(const CostParams& p, double heads = 1.0) {
  CostReport r;
  r.flops_moc = flops_moc(p);
  r.flops_dense = flops_dense(p.L, p.d);
  r.ratio = r.flops_dense / r.flops_moc;
  r.heads = heads;
  return r;
}

/// Cost model evaluated at the measured chunk count, mean routed count and
/// m_bar of an actual routing table.
inline CostReport cost_report(const RoutingTable& table, const ChunkPartition& partition, std::size_t dim) {
  const SparsityReport s = measured_sparsity(table, partition);
  CostParams p{static_cast<double>(table.length()), static_cast<double>(partition.size()), s.mean_routed,
               s.measured_m_bar, static_cast<double>(dim)};
  CostReport r = cost_report(p, static_cast<double>(table.heads()));
  r.measured_sparsity = s.sparsity;
  r.measured_m_bar = s.measured_m_bar;
  return r;
}

/// FLOPs actually spent by build_routing_table + moc_attention, counted the
/// same way as the model: d adds per pooled token, 2d per routing score, 4d
/// per attended pair (QK and PV multiply-adds). Summed over heads.
template <typename T>
double instrumented_flops(const RoutingTable& table, const AttentionOutput<T>& out, std::size_t dim) {
  const double d = static_cast<double>(dim);
  return static_cast<double>(table.heads() * table.length()) * d +
         2.0 * static_cast<double>(table.score_evaluations()) * d + 4.0 * static_cast<double>(out.attended_pairs) * d;
}

}  // namespace moc
