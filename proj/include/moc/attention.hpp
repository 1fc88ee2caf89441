#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "moc/errors.hpp"
#include "moc/inputs.hpp"
#include "moc/parallel.hpp"
#include "moc/router.hpp"
#include "moc/tensor.hpp"
#include "moc/token_lattice.hpp"

namespace moc {

template <typename T>
struct AttentionOutput {
  Tensor3<T> o;
  std::vector<double> lse;                  // per (h, i) log-sum-exp of the scaled scores
  std::vector<std::uint8_t> empty_context;  // per (h, i); set when nothing was selected
  std::uint64_t attended_pairs = 0;         // query-key pairs evaluated, summed over heads

  std::size_t empty_rows() const {
    return static_cast<std::size_t>(std::count(empty_context.begin(), empty_context.end(), std::uint8_t{1}));
  }
};

namespace detail {

/// Softmax(q K_idx^T / sqrt(d)) V_idx for one row with max subtraction and
/// widened accumulation. Summation runs in the order of `idx`.
template <typename T>
void attend_row(std::span<const T> q, const Tensor3<T>& keys, const Tensor3<T>& values, std::size_t h,
                std::span<const std::uint32_t> idx, std::span<T> out, double& lse, std::vector<accum_t<T>>& scores,
                std::vector<accum_t<T>>& acc) {
  using Acc = accum_t<T>;
  const std::size_t d = q.size();
  if (idx.empty()) {
    std::fill(out.begin(), out.end(), T{0});
    lse = -std::numeric_limits<double>::infinity();
    return;
  }
  const Acc scale = Acc{1} / std::sqrt(static_cast<Acc>(d));
  scores.resize(idx.size());
  Acc peak = -std::numeric_limits<Acc>::infinity();
  for (std::size_t n = 0; n < idx.size(); ++n) {
    scores[n] = dot(q, keys.row(h, idx[n])) * scale;
    peak = std::max(peak, scores[n]);
  }
  Acc total = 0;
  for (auto& s : scores) {
    s = std::exp(s - peak);
    total += s;
  }
  acc.assign(d, Acc{0});
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const auto v = values.row(h, idx[n]);
    for (std::size_t c = 0; c < d; ++c) acc[c] += scores[n] * static_cast<Acc>(v[c]);
  }
  for (std::size_t c = 0; c < d; ++c) out[c] = static_cast<T>(acc[c] / total);
  lse = static_cast<double>(peak + std::log(total));
}

/// Token indices covered by a sorted chunk selection; sorted and unique
/// because chunks are disjoint.
inline void gather_tokens(std::span<const Selection> selected, const ChunkPartition& partition,
                          std::vector<std::uint32_t>& out) {
  out.clear();
  for (const Selection& s : selected) {
    const Chunk& ch = partition.chunk(s.chunk);
    for (std::size_t t = ch.start; t < ch.end; ++t) out.push_back(static_cast<std::uint32_t>(t));
  }
}

inline void check_table(const RoutingTable& table, const ChunkPartition& partition, std::size_t heads,
                        std::size_t length) {
  require(table.heads() == heads && table.length() == length, ErrorCode::ShapeMismatch,
          "routing table does not match the attention inputs");
  require(partition.length() == length && table.chunk_count() == partition.size(), ErrorCode::ShapeMismatch,
          "routing table does not match the partition");
}

}  // namespace detail

/// Softmax(Q K^T / sqrt(d)) V per head.
template <typename T>
AttentionOutput<T> dense_attention(const AttentionInputs<T>& inputs) {
  inputs.validate();
  const std::size_t H = inputs.heads();
  const std::size_t L = inputs.length();
  AttentionOutput<T> out{Tensor3<T>(H, L, inputs.dim()), std::vector<double>(H * L), std::vector<std::uint8_t>(H * L, 0),
                         static_cast<std::uint64_t>(H) * L * L};
  std::vector<std::uint32_t> all(L);
  std::iota(all.begin(), all.end(), 0u);
  parallel_for(H * L, [&](std::size_t begin, std::size_t end) {
    std::vector<accum_t<T>> scores;
    std::vector<accum_t<T>> acc;
    for (std::size_t slot = begin; slot < end; ++slot) {
      const std::size_t h = slot / L;
      const std::size_t i = slot % L;
      detail::attend_row(inputs.q.row(h, i), inputs.k, inputs.v, h, std::span<const std::uint32_t>(all),
                         out.o.row(h, i), out.lse[slot], scores, acc);
    }
  });
  return out;
}

/// Routed attention: each (head, query) attends the union of the tokens of
/// its selected chunks under one joint softmax. Rows with no selection are
/// zero and flagged in empty_context.
template <typename T>
AttentionOutput<T> moc_attention(const AttentionInputs<T>& inputs, const RoutingTable& table,
                                 const ChunkPartition& partition) {
  inputs.validate();
  const std::size_t H = inputs.heads();
  const std::size_t L = inputs.length();
  detail::check_table(table, partition, H, L);

  AttentionOutput<T> out{Tensor3<T>(H, L, inputs.dim()), std::vector<double>(H * L), std::vector<std::uint8_t>(H * L, 0),
                         0};
  std::vector<std::uint64_t> pairs(H * L, 0);
  parallel_for(H * L, [&](std::size_t begin, std::size_t end) {
    std::vector<std::uint32_t> idx;
    std::vector<accum_t<T>> scores;
    std::vector<accum_t<T>> acc;
    for (std::size_t slot = begin; slot < end; ++slot) {
      const std::size_t h = slot / L;
      const std::size_t i = slot % L;
      detail::gather_tokens(table.selected(h, i), partition, idx);
      out.empty_context[slot] = idx.empty() ? 1 : 0;
      pairs[slot] = idx.size();
      detail::attend_row(inputs.q.row(h, i), inputs.k, inputs.v, h, std::span<const std::uint32_t>(idx),
                         out.o.row(h, i), out.lse[slot], scores, acc);
    }
  });
  out.attended_pairs = std::accumulate(pairs.begin(), pairs.end(), std::uint64_t{0});
  return out;
}

/// Var-len packing layout. Queries of one head that select the same chunk
/// set form a group; groups are stored head-major, ordered by their first
/// query. cu_q / cu_k are cumulative offsets into query_index / key_index,
/// with group g spanning [cu_q[g], cu_q[g+1]) and [cu_k[g], cu_k[g+1]).
struct VarLenPack {
  std::size_t heads = 0;
  std::size_t length = 0;
  std::vector<std::size_t> head_groups;  // group range of head h is [head_groups[h], head_groups[h+1])
  std::vector<std::uint32_t> query_index;
  std::vector<std::uint32_t> key_index;
  std::vector<std::size_t> cu_q{0};
  std::vector<std::size_t> cu_k{0};

  std::size_t group_count() const noexcept { return cu_q.size() - 1; }
  std::size_t group_count(std::size_t h) const { return head_groups.at(h + 1) - head_groups.at(h); }
  std::size_t head_of(std::size_t g) const {
    return static_cast<std::size_t>(std::upper_bound(head_groups.begin(), head_groups.end(), g) - head_groups.begin()) - 1;
  }
  std::span<const std::uint32_t> queries(std::size_t g) const {
    return {query_index.data() + cu_q[g], cu_q[g + 1] - cu_q[g]};
  }
  std::span<const std::uint32_t> keys(std::size_t g) const {
    return {key_index.data() + cu_k[g], cu_k[g + 1] - cu_k[g]};
  }
};

inline VarLenPack build_varlen_pack(const RoutingTable& table, const ChunkPartition& partition) {
  require(table.length() == partition.length() && table.chunk_count() == partition.size(), ErrorCode::ShapeMismatch,
          "routing table does not match the partition");
  VarLenPack pack;
  pack.heads = table.heads();
  pack.length = table.length();
  pack.head_groups.push_back(0);

  for (std::size_t h = 0; h < table.heads(); ++h) {
    std::map<std::vector<std::uint32_t>, std::size_t> group_of;
    std::vector<std::vector<std::uint32_t>> members;
    std::vector<const std::vector<std::uint32_t>*> sets;
    for (std::size_t i = 0; i < table.length(); ++i) {
      std::vector<std::uint32_t> chunks;
      for (const Selection& s : table.selected(h, i)) chunks.push_back(s.chunk);
      auto [it, inserted] = group_of.try_emplace(std::move(chunks), members.size());
      if (inserted) {
        members.emplace_back();
        sets.push_back(&it->first);
      }
      members[it->second].push_back(static_cast<std::uint32_t>(i));
    }
    for (std::size_t g = 0; g < members.size(); ++g) {
      pack.query_index.insert(pack.query_index.end(), members[g].begin(), members[g].end());
      pack.cu_q.push_back(pack.query_index.size());
      for (std::uint32_t c : *sets[g]) {
        const Chunk& ch = partition.chunk(c);
        for (std::size_t t = ch.start; t < ch.end; ++t) pack.key_index.push_back(static_cast<std::uint32_t>(t));
      }
      pack.cu_k.push_back(pack.key_index.size());
    }
    pack.head_groups.push_back(pack.cu_q.size() - 1);
  }
  return pack;
}

/// Evaluates attention group by group from a VarLenPack. Uses the same row
/// kernel and summation order as moc_attention, so results match bit for bit.
template <typename T>
AttentionOutput<T> varlen_attention(const AttentionInputs<T>& inputs, const VarLenPack& pack) {
  inputs.validate();
  const std::size_t H = inputs.heads();
  const std::size_t L = inputs.length();
  require(pack.heads == H && pack.length == L, ErrorCode::ShapeMismatch, "pack does not match the inputs");

  AttentionOutput<T> out{Tensor3<T>(H, L, inputs.dim()), std::vector<double>(H * L), std::vector<std::uint8_t>(H * L, 0),
                         0};
  std::vector<std::uint64_t> pairs(pack.group_count(), 0);
  parallel_for(
      pack.group_count(),
      [&](std::size_t begin, std::size_t end) {
        std::vector<accum_t<T>> scores;
        std::vector<accum_t<T>> acc;
        for (std::size_t g = begin; g < end; ++g) {
          const std::size_t h = pack.head_of(g);
          const auto keys = pack.keys(g);
          for (std::uint32_t i : pack.queries(g)) {
            const std::size_t slot = h * L + i;
            out.empty_context[slot] = keys.empty() ? 1 : 0;
            detail::attend_row(inputs.q.row(h, i), inputs.k, inputs.v, h, keys, out.o.row(h, i), out.lse[slot],
                               scores, acc);
          }
          pairs[g] = keys.size() * pack.queries(g).size();
        }
      },
      1);
  out.attended_pairs = std::accumulate(pairs.begin(), pairs.end(), std::uint64_t{0});
  return out;
}

template <typename T>
struct AttentionGrads {
  Tensor3<T> dq;
  Tensor3<T> dk;
  Tensor3<T> dv;
};

namespace detail {

/// Vector-Jacobian product of the attended output with the selection held
/// fixed. `indices(h, i, out)` fills the attended token list of a row.
template <typename T, typename IndexFn>
AttentionGrads<T> attention_vjp_impl(const AttentionInputs<T>& inputs, const Tensor3<T>& upstream, IndexFn&& indices) {
  inputs.validate();
  require(upstream.same_shape(inputs.q), ErrorCode::ShapeMismatch, "upstream cotangent shape differs from Q");
  using Acc = accum_t<T>;
  const std::size_t H = inputs.heads();
  const std::size_t L = inputs.length();
  const std::size_t d = inputs.dim();
  const Acc scale = Acc{1} / std::sqrt(static_cast<Acc>(d));

  std::vector<Acc> dq(H * L * d, 0), dk(H * L * d, 0), dv(H * L * d, 0);
  parallel_for(
      H,
      [&](std::size_t hb, std::size_t he) {
        std::vector<std::uint32_t> idx;
        std::vector<Acc> p;
        std::vector<Acc> dp;
        std::vector<Acc> o(d);
        for (std::size_t h = hb; h < he; ++h) {
          for (std::size_t i = 0; i < L; ++i) {
            indices(h, i, idx);
            if (idx.empty()) continue;
            const auto q = inputs.q.row(h, i);
            const auto g = upstream.row(h, i);
            p.resize(idx.size());
            dp.resize(idx.size());
            Acc peak = -std::numeric_limits<Acc>::infinity();
            for (std::size_t n = 0; n < idx.size(); ++n) {
              p[n] = dot(q, inputs.k.row(h, idx[n])) * scale;
              peak = std::max(peak, p[n]);
            }
            Acc total = 0;
            for (auto& x : p) {
              x = std::exp(x - peak);
              total += x;
            }
            std::fill(o.begin(), o.end(), Acc{0});
            for (std::size_t n = 0; n < idx.size(); ++n) {
              p[n] /= total;
              const auto v = inputs.v.row(h, idx[n]);
              for (std::size_t c = 0; c < d; ++c) o[c] += p[n] * static_cast<Acc>(v[c]);
            }
            Acc g_dot_o = 0;
            for (std::size_t c = 0; c < d; ++c) g_dot_o += static_cast<Acc>(g[c]) * o[c];
            for (std::size_t n = 0; n < idx.size(); ++n) {
              const std::size_t j = idx[n];
              const Acc dp_n = dot(g, inputs.v.row(h, j));
              const Acc ds = p[n] * (dp_n - g_dot_o) * scale;
              const auto k = inputs.k.row(h, j);
              Acc* dqi = &dq[(h * L + i) * d];
              Acc* dkj = &dk[(h * L + j) * d];
              Acc* dvj = &dv[(h * L + j) * d];
              for (std::size_t c = 0; c < d; ++c) {
                dqi[c] += ds * static_cast<Acc>(k[c]);
                dkj[c] += ds * static_cast<Acc>(q[c]);
                dvj[c] += p[n] * static_cast<Acc>(g[c]);
              }
            }
          }
        }
      },
      1);

  AttentionGrads<T> out{Tensor3<T>(H, L, d), Tensor3<T>(H, L, d), Tensor3<T>(H, L, d)};
  for (std::size_t n = 0; n < dq.size(); ++n) {
    out.dq.flat()[n] = static_cast<T>(dq[n]);
    out.dk.flat()[n] = static_cast<T>(dk[n]);
    out.dv.flat()[n] = static_cast<T>(dv[n]);
  }
  return out;
}

}  // namespace detail

/// Gradients of <upstream, dense_attention(inputs)> w.r.t. Q, K, V.
template <typename T>
AttentionGrads<T> attention_vjp(const AttentionInputs<T>& inputs, const Tensor3<T>& upstream) {
  const std::size_t L = inputs.length();
  return detail::attention_vjp_impl(inputs, upstream, [L](std::size_t, std::size_t, std::vector<std::uint32_t>& idx) {
    idx.resize(L);
    std::iota(idx.begin(), idx.end(), 0u);
  });
}

/// Gradients of <upstream, moc_attention(inputs, table)> with routing held
/// fixed. Keys and values never selected receive exactly zero.
template <typename T>
AttentionGrads<T> attention_vjp(const AttentionInputs<T>& inputs, const RoutingTable& table,
                                const ChunkPartition& partition, const Tensor3<T>& upstream) {
  detail::check_table(table, partition, inputs.heads(), inputs.length());
  return detail::attention_vjp_impl(
      inputs, upstream, [&](std::size_t h, std::size_t i, std::vector<std::uint32_t>& idx) {
        detail::gather_tokens(table.selected(h, i), partition, idx);
      });
}

}  // namespace moc
