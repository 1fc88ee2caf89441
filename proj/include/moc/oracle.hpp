#pragma once

// Brute-force reference implementations. Nothing here reuses the production
// kernels in attention.hpp / router.hpp: loops are written out, arithmetic
// is long double, and softmax uses explicit exponentials.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "moc/inputs.hpp"
#include "moc/router.hpp"
#include "moc/tensor.hpp"
#include "moc/token_lattice.hpp"

namespace moc::oracle {

/// Softmax over an explicit key list for one (head, query), three loops.
template <typename T>
std::vector<long double> attend(const AttentionInputs<T>& x, std::size_t h, std::size_t i,
                                const std::vector<std::size_t>& keys) {
  const std::size_t d = x.dim();
  std::vector<long double> out(d, 0.0L);
  if (keys.empty()) return out;
  std::vector<long double> s(keys.size());
  for (std::size_t n = 0; n < keys.size(); ++n) {
    long double acc = 0.0L;
    for (std::size_t c = 0; c < d; ++c) acc += static_cast<long double>(x.q(h, i, c)) * x.k(h, keys[n], c);
    s[n] = acc / std::sqrt(static_cast<long double>(d));
  }
  const long double peak = *std::max_element(s.begin(), s.end());
  long double z = 0.0L;
  for (auto& v : s) {
    v = std::exp(v - peak);
    z += v;
  }
  for (std::size_t n = 0; n < keys.size(); ++n) {
    for (std::size_t c = 0; c < d; ++c) out[c] += s[n] / z * x.v(h, keys[n], c);
  }
  return out;
}

template <typename T>
Tensor3<double> dense(const AttentionInputs<T>& x) {
  Tensor3<double> o(x.heads(), x.length(), x.dim());
  std::vector<std::size_t> all(x.length());
  for (std::size_t j = 0; j < all.size(); ++j) all[j] = j;
  for (std::size_t h = 0; h < x.heads(); ++h) {
    for (std::size_t i = 0; i < x.length(); ++i) {
      const auto row = attend(x, h, i, all);
      for (std::size_t c = 0; c < x.dim(); ++c) o(h, i, c) = static_cast<double>(row[c]);
    }
  }
  return o;
}

/// Expands each selected chunk to its tokens by scanning the whole stream
/// for membership, then attends.
template <typename T>
Tensor3<double> gather_then_softmax(const AttentionInputs<T>& x, const RoutingTable& table,
                                    const ChunkPartition& partition) {
  Tensor3<double> o(x.heads(), x.length(), x.dim());
  for (std::size_t h = 0; h < x.heads(); ++h) {
    for (std::size_t i = 0; i < x.length(); ++i) {
      std::vector<bool> chosen(partition.size(), false);
      for (const Selection& s : table.selected(h, i)) chosen[s.chunk] = true;
      std::vector<std::size_t> keys;
      for (std::size_t j = 0; j < x.length(); ++j) {
        for (const Chunk& ch : partition.chunks()) {
          if (chosen[ch.chunk_id] && ch.start <= j && j < ch.end) keys.push_back(j);
        }
      }
      const auto row = attend(x, h, i, keys);
      for (std::size_t c = 0; c < x.dim(); ++c) o(h, i, c) = static_cast<double>(row[c]);
    }
  }
  return o;
}

/// Two-pass compensated (Kahan) mean of rows [begin, end) of one head.
template <typename T>
std::vector<double> kahan_mean(const Tensor3<T>& x, std::size_t h, std::size_t begin, std::size_t end) {
  std::vector<double> out(x.dim());
  for (std::size_t c = 0; c < x.dim(); ++c) {
    long double sum = 0.0L;
    long double comp = 0.0L;
    for (std::size_t i = begin; i < end; ++i) {
      const long double y = static_cast<long double>(x(h, i, c)) - comp;
      const long double t = sum + y;
      comp = (t - sum) - y;
      sum = t;
    }
    const long double mean = sum / static_cast<long double>(end - begin);
    long double resid = 0.0L;
    for (std::size_t i = begin; i < end; ++i) resid += static_cast<long double>(x(h, i, c)) - mean;
    out[c] = static_cast<double>(mean + resid / static_cast<long double>(end - begin));
  }
  return out;
}

/// Full sort by (score desc, id asc), first k, returned sorted by id.
inline std::vector<std::uint32_t> topk_by_sort(std::vector<ScoredChunk> scored, std::size_t k) {
  std::stable_sort(scored.begin(), scored.end(), [](const ScoredChunk& a, const ScoredChunk& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.chunk < b.chunk;
  });
  std::vector<std::uint32_t> out;
  for (std::size_t n = 0; n < std::min(k, scored.size()); ++n) out.push_back(scored[n].chunk);
  std::sort(out.begin(), out.end());
  return out;
}

/// Central finite differences of loss(x) = <upstream, forward(x)> with
/// respect to every entry of Q, K and V. Returns gradients in that order.
struct FiniteDifferenceGrads {
  Tensor3<double> dq;
  Tensor3<double> dk;
  Tensor3<double> dv;
};

inline FiniteDifferenceGrads finite_differences(
    const AttentionInputs<double>& x, const Tensor3<double>& upstream,
    const std::function<Tensor3<double>(const AttentionInputs<double>&)>& forward, double step = 1e-4) {
  auto loss = [&](const AttentionInputs<double>& in) {
    const Tensor3<double> o = forward(in);
    long double acc = 0.0L;
    for (std::size_t n = 0; n < o.size(); ++n) acc += static_cast<long double>(o.flat()[n]) * upstream.flat()[n];
    return acc;
  };
  FiniteDifferenceGrads g{Tensor3<double>(x.heads(), x.length(), x.dim()),
                          Tensor3<double>(x.heads(), x.length(), x.dim()),
                          Tensor3<double>(x.heads(), x.length(), x.dim())};
  auto probe = [&](Tensor3<double> AttentionInputs<double>::*field, Tensor3<double>& grad) {
    AttentionInputs<double> work = x;
    for (std::size_t n = 0; n < grad.size(); ++n) {
      const double base = (work.*field).flat()[n];
      (work.*field).flat()[n] = base + step;
      const long double up = loss(work);
      (work.*field).flat()[n] = base - step;
      const long double down = loss(work);
      (work.*field).flat()[n] = base;
      grad.flat()[n] = static_cast<double>((up - down) / (2.0L * step));
    }
  };
  probe(&AttentionInputs<double>::q, g.dq);
  probe(&AttentionInputs<double>::k, g.dk);
  probe(&AttentionInputs<double>::v, g.dv);
  return g;
}

}  // namespace moc::oracle
