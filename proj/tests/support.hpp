#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "moc/moc.hpp"

namespace moc::testing {

template <typename T>
AttentionInputs<T> random_inputs(std::size_t H, std::size_t L, std::size_t d, std::uint64_t seed, double scale = 1.0) {
  AttentionInputs<T> x(H, L, d);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (auto* t : {&x.q, &x.k, &x.v}) {
    for (auto& e : t->flat()) e = static_cast<T>(normal(rng));
  }
  return x;
}

/// Random multi-shot stream: optional global caption, then per shot an
/// optional caption and 1..max_frames frames of 1..max_tpf tokens.
inline TokenStream random_stream(std::uint64_t seed, std::size_t max_shots = 4, std::size_t max_frames = 4,
                                 std::size_t max_tpf = 12) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  StreamBuilder b;
  if (pick(0, 1)) b.global_caption(pick(1, 4));
  const std::size_t shots = pick(1, max_shots);
  for (std::uint32_t s = 0; s < shots; ++s) {
    if (pick(0, 1)) b.shot_caption(s, pick(1, 3));
    const std::size_t frames = pick(1, max_frames);
    for (std::size_t f = 0; f < frames; ++f) b.video_frame(s, pick(1, max_tpf));
  }
  return b.build();
}

/// A random legal table: every query selects a random non-empty subset of
/// chunks, with random provenance labels.
inline RoutingTable random_table(std::size_t H, std::size_t L, std::size_t C, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.4);
  std::uniform_int_distribution<int> label(0, 2);
  std::uniform_int_distribution<std::uint32_t> any(0, static_cast<std::uint32_t>(C - 1));
  std::vector<std::vector<Selection>> lists(H * L);
  for (auto& list : lists) {
    for (std::uint32_t c = 0; c < C; ++c) {
      if (coin(rng)) list.push_back({c, static_cast<Provenance>(label(rng))});
    }
    if (list.empty()) list.push_back({any(rng), Provenance::Routed});
  }
  return RoutingTable::from_lists(H, L, C, std::move(lists));
}

/// Chunks of fixed size over a plain index range, with no content metadata.
inline ChunkPartition uniform_partition(std::size_t L, std::size_t size) {
  std::vector<Chunk> chunks;
  for (std::size_t s = 0; s < L; s += size) chunks.push_back(Chunk{0, s, std::min(L, s + size)});
  return ChunkPartition(std::move(chunks), L, size);
}

}  // namespace moc::testing
