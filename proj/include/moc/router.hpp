#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moc/errors.hpp"
#include "moc/inputs.hpp"
#include "moc/parallel.hpp"
#include "moc/rng.hpp"
#include "moc/tensor.hpp"
#include "moc/token_lattice.hpp"

namespace moc {

/// Training-time route perturbation: drop-off removes floor(p_drop * k)
/// routed chunks with p_drop ~ U(0, p_max); drop-in adds Poisson(lambda)
/// extra chunks. Mandatory links are never touched.
struct DropConfig {
  double p_max = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  bool enabled = false;

  void validate() const {
    require(p_max >= 0.0 && p_max <= 1.0, ErrorCode::InvalidArgument, "p_max must lie in [0, 1]");
    require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::InvalidArgument, "lambda must be >= 0");
  }
};

enum class RoutingMode : std::uint8_t {
  PerQuery,        // every query token routes on its own
  SharedPerChunk,  // all queries of a chunk share the routing of their mean query
};

struct RoutingConfig {
  std::size_t k = 1;
  bool causal = false;
  bool force_cross_modal = false;
  bool force_intra_shot = false;
  bool force_self_chunk = false;
  std::optional<DropConfig> drop;
  RoutingMode mode = RoutingMode::PerQuery;

  void validate() const {
    require(k >= 1, ErrorCode::InvalidArgument, "k must be at least 1");
    if (drop) drop->validate();
  }
};

/// Mean-pooled key per (head, chunk), stored in double.
class ChunkDescriptors {
 public:
  ChunkDescriptors() = default;
  ChunkDescriptors(std::size_t heads, std::size_t chunks, std::size_t dim)
      : heads_(heads), chunks_(chunks), dim_(dim), data_(heads * chunks * dim, 0.0) {}

  std::size_t heads() const noexcept { return heads_; }
  std::size_t chunks() const noexcept { return chunks_; }
  std::size_t dim() const noexcept { return dim_; }

  std::span<double> row(std::size_t h, std::size_t c) noexcept {
    return {data_.data() + (h * chunks_ + c) * dim_, dim_};
  }
  std::span<const double> row(std::size_t h, std::size_t c) const noexcept {
    return {data_.data() + (h * chunks_ + c) * dim_, dim_};
  }

 private:
  std::size_t heads_ = 0;
  std::size_t chunks_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

/// Streaming segment mean: one pass over the keys in token order, closing a
/// running sum at each chunk end. No chunk is materialized.
template <typename T>
ChunkDescriptors pool_descriptors(const Tensor3<T>& keys, const ChunkPartition& partition) {
  require(keys.length() == partition.length(), ErrorCode::ShapeMismatch,
          "keys cover " + std::to_string(keys.length()) + " tokens, partition " +
              std::to_string(partition.length()));
  require(keys.dim() >= 1, ErrorCode::ShapeMismatch, "descriptor dimension must be >= 1");

  using Acc = accum_t<T>;
  ChunkDescriptors out(keys.heads(), partition.size(), keys.dim());
  const std::size_t d = keys.dim();
  const auto chunk_of = partition.chunk_of_token();
  std::vector<Acc> running(d);

  for (std::size_t h = 0; h < keys.heads(); ++h) {
    std::fill(running.begin(), running.end(), Acc{0});
    for (std::size_t i = 0; i < keys.length(); ++i) {
      const auto row = keys.row(h, i);
      for (std::size_t c = 0; c < d; ++c) running[c] += static_cast<Acc>(row[c]);
      const bool closes = i + 1 == keys.length() || chunk_of[i + 1] != chunk_of[i];
      if (closes) {
        const std::size_t chunk = chunk_of[i];
        const auto n = static_cast<Acc>(partition.chunk(chunk).token_count());
        auto dst = out.row(h, chunk);
        for (std::size_t c = 0; c < d; ++c) {
          dst[c] = static_cast<double>(running[c] / n);
          running[c] = 0;
        }
      }
    }
  }
  return out;
}

/// Unscaled routing score q . phi(K_w) for every chunk of one head.
template <typename T>
std::vector<double> route_scores(std::span<const T> query, const ChunkDescriptors& descriptors, std::size_t head) {
  require(query.size() == descriptors.dim(), ErrorCode::ShapeMismatch, "query and descriptor dimensions differ");
  require(head < descriptors.heads(), ErrorCode::ShapeMismatch, "head out of range");
  std::vector<double> scores(descriptors.chunks());
  for (std::size_t c = 0; c < scores.size(); ++c) {
    scores[c] = static_cast<double>(dot(query, descriptors.row(head, c)));
  }
  return scores;
}

struct CandidateMask {
  std::vector<std::uint32_t> mandatory;   // sorted
  std::vector<std::uint32_t> candidates;  // sorted, disjoint from mandatory
};

/// Pre-routing mask for one query token: forced links go to `mandatory`, the
/// rest (restricted to earlier chunks when causal) are routing candidates.
inline CandidateMask candidate_mask(std::size_t query_token, const ChunkPartition& partition,
                                    const TokenStream& stream, const RoutingConfig& config) {
  require(stream.length() == partition.length(), ErrorCode::ShapeMismatch, "stream and partition lengths differ");
  const std::uint32_t own = partition.chunk_of(query_token);
  const Chunk& self = partition.chunk(own);

  CandidateMask mask;
  for (const Chunk& ch : partition.chunks()) {
    const bool forced = (config.force_cross_modal && ch.kind == Modality::Text) ||
                        (config.force_intra_shot && ch.global == self.global && ch.shot_id == self.shot_id) ||
                        (config.force_self_chunk && ch.chunk_id == own);
    if (forced) {
      mask.mandatory.push_back(ch.chunk_id);
    } else if (!config.causal || ch.chunk_id < own) {
      mask.candidates.push_back(ch.chunk_id);
    }
  }
  return mask;
}

struct ScoredChunk {
  std::uint32_t chunk = 0;
  double score = 0.0;
};

/// Highest-scoring k candidates, ties toward the lower chunk id. Returned
/// sorted by chunk id.
inline std::vector<std::uint32_t> topk_select(std::span<const ScoredChunk> scored, std::size_t k) {
  require(k >= 1, ErrorCode::InvalidArgument, "k must be at least 1");
  std::vector<ScoredChunk> work(scored.begin(), scored.end());
  const std::size_t take = std::min(k, work.size());
  auto better = [](const ScoredChunk& a, const ScoredChunk& b) {
    return a.score > b.score || (a.score == b.score && a.chunk < b.chunk);
  };
  std::partial_sort(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(take), work.end(), better);
  std::vector<std::uint32_t> out;
  out.reserve(take);
  for (std::size_t n = 0; n < take; ++n) out.push_back(work[n].chunk);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::size_t drop_count(double p_drop, std::size_t k) {
  return static_cast<std::size_t>(std::floor(p_drop * static_cast<double>(k)));
}

struct DropOutcome {
  std::vector<std::uint32_t> kept;        // surviving routed chunks, sorted
  std::vector<std::uint32_t> dropped_in;  // inserted chunks, sorted
  double p_drop = 0.0;
  std::size_t removed = 0;
  std::size_t m_drawn = 0;  // Poisson draw before clamping to the pool size
};

/// Drop-off then drop-in for one (head, query). `candidates` is the causal,
/// non-mandatory candidate set; drop-in only draws from candidates that were
/// not routed. When `forced_p_drop` is set it replaces the uniform draw.
inline DropOutcome apply_drop(std::span<const std::uint32_t> routed, std::span<const std::uint32_t> candidates,
                              std::size_t k, const DropConfig& config, CounterRng& rng,
                              std::optional<double> forced_p_drop = std::nullopt) {
  require(config.enabled, ErrorCode::DropDisabled, "drop perturbation requested while disabled");
  config.validate();

  DropOutcome out;
  if (forced_p_drop) {
    out.p_drop = *forced_p_drop;
  } else if (config.p_max > 0.0) {
    out.p_drop = std::uniform_real_distribution<double>(0.0, config.p_max)(rng);
  }
  out.removed = std::min(drop_count(out.p_drop, k), routed.size());

  std::vector<std::uint32_t> victims;
  std::sample(routed.begin(), routed.end(), std::back_inserter(victims), out.removed, rng);
  std::set_difference(routed.begin(), routed.end(), victims.begin(), victims.end(), std::back_inserter(out.kept));

  if (config.lambda > 0.0) out.m_drawn = std::poisson_distribution<std::size_t>(config.lambda)(rng);
  if (out.m_drawn > 0) {
    std::vector<std::uint32_t> pool;
    std::set_difference(candidates.begin(), candidates.end(), routed.begin(), routed.end(), std::back_inserter(pool));
    std::sample(pool.begin(), pool.end(), std::back_inserter(out.dropped_in), out.m_drawn, rng);
  }
  return out;
}

enum class Provenance : std::uint8_t { Mandatory, Routed, DroppedIn };

constexpr const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::Mandatory: return "mandatory";
    case Provenance::Routed: return "routed";
    case Provenance::DroppedIn: return "dropped_in";
  }
  return "unknown";
}

struct Selection {
  std::uint32_t chunk = 0;
  Provenance provenance = Provenance::Routed;
  double score = std::numeric_limits<double>::quiet_NaN();  // raw routing score; NaN when not scored

  friend bool operator==(const Selection& a, const Selection& b) {
    return a.chunk == b.chunk && a.provenance == b.provenance;
  }
};

/// Per (head, query) chunk selections in CSR layout, each list sorted by
/// chunk id and duplicate-free.
class RoutingTable {
 public:
  RoutingTable() = default;

  /// Builds a table from explicit lists indexed [h * L + i].
  static RoutingTable from_lists(std::size_t heads, std::size_t length, std::size_t chunks,
                                 std::vector<std::vector<Selection>> lists) {
    require(lists.size() == heads * length, ErrorCode::ShapeMismatch, "routing lists do not match H * L");
    RoutingTable t;
    t.heads_ = heads;
    t.length_ = length;
    t.chunks_ = chunks;
    t.offsets_.reserve(lists.size() + 1);
    t.offsets_.push_back(0);
    for (auto& list : lists) {
      std::sort(list.begin(), list.end(), [](const Selection& a, const Selection& b) { return a.chunk < b.chunk; });
      for (std::size_t n = 0; n < list.size(); ++n) {
        require(list[n].chunk < chunks, ErrorCode::IndexOutOfRange, "selected chunk out of range");
        require(n == 0 || list[n].chunk != list[n - 1].chunk, ErrorCode::InvalidArgument,
                "chunk selected twice for one query");
      }
      t.entries_.insert(t.entries_.end(), list.begin(), list.end());
      t.offsets_.push_back(t.entries_.size());
    }
    return t;
  }

  std::size_t heads() const noexcept { return heads_; }
  std::size_t length() const noexcept { return length_; }
  std::size_t chunk_count() const noexcept { return chunks_; }

  std::span<const Selection> selected(std::size_t h, std::size_t i) const {
    const std::size_t slot = h * length_ + i;
    return {entries_.data() + offsets_[slot], offsets_[slot + 1] - offsets_[slot]};
  }

  std::size_t count(std::size_t h, std::size_t i, Provenance p) const {
    const auto s = selected(h, i);
    return static_cast<std::size_t>(
        std::count_if(s.begin(), s.end(), [p](const Selection& x) { return x.provenance == p; }));
  }

  /// Number of query-descriptor inner products evaluated while routing.
  std::uint64_t score_evaluations() const noexcept { return score_evaluations_; }
  RoutingMode mode() const noexcept { return mode_; }

  bool same_selections(const RoutingTable& other) const {
    return heads_ == other.heads_ && length_ == other.length_ && chunks_ == other.chunks_ &&
           offsets_ == other.offsets_ && entries_ == other.entries_;
  }

 private:
  template <typename T>
  friend RoutingTable build_routing_table(const AttentionInputs<T>&, const ChunkPartition&, const TokenStream&,
                                          const RoutingConfig&);

  std::size_t heads_ = 0;
  std::size_t length_ = 0;
  std::size_t chunks_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<Selection> entries_;
  std::uint64_t score_evaluations_ = 0;
  RoutingMode mode_ = RoutingMode::PerQuery;
};

namespace detail {

inline constexpr std::uint64_t kPerQueryStream = 0x51;
inline constexpr std::uint64_t kSharedStream = 0x5c;

template <typename T>
std::vector<Selection> route_one(std::span<const T> query, std::size_t head, const ChunkDescriptors& descriptors,
                                 const CandidateMask& mask, const RoutingConfig& config, CounterRng rng) {
  std::vector<ScoredChunk> scored;
  scored.reserve(mask.candidates.size());
  for (std::uint32_t c : mask.candidates) {
    scored.push_back({c, static_cast<double>(dot(query, descriptors.row(head, c)))});
  }
  std::vector<std::uint32_t> routed = topk_select(scored, config.k);
  std::vector<std::uint32_t> dropped_in;
  if (config.drop && config.drop->enabled) {
    DropOutcome d = apply_drop(routed, mask.candidates, config.k, *config.drop, rng);
    routed = std::move(d.kept);
    dropped_in = std::move(d.dropped_in);
  }

  auto score_of = [&](std::uint32_t c) {
    auto it = std::lower_bound(scored.begin(), scored.end(), c,
                               [](const ScoredChunk& s, std::uint32_t id) { return s.chunk < id; });
    return it->score;
  };
  std::vector<Selection> out;
  out.reserve(mask.mandatory.size() + routed.size() + dropped_in.size());
  for (std::uint32_t c : mask.mandatory) out.push_back({c, Provenance::Mandatory});
  for (std::uint32_t c : routed) out.push_back({c, Provenance::Routed, score_of(c)});
  for (std::uint32_t c : dropped_in) out.push_back({c, Provenance::DroppedIn, score_of(c)});
  std::sort(out.begin(), out.end(), [](const Selection& a, const Selection& b) { return a.chunk < b.chunk; });
  return out;
}

}  // namespace detail

/// Mandatory links, top-k routing over mean-pooled key descriptors, and
/// optional drop perturbations, independently per head and per query.
/// Perturbation draws are keyed by (seed, head, query) so the table does not
/// depend on the thread count.
template <typename T>
RoutingTable build_routing_table(const AttentionInputs<T>& inputs, const ChunkPartition& partition,
                                 const TokenStream& stream, const RoutingConfig& config) {
  config.validate();
  inputs.validate();
  require(inputs.length() == partition.length() && stream.length() == partition.length(), ErrorCode::ShapeMismatch,
          "inputs, stream and partition lengths differ");

  const std::size_t H = inputs.heads();
  const std::size_t L = inputs.length();
  const std::size_t C = partition.size();
  const std::size_t d = inputs.dim();
  const ChunkDescriptors descriptors = pool_descriptors(inputs.k, partition);
  const std::uint64_t seed = config.drop ? config.drop->seed : 0;

  std::vector<CandidateMask> masks;
  masks.reserve(C);
  for (const Chunk& ch : partition.chunks()) masks.push_back(candidate_mask(ch.start, partition, stream, config));

  std::vector<std::vector<Selection>> lists(H * L);
  std::uint64_t evaluations = 0;

  if (config.mode == RoutingMode::PerQuery) {
    parallel_for(H * L, [&](std::size_t begin, std::size_t end) {
      for (std::size_t slot = begin; slot < end; ++slot) {
        const std::size_t h = slot / L;
        const std::size_t i = slot % L;
        const auto& mask = masks[partition.chunk_of_token()[i]];
        lists[slot] = detail::route_one(inputs.q.row(h, i), h, descriptors, mask, config,
                                        CounterRng::keyed(seed, h, i, detail::kPerQueryStream));
      }
    });
    for (std::size_t i = 0; i < L; ++i) evaluations += H * masks[partition.chunk_of_token()[i]].candidates.size();
  } else {
    using Acc = accum_t<T>;
    parallel_for(H * C, [&](std::size_t begin, std::size_t end) {
      std::vector<Acc> acc(d);
      std::vector<T> mean_query(d);
      for (std::size_t slot = begin; slot < end; ++slot) {
        const std::size_t h = slot / C;
        const Chunk& ch = partition.chunk(slot % C);
        std::fill(acc.begin(), acc.end(), Acc{0});
        for (std::size_t i = ch.start; i < ch.end; ++i) {
          const auto row = inputs.q.row(h, i);
          for (std::size_t c = 0; c < d; ++c) acc[c] += static_cast<Acc>(row[c]);
        }
        for (std::size_t c = 0; c < d; ++c) mean_query[c] = static_cast<T>(acc[c] / static_cast<Acc>(ch.token_count()));
        auto shared = detail::route_one(std::span<const T>(mean_query), h, descriptors, masks[ch.chunk_id], config,
                                        CounterRng::keyed(seed, h, ch.chunk_id, detail::kSharedStream));
        for (std::size_t i = ch.start; i < ch.end; ++i) lists[h * L + i] = shared;
      }
    });
    for (const auto& mask : masks) evaluations += H * mask.candidates.size();
  }

  RoutingTable table = RoutingTable::from_lists(H, L, C, std::move(lists));
  table.score_evaluations_ = evaluations;
  table.mode_ = config.mode;
  return table;
}

/// Chunk x chunk selection counts per head and provenance: counts[h][p][a*C+b]
/// is the number of query tokens in chunk a that selected chunk b.
class ChunkCounts {
 public:
  ChunkCounts() = default;
  ChunkCounts(std::size_t heads, std::size_t chunks)
      : heads_(heads), chunks_(chunks), data_(heads * 3 * chunks * chunks, 0) {}

  std::size_t heads() const noexcept { return heads_; }
  std::size_t chunks() const noexcept { return chunks_; }

  std::uint64_t& at(std::size_t h, Provenance p, std::size_t from, std::size_t to) {
    return data_[((h * 3 + static_cast<std::size_t>(p)) * chunks_ + from) * chunks_ + to];
  }
  std::uint64_t at(std::size_t h, Provenance p, std::size_t from, std::size_t to) const {
    return data_[((h * 3 + static_cast<std::size_t>(p)) * chunks_ + from) * chunks_ + to];
  }

  /// Summed over heads.
  std::uint64_t total(Provenance p, std::size_t from, std::size_t to) const {
    std::uint64_t s = 0;
    for (std::size_t h = 0; h < heads_; ++h) s += at(h, p, from, to);
    return s;
  }

  friend bool operator==(const ChunkCounts&, const ChunkCounts&) = default;

 private:
  std::size_t heads_ = 0;
  std::size_t chunks_ = 0;
  std::vector<std::uint64_t> data_;
};

inline ChunkCounts aggregate_counts(const RoutingTable& table, const ChunkPartition& partition) {
  require(table.length() == partition.length() && table.chunk_count() == partition.size(), ErrorCode::ShapeMismatch,
          "routing table does not match partition");
  ChunkCounts counts(table.heads(), table.chunk_count());
  for (std::size_t h = 0; h < table.heads(); ++h) {
    for (std::size_t i = 0; i < table.length(); ++i) {
      const std::size_t from = partition.chunk_of_token()[i];
      for (const Selection& s : table.selected(h, i)) ++counts.at(h, s.provenance, from, s.chunk);
    }
  }
  return counts;
}

/// Isolated mutual pairs (a, b), a < b: a routes to b, b routes to a, and
/// neither routes to any chunk earlier than itself other than its partner.
/// "Routes to" means some query token of the chunk, on some head, selected
/// the other chunk with Routed provenance.
inline std::vector<std::pair<std::uint32_t, std::uint32_t>> detect_loop_closures(const RoutingTable& table,
                                                                                 const ChunkPartition& partition) {
  const std::size_t C = partition.size();
  std::vector<std::uint8_t> edge(C * C, 0);
  const ChunkCounts counts = aggregate_counts(table, partition);
  for (std::size_t a = 0; a < C; ++a) {
    for (std::size_t b = 0; b < C; ++b) {
      if (a != b && counts.total(Provenance::Routed, a, b) > 0) edge[a * C + b] = 1;
    }
  }
  auto reaches_back = [&](std::size_t x, std::size_t partner) {
    for (std::size_t c = 0; c < x; ++c) {
      if (c != partner && edge[x * C + c]) return true;
    }
    return false;
  };
  std::vector<std::pair<std::uint32_t, std::uint32_t>> loops;
  for (std::size_t a = 0; a < C; ++a) {
    for (std::size_t b = a + 1; b < C; ++b) {
      if (edge[a * C + b] && edge[b * C + a] && !reaches_back(a, b) && !reaches_back(b, a)) {
        loops.emplace_back(static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b));
      }
    }
  }
  return loops;
}

}  // namespace moc
