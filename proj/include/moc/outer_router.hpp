#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moc/errors.hpp"
#include "moc/inputs.hpp"
#include "moc/router.hpp"
#include "moc/tensor.hpp"
#include "moc/token_lattice.hpp"

namespace moc {

struct TokenRange {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - start; }
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

/// Shot-sized blocks for coarse pre-selection. The blocks, the mandatory
/// ranges (global caption) and the optional query block together tile the
/// stream, and each is a union of whole inner chunks.
struct OuterPartition {
  std::vector<TokenRange> blocks;
  std::vector<std::uint32_t> block_shot;
  std::vector<TokenRange> mandatory;
  std::optional<TokenRange> query_block;
  std::size_t length = 0;

  std::size_t size() const noexcept { return blocks.size(); }
};

/// One block per shot of the stream, excluding `query_shot` which becomes the
/// query block. Global caption chunks become mandatory ranges.
inline OuterPartition shot_blocks(const TokenStream& stream, const ChunkPartition& partition,
                                  std::optional<std::uint32_t> query_shot = std::nullopt) {
  require(stream.length() == partition.length(), ErrorCode::ShapeMismatch, "stream and partition lengths differ");
  OuterPartition out;
  out.length = stream.length();

  auto extend = [](std::vector<TokenRange>& ranges, const Chunk& ch) {
    if (!ranges.empty() && ranges.back().end == ch.start) {
      ranges.back().end = ch.end;
    } else {
      ranges.push_back({ch.start, ch.end});
    }
  };

  bool block_open = false;
  std::uint32_t open_shot = 0;
  for (const Chunk& ch : partition.chunks()) {
    if (ch.global) {
      extend(out.mandatory, ch);
      block_open = false;
      continue;
    }
    if (query_shot && ch.shot_id == *query_shot) {
      require(!out.query_block || out.query_block->end == ch.start, ErrorCode::InvalidPartition,
              "query shot is not contiguous");
      if (out.query_block) {
        out.query_block->end = ch.end;
      } else {
        out.query_block = TokenRange{ch.start, ch.end};
      }
      block_open = false;
      continue;
    }
    if (block_open && open_shot == ch.shot_id && out.blocks.back().end == ch.start) {
      out.blocks.back().end = ch.end;
    } else {
      require(std::find(out.block_shot.begin(), out.block_shot.end(), ch.shot_id) == out.block_shot.end(),
              ErrorCode::InvalidPartition, "shot " + std::to_string(ch.shot_id) + " is not contiguous");
      out.blocks.push_back({ch.start, ch.end});
      out.block_shot.push_back(ch.shot_id);
      open_shot = ch.shot_id;
      block_open = true;
    }
  }
  return out;
}

struct OuterSelection {
  std::vector<double> scores;           // per block
  std::vector<std::uint32_t> selected;  // block ids, sorted
  std::vector<TokenRange> keep;         // token ranges of the curated context, sorted
};

/// Scores every block by <mean query-block feature, mean block key> summed
/// over heads and keeps the top M, ties toward the lower block id. Mandatory
/// ranges and the query block are always kept.
template <typename T>
OuterSelection outer_route(const Tensor3<T>& context_keys, const Tensor3<T>& query_block_features,
                           const OuterPartition& blocks, std::size_t M) {
  require(M >= 1, ErrorCode::InvalidArgument, "M must be at least 1");
  require(context_keys.length() == blocks.length, ErrorCode::ShapeMismatch, "context keys do not cover the partition");
  require(context_keys.heads() == query_block_features.heads() && context_keys.dim() == query_block_features.dim(),
          ErrorCode::ShapeMismatch, "context and query-block features differ in heads or dim");
  require(query_block_features.length() >= 1, ErrorCode::ShapeMismatch, "query block is empty");

  using Acc = accum_t<T>;
  const std::size_t H = context_keys.heads();
  const std::size_t d = context_keys.dim();
  auto mean_rows = [&](const Tensor3<T>& x, std::size_t h, TokenRange r) {
    std::vector<Acc> m(d, Acc{0});
    for (std::size_t i = r.start; i < r.end; ++i) {
      const auto row = x.row(h, i);
      for (std::size_t c = 0; c < d; ++c) m[c] += static_cast<Acc>(row[c]);
    }
    for (auto& x_c : m) x_c /= static_cast<Acc>(r.size());
    return m;
  };

  OuterSelection out;
  out.scores.assign(blocks.size(), 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    const auto xg = mean_rows(query_block_features, h, {0, query_block_features.length()});
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      const auto phi = mean_rows(context_keys, h, blocks.blocks[j]);
      Acc s = 0;
      for (std::size_t c = 0; c < d; ++c) s += xg[c] * phi[c];
      out.scores[j] += static_cast<double>(s);
    }
  }

  std::vector<ScoredChunk> scored;
  for (std::size_t j = 0; j < blocks.size(); ++j) scored.push_back({static_cast<std::uint32_t>(j), out.scores[j]});
  if (!scored.empty()) out.selected = topk_select(scored, M);

  out.keep = blocks.mandatory;
  for (std::uint32_t j : out.selected) out.keep.push_back(blocks.blocks[j]);
  if (blocks.query_block) out.keep.push_back(*blocks.query_block);
  std::sort(out.keep.begin(), out.keep.end(), [](const TokenRange& a, const TokenRange& b) { return a.start < b.start; });
  return out;
}

/// Reduced stream and partition restricted to the kept ranges, with index
/// maps in both directions (old_to_new is -1 for dropped tokens).
struct CuratedContext {
  TokenStream stream;
  ChunkPartition partition;
  std::vector<std::uint32_t> new_to_old;
  std::vector<std::int64_t> old_to_new;
};

inline CuratedContext curate_context(const TokenStream& stream, const ChunkPartition& partition,
                                     const OuterSelection& selection) {
  require(stream.length() == partition.length(), ErrorCode::ShapeMismatch, "stream and partition lengths differ");
  require(!selection.keep.empty(), ErrorCode::InvalidArgument, "curated context would be empty");

  std::vector<std::int64_t> old_to_new(stream.length(), -1);
  std::vector<std::uint32_t> new_to_old;
  std::vector<TokenMeta> metas;
  std::size_t previous_end = 0;
  for (const TokenRange& r : selection.keep) {
    require(r.start >= previous_end && r.end <= stream.length() && r.start < r.end, ErrorCode::InvalidArgument,
            "kept ranges overlap or fall outside the stream");
    for (std::size_t i = r.start; i < r.end; ++i) {
      old_to_new[i] = static_cast<std::int64_t>(new_to_old.size());
      TokenMeta m = stream.meta(i);
      m.index = new_to_old.size();
      metas.push_back(m);
      new_to_old.push_back(static_cast<std::uint32_t>(i));
    }
    previous_end = r.end;
  }

  std::vector<Chunk> chunks;
  for (const Chunk& ch : partition.chunks()) {
    const std::int64_t first = old_to_new[ch.start];
    const std::int64_t last = old_to_new[ch.end - 1];
    if (first < 0 && last < 0) continue;
    require(first >= 0 && last >= 0 && last - first == static_cast<std::int64_t>(ch.token_count()) - 1,
            ErrorCode::InvalidPartition, "kept ranges split chunk " + std::to_string(ch.chunk_id));
    Chunk c = ch;
    c.start = static_cast<std::size_t>(first);
    c.end = static_cast<std::size_t>(last) + 1;
    chunks.push_back(c);
  }

  CuratedContext out{tag_boundaries(std::move(metas)), {}, std::move(new_to_old), std::move(old_to_new)};
  out.partition = ChunkPartition(std::move(chunks), out.stream.length(), partition.target_size());
  return out;
}

/// Rows of `x` at the curated positions.
template <typename T>
Tensor3<T> gather_rows(const Tensor3<T>& x, std::span<const std::uint32_t> rows) {
  Tensor3<T> out(x.heads(), rows.size(), x.dim());
  for (std::size_t h = 0; h < x.heads(); ++h) {
    for (std::size_t n = 0; n < rows.size(); ++n) {
      const auto src = x.row(h, rows[n]);
      std::copy(src.begin(), src.end(), out.row(h, n).begin());
    }
  }
  return out;
}

template <typename T>
AttentionInputs<T> gather_inputs(const AttentionInputs<T>& inputs, std::span<const std::uint32_t> rows) {
  return {gather_rows(inputs.q, rows), gather_rows(inputs.k, rows), gather_rows(inputs.v, rows)};
}

}  // namespace moc
