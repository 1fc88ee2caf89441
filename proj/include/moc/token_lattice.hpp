#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moc/errors.hpp"

namespace moc {

enum class Modality : std::uint8_t { Text, Video };
enum class CaptionScope : std::uint8_t { GlobalCaption, ShotCaption, NotCaption };

constexpr const char* to_string(Modality m) { return m == Modality::Text ? "text" : "video"; }

struct Spatial {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  friend bool operator==(const Spatial&, const Spatial&) = default;
};

/// Metadata of one token in the flattened multi-modal stream.
///
/// Global-caption tokens keep the shot_id of the position they are inserted
/// at (so shot monotonicity stays checkable) and are marked global through
/// caption_scope instead of a negative id.
struct TokenMeta {
  std::size_t index = 0;
  Modality modality = Modality::Video;
  std::uint32_t shot_id = 0;
  std::uint32_t frame_id = 0;
  std::optional<Spatial> spatial;
  CaptionScope caption_scope = CaptionScope::NotCaption;

  bool is_global() const noexcept { return caption_scope == CaptionScope::GlobalCaption; }
  friend bool operator==(const TokenMeta&, const TokenMeta&) = default;
};

class TokenStream;
TokenStream tag_boundaries(std::vector<TokenMeta> metas);

/// A validated token stream plus its boundary tables. Each table is strictly
/// increasing, starts at 0, and its implied segments tile [0, L).
///
///  - shot_starts: every change of shot_id.
///  - modality_run_starts: every change of modality.
///  - frame_starts: starts of the finest segments. A segment ends whenever
///    frame_id, shot_id, modality or caption scope changes, so for video it
///    is one frame and for text one caption segment. These are the units the
///    chunker packs.
class TokenStream {
 public:
  std::size_t length() const noexcept { return metas_.size(); }
  std::span<const TokenMeta> metas() const noexcept { return metas_; }
  const TokenMeta& meta(std::size_t i) const { return metas_.at(i); }

  std::span<const std::size_t> frame_starts() const noexcept { return frame_starts_; }
  std::span<const std::size_t> shot_starts() const noexcept { return shot_starts_; }
  std::span<const std::size_t> modality_run_starts() const noexcept { return modality_run_starts_; }

  std::size_t segment_count() const noexcept { return frame_starts_.size(); }
  std::pair<std::size_t, std::size_t> segment(std::size_t s) const {
    const std::size_t end = s + 1 < frame_starts_.size() ? frame_starts_[s + 1] : length();
    return {frame_starts_.at(s), end};
  }

  bool is_frame_boundary(std::size_t b) const {
    return b == length() || std::binary_search(frame_starts_.begin(), frame_starts_.end(), b);
  }

  std::uint32_t shot_count() const noexcept { return metas_.empty() ? 0 : metas_.back().shot_id + 1; }

 private:
  friend TokenStream tag_boundaries(std::vector<TokenMeta> metas);

  std::vector<TokenMeta> metas_;
  std::vector<std::size_t> frame_starts_;
  std::vector<std::size_t> shot_starts_;
  std::vector<std::size_t> modality_run_starts_;
};

/// Validates the stream in one ordered scan and records every boundary.
inline TokenStream tag_boundaries(std::vector<TokenMeta> metas) {
  require(!metas.empty(), ErrorCode::EmptyStream, "token stream has no tokens");

  TokenStream out;
  constexpr std::int64_t kNone = -1;
  std::int64_t last_video_frame = kNone;
  std::int64_t closed_video_frame = kNone;

  for (std::size_t i = 0; i < metas.size(); ++i) {
    const TokenMeta& t = metas[i];
    require(t.index == i, ErrorCode::InvalidStream,
            "token index " + std::to_string(t.index) + " at position " + std::to_string(i));
    require((t.caption_scope != CaptionScope::NotCaption) == (t.modality == Modality::Text),
            ErrorCode::InvalidStream, "caption scope must be set exactly on text tokens");
    require(!(t.modality == Modality::Text && t.spatial.has_value()), ErrorCode::InvalidStream,
            "text tokens carry no spatial position");

    if (i == 0) {
      out.frame_starts_.push_back(0);
      out.shot_starts_.push_back(0);
      out.modality_run_starts_.push_back(0);
    } else {
      const TokenMeta& p = metas[i - 1];
      if (t.shot_id < p.shot_id) {
        fail(ErrorCode::NonMonotonicStream, "shot_id decreases at index " + std::to_string(i));
      }
      const bool new_shot = t.shot_id != p.shot_id;
      const bool new_modality = t.modality != p.modality;
      if (new_shot) {
        out.shot_starts_.push_back(i);
        last_video_frame = kNone;
        closed_video_frame = kNone;
      }
      if (new_modality) out.modality_run_starts_.push_back(i);
      if (new_shot || new_modality || t.frame_id != p.frame_id || t.caption_scope != p.caption_scope) {
        out.frame_starts_.push_back(i);
        if (p.modality == Modality::Video && !new_shot) closed_video_frame = p.frame_id;
      }
    }

    if (t.modality == Modality::Video) {
      if (last_video_frame != kNone && t.frame_id < last_video_frame) {
        fail(ErrorCode::NonMonotonicStream, "frame_id decreases within shot at index " + std::to_string(i));
      }
      const bool starts_segment = out.frame_starts_.back() == i;
      if (starts_segment && t.frame_id == closed_video_frame) {
        fail(ErrorCode::InvalidStream, "video frame " + std::to_string(t.frame_id) + " is not contiguous");
      }
      last_video_frame = t.frame_id;
    }
  }

  out.metas_ = std::move(metas);
  return out;
}

/// Appends caption segments and video frames with consistent metadata.
/// Frame ids increase across the whole stream; text tokens take the id of
/// the next frame to be inserted.
class StreamBuilder {
 public:
  StreamBuilder& global_caption(std::size_t tokens) {
    return text(tokens, current_shot_, CaptionScope::GlobalCaption);
  }

  StreamBuilder& shot_caption(std::uint32_t shot, std::size_t tokens) {
    return text(tokens, shot, CaptionScope::ShotCaption);
  }

  StreamBuilder& video_frame(std::uint32_t shot, std::size_t tokens) {
    current_shot_ = shot;
    const auto width = static_cast<std::uint32_t>(
        std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(tokens))))));
    for (std::size_t t = 0; t < tokens; ++t) {
      TokenMeta m;
      m.index = metas_.size();
      m.modality = Modality::Video;
      m.shot_id = shot;
      m.frame_id = next_frame_;
      m.spatial = Spatial{static_cast<std::uint32_t>(t / width), static_cast<std::uint32_t>(t % width)};
      m.caption_scope = CaptionScope::NotCaption;
      metas_.push_back(m);
    }
    ++next_frame_;
    return *this;
  }

  StreamBuilder& video_frames(std::uint32_t shot, std::size_t frames, std::size_t tokens_per_frame) {
    for (std::size_t f = 0; f < frames; ++f) video_frame(shot, tokens_per_frame);
    return *this;
  }

  const std::vector<TokenMeta>& metas() const noexcept { return metas_; }
  TokenStream build() const { return tag_boundaries(metas_); }

 private:
  StreamBuilder& text(std::size_t tokens, std::uint32_t shot, CaptionScope scope) {
    current_shot_ = shot;
    for (std::size_t t = 0; t < tokens; ++t) {
      TokenMeta m;
      m.index = metas_.size();
      m.modality = Modality::Text;
      m.shot_id = shot;
      m.frame_id = next_frame_;
      m.caption_scope = scope;
      metas_.push_back(m);
    }
    return *this;
  }

  std::vector<TokenMeta> metas_;
  std::uint32_t next_frame_ = 0;
  std::uint32_t current_shot_ = 0;
};

struct Chunk {
  std::uint32_t chunk_id = 0;
  std::size_t start = 0;
  std::size_t end = 0;
  Modality kind = Modality::Video;
  std::uint32_t shot_id = 0;
  bool global = false;  // global caption; belongs to no shot

  std::size_t token_count() const noexcept { return end - start; }
  bool contains(std::size_t i) const noexcept { return start <= i && i < end; }
  friend bool operator==(const Chunk&, const Chunk&) = default;
};

/// Content-aligned chunks tiling [0, L) with an O(1) token -> chunk table.
class ChunkPartition {
 public:
  ChunkPartition() = default;

  /// Accepts any sorted exact tiling of [0, length); content alignment is
  /// checked separately by validate_partition().
  ChunkPartition(std::vector<Chunk> chunks, std::size_t length, std::size_t target_size)
      : chunks_(std::move(chunks)), target_size_(target_size) {
    require(length > 0, ErrorCode::EmptyStream, "partition over empty stream");
    require(!chunks_.empty(), ErrorCode::InvalidPartition, "partition has no chunks");
    chunk_of_token_.resize(length);
    std::size_t cursor = 0;
    for (std::size_t c = 0; c < chunks_.size(); ++c) {
      Chunk& ch = chunks_[c];
      require(ch.start == cursor && ch.start < ch.end && ch.end <= length, ErrorCode::InvalidPartition,
              "chunk " + std::to_string(c) + " does not continue the tiling at " + std::to_string(cursor));
      ch.chunk_id = static_cast<std::uint32_t>(c);
      for (std::size_t i = ch.start; i < ch.end; ++i) chunk_of_token_[i] = static_cast<std::uint32_t>(c);
      cursor = ch.end;
    }
    require(cursor == length, ErrorCode::InvalidPartition, "chunks do not cover the stream");
  }

  std::size_t size() const noexcept { return chunks_.size(); }
  std::size_t length() const noexcept { return chunk_of_token_.size(); }
  std::size_t target_size() const noexcept { return target_size_; }
  std::span<const Chunk> chunks() const noexcept { return chunks_; }
  const Chunk& chunk(std::size_t c) const { return chunks_.at(c); }
  std::span<const std::uint32_t> chunk_of_token() const noexcept { return chunk_of_token_; }

  std::uint32_t chunk_of(std::size_t token_index) const {
    require(token_index < chunk_of_token_.size(), ErrorCode::IndexOutOfRange,
            "token " + std::to_string(token_index) + " outside stream of length " +
                std::to_string(chunk_of_token_.size()));
    return chunk_of_token_[token_index];
  }

  friend bool operator==(const ChunkPartition&, const ChunkPartition&) = default;

 private:
  std::vector<Chunk> chunks_;
  std::vector<std::uint32_t> chunk_of_token_;
  std::size_t target_size_ = 1;
};

inline std::uint32_t chunk_lookup(const ChunkPartition& partition, std::size_t token_index) {
  return partition.chunk_of(token_index);
}

/// Greedy frame-aligned packing. Within each (shot, modality) run whole
/// frames are accumulated until the next one would exceed target_size; a
/// frame larger than target_size forms its own chunk. Every caption segment
/// is a chunk of its own.
inline ChunkPartition build_chunks(const TokenStream& stream, std::size_t target_size) {
  require(target_size >= 1, ErrorCode::InvalidArgument, "chunk target size must be positive");

  std::vector<Chunk> chunks;
  std::optional<Chunk> open;
  auto flush = [&] {
    if (open) chunks.push_back(*open);
    open.reset();
  };

  for (std::size_t s = 0; s < stream.segment_count(); ++s) {
    const auto [begin, end] = stream.segment(s);
    const TokenMeta& head = stream.meta(begin);
    const std::size_t units = end - begin;

    if (head.modality == Modality::Text) {
      flush();
      chunks.push_back(Chunk{0, begin, end, Modality::Text, head.shot_id, head.is_global()});
      continue;
    }
    const bool extends = open && open->kind == Modality::Video && open->shot_id == head.shot_id &&
                         open->end == begin && open->token_count() + units <= target_size;
    if (extends) {
      open->end = end;
    } else {
      flush();
      open = Chunk{0, begin, end, Modality::Video, head.shot_id, false};
    }
  }
  flush();
  return ChunkPartition(std::move(chunks), stream.length(), target_size);
}

/// Checks tiling, homogeneity, frame alignment and the packing bound.
/// Returns an empty string when valid, otherwise the first violation.
inline std::string validate_partition(const TokenStream& stream, const ChunkPartition& partition) {
  if (partition.length() != stream.length()) return "partition length differs from stream length";
  std::size_t max_frame = 0;
  for (std::size_t s = 0; s < stream.segment_count(); ++s) {
    const auto [b, e] = stream.segment(s);
    if (stream.meta(b).modality == Modality::Video) max_frame = std::max(max_frame, e - b);
  }
  std::size_t cursor = 0;
  for (const Chunk& ch : partition.chunks()) {
    const std::string id = "chunk " + std::to_string(ch.chunk_id);
    if (ch.start != cursor || ch.start >= ch.end) return id + " breaks the tiling";
    const TokenMeta& first = stream.meta(ch.start);
    for (std::size_t i = ch.start; i < ch.end; ++i) {
      const TokenMeta& t = stream.meta(i);
      if (t.modality != first.modality || t.shot_id != first.shot_id || t.is_global() != first.is_global()) {
        return id + " is not homogeneous at token " + std::to_string(i);
      }
      if (partition.chunk_of_token()[i] != ch.chunk_id) return id + " disagrees with chunk_of_token";
    }
    if (ch.kind != first.modality || ch.shot_id != first.shot_id || ch.global != first.is_global()) {
      return id + " metadata disagrees with its tokens";
    }
    if (ch.kind == Modality::Video) {
      if (!stream.is_frame_boundary(ch.start) || !stream.is_frame_boundary(ch.end)) {
        return id + " is not frame aligned";
      }
      if (ch.token_count() > partition.target_size() + (max_frame > 0 ? max_frame - 1 : 0)) {
        return id + " exceeds the packing bound";
      }
    }
    cursor = ch.end;
  }
  if (cursor != stream.length()) return "chunks do not cover the stream";
  return {};
}

}  // namespace moc
