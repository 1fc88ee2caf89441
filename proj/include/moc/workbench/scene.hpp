#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "moc/errors.hpp"
#include "moc/inputs.hpp"
#include "moc/rng.hpp"
#include "moc/tensor.hpp"
#include "moc/token_lattice.hpp"

namespace moc::workbench {

struct ShotSpec {
  std::size_t n_frames = 4;
  std::size_t tokens_per_frame = 64;
  std::size_t caption_tokens = 2;
};

/// Synthetic scene description. Each shot has a cluster centroid per head;
/// frames drift around it and tokens add noise. A recall pair (s, t) makes
/// shot t reuse shot s's centroid, planting a long-range match.
struct SceneSpec {
  std::vector<ShotSpec> shots;
  std::size_t global_caption_tokens = 16;
  std::size_t d = 32;
  std::size_t H = 4;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> recall_pairs;
  bool caption_before_video = true;
  double centroid_norm = 0.0;  // 0 selects 1.5 * d^(1/4)
  double frame_drift = 0.15;   // relative to centroid_norm
  double token_noise = 0.3;    // relative to centroid_norm

  /// 8 shots x 4 frames x 64 tokens, 2 caption tokens per shot and 16 global
  /// caption tokens (2080 tokens), d = 32, H = 4.
  static SceneSpec desk(std::size_t shot_count = 8, std::uint64_t seed = 0) {
    SceneSpec s;
    s.shots.assign(shot_count, ShotSpec{});
    s.seed = seed;
    return s;
  }

  /// Single-frame shots with no text, paired (0,1), (2,3), ... so that each
  /// pair of chunks is mutually nearest.
  static SceneSpec mutual_pairs(std::size_t pairs, std::size_t tokens_per_chunk = 16, std::uint64_t seed = 0) {
    SceneSpec s;
    s.shots.assign(2 * pairs, ShotSpec{1, tokens_per_chunk, 0});
    s.global_caption_tokens = 0;
    s.seed = seed;
    for (std::uint32_t p = 0; p < pairs; ++p) s.recall_pairs.emplace_back(2 * p, 2 * p + 1);
    return s;
  }

  double resolved_norm() const {
    return centroid_norm > 0.0 ? centroid_norm : 1.5 * std::pow(static_cast<double>(d), 0.25);
  }

  std::size_t token_count() const {
    std::size_t n = global_caption_tokens;
    for (const ShotSpec& s : shots) n += s.caption_tokens + s.n_frames * s.tokens_per_frame;
    return n;
  }

  void validate() const {
    require(!shots.empty(), ErrorCode::SpecInvalid, "scene has no shots");
    require(d >= 1 && H >= 1, ErrorCode::SpecInvalid, "d and H must be positive");
    require(token_count() >= 1, ErrorCode::SpecInvalid, "scene has no tokens");
    for (std::size_t s = 0; s < shots.size(); ++s) {
      const ShotSpec& shot = shots[s];
      require(shot.caption_tokens + shot.n_frames * shot.tokens_per_frame >= 1, ErrorCode::SpecInvalid,
              "shot " + std::to_string(s) + " has no tokens");
    }
    for (const auto& [src, dst] : recall_pairs) {
      require(src < dst && dst < shots.size(), ErrorCode::SpecInvalid,
              "recall pair (" + std::to_string(src) + ", " + std::to_string(dst) + ") is invalid");
    }
    require(frame_drift >= 0.0 && token_noise >= 0.0 && centroid_norm >= 0.0, ErrorCode::SpecInvalid,
            "noise scales must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const ShotSpec& s) {
  j = {{"n_frames", s.n_frames}, {"tokens_per_frame", s.tokens_per_frame}, {"caption_tokens", s.caption_tokens}};
}

inline void from_json(const nlohmann::json& j, ShotSpec& s) {
  s.n_frames = j.at("n_frames").get<std::size_t>();
  s.tokens_per_frame = j.at("tokens_per_frame").get<std::size_t>();
  s.caption_tokens = j.value("caption_tokens", std::size_t{0});
}

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = {{"shots", s.shots},
       {"global_caption_tokens", s.global_caption_tokens},
       {"d", s.d},
       {"H", s.H},
       {"seed", s.seed},
       {"recall_pairs", s.recall_pairs},
       {"caption_before_video", s.caption_before_video},
       {"centroid_norm", s.centroid_norm},
       {"frame_drift", s.frame_drift},
       {"token_noise", s.token_noise}};
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
  SceneSpec def;
  s.shots = j.at("shots").get<std::vector<ShotSpec>>();
  s.global_caption_tokens = j.value("global_caption_tokens", std::size_t{0});
  s.d = j.value("d", def.d);
  s.H = j.value("H", def.H);
  s.seed = j.value("seed", std::uint64_t{0});
  s.recall_pairs = j.value("recall_pairs", decltype(s.recall_pairs){});
  s.caption_before_video = j.value("caption_before_video", true);
  s.centroid_norm = j.value("centroid_norm", def.centroid_norm);
  s.frame_drift = j.value("frame_drift", def.frame_drift);
  s.token_noise = j.value("token_noise", def.token_noise);
}

inline SceneSpec parse_scene_spec(const std::string& text) {
  SceneSpec spec;
  try {
    spec = nlohmann::json::parse(text).get<SceneSpec>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SpecInvalid, std::string("cannot parse scene spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

inline SceneSpec load_scene_spec(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::SpecInvalid, "cannot open scene spec " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scene_spec(buf.str());
}

struct Scene {
  SceneSpec spec;
  TokenStream stream;
  AttentionInputs<float> inputs;
  Tensor3<double> shot_centroids;  // [H, shots, d]
};

/// Flattened layout: global caption, then per shot its caption and frames
/// (caption first unless caption_before_video is false).
inline TokenStream scene_stream(const SceneSpec& spec) {
  spec.validate();
  StreamBuilder b;
  if (spec.global_caption_tokens > 0) b.global_caption(spec.global_caption_tokens);
  for (std::uint32_t s = 0; s < spec.shots.size(); ++s) {
    const ShotSpec& shot = spec.shots[s];
    if (spec.caption_before_video && shot.caption_tokens > 0) b.shot_caption(s, shot.caption_tokens);
    if (shot.tokens_per_frame > 0) b.video_frames(s, shot.n_frames, shot.tokens_per_frame);
    if (!spec.caption_before_video && shot.caption_tokens > 0) b.shot_caption(s, shot.caption_tokens);
  }
  return b.build();
}

/// Deterministic given the spec: every random draw comes from a counter RNG
/// keyed by (seed, head, purpose).
inline Scene gen_scene(const SceneSpec& spec) {
  spec.validate();
  Scene scene{spec, scene_stream(spec), AttentionInputs<float>(spec.H, spec.token_count(), spec.d),
              Tensor3<double>(spec.H, spec.shots.size(), spec.d)};
  const std::size_t d = spec.d;
  const double norm = spec.resolved_norm();
  const double drift = spec.frame_drift * norm / std::sqrt(static_cast<double>(d));
  const double noise = spec.token_noise * norm / std::sqrt(static_cast<double>(d));
  // One distribution per stream: normal_distribution caches its second
  // variate, which must not leak between generators.
  enum Purpose : std::uint64_t { kCentroid = 1, kCaption, kFrame, kQuery, kKey, kValue };

  for (std::size_t h = 0; h < spec.H; ++h) {
    CounterRng centroid_rng = CounterRng::keyed(spec.seed, h, 0, kCentroid);
    std::normal_distribution<double> normal;
    for (std::size_t s = 0; s < spec.shots.size(); ++s) {
      std::vector<double> g(d);
      double len = 0.0;
      for (auto& x : g) {
        x = normal(centroid_rng);
        len += x * x;
      }
      len = std::sqrt(len);
      for (std::size_t c = 0; c < d; ++c) scene.shot_centroids(h, s, c) = g[c] / len * norm;
    }
    for (const auto& [src, dst] : spec.recall_pairs) {
      for (std::size_t c = 0; c < d; ++c) scene.shot_centroids(h, dst, c) = scene.shot_centroids(h, src, c);
    }

    CounterRng caption_rng = CounterRng::keyed(spec.seed, h, 0, kCaption);
    CounterRng frame_rng = CounterRng::keyed(spec.seed, h, 0, kFrame);
    CounterRng q_rng = CounterRng::keyed(spec.seed, h, 0, kQuery);
    CounterRng k_rng = CounterRng::keyed(spec.seed, h, 0, kKey);
    CounterRng v_rng = CounterRng::keyed(spec.seed, h, 0, kValue);
    std::normal_distribution<double> caption_normal, frame_normal, q_normal, k_normal, v_normal;
    std::vector<double> center(d);

    const TokenStream& stream = scene.stream;
    for (std::size_t seg = 0; seg < stream.segment_count(); ++seg) {
      const auto [begin, end] = stream.segment(seg);
      const TokenMeta& head = stream.meta(begin);
      if (head.modality == Modality::Text) {
        double len = 0.0;
        for (auto& x : center) {
          x = caption_normal(caption_rng);
          len += x * x;
        }
        for (auto& x : center) x = x / std::sqrt(len) * norm;
      } else {
        for (std::size_t c = 0; c < d; ++c) {
          center[c] = scene.shot_centroids(h, head.shot_id, c) + drift * frame_normal(frame_rng);
        }
      }
      for (std::size_t i = begin; i < end; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
          scene.inputs.q(h, i, c) = static_cast<float>(center[c] + noise * q_normal(q_rng));
          scene.inputs.k(h, i, c) = static_cast<float>(center[c] + noise * k_normal(k_rng));
          scene.inputs.v(h, i, c) = static_cast<float>(v_normal(v_rng));
        }
      }
    }
  }
  return scene;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    ab += a[c] * b[c];
    aa += a[c] * a[c];
    bb += b[c] * b[c];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace moc::workbench
