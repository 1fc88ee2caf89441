#include <gtest/gtest.h>

#include <random>
#include <set>
#include <vector>

#include "moc/moc.hpp"
#include "support.hpp"

namespace {

using namespace moc;
using moc::testing::random_inputs;
using moc::testing::random_table;
using moc::testing::uniform_partition;

RoutingTable select_all(std::size_t H, std::size_t L, std::size_t C) {
  std::vector<std::vector<Selection>> lists(H * L);
  for (auto& list : lists) {
    for (std::uint32_t c = 0; c < C; ++c) list.push_back({c, Provenance::Routed});
  }
  return RoutingTable::from_lists(H, L, C, std::move(lists));
}

TEST(DenseAttention, SingleTokenReturnsValue) {
  const auto x = random_inputs<double>(2, 1, 5, 1);
  const auto out = dense_attention(x);
  EXPECT_EQ(out.o, x.v);
}

TEST(DenseAttention, IdenticalKeysAverageValues) {
  auto x = random_inputs<double>(1, 6, 3, 2);
  for (std::size_t i = 1; i < 6; ++i) {
    for (std::size_t c = 0; c < 3; ++c) x.k(0, i, c) = x.k(0, 0, c);
  }
  const auto out = dense_attention(x);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 6; ++i) mean += x.v(0, i, c) / 6.0;
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.o(0, i, c), mean, 1e-12);
  }
}

TEST(DenseAttention, MatchesNaiveOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto x = random_inputs<double>(2, 7, 4, seed);
    EXPECT_LE(max_relative_error(dense_attention(x).o, oracle::dense(x)), 1e-6);
    const auto xf = random_inputs<float>(2, 7, 4, seed);
    EXPECT_LE(max_relative_error(dense_attention(xf).o, oracle::dense(xf)), 1e-6);
  }
}

TEST(MocAttention, SaturatedEqualsDense) {
  std::mt19937_64 rng(5);
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    const std::size_t H = 1 + rng() % 3, L = 1 + rng() % 90, d = 1 + rng() % 24;
    const auto x = random_inputs<float>(H, L, d, trial);
    const ChunkPartition p = uniform_partition(L, 1 + rng() % 16);
    const auto routed = moc_attention(x, select_all(H, L, p.size()), p);
    EXPECT_LE(max_relative_error(routed.o, dense_attention(x).o), 1e-5);
    EXPECT_EQ(routed.attended_pairs, H * L * L);
  }
}

TEST(MocAttention, SelfChunkOnlyReturnsOwnValue) {
  const auto x = random_inputs<double>(2, 5, 3, 8);
  const ChunkPartition p = uniform_partition(5, 1);
  std::vector<std::vector<Selection>> lists(10);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::uint32_t i = 0; i < 5; ++i) lists[h * 5 + i] = {{i, Provenance::Mandatory}};
  }
  const auto out = moc_attention(x, RoutingTable::from_lists(2, 5, 5, lists), p);
  EXPECT_EQ(out.o, x.v);
}

TEST(MocAttention, MatchesGatherOracleOnRandomTables) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const std::size_t L = 5 + seed * 3;
    const auto x = random_inputs<float>(2, L, 6, seed);
    const ChunkPartition p = uniform_partition(L, 1 + seed % 5);
    const RoutingTable t = random_table(2, L, p.size(), seed);
    EXPECT_LE(max_relative_error(moc_attention(x, t, p).o, oracle::gather_then_softmax(x, t, p)), 1e-6);
  }
}

TEST(MocAttention, EmptySelectionGivesZeroRowAndFlag) {
  const auto x = random_inputs<float>(1, 4, 3, 1);
  const ChunkPartition p = uniform_partition(4, 2);
  std::vector<std::vector<Selection>> lists(4);
  lists[1] = {{0, Provenance::Routed}};
  lists[3] = {{1, Provenance::Mandatory}};
  const auto out = moc_attention(x, RoutingTable::from_lists(1, 4, 2, lists), p);
  EXPECT_EQ(out.empty_rows(), 2u);
  EXPECT_EQ(out.empty_context, (std::vector<std::uint8_t>{1, 0, 1, 0}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(out.o(0, 0, c), 0.0f);
    EXPECT_EQ(out.o(0, 2, c), 0.0f);
  }
  EXPECT_TRUE(out.o.all_finite());
}

TEST(MocAttention, RowsAreConvexCombinations) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto x = random_inputs<double>(2, 30, 5, seed, 2.0);
    for (auto& v : x.v.flat()) v = 1.0;
    const ChunkPartition p = uniform_partition(30, 4);
    const auto out = moc_attention(x, random_table(2, 30, p.size(), seed), p);
    for (double v : out.o.flat()) EXPECT_NEAR(v, 1.0, 1e-6);
  }
}

TEST(MocAttention, LargeScoresStayFinite) {
  AttentionInputs<float> x(1, 6, 4);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      x.q(0, i, c) = 100.0f * static_cast<float>(i % 2 == 0 ? 1 : -1);
      x.k(0, i, c) = i < 3 ? 100.0f : 50.0f;
      x.v(0, i, c) = static_cast<float>(i + c);
    }
  }
  const auto dense = dense_attention(x);
  EXPECT_TRUE(dense.o.all_finite());
  EXPECT_LE(max_relative_error(dense.o, oracle::dense(x)), 1e-6);
  const ChunkPartition p = uniform_partition(6, 2);
  const RoutingTable t = random_table(1, 6, 3, 4);
  const auto routed = moc_attention(x, t, p);
  EXPECT_TRUE(routed.o.all_finite());
  EXPECT_LE(max_relative_error(routed.o, oracle::gather_then_softmax(x, t, p)), 1e-6);
}

TEST(MocAttention, RejectsMismatchedTable) {
  const auto x = random_inputs<float>(1, 4, 3, 1);
  const ChunkPartition p = uniform_partition(4, 2);
  try {
    (void)moc_attention(x, select_all(2, 4, 2), p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(AttentionInputs, RejectsNonFinite) {
  auto x = random_inputs<float>(1, 3, 2, 1);
  x.k(0, 1, 1) = std::numeric_limits<float>::infinity();
  try {
    (void)dense_attention(x);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteInput);
  }
}

TEST(VarLenPack, UniformRoutingIsOneGroupPerHead) {
  const ChunkPartition p = uniform_partition(12, 3);
  const VarLenPack pack = build_varlen_pack(select_all(3, 12, 4), p);
  EXPECT_EQ(pack.group_count(), 3u);
  for (std::size_t h = 0; h < 3; ++h) {
    EXPECT_EQ(pack.group_count(h), 1u);
    EXPECT_EQ(pack.queries(h).size(), 12u);
    EXPECT_EQ(pack.keys(h).size(), 12u);
    EXPECT_EQ(pack.head_of(h), h);
  }
}

TEST(VarLenPack, DistinctSelectionsAreSeparateGroups) {
  const std::size_t L = 7;
  std::vector<std::vector<Selection>> lists(L);
  for (std::uint32_t i = 0; i < L; ++i) {
    for (std::uint32_t c = 0; c < 3; ++c) {
      if ((i + 1) & (1u << c)) lists[i].push_back({c, Provenance::Routed});
    }
  }
  const VarLenPack pack = build_varlen_pack(RoutingTable::from_lists(1, L, L, lists), uniform_partition(L, 1));
  EXPECT_EQ(pack.group_count(0), L);
}

TEST(VarLenPack, SharedModeGroupsBoundedByChunks) {
  const workbench::Scene scene = workbench::gen_scene(workbench::SceneSpec::desk(3, 4));
  const ChunkPartition p = build_chunks(scene.stream, 64);
  RoutingConfig cfg = workbench::RunConfig::desk().routing;
  cfg.mode = RoutingMode::SharedPerChunk;
  const RoutingTable t = build_routing_table(scene.inputs, p, scene.stream, cfg);
  const VarLenPack pack = build_varlen_pack(t, p);
  for (std::size_t h = 0; h < t.heads(); ++h) {
    std::set<std::vector<std::uint32_t>> distinct;
    for (std::size_t i = 0; i < t.length(); ++i) {
      std::vector<std::uint32_t> ids;
      for (const Selection& s : t.selected(h, i)) ids.push_back(s.chunk);
      distinct.insert(ids);
    }
    EXPECT_EQ(pack.group_count(h), distinct.size());
    EXPECT_LE(pack.group_count(h), p.size());
  }
}

TEST(VarLenPack, LayoutInvariantsAndLossless) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t L = 10 + seed;
    const auto x = random_inputs<float>(2, L, 4, seed);
    const ChunkPartition p = uniform_partition(L, 3);
    std::mt19937_64 rng(seed);
    std::vector<std::vector<Selection>> lists(2 * L);
    for (auto& list : lists) {
      const std::uint32_t pattern = static_cast<std::uint32_t>(rng() % 4);
      for (std::uint32_t c = 0; c < p.size(); ++c) {
        if ((c + pattern) % 3 == 0) list.push_back({c, Provenance::Routed});
      }
    }
    const RoutingTable t = RoutingTable::from_lists(2, L, p.size(), lists);
    const VarLenPack pack = build_varlen_pack(t, p);

    std::vector<int> seen(2 * L, 0);
    for (std::size_t g = 0; g < pack.group_count(); ++g) {
      const auto keys = pack.keys(g);
      EXPECT_TRUE(std::is_sorted(keys.begin(), keys.end()));
      EXPECT_EQ(std::adjacent_find(keys.begin(), keys.end()), keys.end());
      for (std::uint32_t q : pack.queries(g)) ++seen[pack.head_of(g) * L + q];
      EXPECT_EQ(pack.cu_k[g + 1] - pack.cu_k[g], keys.size());
    }
    for (int n : seen) EXPECT_EQ(n, 1);

    const auto packed = varlen_attention(x, pack);
    const auto direct = moc_attention(x, t, p);
    EXPECT_EQ(packed.o, direct.o);
    EXPECT_EQ(packed.lse, direct.lse);
    EXPECT_EQ(packed.empty_context, direct.empty_context);
  }
}

TEST(AttentionVjp, ZeroUpstreamGivesZero) {
  const auto x = random_inputs<double>(1, 5, 3, 1);
  const Tensor3<double> up(1, 5, 3);
  const auto g = attention_vjp(x, up);
  for (auto* t : {&g.dq, &g.dk, &g.dv}) {
    for (double v : t->flat()) EXPECT_EQ(v, 0.0);
  }
}

TEST(AttentionVjp, SingleKeyPassesUpstreamToValues) {
  const auto x = random_inputs<double>(1, 1, 4, 2);
  const auto up = random_inputs<double>(1, 1, 4, 3).q;
  const auto g = attention_vjp(x, up);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(g.dv(0, 0, c), up(0, 0, c), 1e-15);
    EXPECT_NEAR(g.dq(0, 0, c), 0.0, 1e-15);
    EXPECT_NEAR(g.dk(0, 0, c), 0.0, 1e-15);
  }
}

TEST(AttentionVjp, DenseMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_inputs<double>(1, 6, 3, seed);
    EXPECT_LE(workbench::gradient_error(x, nullptr, nullptr, 1e-4), 1e-4);
  }
}

TEST(AttentionVjp, SparseMatchesFiniteDifferencesAndIsLocal) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto x = random_inputs<double>(1, 8, 4, seed);
    const ChunkPartition p = uniform_partition(8, 2);
    std::vector<std::vector<Selection>> lists(8);
    for (std::size_t i = 0; i < 8; ++i) {
      lists[i].push_back({static_cast<std::uint32_t>(i / 2), Provenance::Mandatory});
      if (i >= 2) lists[i].push_back({static_cast<std::uint32_t>((i + seed) % (i / 2)), Provenance::Routed});
    }
    const RoutingTable t = RoutingTable::from_lists(1, 8, 4, lists);
    bool zero_outside = false;
    EXPECT_LE(workbench::gradient_error(x, &t, &p, 1e-4, &zero_outside), 1e-4);
    EXPECT_TRUE(zero_outside);

    Tensor3<double> up(1, 8, 4);
    for (auto& u : up.flat()) u = 1.0;
    std::vector<std::vector<Selection>> narrow(8);
    for (std::size_t i = 0; i < 8; ++i) narrow[i] = {{0, Provenance::Routed}};
    const auto g = attention_vjp(x, RoutingTable::from_lists(1, 8, 4, narrow), p, up);
    for (std::size_t j = 2; j < 8; ++j) {
      for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_EQ(g.dk(0, j, c), 0.0);
        EXPECT_EQ(g.dv(0, j, c), 0.0);
      }
    }
  }
}

}  // namespace
