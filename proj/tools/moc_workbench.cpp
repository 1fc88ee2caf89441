// Command-line workbench: scene generation, verification, routing statistics,
// scaling benchmarks, chunk-size schedules and cost arithmetic.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moc/moc.hpp"

namespace {

using namespace moc;
using namespace moc::workbench;

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;

struct RoutingFlags {
  std::optional<std::size_t> k;
  std::optional<std::size_t> chunk;
  bool causal = false;
  bool no_forced = false;
  std::optional<double> drop_pmax;
  std::optional<double> drop_lambda;
  std::uint64_t drop_seed = 0;
  bool shared = false;

  void attach(CLI::App* cmd, bool causal_default) {
    cmd->add_option("--k", k, "routed chunks per query (default 5)");
    cmd->add_option("--chunk", chunk, "target tokens per video chunk (default 64)");
    causal = causal_default;
    cmd->add_flag("--causal,!--no-causal", causal, "mask routing to strictly earlier chunks");
    cmd->add_flag("--no-forced", no_forced, "disable forced cross-modal / intra-shot / self links");
    cmd->add_option("--drop-pmax", drop_pmax, "enable drop-off with p_drop ~ U(0, X)");
    cmd->add_option("--drop-lambda", drop_lambda, "enable drop-in with Poisson(Y) extra chunks");
    cmd->add_option("--drop-seed", drop_seed, "seed for drop perturbations");
    cmd->add_flag("--shared-routing", shared, "route once per chunk from its mean query");
  }

  RunConfig resolve() const {
    RunConfig c = RunConfig::desk();
    c.routing.causal = causal;
    if (k) c.routing.k = *k;
    if (chunk) c.chunk_target = *chunk;
    if (no_forced) {
      c.routing.force_cross_modal = c.routing.force_intra_shot = c.routing.force_self_chunk = false;
    }
    if (drop_pmax || drop_lambda) {
      c.routing.drop = DropConfig{drop_pmax.value_or(0.0), drop_lambda.value_or(0.0), drop_seed, true};
    }
    if (shared) c.routing.mode = RoutingMode::SharedPerChunk;
    c.routing.validate();
    return c;
  }
};

SceneSpec scene_from(const std::string& path) { return path.empty() ? SceneSpec::desk() : load_scene_spec(path); }

/// "1,2,4,8" lists the counts; "A..B" doubles from A up to B.
std::vector<std::size_t> parse_shot_counts(const std::string& text) {
  std::vector<std::size_t> out;
  if (const auto dots = text.find(".."); dots != std::string::npos) {
    const std::size_t lo = std::stoul(text.substr(0, dots));
    const std::size_t hi = std::stoul(text.substr(dots + 2));
    require(lo >= 1 && lo <= hi, ErrorCode::InvalidArgument, "shot range must satisfy 1 <= A <= B");
    for (std::size_t s = lo; s <= hi; s *= 2) out.push_back(s);
    if (out.back() != hi) out.push_back(hi);
    return out;
  }
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoul(item));
  return out;
}

void write_tokens_csv(std::ostream& os, const TokenStream& stream) {
  os << "index,modality,shot_id,frame_id,row,col,caption_scope\n";
  for (const TokenMeta& t : stream.metas()) {
    const char* scope = t.caption_scope == CaptionScope::GlobalCaption ? "global"
                        : t.caption_scope == CaptionScope::ShotCaption ? "shot"
                                                                       : "none";
    os << t.index << ',' << to_string(t.modality) << ',' << t.shot_id << ',' << t.frame_id << ',';
    if (t.spatial) {
      os << t.spatial->row << ',' << t.spatial->col;
    } else {
      os << ',';
    }
    os << ',' << scope << '\n';
  }
}

void write_chunks_csv(std::ostream& os, const ChunkPartition& p) {
  os << "chunk_id,start,end,kind,shot_id,global,token_count\n";
  for (const Chunk& c : p.chunks()) {
    os << c.chunk_id << ',' << c.start << ',' << c.end << ',' << to_string(c.kind) << ',' << c.shot_id << ','
       << (c.global ? 1 : 0) << ',' << c.token_count() << '\n';
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  require(os.good(), ErrorCode::InvalidArgument, "cannot write " + path.string());
  return os;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-contexts routing workbench"};
  app.require_subcommand(1);

  std::string spec_path;
  std::string out_path;

  auto* gen = app.add_subcommand("gen", "generate a scene and write its token and chunk tables");
  std::size_t gen_chunk = 64;
  gen->add_option("--spec", spec_path, "scene spec (JSON)")->required();
  gen->add_option("--out", out_path, "output directory")->required();
  gen->add_option("--chunk", gen_chunk, "target tokens per video chunk");

  auto* verify = app.add_subcommand("verify", "run the oracle checks on a scene");
  RoutingFlags verify_flags;
  verify->add_option("--spec", spec_path, "scene spec (JSON); default desk scene");
  verify_flags.attach(verify, false);

  auto* route = app.add_subcommand("route", "emit chunk routing counts, loop closures and sparsity");
  RoutingFlags route_flags;
  route->add_option("--spec", spec_path, "scene spec (JSON)")->required();
  route->add_option("--out", out_path, "routing-count CSV")->required();
  route_flags.attach(route, true);
  bool outer = false;
  std::size_t outer_M = 2;
  route->add_flag("--outer,!--no-outer", outer, "curate the context around the last shot before routing");
  route->add_option("--outer-M", outer_M, "earlier shots kept by the outer router (default 2)");

  auto* bench = app.add_subcommand("bench", "time dense vs routed attention across shot counts");
  RoutingFlags bench_flags;
  std::string shots_text = "1..16";
  std::size_t reps = 5;
  bench->add_option("--shots", shots_text, "shot counts: A..B (doubling) or a comma list");
  bench->add_option("--out", out_path, "benchmark CSV")->required();
  bench->add_option("--reps", reps, "timed repetitions (>= 5)");
  bench_flags.attach(bench, true);

  auto* schedule = app.add_subcommand("schedule", "print a chunk-size schedule");
  std::string preset;
  std::vector<std::size_t> sizes;
  std::size_t schedule_k = 5;
  schedule->add_option("--preset", preset, "paper-multishot | paper-singleshot | custom")->required();
  schedule->add_option("--sizes", sizes, "custom: strictly decreasing chunk sizes")->delimiter(',');
  schedule->add_option("--k", schedule_k, "custom: top-k for every step");

  auto* cost = app.add_subcommand("cost", "evaluate the FLOPs model");
  CostParams params{180000, 36, 5, 5120, 128};
  cost->add_option("--L", params.L, "sequence length");
  cost->add_option("--C", params.C, "chunk count");
  cost->add_option("--k", params.k, "routed chunks per query");
  cost->add_option("--mbar", params.m_bar, "mean routed chunk length");
  cost->add_option("--d", params.d, "head dimension");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      const SceneSpec spec = load_scene_spec(spec_path);
      const Scene scene = gen_scene(spec);
      const ChunkPartition partition = build_chunks(scene.stream, gen_chunk);
      const std::filesystem::path dir(out_path);
      std::filesystem::create_directories(dir);
      auto tokens = open_out(dir / "tokens.csv");
      write_tokens_csv(tokens, scene.stream);
      auto chunks = open_out(dir / "chunks.csv");
      write_chunks_csv(chunks, partition);
      auto summary = open_out(dir / "scene.json");
      nlohmann::json j{{"spec", spec}, {"L", scene.stream.length()}, {"chunks", partition.size()},
                       {"chunk_target", gen_chunk}};
      summary << j.dump(2) << '\n';
      std::cout << "L=" << scene.stream.length() << " chunks=" << partition.size() << " -> " << dir.string() << '\n';
    } else if (*verify) {
      const Scene scene = gen_scene(scene_from(spec_path));
      const VerifyReport report = cmd_verify(scene, verify_flags.resolve());
      write_verify_report(std::cout, report);
      return report.passed() ? kExitOk : kExitVerifyFailed;
    } else if (*route) {
      const RunConfig run = route_flags.resolve();
      Scene scene = gen_scene(load_scene_spec(spec_path));
      if (outer) scene = curate_scene(scene, outer_M, run.chunk_target);
      const RouteReport report = cmd_route(scene, run);
      auto os = open_out(out_path);
      write_routing_csv(os, report.counts);
      write_route_summary(std::cout, report);
    } else if (*bench) {
      BenchConfig cfg;
      cfg.shot_counts = parse_shot_counts(shots_text);
      cfg.run = bench_flags.resolve();
      cfg.reps = reps;
      const BenchResult result = cmd_bench(cfg);
      auto os = open_out(out_path);
      write_bench_csv(os, result);
      std::cout << "slope_dense=" << result.slope_dense << " slope_moc=" << result.slope_moc << '\n';
    } else if (*schedule) {
      std::cout << make_schedule(preset, sizes, schedule_k).to_json().dump(2) << '\n';
    } else if (*cost) {
      std::cout << cost_report(params).to_record();
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    switch (e.code()) {
      case ErrorCode::SpecInvalid:
      case ErrorCode::UnknownPreset:
      case ErrorCode::InvalidArgument:
      case ErrorCode::ParseError:
        return kExitUsage;
      default:
        return kExitVerifyFailed;
    }
  } catch (const std::logic_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}
