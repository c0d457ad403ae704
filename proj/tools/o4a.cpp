// Command-line front end: map generation, data collection, staged training,
// single-episode navigation, benchmarking and report inspection.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "o4a/eval.hpp"
#include "o4a/graph.hpp"
#include "o4a/maps.hpp"
#include "o4a/models.hpp"
#include "o4a/nav.hpp"
#include "o4a/parallel.hpp"
#include "o4a/training.hpp"
#include "o4a/trajectory_io.hpp"

namespace fs = std::filesystem;
using namespace o4a;

namespace {

struct SimSettings {
  int rays = kDefaultRays;
  double noise_sigma = 0.0;
  double cell_size = kDefaultCellSize;

  static SimSettings read(const KeyValueFile& kv) {
    SimSettings s;
    s.rays = static_cast<int>(kv.get_size_or("sim.rays", static_cast<std::size_t>(s.rays)));
    s.noise_sigma = kv.get_double_or("sim.noise_sigma", s.noise_sigma);
    s.cell_size = kv.get_double_or("sim.cell_size", s.cell_size);
    if (s.rays < 1) throw std::invalid_argument("sim.rays must be positive");
    if (!(s.noise_sigma >= 0.0)) throw std::invalid_argument("sim.noise_sigma must be non-negative");
    return s;
  }
};

KeyValueFile load_config(const std::string& path) {
  if (path.empty()) return {};
  if (!fs::exists(path)) throw std::runtime_error("config file not found: " + path);
  return KeyValueFile::load(path);
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw std::runtime_error("missing " + what + ": " + p.string());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

template <class Fn>
void write_file(const fs::path& p, Fn&& fn) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  fn(out);
}

std::vector<Trajectory> load_trajectories(const std::vector<std::string>& paths, double val_fraction) {
  std::vector<Trajectory> out;
  for (const auto& p : paths) {
    require_exists(p, "trajectory file");
    auto f = load_trajectory(p);
    if (!fs::exists(trajectory_meta_path(p))) mark_split(f.trajectory, val_fraction);
    out.push_back(std::move(f.trajectory));
  }
  return out;
}

fs::path graph_path(const fs::path& dir, const std::string& env) { return dir / ("graph_" + env + ".txt"); }

// ---------------------------------------------------------------- train stages

enum class Stage { Local = 0, Graph = 1, Forward = 2, Geodesic = 3 };

Stage stage_from_name(const std::string& s) {
  if (s == "local") return Stage::Local;
  if (s == "graph") return Stage::Graph;
  if (s == "forward") return Stage::Forward;
  if (s == "geodesic") return Stage::Geodesic;
  throw std::invalid_argument("unknown stage '" + s + "' (expected local, graph, forward or geodesic)");
}

void run_train(const KeyValueFile& kv, const std::vector<std::string>& data, const fs::path& out, Stage from,
               std::size_t threads) {
  TrainConfig cfg = TrainConfig::read(kv);
  cfg.threads = threads;
  const NavConfig nav = NavConfig::read(kv);
  auto trajs = load_trajectories(data, cfg.val_fraction);
  if (trajs.empty()) throw std::invalid_argument("train: no trajectory files given");
  cfg.shape.obs_dim = static_cast<int>(trajs.front().obs_dim());
  fs::create_directories(out);
  {
    KeyValueFile snapshot = kv;
    cfg.write(snapshot);
    nav.write(snapshot);
    snapshot.save(out / "run_config.txt");
  }
  const auto by_env = group_by_env(trajs);

  MlpParams backbone, ik;
  if (from <= Stage::Local) {
    auto local = train_local(trajs, cfg, nav, log_line);
    backbone = local.backbone;
    ik = local.ik_head;
    save_model_file(out / "backbone.o4am", backbone, ModuleTag::Backbone);
    save_model_file(out / "inverse_kinematics.o4am", ik, ModuleTag::InverseKinematics);
    write_file(out / "metrics_local.csv", [&](std::ostream& o) { local.log.write_csv(o); });
  } else {
    require_exists(out / "backbone.o4am", "backbone weights (run --stage local first)");
    require_exists(out / "inverse_kinematics.o4am", "inverse kinematics weights (run --stage local first)");
    backbone = load_model_file(out / "backbone.o4am", ModuleTag::Backbone).params;
    ik = load_model_file(out / "inverse_kinematics.o4am", ModuleTag::InverseKinematics).params;
  }

  std::map<std::string, TransitionGraph> graphs;
  if (from <= Stage::Graph) {
    for (const auto& [env, ts] : by_env) {
      GraphBuildStats stats;
      auto g = build_graph(ts, backbone, ik, graph_options(cfg), &stats);
      log_line("graph[" + env + "] nodes " + std::to_string(g.node_count()) + " edges " +
               std::to_string(g.edge_count()) + " closed " + std::to_string(stats.closed_edges));
      write_file(graph_path(out, env), [&](std::ostream& o) { write_graph_export(o, g); });
      graphs.emplace(env, std::move(g));
    }
  } else {
    for (const auto& [env, ts] : by_env) {
      require_exists(graph_path(out, env), "graph export (run --stage graph first)");
      std::ifstream in(graph_path(out, env));
      auto g = read_graph_export(in);
      attach_embeddings(g, ts, backbone);
      graphs.emplace(env, std::move(g));
    }
  }

  MlpParams fwd;
  if (from <= Stage::Forward) {
    std::vector<const TransitionGraph*> ptrs;
    for (const auto& [env, g] : graphs) ptrs.push_back(&g);
    auto f = train_forward(ptrs, cfg, log_line);
    fwd = f.forward_model;
    save_model_file(out / "forward_kinematics.o4am", fwd, ModuleTag::ForwardKinematics);
    write_file(out / "metrics_forward.csv", [&](std::ostream& o) { f.log.write_csv(o); });
  } else {
    require_exists(out / "forward_kinematics.o4am", "forward kinematics weights (run --stage forward first)");
    fwd = load_model_file(out / "forward_kinematics.o4am", ModuleTag::ForwardKinematics).params;
  }

  SystemBundle bundle;
  bundle.backbone = backbone;
  bundle.ik_head = ik;
  bundle.forward_model = fwd;
  bundle.nav = nav;
  for (const auto& [env, g] : graphs) {
    auto r = train_geodesic(g, cfg, log_line);
    write_file(out / ("metrics_geodesic_" + env + ".csv"), [&](std::ostream& o) { r.log.write_csv(o); });
    bundle.regressors.emplace(env, std::move(r.regressor));
  }
  save_bundle(bundle, out);
  log_line("bundle written to " + out.string());
}

// ---------------------------------------------------------------- eval

std::vector<AgentMode> parse_modes(const std::string& s) {
  if (s == "all") return {kAgentModes.begin(), kAgentModes.end()};
  std::vector<AgentMode> out;
  for (const auto& m : split_list(s)) out.push_back(agent_mode_from_name(m));
  if (out.empty()) throw std::invalid_argument("no ablation mode given");
  return out;
}

std::vector<Difficulty> parse_difficulties(const std::string& s) {
  std::vector<Difficulty> out;
  for (const auto& d : split_list(s)) out.push_back(difficulty_from_name(d));
  if (out.empty()) throw std::invalid_argument("no difficulty given");
  return out;
}

void print_summary(const MetricsReport& rep) {
  for (const auto& [d, s] : rep.summary)
    std::cout << rep.mode << ' ' << difficulty_name(d) << ": episodes " << s.episodes << " SR " << format_double(s.sr)
              << " SSR " << format_double(s.ssr) << " SPL " << format_double(s.spl) << '\n';
  std::cout << rep.mode << " CFT " << format_double(rep.cft) << '\n';
}

// ---------------------------------------------------------------- inspect

void inspect(const fs::path& p) {
  require_exists(p, "path");
  if (fs::is_directory(p)) {
    const auto b = load_bundle(p);
    std::cout << "bundle " << p.string() << "\n  obs_dim " << b.obs_dim() << "\n  embedding_dim " << b.embedding_dim()
              << "\n  backbone parameters " << b.backbone.parameter_count() << "\n  inverse kinematics parameters "
              << b.ik_head.parameter_count() << "\n  forward kinematics parameters "
              << b.forward_model.parameter_count() << '\n';
    for (const auto& [env, r] : b.regressors)
      std::cout << "  regressor " << env << " parameters " << r.parameter_count() << '\n';
    KeyValueFile kv;
    b.nav.write(kv);
    std::cout << kv.to_text();
    return;
  }
  std::ifstream in(p, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  in.seekg(0);
  const std::string m(magic, 4);
  if (m == "O4AD") {
    const auto f = load_trajectory(p);
    std::array<std::size_t, 4> counts{};
    for (Action a : f.trajectory.actions) ++counts[static_cast<std::size_t>(a)];
    std::cout << "trajectory " << f.trajectory.env_id << "\n  observations " << f.trajectory.size() << "\n  obs_dim "
              << f.trajectory.obs_dim() << "\n  train_count " << f.trajectory.train_count << "\n  FORWARD "
              << counts[1] << " ROTATE_RIGHT " << counts[2] << " ROTATE_LEFT " << counts[3] << "\n  poses "
              << (f.poses ? "yes" : "no") << '\n';
  } else if (m == "O4AM") {
    const auto f = read_model(in);
    std::cout << "model tag " << static_cast<int>(f.tag) << " env '" << f.env_id << "' layers "
              << f.params.layers.size() << " parameters " << f.params.parameter_count() << '\n';
  } else if (m == "node") {
    const auto g = read_graph_export(in);
    std::cout << "graph " << g.env_id() << "\n  nodes " << g.node_count() << "\n  edges " << g.edge_count()
              << "\n  observed " << g.edge_count(EdgeKind::Observed) << "\n  closed " << g.edge_count(EdgeKind::Closed)
              << '\n';
  } else if (m == "diff") {
    print_summary(read_report_csv(in));
  } else {
    throw std::runtime_error("inspect: unrecognised file " + p.string());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-free image-goal navigation: data, training and benchmarks"};
  app.require_subcommand(1);
  std::string config_path;
  std::size_t threads = default_thread_count();
  app.add_option("--config", config_path, "key = value config file (sim.*, train.*, nav.*, eval.*)");
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);

  // gen-env
  auto* gen = app.add_subcommand("gen-env", "generate a map file");
  std::string generator = "rooms", map_out, env_id;
  int width = 80, height = 80;
  std::uint64_t gen_seed = 0;
  gen->add_option("--generator", generator, "rooms or maze");
  gen->add_option("--seed", gen_seed, "generator seed")->required();
  gen->add_option("--width", width, "width in cells");
  gen->add_option("--height", height, "height in cells");
  gen->add_option("--out", map_out, "output map path")->required();
  gen->add_option("--env-id", env_id, "environment id (default: file stem)");

  // collect
  auto* col = app.add_subcommand("collect", "record a random-walk trajectory");
  std::string map_path, data_out;
  std::size_t steps = 20000;
  std::uint64_t collect_seed = 0;
  col->add_option("--map", map_path, "map file")->required();
  col->add_option("--steps", steps, "number of observations")->check(CLI::Range(2, 100000000));
  col->add_option("--seed", collect_seed, "walk seed")->required();
  col->add_option("--out", data_out, "trajectory file")->required();

  // train
  auto* tr = app.add_subcommand("train", "run the training pipeline");
  std::vector<std::string> data_files;
  std::string bundle_dir, stage = "local";
  tr->add_option("--data", data_files, "trajectory files")->required();
  tr->add_option("--out", bundle_dir, "output directory")->required();
  tr->add_option("--stage", stage, "first stage to run: local, graph, forward or geodesic");

  // navigate
  auto* nv = app.add_subcommand("navigate", "run one episode and write its trace");
  std::string nav_bundle, nav_map, trace_out, nav_ablation = "full", nav_diff = "easy";
  std::uint64_t nav_seed = 0;
  nv->add_option("--bundle", nav_bundle, "bundle directory")->required();
  nv->add_option("--map", nav_map, "map file")->required();
  nv->add_option("--difficulty", nav_diff, "episode difficulty");
  nv->add_option("--seed", nav_seed, "episode seed");
  nv->add_option("--ablation", nav_ablation, "full, no-repulsor or no-attractor");
  nv->add_option("--trace", trace_out, "trace CSV output")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "benchmark agents on generated episodes");
  std::string ev_bundle, ev_map, ev_out, ev_diff, ev_ablation = "full";
  std::size_t ev_episodes = 0;
  std::uint64_t ev_seed = 0;
  bool ev_seed_set = false;
  ev->add_option("--bundle", ev_bundle, "bundle directory (not needed for --ablation random)");
  ev->add_option("--map", ev_map, "map file")->required();
  ev->add_option("--difficulty", ev_diff, "comma-separated difficulties (default from eval.difficulties)");
  ev->add_option("--episodes", ev_episodes, "episodes per difficulty (default from eval.episodes)");
  auto* seed_opt = ev->add_option("--seed", ev_seed, "episode seed (default from eval.seed)");
  ev->add_option("--ablation", ev_ablation, "full, no-repulsor, no-attractor, random, a comma list, or all");
  ev->add_option("--out", ev_out, "report directory")->required();

  // inspect / compare
  auto* in = app.add_subcommand("inspect", "summarise a bundle, trajectory, model, graph export or report");
  std::string inspect_path;
  in->add_option("path", inspect_path, "file or bundle directory")->required();
  auto* cmp = app.add_subcommand("compare", "render a comparison table from report files");
  std::vector<std::string> reports;
  cmp->add_option("reports", reports, "report CSV files")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    const KeyValueFile kv = load_config(config_path);
    const SimSettings sim = SimSettings::read(kv);

    if (*gen) {
      const auto id = env_id.empty() ? fs::path(map_out).stem().string() : env_id;
      const auto env = generate_map(generator, width, height, gen_seed, id, sim.cell_size);
      save_map(env, map_out);
      std::cout << "free cells " << env.free_count() << '\n';
    } else if (*col) {
      require_exists(map_path, "map file");
      const auto env = load_map(map_path, {}, sim.cell_size);
      WalkOptions wo;
      wo.rays = sim.rays;
      wo.noise_sigma = sim.noise_sigma;
      auto run = collect_random_walk(env, steps, collect_seed, wo);
      mark_split(run.trajectory, kv.get_double_or("train.val_fraction", 0.3));
      save_trajectory(data_out, run.trajectory, &run.poses);
      std::cout << "observations " << run.trajectory.size() << " train " << run.trajectory.train_count
                << " coverage " << format_double(coverage_fraction(env, run.poses)) << '\n';
    } else if (*tr) {
      run_train(kv, data_files, bundle_dir, stage_from_name(stage), threads);
    } else if (*nv) {
      require_exists(nav_map, "map file");
      require_exists(nav_bundle, "bundle directory");
      const auto env = load_map(nav_map, {}, sim.cell_size);
      const auto bundle = load_bundle(nav_bundle);
      EpisodeGenOptions go;
      go.rays = sim.rays;
      go.noise_sigma = sim.noise_sigma;
      const auto eps = generate_episodes(env, {env.env_id(), difficulty_from_name(nav_diff), 1, nav_seed}, go);
      std::vector<TraceRow> trace;
      EpisodeOptions eo;
      eo.rays = sim.rays;
      eo.noise_sigma = sim.noise_sigma;
      eo.noise_seed = nav_seed;
      eo.trace = &trace;
      const auto r = navigate(env, eps[0].start, eps[0].goal_obs, eps[0].goal, bundle, bundle.nav,
                              ablation_from_name(nav_ablation), eo);
      write_file(trace_out, [&](std::ostream& o) { write_trace_csv(o, trace); });
      std::cout << "success " << r.success << " soft_success " << r.soft_success << " steps " << r.steps_taken
                << " path_m " << format_double(r.agent_path_length_m) << " oracle_m "
                << format_double(r.oracle_shortest_m) << " final_m " << format_double(r.final_distance_to_goal_m)
                << '\n';
    } else if (*ev) {
      require_exists(ev_map, "map file");
      const auto env = load_map(ev_map, {}, sim.cell_size);
      const auto modes = parse_modes(ev_ablation);
      const auto diffs = parse_difficulties(ev_diff.empty() ? kv.get_or("eval.difficulties", "easy,medium") : ev_diff);
      const std::size_t episodes = ev_episodes ? ev_episodes : kv.get_size_or("eval.episodes", 100);
      ev_seed_set = seed_opt->count() > 0;
      const std::uint64_t seed = ev_seed_set ? ev_seed : kv.get_u64_or("eval.seed", 0);
      std::optional<SystemBundle> bundle;
      bool needs_bundle = false;
      for (AgentMode m : modes) needs_bundle = needs_bundle || m != AgentMode::Random;
      if (needs_bundle) {
        if (ev_bundle.empty()) throw std::invalid_argument("eval: --bundle is required for learned agents");
        require_exists(ev_bundle, "bundle directory");
        bundle = load_bundle(ev_bundle);
      }
      BenchmarkOptions bo;
      bo.threads = threads;
      bo.generation.rays = sim.rays;
      bo.generation.noise_sigma = sim.noise_sigma;
      bo.nav = NavConfig::read(kv);
      fs::create_directories(ev_out);
      std::vector<MetricsReport> all;
      for (AgentMode m : modes) {
        MetricsReport rep;
        rep.env_id = env.env_id();
        rep.mode = std::string(agent_mode_name(m));
        for (Difficulty d : diffs) {
          const auto t0 = std::chrono::steady_clock::now();
          rep.append(run_benchmark(env, bundle ? &*bundle : nullptr, {env.env_id(), d, episodes, seed}, m, bo));
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          log_line(rep.mode + " " + std::string(difficulty_name(d)) + " done in " + format_double(secs) + " s");
        }
        write_file(fs::path(ev_out) / ("report_" + rep.mode + ".csv"),
                   [&](std::ostream& o) { write_report_csv(o, rep); });
        print_summary(rep);
        all.push_back(std::move(rep));
      }
      if (all.size() > 1) {
        const auto table = comparison_table(all);
        write_file(fs::path(ev_out) / "comparison.txt", [&](std::ostream& o) { o << table; });
        std::cout << table;
      }
    } else if (*in) {
      inspect(inspect_path);
    } else if (*cmp) {
      std::vector<MetricsReport> reps;
      for (const auto& r : reports) {
        require_exists(r, "report file");
        std::ifstream f(r);
        reps.push_back(read_report_csv(f));
      }
      std::cout << comparison_table(reps);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
