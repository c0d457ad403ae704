#pragma once
// Benchmark harness: difficulty-binned episodes, SR / SSR / SPL / CFT
// aggregation and ablation comparison tables.

#include <array>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "o4a/config.hpp"
#include "o4a/nav.hpp"
#include "o4a/parallel.hpp"
#include "o4a/sim.hpp"

namespace o4a {

enum class Difficulty : std::uint8_t { Easy = 0, Medium = 1, Hard = 2, VeryHard = 3 };

inline constexpr std::array<Difficulty, 4> kDifficulties{Difficulty::Easy, Difficulty::Medium, Difficulty::Hard,
                                                         Difficulty::VeryHard};

inline std::string_view difficulty_name(Difficulty d) noexcept {
  switch (d) {
    case Difficulty::Easy: return "easy";
    case Difficulty::Medium: return "medium";
    case Difficulty::Hard: return "hard";
    case Difficulty::VeryHard: return "very_hard";
  }
  return "?";
}

inline Difficulty difficulty_from_name(std::string_view s) {
  for (Difficulty d : kDifficulties)
    if (s == difficulty_name(d)) return d;
  if (s == "very-hard") return Difficulty::VeryHard;
  throw std::invalid_argument("unknown difficulty '" + std::string(s) + "'");
}

/// Oracle geodesic band [lo, hi) in meters.
inline std::pair<double, double> difficulty_band(Difficulty d) noexcept {
  switch (d) {
    case Difficulty::Easy: return {1.5, 3.0};
    case Difficulty::Medium: return {3.0, 5.0};
    case Difficulty::Hard: return {5.0, 10.0};
    case Difficulty::VeryHard: return {10.0, kInfinity};
  }
  return {0.0, 0.0};
}

inline bool in_band(Difficulty d, double meters) noexcept {
  const auto [lo, hi] = difficulty_band(d);
  return meters >= lo && meters < hi;
}

enum class AgentMode : std::uint8_t { Full = 0, NoRepulsor = 1, NoAttractor = 2, Random = 3 };

inline constexpr std::array<AgentMode, 4> kAgentModes{AgentMode::Full, AgentMode::NoRepulsor, AgentMode::NoAttractor,
                                                      AgentMode::Random};

inline std::string_view agent_mode_name(AgentMode m) noexcept {
  return m == AgentMode::Random ? "random" : ablation_name(static_cast<Ablation>(m));
}

inline AgentMode agent_mode_from_name(std::string_view s) {
  if (s == "random") return AgentMode::Random;
  return static_cast<AgentMode>(ablation_from_name(s));
}

struct BenchmarkSpec {
  std::string env_id;
  Difficulty difficulty = Difficulty::Easy;
  std::size_t episodes = 100;
  std::uint64_t seed = 0;
};

struct Episode {
  Pose start;
  Pose goal;
  Observation goal_obs;
  double oracle_shortest_m = 0.0;
};

struct EpisodeGenOptions {
  double noise_sigma = 0.0;
  int rays = kDefaultRays;
  std::size_t max_attempts_per_episode = 200;
};

/// Draws start poses uniformly, then goals uniformly among cells whose
/// oracle distance from the start lies in the band. Starts with no cell in
/// the band are rejected; too many rejections mean the band does not fit.
inline std::vector<Episode> generate_episodes(const EnvMap& env, const BenchmarkSpec& spec,
                                              const EpisodeGenOptions& opt = {}) {
  if (spec.episodes < 1) throw std::invalid_argument("generate_episodes: episodes must be >= 1");
  Rng rng(derive_seed(spec.seed, "episodes:" + std::string(difficulty_name(spec.difficulty))));
  Rng noise(derive_seed(spec.seed, "episodes-noise"));
  std::vector<Episode> out;
  std::vector<std::pair<int, int>> cells;
  const std::size_t budget = spec.episodes * opt.max_attempts_per_episode;
  std::size_t attempts = 0;
  while (out.size() < spec.episodes) {
    if (attempts++ >= budget) {
      const auto [lo, hi] = difficulty_band(spec.difficulty);
      throw std::runtime_error("generate_episodes: difficulty band " + std::string(difficulty_name(spec.difficulty)) +
                               " [" + format_double(lo) + ", " + format_double(hi) + ") m is unreachable in " +
                               env.env_id());
    }
    const Pose start = random_valid_pose(env, rng);
    auto [sx, sy] = env.cell_of(start.x, start.y);
    const auto field = GridDistanceField::compute(env, sx, sy);
    cells.clear();
    for (int y = 0; y < env.height(); ++y)
      for (int x = 0; x < env.width(); ++x)
        if (in_band(spec.difficulty, field.at(x, y))) cells.emplace_back(x, y);
    if (cells.empty()) continue;
    const auto [gx, gy] = cells[uniform_index(rng, cells.size())];
    const double cs = env.cell_size();
    Pose goal{(gx + uniform01(rng)) * cs, (gy + uniform01(rng)) * cs,
              static_cast<int>(uniform_index(rng, kHeadingSlots))};
    if (!pose_is_valid(env, goal)) continue;
    Episode e;
    e.start = start;
    e.goal = goal;
    e.oracle_shortest_m = field.at(gx, gy);
    e.goal_obs = observe(env, goal, opt.noise_sigma, &noise, opt.rays);
    out.push_back(std::move(e));
  }
  return out;
}

/// Mean over episodes of S * l / max(p, l).
inline double spl_term(const EpisodeResult& r) {
  if (!(r.oracle_shortest_m > 0.0)) throw ContractViolation("spl: oracle shortest path must be positive");
  return r.success ? r.oracle_shortest_m / std::max(r.agent_path_length_m, r.oracle_shortest_m) : 0.0;
}

inline double spl(const std::vector<EpisodeResult>& episodes) {
  if (episodes.empty()) throw std::invalid_argument("spl: empty episode list");
  double s = 0.0;
  for (const auto& e : episodes) s += spl_term(e);
  return s / static_cast<double>(episodes.size());
}

struct EpisodeRow {
  Difficulty difficulty = Difficulty::Easy;
  EpisodeResult result;
};

struct DifficultySummary {
  std::size_t episodes = 0;
  double sr = 0.0;
  double ssr = 0.0;
  double spl = 0.0;
};

struct MetricsReport {
  std::string env_id;
  std::string mode;
  std::vector<EpisodeRow> rows;
  std::map<Difficulty, DifficultySummary> summary;
  double cft = 0.0;

  std::size_t episode_count() const noexcept { return rows.size(); }
  const DifficultySummary& at(Difficulty d) const {
    auto it = summary.find(d);
    if (it == summary.end())
      throw std::out_of_range("report has no " + std::string(difficulty_name(d)) + " episodes");
    return it->second;
  }

  /// Recomputes summary and CFT from rows.
  void summarize() {
    summary.clear();
    std::map<Difficulty, std::vector<EpisodeResult>> by;
    std::size_t clean = 0;
    for (const auto& r : rows) {
      by[r.difficulty].push_back(r.result);
      if (!r.result.collided_ever) ++clean;
    }
    for (const auto& [d, eps] : by) {
      DifficultySummary s;
      s.episodes = eps.size();
      std::size_t succ = 0, soft = 0;
      for (const auto& e : eps) {
        succ += e.success ? 1 : 0;
        soft += e.soft_success ? 1 : 0;
      }
      s.sr = static_cast<double>(succ) / static_cast<double>(eps.size());
      s.ssr = static_cast<double>(soft) / static_cast<double>(eps.size());
      s.spl = spl(eps);
      summary[d] = s;
    }
    cft = rows.empty() ? 0.0 : static_cast<double>(clean) / static_cast<double>(rows.size());
  }

  void append(const MetricsReport& other) {
    rows.insert(rows.end(), other.rows.begin(), other.rows.end());
    summarize();
  }
};

struct BenchmarkOptions {
  std::size_t threads = 1;
  EpisodeGenOptions generation;
  NavConfig nav;
  bool use_bundle_nav = true;  // otherwise `nav` overrides the bundle snapshot
};

/// Runs one agent over freshly generated episodes. Episodes may run in
/// parallel; rows are stored in episode order.
inline MetricsReport run_benchmark(const EnvMap& env, const SystemBundle* bundle, const BenchmarkSpec& spec,
                                   AgentMode mode, const BenchmarkOptions& opt = {}) {
  if (mode != AgentMode::Random && !bundle)
    throw std::invalid_argument("run_benchmark: a trained bundle is required for mode " +
                                std::string(agent_mode_name(mode)));
  const NavConfig nav = (bundle && opt.use_bundle_nav) ? bundle->nav : opt.nav;
  if (mode == AgentMode::Full || mode == AgentMode::NoRepulsor) (void)bundle->regressor(env.env_id());
  const auto episodes = generate_episodes(env, spec, opt.generation);
  MetricsReport rep;
  rep.env_id = env.env_id();
  rep.mode = std::string(agent_mode_name(mode));
  rep.rows.resize(episodes.size());
  parallel_for(episodes.size(), opt.threads, [&](std::size_t i) {
    const auto& e = episodes[i];
    EpisodeResult r;
    if (mode == AgentMode::Random) {
      r = run_random_agent(env, e.start, e.goal, nav, derive_seed(spec.seed, "random-agent", i));
    } else {
      EpisodeOptions eo;
      eo.noise_sigma = opt.generation.noise_sigma;
      eo.rays = opt.generation.rays;
      eo.noise_seed = derive_seed(spec.seed, "episode-noise", i);
      r = navigate(env, e.start, e.goal_obs, e.goal, *bundle, nav, static_cast<Ablation>(mode), eo);
    }
    r.oracle_shortest_m = e.oracle_shortest_m;
    rep.rows[i] = {spec.difficulty, r};
  });
  rep.summarize();
  return rep;
}

// ---------------------------------------------------------------- report files

inline void write_report_csv(std::ostream& out, const MetricsReport& rep) {
  out << "difficulty,success,soft_success,steps,forward,rotate,collided,path_m,oracle_m,spl_term\n";
  for (const auto& row : rep.rows) {
    const auto& r = row.result;
    out << difficulty_name(row.difficulty) << ',' << r.success << ',' << r.soft_success << ',' << r.steps_taken << ','
        << r.forward_steps << ',' << r.rotate_steps << ',' << r.collided_ever << ','
        << format_double(r.agent_path_length_m) << ',' << format_double(r.oracle_shortest_m) << ','
        << format_double(spl_term(r)) << '\n';
  }
  out << "# env," << rep.env_id << '\n';
  out << "# mode," << rep.mode << '\n';
  for (const auto& [d, s] : rep.summary)
    out << "# summary," << difficulty_name(d) << ",episodes=" << s.episodes << ",SR=" << format_double(s.sr)
        << ",SSR=" << format_double(s.ssr) << ",SPL=" << format_double(s.spl) << '\n';
  out << "# CFT," << format_double(rep.cft) << '\n';
}

/// Reads the rows and env/mode tags back; the summary is recomputed.
inline MetricsReport read_report_csv(std::istream& in) {
  MetricsReport rep;
  std::string line;
  if (!std::getline(in, line) || line.rfind("difficulty,success", 0) != 0)
    throw FormatError("report: missing header line");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (line[0] == '#') {
      if (f.size() >= 2 && f[0] == "# env") rep.env_id = f[1];
      if (f.size() >= 2 && f[0] == "# mode") rep.mode = f[1];
      continue;
    }
    if (f.size() != 10) throw FormatError("report: malformed row: " + line);
    try {
      EpisodeRow row;
      row.difficulty = difficulty_from_name(f[0]);
      auto& r = row.result;
      r.success = f[1] == "1";
      r.soft_success = f[2] == "1";
      r.steps_taken = std::stoul(f[3]);
      r.forward_steps = std::stoul(f[4]);
      r.rotate_steps = std::stoul(f[5]);
      r.collided_ever = f[6] == "1";
      r.agent_path_length_m = std::stod(f[7]);
      r.oracle_shortest_m = std::stod(f[8]);
      r.stop_called = r.success;
      rep.rows.push_back(row);
    } catch (const std::logic_error&) {
      throw FormatError("report: malformed row: " + line);
    }
  }
  rep.summarize();
  return rep;
}

/// Plain-text table with one row per agent and SR / SSR / SPL per
/// difficulty followed by CFT.
inline std::string comparison_table(const std::vector<MetricsReport>& reports) {
  std::vector<Difficulty> diffs;
  for (Difficulty d : kDifficulties)
    for (const auto& r : reports)
      if (r.summary.count(d)) {
        diffs.push_back(d);
        break;
      }
  std::ostringstream out;
  out << std::left << std::setw(14) << "agent";
  for (Difficulty d : diffs) {
    const std::string name(difficulty_name(d));
    out << " | " << std::setw(20) << (name + " SR/SSR/SPL");
  }
  out << " | CFT\n";
  out << std::string(14 + diffs.size() * 23 + 8, '-') << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto& r : reports) {
    out << std::left << std::setw(14) << r.mode;
    for (Difficulty d : diffs) {
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(2);
      if (auto it = r.summary.find(d); it != r.summary.end())
        cell << it->second.sr << " / " << it->second.ssr << " / " << it->second.spl;
      else
        cell << "-";
      out << " | " << std::setw(20) << cell.str();
    }
    out << " | " << r.cft << '\n';
  }
  return out.str();
}

}  // namespace o4a
