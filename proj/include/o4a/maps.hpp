#pragma once
// Built-in map generators (rooms-with-doorways, maze) and map file I/O.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "o4a/common.hpp"
#include "o4a/sim.hpp"

namespace o4a {

namespace detail {

struct GridBuilder {
  int width;
  int height;
  std::vector<Cell> cells;

  GridBuilder(int w, int h, Cell fill) : width(w), height(h), cells(static_cast<std::size_t>(w) * h, fill) {}
  void set(int x, int y, Cell c) {
    if (x >= 0 && y >= 0 && x < width && y < height) cells[static_cast<std::size_t>(y) * width + x] = c;
  }
  Cell get(int x, int y) const { return cells[static_cast<std::size_t>(y) * width + x]; }
  void border() {
    for (int x = 0; x < width; ++x) {
      set(x, 0, Cell::Wall);
      set(x, height - 1, Cell::Wall);
    }
    for (int y = 0; y < height; ++y) {
      set(0, y, Cell::Wall);
      set(width - 1, y, Cell::Wall);
    }
  }
};

inline std::vector<int> split_positions(int extent, int parts, Rng& rng) {
  std::vector<int> pos{0};
  for (int k = 1; k < parts; ++k) {
    const int base = static_cast<int>(std::lround(static_cast<double>(k) * (extent - 1) / parts));
    const int jitter = static_cast<int>(uniform_index(rng, 5)) - 2;
    pos.push_back(base + jitter);
  }
  pos.push_back(extent - 1);
  return pos;
}

}  // namespace detail

/// Grid of rectangular rooms separated by 1-cell walls. Doorways (4 cells =
/// 1 m at the default cell size) follow a random spanning tree over the
/// rooms plus extra doors with probability 0.4; some rooms get a 2x2 pillar.
inline EnvMap generate_rooms(int width, int height, std::uint64_t seed, std::string env_id = "rooms",
                             double cell_size = kDefaultCellSize) {
  if (width < 8 || height < 8) throw std::invalid_argument("generate_rooms: map must be at least 8x8 cells");
  Rng rng(derive_seed(seed, "rooms"));
  detail::GridBuilder g(width, height, Cell::Free);
  g.border();
  const int nx = std::max(1, (width - 1) / 17);
  const int ny = std::max(1, (height - 1) / 17);
  const auto xs = detail::split_positions(width, nx, rng);
  const auto ys = detail::split_positions(height, ny, rng);
  for (int i = 1; i < nx; ++i)
    for (int y = 0; y < height; ++y) g.set(xs[i], y, Cell::Wall);
  for (int j = 1; j < ny; ++j)
    for (int x = 0; x < width; ++x) g.set(x, ys[j], Cell::Wall);

  constexpr int kDoor = 4;
  auto open_door = [&](bool vertical_wall, int line, int lo, int hi) {
    const int span = hi - lo - 1;  // interior cells between the two crossing walls
    if (span < kDoor) {
      for (int t = lo + 1; t < hi; ++t) vertical_wall ? g.set(line, t, Cell::Free) : g.set(t, line, Cell::Free);
      return;
    }
    const int margin = span >= kDoor + 4 ? 2 : 0;
    const int start = lo + 1 + margin + static_cast<int>(uniform_index(rng, span - kDoor - 2 * margin + 1));
    for (int t = start; t < start + kDoor; ++t)
      vertical_wall ? g.set(line, t, Cell::Free) : g.set(t, line, Cell::Free);
  };

  // Random spanning tree over the room lattice (randomised Kruskal).
  struct Link { int a, b; bool vertical_wall; int line, lo, hi; };
  std::vector<Link> links;
  auto room = [nx](int i, int j) { return j * nx + i; };
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      if (i + 1 < nx) links.push_back({room(i, j), room(i + 1, j), true, xs[i + 1], ys[j], ys[j + 1]});
      if (j + 1 < ny) links.push_back({room(i, j), room(i, j + 1), false, ys[j + 1], xs[i], xs[i + 1]});
    }
  std::shuffle(links.begin(), links.end(), rng);
  std::vector<int> parent(static_cast<std::size_t>(nx * ny));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (const auto& l : links) {
    const int ra = find(l.a), rb = find(l.b);
    if (ra != rb) {
      parent[ra] = rb;
      open_door(l.vertical_wall, l.line, l.lo, l.hi);
    } else if (uniform01(rng) < 0.4) {
      open_door(l.vertical_wall, l.line, l.lo, l.hi);
    }
  }

  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const int x0 = xs[i] + 5, x1 = xs[i + 1] - 6, y0 = ys[j] + 5, y1 = ys[j + 1] - 6;
      if (x1 <= x0 || y1 <= y0 || uniform01(rng) < 0.5) continue;
      const int px = x0 + static_cast<int>(uniform_index(rng, x1 - x0));
      const int py = y0 + static_cast<int>(uniform_index(rng, y1 - y0));
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) g.set(px + dx, py + dy, Cell::Wall);
    }
  return EnvMap(std::move(env_id), width, height, std::move(g.cells), cell_size);
}

/// Perfect maze (recursive backtracker) with 4-cell corridors and 1-cell
/// walls. Cells beyond the last whole maze cell stay WALL.
inline EnvMap generate_maze(int width, int height, std::uint64_t seed, std::string env_id = "maze",
                            double cell_size = kDefaultCellSize) {
  constexpr int kCorridor = 4;
  constexpr int kPitch = kCorridor + 1;
  const int mx = (width - 1) / kPitch, my = (height - 1) / kPitch;
  if (mx < 1 || my < 1) throw std::invalid_argument("generate_maze: map too small for one corridor cell");
  Rng rng(derive_seed(seed, "maze"));
  detail::GridBuilder g(width, height, Cell::Wall);
  auto carve_cell = [&](int i, int j) {
    for (int y = 0; y < kCorridor; ++y)
      for (int x = 0; x < kCorridor; ++x) g.set(1 + i * kPitch + x, 1 + j * kPitch + y, Cell::Free);
  };
  std::vector<char> seen(static_cast<std::size_t>(mx * my), 0);
  std::vector<std::pair<int, int>> stack{{0, 0}};
  seen[0] = 1;
  carve_cell(0, 0);
  while (!stack.empty()) {
    auto [i, j] = stack.back();
    std::vector<std::pair<int, int>> next;
    for (auto [di, dj] : {std::pair{1, 0}, std::pair{-1, 0}, std::pair{0, 1}, std::pair{0, -1}}) {
      const int ni = i + di, nj = j + dj;
      if (ni >= 0 && nj >= 0 && ni < mx && nj < my && !seen[nj * mx + ni]) next.emplace_back(ni, nj);
    }
    if (next.empty()) {
      stack.pop_back();
      continue;
    }
    auto [ni, nj] = next[uniform_index(rng, next.size())];
    seen[nj * mx + ni] = 1;
    carve_cell(ni, nj);
    if (ni != i) {
      const int wx = 1 + std::max(i, ni) * kPitch - 1;
      for (int y = 0; y < kCorridor; ++y) g.set(wx, 1 + j * kPitch + y, Cell::Free);
    } else {
      const int wy = 1 + std::max(j, nj) * kPitch - 1;
      for (int x = 0; x < kCorridor; ++x) g.set(1 + i * kPitch + x, wy, Cell::Free);
    }
    stack.emplace_back(ni, nj);
  }
  g.border();
  return EnvMap(std::move(env_id), width, height, std::move(g.cells), cell_size);
}

inline EnvMap generate_map(std::string_view generator, int width, int height, std::uint64_t seed,
                           std::string env_id, double cell_size = kDefaultCellSize) {
  if (generator == "rooms") return generate_rooms(width, height, seed, std::move(env_id), cell_size);
  if (generator == "maze") return generate_maze(width, height, seed, std::move(env_id), cell_size);
  throw std::invalid_argument("unknown map generator: " + std::string(generator));
}

/// Number of FREE cells reachable from the first FREE cell (4-connected).
inline std::size_t reachable_free_cells(const EnvMap& env) {
  std::vector<char> seen(static_cast<std::size_t>(env.width()) * env.height(), 0);
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < env.height() && stack.empty(); ++y)
    for (int x = 0; x < env.width(); ++x)
      if (env.is_free(x, y)) {
        stack.emplace_back(x, y);
        seen[env.index(x, y)] = 1;
        break;
      }
  std::size_t count = 0;
  while (!stack.empty()) {
    auto [x, y] = stack.back();
    stack.pop_back();
    ++count;
    for (auto [dx, dy] : {std::pair{1, 0}, std::pair{-1, 0}, std::pair{0, 1}, std::pair{0, -1}}) {
      const int nx = x + dx, ny = y + dy;
      if (env.is_free(nx, ny) && !seen[env.index(nx, ny)]) {
        seen[env.index(nx, ny)] = 1;
        stack.emplace_back(nx, ny);
      }
    }
  }
  return count;
}

inline void save_map(const EnvMap& env, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write map file " + path.string());
  out << env.to_text();
}

/// Loads a text map; env_id defaults to the file stem.
inline EnvMap load_map(const std::filesystem::path& path, std::string env_id = {},
                       double cell_size = kDefaultCellSize) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read map file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (env_id.empty()) env_id = path.stem().string();
  return EnvMap::from_text(ss.str(), std::move(env_id), cell_size);
}

}  // namespace o4a
