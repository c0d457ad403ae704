#pragma once
// Deterministic 2D occupancy-grid world: robot kinematics, ray-cast
// observations, scan-box collision prediction, a grid geodesic oracle and
// random-walk data collection. Poses are evaluation-side data; learned
// modules only ever see Observation values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "o4a/common.hpp"

namespace o4a {

inline constexpr int kHeadingSlots = 24;
inline constexpr double kHeadingStepDeg = 15.0;
inline constexpr double kRobotRadius = 0.15;
inline constexpr double kForwardStep = 0.25;
inline constexpr double kScanBoxLength = 0.30;
inline constexpr double kDefaultCellSize = 0.25;
inline constexpr int kDefaultRays = 36;
inline constexpr double kMinChannel = 1e-6;
inline constexpr double kWaypointReach = 0.3;

enum class Cell : std::uint8_t { Free = 0, Wall = 1 };

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

class EnvMap {
 public:
  EnvMap(std::string env_id, int width, int height, std::vector<Cell> cells,
         double cell_size = kDefaultCellSize)
      : env_id_(std::move(env_id)), width_(width), height_(height), cell_size_(cell_size),
        cells_(std::move(cells)) {
    if (width_ < 1 || height_ < 1 || cells_.size() != static_cast<std::size_t>(width_) * height_)
      throw std::invalid_argument("EnvMap: grid is not rectangular");
    if (!(cell_size_ > 0.0)) throw std::invalid_argument("EnvMap: cell_size must be positive");
    for (int x = 0; x < width_; ++x)
      if (!is_wall(x, 0) || !is_wall(x, height_ - 1))
        throw std::invalid_argument("EnvMap: outer boundary must be entirely WALL");
    for (int y = 0; y < height_; ++y)
      if (!is_wall(0, y) || !is_wall(width_ - 1, y))
        throw std::invalid_argument("EnvMap: outer boundary must be entirely WALL");
    free_count_ = static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), Cell::Free));
    if (free_count_ == 0) throw std::invalid_argument("EnvMap: no FREE cell");
    texture_.assign(cells_.size(), 0.0);
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x)
        if (is_wall(x, y)) texture_[index(x, y)] = wall_texture(x, y);
  }

  /// Parses the text map format: one row per line, '#' wall, '.' free.
  /// Blank lines are ignored. Row r of the text has cell y-index r.
  static EnvMap from_text(std::string_view text, std::string env_id,
                          double cell_size = kDefaultCellSize) {
    std::vector<std::string> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      rows.push_back(line);
    }
    if (rows.empty()) throw FormatError("map text is empty");
    const int width = static_cast<int>(rows.front().size());
    std::vector<Cell> cells;
    cells.reserve(rows.size() * width);
    for (const auto& r : rows) {
      if (static_cast<int>(r.size()) != width) throw FormatError("map rows have unequal length");
      for (char c : r) {
        if (c == '#') cells.push_back(Cell::Wall);
        else if (c == '.') cells.push_back(Cell::Free);
        else throw FormatError(std::string("unexpected map character '") + c + "'");
      }
    }
    return EnvMap(std::move(env_id), width, static_cast<int>(rows.size()), std::move(cells),
                  cell_size);
  }

  std::string to_text() const {
    std::string s;
    s.reserve(static_cast<std::size_t>(width_ + 1) * height_);
    for (int y = 0; y < height_; ++y) {
      for (int x = 0; x < width_; ++x) s.push_back(is_wall(x, y) ? '#' : '.');
      s.push_back('\n');
    }
    return s;
  }

  const std::string& env_id() const noexcept { return env_id_; }
  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  double cell_size() const noexcept { return cell_size_; }
  std::size_t free_count() const noexcept { return free_count_; }

  bool in_bounds(int x, int y) const noexcept { return x >= 0 && y >= 0 && x < width_ && y < height_; }
  /// Out-of-range cells read as WALL.
  bool is_wall(int x, int y) const noexcept {
    return !in_bounds(x, y) || cells_[index(x, y)] == Cell::Wall;
  }
  bool is_free(int x, int y) const noexcept { return !is_wall(x, y); }
  double texture(int x, int y) const noexcept { return in_bounds(x, y) ? texture_[index(x, y)] : 1.0; }

  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }
  std::pair<int, int> cell_of(double x, double y) const noexcept {
    return {static_cast<int>(std::floor(x / cell_size_)), static_cast<int>(std::floor(y / cell_size_))};
  }
  Vec2 cell_center(int x, int y) const noexcept {
    return {(x + 0.5) * cell_size_, (y + 0.5) * cell_size_};
  }

 private:
  // Texture is constant over 16x16-cell blocks so neighbouring rays usually
  // agree, while distant walls still get unrelated values in [0.1, 1].
  static double wall_texture(int x, int y) noexcept {
    const auto bx = static_cast<std::uint64_t>(static_cast<std::uint32_t>(x / 16));
    const auto by = static_cast<std::uint64_t>(static_cast<std::uint32_t>(y / 16));
    const std::uint64_t h = mix64((bx << 32) ^ by ^ 0x5EED7E47u);
    return 0.1 + 0.9 * (static_cast<double>(h >> 11) * 0x1.0p-53);
  }

  std::string env_id_;
  int width_;
  int height_;
  double cell_size_;
  std::vector<Cell> cells_;
  std::vector<double> texture_;
  std::size_t free_count_ = 0;
};

struct Pose {
  double x = 0.0;
  double y = 0.0;
  int heading = 0;  // slot index, angle = heading * 15 degrees

  friend bool operator==(const Pose&, const Pose&) = default;
};

inline int wrap_heading(int h) noexcept { return ((h % kHeadingSlots) + kHeadingSlots) % kHeadingSlots; }

inline double heading_radians(int heading) noexcept {
  return wrap_heading(heading) * kHeadingStepDeg * std::numbers::pi / 180.0;
}

struct Observation {
  Eigen::VectorXd values;

  Eigen::Index size() const noexcept { return values.size(); }
  friend bool operator==(const Observation& a, const Observation& b) {
    return a.values.size() == b.values.size() && a.values == b.values;
  }
};

/// Small set of actions stored as a bitmask; iteration follows canonical order.
class ActionSet {
 public:
  void insert(Action a) noexcept { bits_ |= bit(a); }
  bool contains(Action a) const noexcept { return (bits_ & bit(a)) != 0; }
  bool empty() const noexcept { return bits_ == 0; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(std::popcount(bits_)); }
  std::vector<Action> to_vector() const {
    std::vector<Action> v;
    for (Action a : {Action::Stop, Action::Forward, Action::RotateRight, Action::RotateLeft})
      if (contains(a)) v.push_back(a);
    return v;
  }
  static ActionSet of(std::initializer_list<Action> actions) noexcept {
    ActionSet s;
    for (Action a : actions) s.insert(a);
    return s;
  }
  friend bool operator==(const ActionSet&, const ActionSet&) = default;

 private:
  static std::uint8_t bit(Action a) noexcept { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(a)); }
  std::uint8_t bits_ = 0;
};

namespace geom {

inline double point_box_distance(Vec2 p, double x0, double y0, double x1, double y1) noexcept {
  const double dx = std::max({x0 - p.x, 0.0, p.x - x1});
  const double dy = std::max({y0 - p.y, 0.0, p.y - y1});
  return std::hypot(dx, dy);
}

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) noexcept {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

/// Liang-Barsky clip test of segment ab against a closed axis-aligned box.
inline bool segment_intersects_box(Vec2 a, Vec2 b, double x0, double y0, double x1, double y1) noexcept {
  double t0 = 0.0, t1 = 1.0;
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double p[4] = {-dx, dx, -dy, dy};
  const double q[4] = {a.x - x0, x1 - a.x, a.y - y0, y1 - a.y};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
    } else {
      const double r = q[i] / p[i];
      if (p[i] < 0.0) t0 = std::max(t0, r);
      else t1 = std::min(t1, r);
      if (t0 > t1) return false;
    }
  }
  return true;
}

inline double segment_box_distance(Vec2 a, Vec2 b, double x0, double y0, double x1, double y1) noexcept {
  if (segment_intersects_box(a, b, x0, y0, x1, y1)) return 0.0;
  double d = std::min(point_box_distance(a, x0, y0, x1, y1), point_box_distance(b, x0, y0, x1, y1));
  for (Vec2 c : {Vec2{x0, y0}, Vec2{x1, y0}, Vec2{x0, y1}, Vec2{x1, y1}})
    d = std::min(d, point_segment_distance(c, a, b));
  return d;
}

/// Separating-axis test between an oriented rectangle and an axis-aligned
/// box. Touching boundaries count as intersecting.
inline bool oriented_rect_intersects_box(Vec2 center, Vec2 axis, double half_len, double half_width,
                                         double x0, double y0, double x1, double y1) noexcept {
  const Vec2 perp{-axis.y, axis.x};
  const Vec2 corners[4] = {
      {center.x + axis.x * half_len + perp.x * half_width, center.y + axis.y * half_len + perp.y * half_width},
      {center.x + axis.x * half_len - perp.x * half_width, center.y + axis.y * half_len - perp.y * half_width},
      {center.x - axis.x * half_len + perp.x * half_width, center.y - axis.y * half_len + perp.y * half_width},
      {center.x - axis.x * half_len - perp.x * half_width, center.y - axis.y * half_len - perp.y * half_width}};
  double minx = kInfinity, maxx = -kInfinity, miny = kInfinity, maxy = -kInfinity;
  for (const auto& c : corners) {
    minx = std::min(minx, c.x);
    maxx = std::max(maxx, c.x);
    miny = std::min(miny, c.y);
    maxy = std::max(maxy, c.y);
  }
  if (maxx < x0 || minx > x1 || maxy < y0 || miny > y1) return false;
  const Vec2 box_corners[4] = {{x0, y0}, {x1, y0}, {x0, y1}, {x1, y1}};
  const Vec2 axes[2] = {axis, perp};
  const double extents[2] = {half_len, half_width};
  for (int k = 0; k < 2; ++k) {
    const Vec2 ax = axes[k];
    const double c = center.x * ax.x + center.y * ax.y;
    const double extent = extents[k];
    double lo = kInfinity, hi = -kInfinity;
    for (const auto& bc : box_corners) {
      const double proj = bc.x * ax.x + bc.y * ax.y;
      lo = std::min(lo, proj);
      hi = std::max(hi, proj);
    }
    if (hi < c - extent || lo > c + extent) return false;
  }
  return true;
}

}  // namespace geom

/// True iff a disc of the given radius centred at (x, y) keeps at least
/// `radius` distance from every WALL cell and lies inside the map.
inline bool disc_is_clear(const EnvMap& env, double x, double y, double radius = kRobotRadius) {
  const double cs = env.cell_size();
  if (!(x - radius >= 0.0 && y - radius >= 0.0 && x + radius <= env.width() * cs &&
        y + radius <= env.height() * cs))
    return false;
  const int ix0 = static_cast<int>(std::floor((x - radius) / cs));
  const int ix1 = static_cast<int>(std::floor((x + radius) / cs));
  const int iy0 = static_cast<int>(std::floor((y - radius) / cs));
  const int iy1 = static_cast<int>(std::floor((y + radius) / cs));
  for (int iy = iy0; iy <= iy1; ++iy)
    for (int ix = ix0; ix <= ix1; ++ix)
      if (env.is_wall(ix, iy) &&
          geom::point_box_distance({x, y}, ix * cs, iy * cs, (ix + 1) * cs, (iy + 1) * cs) < radius)
        return false;
  return true;
}

inline bool pose_is_valid(const EnvMap& env, const Pose& pose) {
  return std::isfinite(pose.x) && std::isfinite(pose.y) && pose.heading >= 0 &&
         pose.heading < kHeadingSlots && disc_is_clear(env, pose.x, pose.y);
}

inline void require_valid_pose(const EnvMap& env, const Pose& pose, std::string_view op) {
  if (!pose_is_valid(env, pose))
    throw ContractViolation(std::string(op) + ": invalid pose (" + std::to_string(pose.x) + ", " +
                            std::to_string(pose.y) + ", h=" + std::to_string(pose.heading) + ")");
}

/// Swept-disc test for a straight motion from a to b.
inline bool motion_is_clear(const EnvMap& env, Vec2 a, Vec2 b, double radius = kRobotRadius) {
  const double cs = env.cell_size();
  const int ix0 = static_cast<int>(std::floor((std::min(a.x, b.x) - radius) / cs));
  const int ix1 = static_cast<int>(std::floor((std::max(a.x, b.x) + radius) / cs));
  const int iy0 = static_cast<int>(std::floor((std::min(a.y, b.y) - radius) / cs));
  const int iy1 = static_cast<int>(std::floor((std::max(a.y, b.y) + radius) / cs));
  for (int iy = iy0; iy <= iy1; ++iy)
    for (int ix = ix0; ix <= ix1; ++ix)
      if (env.is_wall(ix, iy) &&
          geom::segment_box_distance(a, b, ix * cs, iy * cs, (ix + 1) * cs, (iy + 1) * cs) < radius)
        return false;
  return true;
}

struct StepResult {
  Pose pose;
  bool collided = false;
};

inline StepResult step(const EnvMap& env, const Pose& pose, Action action) {
  require_valid_pose(env, pose, "step");
  switch (action) {
    case Action::Stop: return {pose, false};
    case Action::RotateLeft: return {{pose.x, pose.y, wrap_heading(pose.heading + 1)}, false};
    case Action::RotateRight: return {{pose.x, pose.y, wrap_heading(pose.heading - 1)}, false};
    case Action::Forward: break;
  }
  const double th = heading_radians(pose.heading);
  const Vec2 from{pose.x, pose.y};
  const Vec2 to{pose.x + kForwardStep * std::cos(th), pose.y + kForwardStep * std::sin(th)};
  if (!motion_is_clear(env, from, to)) return {pose, true};
  return {{to.x, to.y, pose.heading}, false};
}

struct RayHit {
  double distance = 0.0;  // meters
  int cell_x = 0;
  int cell_y = 0;
};

/// Marches a ray through the grid (Amanatides-Woo traversal) to the first
/// WALL cell. A start point inside a WALL cell hits at distance 0.
inline RayHit cast_ray(const EnvMap& env, double x, double y, double angle_rad) {
  const double cs = env.cell_size();
  const double ox = x / cs, oy = y / cs;
  int cx = static_cast<int>(std::floor(ox));
  int cy = static_cast<int>(std::floor(oy));
  if (env.is_wall(cx, cy)) return {0.0, cx, cy};
  const double dx = std::cos(angle_rad), dy = std::sin(angle_rad);
  const int sx = dx > 0 ? 1 : -1;
  const int sy = dy > 0 ? 1 : -1;
  const double tdx = std::abs(dx) > 1e-15 ? 1.0 / std::abs(dx) : kInfinity;
  const double tdy = std::abs(dy) > 1e-15 ? 1.0 / std::abs(dy) : kInfinity;
  double tmx = std::abs(dx) > 1e-15 ? (dx > 0 ? (cx + 1 - ox) : (ox - cx)) * tdx : kInfinity;
  double tmy = std::abs(dy) > 1e-15 ? (dy > 0 ? (cy + 1 - oy) : (oy - cy)) * tdy : kInfinity;
  const int max_iter = 4 * (env.width() + env.height()) + 8;
  for (int i = 0; i < max_iter; ++i) {
    double t;
    if (tmx < tmy) {
      cx += sx;
      t = tmx;
      tmx += tdx;
    } else {
      cy += sy;
      t = tmy;
      tmy += tdy;
    }
    if (env.is_wall(cx, cy)) return {t * cs, cx, cy};
  }
  throw std::logic_error("cast_ray: ray escaped the map");
}

/// Synthetic 360-degree range/texture sensor. Entry 2k is the proximity
/// 1/(1+dist) of ray k and entry 2k+1 the texture of the cell it hit.
/// Values are rounded to f32 precision so they survive the trajectory file
/// format unchanged.
inline Observation observe(const EnvMap& env, const Pose& pose, double noise_sigma = 0.0,
                           Rng* rng = nullptr, int rays = kDefaultRays) {
  require_valid_pose(env, pose, "observe");
  if (rays < 1) throw std::invalid_argument("observe: rays must be positive");
  if (noise_sigma > 0.0 && rng == nullptr)
    throw std::invalid_argument("observe: noise requires a random stream");
  Observation obs{Eigen::VectorXd(2 * rays)};
  std::normal_distribution<double> noise(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
  for (int k = 0; k < rays; ++k) {
    const double deg = pose.heading * kHeadingStepDeg + k * (360.0 / rays);
    const RayHit hit = cast_ray(env, pose.x, pose.y, deg * std::numbers::pi / 180.0);
    double prox = 1.0 / (1.0 + hit.distance);
    double tex = env.texture(hit.cell_x, hit.cell_y);
    if (noise_sigma > 0.0) {
      prox += noise(*rng);
      tex += noise(*rng);
    }
    obs.values[2 * k] = static_cast<float>(std::clamp(prox, kMinChannel, 1.0));
    obs.values[2 * k + 1] = static_cast<float>(std::clamp(tex, kMinChannel, 1.0));
  }
  return obs;
}

/// Collision prediction from the range scan. FORWARD is offered iff an
/// oriented box running from the robot centre to kScanBoxLength past its
/// front, one diameter wide, touches no WALL cell; the box contains the
/// swept disc of a forward step, so an offered FORWARD never collides.
inline ActionSet scan_free_actions(const EnvMap& env, const Pose& pose) {
  require_valid_pose(env, pose, "scan_free_actions");
  ActionSet free = ActionSet::of({Action::RotateRight, Action::RotateLeft});
  const double th = heading_radians(pose.heading);
  const Vec2 axis{std::cos(th), std::sin(th)};
  const double len = kRobotRadius + kScanBoxLength;
  const Vec2 center{pose.x + axis.x * len / 2.0, pose.y + axis.y * len / 2.0};
  const double cs = env.cell_size();
  const double reach = len + kRobotRadius;
  const int ix0 = static_cast<int>(std::floor((pose.x - reach) / cs));
  const int ix1 = static_cast<int>(std::floor((pose.x + reach) / cs));
  const int iy0 = static_cast<int>(std::floor((pose.y - reach) / cs));
  const int iy1 = static_cast<int>(std::floor((pose.y + reach) / cs));
  for (int iy = iy0; iy <= iy1; ++iy)
    for (int ix = ix0; ix <= ix1; ++ix)
      if (env.is_wall(ix, iy) &&
          geom::oriented_rect_intersects_box(center, axis, len / 2.0, kRobotRadius, ix * cs, iy * cs,
                                             (ix + 1) * cs, (iy + 1) * cs))
        return free;
  free.insert(Action::Forward);
  return free;
}

/// Shortest-path lengths (meters) from one goal cell over the 8-connected
/// grid of FREE cells. Diagonal moves cost sqrt(2) cells and may not cut a
/// WALL corner.
class GridDistanceField {
 public:
  GridDistanceField() = default;

  static GridDistanceField compute(const EnvMap& env, int gx, int gy, double max_dist = kInfinity) {
    GridDistanceField f;
    f.width_ = env.width();
    f.dist_.assign(static_cast<std::size_t>(env.width()) * env.height(), kInfinity);
    if (env.is_wall(gx, gy)) return f;
    const double cs = env.cell_size();
    const double diag = cs * std::numbers::sqrt2;
    using Item = std::pair<double, std::size_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> open;
    f.dist_[env.index(gx, gy)] = 0.0;
    open.push({0.0, env.index(gx, gy)});
    while (!open.empty()) {
      auto [d, idx] = open.top();
      open.pop();
      if (d > f.dist_[idx]) continue;
      const int x = static_cast<int>(idx % env.width());
      const int y = static_cast<int>(idx / env.width());
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int nx = x + dx, ny = y + dy;
          if (env.is_wall(nx, ny)) continue;
          if (dx != 0 && dy != 0 && (env.is_wall(x + dx, y) || env.is_wall(x, y + dy))) continue;
          const double nd = d + ((dx != 0 && dy != 0) ? diag : cs);
          if (nd > max_dist) continue;
          const std::size_t nidx = env.index(nx, ny);
          if (nd < f.dist_[nidx]) {
            f.dist_[nidx] = nd;
            open.push({nd, nidx});
          }
        }
    }
    return f;
  }

  double at(int x, int y) const noexcept {
    if (x < 0 || y < 0 || x >= width_ || static_cast<std::size_t>(y) * width_ + x >= dist_.size())
      return kInfinity;
    return dist_[static_cast<std::size_t>(y) * width_ + x];
  }
  double at(const EnvMap& env, const Pose& p) const noexcept {
    auto [x, y] = env.cell_of(p.x, p.y);
    return at(x, y);
  }
  const std::vector<double>& values() const noexcept { return dist_; }

 private:
  int width_ = 0;
  std::vector<double> dist_;
};

/// Ground-truth geodesic distance between two poses (evaluation only).
/// Returns nullopt when no free-space path exists.
inline std::optional<double> geodesic_oracle(const EnvMap& env, const Pose& a, const Pose& b) {
  require_valid_pose(env, a, "geodesic_oracle");
  require_valid_pose(env, b, "geodesic_oracle");
  auto [ax, ay] = env.cell_of(a.x, a.y);
  auto [bx, by] = env.cell_of(b.x, b.y);
  const double d = GridDistanceField::compute(env, bx, by).at(ax, ay);
  if (!std::isfinite(d)) return std::nullopt;
  return d;
}

/// Uniformly random valid pose: random FREE cell, uniform point inside it,
/// random heading, rejected until the robot disc fits.
inline Pose random_valid_pose(const EnvMap& env, Rng& rng, int max_attempts = 100000) {
  std::vector<std::size_t> free_cells;
  free_cells.reserve(env.free_count());
  for (int y = 0; y < env.height(); ++y)
    for (int x = 0; x < env.width(); ++x)
      if (env.is_free(x, y)) free_cells.push_back(env.index(x, y));
  const double cs = env.cell_size();
  for (int i = 0; i < max_attempts; ++i) {
    const std::size_t idx = free_cells[uniform_index(rng, free_cells.size())];
    const int cx = static_cast<int>(idx % env.width());
    const int cy = static_cast<int>(idx / env.width());
    Pose p{(cx + uniform01(rng)) * cs, (cy + uniform01(rng)) * cs,
           static_cast<int>(uniform_index(rng, kHeadingSlots))};
    if (pose_is_valid(env, p)) return p;
  }
  throw std::runtime_error("random_valid_pose: no valid robot placement found in " + env.env_id());
}

/// Action-labelled observation sequence. Holds no poses; `train_count` is
/// the 70/30 split marker (observations [0, train_count) are training data).
struct Trajectory {
  std::string env_id;
  std::vector<Observation> observations;
  std::vector<Action> actions;  // actions[t] moves observations[t] -> observations[t+1]
  std::size_t train_count = 0;

  std::size_t size() const noexcept { return observations.size(); }
  Eigen::Index obs_dim() const noexcept { return observations.empty() ? 0 : observations.front().size(); }
  /// Transition t is a training transition iff both endpoints are training observations.
  bool is_train_transition(std::size_t t) const noexcept { return t + 1 < train_count; }
  bool is_train_observation(std::size_t t) const noexcept { return t < train_count; }
};

/// Sets the split marker so that the first (1 - val_fraction) share of the
/// observations is training data.
inline void mark_split(Trajectory& traj, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw std::invalid_argument("mark_split: val_fraction must be in (0,1)");
  const auto n = traj.observations.size();
  traj.train_count = std::min(n, static_cast<std::size_t>(std::ceil((1.0 - val_fraction) * n)));
}

struct CollectedRun {
  Trajectory trajectory;
  std::vector<Pose> poses;  // hidden; evaluation use only
};

struct WalkOptions {
  double waypoint_radius_m = 2.0;
  double waypoint_min_m = 1.0;
  int waypoint_draws = 8;
  int waypoint_timeout = 40;
  double random_action_prob = 0.10;
  double noise_sigma = 0.0;
  int rays = kDefaultRays;
};

namespace detail {

// Greedy oracle controller: aim at a cell a few hops down the distance
// field; drive forward while the heading is within `tolerance_deg` of that
// direction, otherwise rotate the short way round.
inline Action waypoint_action(const EnvMap& env, const Pose& pose, const GridDistanceField& field,
                              Vec2 waypoint, double tolerance_deg = 20.0) {
  auto [cx, cy] = env.cell_of(pose.x, pose.y);
  Vec2 target = waypoint;
  int x = cx, y = cy;
  for (int hop = 0; hop < 6 && field.at(x, y) > 0.0; ++hop) {
    int bx = x, by = y;
    double best = field.at(x, y);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (field.at(x + dx, y + dy) < best) {
          best = field.at(x + dx, y + dy);
          bx = x + dx;
          by = y + dy;
        }
    if (bx == x && by == y) break;
    x = bx;
    y = by;
    target = field.at(x, y) > 0.0 ? env.cell_center(x, y) : waypoint;
  }
  const double ang = std::atan2(target.y - pose.y, target.x - pose.x) * 180.0 / std::numbers::pi;
  double err = std::remainder(ang - pose.heading * kHeadingStepDeg, 360.0);
  if (std::abs(err) <= tolerance_deg) return Action::Forward;
  return err > 0.0 ? Action::RotateLeft : Action::RotateRight;
}

}  // namespace detail

/// Random-waypoint exploration: repeatedly picks a reachable FREE cell
/// within `waypoint_radius_m` geodesic distance and walks to it with oracle
/// actions, mixing in uniformly random moves. A FORWARD that would collide
/// is replaced by a random rotation, so consecutive poses always differ.
inline CollectedRun collect_random_walk(const EnvMap& env, std::size_t num_steps, std::uint64_t seed,
                                        const WalkOptions& opt = {}) {
  if (num_steps < 2) throw std::invalid_argument("collect_random_walk: num_steps must be >= 2");
  if (env.free_count() < 2)
    throw std::invalid_argument("collect_random_walk: environment needs more than one free cell");
  Rng rng(derive_seed(seed, "collect"));
  Rng noise_rng(derive_seed(seed, "collect-noise"));
  CollectedRun run;
  run.trajectory.env_id = env.env_id();
  run.trajectory.observations.reserve(num_steps);
  run.trajectory.actions.reserve(num_steps - 1);
  run.poses.reserve(num_steps);

  Pose pose = random_valid_pose(env, rng);
  std::vector<std::uint32_t> visits(static_cast<std::size_t>(env.width()) * env.height(), 0);
  auto record = [&](const Pose& p) {
    auto [vx, vy] = env.cell_of(p.x, p.y);
    ++visits[env.index(vx, vy)];
    run.poses.push_back(p);
    run.trajectory.observations.push_back(observe(env, p, opt.noise_sigma, &noise_rng, opt.rays));
  };
  record(pose);

  std::optional<std::pair<int, int>> waypoint;
  GridDistanceField to_waypoint;
  int since_waypoint = 0;
  std::vector<std::pair<int, int>> candidates;

  while (run.trajectory.observations.size() < num_steps) {
    auto [cx, cy] = env.cell_of(pose.x, pose.y);
    const bool reached = waypoint && [&] {
      const Vec2 c = env.cell_center(waypoint->first, waypoint->second);
      return std::hypot(c.x - pose.x, c.y - pose.y) <= kWaypointReach;
    }();
    if (!waypoint || reached || since_waypoint >= opt.waypoint_timeout) {
      const auto around = GridDistanceField::compute(env, cx, cy, opt.waypoint_radius_m);
      candidates.clear();
      for (int pass = 0; pass < 2 && candidates.empty(); ++pass)
        for (int y = 0; y < env.height(); ++y)
          for (int x = 0; x < env.width(); ++x)
            if (const double d = around.at(x, y);
                d > 0.0 && std::isfinite(d) && (pass == 1 || d >= opt.waypoint_min_m))
              candidates.emplace_back(x, y);
      if (candidates.empty())
        throw std::invalid_argument("collect_random_walk: no reachable waypoint from start cell");
      // Least-visited of a few random draws, ties broken by smallest turn.
      std::pair<int, int> best{};
      double best_key = kInfinity;
      for (int draw = 0; draw < opt.waypoint_draws; ++draw) {
        const auto c = candidates[uniform_index(rng, candidates.size())];
        const Vec2 cc = env.cell_center(c.first, c.second);
        const double turn = std::abs(std::remainder(
            std::atan2(cc.y - pose.y, cc.x - pose.x) - heading_radians(pose.heading), 2.0 * std::numbers::pi));
        const double key = visits[env.index(c.first, c.second)] * 10.0 + turn;
        if (key < best_key) {
          best_key = key;
          best = c;
        }
      }
      waypoint = best;
      to_waypoint = GridDistanceField::compute(env, waypoint->first, waypoint->second);
      since_waypoint = 0;
    }
    Action action = detail::waypoint_action(env, pose, to_waypoint,
                                            env.cell_center(waypoint->first, waypoint->second));
    if (uniform01(rng) < opt.random_action_prob) action = kMoveActions[uniform_index(rng, 3)];
    StepResult res = step(env, pose, action);
    if (res.collided) {
      action = (rng() & 1u) ? Action::RotateLeft : Action::RotateRight;
      res = step(env, pose, action);
      if (uniform01(rng) < 0.5) waypoint.reset();
    }
    pose = res.pose;
    ++since_waypoint;
    run.trajectory.actions.push_back(action);
    record(pose);
  }
  run.trajectory.train_count = run.trajectory.observations.size();
  return run;
}

/// Fraction of FREE cells overlapped by the robot disc at some pose.
inline double coverage_fraction(const EnvMap& env, std::span<const Pose> poses) {
  std::vector<char> seen(static_cast<std::size_t>(env.width()) * env.height(), 0);
  const double cs = env.cell_size();
  const int reach = static_cast<int>(std::ceil(kRobotRadius / cs));
  for (const Pose& p : poses) {
    auto [cx, cy] = env.cell_of(p.x, p.y);
    for (int y = cy - reach; y <= cy + reach; ++y)
      for (int x = cx - reach; x <= cx + reach; ++x)
        if (env.is_free(x, y) &&
            geom::point_box_distance({p.x, p.y}, x * cs, y * cs, (x + 1) * cs, (y + 1) * cs) < kRobotRadius)
          seen[env.index(x, y)] = 1;
  }
  const auto hit = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), 1));
  return static_cast<double>(hit) / static_cast<double>(env.free_count());
}

}  // namespace o4a
