#pragma once
// "O4AD" trajectory files.
//
//   magic "O4AD" | u32 version=1 | u16 len + env_id | u32 obs_dim | u32 count
//   count x { f32[obs_dim] observation | u8 action }   (last action = 255)
//   u8 pose flag (0 absent, 1 present)
//   [count x { f64 x | f64 y | u8 heading }]            (evaluation files only)
//
// All values little-endian. The 70/30 split marker lives in a sidecar
// "<file>.meta" text file next to the trajectory.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "o4a/common.hpp"
#include "o4a/config.hpp"
#include "o4a/sim.hpp"

namespace o4a {

inline constexpr std::uint32_t kTrajectoryVersion = 1;
inline constexpr std::uint8_t kNoActionSentinel = 255;

struct TrajectoryFile {
  Trajectory trajectory;
  std::optional<std::vector<Pose>> poses;
};

inline void write_trajectory(std::ostream& out, const Trajectory& traj,
                             const std::vector<Pose>* poses = nullptr) {
  const std::size_t n = traj.observations.size();
  if (n == 0) throw std::invalid_argument("write_trajectory: empty trajectory");
  if (traj.actions.size() + 1 != n)
    throw std::invalid_argument("write_trajectory: need exactly one action per transition");
  if (poses && poses->size() != n) throw std::invalid_argument("write_trajectory: pose count mismatch");
  const auto dim = static_cast<std::uint32_t>(traj.obs_dim());
  io::write_magic(out, "O4AD");
  io::write_le<std::uint32_t>(out, kTrajectoryVersion);
  io::write_string16(out, traj.env_id);
  io::write_le<std::uint32_t>(out, dim);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(n));
  for (std::size_t t = 0; t < n; ++t) {
    const auto& v = traj.observations[t].values;
    if (static_cast<std::uint32_t>(v.size()) != dim)
      throw DimensionMismatch("write_trajectory: inconsistent observation dimension");
    for (Eigen::Index i = 0; i < v.size(); ++i) io::write_le<float>(out, static_cast<float>(v[i]));
    io::write_le<std::uint8_t>(out, t + 1 < n ? static_cast<std::uint8_t>(traj.actions[t]) : kNoActionSentinel);
  }
  io::write_le<std::uint8_t>(out, poses ? 1 : 0);
  if (poses)
    for (const auto& p : *poses) {
      io::write_le<double>(out, p.x);
      io::write_le<double>(out, p.y);
      io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(p.heading));
    }
}

inline TrajectoryFile read_trajectory(std::istream& in) {
  io::expect_magic(in, "O4AD");
  const auto version = io::read_le<std::uint32_t>(in);
  if (version != kTrajectoryVersion)
    throw FormatError("unsupported trajectory file version " + std::to_string(version));
  TrajectoryFile f;
  f.trajectory.env_id = io::read_string16(in);
  const auto dim = io::read_le<std::uint32_t>(in);
  const auto n = io::read_le<std::uint32_t>(in);
  if (n == 0) throw FormatError("trajectory file has no records");
  f.trajectory.observations.reserve(n);
  for (std::uint32_t t = 0; t < n; ++t) {
    Observation obs{Eigen::VectorXd(dim)};
    for (std::uint32_t i = 0; i < dim; ++i) obs.values[i] = io::read_le<float>(in);
    f.trajectory.observations.push_back(std::move(obs));
    const auto code = io::read_le<std::uint8_t>(in);
    if (t + 1 < n) {
      if (code < 1 || code > 3) throw FormatError("invalid action code " + std::to_string(code));
      f.trajectory.actions.push_back(static_cast<Action>(code));
    } else if (code != kNoActionSentinel) {
      throw FormatError("last record must carry the 255 action sentinel");
    }
  }
  f.trajectory.train_count = n;
  const int flag = in.peek();
  if (flag == std::char_traits<char>::eof()) return f;
  const auto has_poses = io::read_le<std::uint8_t>(in);
  if (has_poses > 1) throw FormatError("invalid pose block flag");
  if (has_poses) {
    std::vector<Pose> poses;
    poses.reserve(n);
    for (std::uint32_t t = 0; t < n; ++t) {
      Pose p;
      p.x = io::read_le<double>(in);
      p.y = io::read_le<double>(in);
      p.heading = io::read_le<std::uint8_t>(in);
      if (p.heading >= kHeadingSlots) throw FormatError("invalid heading in pose block");
      poses.push_back(p);
    }
    f.poses = std::move(poses);
  }
  return f;
}

inline std::filesystem::path trajectory_meta_path(const std::filesystem::path& path) {
  return path.string() + ".meta";
}

/// Writes the trajectory plus its split-marker sidecar.
inline void save_trajectory(const std::filesystem::path& path, const Trajectory& traj,
                            const std::vector<Pose>* poses = nullptr) {
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_trajectory(out, traj, poses);
  }
  KeyValueFile meta;
  meta.set("format", "O4AD-meta");
  meta.set("env_id", traj.env_id);
  meta.set("count", std::to_string(traj.size()));
  meta.set("train_count", std::to_string(traj.train_count));
  meta.save(trajectory_meta_path(path));
}

inline TrajectoryFile load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  TrajectoryFile f = read_trajectory(in);
  const auto meta_path = trajectory_meta_path(path);
  if (std::filesystem::exists(meta_path)) {
    const auto meta = KeyValueFile::load(meta_path);
    const auto tc = meta.get_size("train_count");
    if (tc > f.trajectory.size()) throw FormatError("train_count exceeds record count in " + meta_path.string());
    f.trajectory.train_count = tc;
  }
  return f;
}

}  // namespace o4a
