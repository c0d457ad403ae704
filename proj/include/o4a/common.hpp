#pragma once
// Shared vocabulary: actions, error types, seeded random streams and
// little-endian binary helpers used by every file format in the library.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace o4a {

/// Discrete action space. The enumerator order is the canonical order used
/// for every tie-break, and the underlying values are the on-disk codes.
enum class Action : std::uint8_t { Stop = 0, Forward = 1, RotateRight = 2, RotateLeft = 3 };

/// The three actions that move the robot, in canonical order.
inline constexpr std::array<Action, 3> kMoveActions{Action::Forward, Action::RotateRight,
                                                     Action::RotateLeft};

inline constexpr bool is_move(Action a) noexcept { return a != Action::Stop; }

/// Index of a move action inside kMoveActions (FORWARD=0, RIGHT=1, LEFT=2).
inline int move_index(Action a) {
  switch (a) {
    case Action::Forward: return 0;
    case Action::RotateRight: return 1;
    case Action::RotateLeft: return 2;
    case Action::Stop: break;
  }
  throw std::invalid_argument("move_index: STOP is not a move action");
}

inline std::string_view action_name(Action a) noexcept {
  switch (a) {
    case Action::Stop: return "STOP";
    case Action::Forward: return "FORWARD";
    case Action::RotateRight: return "ROTATE_RIGHT";
    case Action::RotateLeft: return "ROTATE_LEFT";
  }
  return "?";
}

inline Action action_from_name(std::string_view s) {
  for (Action a : {Action::Stop, Action::Forward, Action::RotateRight, Action::RotateLeft})
    if (action_name(a) == s) return a;
  throw std::invalid_argument("unknown action name: " + std::string(s));
}

/// Raised when a caller breaks an operation's precondition.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

/// Raised when tensor or vector shapes disagree.
struct DimensionMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised by every binary/text reader on malformed or unsupported input.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent sub-stream seeds and the
/// wall texture hash.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Seed for a named sub-stream of a run seed. Distinct tags give unrelated
/// streams so e.g. episode sampling never overlaps data collection.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : tag) h = (h ^ c) * 0x100000001B3ULL;
  return mix64(seed ^ mix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::uint64_t index) noexcept {
  return mix64(derive_seed(seed, tag) + index);
}

/// Uniform index in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

namespace io {

// Fixed little-endian encoding regardless of host byte order.
template <class T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  U bits = std::bit_cast<U>(value);
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  out.write(bytes.data(), bytes.size());
}

template <class T>
T read_le(std::istream& in) {
  static_assert(std::is_trivially_copyable_v<T>);
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  std::array<unsigned char, sizeof(T)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw FormatError("unexpected end of file");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

inline void write_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in || got != magic) throw FormatError("bad magic, expected " + std::string(magic));
}

inline void write_string16(std::ostream& out, std::string_view s) {
  if (s.size() > 0xFFFF) throw std::invalid_argument("string too long for u16 length prefix");
  write_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string16(std::istream& in) {
  auto len = read_le<std::uint16_t>(in);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw FormatError("truncated string");
  return s;
}

}  // namespace io
}  // namespace o4a
