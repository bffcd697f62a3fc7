#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "umr/errors.hpp"

namespace umr {

enum class Modality : std::uint8_t { text = 0, image = 1, image_text = 2 };

inline constexpr std::array<Modality, 3> kModalities = {Modality::text, Modality::image, Modality::image_text};

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::image_text: return "image_text";
  }
  return "?";
}

inline Modality parse_modality(std::string_view s) {
  for (auto m : kModalities)
    if (to_string(m) == s) return m;
  throw LookupError("unknown modality '" + std::string(s) + "'");
}

/// The eight query -> candidate task types.
enum class Task : std::uint8_t { t2i = 0, t2t, i2t, i2i, t2it, it2t, it2i, it2it };

inline constexpr std::array<Task, 8> kTasks = {Task::t2i,  Task::t2t,  Task::i2t,  Task::i2i,
                                               Task::t2it, Task::it2t, Task::it2i, Task::it2it};

inline std::string_view to_string(Task t) {
  constexpr std::array<std::string_view, 8> names = {"t2i", "t2t", "i2t", "i2i", "t2it", "it2t", "it2i", "it2it"};
  return names[static_cast<std::size_t>(t)];
}

inline Task parse_task(std::string_view s) {
  for (auto t : kTasks)
    if (to_string(t) == s) return t;
  throw LookupError("unknown task '" + std::string(s) + "'");
}

inline Modality query_modality(Task t) {
  switch (t) {
    case Task::t2i: case Task::t2t: case Task::t2it: return Modality::text;
    case Task::i2t: case Task::i2i: return Modality::image;
    default: return Modality::image_text;
  }
}

inline Modality candidate_modality(Task t) {
  switch (t) {
    case Task::t2t: case Task::i2t: case Task::it2t: return Modality::text;
    case Task::t2i: case Task::i2i: case Task::it2i: return Modality::image;
    default: return Modality::image_text;
  }
}

/// Reserved token ids (0-63). Content tokens live in the modality vocab ranges.
namespace tok {
inline constexpr std::uint32_t kPad = 0;
inline constexpr std::uint32_t kRet = 1;
inline constexpr std::uint32_t kSep = 2;
inline constexpr std::uint32_t kModText = 3;
inline constexpr std::uint32_t kModImage = 4;
inline constexpr std::uint32_t kModImageText = 5;
inline constexpr std::uint32_t kSumText = 6;
inline constexpr std::uint32_t kSumImage = 7;
inline constexpr std::uint32_t kSumImageText = 8;
/// No-op instruction placed on every candidate prompt.
inline constexpr std::uint32_t kCandidateInstr = 9;
/// Query instruction for task t is kInstrBase + t.
inline constexpr std::uint32_t kInstrBase = 16;
inline constexpr std::uint32_t kReservedEnd = 64;

inline constexpr std::uint32_t instruction(Task t) { return kInstrBase + static_cast<std::uint32_t>(t); }

inline constexpr std::uint32_t modality_marker(Modality m) { return kModText + static_cast<std::uint32_t>(m); }

inline constexpr std::uint32_t summary_marker(Modality m) { return kSumText + static_cast<std::uint32_t>(m); }
}  // namespace tok

/// Number of framing tokens around content: instruction, modality, SEP, summary, RET.
inline constexpr std::size_t kPromptOverhead = 5;

}  // namespace umr
