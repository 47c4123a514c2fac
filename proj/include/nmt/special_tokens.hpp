#pragma once

namespace nmt {

// Reserved ids shared by every vocabulary.
inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

inline constexpr const char *kBosToken = "<s>";
inline constexpr const char *kEosToken = "</s>";
inline constexpr const char *kPadToken = "<pad>";
inline constexpr const char *kUnkToken = "<unk>";

}  // namespace nmt
