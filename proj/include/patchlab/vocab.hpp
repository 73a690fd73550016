#pragma once

#include <array>
#include <string>
#include <vector>

#include "patchlab/errors.hpp"

namespace patchlab::tabletop {

// One shared token space for instructions and reasoning sequences.
// Layout: PAD, verbs, object classes, filler words, 16 coordinate bins,
// then the structural BOS/END/ACT tokens.
namespace tok {
inline constexpr int PAD = 0;

inline constexpr int VERB_BASE = 1;
inline constexpr int PICK = 1, GRASP = 2, MOVE = 3, PLACE = 4, GET = 5, RETRIEVE = 6;
inline constexpr int NUM_VERBS = 6;

inline constexpr int CLASS_BASE = 7;
inline constexpr int APPLE = 7, ORANGE = 8, LEMON = 9, PLUM = 10, KIWI = 11, CAN = 12,
                     BOX = 13, CUP = 14;
inline constexpr int NUM_CLASSES = 8;

inline constexpr int FILLER_BASE = 15;
inline constexpr int THE = 15, A = 16, PLEASE = 17, NOW = 18, CAREFULLY = 19, UP = 20,
                     ON = 21, TABLE = 22;
inline constexpr int NUM_FILLERS = 8;

inline constexpr int BIN_BASE = 23;
inline constexpr int NUM_BINS = 16;

inline constexpr int BOS = 39;
inline constexpr int END = 40;
inline constexpr int ACT = 41;

inline constexpr int VOCAB_SIZE = 42;

inline constexpr bool is_class(int t) { return t >= CLASS_BASE && t < CLASS_BASE + NUM_CLASSES; }
inline constexpr bool is_bin(int t) { return t >= BIN_BASE && t < BIN_BASE + NUM_BINS; }
inline constexpr int bin_token(int bin) { return BIN_BASE + bin; }
inline constexpr int bin_value(int t) { return t - BIN_BASE; }
}  // namespace tok

std::string token_name(int token);
int token_from_name(const std::string& name);

// Display color of each object class, RGB in [0,1].
std::array<double, 3> class_color(int class_token);

// Instruction: token sequence over the shared vocabulary, length <= 8,
// stored padded with PAD to fixed width so sequence positions are static.
struct Instruction {
    static constexpr int kMaxLen = 8;
    std::array<int, kMaxLen> tokens{};  // PAD-filled
    int length = 0;

    static Instruction of(std::initializer_list<int> toks);
    static Instruction of(const std::vector<int>& toks);
    // First object-class token, or QueryError if none present.
    int target_class() const;
    bool mentions_class() const;
    std::string text() const;
    bool operator==(const Instruction&) const = default;
};

}  // namespace patchlab::tabletop
