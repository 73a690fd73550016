#include "patchlab/vocab.hpp"

namespace patchlab::tabletop {

namespace {
const char* kNames[tok::VOCAB_SIZE] = {
    "<pad>", "pick", "grasp", "move",  "place", "get",  "retrieve",
    "apple", "orange", "lemon", "plum", "kiwi",  "can",  "box",   "cup",
    "the",   "a",      "please", "now", "carefully", "up", "on",  "table",
    "bin0",  "bin1",   "bin2",  "bin3", "bin4", "bin5", "bin6",  "bin7",
    "bin8",  "bin9",   "bin10", "bin11", "bin12", "bin13", "bin14", "bin15",
    "<bos>", "<end>",  "<act>"};
}  // namespace

std::string token_name(int token) {
    if (token < 0 || token >= tok::VOCAB_SIZE) {
        throw IndexError("token " + std::to_string(token) + " out of vocabulary");
    }
    return kNames[token];
}

int token_from_name(const std::string& name) {
    for (int t = 0; t < tok::VOCAB_SIZE; ++t) {
        if (name == kNames[t]) return t;
    }
    throw IndexError("unknown token name: " + name);
}

std::array<double, 3> class_color(int class_token) {
    switch (class_token) {
        case tok::APPLE:  return {0.85, 0.10, 0.10};
        case tok::ORANGE: return {0.95, 0.55, 0.08};
        case tok::LEMON:  return {0.93, 0.88, 0.15};
        case tok::PLUM:   return {0.55, 0.15, 0.60};
        case tok::KIWI:   return {0.35, 0.70, 0.20};
        case tok::CAN:    return {0.15, 0.35, 0.85};
        case tok::BOX:    return {0.55, 0.35, 0.15};
        case tok::CUP:    return {0.90, 0.45, 0.65};
        default:
            throw IndexError("token " + std::to_string(class_token) + " is not an object class");
    }
}

Instruction Instruction::of(std::initializer_list<int> toks) {
    return of(std::vector<int>(toks));
}

Instruction Instruction::of(const std::vector<int>& toks) {
    if (toks.size() > static_cast<std::size_t>(kMaxLen)) {
        throw ContractError("instruction longer than " + std::to_string(kMaxLen) + " tokens");
    }
    Instruction ins;
    ins.length = static_cast<int>(toks.size());
    for (int i = 0; i < ins.length; ++i) {
        if (toks[static_cast<std::size_t>(i)] < 0 ||
            toks[static_cast<std::size_t>(i)] >= tok::VOCAB_SIZE) {
            throw IndexError("instruction token out of vocabulary");
        }
        ins.tokens[static_cast<std::size_t>(i)] = toks[static_cast<std::size_t>(i)];
    }
    return ins;
}

int Instruction::target_class() const {
    for (int i = 0; i < length; ++i) {
        if (tok::is_class(tokens[static_cast<std::size_t>(i)])) {
            return tokens[static_cast<std::size_t>(i)];
        }
    }
    throw QueryError("instruction names no object class: " + text());
}

bool Instruction::mentions_class() const {
    for (int i = 0; i < length; ++i) {
        if (tok::is_class(tokens[static_cast<std::size_t>(i)])) return true;
    }
    return false;
}

std::string Instruction::text() const {
    std::string s;
    for (int i = 0; i < length; ++i) {
        if (i) s += ' ';
        s += token_name(tokens[static_cast<std::size_t>(i)]);
    }
    return s;
}

}  // namespace patchlab::tabletop
