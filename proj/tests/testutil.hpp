#pragma once

#include <filesystem>
#include <string>

#include "patchlab/tabletop.hpp"

namespace patchlab::testutil {

inline tabletop::TaskSpec apple_orange_task() {
    using namespace tabletop;
    TaskSpec t;
    t.task_id = "apple_orange";
    t.user_class = tok::APPLE;
    t.target_class = tok::ORANGE;
    t.distractors = {tok::LEMON};
    t.kind = TaskKind::Pick;
    t.user_instruction = Instruction::of({tok::PICK, tok::APPLE});
    t.target_instruction = Instruction::of({tok::PICK, tok::ORANGE});
    return t;
}

inline tabletop::TaskSpec kiwi_can_task() {
    using namespace tabletop;
    TaskSpec t;
    t.task_id = "kiwi_can";
    t.user_class = tok::KIWI;
    t.target_class = tok::CAN;
    t.distractors = {tok::PLUM};
    t.kind = TaskKind::Pick;
    t.user_instruction = Instruction::of({tok::PICK, tok::KIWI});
    t.target_instruction = Instruction::of({tok::PICK, tok::CAN});
    return t;
}

inline tabletop::TaskSpec place_task() {
    using namespace tabletop;
    TaskSpec t;
    t.task_id = "place_apple_can";
    t.user_class = tok::APPLE;
    t.target_class = tok::CAN;
    t.distractors = {tok::KIWI};
    t.kind = TaskKind::Place;
    t.user_instruction = Instruction::of({tok::PLACE, tok::APPLE});
    t.target_instruction = Instruction::of({tok::PLACE, tok::CAN});
    return t;
}

class TempDir {
public:
    explicit TempDir(const std::string& name) {
        path_ = std::filesystem::temp_directory_path() / ("patchlab_" + name);
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace patchlab::testutil
