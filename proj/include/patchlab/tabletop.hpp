#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "patchlab/tensor.hpp"
#include "patchlab/vocab.hpp"

namespace patchlab::tabletop {

// World geometry. The table is a 12x12-unit square rendered top-down into a
// 48x48 image (4 px per unit). A square region near the top-left corner is
// reserved for the adversarial patch and kept object-free at layout time.
namespace geom {
inline constexpr double kTableSize = 12.0;
inline constexpr int kImageSize = 48;
inline constexpr double kPxPerUnit = 4.0;
inline constexpr double kObjectRadius = 1.1;
inline constexpr double kContactMargin = 0.6;
inline constexpr double kMaxStepDelta = 1.0;
inline constexpr int kMaxSteps = 40;
inline constexpr int kBBoxBins = 16;
// Reserved patch region: square centered here, sized for the largest
// supported patch fraction (0.4 of the image width).
inline constexpr double kPatchCenterX = 3.0;
inline constexpr double kPatchCenterY = 3.0;
inline constexpr double kPatchReserveHalf = 2.6;
inline constexpr double kGripperStartX = 8.5;
inline constexpr double kGripperStartY = 9.5;
}  // namespace geom

struct Vec2 {
    double x = 0.0, y = 0.0;
};

struct ObjectState {
    int id = 0;
    int class_token = 0;
    std::array<double, 3> color{};
    double x = 0.0, y = 0.0;
    double radius = geom::kObjectRadius;
};

struct GripperState {
    double x = 0.0, y = 0.0;
    bool closed = false;
    int held_id = -1;  // -1 when empty
};

struct GoalZone {
    double x = 0.0, y = 0.0;
    double radius = 1.2;
};

struct Scene {
    std::vector<ObjectState> objects;
    GripperState gripper;
    std::optional<GoalZone> goal_zone;
    std::uint64_t layout_seed = 0;
    int step_count = 0;

    const ObjectState* find_class(int class_token) const;
    const ObjectState* find_id(int id) const;
};

enum class TaskKind { Pick, Place };

struct TaskSpec {
    std::string task_id;
    int user_class = 0;    // object the user instruction targets
    int target_class = 0;  // object the attacker wants manipulated
    std::vector<int> distractors;
    TaskKind kind = TaskKind::Pick;
    Instruction user_instruction;
    Instruction target_instruction;

    void validate() const;
    Instruction instruction_for(int class_token) const;
};

// Discrete action space: 8 compass moves, grasp, release, no-op.
namespace act {
inline constexpr int NUM_DISCRETE = 11;
inline constexpr int GRASP = 8, RELEASE = 9, NOOP = 10;
// Unit direction for move tokens 0..7 (E, NE, N, NW, W, SW, S, SE).
Vec2 direction(int token);
}  // namespace act

struct Action {
    enum class Kind { Discrete, Continuous };
    Kind kind = Kind::Discrete;
    int token = act::NOOP;            // discrete form
    double dx = 0.0, dy = 0.0;        // continuous form, clipped to +-1 per axis
    double grip = 0.0;                // >0.5 closes, <=0.5 opens

    static Action discrete(int token);
    static Action continuous(double dx, double dy, double grip);
};

// Reasoning token sequence: class token, 4 bbox-bin tokens, END.
struct CoT {
    std::vector<int> tokens;

    bool well_formed() const;
    int class_token() const;  // QueryError if malformed
    // Decoded bbox in pixels: {x0, y0, x1, y1}, end-exclusive.
    std::array<int, 4> bbox_px() const;
    std::string text() const;
    bool operator==(const CoT&) const = default;
};

using Observation = diffcore::Tensor;  // (48, 48, 3), values in [0,1]

// Deterministic in (spec, seed). Objects of both pair classes plus all
// distractors, placed without overlap and clear of the reserved patch
// region and the gripper start.
Scene generate_layout(const TaskSpec& spec, std::uint64_t seed);

Observation render(const Scene& scene);

// Pure step: returns the successor scene and whether max_steps was reached.
std::pair<Scene, bool> step(const Scene& scene, const Action& action);

bool check_success(const Scene& scene, int target_class, TaskKind kind);

// Ground-truth teacher. Emits the reasoning sequence for the instructed
// object and a greedy action toward it (discrete or continuous form).
std::pair<CoT, Action> scripted_expert(const Scene& scene, const Instruction& instr,
                                       Action::Kind kind);

// Expert bbox for an object, as bin tokens.
std::array<int, 4> object_bbox_bins(const ObjectState& obj);

bool in_contact(const GripperState& g, const ObjectState& o);

}  // namespace patchlab::tabletop
