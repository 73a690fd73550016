#include "patchlab/tabletop.hpp"

#include <algorithm>
#include <cmath>

#include "patchlab/rng.hpp"

namespace patchlab::tabletop {

using geom::kImageSize;
using geom::kPxPerUnit;
using geom::kTableSize;

const ObjectState* Scene::find_class(int class_token) const {
    for (const auto& o : objects) {
        if (o.class_token == class_token) return &o;
    }
    return nullptr;
}

const ObjectState* Scene::find_id(int id) const {
    for (const auto& o : objects) {
        if (o.id == id) return &o;
    }
    return nullptr;
}

void TaskSpec::validate() const {
    if (user_class == target_class) throw ContractError(task_id + ": pair classes must differ");
    if (!tok::is_class(user_class) || !tok::is_class(target_class)) {
        throw ContractError(task_id + ": pair entries must be object classes");
    }
    if (distractors.empty()) throw ContractError(task_id + ": at least one distractor required");
    for (const int d : distractors) {
        if (d == user_class || d == target_class) {
            throw ContractError(task_id + ": distractors must be disjoint from the pair");
        }
    }
    if (user_instruction.target_class() != user_class ||
        target_instruction.target_class() != target_class) {
        throw ContractError(task_id + ": instructions do not match the pair classes");
    }
}

Instruction TaskSpec::instruction_for(int class_token) const {
    if (class_token == user_class) return user_instruction;
    if (class_token == target_class) return target_instruction;
    throw QueryError(task_id + ": class is not part of the task pair");
}

namespace act {
Vec2 direction(int token) {
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    switch (token) {
        case 0: return {1.0, 0.0};
        case 1: return {kInvSqrt2, -kInvSqrt2};
        case 2: return {0.0, -1.0};
        case 3: return {-kInvSqrt2, -kInvSqrt2};
        case 4: return {-1.0, 0.0};
        case 5: return {-kInvSqrt2, kInvSqrt2};
        case 6: return {0.0, 1.0};
        case 7: return {kInvSqrt2, kInvSqrt2};
        default: throw IndexError("not a move token: " + std::to_string(token));
    }
}
}  // namespace act

Action Action::discrete(int token) {
    if (token < 0 || token >= act::NUM_DISCRETE) {
        throw IndexError("discrete action token out of range: " + std::to_string(token));
    }
    Action a;
    a.kind = Kind::Discrete;
    a.token = token;
    return a;
}

Action Action::continuous(double dx, double dy, double grip) {
    Action a;
    a.kind = Kind::Continuous;
    a.dx = std::clamp(dx, -geom::kMaxStepDelta, geom::kMaxStepDelta);
    a.dy = std::clamp(dy, -geom::kMaxStepDelta, geom::kMaxStepDelta);
    a.grip = grip;
    return a;
}

bool CoT::well_formed() const {
    if (tokens.size() < 2 || tokens.size() > 8) return false;
    if (tokens.back() != tok::END) return false;
    return true;
}

int CoT::class_token() const {
    if (tokens.empty() || !tok::is_class(tokens[0])) {
        throw QueryError("reasoning sequence has no leading class token");
    }
    return tokens[0];
}

std::array<int, 4> CoT::bbox_px() const {
    if (tokens.size() < 5) throw QueryError("reasoning sequence has no bbox tokens");
    std::array<int, 4> px{};
    const int bin_px = kImageSize / geom::kBBoxBins;
    for (int i = 0; i < 4; ++i) {
        const int t = tokens[static_cast<std::size_t>(i) + 1];
        if (!tok::is_bin(t)) throw QueryError("bbox token expected at position " + std::to_string(i + 1));
        px[static_cast<std::size_t>(i)] = tok::bin_value(t) * bin_px;
    }
    // Tokens are (x0,y0,x1,y1) bins; the decoded box is end-exclusive.
    px[2] += bin_px;
    px[3] += bin_px;
    return px;
}

std::string CoT::text() const {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += ' ';
        s += token_name(tokens[i]);
    }
    return s;
}

namespace {

bool clear_of_patch_region(double x, double y, double radius) {
    const double lo_x = geom::kPatchCenterX - geom::kPatchReserveHalf;
    const double hi_x = geom::kPatchCenterX + geom::kPatchReserveHalf;
    const double lo_y = geom::kPatchCenterY - geom::kPatchReserveHalf;
    const double hi_y = geom::kPatchCenterY + geom::kPatchReserveHalf;
    const double cx = std::clamp(x, lo_x, hi_x);
    const double cy = std::clamp(y, lo_y, hi_y);
    const double dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy > radius * radius;
}

}  // namespace

Scene generate_layout(const TaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, "layout", fnv1a64(spec.task_id)));

    std::vector<int> classes{spec.user_class, spec.target_class};
    classes.insert(classes.end(), spec.distractors.begin(), spec.distractors.end());

    Scene scene;
    scene.layout_seed = seed;
    scene.gripper = {geom::kGripperStartX, geom::kGripperStartY, false, -1};
    if (spec.kind == TaskKind::Place) scene.goal_zone = GoalZone{9.5, 2.5, 1.2};

    const double r = geom::kObjectRadius;
    const double margin = 0.2;
    constexpr int kMaxAttempts = 4000;
    int attempts = 0;
    for (std::size_t k = 0; k < classes.size(); ++k) {
        while (true) {
            if (++attempts > kMaxAttempts) {
                throw LayoutError(spec.task_id + ": placement failed after " +
                                  std::to_string(kMaxAttempts) +
                                  " attempts; widen the table or shrink radii");
            }
            const double x = rng.uniform(r + margin, kTableSize - r - margin);
            const double y = rng.uniform(r + margin, kTableSize - r - margin);
            if (!clear_of_patch_region(x, y, r + 0.3)) continue;
            const double gdx = x - scene.gripper.x, gdy = y - scene.gripper.y;
            if (gdx * gdx + gdy * gdy < (r + 1.2) * (r + 1.2)) continue;
            if (scene.goal_zone) {
                const double zdx = x - scene.goal_zone->x, zdy = y - scene.goal_zone->y;
                const double zr = scene.goal_zone->radius + r + 0.2;
                if (zdx * zdx + zdy * zdy < zr * zr) continue;
            }
            bool overlaps = false;
            for (const auto& o : scene.objects) {
                const double dx = x - o.x, dy = y - o.y;
                const double min_d = o.radius + r + 0.35;
                if (dx * dx + dy * dy <= min_d * min_d) {
                    overlaps = true;
                    break;
                }
            }
            if (overlaps) continue;
            ObjectState obj;
            obj.id = static_cast<int>(k);
            obj.class_token = classes[k];
            obj.color = class_color(classes[k]);
            obj.x = x;
            obj.y = y;
            obj.radius = r;
            scene.objects.push_back(obj);
            break;
        }
    }
    return scene;
}

Observation render(const Scene& scene) {
    Observation img({kImageSize, kImageSize, 3});
    constexpr std::array<double, 3> kBackground{0.80, 0.78, 0.75};
    constexpr std::array<double, 3> kGripperColor{0.10, 0.10, 0.12};
    constexpr std::array<double, 3> kZoneColor{0.62, 0.62, 0.58};

    double* px = img.data();
    for (int i = 0; i < kImageSize * kImageSize; ++i) {
        px[i * 3 + 0] = kBackground[0];
        px[i * 3 + 1] = kBackground[1];
        px[i * 3 + 2] = kBackground[2];
    }

    // Goal zone first (underneath objects).
    if (scene.goal_zone) {
        const auto& z = *scene.goal_zone;
        const double cpx = z.x * kPxPerUnit, cpy = z.y * kPxPerUnit;
        const double rp = z.radius * kPxPerUnit;
        for (int row = 0; row < kImageSize; ++row) {
            for (int col = 0; col < kImageSize; ++col) {
                const double dx = (col + 0.5) - cpx, dy = (row + 0.5) - cpy;
                if (dx * dx + dy * dy <= rp * rp) {
                    double* p = img.data() + (static_cast<std::size_t>(row) * kImageSize + col) * 3;
                    p[0] = kZoneColor[0];
                    p[1] = kZoneColor[1];
                    p[2] = kZoneColor[2];
                }
            }
        }
    }

    for (const auto& o : scene.objects) {
        const double cpx = o.x * kPxPerUnit, cpy = o.y * kPxPerUnit;
        const double rp = o.radius * kPxPerUnit;
        const int r0 = std::max(0, static_cast<int>(std::floor(cpy - rp)));
        const int r1 = std::min(kImageSize - 1, static_cast<int>(std::ceil(cpy + rp)));
        const int c0 = std::max(0, static_cast<int>(std::floor(cpx - rp)));
        const int c1 = std::min(kImageSize - 1, static_cast<int>(std::ceil(cpx + rp)));
        for (int row = r0; row <= r1; ++row) {
            for (int col = c0; col <= c1; ++col) {
                const double dx = (col + 0.5) - cpx, dy = (row + 0.5) - cpy;
                if (dx * dx + dy * dy <= rp * rp) {
                    double* p = img.data() + (static_cast<std::size_t>(row) * kImageSize + col) * 3;
                    p[0] = o.color[0];
                    p[1] = o.color[1];
                    p[2] = o.color[2];
                }
            }
        }
    }

    // Gripper cross: 2-px-wide arms, 9 px long, drawn on top.
    {
        const int gx = static_cast<int>(std::floor(scene.gripper.x * kPxPerUnit));
        const int gy = static_cast<int>(std::floor(scene.gripper.y * kPxPerUnit));
        auto paint = [&](int row, int col) {
            if (row < 0 || row >= kImageSize || col < 0 || col >= kImageSize) return;
            double* p = img.data() + (static_cast<std::size_t>(row) * kImageSize + col) * 3;
            p[0] = kGripperColor[0];
            p[1] = kGripperColor[1];
            p[2] = kGripperColor[2];
        };
        for (int d = -4; d <= 4; ++d) {
            for (int w = 0; w <= 1; ++w) {
                paint(gy + d, gx + w);
                paint(gy + w, gx + d);
            }
        }
    }
    return img;
}

bool in_contact(const GripperState& g, const ObjectState& o) {
    const double dx = g.x - o.x, dy = g.y - o.y;
    const double reach = o.radius + geom::kContactMargin;
    return dx * dx + dy * dy <= reach * reach;
}

std::pair<Scene, bool> step(const Scene& scene, const Action& action) {
    Scene next = scene;
    next.step_count = scene.step_count + 1;

    double dx = 0.0, dy = 0.0;
    bool want_grasp = false, want_release = false;
    if (action.kind == Action::Kind::Discrete) {
        if (action.token < 8) {
            const Vec2 d = act::direction(action.token);
            dx = d.x;
            dy = d.y;
        } else if (action.token == act::GRASP) {
            want_grasp = true;
        } else if (action.token == act::RELEASE) {
            want_release = true;
        }
    } else {
        dx = std::clamp(action.dx, -geom::kMaxStepDelta, geom::kMaxStepDelta);
        dy = std::clamp(action.dy, -geom::kMaxStepDelta, geom::kMaxStepDelta);
        want_grasp = action.grip > 0.5 && scene.gripper.held_id < 0;
        want_release = action.grip <= 0.5 && scene.gripper.held_id >= 0;
    }

    next.gripper.x = std::clamp(next.gripper.x + dx, 0.0, kTableSize);
    next.gripper.y = std::clamp(next.gripper.y + dy, 0.0, kTableSize);

    if (want_grasp && next.gripper.held_id < 0) {
        int best = -1;
        double best_d2 = 0.0;
        for (const auto& o : next.objects) {
            if (!in_contact(next.gripper, o)) continue;
            const double ddx = next.gripper.x - o.x, ddy = next.gripper.y - o.y;
            const double d2 = ddx * ddx + ddy * ddy;
            if (best < 0 || d2 < best_d2) {
                best = o.id;
                best_d2 = d2;
            }
        }
        if (best >= 0) {
            next.gripper.held_id = best;
            next.gripper.closed = true;
        }
    } else if (want_release && next.gripper.held_id >= 0) {
        next.gripper.held_id = -1;
        next.gripper.closed = false;
    }

    // Held object tracks the gripper.
    if (next.gripper.held_id >= 0) {
        for (auto& o : next.objects) {
            if (o.id == next.gripper.held_id) {
                o.x = next.gripper.x;
                o.y = next.gripper.y;
            }
        }
    }

    return {next, next.step_count >= geom::kMaxSteps};
}

bool check_success(const Scene& scene, int target_class, TaskKind kind) {
    if (scene.find_class(target_class) == nullptr) {
        throw QueryError("class not present in scene: " + token_name(target_class));
    }
    if (kind == TaskKind::Pick) {
        if (scene.gripper.held_id < 0) return false;
        const ObjectState* held = scene.find_id(scene.gripper.held_id);
        return held != nullptr && held->class_token == target_class;
    }
    if (!scene.goal_zone) return false;
    for (const auto& o : scene.objects) {
        if (o.class_token != target_class) continue;
        const double dx = o.x - scene.goal_zone->x, dy = o.y - scene.goal_zone->y;
        const double reach = scene.goal_zone->radius + o.radius;
        if (dx * dx + dy * dy <= reach * reach) return true;
    }
    return false;
}

std::array<int, 4> object_bbox_bins(const ObjectState& obj) {
    const double bin_px = static_cast<double>(kImageSize) / geom::kBBoxBins;
    auto to_bin = [&](double coord_px) {
        const int b = static_cast<int>(std::floor(coord_px / bin_px));
        return std::clamp(b, 0, geom::kBBoxBins - 1);
    };
    const double x0 = (obj.x - obj.radius) * kPxPerUnit;
    const double y0 = (obj.y - obj.radius) * kPxPerUnit;
    const double x1 = (obj.x + obj.radius) * kPxPerUnit;
    const double y1 = (obj.y + obj.radius) * kPxPerUnit;
    return {to_bin(x0), to_bin(y0), to_bin(x1), to_bin(y1)};
}

std::pair<CoT, Action> scripted_expert(const Scene& scene, const Instruction& instr,
                                       Action::Kind kind) {
    const int cls = instr.target_class();
    const ObjectState* target = scene.find_class(cls);
    if (target == nullptr) throw QueryError("instructed class absent: " + token_name(cls));

    CoT cot;
    cot.tokens.push_back(cls);
    for (const int b : object_bbox_bins(*target)) cot.tokens.push_back(tok::bin_token(b));
    cot.tokens.push_back(tok::END);

    const bool holding_target = scene.gripper.held_id == target->id;
    const int verb = instr.tokens[0];
    const bool place_task =
        (verb == tok::PLACE || verb == tok::MOVE) && scene.goal_zone.has_value();

    double gx = target->x, gy = target->y;  // where the gripper should head
    bool want_grasp = false, want_release = false;
    if (holding_target && place_task && scene.goal_zone) {
        gx = scene.goal_zone->x;
        gy = scene.goal_zone->y;
        const double dxz = scene.gripper.x - gx, dyz = scene.gripper.y - gy;
        if (dxz * dxz + dyz * dyz <= scene.goal_zone->radius * scene.goal_zone->radius) {
            want_release = true;
        }
    } else if (!holding_target) {
        want_grasp = in_contact(scene.gripper, *target);
    }

    const double dx = gx - scene.gripper.x;
    const double dy = gy - scene.gripper.y;

    if (kind == Action::Kind::Continuous) {
        double grip;
        if (want_release) {
            grip = 0.0;
        } else if (want_grasp || holding_target) {
            grip = 1.0;
        } else {
            grip = 0.0;
        }
        if (want_grasp || want_release || (holding_target && !place_task)) {
            return {cot, Action::continuous(0.0, 0.0, grip)};
        }
        return {cot, Action::continuous(std::clamp(dx, -1.0, 1.0), std::clamp(dy, -1.0, 1.0), grip)};
    }

    if (want_release) return {cot, Action::discrete(act::RELEASE)};
    if (want_grasp) return {cot, Action::discrete(act::GRASP)};
    if (holding_target && !place_task) return {cot, Action::discrete(act::NOOP)};
    if (dx * dx + dy * dy < 1e-12) return {cot, Action::discrete(act::NOOP)};
    // Pick the compass direction best aligned with the offset.
    int best = 0;
    double best_dot = -2.0;
    const double norm = std::sqrt(dx * dx + dy * dy);
    for (int t = 0; t < 8; ++t) {
        const Vec2 d = act::direction(t);
        const double dot = (d.x * dx + d.y * dy) / norm;
        if (dot > best_dot) {
            best_dot = dot;
            best = t;
        }
    }
    return {cot, Action::discrete(best)};
}

}  // namespace patchlab::tabletop
