#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "patchlab/tabletop.hpp"
#include "testutil.hpp"

using namespace patchlab;
using namespace patchlab::tabletop;
using testutil::apple_orange_task;

TEST_CASE("layout is a pure function of (spec, seed)") {
    const TaskSpec task = apple_orange_task();
    const Scene a = generate_layout(task, 3);
    const Scene b = generate_layout(task, 3);
    REQUIRE(a.objects.size() == b.objects.size());
    for (std::size_t i = 0; i < a.objects.size(); ++i) {
        CHECK(a.objects[i].x == b.objects[i].x);
        CHECK(a.objects[i].y == b.objects[i].y);
        CHECK(a.objects[i].class_token == b.objects[i].class_token);
    }
}

TEST_CASE("25 seeds give 25 pairwise distinct layouts") {
    const TaskSpec task = apple_orange_task();
    std::vector<Scene> scenes;
    for (std::uint64_t s = 0; s < 25; ++s) scenes.push_back(generate_layout(task, s));
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        for (std::size_t j = i + 1; j < scenes.size(); ++j) {
            bool differs = false;
            for (std::size_t k = 0; k < scenes[i].objects.size(); ++k) {
                if (scenes[i].objects[k].x != scenes[j].objects[k].x ||
                    scenes[i].objects[k].y != scenes[j].objects[k].y) {
                    differs = true;
                }
            }
            CHECK(differs);
        }
    }
}

TEST_CASE("no initial overlap, exhaustively checked") {
    const TaskSpec task = apple_orange_task();
    const Scene scene = generate_layout(task, 7);
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        for (std::size_t j = i + 1; j < scene.objects.size(); ++j) {
            const auto& a = scene.objects[i];
            const auto& b = scene.objects[j];
            const double d = std::hypot(a.x - b.x, a.y - b.y);
            CHECK(d > a.radius + b.radius);
        }
    }
}

TEST_CASE("layouts keep the reserved patch region object-free") {
    const TaskSpec task = apple_orange_task();
    for (std::uint64_t s = 0; s < 35; ++s) {
        const Scene scene = generate_layout(task, s);
        for (const auto& o : scene.objects) {
            const double cx = std::clamp(o.x, geom::kPatchCenterX - geom::kPatchReserveHalf,
                                         geom::kPatchCenterX + geom::kPatchReserveHalf);
            const double cy = std::clamp(o.y, geom::kPatchCenterY - geom::kPatchReserveHalf,
                                         geom::kPatchCenterY + geom::kPatchReserveHalf);
            CHECK(std::hypot(o.x - cx, o.y - cy) > o.radius);
        }
    }
}

TEST_CASE("render: uniform background when nothing is on the table") {
    Scene empty;
    empty.gripper = {-10.0, -10.0, false, -1};  // parked out of view
    const Observation img = render(empty);
    for (std::size_t i = 0; i < img.size(); i += 3) {
        CHECK(img[i] == doctest::Approx(0.80));
        CHECK(img[i + 1] == doctest::Approx(0.78));
        CHECK(img[i + 2] == doctest::Approx(0.75));
    }
}

TEST_CASE("render: disc pixel count matches the analytic area oracle") {
    Scene scene;
    scene.gripper = {-10.0, -10.0, false, -1};
    ObjectState apple;
    apple.id = 0;
    apple.class_token = tok::APPLE;
    apple.color = class_color(tok::APPLE);
    apple.x = 6.0;
    apple.y = 6.0;
    scene.objects.push_back(apple);
    const Observation img = render(scene);
    int red_dominant = 0;
    for (std::size_t i = 0; i < img.size(); i += 3) {
        if (img[i] > 0.5 && img[i + 1] < 0.3 && img[i + 2] < 0.3) ++red_dominant;
    }
    const double expected = M_PI * std::pow(apple.radius * geom::kPxPerUnit, 2);
    CHECK(red_dominant > 0.9 * expected);
    CHECK(red_dominant < 1.1 * expected);
}

TEST_CASE("render determinism is bit-exact") {
    const Scene scene = generate_layout(apple_orange_task(), 5);
    const Observation a = render(scene);
    const Observation b = render(scene);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("render locality: recoloring one object only touches its disc") {
    Scene scene = generate_layout(apple_orange_task(), 2);
    const Observation before = render(scene);
    ObjectState& obj = scene.objects[1];
    obj.color = {0.0, 0.0, 0.0};
    const Observation after = render(scene);
    const double rp = obj.radius * geom::kPxPerUnit;
    for (int row = 0; row < geom::kImageSize; ++row) {
        for (int col = 0; col < geom::kImageSize; ++col) {
            const std::size_t i = (static_cast<std::size_t>(row) * geom::kImageSize + col) * 3;
            const bool changed = before[i] != after[i] || before[i + 1] != after[i + 1] ||
                                 before[i + 2] != after[i + 2];
            if (changed) {
                const double dx = (col + 0.5) - obj.x * geom::kPxPerUnit;
                const double dy = (row + 0.5) - obj.y * geom::kPxPerUnit;
                CHECK(dx * dx + dy * dy <= rp * rp);
            }
        }
    }
}

TEST_CASE("step: no-op leaves everything but the counter unchanged") {
    const Scene scene = generate_layout(apple_orange_task(), 0);
    const auto [next, done] = step(scene, Action::discrete(act::NOOP));
    CHECK(!done);
    CHECK(next.step_count == scene.step_count + 1);
    CHECK(next.gripper.x == scene.gripper.x);
    CHECK(next.gripper.y == scene.gripper.y);
    CHECK(next.objects.size() == scene.objects.size());
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
        CHECK(next.objects[i].x == scene.objects[i].x);
        CHECK(next.objects[i].y == scene.objects[i].y);
    }
}

TEST_CASE("step: grasp at object center takes hold; held object tracks the gripper") {
    Scene scene = generate_layout(apple_orange_task(), 1);
    const ObjectState* apple = scene.find_class(tok::APPLE);
    REQUIRE(apple != nullptr);
    scene.gripper.x = apple->x;
    scene.gripper.y = apple->y;
    auto [held, d1] = step(scene, Action::discrete(act::GRASP));
    REQUIRE(held.gripper.held_id == apple->id);
    CHECK(check_success(held, tok::APPLE, TaskKind::Pick));
    CHECK(!check_success(held, tok::ORANGE, TaskKind::Pick));

    auto [moved, d2] = step(held, Action::discrete(0));  // move east
    const ObjectState* tracked = moved.find_id(moved.gripper.held_id);
    REQUIRE(tracked != nullptr);
    CHECK(tracked->x == moved.gripper.x);
    CHECK(tracked->y == moved.gripper.y);
    CHECK(moved.objects.size() == scene.objects.size());
}

TEST_CASE("check_success trivial cases") {
    const Scene scene = generate_layout(apple_orange_task(), 4);
    CHECK(!check_success(scene, tok::APPLE, TaskKind::Pick));
    CHECK_THROWS_AS(check_success(scene, tok::CUP, TaskKind::Pick), QueryError);
}

TEST_CASE("expert: grasps on contact, moves toward the target otherwise") {
    Scene scene = generate_layout(apple_orange_task(), 6);
    const ObjectState* apple = scene.find_class(tok::APPLE);
    REQUIRE(apple != nullptr);

    SUBCASE("already at the target") {
        scene.gripper.x = apple->x;
        scene.gripper.y = apple->y;
        const auto [cot, action] = scripted_expert(scene, Instruction::of({tok::PICK, tok::APPLE}),
                                                   Action::Kind::Discrete);
        CHECK(action.token == act::GRASP);
    }
    SUBCASE("target straight to the left gives a westward move") {
        scene.gripper.x = apple->x + 4.0;
        scene.gripper.y = apple->y;
        const auto [cot, action] = scripted_expert(scene, Instruction::of({tok::PICK, tok::APPLE}),
                                                   Action::Kind::Discrete);
        CHECK(action.token == 4);  // west
    }
    SUBCASE("unknown class is rejected") {
        CHECK_THROWS_AS(scripted_expert(scene, Instruction::of({tok::PICK, tok::CUP}),
                                        Action::Kind::Discrete),
                        QueryError);
    }
}

TEST_CASE("expert bbox tokens decode to a rectangle containing the disc, pixelwise") {
    const TaskSpec task = apple_orange_task();
    for (std::uint64_t seed : {0ull, 3ull, 9ull, 17ull}) {
        const Scene scene = generate_layout(task, seed);
        const auto [cot, action] =
            scripted_expert(scene, task.user_instruction, Action::Kind::Discrete);
        const auto box = cot.bbox_px();
        const Observation img = render(scene);
        const auto color = class_color(tok::APPLE);
        for (int row = 0; row < geom::kImageSize; ++row) {
            for (int col = 0; col < geom::kImageSize; ++col) {
                const std::size_t i = (static_cast<std::size_t>(row) * geom::kImageSize + col) * 3;
                const bool is_apple =
                    img[i] == color[0] && img[i + 1] == color[1] && img[i + 2] == color[2];
                if (is_apple) {
                    CHECK(col >= box[0]);
                    CHECK(col < box[2]);
                    CHECK(row >= box[1]);
                    CHECK(row < box[3]);
                }
            }
        }
    }
}

TEST_CASE("expert reaches success within max_steps on every training layout") {
    for (const TaskSpec& task : {apple_orange_task(), testutil::kiwi_can_task()}) {
        for (const Action::Kind kind : {Action::Kind::Discrete, Action::Kind::Continuous}) {
            for (std::uint64_t seed = 0; seed < 25; ++seed) {
                Scene scene = generate_layout(task, seed);
                bool success = false;
                for (int t = 0; t < geom::kMaxSteps; ++t) {
                    const auto [cot, action] = scripted_expert(scene, task.user_instruction, kind);
                    auto [next, truncated] = step(scene, action);
                    scene = next;
                    if (check_success(scene, task.user_class, task.kind)) {
                        success = true;
                        break;
                    }
                    if (truncated) break;
                }
                CHECK(success);
            }
        }
    }
}

TEST_CASE("expert completes place tasks into the goal zone") {
    const TaskSpec task = testutil::place_task();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Scene scene = generate_layout(task, seed);
        REQUIRE(scene.goal_zone.has_value());
        bool success = false;
        for (int t = 0; t < geom::kMaxSteps; ++t) {
            const auto [cot, action] =
                scripted_expert(scene, task.user_instruction, Action::Kind::Continuous);
            auto [next, truncated] = step(scene, action);
            scene = next;
            if (check_success(scene, task.user_class, task.kind)) {
                success = true;
                break;
            }
            if (truncated) break;
        }
        CHECK(success);
    }
}

TEST_CASE("instruction helpers") {
    const Instruction ins = Instruction::of({tok::PLEASE, tok::PICK, tok::THE, tok::APPLE});
    CHECK(ins.target_class() == tok::APPLE);
    CHECK(ins.text() == "please pick the apple");
    CHECK_THROWS_AS(Instruction::of({tok::PICK}).target_class(), QueryError);
    CHECK_THROWS_AS(
        Instruction::of({1, 2, 3, 4, 5, 6, 7, 8, 9}),
        ContractError);
}

TEST_CASE("task spec validation") {
    TaskSpec bad = apple_orange_task();
    bad.target_class = bad.user_class;
    CHECK_THROWS_AS(bad.validate(), ContractError);

    TaskSpec no_distractor = apple_orange_task();
    no_distractor.distractors.clear();
    CHECK_THROWS_AS(no_distractor.validate(), ContractError);
}
