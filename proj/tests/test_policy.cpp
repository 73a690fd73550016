#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "patchlab/dataset.hpp"
#include "patchlab/policy.hpp"
#include "patchlab/rng.hpp"
#include "testutil.hpp"

using namespace patchlab;
using namespace patchlab::policy;
using tabletop::Action;
using tabletop::CoT;
using tabletop::Instruction;
using tabletop::TaskSpec;
namespace tok = tabletop::tok;

namespace {

PolicyParams small_random_policy(Action::Kind kind, std::uint64_t seed) {
    PolicyConfig cfg;
    cfg.head_kind = kind;
    PolicyParams p = PolicyParams::init(cfg, seed);
    // Give the zero-initialized heads some signal for forward-equality tests.
    Rng rng(derive_seed(seed, "head-noise"));
    for (std::size_t i = 0; i < p.cot_head.size(); ++i) p.cot_head[i] = rng.normal(0.0, 0.3);
    for (std::size_t i = 0; i < p.act_head.size(); ++i) p.act_head[i] = rng.normal(0.0, 0.3);
    return p;
}

std::vector<double> graph_cot_logits_at(const PolicyParams& params, const Observation& obs,
                                        const Instruction& instr,
                                        const std::vector<int>& cot_prefix, int row_offset) {
    Graph g;
    ParamLeaves pl = make_param_leaves(g, params, false);
    auto obs_leaf = g.leaf(obs);
    TrunkOptions opts;
    TrunkOut trunk = build_trunk(g, pl, obs_leaf, instr, cot_prefix, opts);
    diffcore::Tensor sel({1, trunk.seq_len});
    sel[static_cast<std::size_t>(trunk.bos_row + row_offset)] = 1.0;
    auto logits = g.matmul(g.matmul(g.leaf(sel), trunk.hidden), pl.cot_head);
    return logits->values();
}

}  // namespace

TEST_CASE("fast decode logits equal the graph forward bit for bit") {
    const TaskSpec task = testutil::apple_orange_task();
    const Observation obs = tabletop::render(tabletop::generate_layout(task, 3));
    const PolicyParams params = small_random_policy(Action::Kind::Continuous, 7);

    const auto rows = cot_teacher_logits(params, obs, task.user_instruction,
                                         {tok::APPLE, tok::bin_token(3), tok::bin_token(5)});
    const auto g0 = graph_cot_logits_at(params, obs, task.user_instruction,
                                        {tok::APPLE, tok::bin_token(3), tok::bin_token(5)}, 0);
    const auto g3 = graph_cot_logits_at(params, obs, task.user_instruction,
                                        {tok::APPLE, tok::bin_token(3), tok::bin_token(5)}, 3);
    REQUIRE(rows.size() == 4);
    // Identical arithmetic order; only FMA contraction may differ between
    // the two compiled loops, so agreement is checked at 1e-12 relative.
    for (std::size_t v = 0; v < g0.size(); ++v) {
        CHECK(rows[0][v] == doctest::Approx(g0[v]).epsilon(1e-12));
    }
    for (std::size_t v = 0; v < g3.size(); ++v) {
        CHECK(rows[3][v] == doctest::Approx(g3[v]).epsilon(1e-12));
    }
}

TEST_CASE("fast action readout equals the graph readout bit for bit") {
    const TaskSpec task = testutil::apple_orange_task();
    const Observation obs = tabletop::render(tabletop::generate_layout(task, 11));
    CoT cot;
    cot.tokens = {tok::ORANGE, tok::bin_token(2), tok::bin_token(4), tok::bin_token(6),
                  tok::bin_token(8), tok::END};

    for (const bool mask : {false, true}) {
        for (const Action::Kind kind : {Action::Kind::Discrete, Action::Kind::Continuous}) {
            const PolicyParams params = small_random_policy(kind, 13);
            const ActionOut fast = generate_action(params, obs, task.user_instruction, cot, mask);

            Graph g;
            ParamLeaves pl = make_param_leaves(g, params, false);
            TrunkOptions opts;
            opts.zero_instruction = mask;
            auto raw = action_readout(g, pl, g.leaf(obs), task.user_instruction, cot, opts);
            REQUIRE(raw->size() == fast.raw.size());
            for (std::size_t i = 0; i < fast.raw.size(); ++i) {
                CHECK(fast.raw[i] == doctest::Approx((*raw)[i]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("untrained policy decodes token 0 first by tie-break") {
    PolicyConfig cfg;
    cfg.head_kind = Action::Kind::Discrete;
    const PolicyParams params = PolicyParams::init(cfg, 3);  // zero output heads
    const TaskSpec task = testutil::apple_orange_task();
    const Observation obs = tabletop::render(tabletop::generate_layout(task, 0));
    const Decoded dec = generate_cot(params, obs, task.user_instruction);
    REQUIRE(!dec.cot.tokens.empty());
    CHECK(dec.cot.tokens[0] == 0);
    for (const double v : dec.logits[0]) CHECK(v == 0.0);
}

TEST_CASE("decoding is deterministic and END-terminated") {
    const PolicyParams params = small_random_policy(Action::Kind::Continuous, 21);
    const TaskSpec task = testutil::apple_orange_task();
    const Observation obs = tabletop::render(tabletop::generate_layout(task, 9));
    const Decoded a = generate_cot(params, obs, task.user_instruction);
    const Decoded b = generate_cot(params, obs, task.user_instruction);
    CHECK(a.cot.tokens == b.cot.tokens);
    CHECK(a.cot.well_formed());
    CHECK(a.cot.tokens.size() <= 8);
    CHECK(a.cot.tokens.back() == tok::END);
}

TEST_CASE("token logits depend only on the prefix") {
    const PolicyParams params = small_random_policy(Action::Kind::Continuous, 5);
    const TaskSpec task = testutil::apple_orange_task();
    const Observation obs = tabletop::render(tabletop::generate_layout(task, 2));

    std::vector<int> cot_a{tok::APPLE, tok::bin_token(1), tok::bin_token(2)};
    std::vector<int> cot_b{tok::APPLE, tok::bin_token(1), tok::bin_token(9)};  // differs at slot 2
    const auto rows_a = cot_teacher_logits(params, obs, task.user_instruction, cot_a);
    const auto rows_b = cot_teacher_logits(params, obs, task.user_instruction, cot_b);
    // Rows 0..2 precede the perturbed token; same code path, so the values
    // must be identical to the bit.
    for (int r = 0; r < 3; ++r) {
        for (std::size_t v = 0; v < rows_a[static_cast<std::size_t>(r)].size(); ++v) {
            CHECK(rows_a[static_cast<std::size_t>(r)][v] == rows_b[static_cast<std::size_t>(r)][v]);
        }
    }
    // The row at the perturbed position differs.
    bool any_diff = false;
    for (std::size_t v = 0; v < rows_a[3].size(); ++v) {
        if (rows_a[3][v] != rows_b[3][v]) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("continuous chunks respect the per-step bound") {
    const PolicyParams params = small_random_policy(Action::Kind::Continuous, 31);
    const TaskSpec task = testutil::apple_orange_task();
    const Observation obs = tabletop::render(tabletop::generate_layout(task, 14));
    CoT cot;
    cot.tokens = {tok::APPLE, tok::bin_token(4), tok::bin_token(4), tok::bin_token(7),
                  tok::bin_token(7), tok::END};
    const ActionOut out = generate_action(params, obs, task.user_instruction, cot);
    REQUIRE(out.actions.size() == 4);
    for (const Action& a : out.actions) {
        CHECK(std::abs(a.dx) <= 1.0);
        CHECK(std::abs(a.dy) <= 1.0);
    }
}

TEST_CASE("waypoint integration is a cumulative sum from the start") {
    Graph g;
    diffcore::Tensor raw({1, 6}, {1.0, 0.0, 0.5, 0.0, 1.0, 0.5});
    auto wp = waypoints_from_raw(g, g.leaf(raw), 2, {0.0, 0.0});
    CHECK((*wp)[0] == 1.0);
    CHECK((*wp)[1] == 0.0);
    CHECK((*wp)[2] == 1.0);
    CHECK((*wp)[3] == 1.0);
}

TEST_CASE("checkpoint round-trip preserves every tensor bit") {
    testutil::TempDir dir("ckpt");
    const PolicyParams params = small_random_policy(Action::Kind::Discrete, 8);
    save_checkpoint(params, dir.path() / "p");
    const PolicyParams back = load_checkpoint(dir.path() / "p");
    CHECK(back.cfg.head_kind == params.cfg.head_kind);
    const auto a = params.tensor_refs();
    const auto b = back.tensor_refs();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].second->size() == b[i].second->size());
        for (std::size_t j = 0; j < a[i].second->size(); ++j) {
            CHECK((*a[i].second)[j] == (*b[i].second)[j]);
        }
    }
}

TEST_CASE("batch gradients are bit-identical between serial and parallel") {
    const TaskSpec task = testutil::apple_orange_task();
    const auto demos = expert_demos({task}, {0, 1}, Action::Kind::Continuous, 4);
    REQUIRE(demos.size() >= 4);
    const PolicyParams params = small_random_policy(Action::Kind::Continuous, 17);
    std::vector<const DemoSample*> batch;
    for (std::size_t i = 0; i < 4; ++i) batch.push_back(&demos[i]);
    const std::vector<std::pair<bool, bool>> drops(4, {false, false});

    const BatchGradResult serial = bc_batch_gradient(params, batch, drops, 1.0, Exec::Serial);
    const BatchGradResult parallel = bc_batch_gradient(params, batch, drops, 1.0, Exec::Parallel);
    CHECK(serial.mean_loss == parallel.mean_loss);
    REQUIRE(serial.grads.size() == parallel.grads.size());
    for (std::size_t t = 0; t < serial.grads.size(); ++t) {
        for (std::size_t j = 0; j < serial.grads[t].size(); ++j) {
            CHECK(serial.grads[t][j] == parallel.grads[t][j]);
        }
    }
}

TEST_CASE("empty demo set is a training error") {
    PolicyConfig cfg;
    TrainConfig tcfg;
    CHECK_THROWS_AS(train_bc({}, cfg, tcfg), TrainingError);
}

TEST_CASE("untrained rollout truncates at max_steps with full trajectory") {
    PolicyConfig cfg;
    cfg.head_kind = Action::Kind::Continuous;
    const PolicyParams params = PolicyParams::init(cfg, 1);  // zero heads: no-ops forever
    const TaskSpec task = testutil::apple_orange_task();
    const RolloutResult r = rollout(params, task, 4, task.user_instruction);
    CHECK(r.truncated);
    CHECK(!r.user_success);
    CHECK(r.env_steps == tabletop::geom::kMaxSteps);
    CHECK(r.trajectory.size() == static_cast<std::size_t>(tabletop::geom::kMaxSteps) + 1);
}

TEST_CASE("rollout trajectories respect the per-step delta bound") {
    const PolicyParams params = small_random_policy(Action::Kind::Continuous, 23);
    const TaskSpec task = testutil::apple_orange_task();
    const RolloutResult r = rollout(params, task, 6, task.user_instruction);
    for (std::size_t i = 1; i < r.trajectory.size(); ++i) {
        CHECK(std::abs(r.trajectory[i].x - r.trajectory[i - 1].x) <= 1.0 + 1e-12);
        CHECK(std::abs(r.trajectory[i].y - r.trajectory[i - 1].y) <= 1.0 + 1e-12);
    }
}

TEST_CASE("dataset records round-trip") {
    DatasetRecord rec;
    rec.task_id = "apple_orange";
    rec.layout_seed = 12;
    rec.step = 3;
    rec.instr = Instruction::of({tok::PICK, tok::APPLE});
    rec.cot.tokens = {tok::APPLE, tok::bin_token(0), tok::bin_token(1), tok::bin_token(2),
                      tok::bin_token(3), tok::END};
    rec.action_kind = Action::Kind::Continuous;
    rec.chunk = {{0.123456789012345, -1.0, 1.0}, {0.25, 0.5, 0.0}};
    rec.success = true;
    rec.obs_ref = "obs/x.tns";
    const DatasetRecord back = decode_record(encode_record(rec));
    CHECK(back.task_id == rec.task_id);
    CHECK(back.layout_seed == rec.layout_seed);
    CHECK(back.step == rec.step);
    CHECK(back.instr == rec.instr);
    CHECK(back.cot.tokens == rec.cot.tokens);
    CHECK(back.chunk.size() == rec.chunk.size());
    for (std::size_t k = 0; k < rec.chunk.size(); ++k) {
        for (int c = 0; c < 3; ++c) CHECK(back.chunk[k][c] == rec.chunk[k][c]);
    }
    CHECK(back.success == rec.success);
    CHECK(back.obs_ref == rec.obs_ref);

    CHECK_THROWS_AS(decode_record("task:x seed:1"), FormatError);
}

// Slower: behavior cloning on a reduced budget reaches competent success
// rates. The full-budget run lives in the acceptance suite.
TEST_CASE("bc pilot: continuous head learns the task" * doctest::timeout(900)) {
    const TaskSpec task = testutil::apple_orange_task();
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s = 0; s < 12; ++s) seeds.push_back(s);
    const auto demos = expert_demos({task}, seeds, Action::Kind::Continuous, 4);

    PolicyConfig cfg;
    cfg.head_kind = Action::Kind::Continuous;
    TrainConfig tcfg;
    tcfg.epochs = 20;
    tcfg.seed = 5;
    tcfg.instr_dropout = 0.5;
    const TrainResult res = train_bc(demos, cfg, tcfg);

    // Loss curve: non-increasing in trend, <=5% transient upticks allowed.
    int upticks = 0;
    for (std::size_t e = 1; e < res.log.epoch_loss.size(); ++e) {
        if (res.log.epoch_loss[e] > res.log.epoch_loss[e - 1] * 1.001) ++upticks;
    }
    CHECK(upticks <= static_cast<int>(res.log.epoch_loss.size()) / 5);

    int hits = 0;
    for (const std::uint64_t s : seeds) {
        const RolloutResult r = rollout(res.params, task, s, task.user_instruction);
        if (r.user_success) ++hits;
    }
    MESSAGE("pilot training TSR: ", hits, "/", seeds.size());
    CHECK(hits >= static_cast<int>(seeds.size() * 3) / 4);
}
