#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "patchlab/metrics.hpp"
#include "patchlab/rng.hpp"

using namespace patchlab;
using namespace patchlab::evalkit;
using tabletop::Vec2;

namespace {

// Independent oracle: exhaustive enumeration of monotone alignments.
// Cost sums accumulate along the path, matching the DP association order.
double brute_force_dtw(const Trajectory& a, const Trajectory& b, std::size_t i, std::size_t j,
                       double acc) {
    acc += point_distance(a[i], b[j]);
    if (i + 1 == a.size() && j + 1 == b.size()) return acc;
    double best = 1e300;
    if (i + 1 < a.size()) best = std::min(best, brute_force_dtw(a, b, i + 1, j, acc));
    if (j + 1 < b.size()) best = std::min(best, brute_force_dtw(a, b, i, j + 1, acc));
    if (i + 1 < a.size() && j + 1 < b.size()) {
        best = std::min(best, brute_force_dtw(a, b, i + 1, j + 1, acc));
    }
    return best;
}

double brute_force_dtw(const Trajectory& a, const Trajectory& b) {
    return brute_force_dtw(a, b, 0, 0, 0.0);
}

Trajectory random_traj(Rng& rng, std::size_t len) {
    Trajectory t;
    for (std::size_t i = 0; i < len; ++i) t.push_back({rng.uniform(0.0, 12.0), rng.uniform(0.0, 12.0)});
    return t;
}

}  // namespace

TEST_CASE("dtw trivial values") {
    Trajectory a{{0, 0}, {1, 1}, {2, 0}};
    CHECK(dtw_distance(a, a) == 0.0);
    CHECK(dtw_distance({{0, 0}}, {{3, 4}}) == 5.0);
    CHECK_THROWS_AS(dtw_distance({}, a), ContractError);
}

TEST_CASE("dtw equals brute-force enumeration on the spec pair") {
    Trajectory t1{{0, 0}, {1, 0}, {2, 0}};
    Trajectory t2{{0, 0}, {2, 0}};
    CHECK(dtw_distance(t1, t2) == brute_force_dtw(t1, t2));
}

TEST_CASE("dtw equals brute-force minimum over 200 random short pairs") {
    Rng rng(2024);
    for (int k = 0; k < 200; ++k) {
        const std::size_t n = 1 + rng.uniform_index(5);
        const std::size_t m = 1 + rng.uniform_index(5);
        Trajectory a = random_traj(rng, n), b = random_traj(rng, m);
        CHECK(dtw_distance(a, b) == brute_force_dtw(a, b));
    }
}

TEST_CASE("similarity properties") {
    Rng rng(5);
    Trajectory a = random_traj(rng, 6), b = random_traj(rng, 4);
    CHECK(traj_similarity(a, a) == 1.0);
    CHECK(traj_similarity(a, b) == traj_similarity(b, a));
    CHECK(traj_similarity(a, b) > 0.0);
    CHECK(traj_similarity(a, b) <= 1.0);

    // Monotonicity probe: growing offset strictly decreases similarity.
    double prev = 1.0;
    for (int k = 1; k <= 6; ++k) {
        Trajectory shifted;
        for (const auto& p : a) shifted.push_back({p.x + 0.5 * k, p.y});
        const double s = traj_similarity(a, shifted);
        CHECK(s < prev);
        prev = s;
    }
}

TEST_CASE("hijack score algebra") {
    Rng rng(17);
    Trajectory t = random_traj(rng, 5);
    Trajectory ta = random_traj(rng, 5);
    Trajectory tb = random_traj(rng, 4);

    SUBCASE("equal similarity gives exactly zero") {
        CHECK(hijack_score(t, ta, ta) == 0.0);
    }
    SUBCASE("reference swap negates exactly") {
        const double s = hijack_score(t, ta, tb);
        CHECK(hijack_score(t, tb, ta) == -s);
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
    }
    SUBCASE("matching the target reference gives (1-s)/(1+s)") {
        for (int k = 0; k < 10; ++k) {
            Trajectory tb2 = random_traj(rng, 3);
            const double s = traj_similarity(ta, tb2);
            const double expected = (1.0 - s) / (1.0 + s);
            CHECK(hijack_score(ta, ta, tb2) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("score bounds over random triples") {
    Rng rng(99);
    for (int k = 0; k < 100; ++k) {
        Trajectory t = random_traj(rng, 1 + rng.uniform_index(8));
        Trajectory ta = random_traj(rng, 1 + rng.uniform_index(8));
        Trajectory tb = random_traj(rng, 1 + rng.uniform_index(8));
        const double s = hijack_score(t, ta, tb);
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
    }
}
