#include "patchlab/metrics.hpp"

#include <cmath>

namespace patchlab::evalkit {

double point_distance(const tabletop::Vec2& a, const tabletop::Vec2& b) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    return std::sqrt(dx * dx + dy * dy);
}

double dtw_distance(const Trajectory& t1, const Trajectory& t2) {
    if (t1.empty() || t2.empty()) throw ContractError("dtw_distance: empty trajectory");
    const std::size_t n = t1.size(), m = t2.size();
    constexpr double kInf = 1e300;
    std::vector<double> prev(m + 1, kInf), cur(m + 1, kInf);
    prev[0] = 0.0;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = kInf;
        for (std::size_t j = 1; j <= m; ++j) {
            const double d = point_distance(t1[i - 1], t2[j - 1]);
            cur[j] = d + std::min(prev[j], std::min(cur[j - 1], prev[j - 1]));
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double traj_similarity(const Trajectory& t1, const Trajectory& t2) {
    const double norm = static_cast<double>(std::max(t1.size(), t2.size()));
    return 1.0 / (1.0 + dtw_distance(t1, t2) / norm);
}

double hijack_score(const Trajectory& t, const Trajectory& ta, const Trajectory& tb) {
    const double sa = traj_similarity(t, ta);
    const double sb = traj_similarity(t, tb);
    return (sa - sb) / (sa + sb);
}

}  // namespace patchlab::evalkit
