#include "patchlab/homography.hpp"

#include <cmath>

namespace patchlab::attack {

Homography Homography::translation(double tx, double ty) {
    Homography h;
    h.m = {1, 0, tx, 0, 1, ty, 0, 0, 1};
    return h;
}

Homography Homography::scaling(double sx, double sy) {
    Homography h;
    h.m = {sx, 0, 0, 0, sy, 0, 0, 0, 1};
    return h;
}

Homography Homography::rect_to_rect(double src_w, double src_h, double dst_x, double dst_y,
                                    double dst_w, double dst_h) {
    return compose(Homography::translation(dst_x, dst_y),
                   Homography::scaling(dst_w / src_w, dst_h / src_h));
}

double Homography::det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::normalized() const {
    Homography h = *this;
    if (std::abs(m[8]) > 1e-12) {
        for (double& v : h.m) v /= m[8];
    }
    return h;
}

Homography Homography::inverse() const {
    const double d = det();
    if (std::abs(d) <= 1e-9) throw GeometryError("homography is singular");
    const double inv = 1.0 / d;
    Homography r;
    r.m[0] = (m[4] * m[8] - m[5] * m[7]) * inv;
    r.m[1] = (m[2] * m[7] - m[1] * m[8]) * inv;
    r.m[2] = (m[1] * m[5] - m[2] * m[4]) * inv;
    r.m[3] = (m[5] * m[6] - m[3] * m[8]) * inv;
    r.m[4] = (m[0] * m[8] - m[2] * m[6]) * inv;
    r.m[5] = (m[2] * m[3] - m[0] * m[5]) * inv;
    r.m[6] = (m[3] * m[7] - m[4] * m[6]) * inv;
    r.m[7] = (m[1] * m[6] - m[0] * m[7]) * inv;
    r.m[8] = (m[0] * m[4] - m[1] * m[3]) * inv;
    return r;
}

void Homography::apply(double u, double v, double& x, double& y) const {
    const double w = m[6] * u + m[7] * v + m[8];
    if (std::abs(w) < 1e-12) throw GeometryError("point maps to infinity");
    x = (m[0] * u + m[1] * v + m[2]) / w;
    y = (m[3] * u + m[4] * v + m[5]) / w;
}

Homography compose(const Homography& a, const Homography& b) {
    Homography c;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += a.m[static_cast<std::size_t>(i * 3 + k)] *
                                                b.m[static_cast<std::size_t>(k * 3 + j)];
            c.m[static_cast<std::size_t>(i * 3 + j)] = acc;
        }
    }
    return c;
}

}  // namespace patchlab::attack
