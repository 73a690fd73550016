#pragma once

#include <array>

#include "patchlab/errors.hpp"
#include "patchlab/rng.hpp"

namespace patchlab::attack {

// Planar projective map, row-major 3x3, defined up to scale. The homogeneous
// factor is divided out at application time.
struct Homography {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Homography identity() { return {}; }
    static Homography translation(double tx, double ty);
    static Homography scaling(double sx, double sy);
    // Maps the unit square [0,w)x[0,h) of a source onto an axis-aligned
    // destination rectangle.
    static Homography rect_to_rect(double src_w, double src_h, double dst_x, double dst_y,
                                   double dst_w, double dst_h);

    double det() const;
    // Scales so m[8] == 1 when it is nonzero.
    Homography normalized() const;
    Homography inverse() const;  // GeometryError when |det| <= 1e-9

    // Applies to (u, v), dividing out the homogeneous coordinate.
    void apply(double u, double v, double& x, double& y) const;
};

Homography compose(const Homography& a, const Homography& b);  // a after b

}  // namespace patchlab::attack
