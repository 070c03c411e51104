#pragma once

#include <array>
#include <cmath>
#include <optional>

namespace fablink {

struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    constexpr Vec3 operator-() const { return {-x, -y, -z}; }
    constexpr bool operator==(const Vec3&) const = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }

/// Coordinates in millimetres.
using Point3 = Vec3;

/// Unit direction. Only constructible through normalization.
class Dir3 {
public:
    Dir3() = default;

    /// Empty when the vector is zero-length or non-finite.
    static std::optional<Dir3> normalized(const Vec3& v) {
        const double n = norm(v);
        if (!std::isfinite(n) || n < 1e-12) return std::nullopt;
        return Dir3(v * (1.0 / n));
    }

    const Vec3& vec() const { return v_; }
    operator const Vec3&() const { return v_; }
    Dir3 operator-() const { return Dir3(-v_); }

private:
    explicit Dir3(const Vec3& v) : v_(v) {}
    Vec3 v_{0.0, 0.0, 1.0};
};

/// Rotation (row-major 3x3, assumed orthonormal) followed by translation.
struct RigidTransform {
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
    Vec3 translation{};

    Vec3 rotate(const Vec3& v) const {
        const auto& r = rotation;
        return {r[0] * v.x + r[1] * v.y + r[2] * v.z, r[3] * v.x + r[4] * v.y + r[5] * v.z,
                r[6] * v.x + r[7] * v.y + r[8] * v.z};
    }
    Vec3 apply(const Vec3& p) const { return rotate(p) + translation; }
};

}  // namespace fablink
