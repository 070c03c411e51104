// Writer for the small STEP dialect used by synthetic fixtures, and the
// rectangular-plate generator built on it.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fablink/geometry.hpp"

namespace fablink::fixtures {

class InvalidGeometry : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Appends `#n=ENTITY(...);` lines with sequential ids. Every point and
/// direction passes through `transform` before it is written.
class StepWriter {
public:
    using Id = long long;

    explicit StepWriter(RigidTransform transform = {}) : transform_(transform) {}

    Id add(std::string_view entity, std::string_view args);

    Id point(const Vec3& p);
    Id direction(const Vec3& d);
    Id placement(const Vec3& origin, const Vec3& axis, const Vec3& ref);
    Id vertex(const Vec3& p);
    Id line(const Vec3& from, const Vec3& to);
    Id circle(const Vec3& center, const Vec3& axis, const Vec3& ref, double radius);
    Id edge_curve(Id start, Id end, Id curve, bool same_sense);
    Id oriented_edge(Id edge, bool orientation);
    Id edge_loop(const std::vector<std::pair<Id, bool>>& uses);
    Id bound(Id loop, bool outer);
    Id plane(const Vec3& origin, const Vec3& axis, const Vec3& ref);
    Id cylinder(const Vec3& axis_point, const Vec3& axis, const Vec3& ref, double radius);
    Id face(const std::vector<Id>& bounds, Id surface, bool same_sense);
    Id closed_shell(const std::vector<Id>& faces);
    Id solid(Id shell);

    std::size_t instance_count() const { return static_cast<std::size_t>(next_id_ - 1); }

    /// Complete exchange structure around the DATA lines written so far.
    std::string finish(std::string_view file_name = "fixture.step") const;

    /// Shortest round-trip decimal, always with a '.', exponent as `E`.
    static std::string real(double v);

private:
    std::string ref_list(const std::vector<Id>& ids) const;

    RigidTransform transform_;
    std::string data_;
    Id next_id_ = 1;
};

struct HoleSpec {
    double cx = 0.0;
    double cy = 0.0;
    double diameter = 0.0;
};

struct PlateSpec {
    double length = 0.0;
    double width = 0.0;
    double thickness = 0.0;
    std::vector<HoleSpec> holes;
};

/// Throws InvalidGeometry for non-positive dimensions, holes touching the
/// outline, or holes touching/overlapping each other.
void validate(const PlateSpec& spec);

/// Writes the plate solid into `w` and returns the MANIFOLD_SOLID_BREP id.
StepWriter::Id write_plate(StepWriter& w, const PlateSpec& spec);

std::string generate_plate_step(const PlateSpec& spec, const RigidTransform& transform = {});

/// 2(2L + 2W) + 4t + sum(2 pi d): both rectangle outlines, four vertical
/// edges, and top and bottom circles for every hole.
double plate_edge_length(const PlateSpec& spec);

}  // namespace fablink::fixtures
