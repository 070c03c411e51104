// Typed boundary-representation model built from a parsed STEP entity graph,
// and the f1 design feature vector computed from it.

#pragma once

#include <array>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "fablink/geometry.hpp"
#include "fablink/step.hpp"
#include "json.hpp"

namespace fablink::brep {

using step::InstanceId;

/// Every length tolerance used by geometry code, in millimetres unless noted.
struct Tolerances {
    double coaxial_radius = 1e-6;
    double coaxial_direction = 1e-6;  // 1 - |cos| between axes
    double coaxial_distance = 1e-6;
    double coincident_point = 1e-6;
    double thickness_bin = 1e-3;
    double on_circle = 1e-3;
    double antiparallel = 1e-6;  // dot <= -1 + antiparallel
    double thickness_cap = 100.0;  // exclusive upper bound
};

inline constexpr Tolerances kTolerances{};

class GeometryError : public std::runtime_error {
public:
    GeometryError(InstanceId id, const std::string& reason);
    InstanceId id() const noexcept { return id_; }
    const std::string& reason() const noexcept { return reason_; }

private:
    InstanceId id_;
    std::string reason_;
};

enum class CurveKind { line, circle, other };
enum class SurfaceKind { plane, cylinder, other };
enum class LoopKind { outer, inner };

struct Circle {
    Point3 center;
    Dir3 axis;
    double radius = 0.0;
};

struct Edge {
    CurveKind kind = CurveKind::other;
    Circle circle;  // meaningful only for CurveKind::circle
    InstanceId start_vertex = 0;
    InstanceId end_vertex = 0;
    bool same_sense = true;
};

struct Plane {
    Point3 origin;
    Dir3 normal;
};

struct Cylinder {
    Point3 axis_point;
    Dir3 axis_dir;
    double radius = 0.0;
};

struct EdgeUse {
    InstanceId edge = 0;
    bool orientation = true;
};

struct Loop {
    LoopKind kind = LoopKind::outer;
    std::vector<EdgeUse> edges;
};

struct Face {
    SurfaceKind kind = SurfaceKind::other;
    std::variant<std::monostate, Plane, Cylinder> surface;
    bool same_sense = true;
    std::vector<Loop> loops;

    /// Plane normal flipped by same_sense, pointing out of the material.
    Vec3 outward_plane_normal() const;
};

struct BrepModel {
    std::map<InstanceId, Point3> vertices;
    std::map<InstanceId, Edge> edges;
    std::map<InstanceId, Face> faces;
    std::vector<std::vector<InstanceId>> shells;
};

/// Walks every CLOSED_SHELL / OPEN_SHELL and what it reaches.
/// Throws step::DanglingRef or GeometryError.
BrepModel build_brep(const step::StepFile& file);

struct Hole {
    Point3 axis_point;
    Dir3 axis_dir;
    double radius = 0.0;
};

std::vector<Hole> detect_holes(const BrepModel& model, const Tolerances& tol = kTolerances);

/// Modal distance between antiparallel planar faces; 0 when none qualify.
double estimate_thickness(const BrepModel& model, const Tolerances& tol = kTolerances);

/// Throws GeometryError when a circle endpoint is off the circle.
double edge_length(const Edge& edge, const BrepModel& model, const Tolerances& tol = kTolerances);

struct FeatureVector {
    static constexpr const char* kSchema = "f1";
    static constexpr std::size_t kSize = 14;
    static const std::array<const char*, kSize> kFieldNames;

    double face_count_total = 0;
    double face_count_planar = 0;
    double face_count_cylindrical = 0;
    double face_count_other = 0;
    double edge_count = 0;
    double vertex_count = 0;
    double shell_count = 0;
    double hole_count = 0;
    double mean_hole_diameter = 0;
    double material_thickness = 0;
    double bbox_a = 0;
    double bbox_b = 0;
    double bbox_c = 0;
    double total_edge_length = 0;

    std::array<double, kSize> to_array() const;
    static FeatureVector from_array(const std::array<double, kSize>& a);

    bool operator==(const FeatureVector&) const = default;
};

FeatureVector extract_features(const BrepModel& model, const Tolerances& tol = kTolerances);

/// Object with a "schema" member plus one member per field; counts as integers.
nlohmann::json to_json(const FeatureVector& f);
/// Throws std::invalid_argument on a missing/extra field, wrong schema, or negative value.
FeatureVector feature_vector_from_json(const nlohmann::json& j);

}  // namespace fablink::brep
