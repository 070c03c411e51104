#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>
#include <stdexcept>

#include "fablink/brep.hpp"

namespace fablink::brep {

namespace {

// Distance from point p to the infinite line through `origin` along unit `dir`.
double point_line_distance(const Vec3& p, const Vec3& origin, const Vec3& dir) {
    return norm(cross(p - origin, dir));
}

bool coaxial(const Cylinder& a, const Cylinder& b, const Tolerances& tol) {
    if (std::abs(a.radius - b.radius) > tol.coaxial_radius) return false;
    if (1.0 - std::abs(dot(a.axis_dir, b.axis_dir)) > tol.coaxial_direction) return false;
    return point_line_distance(b.axis_point, a.axis_point, a.axis_dir) <= tol.coaxial_distance;
}

struct DisjointSet {
    explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
    std::vector<std::size_t> parent;
};

}  // namespace

const std::array<const char*, FeatureVector::kSize> FeatureVector::kFieldNames = {
    "face_count_total", "face_count_planar", "face_count_cylindrical", "face_count_other", "edge_count",
    "vertex_count",     "shell_count",       "hole_count",             "mean_hole_diameter", "material_thickness",
    "bbox_a",           "bbox_b",            "bbox_c",                 "total_edge_length"};

std::array<double, FeatureVector::kSize> FeatureVector::to_array() const {
    return {face_count_total, face_count_planar, face_count_cylindrical, face_count_other, edge_count,
            vertex_count,     shell_count,       hole_count,             mean_hole_diameter, material_thickness,
            bbox_a,           bbox_b,            bbox_c,                 total_edge_length};
}

FeatureVector FeatureVector::from_array(const std::array<double, kSize>& a) {
    FeatureVector f;
    f.face_count_total = a[0];
    f.face_count_planar = a[1];
    f.face_count_cylindrical = a[2];
    f.face_count_other = a[3];
    f.edge_count = a[4];
    f.vertex_count = a[5];
    f.shell_count = a[6];
    f.hole_count = a[7];
    f.mean_hole_diameter = a[8];
    f.material_thickness = a[9];
    f.bbox_a = a[10];
    f.bbox_b = a[11];
    f.bbox_c = a[12];
    f.total_edge_length = a[13];
    return f;
}

std::vector<Hole> detect_holes(const BrepModel& model, const Tolerances& tol) {
    std::vector<const Face*> cylinders;
    for (const auto& [id, face] : model.faces) {
        if (face.kind == SurfaceKind::cylinder) cylinders.push_back(&face);
    }
    DisjointSet groups(cylinders.size());
    for (std::size_t i = 0; i < cylinders.size(); ++i) {
        for (std::size_t j = i + 1; j < cylinders.size(); ++j) {
            if (coaxial(std::get<Cylinder>(cylinders[i]->surface), std::get<Cylinder>(cylinders[j]->surface), tol)) {
                groups.unite(i, j);
            }
        }
    }
    // The natural normal of a cylindrical surface points radially outward;
    // same_sense = false flips it toward the axis, i.e. material surrounds the void.
    std::vector<bool> inward(cylinders.size(), true);
    for (std::size_t i = 0; i < cylinders.size(); ++i) {
        if (cylinders[i]->same_sense) inward[groups.find(i)] = false;
    }
    std::vector<Hole> holes;
    for (std::size_t i = 0; i < cylinders.size(); ++i) {
        if (groups.find(i) != i || !inward[i]) continue;
        const auto& c = std::get<Cylinder>(cylinders[i]->surface);
        holes.push_back({c.axis_point, c.axis_dir, c.radius});
    }
    return holes;
}

double estimate_thickness(const BrepModel& model, const Tolerances& tol) {
    std::vector<const Face*> planes;
    for (const auto& [id, face] : model.faces) {
        if (face.kind == SurfaceKind::plane) planes.push_back(&face);
    }
    std::vector<double> distances;
    for (std::size_t i = 0; i < planes.size(); ++i) {
        const Vec3 ni = planes[i]->outward_plane_normal();
        const Vec3& oi = std::get<Plane>(planes[i]->surface).origin;
        for (std::size_t j = i + 1; j < planes.size(); ++j) {
            const Vec3 nj = planes[j]->outward_plane_normal();
            if (dot(ni, nj) > -1.0 + tol.antiparallel) continue;
            const double d = std::abs(dot(std::get<Plane>(planes[j]->surface).origin - oi, ni));
            if (d > tol.coincident_point && d < tol.thickness_cap) distances.push_back(d);
        }
    }
    if (distances.empty()) return 0.0;
    std::sort(distances.begin(), distances.end());

    double best = 0.0;
    std::size_t best_count = 0;
    for (std::size_t i = 0; i < distances.size();) {
        const double representative = distances[i];
        std::size_t j = i;
        while (j < distances.size() && distances[j] - representative <= tol.thickness_bin) ++j;
        if (j - i > best_count) {
            best_count = j - i;
            best = representative;
        }
        i = j;
    }
    return best;
}

double edge_length(const Edge& edge, const BrepModel& model, const Tolerances& tol) {
    const Point3& a = model.vertices.at(edge.start_vertex);
    const Point3& b = model.vertices.at(edge.end_vertex);
    if (edge.kind != CurveKind::circle) return distance(a, b);

    const auto& c = edge.circle;
    const Vec3& axis = c.axis.vec();
    auto radial = [&](const Point3& p) {
        const Vec3 rel = p - c.center;
        const double h = dot(rel, axis);
        const Vec3 in_plane = rel - axis * h;
        const double off = std::hypot(norm(in_plane) - c.radius, h);
        if (off > tol.on_circle) {
            throw GeometryError(edge.start_vertex == edge.end_vertex ? edge.start_vertex : 0,
                                "circle endpoint lies off the circle");
        }
        return in_plane;
    };
    Vec3 from = radial(a);
    Vec3 to = radial(b);
    if (distance(a, b) <= tol.coincident_point) return 2.0 * std::numbers::pi * c.radius;
    // A reversed edge traverses the circle against its parametrization.
    if (!edge.same_sense) std::swap(from, to);
    double theta = std::atan2(dot(axis, cross(from, to)), dot(from, to));
    if (theta <= 0.0) theta += 2.0 * std::numbers::pi;
    return c.radius * theta;
}

FeatureVector extract_features(const BrepModel& model, const Tolerances& tol) {
    FeatureVector f;
    f.face_count_total = static_cast<double>(model.faces.size());
    for (const auto& [id, face] : model.faces) {
        switch (face.kind) {
            case SurfaceKind::plane: f.face_count_planar += 1; break;
            case SurfaceKind::cylinder: f.face_count_cylindrical += 1; break;
            case SurfaceKind::other: f.face_count_other += 1; break;
        }
    }
    f.edge_count = static_cast<double>(model.edges.size());
    f.vertex_count = static_cast<double>(model.vertices.size());
    f.shell_count = static_cast<double>(model.shells.size());

    const auto holes = detect_holes(model, tol);
    f.hole_count = static_cast<double>(holes.size());
    if (!holes.empty()) {
        double sum = 0.0;
        for (const auto& h : holes) sum += 2.0 * h.radius;
        f.mean_hole_diameter = sum / static_cast<double>(holes.size());
    }
    f.material_thickness = estimate_thickness(model, tol);

    if (!model.vertices.empty()) {
        Vec3 lo = model.vertices.begin()->second;
        Vec3 hi = lo;
        for (const auto& [id, p] : model.vertices) {
            lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
            hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
        }
        std::array<double, 3> ext{hi.x - lo.x, hi.y - lo.y, hi.z - lo.z};
        std::sort(ext.begin(), ext.end(), std::greater<>());
        f.bbox_a = ext[0];
        f.bbox_b = ext[1];
        f.bbox_c = ext[2];
    }

    double total = 0.0;
    for (const auto& [id, e] : model.edges) {
        try {
            total += edge_length(e, model, tol);
        } catch (const GeometryError&) {
            // Models from build_brep are pre-validated; hand-built ones fall back to the chord.
            total += distance(model.vertices.at(e.start_vertex), model.vertices.at(e.end_vertex));
        }
    }
    f.total_edge_length = total;
    return f;
}

nlohmann::json to_json(const FeatureVector& f) {
    nlohmann::json j;
    j["schema"] = FeatureVector::kSchema;
    const auto values = f.to_array();
    for (std::size_t i = 0; i < FeatureVector::kSize; ++i) {
        // Count fields come first; everything before mean_hole_diameter is integral.
        if (i <= 7) {
            j[FeatureVector::kFieldNames[i]] = static_cast<std::int64_t>(values[i]);
        } else {
            j[FeatureVector::kFieldNames[i]] = values[i];
        }
    }
    return j;
}

FeatureVector feature_vector_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("feature vector must be a JSON object");
    if (j.contains("schema") && j.at("schema") != FeatureVector::kSchema) {
        throw std::invalid_argument("unsupported feature schema");
    }
    std::array<double, FeatureVector::kSize> values{};
    for (std::size_t i = 0; i < FeatureVector::kSize; ++i) {
        const char* name = FeatureVector::kFieldNames[i];
        if (!j.contains(name)) throw std::invalid_argument(std::string("missing feature field '") + name + "'");
        const auto& v = j.at(name);
        if (!v.is_number()) throw std::invalid_argument(std::string("feature field '") + name + "' is not a number");
        values[i] = v.get<double>();
        if (!std::isfinite(values[i]) || values[i] < 0.0) {
            throw std::invalid_argument(std::string("feature field '") + name + "' must be finite and >= 0");
        }
        if (i <= 7 && values[i] != std::floor(values[i])) {
            throw std::invalid_argument(std::string("feature field '") + name + "' must be an integer");
        }
    }
    for (const auto& [key, _] : j.items()) {
        if (key == "schema") continue;
        if (std::find_if(FeatureVector::kFieldNames.begin(), FeatureVector::kFieldNames.end(),
                         [&](const char* n) { return key == n; }) == FeatureVector::kFieldNames.end()) {
            throw std::invalid_argument("unknown feature field '" + key + "'");
        }
    }
    return FeatureVector::from_array(values);
}

}  // namespace fablink::brep
