#include "fablink/fixtures.hpp"

#include <charconv>
#include <cmath>
#include <numbers>

namespace fablink::fixtures {

std::string StepWriter::real(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, end);
    std::string mantissa = s;
    std::string exponent;
    if (auto e = s.find('e'); e != std::string::npos) {
        mantissa = s.substr(0, e);
        exponent = "E" + s.substr(e + 1);
    }
    if (mantissa.find('.') == std::string::npos) mantissa += '.';
    return mantissa + exponent;
}

StepWriter::Id StepWriter::add(std::string_view entity, std::string_view args) {
    const Id id = next_id_++;
    data_ += '#';
    data_ += std::to_string(id);
    data_ += '=';
    data_ += entity;
    data_ += '(';
    data_ += args;
    data_ += ");\n";
    return id;
}

std::string StepWriter::ref_list(const std::vector<Id>& ids) const {
    std::string s = "(";
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) s += ',';
        s += '#' + std::to_string(ids[i]);
    }
    return s + ")";
}

namespace {
std::string triple(const Vec3& v) {
    return "(" + StepWriter::real(v.x) + "," + StepWriter::real(v.y) + "," + StepWriter::real(v.z) + ")";
}
std::string ref(StepWriter::Id id) { return "#" + std::to_string(id); }
std::string logical(bool b) { return b ? ".T." : ".F."; }
}  // namespace

StepWriter::Id StepWriter::point(const Vec3& p) { return add("CARTESIAN_POINT", "''," + triple(transform_.apply(p))); }

StepWriter::Id StepWriter::direction(const Vec3& d) { return add("DIRECTION", "''," + triple(transform_.rotate(d))); }

StepWriter::Id StepWriter::placement(const Vec3& origin, const Vec3& axis, const Vec3& ref_dir) {
    const Id o = point(origin);
    const Id a = direction(axis);
    const Id r = direction(ref_dir);
    return add("AXIS2_PLACEMENT_3D", "''," + ref(o) + "," + ref(a) + "," + ref(r));
}

StepWriter::Id StepWriter::vertex(const Vec3& p) { return add("VERTEX_POINT", "''," + ref(point(p))); }

StepWriter::Id StepWriter::line(const Vec3& from, const Vec3& to) {
    const Vec3 delta = to - from;
    const double len = norm(delta);
    const Id p = point(from);
    const Id d = direction(delta * (1.0 / len));
    const Id v = add("VECTOR", "''," + ref(d) + "," + real(len));
    return add("LINE", "''," + ref(p) + "," + ref(v));
}

StepWriter::Id StepWriter::circle(const Vec3& center, const Vec3& axis, const Vec3& ref_dir, double radius) {
    const Id pl = placement(center, axis, ref_dir);
    return add("CIRCLE", "''," + ref(pl) + "," + real(radius));
}

StepWriter::Id StepWriter::edge_curve(Id start, Id end, Id curve, bool same_sense) {
    return add("EDGE_CURVE", "''," + ref(start) + "," + ref(end) + "," + ref(curve) + "," + logical(same_sense));
}

StepWriter::Id StepWriter::oriented_edge(Id edge, bool orientation) {
    return add("ORIENTED_EDGE", "'',*,*," + ref(edge) + "," + logical(orientation));
}

StepWriter::Id StepWriter::edge_loop(const std::vector<std::pair<Id, bool>>& uses) {
    std::vector<Id> oriented;
    oriented.reserve(uses.size());
    for (const auto& [edge, orientation] : uses) oriented.push_back(oriented_edge(edge, orientation));
    return add("EDGE_LOOP", "''," + ref_list(oriented));
}

StepWriter::Id StepWriter::bound(Id loop, bool outer) {
    return add(outer ? "FACE_OUTER_BOUND" : "FACE_BOUND", "''," + ref(loop) + ",.T.");
}

StepWriter::Id StepWriter::plane(const Vec3& origin, const Vec3& axis, const Vec3& ref_dir) {
    return add("PLANE", "''," + ref(placement(origin, axis, ref_dir)));
}

StepWriter::Id StepWriter::cylinder(const Vec3& axis_point, const Vec3& axis, const Vec3& ref_dir, double radius) {
    const Id pl = placement(axis_point, axis, ref_dir);
    return add("CYLINDRICAL_SURFACE", "''," + ref(pl) + "," + real(radius));
}

StepWriter::Id StepWriter::face(const std::vector<Id>& bounds, Id surface, bool same_sense) {
    return add("ADVANCED_FACE", "''," + ref_list(bounds) + "," + ref(surface) + "," + logical(same_sense));
}

StepWriter::Id StepWriter::closed_shell(const std::vector<Id>& faces) {
    return add("CLOSED_SHELL", "''," + ref_list(faces));
}

StepWriter::Id StepWriter::solid(Id shell) { return add("MANIFOLD_SOLID_BREP", "'solid'," + ref(shell)); }

std::string StepWriter::finish(std::string_view file_name) const {
    std::string out;
    out += "ISO-10303-21;\nHEADER;\n";
    out += "FILE_DESCRIPTION(('fablink synthetic fixture'),'2;1');\n";
    out += "FILE_NAME('" + std::string(file_name) + "','1970-01-01T00:00:00',(''),(''),'fablink','fablink','');\n";
    out += "FILE_SCHEMA(('CONFIG_CONTROL_DESIGN'));\nENDSEC;\nDATA;\n";
    out += data_;
    out += "ENDSEC;\nEND-ISO-10303-21;\n";
    return out;
}

void validate(const PlateSpec& s) {
    auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
    if (!positive(s.length) || !positive(s.width) || !positive(s.thickness)) {
        throw InvalidGeometry("plate dimensions must be positive");
    }
    for (std::size_t i = 0; i < s.holes.size(); ++i) {
        const auto& h = s.holes[i];
        if (!positive(h.diameter) || !std::isfinite(h.cx) || !std::isfinite(h.cy)) {
            throw InvalidGeometry("hole " + std::to_string(i) + ": diameter must be positive");
        }
        const double r = h.diameter / 2.0;
        if (h.cx - r <= 0.0 || h.cx + r >= s.length || h.cy - r <= 0.0 || h.cy + r >= s.width) {
            throw InvalidGeometry("hole " + std::to_string(i) + " overlaps the plate outline");
        }
        for (std::size_t j = 0; j < i; ++j) {
            const auto& o = s.holes[j];
            if (std::hypot(h.cx - o.cx, h.cy - o.cy) <= r + o.diameter / 2.0) {
                throw InvalidGeometry("holes " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
            }
        }
    }
}

StepWriter::Id write_plate(StepWriter& w, const PlateSpec& s) {
    validate(s);
    const double L = s.length, W = s.width, T = s.thickness;
    const Vec3 ex{1, 0, 0}, ey{0, 1, 0}, ez{0, 0, 1};

    const Vec3 p[8] = {{0, 0, 0}, {L, 0, 0}, {L, W, 0}, {0, W, 0}, {0, 0, T}, {L, 0, T}, {L, W, T}, {0, W, T}};
    StepWriter::Id v[8];
    for (int i = 0; i < 8; ++i) v[i] = w.vertex(p[i]);

    auto line_edge = [&](int a, int b) { return w.edge_curve(v[a], v[b], w.line(p[a], p[b]), true); };
    const auto e01 = line_edge(0, 1), e12 = line_edge(1, 2), e23 = line_edge(2, 3), e30 = line_edge(3, 0);
    const auto e45 = line_edge(4, 5), e56 = line_edge(5, 6), e67 = line_edge(6, 7), e74 = line_edge(7, 4);
    const auto e04 = line_edge(0, 4), e15 = line_edge(1, 5), e26 = line_edge(2, 6), e37 = line_edge(3, 7);

    struct HoleEdges {
        StepWriter::Id top;
        StepWriter::Id bottom;
    };
    std::vector<HoleEdges> hole_edges;
    for (const auto& h : s.holes) {
        const double r = h.diameter / 2.0;
        HoleEdges he{};
        for (double z : {T, 0.0}) {
            const Vec3 c{h.cx, h.cy, z};
            const auto vtx = w.vertex({h.cx + r, h.cy, z});
            const auto e = w.edge_curve(vtx, vtx, w.circle(c, ez, ex, r), true);
            (z == T ? he.top : he.bottom) = e;
        }
        hole_edges.push_back(he);
    }

    std::vector<StepWriter::Id> faces;

    // Bottom: plane axis +z, reversed so the face normal points -z.
    {
        std::vector<StepWriter::Id> bounds{
            w.bound(w.edge_loop({{e30, false}, {e23, false}, {e12, false}, {e01, false}}), true)};
        for (const auto& he : hole_edges) bounds.push_back(w.bound(w.edge_loop({{he.bottom, true}}), false));
        faces.push_back(w.face(bounds, w.plane({0, 0, 0}, ez, ex), false));
    }
    // Top.
    {
        std::vector<StepWriter::Id> bounds{
            w.bound(w.edge_loop({{e45, true}, {e56, true}, {e67, true}, {e74, true}}), true)};
        for (const auto& he : hole_edges) bounds.push_back(w.bound(w.edge_loop({{he.top, false}}), false));
        faces.push_back(w.face(bounds, w.plane({0, 0, T}, ez, ex), true));
    }
    // Sides, outward normals -y, +x, +y, -x.
    faces.push_back(w.face({w.bound(w.edge_loop({{e01, true}, {e15, true}, {e45, false}, {e04, false}}), true)},
                           w.plane(p[0], -ey, ex), true));
    faces.push_back(w.face({w.bound(w.edge_loop({{e12, true}, {e26, true}, {e56, false}, {e15, false}}), true)},
                           w.plane(p[1], ex, ey), true));
    faces.push_back(w.face({w.bound(w.edge_loop({{e23, true}, {e37, true}, {e67, false}, {e26, false}}), true)},
                           w.plane(p[2], ey, -ex), true));
    faces.push_back(w.face({w.bound(w.edge_loop({{e30, true}, {e04, true}, {e74, false}, {e37, false}}), true)},
                           w.plane(p[3], -ex, -ey), true));
    // Hole walls: same_sense = false points the face normal at the axis.
    for (std::size_t i = 0; i < s.holes.size(); ++i) {
        const auto& h = s.holes[i];
        const auto surface = w.cylinder({h.cx, h.cy, 0}, ez, ex, h.diameter / 2.0);
        faces.push_back(w.face({w.bound(w.edge_loop({{hole_edges[i].top, true}}), true),
                                w.bound(w.edge_loop({{hole_edges[i].bottom, false}}), false)},
                               surface, false));
    }
    return w.solid(w.closed_shell(faces));
}

std::string generate_plate_step(const PlateSpec& spec, const RigidTransform& transform) {
    StepWriter w(transform);
    write_plate(w, spec);
    return w.finish("plate.step");
}

double plate_edge_length(const PlateSpec& s) {
    double total = 2.0 * (2.0 * s.length + 2.0 * s.width) + 4.0 * s.thickness;
    for (const auto& h : s.holes) total += 2.0 * std::numbers::pi * h.diameter;
    return total;
}

}  // namespace fablink::fixtures
