#include "fablink/brep.hpp"

#include <cmath>
#include <set>

namespace fablink::brep {

namespace {

using step::Arg;
using step::ArgList;
using step::Record;
using step::StepFile;

class Builder {
public:
    explicit Builder(const StepFile& file) : file_(file) {}

    BrepModel run() {
        for (const auto& [id, inst] : file_.instances) {
            if (inst.find("CLOSED_SHELL") || inst.find("OPEN_SHELL")) {
                guarded(id, [&] { shell(id); });
            }
        }
        return std::move(model_);
    }

private:
    template <typename F>
    void guarded(InstanceId id, F&& body) {
        try {
            body();
        } catch (const step::DanglingRef&) {
            throw;
        } catch (const GeometryError&) {
            throw;
        } catch (const step::StepError& e) {
            throw GeometryError(id, e.what());
        }
    }

    // Resolves `id` and returns its record named `entity`, or nullptr.
    const Record* lookup(InstanceId id, std::string_view entity) const {
        return step::resolve_ref(file_, id).find(entity);
    }

    const Record& require(InstanceId id, std::string_view entity) const {
        const auto* r = lookup(id, entity);
        if (!r) {
            const auto& inst = step::resolve_ref(file_, id);
            const std::string found = inst.is_complex() ? "complex instance" : std::string(inst.name());
            throw GeometryError(id, "expected " + std::string(entity) + ", found " + found);
        }
        return *r;
    }

    static const Arg& arg(const Record& r, std::size_t i, InstanceId id) {
        if (i >= r.args.size()) throw GeometryError(id, "too few arguments for " + r.name);
        return r.args[i];
    }

    Point3 point(InstanceId id) {
        const auto& r = require(id, "CARTESIAN_POINT");
        const auto& coords = arg(r, 1, id).as_list();
        if (coords.empty() || coords.size() > 3) throw GeometryError(id, "point must have 1 to 3 coordinates");
        double c[3] = {0.0, 0.0, 0.0};
        for (std::size_t i = 0; i < coords.size(); ++i) {
            c[i] = coords[i].as_real();
            if (!std::isfinite(c[i])) throw GeometryError(id, "non-finite coordinate");
        }
        return {c[0], c[1], c[2]};
    }

    Dir3 direction(InstanceId id) {
        const auto& r = require(id, "DIRECTION");
        const auto& ratios = arg(r, 1, id).as_list();
        if (ratios.empty() || ratios.size() > 3) throw GeometryError(id, "direction must have 1 to 3 components");
        double c[3] = {0.0, 0.0, 0.0};
        for (std::size_t i = 0; i < ratios.size(); ++i) c[i] = ratios[i].as_real();
        auto d = Dir3::normalized({c[0], c[1], c[2]});
        if (!d) throw GeometryError(id, "direction cannot be normalized");
        return *d;
    }

    struct Placement {
        Point3 location;
        Dir3 axis;
    };

    Placement placement(InstanceId id) {
        const auto& r = require(id, "AXIS2_PLACEMENT_3D");
        if (r.args.size() != 4) throw GeometryError(id, "malformed placement: expected 4 arguments");
        Placement p;
        p.location = point(r.args[1].as_ref());
        p.axis = r.args[2].is_unset() ? *Dir3::normalized({0, 0, 1}) : direction(r.args[2].as_ref());
        if (!r.args[3].is_unset()) {
            const Dir3 ref = direction(r.args[3].as_ref());
            if (norm(cross(p.axis, ref)) < 1e-9) {
                throw GeometryError(id, "malformed placement: reference direction parallel to axis");
            }
        }
        return p;
    }

    double positive_radius(const Arg& a, InstanceId id) {
        const double r = a.as_real();
        if (!std::isfinite(r) || r <= 0.0) throw GeometryError(id, "radius must be positive");
        return r;
    }

    InstanceId vertex(InstanceId id) {
        if (model_.vertices.count(id)) return id;
        const auto& r = require(id, "VERTEX_POINT");
        model_.vertices.emplace(id, point(arg(r, 1, id).as_ref()));
        return id;
    }

    void curve(InstanceId id, Edge& e) {
        const auto& inst = step::resolve_ref(file_, id);
        if (const auto* r = inst.find("LINE")) {
            const auto& vec = require(arg(*r, 2, id).as_ref(), "VECTOR");
            (void)point(arg(*r, 1, id).as_ref());
            (void)direction(arg(vec, 1, id).as_ref());
            e.kind = CurveKind::line;
        } else if (const auto* c = inst.find("CIRCLE")) {
            const auto p = placement(arg(*c, 1, id).as_ref());
            e.kind = CurveKind::circle;
            e.circle = Circle{p.location, p.axis, positive_radius(arg(*c, 2, id), id)};
        } else {
            e.kind = CurveKind::other;
        }
    }

    void edge(InstanceId id) {
        if (model_.edges.count(id)) return;
        guarded(id, [&] {
            const auto& r = require(id, "EDGE_CURVE");
            Edge e;
            e.start_vertex = vertex(arg(r, 1, id).as_ref());
            e.end_vertex = vertex(arg(r, 2, id).as_ref());
            curve(arg(r, 3, id).as_ref(), e);
            e.same_sense = arg(r, 4, id).as_logical();
            if (e.kind == CurveKind::circle) {
                const BrepModel probe{{{e.start_vertex, model_.vertices.at(e.start_vertex)},
                                       {e.end_vertex, model_.vertices.at(e.end_vertex)}},
                                      {},
                                      {},
                                      {}};
                try {
                    (void)edge_length(e, probe);
                } catch (const GeometryError& g) {
                    throw GeometryError(id, g.reason());
                }
            }
            model_.edges.emplace(id, e);
        });
    }

    Loop loop(InstanceId bound_id) {
        Loop l;
        const auto& inst = step::resolve_ref(file_, bound_id);
        const Record* r = inst.find("FACE_OUTER_BOUND");
        if (r) {
            l.kind = LoopKind::outer;
        } else if ((r = inst.find("FACE_BOUND"))) {
            l.kind = LoopKind::inner;
        } else {
            throw GeometryError(bound_id, "expected FACE_BOUND or FACE_OUTER_BOUND");
        }
        const InstanceId loop_id = arg(*r, 1, bound_id).as_ref();
        const auto& loop_inst = step::resolve_ref(file_, loop_id);
        if (const auto* el = loop_inst.find("EDGE_LOOP")) {
            for (const auto& use : arg(*el, 1, loop_id).as_list()) {
                const InstanceId oe_id = use.as_ref();
                const auto& oe = require(oe_id, "ORIENTED_EDGE");
                const InstanceId edge_id = arg(oe, 3, oe_id).as_ref();
                edge(edge_id);
                l.edges.push_back({edge_id, arg(oe, 4, oe_id).as_logical()});
            }
        } else if (const auto* vl = loop_inst.find("VERTEX_LOOP")) {
            vertex(arg(*vl, 1, loop_id).as_ref());
        }
        return l;
    }

    void surface(InstanceId id, Face& f) {
        const auto& inst = step::resolve_ref(file_, id);
        if (const auto* p = inst.find("PLANE")) {
            const auto pl = placement(arg(*p, 1, id).as_ref());
            f.kind = SurfaceKind::plane;
            f.surface = Plane{pl.location, pl.axis};
        } else if (const auto* c = inst.find("CYLINDRICAL_SURFACE")) {
            const auto pl = placement(arg(*c, 1, id).as_ref());
            f.kind = SurfaceKind::cylinder;
            f.surface = Cylinder{pl.location, pl.axis, positive_radius(arg(*c, 2, id), id)};
        } else {
            f.kind = SurfaceKind::other;
        }
    }

    void face(InstanceId id) {
        if (model_.faces.count(id)) return;
        guarded(id, [&] {
            const auto& inst = step::resolve_ref(file_, id);
            const Record* r = inst.find("ADVANCED_FACE");
            if (!r) r = inst.find("FACE_SURFACE");
            if (!r) throw GeometryError(id, "shell member is not a face");
            Face f;
            for (const auto& b : arg(*r, 1, id).as_list()) f.loops.push_back(loop(b.as_ref()));
            guarded(arg(*r, 2, id).as_ref(), [&] { surface(arg(*r, 2, id).as_ref(), f); });
            f.same_sense = arg(*r, 3, id).as_logical();
            model_.faces.emplace(id, std::move(f));
        });
    }

    void shell(InstanceId id) {
        const auto& inst = step::resolve_ref(file_, id);
        const Record* r = inst.find("CLOSED_SHELL");
        if (!r) r = inst.find("OPEN_SHELL");
        std::vector<InstanceId> members;
        for (const auto& f : arg(*r, 1, id).as_list()) {
            const InstanceId fid = f.as_ref();
            face(fid);
            members.push_back(fid);
        }
        model_.shells.push_back(std::move(members));
    }

    const StepFile& file_;
    BrepModel model_;
};

}  // namespace

GeometryError::GeometryError(InstanceId id, const std::string& reason)
    : std::runtime_error("geometry error at #" + std::to_string(id) + ": " + reason), id_(id), reason_(reason) {}

Vec3 Face::outward_plane_normal() const {
    const auto& n = std::get<Plane>(surface).normal.vec();
    return same_sense ? n : -n;
}

BrepModel build_brep(const step::StepFile& file) { return Builder(file).run(); }

}  // namespace fablink::brep
