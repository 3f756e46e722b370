#include "synth/compose.hpp"

#include <set>

#include "synth/errors.hpp"

namespace synth {

CompositeScene compose(const std::vector<OrganRender>& renders, const ImageU8& background,
                       const ClassMap& class_map, BackgroundSource bg_source) {
    const int h = background.h, w = background.w;
    std::set<int> seen;
    for (const auto& r : renders) {
        if (!seen.insert(r.class_id).second)
            throw ValidationError("duplicate render for class " + std::to_string(r.class_id));
        class_map.entry(r.class_id);  // must be known
        if (r.image.h != h || r.image.w != w || r.mask.mask.h != h || r.mask.mask.w != w)
            throw ValidationError("render resolution mismatch for class " +
                                  std::to_string(r.class_id));
    }

    CompositeScene scene;
    scene.background_source = bg_source;
    scene.image = background;
    scene.label_map = LabelMap(h, w);
    for (auto& px : scene.label_map.px) px = uint8_t(class_map.background_id);

    // stable priority: order renders by ascending z_order and paint over
    std::vector<const OrganRender*> ordered;
    for (const auto& r : renders) ordered.push_back(&r);
    std::sort(ordered.begin(), ordered.end(), [&](const OrganRender* a, const OrganRender* b) {
        return class_map.entry(a->class_id).z_order < class_map.entry(b->class_id).z_order;
    });

    for (const OrganRender* r : ordered) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (r->mask.mask.at(y, x) == 0) continue;
                scene.label_map.at(y, x) = uint8_t(r->class_id);
                for (int c = 0; c < 3; ++c) scene.image.at(y, x, c) = r->image.at(y, x, c);
            }
        scene.provenance.emplace_back(r->class_id, r->provenance);
    }
    std::sort(scene.provenance.begin(), scene.provenance.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return scene;
}

SceneMaskReport validate_scene_masks(const std::vector<BinaryMask>& masks, int h, int w) {
    SceneMaskReport rep;
    std::vector<int> counts(size_t(h) * w, 0);
    for (const auto& m : masks) {
        if (m.mask.h != h || m.mask.w != w)
            throw ValidationError("scene mask resolution mismatch for class " +
                                  std::to_string(m.class_id));
        long area = 0;
        for (size_t i = 0; i < m.mask.px.size(); ++i)
            if (m.mask.px[i]) {
                ++counts[i];
                ++area;
            }
        rep.per_class_area[m.class_id] += area;
    }
    long covered = 0;
    for (int c : counts) {
        if (c > 0) ++covered;
        if (c > 1) rep.overlap_pixel_count += c - 1;
    }
    rep.coverage_fraction = h * w > 0 ? double(covered) / double(h * w) : 0.0;
    return rep;
}

}  // namespace synth
