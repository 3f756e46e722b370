#include "synth/class_map.hpp"

#include <fstream>
#include <set>

#include "json.hpp"
#include "synth/errors.hpp"

namespace synth {

void ClassMap::validate() const {
    std::set<int> ids, zs;
    for (const auto& e : entries) {
        if (e.class_id == 0)
            throw ValidationError("class_id must be nonzero: " + e.name);
        if (e.class_id == background_id)
            throw ValidationError("background_id listed as class entry: " + e.name);
        if (!ids.insert(e.class_id).second)
            throw ValidationError("duplicate class_id " + std::to_string(e.class_id));
        if (!zs.insert(e.z_order).second)
            throw ValidationError("duplicate z_order " + std::to_string(e.z_order));
    }
}

const ClassEntry& ClassMap::entry(int class_id) const {
    for (const auto& e : entries)
        if (e.class_id == class_id) return e;
    throw LookupError("unknown class_id " + std::to_string(class_id));
}

bool ClassMap::has_class(int class_id) const {
    for (const auto& e : entries)
        if (e.class_id == class_id) return true;
    return false;
}

bool ClassMap::is_valid_label(int value) const {
    return value == background_id || has_class(value);
}

Palette ClassMap::palette() const {
    int max_id = background_id;
    for (const auto& e : entries) max_id = std::max(max_id, e.class_id);
    Palette p(size_t(max_id) + 1, {0, 0, 0});
    for (const auto& e : entries) p[size_t(e.class_id)] = e.rgb;
    return p;
}

ImageU8 ClassMap::colorize(const LabelMap& lm) const {
    const Palette p = palette();
    ImageU8 img(lm.h, lm.w);
    for (int y = 0; y < lm.h; ++y)
        for (int x = 0; x < lm.w; ++x) {
            const uint8_t id = lm.at(y, x);
            const auto rgb = id < p.size() ? p[id] : std::array<uint8_t, 3>{0, 0, 0};
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = rgb[size_t(ch)];
        }
    return img;
}

ClassMap load_class_map(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open class map: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("class map parse error in " + path.string() + ": " + e.what());
    }
    ClassMap cm;
    cm.background_id = j.value("background_id", 0);
    cm.dataset_name = j.value("dataset_name", "");
    for (const auto& je : j.at("entries")) {
        ClassEntry e;
        e.class_id = je.at("class_id").get<int>();
        e.name = je.at("name").get<std::string>();
        const auto& rgb = je.at("rgb");
        for (int k = 0; k < 3; ++k) e.rgb[size_t(k)] = uint8_t(rgb.at(size_t(k)).get<int>());
        e.prompt_noun = je.value("prompt_noun", e.name);
        e.z_order = je.at("z_order").get<int>();
        cm.entries.push_back(std::move(e));
    }
    cm.validate();
    return cm;
}

void save_class_map(const std::filesystem::path& path, const ClassMap& cm) {
    nlohmann::json j;
    j["background_id"] = cm.background_id;
    j["dataset_name"] = cm.dataset_name;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : cm.entries) {
        j["entries"].push_back({{"class_id", e.class_id},
                                {"name", e.name},
                                {"rgb", {e.rgb[0], e.rgb[1], e.rgb[2]}},
                                {"prompt_noun", e.prompt_noun},
                                {"z_order", e.z_order}});
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write class map: " + path.string());
    out << j.dump(2) << "\n";
}

}  // namespace synth
