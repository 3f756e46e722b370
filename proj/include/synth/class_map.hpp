#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "synth/image.hpp"

namespace synth {

struct ClassEntry {
    int class_id = 0;             // small integer >= 1
    std::string name;
    std::array<uint8_t, 3> rgb{}; // display color
    std::string prompt_noun;
    int z_order = 0;              // higher wins on overlap
};

// Semantic-class registry. class_ids and z_orders are unique; the background
// id is never listed as an entry.
struct ClassMap {
    std::vector<ClassEntry> entries;
    int background_id = 0;
    std::string dataset_name;

    void validate() const;
    const ClassEntry& entry(int class_id) const;  // throws LookupError
    bool has_class(int class_id) const;
    bool is_valid_label(int value) const;

    // palette indexed by class id (background color at index 0)
    Palette palette() const;
    ImageU8 colorize(const LabelMap& lm) const;
};

ClassMap load_class_map(const std::filesystem::path& path);
void save_class_map(const std::filesystem::path& path, const ClassMap& cm);

}  // namespace synth
