#pragma once

#include <string>
#include <vector>

#include "diffender/data_io.hpp"

namespace diffender {

/// Class names of the synthetic desk set, indexed by label.
const std::vector<std::string>& desk_class_names();

/// Procedural 10-class shape dataset: one anti-aliased shape per image over a
/// smooth two-colour gradient. Deterministic in (count, split, seed, size).
Dataset make_desk_dataset(std::size_t count, Split split, Seed seed, int size = 32);

}  // namespace diffender
