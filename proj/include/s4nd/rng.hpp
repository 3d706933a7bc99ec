#pragma once

#include <cstdint>
#include <string_view>

namespace s4nd {

/// Independent stream seed for one consumer (weight init, shuffling,
/// augmentation, phantom generation) derived from the global seed and a tag.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

}  // namespace s4nd
