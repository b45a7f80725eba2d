#pragma once

#include <string>
#include <utility>

#include "vcnn/network.hpp"

namespace vcnn {

inline constexpr uint32_t kCheckpointVersion = 1;

// Versioned binary container: magic "VCNN", u32 format version, the
// serialized NetworkSpec, then per-layer weight and bias blobs as
// little-endian f32 in the documented linear order. load(save(x)) == x
// bit-for-bit. Throws DataError on bad magic, version or truncation.
void save_checkpoint(const NetworkSpec& spec, const NetworkWeights& weights,
                     const std::string& path);
std::pair<NetworkSpec, NetworkWeights> load_checkpoint(const std::string& path);

}  // namespace vcnn
