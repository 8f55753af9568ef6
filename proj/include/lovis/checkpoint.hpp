#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lovis/optim.hpp"

namespace lovis {

// Binary layout, little-endian throughout:
//   "LOVS" | version u32 | count u32
//   per parameter: name_len u32 | name bytes (UTF-8) | rank u32 | dims u64[rank] | f64[numel]
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);

// Reads the whole file and validates every record before touching `params`;
// on any error `params` is left unchanged. Every stored name must exist in
// `params` with an identical shape, and every parameter must be present.
void load_checkpoint(ParameterSet& params, const std::filesystem::path& path);

// FNV-1a over names, shapes and raw values; used to compare parameter states.
std::uint64_t parameter_hash(const ParameterSet& params);

}  // namespace lovis
