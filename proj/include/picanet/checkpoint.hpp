#pragma once

#include <cstdint>
#include <string>

#include "picanet/layers.hpp"

namespace picanet {

// Binary checkpoint: magic "PICA" | version u32 LE | record count u32 LE |
// records of { name length u16 LE, name bytes, dtype u8 (0 = f32, 1 = f64),
// rank u8, dims u32 LE each, raw values LE }. Registry order is preserved,
// so save -> load -> save round-trips byte-exactly.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg);

// Strict load into an already-registered model: every record must match an
// entry by name, dtype, and shape, and every entry must be filled.
template <typename T>
void load_checkpoint(const std::string& path, ParamRegistry<T>& reg);

}  // namespace picanet
