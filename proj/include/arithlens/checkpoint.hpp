#pragma once

// Versioned binary checkpoint:
//   magic "ALCK" | u32 version | config block | training meta |
//   u32 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims, f64 data |
//   u64 FNV-1a checksum of every preceding byte.
// Integers and doubles are stored little-endian.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "arithlens/model.hpp"

namespace arithlens {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrc { Io, CorruptCheckpoint, VersionMismatch };

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CheckpointErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    CheckpointErrc code() const noexcept { return code_; }

private:
    CheckpointErrc code_;
};

std::string serialize_checkpoint(const ModelBundle& model);
ModelBundle deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const ModelBundle& model, const std::string& path);
ModelBundle load_checkpoint(const std::string& path);

}  // namespace arithlens
