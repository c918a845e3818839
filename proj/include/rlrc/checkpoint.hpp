#pragma once

#include "rlrc/model.hpp"
#include "rlrc/quant.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace rlrc {

// Container layout (all integers little-endian):
//
//   "RLRC" | u32 version | u32 header_len | header (JSON text)
//   then per tensor: u32 name_len | name | u32 rank | rank x u64 extents | payload
//
// Payload is float32 data, except for tensors listed in the header's
// "byte_tensors" array, whose payload is raw bytes (extent = byte count).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<float> f32;
    std::vector<std::uint8_t> bytes;
    bool is_bytes = false;

    std::size_t payload_bytes() const { return is_bytes ? bytes.size() : f32.size() * sizeof(float); }
};

struct Container {
    nlohmann::json header = nlohmann::json::object();
    std::vector<TensorRecord> records;
};

void write_container(const std::string & path, const Container & c);
Container read_container(const std::string & path);

// Pipeline stage recorded in every checkpoint; used to reject out-of-order
// stage invocations.
struct CheckpointInfo {
    std::string stage = "dense";
    nlohmann::json meta = nlohmann::json::object();
};

struct LoadedCheckpoint {
    CheckpointInfo info;
    std::optional<PolicyModel> model;
    std::optional<QuantizedModel> quantized;
    std::optional<ValueHead> value_head;
    // Bytes of tensor payload excluding the value head.
    std::size_t model_payload_bytes = 0;
};

// Returns model payload bytes written (value head excluded).
std::size_t save_checkpoint(const std::string & path, const PolicyModel & model, const CheckpointInfo & info,
                            const ValueHead * value_head = nullptr);
std::size_t save_checkpoint(const std::string & path, const QuantizedModel & model, const CheckpointInfo & info);

LoadedCheckpoint load_checkpoint(const std::string & path);
PolicyModel load_policy(const std::string & path);

}  // namespace rlrc
