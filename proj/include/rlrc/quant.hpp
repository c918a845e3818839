#pragma once

#include "rlrc/model.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace rlrc {

// Blockwise symmetric integer quantization of a weight tensor. Blocks are
// runs of block_size consecutive elements in row-major order; each has one
// float scale s, and element i is reconstructed as s[i / block_size] * code.
struct QuantizedTensor {
    int bits = 4;
    std::size_t block_size = 64;
    Shape shape;
    std::vector<float> scales;
    std::vector<std::uint8_t> packed;  // 4-bit: two codes per byte, low nibble first

    std::size_t numel() const { return shape_numel(shape); }
    int q_max() const { return bits == 4 ? 7 : 127; }
    int code(std::size_t i) const;
    std::vector<int> codes() const;

    std::size_t weight_bytes() const { return packed.size(); }
    std::size_t scale_bytes() const { return scales.size() * sizeof(float); }

    // Throws if scales/packed lengths disagree with shape, bits and block size.
    void validate() const;
};

int quant_q_max(int bits);
std::size_t packed_bytes(std::size_t numel, int bits);

QuantizedTensor quantize_tensor(const Tensor & weights, int bits, std::size_t block_size = 64);
Tensor dequantize(const QuantizedTensor & qt);

// activations[m x k] times the [k x n] matrix held by qt, dequantizing one
// weight row at a time.
Tensor qmatmul(const QuantizedTensor & qt, const Tensor & activations);

// Instrumentation for qmatmul's transient dequantization buffer.
struct QmatmulStats {
    std::size_t peak_buffer_elements = 0;
    std::size_t calls = 0;
};
QmatmulStats qmatmul_stats();
void reset_qmatmul_stats();

struct QuantizedModel {
    int bits = 4;
    std::size_t block_size = 64;
    // Embeddings, norms and the action head at full precision. Decoder
    // projection tensors in base.layers are left empty.
    PolicyModel base;
    std::vector<std::array<QuantizedTensor, 7>> layers;  // indexed by Proj

    const ModelConfig & config() const { return base.config; }
    const QuantizedTensor & weight(std::size_t layer, Proj p) const { return layers.at(layer)[static_cast<std::size_t>(p)]; }
};

QuantizedModel quantize_model(const PolicyModel & model, int bits, std::size_t block_size = 64);
PolicyModel dequantize_model(const QuantizedModel & qmodel);

class QuantizedProjector final : public Projector {
public:
    explicit QuantizedProjector(const QuantizedModel & m) : model_(m) {}
    Var project(Tape & tape, Var x, std::size_t layer, Proj p) const override;

private:
    const QuantizedModel & model_;
};

ForwardResult forward(Tape & tape, const QuantizedModel & model, const TokenBatch & tokens,
                      std::span<const std::size_t> rows = {});
std::vector<SampledAction> sample_actions(const QuantizedModel & model, const std::vector<Observation> & observations,
                                          SampleMode mode, std::uint64_t & rng);

struct MemoryBytes {
    std::size_t weights_bytes = 0;
    std::size_t scales_bytes = 0;
    std::size_t total = 0;
};

MemoryBytes memory_bytes(const PolicyModel & model);
MemoryBytes memory_bytes(const QuantizedModel & model);
// Closed-form cost of storing n elements: bits = 32 (dense), 8 or 4.
MemoryBytes matrix_memory_bytes(std::size_t numel, int bits, std::size_t block_size = 64);

}  // namespace rlrc
