#include "rlrc/quant.hpp"

#include <algorithm>
#include <cmath>

namespace rlrc {

namespace {
QmatmulStats g_qmatmul_stats;
}

int quant_q_max(int bits) {
    if (bits == 4) {
        return 7;
    }
    if (bits == 8) {
        return 127;
    }
    throw Error("unsupported quantization width " + std::to_string(bits) + " (expected 4 or 8)");
}

std::size_t packed_bytes(std::size_t numel, int bits) {
    quant_q_max(bits);
    return bits == 4 ? (numel + 1) / 2 : numel;
}

int QuantizedTensor::code(std::size_t i) const {
    if (bits == 4) {
        const std::uint8_t byte = packed[i / 2];
        const int nibble = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
        return nibble - 8;
    }
    return static_cast<int>(static_cast<std::int8_t>(packed[i]));
}

std::vector<int> QuantizedTensor::codes() const {
    std::vector<int> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = code(i);
    }
    return out;
}

void QuantizedTensor::validate() const {
    quant_q_max(bits);
    if (block_size == 0) {
        throw Error("quantized tensor block_size must be >= 1");
    }
    if (shape.empty()) {
        throw ShapeError("quantized tensor has empty shape");
    }
    const std::size_t n = numel();
    const std::size_t blocks = (n + block_size - 1) / block_size;
    if (scales.size() != blocks) {
        throw Error("quantized tensor " + shape_str(shape) + " has " + std::to_string(scales.size()) +
                    " scales, expected " + std::to_string(blocks));
    }
    if (packed.size() != packed_bytes(n, bits)) {
        throw Error("corrupted pack length: " + std::to_string(packed.size()) + " bytes for " + std::to_string(n) +
                    " " + std::to_string(bits) + "-bit codes");
    }
}

QuantizedTensor quantize_tensor(const Tensor & weights, int bits, std::size_t block_size) {
    const int qmax = quant_q_max(bits);
    if (block_size == 0) {
        throw Error("block_size must be >= 1");
    }
    require_finite(weights.data(), "quantize_tensor input");
    QuantizedTensor qt;
    qt.bits = bits;
    qt.block_size = block_size;
    qt.shape = weights.shape();
    const std::size_t n = weights.numel();
    const std::size_t blocks = (n + block_size - 1) / block_size;
    qt.scales.resize(blocks);
    qt.packed.assign(packed_bytes(n, bits), 0);
    auto w = weights.data();
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t lo = b * block_size;
        const std::size_t hi = std::min(n, lo + block_size);
        float amax = 0.0f;
        for (std::size_t i = lo; i < hi; ++i) {
            amax = std::max(amax, std::fabs(w[i]));
        }
        const float s = amax > 0.0f ? amax / static_cast<float>(qmax) : 1.0f;
        qt.scales[b] = s;
        for (std::size_t i = lo; i < hi; ++i) {
            // std::round is half-away-from-zero.
            const int c = std::clamp(static_cast<int>(std::round(w[i] / s)), -qmax, qmax);
            if (bits == 4) {
                const auto nibble = static_cast<std::uint8_t>(c + 8);
                qt.packed[i / 2] |= (i % 2 == 0) ? nibble : static_cast<std::uint8_t>(nibble << 4);
            } else {
                qt.packed[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(c));
            }
        }
    }
    return qt;
}

Tensor dequantize(const QuantizedTensor & qt) {
    qt.validate();
    Tensor out(qt.shape);
    auto o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = qt.scales[i / qt.block_size] * static_cast<float>(qt.code(i));
    }
    return out;
}

namespace {

// Dequantizes elements [first, first + count) into dst.
void dequantize_range(const QuantizedTensor & qt, std::size_t first, std::size_t count, float * dst) {
    if (qt.bits == 4) {
        for (std::size_t j = 0; j < count; ++j) {
            const std::size_t i = first + j;
            const std::uint8_t byte = qt.packed[i >> 1];
            const int c = ((i & 1) == 0 ? (byte & 0x0F) : (byte >> 4)) - 8;
            dst[j] = qt.scales[i / qt.block_size] * static_cast<float>(c);
        }
    } else {
        for (std::size_t j = 0; j < count; ++j) {
            const std::size_t i = first + j;
            dst[j] = qt.scales[i / qt.block_size] * static_cast<float>(static_cast<std::int8_t>(qt.packed[i]));
        }
    }
}

}  // namespace

Tensor qmatmul(const QuantizedTensor & qt, const Tensor & activations) {
    if (qt.shape.size() != 2 || activations.rank() != 2 || activations.dim(1) != qt.shape[0]) {
        throw ShapeError("qmatmul shape mismatch: activations " + shape_str(activations.shape()) + " x weights " +
                         shape_str(qt.shape));
    }
    const std::size_t m = activations.dim(0), k = qt.shape[0], n = qt.shape[1];
    Tensor out({m, n});
    std::vector<float> row(n);
    ++g_qmatmul_stats.calls;
    g_qmatmul_stats.peak_buffer_elements = std::max(g_qmatmul_stats.peak_buffer_elements, row.size());
    auto x = activations.data();
    float * c = out.data().data();
    for (std::size_t p = 0; p < k; ++p) {
        dequantize_range(qt, p * n, n, row.data());
        const float * __restrict wr = row.data();
        for (std::size_t i = 0; i < m; ++i) {
            const float a = x[i * k + p];
            float * __restrict ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += a * wr[j];
            }
        }
    }
    return out;
}

QmatmulStats qmatmul_stats() {
    return g_qmatmul_stats;
}

void reset_qmatmul_stats() {
    g_qmatmul_stats = {};
}

QuantizedModel quantize_model(const PolicyModel & model, int bits, std::size_t block_size) {
    quant_q_max(bits);
    for (const auto & [name, t] : model.named_parameters()) {
        if (!t->empty()) {
            require_finite(t->data(), name.c_str());
        }
    }
    QuantizedModel q;
    q.bits = bits;
    q.block_size = block_size;
    q.base.config = model.config;
    q.base.tok_emb = model.tok_emb;
    q.base.pos_emb = model.pos_emb;
    q.base.final_norm = model.final_norm;
    q.base.action_head = model.action_head;
    for (const auto & L : model.layers) {
        DecoderLayer shell;
        shell.attn_norm = L.attn_norm;
        shell.mlp_norm = L.mlp_norm;
        q.base.layers.push_back(std::move(shell));
        std::array<QuantizedTensor, 7> qs;
        for (Proj p : kAllProjs) {
            qs[static_cast<std::size_t>(p)] = quantize_tensor(layer_weight(L, p), bits, block_size);
        }
        q.layers.push_back(std::move(qs));
    }
    q.base.set_requires_grad(false);
    return q;
}

PolicyModel dequantize_model(const QuantizedModel & qmodel) {
    PolicyModel m = qmodel.base;
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        for (Proj p : kAllProjs) {
            layer_weight(m.layers[l], p) = dequantize(qmodel.weight(l, p));
        }
    }
    return m;
}

Var QuantizedProjector::project(Tape & tape, Var x, std::size_t layer, Proj p) const {
    if (tape.recording() && tape.needs_grad(x)) {
        throw Error("quantized projections are inference-only");
    }
    return tape.constant(qmatmul(model_.weight(layer, p), x.value()));
}

ForwardResult forward(Tape & tape, const QuantizedModel & model, const TokenBatch & tokens,
                      std::span<const std::size_t> rows) {
    return forward_with(tape, model.base, QuantizedProjector(model), tokens, rows);
}

std::vector<SampledAction> sample_actions(const QuantizedModel & model, const std::vector<Observation> & observations,
                                          SampleMode mode, std::uint64_t & rng) {
    const QuantizedProjector proj(model);
    return sample_actions(model.base, observations, mode, rng, &proj);
}

MemoryBytes matrix_memory_bytes(std::size_t numel, int bits, std::size_t block_size) {
    MemoryBytes m;
    if (bits == 32) {
        m.weights_bytes = numel * sizeof(float);
    } else {
        if (block_size == 0) {
            throw Error("block_size must be >= 1");
        }
        m.weights_bytes = packed_bytes(numel, bits);
        m.scales_bytes = (numel + block_size - 1) / block_size * sizeof(float);
    }
    m.total = m.weights_bytes + m.scales_bytes;
    return m;
}

MemoryBytes memory_bytes(const PolicyModel & model) {
    MemoryBytes m;
    m.weights_bytes = model.parameter_count() * sizeof(float);
    m.total = m.weights_bytes;
    return m;
}

MemoryBytes memory_bytes(const QuantizedModel & model) {
    MemoryBytes m;
    m.weights_bytes = model.base.parameter_count() * sizeof(float);
    for (const auto & layer : model.layers) {
        for (const auto & qt : layer) {
            m.weights_bytes += qt.weight_bytes();
            m.scales_bytes += qt.scale_bytes();
        }
    }
    m.total = m.weights_bytes + m.scales_bytes;
    return m;
}

}  // namespace rlrc
