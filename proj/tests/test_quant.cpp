#include "rlrc/checkpoint.hpp"
#include "rlrc/quant.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

using namespace rlrc;
using rlrc::testing::random_tensor;

namespace {

double ulp(float x) {
    return std::nextafter(std::abs(x), std::numeric_limits<float>::infinity()) - std::abs(x);
}

ModelConfig small_config() {
    ModelConfig c = ModelConfig::for_env({});
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_ff = 48;
    return c;
}

}  // namespace

TEST(Quantize, ZeroBlock) {
    const QuantizedTensor q = quantize_tensor(Tensor({64}, 0.0f), 4);
    ASSERT_EQ(q.scales.size(), 1u);
    EXPECT_EQ(q.scales[0], 1.0f);
    for (int c : q.codes()) {
        EXPECT_EQ(c, 0);
    }
    EXPECT_EQ(dequantize(q).storage(), std::vector<float>(64, 0.0f));
}

TEST(Quantize, RepresentableValuesRoundTrip) {
    std::vector<float> w;
    for (int i = -7; i <= 7; ++i) {
        w.push_back(0.5f * i);
    }
    const Tensor t({w.size()}, w);
    EXPECT_EQ(dequantize(quantize_tensor(t, 4, 64)).storage(), w);
}

TEST(Quantize, HandWorkedElement) {
    const Tensor t({2}, std::vector<float>{3.5f, 1.23f});
    const QuantizedTensor q = quantize_tensor(t, 4);
    EXPECT_EQ(q.scales[0], 0.5f);
    EXPECT_EQ(q.code(1), 2);
    EXPECT_EQ(dequantize(q)[1], 1.0f);
}

TEST(Quantize, RoundsHalfAwayFromZero) {
    // s = 1: codes for ±2.5 and ±0.5
    const Tensor t({5}, std::vector<float>{7.0f, 2.5f, -2.5f, 0.5f, -0.5f});
    const auto codes = quantize_tensor(t, 4).codes();
    EXPECT_EQ(codes, (std::vector<int>{7, 3, -3, 1, -1}));
}

TEST(Quantize, ErrorBoundAndScaleInvariants) {
    std::uint64_t rng = 3;
    for (int bits : {4, 8}) {
        for (std::size_t block : {1u, 7u, 64u}) {
            const Tensor w = random_tensor({37, 29}, rng, 2.0f);
            const QuantizedTensor q = quantize_tensor(w, bits, block);
            EXPECT_EQ(q.scales.size(), (w.numel() + block - 1) / block);
            const Tensor d = dequantize(q);
            for (std::size_t i = 0; i < w.numel(); ++i) {
                const float s = q.scales[i / block];
                EXPECT_GT(s, 0.0f);
                EXPECT_LE(std::abs(q.code(i)), q.q_max());
                EXPECT_EQ(d[i], s * static_cast<float>(q.code(i)));
                EXPECT_LE(std::abs(w[i] - d[i]), s / 2.0 + ulp(w[i]));
            }
        }
    }
}

TEST(Quantize, EightBitNoWorseThanFourBitPerBlock) {
    std::uint64_t rng = 4;
    const Tensor w = random_tensor({1024}, rng);
    const Tensor d4 = dequantize(quantize_tensor(w, 4)), d8 = dequantize(quantize_tensor(w, 8));
    for (std::size_t b = 0; b < 16; ++b) {
        double e4 = 0.0, e8 = 0.0;
        for (std::size_t i = b * 64; i < (b + 1) * 64; ++i) {
            e4 = std::max(e4, static_cast<double>(std::abs(w[i] - d4[i])));
            e8 = std::max(e8, static_cast<double>(std::abs(w[i] - d8[i])));
        }
        EXPECT_LE(e8, e4);
    }
}

TEST(Quantize, Idempotent) {
    std::uint64_t rng = 5;
    const Tensor w = random_tensor({300}, rng);
    for (int bits : {4, 8}) {
        const QuantizedTensor q1 = quantize_tensor(w, bits);
        const QuantizedTensor q2 = quantize_tensor(dequantize(q1), bits);
        EXPECT_EQ(q1.codes(), q2.codes());
        EXPECT_EQ(q1.scales, q2.scales);
    }
}

TEST(Quantize, PackingAndValidation) {
    std::uint64_t rng = 6;
    const Tensor w = random_tensor({13}, rng);
    QuantizedTensor q = quantize_tensor(w, 4, 4);
    EXPECT_EQ(q.packed.size(), 7u);
    EXPECT_EQ(packed_bytes(13, 4), 7u);
    EXPECT_EQ(packed_bytes(13, 8), 13u);
    q.packed.pop_back();
    EXPECT_THROW(q.validate(), Error);
    EXPECT_THROW(dequantize(q), Error);
    Tensor bad({2}, std::vector<float>{1.0f, std::nanf("")});
    EXPECT_THROW(quantize_tensor(bad, 4), Error);
}

TEST(Qmatmul, MatchesDenseOnDequantized) {
    std::uint64_t rng = 7;
    const std::size_t m = 5, k = 40, n = 24;
    const Tensor w = random_tensor({k, n}, rng), x = random_tensor({m, k}, rng);
    const QuantizedTensor q = quantize_tensor(w, 4, 64);
    reset_qmatmul_stats();
    const Tensor got = qmatmul(q, x);
    const Tensor ref = matmul(x, dequantize(q));
    for (std::size_t i = 0; i < got.numel(); ++i) {
        EXPECT_NEAR(got[i], ref[i], 1e-5 * std::max(1.0f, std::abs(ref[i])));
    }
    const QmatmulStats st = qmatmul_stats();
    EXPECT_EQ(st.calls, 1u);
    EXPECT_LE(st.peak_buffer_elements, n);
    EXPECT_GT(st.peak_buffer_elements, 0u);

    const Tensor zero = qmatmul(q, Tensor({m, k}, 0.0f));
    for (float v : zero.data()) {
        EXPECT_EQ(v, 0.0f);
    }
    EXPECT_THROW(qmatmul(q, Tensor({m, k + 1})), ShapeError);
}

TEST(Memory, ClosedFormMatrices) {
    EXPECT_EQ(matrix_memory_bytes(4096, 32).total, 16384u);
    const MemoryBytes q4 = matrix_memory_bytes(4096, 4, 64);
    EXPECT_EQ(q4.weights_bytes, 2048u);
    EXPECT_EQ(q4.scales_bytes, 256u);
    EXPECT_EQ(q4.total, 2304u);
    EXPECT_NEAR(16384.0 / 2304.0, 7.11, 0.005);
    EXPECT_EQ(matrix_memory_bytes(4096, 8, 64).total, 4096u + 256u);
    EXPECT_EQ(matrix_memory_bytes(13, 4, 64).total, 7u + 4u);
}

TEST(QuantizedModel, ShapesIdempotenceAndMemory) {
    const PolicyModel m = init_model(small_config(), 1);
    const QuantizedModel q = quantize_model(m, 4);
    const QuantizedModel q2 = quantize_model(dequantize_model(q), 4);
    for (std::size_t l = 0; l < q.layers.size(); ++l) {
        for (Proj p : kAllProjs) {
            EXPECT_EQ(q.weight(l, p).codes(), q2.weight(l, p).codes());
            EXPECT_EQ(q.weight(l, p).shape, layer_weight(m.layers[l], p).shape());
        }
    }

    const Observation obs = observe(reset({0, 0, Split::IND}, 1));
    const auto ctx = build_context(m.config, obs);
    Tape tape(false);
    const ForwardResult a = forward(tape, m, TokenBatch::from_rows({ctx}));
    const ForwardResult b = forward(tape, q, TokenBatch::from_rows({ctx}));
    EXPECT_EQ(a.logits.shape(), b.logits.shape());
    EXPECT_TRUE(b.logits.value().all_finite());

    // Per-matrix sums reconcile with the model totals and the serialized payload.
    const MemoryBytes mem = memory_bytes(q);
    std::size_t weights = 0, scales = 0;
    for (const auto & [name, t] : q.base.named_parameters()) {
        weights += t->numel() * sizeof(float);
    }
    for (const auto & layer : q.layers) {
        for (const auto & qt : layer) {
            weights += qt.weight_bytes();
            scales += qt.scale_bytes();
        }
    }
    EXPECT_EQ(mem.weights_bytes, weights);
    EXPECT_EQ(mem.scales_bytes, scales);
    EXPECT_EQ(mem.total, weights + scales);
    EXPECT_EQ(memory_bytes(m).total, m.parameter_count() * sizeof(float));

    const std::string path = (std::filesystem::temp_directory_path() / "rlrc_test_q.rlrc").string();
    EXPECT_EQ(save_checkpoint(path, q, {"quantized", {}}), mem.total);
    const LoadedCheckpoint ck = load_checkpoint(path);
    ASSERT_TRUE(ck.quantized.has_value());
    EXPECT_EQ(ck.model_payload_bytes, mem.total);
    EXPECT_EQ(ck.quantized->weight(1, Proj::Down).packed, q.weight(1, Proj::Down).packed);
    std::filesystem::remove(path);
}
