#include "rlrc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rlrc {

const Tensor & Var::value() const {
    if (!tape_) {
        throw Error("use of an unbound Var");
    }
    return tape_->value_of(id_);
}

float Var::item() const {
    const auto & v = value();
    if (v.numel() != 1) {
        throw ShapeError("item() on non-scalar of shape " + shape_str(v.shape()));
    }
    return v[0];
}

const Tensor & Tape::value_of(std::size_t id) const {
    const Node & n = nodes_.at(id);
    return n.ref ? *n.ref : n.owned;
}

Var Tape::leaf(const Tensor & param) {
    Node n;
    n.ref = &param;
    if (recording_ && param.requires_grad()) {
        n.param = const_cast<Tensor *>(&param);
        n.needs_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    require_finite(value.data(), "tape op output");
    Node n;
    n.owned = std::move(value);
    if (recording_) {
        for (const Var & in : inputs) {
            if (in.tape() != this) {
                throw Error("op mixes values from different tapes");
            }
            n.needs_grad = n.needs_grad || nodes_[in.id()].needs_grad;
        }
        if (n.needs_grad) {
            n.backward = std::move(fn);
        }
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

bool Tape::needs_grad(Var v) const {
    return nodes_.at(v.id()).needs_grad;
}

std::span<float> Tape::grad_buffer(Var v) {
    Node & n = nodes_.at(v.id());
    if (n.grad.empty()) {
        n.grad.assign(value_of(v.id()).numel(), 0.0f);
    }
    return n.grad;
}

void Tape::backward(Var loss) {
    if (!recording_) {
        throw Error("backward() on a non-recording tape");
    }
    if (backward_done_) {
        throw Error("backward() called twice without reset()");
    }
    if (loss.tape() != this) {
        throw Error("backward() on a Var from another tape");
    }
    if (loss.numel() != 1) {
        throw ShapeError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    }
    if (nodes_.empty()) {
        throw Error("backward() on an empty tape");
    }
    backward_done_ = true;
    if (!nodes_[loss.id()].needs_grad) {
        return;
    }
    grad_buffer(loss)[0] = 1.0f;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node & n = nodes_[i];
        if (!n.needs_grad || n.grad.empty()) {
            continue;
        }
        if (n.param) {
            auto pg = n.param->grad();
            for (std::size_t j = 0; j < pg.size(); ++j) {
                pg[j] += n.grad[j];
            }
        } else if (n.backward) {
            n.backward(*this, n.grad);
        }
    }
}

void Tape::reset() {
    nodes_.clear();
    backward_done_ = false;
}

namespace ad {

namespace {

void require_same_tape(Var a, Var b) {
    if (a.tape() != b.tape()) {
        throw Error("op mixes values from different tapes");
    }
}

void require_same_shape(const char * op, Var a, Var b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

struct AxisLayout {
    std::size_t outer;
    std::size_t len;
    std::size_t inner;
};

AxisLayout axis_layout(const Shape & shape, std::size_t axis, const char * op) {
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
    }
    AxisLayout l{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) {
        l.outer *= shape[i];
    }
    for (std::size_t i = axis + 1; i < shape.size(); ++i) {
        l.inner *= shape[i];
    }
    return l;
}

std::size_t cols_of(const Tensor & t) { return t.rank() == 1 ? t.dim(0) : t.numel() / t.dim(0); }

void check_targets(std::span<const std::int32_t> targets, std::size_t rows, std::size_t vocab, const char * op) {
    if (targets.size() != rows) {
        throw ShapeError(std::string(op) + ": " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
    }
    for (auto t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw Error(std::string(op) + ": target id " + std::to_string(t) + " outside [0, " +
                        std::to_string(vocab) + ")");
        }
    }
}

// Row-wise log-softmax into out (double accumulation for the normalizer).
void log_softmax_rows(const float * x, float * out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        const float * xr = x + r * cols;
        float * o = out + r * cols;
        float mx = *std::max_element(xr, xr + cols);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            s += std::exp(static_cast<double>(xr[c] - mx));
        }
        const float lse = mx + static_cast<float>(std::log(s));
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = xr[c] - lse;
        }
    }
}

}  // namespace

Var matmul(Var a, Var b) {
    require_same_tape(a, b);
    const Tensor & av = a.value();
    const Tensor & bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw ShapeError("matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    kernels::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n, false);
    return a.tape()->push(std::move(out), {a, b}, [a, b, m, k, n](Tape & t, std::span<const float> g) {
        if (t.needs_grad(a)) {
            kernels::gemm_nt(g.data(), b.value().data().data(), t.grad_buffer(a).data(), m, n, k, true);
        }
        if (t.needs_grad(b)) {
            kernels::gemm_tn(a.value().data().data(), g.data(), t.grad_buffer(b).data(), m, k, n, true);
        }
    });
}

Var add(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape("add", a, b);
    Tensor out = a.value();
    out.drop_grad();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] += bv[i];
    }
    return a.tape()->push(std::move(out), {a, b}, [a, b](Tape & t, std::span<const float> g) {
        for (Var v : {a, b}) {
            if (t.needs_grad(v)) {
                auto gv = t.grad_buffer(v);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gv[i] += g[i];
                }
            }
        }
    });
}

Var sub(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape("sub", a, b);
    Tensor out(a.shape());
    auto o = out.data();
    auto av = a.value().data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = av[i] - bv[i];
    }
    return a.tape()->push(std::move(out), {a, b}, [a, b](Tape & t, std::span<const float> g) {
        if (t.needs_grad(a)) {
            auto ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
            }
        }
        if (t.needs_grad(b)) {
            auto gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] -= g[i];
            }
        }
    });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape("mul", a, b);
    Tensor out(a.shape());
    auto o = out.data();
    auto av = a.value().data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = av[i] * bv[i];
    }
    return a.tape()->push(std::move(out), {a, b}, [a, b](Tape & t, std::span<const float> g) {
        auto av = a.value().data();
        auto bv = b.value().data();
        if (t.needs_grad(a)) {
            auto ga = t.grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * bv[i];
            }
        }
        if (t.needs_grad(b)) {
            auto gb = t.grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += g[i] * av[i];
            }
        }
    });
}

Var scale(Var a, float factor) {
    Tensor out(a.shape());
    auto o = out.data();
    auto av = a.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = av[i] * factor;
    }
    return a.tape()->push(std::move(out), {a}, [a, factor](Tape & t, std::span<const float> g) {
        auto ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * factor;
        }
    });
}

Var square(Var a) {
    return mul(a, a);
}

Var silu(Var a) {
    Tensor out(a.shape());
    auto o = out.data();
    auto av = a.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = av[i] / (1.0f + std::exp(-av[i]));
    }
    return a.tape()->push(std::move(out), {a}, [a](Tape & t, std::span<const float> g) {
        auto av = a.value().data();
        auto ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const float s = 1.0f / (1.0f + std::exp(-av[i]));
            ga[i] += g[i] * s * (1.0f + av[i] * (1.0f - s));
        }
    });
}

Var add_bias(Var x, Var bias) {
    require_same_tape(x, bias);
    const Tensor & xv = x.value();
    const std::size_t n = bias.numel();
    if (bias.value().rank() != 1 || cols_of(xv) != n) {
        throw ShapeError("add_bias shape mismatch: " + shape_str(xv.shape()) + " + " + shape_str(bias.shape()));
    }
    const std::size_t m = xv.numel() / n;
    Tensor out = xv;
    out.drop_grad();
    auto o = out.data();
    auto bv = bias.value().data();
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            o[r * n + c] += bv[c];
        }
    }
    return x.tape()->push(std::move(out), {x, bias}, [x, bias, m, n](Tape & t, std::span<const float> g) {
        if (t.needs_grad(x)) {
            auto gx = t.grad_buffer(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i];
            }
        }
        if (t.needs_grad(bias)) {
            auto gb = t.grad_buffer(bias);
            for (std::size_t c = 0; c < n; ++c) {
                double s = 0.0;
                for (std::size_t r = 0; r < m; ++r) {
                    s += g[r * n + c];
                }
                gb[c] += static_cast<float>(s);
            }
        }
    });
}

Var mul_last(Var x, Var gain) {
    require_same_tape(x, gain);
    const Tensor & xv = x.value();
    const std::size_t n = gain.numel();
    if (gain.value().rank() != 1 || xv.shape().back() != n) {
        throw ShapeError("mul_last shape mismatch: " + shape_str(xv.shape()) + " * " + shape_str(gain.shape()));
    }
    const std::size_t m = xv.numel() / n;
    Tensor out(xv.shape());
    auto o = out.data();
    auto xd = xv.data();
    auto gd = gain.value().data();
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            o[r * n + c] = xd[r * n + c] * gd[c];
        }
    }
    return x.tape()->push(std::move(out), {x, gain}, [x, gain, m, n](Tape & t, std::span<const float> g) {
        auto xd = x.value().data();
        auto gd = gain.value().data();
        if (t.needs_grad(x)) {
            auto gx = t.grad_buffer(x);
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    gx[r * n + c] += g[r * n + c] * gd[c];
                }
            }
        }
        if (t.needs_grad(gain)) {
            auto gg = t.grad_buffer(gain);
            for (std::size_t c = 0; c < n; ++c) {
                double s = 0.0;
                for (std::size_t r = 0; r < m; ++r) {
                    s += static_cast<double>(g[r * n + c]) * xd[r * n + c];
                }
                gg[c] += static_cast<float>(s);
            }
        }
    });
}

Var softmax(Var x, std::size_t axis) {
    const auto L = axis_layout(x.shape(), axis, "softmax");
    Tensor out(x.shape());
    auto xd = x.value().data();
    auto o = out.data();
    for (std::size_t a = 0; a < L.outer; ++a) {
        for (std::size_t b = 0; b < L.inner; ++b) {
            const std::size_t base = a * L.len * L.inner + b;
            float mx = xd[base];
            for (std::size_t l = 1; l < L.len; ++l) {
                mx = std::max(mx, xd[base + l * L.inner]);
            }
            double s = 0.0;
            for (std::size_t l = 0; l < L.len; ++l) {
                s += std::exp(static_cast<double>(xd[base + l * L.inner] - mx));
            }
            for (std::size_t l = 0; l < L.len; ++l) {
                o[base + l * L.inner] = static_cast<float>(std::exp(static_cast<double>(xd[base + l * L.inner] - mx)) / s);
            }
        }
    }
    return x.tape()->push(std::move(out), {x}, [x, L, self = x.tape()->size()](Tape & t, std::span<const float> g) {
        const auto & y = t.value_of(self).data();
        auto gx = t.grad_buffer(x);
        for (std::size_t a = 0; a < L.outer; ++a) {
            for (std::size_t b = 0; b < L.inner; ++b) {
                const std::size_t base = a * L.len * L.inner + b;
                double dot = 0.0;
                for (std::size_t l = 0; l < L.len; ++l) {
                    dot += static_cast<double>(g[base + l * L.inner]) * y[base + l * L.inner];
                }
                for (std::size_t l = 0; l < L.len; ++l) {
                    const std::size_t i = base + l * L.inner;
                    gx[i] += static_cast<float>(y[i] * (g[i] - dot));
                }
            }
        }
    });
}

Var rms_norm(Var x, std::size_t axis, float eps) {
    const auto L = axis_layout(x.shape(), axis, "rms_norm");
    Tensor out(x.shape());
    std::vector<float> inv_rms(L.outer * L.inner);
    auto xd = x.value().data();
    auto o = out.data();
    for (std::size_t a = 0; a < L.outer; ++a) {
        for (std::size_t b = 0; b < L.inner; ++b) {
            const std::size_t base = a * L.len * L.inner + b;
            double ss = 0.0;
            for (std::size_t l = 0; l < L.len; ++l) {
                const double v = xd[base + l * L.inner];
                ss += v * v;
            }
            const double r = 1.0 / std::sqrt(ss / static_cast<double>(L.len) + eps);
            inv_rms[a * L.inner + b] = static_cast<float>(r);
            for (std::size_t l = 0; l < L.len; ++l) {
                o[base + l * L.inner] = static_cast<float>(xd[base + l * L.inner] * r);
            }
        }
    }
    const std::size_t self = x.tape()->size();
    return x.tape()->push(std::move(out), {x},
                          [x, L, self, inv_rms = std::move(inv_rms)](Tape & t, std::span<const float> g) {
                              const auto & y = t.value_of(self).data();
                              auto gx = t.grad_buffer(x);
                              for (std::size_t a = 0; a < L.outer; ++a) {
                                  for (std::size_t b = 0; b < L.inner; ++b) {
                                      const std::size_t base = a * L.len * L.inner + b;
                                      double dot = 0.0;
                                      for (std::size_t l = 0; l < L.len; ++l) {
                                          dot += static_cast<double>(g[base + l * L.inner]) * y[base + l * L.inner];
                                      }
                                      dot /= static_cast<double>(L.len);
                                      const double r = inv_rms[a * L.inner + b];
                                      for (std::size_t l = 0; l < L.len; ++l) {
                                          const std::size_t i = base + l * L.inner;
                                          gx[i] += static_cast<float>(r * (g[i] - y[i] * dot));
                                      }
                                  }
                              }
                          });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
    const Tensor & tv = table.value();
    if (tv.rank() != 2) {
        throw ShapeError("embedding table must be rank 2, got " + shape_str(tv.shape()));
    }
    if (ids.empty()) {
        throw ShapeError("embedding lookup with zero ids");
    }
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw Error("embedding id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
        }
    }
    Tensor out({ids.size(), d});
    auto td = tv.data();
    auto o = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, o.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    return table.tape()->push(std::move(out), {table}, [table, d, idv = std::move(idv)](Tape & t, std::span<const float> g) {
        auto gt = t.grad_buffer(table);
        for (std::size_t i = 0; i < idv.size(); ++i) {
            float * row = gt.data() + static_cast<std::size_t>(idv[i]) * d;
            for (std::size_t c = 0; c < d; ++c) {
                row[c] += g[i * d + c];
            }
        }
    });
}

Var select_rows(Var x, std::span<const std::size_t> rows) {
    const Tensor & xv = x.value();
    if (xv.rank() != 2) {
        throw ShapeError("select_rows requires rank 2, got " + shape_str(xv.shape()));
    }
    if (rows.empty()) {
        throw ShapeError("select_rows with zero rows");
    }
    const std::size_t n = xv.dim(1);
    for (auto r : rows) {
        if (r >= xv.dim(0)) {
            throw ShapeError("select_rows index " + std::to_string(r) + " outside " + shape_str(xv.shape()));
        }
    }
    Tensor out({rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    return x.tape()->push(std::move(out), {x}, [x, n, rv = std::move(rv)](Tape & t, std::span<const float> g) {
        auto gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < rv.size(); ++i) {
            for (std::size_t c = 0; c < n; ++c) {
                gx[rv[i] * n + c] += g[i * n + c];
            }
        }
    });
}

Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return x.tape()->push(std::move(out), {x}, [x](Tape & t, std::span<const float> g) {
        auto gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i];
        }
    });
}

Var stop_gradient(Var x) {
    Tensor out = x.value();
    out.drop_grad();
    out.set_requires_grad(false);
    return x.tape()->constant(std::move(out));
}

Var gather_log_softmax(Var logits, std::span<const std::int32_t> targets) {
    const Tensor & lv = logits.value();
    if (lv.rank() != 2) {
        throw ShapeError("gather_log_softmax requires [rows x vocab], got " + shape_str(lv.shape()));
    }
    const std::size_t rows = lv.dim(0), vocab = lv.dim(1);
    check_targets(targets, rows, vocab, "gather_log_softmax");
    std::vector<float> lsm(lv.numel());
    log_softmax_rows(lv.data().data(), lsm.data(), rows, vocab);
    Tensor out({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        out[r] = lsm[r * vocab + static_cast<std::size_t>(targets[r])];
    }
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    return logits.tape()->push(std::move(out), {logits},
                               [logits, rows, vocab, lsm = std::move(lsm), tv = std::move(tv)](Tape & t, std::span<const float> g) {
                                   auto gl = t.grad_buffer(logits);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t c = 0; c < vocab; ++c) {
                                           const float p = std::exp(lsm[r * vocab + c]);
                                           const float onehot = static_cast<std::size_t>(tv[r]) == c ? 1.0f : 0.0f;
                                           gl[r * vocab + c] += g[r] * (onehot - p);
                                       }
                                   }
                               });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets) {
    const Tensor & lv = logits.value();
    if (lv.rank() != 2) {
        throw ShapeError("cross_entropy requires [rows x vocab], got " + shape_str(lv.shape()));
    }
    const std::size_t rows = lv.dim(0), vocab = lv.dim(1);
    check_targets(targets, rows, vocab, "cross_entropy");
    std::vector<float> lsm(lv.numel());
    log_softmax_rows(lv.data().data(), lsm.data(), rows, vocab);
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        s -= lsm[r * vocab + static_cast<std::size_t>(targets[r])];
    }
    Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(rows)));
    std::vector<std::int32_t> tv(targets.begin(), targets.end());
    return logits.tape()->push(std::move(out), {logits},
                               [logits, rows, vocab, lsm = std::move(lsm), tv = std::move(tv)](Tape & t, std::span<const float> g) {
                                   auto gl = t.grad_buffer(logits);
                                   const float w = g[0] / static_cast<float>(rows);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       for (std::size_t c = 0; c < vocab; ++c) {
                                           const float p = std::exp(lsm[r * vocab + c]);
                                           const float onehot = static_cast<std::size_t>(tv[r]) == c ? 1.0f : 0.0f;
                                           gl[r * vocab + c] += w * (p - onehot);
                                       }
                                   }
                               });
}

Var row_entropy(Var logits) {
    const Tensor & lv = logits.value();
    if (lv.rank() != 2) {
        throw ShapeError("row_entropy requires [rows x vocab], got " + shape_str(lv.shape()));
    }
    const std::size_t rows = lv.dim(0), vocab = lv.dim(1);
    std::vector<float> lsm(lv.numel());
    log_softmax_rows(lv.data().data(), lsm.data(), rows, vocab);
    Tensor out({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        double h = 0.0;
        for (std::size_t c = 0; c < vocab; ++c) {
            const double lp = lsm[r * vocab + c];
            h -= std::exp(lp) * lp;
        }
        out[r] = static_cast<float>(h);
    }
    return logits.tape()->push(std::move(out), {logits},
                               [logits, rows, vocab, lsm = std::move(lsm)](Tape & t, std::span<const float> g) {
                                   auto gl = t.grad_buffer(logits);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       double h = 0.0;
                                       for (std::size_t c = 0; c < vocab; ++c) {
                                           const double lp = lsm[r * vocab + c];
                                           h -= std::exp(lp) * lp;
                                       }
                                       // dH/dz_c = -p_c (log p_c + H)
                                       for (std::size_t c = 0; c < vocab; ++c) {
                                           const double lp = lsm[r * vocab + c];
                                           gl[r * vocab + c] += static_cast<float>(g[r] * -std::exp(lp) * (lp + h));
                                       }
                                   }
                               });
}

Var sum(Var x) {
    double s = 0.0;
    for (float v : x.value().data()) {
        s += v;
    }
    return x.tape()->push(Tensor::scalar(static_cast<float>(s)), {x}, [x](Tape & t, std::span<const float> g) {
        auto gx = t.grad_buffer(x);
        for (auto & v : gx) {
            v += g[0];
        }
    });
}

Var mean(Var x) {
    double s = 0.0;
    for (float v : x.value().data()) {
        s += v;
    }
    const std::size_t n = x.numel();
    return x.tape()->push(Tensor::scalar(static_cast<float>(s / static_cast<double>(n))), {x},
                          [x, n](Tape & t, std::span<const float> g) {
                              auto gx = t.grad_buffer(x);
                              const float w = g[0] / static_cast<float>(n);
                              for (auto & v : gx) {
                                  v += w;
                              }
                          });
}

Var row_sum(Var x) {
    const Tensor & xv = x.value();
    if (xv.rank() != 2) {
        throw ShapeError("row_sum requires rank 2, got " + shape_str(xv.shape()));
    }
    const std::size_t m = xv.dim(0), n = xv.dim(1);
    Tensor out({m});
    for (std::size_t r = 0; r < m; ++r) {
        float s = 0.0f;
        for (std::size_t c = 0; c < n; ++c) {
            s += xv[r * n + c];
        }
        out[r] = s;
    }
    return x.tape()->push(std::move(out), {x}, [x, m, n](Tape & t, std::span<const float> g) {
        auto gx = t.grad_buffer(x);
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                gx[r * n + c] += g[r];
            }
        }
    });
}

Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads) {
    require_same_tape(q, k);
    require_same_tape(q, v);
    const Tensor & qv = q.value();
    if (qv.rank() != 2 || k.shape() != qv.shape() || v.shape() != qv.shape() || qv.dim(0) != batch * seq ||
        heads == 0 || qv.dim(1) % heads != 0) {
        throw ShapeError("causal_attention shape mismatch: q" + shape_str(qv.shape()) + " k" +
                         shape_str(k.shape()) + " v" + shape_str(v.shape()) + " batch=" + std::to_string(batch) +
                         " seq=" + std::to_string(seq) + " heads=" + std::to_string(heads));
    }
    const std::size_t width = qv.dim(1);
    const std::size_t hd = width / heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    auto qd = qv.data();
    auto kd = k.value().data();
    auto vd = v.value().data();

    // probs[b][h][i][j] for j <= i, stored dense seq x seq
    std::vector<float> probs(batch * heads * seq * seq, 0.0f);
    Tensor out({batch * seq, width});
    auto o = out.data();
    std::vector<float> row(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            float * P = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const float * qi = qd.data() + (b * seq + i) * width + h * hd;
                float mx = -INFINITY;
                for (std::size_t j = 0; j <= i; ++j) {
                    const float * kj = kd.data() + (b * seq + j) * width + h * hd;
                    float s = 0.0f;
                    for (std::size_t c = 0; c < hd; ++c) {
                        s += qi[c] * kj[c];
                    }
                    row[j] = s * inv_sqrt;
                    mx = std::max(mx, row[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                const double inv_z = 1.0 / z;
                float * oi = o.data() + (b * seq + i) * width + h * hd;
                for (std::size_t j = 0; j <= i; ++j) {
                    const float p = static_cast<float>(row[j] * inv_z);
                    P[i * seq + j] = p;
                    const float * vj = vd.data() + (b * seq + j) * width + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) {
                        oi[c] += p * vj[c];
                    }
                }
            }
        }
    }
    return q.tape()->push(
        std::move(out), {q, k, v},
        [q, k, v, batch, seq, heads, width, hd, inv_sqrt, probs = std::move(probs)](Tape & t, std::span<const float> g) {
            auto qd = q.value().data();
            auto kd = k.value().data();
            auto vd = v.value().data();
            const bool gq_on = t.needs_grad(q), gk_on = t.needs_grad(k), gv_on = t.needs_grad(v);
            std::span<float> gq = gq_on ? t.grad_buffer(q) : std::span<float>{};
            std::span<float> gk = gk_on ? t.grad_buffer(k) : std::span<float>{};
            std::span<float> gv = gv_on ? t.grad_buffer(v) : std::span<float>{};
            std::vector<float> dp(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const float * P = probs.data() + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const float * gi = g.data() + (b * seq + i) * width + h * hd;
                        double dot = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const float * vj = vd.data() + (b * seq + j) * width + h * hd;
                            float s = 0.0f;
                            for (std::size_t c = 0; c < hd; ++c) {
                                s += gi[c] * vj[c];
                            }
                            dp[j] = s;
                            dot += static_cast<double>(s) * P[i * seq + j];
                            if (gv_on) {
                                float * gvj = gv.data() + (b * seq + j) * width + h * hd;
                                const float p = P[i * seq + j];
                                for (std::size_t c = 0; c < hd; ++c) {
                                    gvj[c] += p * gi[c];
                                }
                            }
                        }
                        const float * qi = qd.data() + (b * seq + i) * width + h * hd;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const float ds = P[i * seq + j] * (dp[j] - static_cast<float>(dot)) * inv_sqrt;
                            if (ds == 0.0f) {
                                continue;
                            }
                            const float * kj = kd.data() + (b * seq + j) * width + h * hd;
                            if (gq_on) {
                                float * gqi = gq.data() + (b * seq + i) * width + h * hd;
                                for (std::size_t c = 0; c < hd; ++c) {
                                    gqi[c] += ds * kj[c];
                                }
                            }
                            if (gk_on) {
                                float * gkj = gk.data() + (b * seq + j) * width + h * hd;
                                for (std::size_t c = 0; c < hd; ++c) {
                                    gkj[c] += ds * qi[c];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Var ppo_clipped_surrogate(Var logp_new, std::span<const float> logp_old, std::span<const float> advantages,
                          float eps) {
    const std::size_t n = logp_new.numel();
    if (logp_old.size() != n || advantages.size() != n || n == 0) {
        throw ShapeError("ppo_clipped_surrogate: " + std::to_string(n) + " log-probs, " +
                         std::to_string(logp_old.size()) + " old log-probs, " + std::to_string(advantages.size()) +
                         " advantages");
    }
    auto lp = logp_new.value().data();
    std::vector<float> dsur(n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = std::exp(static_cast<double>(lp[i]) - logp_old[i]);
        const double a = advantages[i];
        const double unclipped = r * a;
        const double clipped = std::clamp(r, 1.0 - eps, 1.0 + eps) * a;
        if (unclipped <= clipped) {
            s += unclipped;
            dsur[i] = static_cast<float>(unclipped);  // d(r*A)/dlogp = r*A
        } else {
            s += clipped;
            dsur[i] = 0.0f;
        }
    }
    return logp_new.tape()->push(Tensor::scalar(static_cast<float>(s / static_cast<double>(n))), {logp_new},
                                 [logp_new, n, dsur = std::move(dsur)](Tape & t, std::span<const float> g) {
                                     auto gl = t.grad_buffer(logp_new);
                                     const float w = g[0] / static_cast<float>(n);
                                     for (std::size_t i = 0; i < n; ++i) {
                                         gl[i] += w * dsur[i];
                                     }
                                 });
}

}  // namespace ad

double ppo_objective(double ratio, double advantage, double eps) {
    return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage);
}

}  // namespace rlrc
