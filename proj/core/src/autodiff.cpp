#include "thermosr/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

#include "gemm.hpp"
#include "thermosr/errors.hpp"

namespace thermosr::ad {

namespace {

constexpr double kPi = 3.14159265358979323846;

Var make(Tensor value, std::vector<Var> parents, const char* op) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    n->parents = std::move(parents);
    return n;
}

void require_ndim(const Var& v, int nd, const char* op) {
    if (v->value.ndim() != nd)
        throw validation_error(std::string(op) + ": expected " + std::to_string(nd) +
                               "-d tensor, got shape " + v->value.shape_str());
}

// Shared kernel for unary elementwise ops: y = f(x), dx += df(x, y) * dy.
Var unary(const Var& a, const char* op, double (*f)(double),
          double (*df)(double /*x*/, double /*y*/)) {
    Tensor out(a->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(a->value.data[i]);
    Var n = make(std::move(out), {a}, op);
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, df]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < p->grad.data.size(); ++i)
                p->grad.data[i] += df(p->value.data[i], self->value.data[i]) * self->grad.data[i];
        };
    }
    return n;
}

// im2col over zero-padded input: img [C,Hi,Wi] -> col [C*kh*kw, oh*ow] where
// column (oi,oj) holds the receptive field at (oi*stride - pad, oj*stride - pad).
void im2col(const double* img, int C, int Hi, int Wi, int kh, int kw, int stride, int pad,
            int oh, int ow, double* col) {
    const int cols = oh * ow;
    for (int c = 0; c < C; ++c) {
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                double* dst = col + (static_cast<std::size_t>(c) * kh * kw + u * kw + v) * cols;
                for (int oi = 0; oi < oh; ++oi) {
                    const int ii = oi * stride - pad + u;
                    for (int oj = 0; oj < ow; ++oj) {
                        const int jj = oj * stride - pad + v;
                        const bool in = ii >= 0 && ii < Hi && jj >= 0 && jj < Wi;
                        dst[oi * ow + oj] =
                            in ? img[(static_cast<std::size_t>(c) * Hi + ii) * Wi + jj] : 0.0;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds columns back into the image.
void col2im(const double* col, int C, int Hi, int Wi, int kh, int kw, int stride, int pad,
            int oh, int ow, double* img) {
    const int cols = oh * ow;
    for (int c = 0; c < C; ++c) {
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                const double* src = col + (static_cast<std::size_t>(c) * kh * kw + u * kw + v) * cols;
                for (int oi = 0; oi < oh; ++oi) {
                    const int ii = oi * stride - pad + u;
                    if (ii < 0 || ii >= Hi) continue;
                    for (int oj = 0; oj < ow; ++oj) {
                        const int jj = oj * stride - pad + v;
                        if (jj < 0 || jj >= Wi) continue;
                        img[(static_cast<std::size_t>(c) * Hi + ii) * Wi + jj] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

struct BilinearTap {
    int i0, i1;
    double w0, w1;
};

// Half-pixel source coordinates, clamped to the valid range.
std::vector<BilinearTap> bilinear_taps(int in_n, int out_n) {
    std::vector<BilinearTap> taps(static_cast<std::size_t>(out_n));
    for (int o = 0; o < out_n; ++o) {
        double src = (o + 0.5) * static_cast<double>(in_n) / out_n - 0.5;
        if (src < 0.0) src = 0.0;
        if (src > in_n - 1.0) src = in_n - 1.0;
        const int i0 = static_cast<int>(std::floor(src));
        const int i1 = std::min(i0 + 1, in_n - 1);
        const double f = src - i0;
        taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - f, f};
    }
    return taps;
}

}  // namespace

void Node::ensure_grad() {
    if (grad.data.empty() && value.numel() > 0) grad = Tensor::zeros(value.shape);
}

void Node::zero_grad() {
    for (double& g : grad.data) g = 0.0;
}

Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->op = "leaf";
    return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

void backward(const Var& root) {
    if (!root) throw validation_error("backward: null root");
    if (root->value.numel() != 1) throw validation_error("backward: root must be scalar");

    // Post-order DFS, parents before node, so the reverse walk is root-first.
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    if (root->requires_grad) {
        stack.push_back({root.get(), 0});
        seen.insert(root.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.n->parents.size()) {
                Node* p = f.n->parents[f.next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                topo.push_back(f.n);
                stack.pop_back();
            }
        }
    }

    root->ensure_grad();
    root->grad.data[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop();
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "ad::add");
    Tensor out(a->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a->value.data[i] + b->value.data[i];
    Var n = make(std::move(out), {a, b}, "add");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self]() {
            for (int k = 0; k < 2; ++k) {
                Node* p = self->parents[static_cast<std::size_t>(k)].get();
                if (!p->requires_grad) continue;
                p->ensure_grad();
                for (std::size_t i = 0; i < p->grad.data.size(); ++i)
                    p->grad.data[i] += self->grad.data[i];
            }
        };
    }
    return n;
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "ad::sub");
    Tensor out(a->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a->value.data[i] - b->value.data[i];
    Var n = make(std::move(out), {a, b}, "sub");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self]() {
            Node* pa = self->parents[0].get();
            Node* pb = self->parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < pa->grad.data.size(); ++i)
                    pa->grad.data[i] += self->grad.data[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < pb->grad.data.size(); ++i)
                    pb->grad.data[i] -= self->grad.data[i];
            }
        };
    }
    return n;
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "ad::mul");
    Tensor out(a->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a->value.data[i] * b->value.data[i];
    Var n = make(std::move(out), {a, b}, "mul");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self]() {
            Node* pa = self->parents[0].get();
            Node* pb = self->parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < pa->grad.data.size(); ++i)
                    pa->grad.data[i] += pb->value.data[i] * self->grad.data[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < pb->grad.data.size(); ++i)
                    pb->grad.data[i] += pa->value.data[i] * self->grad.data[i];
            }
        };
    }
    return n;
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
    Tensor out(a->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] * s;
    Var n = make(std::move(out), {a}, "scale");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, s]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < p->grad.data.size(); ++i)
                p->grad.data[i] += s * self->grad.data[i];
        };
    }
    return n;
}

Var add_scalar(const Var& a, double s) {
    Tensor out(a->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a->value.data[i] + s;
    Var n = make(std::move(out), {a}, "add_scalar");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < p->grad.data.size(); ++i)
                p->grad.data[i] += self->grad.data[i];
        };
    }
    return n;
}

Var scale_by(const Var& x, const Var& s) {
    if (s->value.numel() != 1) throw validation_error("ad::scale_by: scale must be [1]");
    const double sv = s->value.data[0];
    Tensor out(x->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x->value.data[i] * sv;
    Var n = make(std::move(out), {x, s}, "scale_by");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self]() {
            Node* px = self->parents[0].get();
            Node* ps = self->parents[1].get();
            if (px->requires_grad) {
                px->ensure_grad();
                const double sv2 = ps->value.data[0];
                for (std::size_t i = 0; i < px->grad.data.size(); ++i)
                    px->grad.data[i] += sv2 * self->grad.data[i];
            }
            if (ps->requires_grad) {
                ps->ensure_grad();
                double acc = 0.0;
                for (std::size_t i = 0; i < px->value.data.size(); ++i)
                    acc += px->value.data[i] * self->grad.data[i];
                ps->grad.data[0] += acc;
            }
        };
    }
    return n;
}

Var relu(const Var& a) {
    return unary(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
        // Subgradient 0 at the kink.
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) {
    return unary(
        a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); },
        [](double x, double) {
            const double phi_cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
            const double phi_pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
            return phi_cdf + x * phi_pdf;
        });
}

Var tanh_op(const Var& a) {
    return unary(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
    return unary(
        a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var sum_all(const Var& a) {
    Tensor out({1});
    double s = 0.0;
    for (double v : a->value.data) s += v;
    out.data[0] = s;
    Var n = make(std::move(out), {a}, "sum_all");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            const double g = self->grad.data[0];
            for (std::size_t i = 0; i < p->grad.data.size(); ++i) p->grad.data[i] += g;
        };
    }
    return n;
}

Var mean_all(const Var& a) {
    const std::int64_t cnt = a->value.numel();
    if (cnt == 0) throw validation_error("ad::mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(cnt));
}

Var matmul(const Var& a, const Var& b) {
    require_ndim(a, 2, "ad::matmul");
    require_ndim(b, 2, "ad::matmul");
    const int m = a->value.shape[0], k = a->value.shape[1];
    if (b->value.shape[0] != k)
        throw validation_error("ad::matmul: inner dims differ " + a->value.shape_str() + " x " +
                               b->value.shape_str());
    const int nn = b->value.shape[1];
    Tensor out({m, nn});
    detail::gemm(a->value.data.data(), b->value.data.data(), out.data.data(), m, k, nn);
    Var n = make(std::move(out), {a, b}, "matmul");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, m, k, nn]() {
            Node* pa = self->parents[0].get();
            Node* pb = self->parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                // dA = dY * B^T
                detail::gemm_nt(self->grad.data.data(), pb->value.data.data(),
                                pa->grad.data.data(), m, nn, k, /*accumulate=*/true);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                // dB = A^T * dY
                detail::gemm_tn(pa->value.data.data(), self->grad.data.data(),
                                pb->grad.data.data(), k, m, nn, /*accumulate=*/true);
            }
        };
    }
    return n;
}

Var matmul_nt(const Var& a, const Var& b) {
    require_ndim(a, 2, "ad::matmul_nt");
    require_ndim(b, 2, "ad::matmul_nt");
    const int m = a->value.shape[0], k = a->value.shape[1];
    if (b->value.shape[1] != k)
        throw validation_error("ad::matmul_nt: inner dims differ " + a->value.shape_str() +
                               " x " + b->value.shape_str() + "^T");
    const int nn = b->value.shape[0];
    Tensor out({m, nn});
    detail::gemm_nt(a->value.data.data(), b->value.data.data(), out.data.data(), m, k, nn);
    Var n = make(std::move(out), {a, b}, "matmul_nt");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, m, k, nn]() {
            Node* pa = self->parents[0].get();
            Node* pb = self->parents[1].get();
            if (pa->requires_grad) {
                pa->ensure_grad();
                // dA = dY * B
                detail::gemm(self->grad.data.data(), pb->value.data.data(), pa->grad.data.data(),
                             m, nn, k, /*accumulate=*/true);
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                // dB = dY^T * A
                detail::gemm_tn(self->grad.data.data(), pa->value.data.data(),
                                pb->grad.data.data(), nn, m, k, /*accumulate=*/true);
            }
        };
    }
    return n;
}

Var transpose2d(const Var& a) {
    require_ndim(a, 2, "ad::transpose2d");
    const int m = a->value.shape[0], nn = a->value.shape[1];
    Tensor out({nn, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < nn; ++j) out.at(j, i) = a->value.at(i, j);
    Var n = make(std::move(out), {a}, "transpose2d");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, m, nn]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < nn; ++j) p->grad.at(i, j) += self->grad.at(j, i);
        };
    }
    return n;
}

Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out;
    out.shape = std::move(shape);
    out.data = a->value.data;
    if (out.numel() != a->value.numel())
        throw validation_error("ad::reshape: element count mismatch");
    Var n = make(std::move(out), {a}, "reshape");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < p->grad.data.size(); ++i)
                p->grad.data[i] += self->grad.data[i];
        };
    }
    return n;
}

Var add_rowvec(const Var& x, const Var& v) {
    require_ndim(x, 2, "ad::add_rowvec");
    require_ndim(v, 1, "ad::add_rowvec");
    const int rows = x->value.shape[0], cols = x->value.shape[1];
    if (v->value.shape[0] != cols)
        throw validation_error("ad::add_rowvec: vector length does not match columns");
    Tensor out({rows, cols});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.at(i, j) = x->value.at(i, j) + v->value.data[j];
    Var n = make(std::move(out), {x, v}, "add_rowvec");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, rows, cols]() {
            Node* px = self->parents[0].get();
            Node* pv = self->parents[1].get();
            if (px->requires_grad) {
                px->ensure_grad();
                for (std::size_t i = 0; i < px->grad.data.size(); ++i)
                    px->grad.data[i] += self->grad.data[i];
            }
            if (pv->requires_grad) {
                pv->ensure_grad();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) pv->grad.data[j] += self->grad.at(i, j);
            }
        };
    }
    return n;
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw validation_error("ad::concat_rows: empty input");
    const int cols = parts[0]->value.ndim() == 2 ? parts[0]->value.shape[1] : -1;
    int rows = 0;
    for (const auto& p : parts) {
        if (p->value.ndim() != 2 || p->value.shape[1] != cols)
            throw validation_error("ad::concat_rows: all parts must be [*, d] with equal d");
        rows += p->value.shape[0];
    }
    Tensor out({rows, cols});
    int r = 0;
    for (const auto& p : parts) {
        std::memcpy(out.data.data() + static_cast<std::size_t>(r) * cols, p->value.data.data(),
                    p->value.data.size() * sizeof(double));
        r += p->value.shape[0];
    }
    Var n = make(std::move(out), parts, "concat_rows");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, cols]() {
            int r0 = 0;
            for (auto& pv : self->parents) {
                Node* p = pv.get();
                const int pr = p->value.shape[0];
                if (p->requires_grad) {
                    p->ensure_grad();
                    const double* src = self->grad.data.data() + static_cast<std::size_t>(r0) * cols;
                    for (std::size_t i = 0; i < p->grad.data.size(); ++i) p->grad.data[i] += src[i];
                }
                r0 += pr;
            }
        };
    }
    return n;
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw validation_error("ad::concat_cols: empty input");
    const int rows = parts[0]->value.ndim() == 2 ? parts[0]->value.shape[0] : -1;
    int cols = 0;
    for (const auto& p : parts) {
        if (p->value.ndim() != 2 || p->value.shape[0] != rows)
            throw validation_error("ad::concat_cols: all parts must be [n, *] with equal n");
        cols += p->value.shape[1];
    }
    Tensor out({rows, cols});
    int c = 0;
    for (const auto& p : parts) {
        const int pc = p->value.shape[1];
        for (int i = 0; i < rows; ++i)
            std::memcpy(out.data.data() + static_cast<std::size_t>(i) * cols + c,
                        p->value.data.data() + static_cast<std::size_t>(i) * pc,
                        static_cast<std::size_t>(pc) * sizeof(double));
        c += pc;
    }
    Var n = make(std::move(out), parts, "concat_cols");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, rows, cols]() {
            int c0 = 0;
            for (auto& pv : self->parents) {
                Node* p = pv.get();
                const int pc = p->value.shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < rows; ++i) {
                        const double* src =
                            self->grad.data.data() + static_cast<std::size_t>(i) * cols + c0;
                        double* dst = p->grad.data.data() + static_cast<std::size_t>(i) * pc;
                        for (int j = 0; j < pc; ++j) dst[j] += src[j];
                    }
                }
                c0 += pc;
            }
        };
    }
    return n;
}

Var slice_rows(const Var& x, int r0, int r1) {
    require_ndim(x, 2, "ad::slice_rows");
    const int rows = x->value.shape[0], cols = x->value.shape[1];
    if (r0 < 0 || r1 > rows || r0 >= r1) throw validation_error("ad::slice_rows: bad range");
    Tensor out({r1 - r0, cols});
    std::memcpy(out.data.data(), x->value.data.data() + static_cast<std::size_t>(r0) * cols,
                out.data.size() * sizeof(double));
    Var n = make(std::move(out), {x}, "slice_rows");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, r0, cols]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            double* dst = p->grad.data.data() + static_cast<std::size_t>(r0) * cols;
            for (std::size_t i = 0; i < self->grad.data.size(); ++i) dst[i] += self->grad.data[i];
        };
    }
    return n;
}

Var slice_cols(const Var& x, int c0, int c1) {
    require_ndim(x, 2, "ad::slice_cols");
    const int rows = x->value.shape[0], cols = x->value.shape[1];
    if (c0 < 0 || c1 > cols || c0 >= c1) throw validation_error("ad::slice_cols: bad range");
    const int w = c1 - c0;
    Tensor out({rows, w});
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < w; ++j) out.at(i, j) = x->value.at(i, c0 + j);
    Var n = make(std::move(out), {x}, "slice_cols");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, rows, c0, w]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < w; ++j) p->grad.at(i, c0 + j) += self->grad.at(i, j);
        };
    }
    return n;
}

Var softmax_rows(const Var& x, const Tensor* additive_mask) {
    require_ndim(x, 2, "ad::softmax_rows");
    const int rows = x->value.shape[0], cols = x->value.shape[1];
    if (additive_mask &&
        (additive_mask->ndim() != 2 || additive_mask->shape[0] != rows ||
         additive_mask->shape[1] != cols))
        throw validation_error("ad::softmax_rows: mask shape mismatch");
    Tensor out({rows, cols});
    for (int i = 0; i < rows; ++i) {
        double mx = -1e300;
        for (int j = 0; j < cols; ++j) {
            const double v = x->value.at(i, j) + (additive_mask ? additive_mask->at(i, j) : 0.0);
            out.at(i, j) = v;
            mx = std::max(mx, v);
        }
        double denom = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double e = std::exp(out.at(i, j) - mx);
            out.at(i, j) = e;
            denom += e;
        }
        for (int j = 0; j < cols; ++j) out.at(i, j) /= denom;
    }
    Var n = make(std::move(out), {x}, "softmax_rows");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, rows, cols]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                double inner = 0.0;
                for (int j = 0; j < cols; ++j) inner += self->grad.at(i, j) * self->value.at(i, j);
                for (int j = 0; j < cols; ++j)
                    p->grad.at(i, j) += self->value.at(i, j) * (self->grad.at(i, j) - inner);
            }
        };
    }
    return n;
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
    require_ndim(x, 2, "ad::layer_norm_rows");
    const int rows = x->value.shape[0], cols = x->value.shape[1];
    if (gain->value.ndim() != 1 || gain->value.shape[0] != cols || !gain->value.same_shape(bias->value))
        throw validation_error("ad::layer_norm_rows: gain/bias must be [cols]");
    Tensor out({rows, cols});
    Tensor xhat({rows, cols});
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        double mu = 0.0;
        for (int j = 0; j < cols; ++j) mu += x->value.at(i, j);
        mu /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = x->value.at(i, j) - mu;
            var += d * d;
        }
        var /= cols;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < cols; ++j) {
            const double xh = (x->value.at(i, j) - mu) * is;
            xhat.at(i, j) = xh;
            out.at(i, j) = xh * gain->value.data[j] + bias->value.data[j];
        }
    }
    Var n = make(std::move(out), {x, gain, bias}, "layer_norm");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
            Node* px = self->parents[0].get();
            Node* pg = self->parents[1].get();
            Node* pb = self->parents[2].get();
            if (pg->requires_grad) pg->ensure_grad();
            if (pb->requires_grad) pb->ensure_grad();
            if (px->requires_grad) px->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < cols; ++j) {
                    const double dy = self->grad.at(i, j);
                    const double xh = xhat.at(i, j);
                    if (pg->requires_grad) pg->grad.data[j] += dy * xh;
                    if (pb->requires_grad) pb->grad.data[j] += dy;
                    const double dxh = dy * pg->value.data[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xh;
                }
                if (!px->requires_grad) continue;
                mean_dxhat /= cols;
                mean_dxhat_xhat /= cols;
                const double is = inv_std[static_cast<std::size_t>(i)];
                for (int j = 0; j < cols; ++j) {
                    const double dxh = self->grad.at(i, j) * pg->value.data[j];
                    px->grad.at(i, j) +=
                        is * (dxh - mean_dxhat - xhat.at(i, j) * mean_dxhat_xhat);
                }
            }
        };
    }
    return n;
}

Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets) {
    require_ndim(logits, 2, "ad::cross_entropy_rows");
    const int rows = logits->value.shape[0], cols = logits->value.shape[1];
    if (static_cast<int>(targets.size()) != rows)
        throw validation_error("ad::cross_entropy_rows: target count does not match rows");
    Tensor probs({rows, cols});
    double loss = 0.0;
    for (int i = 0; i < rows; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= cols)
            throw validation_error("ad::cross_entropy_rows: target index out of range");
        double mx = logits->value.at(i, 0);
        for (int j = 1; j < cols; ++j) mx = std::max(mx, logits->value.at(i, j));
        double denom = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double e = std::exp(logits->value.at(i, j) - mx);
            probs.at(i, j) = e;
            denom += e;
        }
        for (int j = 0; j < cols; ++j) probs.at(i, j) /= denom;
        loss += -(logits->value.at(i, t) - mx - std::log(denom));
    }
    Tensor out({1});
    out.data[0] = loss / rows;
    Var n = make(std::move(out), {logits}, "cross_entropy");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, rows, cols, probs = std::move(probs), targets]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            const double g = self->grad.data[0] / rows;
            for (int i = 0; i < rows; ++i) {
                const int t = targets[static_cast<std::size_t>(i)];
                for (int j = 0; j < cols; ++j) {
                    const double onehot = j == t ? 1.0 : 0.0;
                    p->grad.at(i, j) += g * (probs.at(i, j) - onehot);
                }
            }
        };
    }
    return n;
}

Var embedding_rows(const Var& table, const std::vector<int>& indices) {
    require_ndim(table, 2, "ad::embedding_rows");
    const int K = table->value.shape[0], d = table->value.shape[1];
    const int rows = static_cast<int>(indices.size());
    Tensor out({rows, d});
    for (int i = 0; i < rows; ++i) {
        const int idx = indices[static_cast<std::size_t>(i)];
        if (idx < 0 || idx >= K) throw validation_error("ad::embedding_rows: index out of range");
        std::memcpy(out.data.data() + static_cast<std::size_t>(i) * d,
                    table->value.data.data() + static_cast<std::size_t>(idx) * d,
                    static_cast<std::size_t>(d) * sizeof(double));
    }
    Var n = make(std::move(out), {table}, "embedding");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, rows, d, indices]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (int i = 0; i < rows; ++i) {
                const int idx = indices[static_cast<std::size_t>(i)];
                for (int j = 0; j < d; ++j)
                    p->grad.at(idx, j) += self->grad.at(i, j);
            }
        };
    }
    return n;
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    require_ndim(x, 3, "ad::conv2d");
    require_ndim(w, 4, "ad::conv2d");
    const int C = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
    const int F = w->value.shape[0], kh = w->value.shape[2], kw = w->value.shape[3];
    if (w->value.shape[1] != C) throw validation_error("ad::conv2d: channel mismatch");
    if (stride < 1 || pad < 0) throw validation_error("ad::conv2d: bad stride/pad");
    const int oh = (H + 2 * pad - kh) / stride + 1;
    const int ow = (W + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw validation_error("ad::conv2d: kernel larger than padded input");
    const int ckk = C * kh * kw;

    Tensor col({ckk, oh * ow});
    im2col(x->value.data.data(), C, H, W, kh, kw, stride, pad, oh, ow, col.data.data());
    Tensor out({F, oh, ow});
    detail::gemm(w->value.data.data(), col.data.data(), out.data.data(), F, ckk, oh * ow);
    if (b) {
        if (b->value.ndim() != 1 || b->value.shape[0] != F)
            throw validation_error("ad::conv2d: bias must be [F]");
        for (int f = 0; f < F; ++f) {
            double* dst = out.data.data() + static_cast<std::size_t>(f) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) dst[i] += b->value.data[f];
        }
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    Var n = make(std::move(out), std::move(parents), "conv2d");
    if (n->requires_grad) {
        Node* self = n.get();
        const bool has_bias = static_cast<bool>(b);
        n->backprop = [self, C, H, W, F, kh, kw, stride, pad, oh, ow, ckk, has_bias,
                       col = std::move(col)]() {
            Node* px = self->parents[0].get();
            Node* pw = self->parents[1].get();
            if (pw->requires_grad) {
                pw->ensure_grad();
                // dW = dY_mat * col^T
                detail::gemm_nt(self->grad.data.data(), col.data.data(), pw->grad.data.data(), F,
                                oh * ow, ckk, /*accumulate=*/true);
            }
            if (px->requires_grad) {
                px->ensure_grad();
                Tensor dcol({ckk, oh * ow});
                // dcol = W_mat^T * dY_mat
                detail::gemm_tn(pw->value.data.data(), self->grad.data.data(), dcol.data.data(),
                                ckk, F, oh * ow);
                col2im(dcol.data.data(), C, H, W, kh, kw, stride, pad, oh, ow,
                       px->grad.data.data());
            }
            if (has_bias) {
                Node* pb = self->parents[2].get();
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    for (int f = 0; f < F; ++f) {
                        const double* src = self->grad.data.data() + static_cast<std::size_t>(f) * oh * ow;
                        double acc = 0.0;
                        for (int i = 0; i < oh * ow; ++i) acc += src[i];
                        pb->grad.data[f] += acc;
                    }
                }
            }
        };
    }
    return n;
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    require_ndim(x, 3, "ad::conv_transpose2d");
    require_ndim(w, 4, "ad::conv_transpose2d");
    const int C = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
    if (w->value.shape[0] != C) throw validation_error("ad::conv_transpose2d: channel mismatch");
    const int F = w->value.shape[1], kh = w->value.shape[2], kw = w->value.shape[3];
    if (stride < 1 || pad < 0) throw validation_error("ad::conv_transpose2d: bad stride/pad");
    const int oh = (H - 1) * stride - 2 * pad + kh;
    const int ow = (W - 1) * stride - 2 * pad + kw;
    if (oh < 1 || ow < 1) throw validation_error("ad::conv_transpose2d: empty output");
    const int fkk = F * kh * kw;

    // Forward is the adjoint of conv2d: cols = W_mat^T x, scatter via col2im.
    Tensor cols({fkk, H * W});
    detail::gemm_tn(w->value.data.data(), x->value.data.data(), cols.data.data(), fkk, C, H * W);
    Tensor out({F, oh, ow});
    col2im(cols.data.data(), F, oh, ow, kh, kw, stride, pad, H, W, out.data.data());
    if (b) {
        if (b->value.ndim() != 1 || b->value.shape[0] != F)
            throw validation_error("ad::conv_transpose2d: bias must be [F]");
        for (int f = 0; f < F; ++f) {
            double* dst = out.data.data() + static_cast<std::size_t>(f) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) dst[i] += b->value.data[f];
        }
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    Var n = make(std::move(out), std::move(parents), "conv_transpose2d");
    if (n->requires_grad) {
        Node* self = n.get();
        const bool has_bias = static_cast<bool>(b);
        n->backprop = [self, C, H, W, F, kh, kw, stride, pad, oh, ow, fkk, has_bias]() {
            Node* px = self->parents[0].get();
            Node* pw = self->parents[1].get();
            Tensor dcols({fkk, H * W});
            im2col(self->grad.data.data(), F, oh, ow, kh, kw, stride, pad, H, W,
                   dcols.data.data());
            if (px->requires_grad) {
                px->ensure_grad();
                // dX = W_mat * dcols
                detail::gemm(pw->value.data.data(), dcols.data.data(), px->grad.data.data(), C,
                             fkk, H * W, /*accumulate=*/true);
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                // dW = X_mat * dcols^T
                detail::gemm_nt(px->value.data.data(), dcols.data.data(), pw->grad.data.data(), C,
                                H * W, fkk, /*accumulate=*/true);
            }
            if (has_bias) {
                Node* pb = self->parents[2].get();
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    for (int f = 0; f < F; ++f) {
                        const double* src = self->grad.data.data() + static_cast<std::size_t>(f) * oh * ow;
                        double acc = 0.0;
                        for (int i = 0; i < oh * ow; ++i) acc += src[i];
                        pb->grad.data[f] += acc;
                    }
                }
            }
        };
    }
    return n;
}

Var depthwise_conv3x3(const Var& x, const Var& w, const Var& b) {
    require_ndim(x, 3, "ad::depthwise_conv3x3");
    const int C = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
    if (w->value.ndim() != 3 || w->value.shape[0] != C || w->value.shape[1] != 3 ||
        w->value.shape[2] != 3)
        throw validation_error("ad::depthwise_conv3x3: weights must be [C,3,3]");
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                double acc = b ? b->value.data[c] : 0.0;
                for (int u = -1; u <= 1; ++u) {
                    const int ii = i + u;
                    if (ii < 0 || ii >= H) continue;
                    for (int v = -1; v <= 1; ++v) {
                        const int jj = j + v;
                        if (jj < 0 || jj >= W) continue;
                        acc += w->value.at(c, u + 1, v + 1) * x->value.at(c, ii, jj);
                    }
                }
                out.at(c, i, j) = acc;
            }
        }
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    Var n = make(std::move(out), std::move(parents), "depthwise_conv3x3");
    if (n->requires_grad) {
        Node* self = n.get();
        const bool has_bias = static_cast<bool>(b);
        n->backprop = [self, C, H, W, has_bias]() {
            Node* px = self->parents[0].get();
            Node* pw = self->parents[1].get();
            Node* pb = has_bias ? self->parents[2].get() : nullptr;
            if (px->requires_grad) px->ensure_grad();
            if (pw->requires_grad) pw->ensure_grad();
            if (pb && pb->requires_grad) pb->ensure_grad();
            for (int c = 0; c < C; ++c) {
                for (int i = 0; i < H; ++i) {
                    for (int j = 0; j < W; ++j) {
                        const double g = self->grad.at(c, i, j);
                        if (pb && pb->requires_grad) pb->grad.data[c] += g;
                        for (int u = -1; u <= 1; ++u) {
                            const int ii = i + u;
                            if (ii < 0 || ii >= H) continue;
                            for (int v = -1; v <= 1; ++v) {
                                const int jj = j + v;
                                if (jj < 0 || jj >= W) continue;
                                if (pw->requires_grad)
                                    pw->grad.at(c, u + 1, v + 1) += g * px->value.at(c, ii, jj);
                                if (px->requires_grad)
                                    px->grad.at(c, ii, jj) += g * pw->value.at(c, u + 1, v + 1);
                            }
                        }
                    }
                }
            }
        };
    }
    return n;
}

Var global_avg_pool(const Var& x) {
    require_ndim(x, 3, "ad::global_avg_pool");
    const int C = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
    Tensor out({C});
    const double inv = 1.0 / (static_cast<double>(H) * W);
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        const double* src = x->value.data.data() + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < H * W; ++i) acc += src[i];
        out.data[c] = acc * inv;
    }
    Var n = make(std::move(out), {x}, "global_avg_pool");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, C, H, W, inv]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double g = self->grad.data[c] * inv;
                double* dst = p->grad.data.data() + static_cast<std::size_t>(c) * H * W;
                for (int i = 0; i < H * W; ++i) dst[i] += g;
            }
        };
    }
    return n;
}

Var broadcast_chw(const Var& v, int h, int w) {
    require_ndim(v, 1, "ad::broadcast_chw");
    const int C = v->value.shape[0];
    Tensor out({C, h, w});
    for (int c = 0; c < C; ++c) {
        double* dst = out.data.data() + static_cast<std::size_t>(c) * h * w;
        for (int i = 0; i < h * w; ++i) dst[i] = v->value.data[c];
    }
    Var n = make(std::move(out), {v}, "broadcast_chw");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, C, h, w]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (int c = 0; c < C; ++c) {
                const double* src = self->grad.data.data() + static_cast<std::size_t>(c) * h * w;
                double acc = 0.0;
                for (int i = 0; i < h * w; ++i) acc += src[i];
                p->grad.data[c] += acc;
            }
        };
    }
    return n;
}

Var bilinear_up(const Var& x, int out_h, int out_w) {
    require_ndim(x, 3, "ad::bilinear_up");
    const int C = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
    if (out_h < 1 || out_w < 1) throw validation_error("ad::bilinear_up: bad output size");
    auto ty = bilinear_taps(H, out_h);
    auto tx = bilinear_taps(W, out_w);
    Tensor out({C, out_h, out_w});
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < out_h; ++i) {
            const auto& a = ty[static_cast<std::size_t>(i)];
            for (int j = 0; j < out_w; ++j) {
                const auto& b2 = tx[static_cast<std::size_t>(j)];
                out.at(c, i, j) = a.w0 * (b2.w0 * x->value.at(c, a.i0, b2.i0) +
                                          b2.w1 * x->value.at(c, a.i0, b2.i1)) +
                                  a.w1 * (b2.w0 * x->value.at(c, a.i1, b2.i0) +
                                          b2.w1 * x->value.at(c, a.i1, b2.i1));
            }
        }
    }
    Var n = make(std::move(out), {x}, "bilinear_up");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, C, out_h, out_w, ty = std::move(ty), tx = std::move(tx)]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (int c = 0; c < C; ++c) {
                for (int i = 0; i < out_h; ++i) {
                    const auto& a = ty[static_cast<std::size_t>(i)];
                    for (int j = 0; j < out_w; ++j) {
                        const auto& b2 = tx[static_cast<std::size_t>(j)];
                        const double g = self->grad.at(c, i, j);
                        p->grad.at(c, a.i0, b2.i0) += g * a.w0 * b2.w0;
                        p->grad.at(c, a.i0, b2.i1) += g * a.w0 * b2.w1;
                        p->grad.at(c, a.i1, b2.i0) += g * a.w1 * b2.w0;
                        p->grad.at(c, a.i1, b2.i1) += g * a.w1 * b2.w1;
                    }
                }
            }
        };
    }
    return n;
}

Var nearest_up(const Var& x, int out_h, int out_w) {
    require_ndim(x, 3, "ad::nearest_up");
    const int C = x->value.shape[0], H = x->value.shape[1], W = x->value.shape[2];
    if (out_h < H || out_w < W || out_h % H != 0 || out_w % W != 0)
        throw validation_error("ad::nearest_up: output size must be an integer multiple of the input");
    const int fy = out_h / H, fx = out_w / W;
    Tensor out({C, out_h, out_w});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < out_h; ++i)
            for (int j = 0; j < out_w; ++j)
                out.at(c, i, j) = x->value.at(c, i / fy, j / fx);
    Var n = make(std::move(out), {x}, "nearest_up");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, C, out_h, out_w, fy, fx]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < out_h; ++i)
                    for (int j = 0; j < out_w; ++j)
                        p->grad.at(c, i / fy, j / fx) += self->grad.at(c, i, j);
        };
    }
    return n;
}

Var dropout(const Var& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw validation_error("ad::dropout: p must be in [0,1)");
    if (p == 0.0) return x;
    const double keep = 1.0 - p;
    Tensor mask(x->value.shape);
    for (double& m : mask.data) m = rng.uniform() < p ? 0.0 : 1.0 / keep;
    Tensor out(x->value.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = x->value.data[i] * mask.data[i];
    Var n = make(std::move(out), {x}, "dropout");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self, mask = std::move(mask)]() {
            Node* pp = self->parents[0].get();
            pp->ensure_grad();
            for (std::size_t i = 0; i < pp->grad.data.size(); ++i)
                pp->grad.data[i] += mask.data[i] * self->grad.data[i];
        };
    }
    return n;
}

Var stop_gradient(const Var& x) { return constant(x->value); }

Var straight_through(const Var& x, const Tensor& value) {
    check_same_shape(x->value, value, "ad::straight_through");
    Var n = make(value, {x}, "straight_through");
    if (n->requires_grad) {
        Node* self = n.get();
        n->backprop = [self]() {
            Node* p = self->parents[0].get();
            p->ensure_grad();
            for (std::size_t i = 0; i < p->grad.data.size(); ++i)
                p->grad.data[i] += self->grad.data[i];
        };
    }
    return n;
}

}  // namespace thermosr::ad
