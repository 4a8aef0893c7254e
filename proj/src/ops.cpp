#include "fedssl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fedssl/errors.hpp"

namespace fedssl::ops {

using detail::Node;

namespace {

Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data), false);
    bool track = false;
    if (grad_enabled()) {
        for (auto& in : inputs) track = track || in.requires_grad();
    }
    Node* n = out.node();
    n->op = op;
    if (track) {
        n->requires_grad = true;
        for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
        n->backward = std::move(backward);
    }
    return out;
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
    int r = static_cast<int>(rank);
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError(std::string(op) + ": axis out of range");
    return static_cast<std::size_t>(a);
}

// Flat input offsets for every output element under broadcasting.
struct Broadcast {
    Shape out;
    bool same = false;
    std::vector<std::size_t> ia, ib;
};

Broadcast broadcast(const char* op, const Tensor& a, const Tensor& b) {
    Broadcast bc;
    if (a.shape() == b.shape()) {
        bc.out = a.shape();
        bc.same = true;
        return bc;
    }
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    std::size_t r = std::max(sa.size(), sb.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(sa.begin(), sa.end(), pa.begin() + (r - sa.size()));
    std::copy(sb.begin(), sb.end(), pb.begin() + (r - sb.size()));
    bc.out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] == pb[i] || pb[i] == 1) {
            bc.out[i] = pa[i];
        } else if (pa[i] == 1) {
            bc.out[i] = pb[i];
        } else {
            shape_fail(op, a, b);
        }
    }
    std::vector<std::size_t> stra(r, 0), strb(r, 0);
    std::size_t s1 = 1, s2 = 1;
    for (std::size_t i = r; i-- > 0;) {
        stra[i] = pa[i] == 1 ? 0 : s1;
        strb[i] = pb[i] == 1 ? 0 : s2;
        s1 *= pa[i];
        s2 *= pb[i];
    }
    std::size_t n = shape_numel(bc.out);
    bc.ia.resize(n);
    bc.ib.resize(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t k = 0; k < n; ++k) {
        bc.ia[k] = oa;
        bc.ib[k] = ob;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < bc.out[d]) {
                oa += stra[d];
                ob += strb[d];
                break;
            }
            oa -= stra[d] * (idx[d] - 1);
            ob -= strb[d] * (idx[d] - 1);
            idx[d] = 0;
        }
    }
    return bc;
}

template <typename F, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA dfa, DB dfb) {
    require_defined(a, op);
    require_defined(b, op);
    auto bc = std::make_shared<Broadcast>(broadcast(op, a, b));
    std::size_t n = shape_numel(bc->out);
    std::vector<double> out(n);
    auto da = a.data();
    auto db = b.data();
    if (bc->same) {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(da[i], db[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out[i] = f(da[bc->ia[i]], db[bc->ib[i]]);
    }
    Shape shape = bc->out;
    return make_result(std::move(shape), std::move(out), op, {a, b}, [bc, dfa, dfb](Node& self) {
        Node* na = self.inputs[0].get();
        Node* nb = self.inputs[1].get();
        std::size_t m = self.data.size();
        if (na->requires_grad) {
            double* g = na->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                std::size_t ia = bc->same ? i : bc->ia[i];
                std::size_t ib = bc->same ? i : bc->ib[i];
                g[ia] += self.grad[i] * dfa(na->data[ia], nb->data[ib]);
            }
        }
        if (nb->requires_grad) {
            double* g = nb->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                std::size_t ia = bc->same ? i : bc->ia[i];
                std::size_t ib = bc->same ? i : bc->ib[i];
                g[ib] += self.grad[i] * dfb(na->data[ia], nb->data[ib]);
            }
        }
    });
}

// Elementwise map; `df(x, y)` is dy/dx given input x and output y.
template <typename F, typename D>
Tensor unary(const char* op, const Tensor& a, F f, D df) {
    require_defined(a, op);
    auto src = a.data();
    std::vector<double> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
    return make_result(a.shape(), std::move(out), op, {a}, [df](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            g[i] += self.grad[i] * df(in->data[i], self.data[i]);
        }
    });
}

// C(m,n) (+)= A(m,k) * B(k,n)
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* c = C + i * n;
        const double* a = A + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[p];
            const double* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C(m,k) += A(m,n) * B(k,n)^T
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t n,
             std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * n;
        double* c = C + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* b = B + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += a[j] * b[j];
            c[p] += s;
        }
    }
}

// C(k,n) += A(m,k)^T * B(m,n)
void gemm_tn(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
             std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        const double* b = B + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[p];
            double* c = C + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

struct AxisSplit {
    std::size_t outer, axis, inner;
};

AxisSplit split_at(const Shape& s, std::size_t ax) {
    AxisSplit r{1, s[ax], 1};
    for (std::size_t i = 0; i < ax; ++i) r.outer *= s[i];
    for (std::size_t i = ax + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double s) {
    return unary(
        "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) {
    return unary(
        "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& a) {
    return unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return unary(
        "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x, double) {
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Tensor exp(const Tensor& a) {
    return unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (!(v > 0.0)) throw ContractError("log: non-positive input");
    }
    return unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
    return unary(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() >= 2 && sb.size() == 2) {
        std::size_t k = sa.back();
        if (sb[0] != k) shape_fail("matmul", a, b);
        std::size_t n = sb[1];
        std::size_t m = a.numel() / k;
        std::vector<double> out(m * n, 0.0);
        gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
        Shape os = sa;
        os.back() = n;
        return make_result(std::move(os), std::move(out), "matmul", {a, b}, [m, k, n](Node& self) {
            Node* na = self.inputs[0].get();
            Node* nb = self.inputs[1].get();
            if (na->requires_grad) gemm_nt(self.grad.data(), nb->data.data(), na->grad_buffer(), m, n, k);
            if (nb->requires_grad) gemm_tn(na->data.data(), self.grad.data(), nb->grad_buffer(), m, k, n);
        });
    }
    if (sa.size() == 3 && sb.size() == 3) {
        if (sa[0] != sb[0] || sa[2] != sb[1]) shape_fail("matmul", a, b);
        std::size_t bs = sa[0], m = sa[1], k = sa[2], n = sb[2];
        std::vector<double> out(bs * m * n, 0.0);
        for (std::size_t t = 0; t < bs; ++t) {
            gemm_nn(a.data().data() + t * m * k, b.data().data() + t * k * n, out.data() + t * m * n, m,
                    k, n);
        }
        return make_result({bs, m, n}, std::move(out), "matmul", {a, b}, [bs, m, k, n](Node& self) {
            Node* na = self.inputs[0].get();
            Node* nb = self.inputs[1].get();
            for (std::size_t t = 0; t < bs; ++t) {
                const double* g = self.grad.data() + t * m * n;
                if (na->requires_grad) {
                    gemm_nt(g, nb->data.data() + t * k * n, na->grad_buffer() + t * m * k, m, n, k);
                }
                if (nb->requires_grad) {
                    gemm_tn(na->data.data() + t * m * k, g, nb->grad_buffer() + t * k * n, m, k, n);
                }
            }
        });
    }
    shape_fail("matmul", a, b);
}

Tensor transpose(const Tensor& a) {
    require_defined(a, "transpose");
    if (a.rank() < 2) throw ShapeError("transpose: need rank >= 2, got " + shape_str(a.shape()));
    Shape s = a.shape();
    std::size_t r = s[s.size() - 2], c = s.back();
    std::size_t batch = a.numel() / (r * c);
    std::vector<double> out(a.numel());
    auto src = a.data();
    for (std::size_t t = 0; t < batch; ++t) {
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = src[t * r * c + i * c + j];
        }
    }
    std::swap(s[s.size() - 2], s.back());
    return make_result(std::move(s), std::move(out), "transpose", {a}, [batch, r, c](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t t = 0; t < batch; ++t) {
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) g[t * r * c + i * c + j] += self.grad[t * r * c + j * r + i];
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined(a, "reshape");
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), "reshape", {a}, [](Node& self) {
        Node* in = self.inputs[0].get();
        if (in->requires_grad) in->accumulate(self.grad);
    });
}

Tensor softmax(const Tensor& a) {
    require_defined(a, "softmax");
    std::size_t d = a.shape().back();
    std::size_t rows = a.numel() / d;
    auto src = a.data();
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = src.data() + r * d;
        double* y = out.data() + r * d;
        double mx = *std::max_element(x, x + d);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < d; ++j) y[j] /= s;
    }
    return make_result(a.shape(), std::move(out), "softmax", {a}, [rows, d](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * d;
            const double* dy = self.grad.data() + r * d;
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += dy[j] * y[j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (dy[j] - s);
        }
    });
}

Tensor log_softmax(const Tensor& a) {
    require_defined(a, "log_softmax");
    std::size_t d = a.shape().back();
    std::size_t rows = a.numel() / d;
    auto src = a.data();
    std::vector<double> out(a.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = src.data() + r * d;
        double mx = *std::max_element(x, x + d);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += std::exp(x[j] - mx);
        double lse = mx + std::log(s);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[j] - lse;
    }
    return make_result(a.shape(), std::move(out), "log_softmax", {a}, [rows, d](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * d;
            const double* dy = self.grad.data() + r * d;
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) s += dy[j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += dy[j] - std::exp(y[j]) * s;
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_defined(x, "layer_norm");
    std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d}) shape_fail("layer_norm", x, gamma);
    if (beta.shape() != Shape{d}) shape_fail("layer_norm", x, beta);
    std::size_t rows = x.numel() / d;
    auto src = x.data();
    auto gm = gamma.data();
    auto bt = beta.data();
    std::vector<double> out(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = src.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xi[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(d);
        double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            double h = (xi[j] - mu) * rs;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gm[j] + bt[j];
        }
    }
    return make_result(x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
                       [rows, d, xhat, rstd](Node& self) {
                           Node* nx = self.inputs[0].get();
                           Node* ng = self.inputs[1].get();
                           Node* nb = self.inputs[2].get();
                           const double* gm = ng->data.data();
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* dy = self.grad.data() + r * d;
                               const double* h = xhat->data() + r * d;
                               if (ng->requires_grad) {
                                   double* g = ng->grad_buffer();
                                   for (std::size_t j = 0; j < d; ++j) g[j] += dy[j] * h[j];
                               }
                               if (nb->requires_grad) {
                                   double* g = nb->grad_buffer();
                                   for (std::size_t j = 0; j < d; ++j) g[j] += dy[j];
                               }
                               if (nx->requires_grad) {
                                   double m1 = 0.0, m2 = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       double dh = dy[j] * gm[j];
                                       m1 += dh;
                                       m2 += dh * h[j];
                                   }
                                   m1 /= static_cast<double>(d);
                                   m2 /= static_cast<double>(d);
                                   double* g = nx->grad_buffer() + r * d;
                                   double rs = (*rstd)[r];
                                   for (std::size_t j = 0; j < d; ++j) {
                                       g[j] += rs * (dy[j] * gm[j] - m1 - h[j] * m2);
                                   }
                               }
                           }
                       });
}

Tensor l2_normalize(const Tensor& x, double eps) {
    require_defined(x, "l2_normalize");
    std::size_t d = x.shape().back();
    std::size_t rows = x.numel() / d;
    auto src = x.data();
    std::vector<double> out(x.numel());
    auto norms = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += src[r * d + j] * src[r * d + j];
        double n = std::sqrt(s);
        (*norms)[r] = n;
        double denom = std::max(n, eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = src[r * d + j] / denom;
    }
    return make_result(x.shape(), std::move(out), "l2_normalize", {x}, [rows, d, eps, norms](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * d;
            const double* dy = self.grad.data() + r * d;
            double n = (*norms)[r];
            if (n < eps) {
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += dy[j] / eps;
                continue;
            }
            double yd = 0.0;
            for (std::size_t j = 0; j < d; ++j) yd += y[j] * dy[j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (dy[j] - y[j] * yd) / n;
        }
    });
}

Tensor sum(const Tensor& a) {
    require_defined(a, "sum");
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_result({1}, {s}, "sum", {a}, [](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t i = 0; i < in->data.size(); ++i) g[i] += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    require_defined(a, "mean");
    double s = 0.0;
    for (double v : a.data()) s += v;
    double n = static_cast<double>(a.numel());
    return make_result({1}, {s / n}, "mean", {a}, [n](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t i = 0; i < in->data.size(); ++i) g[i] += self.grad[0] / n;
    });
}

namespace {

Tensor reduce_axis(const char* op, const Tensor& a, int axis, bool keepdim, bool average) {
    require_defined(a, op);
    std::size_t ax = norm_axis(axis, a.rank(), op);
    AxisSplit sp = split_at(a.shape(), ax);
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    auto src = a.data();
    double f = average ? 1.0 / static_cast<double>(sp.axis) : 1.0;
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t k = 0; k < sp.axis; ++k) {
            const double* x = src.data() + (o * sp.axis + k) * sp.inner;
            double* y = out.data() + o * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) y[i] += x[i];
        }
    }
    if (average) {
        for (auto& v : out) v *= f;
    }
    Shape s = a.shape();
    if (keepdim) {
        s[ax] = 1;
    } else {
        s.erase(s.begin() + static_cast<std::ptrdiff_t>(ax));
        if (s.empty()) s = {1};
    }
    return make_result(std::move(s), std::move(out), op, {a}, [sp, f](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t k = 0; k < sp.axis; ++k) {
                double* gx = g + (o * sp.axis + k) * sp.inner;
                const double* gy = self.grad.data() + o * sp.inner;
                for (std::size_t i = 0; i < sp.inner; ++i) gx[i] += gy[i] * f;
            }
        }
    });
}

}  // namespace

Tensor sum(const Tensor& a, int axis, bool keepdim) { return reduce_axis("sum_axis", a, axis, keepdim, false); }

Tensor mean(const Tensor& a, int axis, bool keepdim) { return reduce_axis("mean_axis", a, axis, keepdim, true); }

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    for (auto& p : parts) require_defined(p, "concat");
    std::size_t ax = norm_axis(axis, parts[0].rank(), "concat");
    Shape s = parts[0].shape();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (auto& p : parts) {
        if (p.rank() != s.size()) shape_fail("concat", parts[0], p);
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != ax && p.shape()[i] != s[i]) shape_fail("concat", parts[0], p);
        }
        widths.push_back(p.shape()[ax]);
        total += p.shape()[ax];
    }
    AxisSplit sp = split_at(s, ax);
    s[ax] = total;
    std::vector<double> out(sp.outer * total * sp.inner);
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        auto src = parts[pi].data();
        std::size_t w = widths[pi] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(src.data() + o * w, w, out.data() + o * total * sp.inner + off);
        }
        off += w;
    }
    std::size_t inner = sp.inner, outer = sp.outer;
    return make_result(std::move(s), std::move(out), "concat", parts,
                       [widths, inner, outer, total](Node& self) {
                           std::size_t off = 0;
                           for (std::size_t pi = 0; pi < self.inputs.size(); ++pi) {
                               Node* in = self.inputs[pi].get();
                               std::size_t w = widths[pi] * inner;
                               if (in->requires_grad) {
                                   double* g = in->grad_buffer();
                                   for (std::size_t o = 0; o < outer; ++o) {
                                       const double* gy = self.grad.data() + o * total * inner + off;
                                       for (std::size_t i = 0; i < w; ++i) g[o * w + i] += gy[i];
                                   }
                               }
                               off += w;
                           }
                       });
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
    require_defined(a, "gather_rows");
    if (rows.empty()) throw ShapeError("gather_rows: empty index list");
    std::size_t n = a.dim(0);
    std::size_t w = a.numel() / n;
    std::vector<double> out(rows.size() * w);
    auto src = a.data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n) {
            throw IndexError("gather_rows: index " + std::to_string(rows[r]) + " out of range for " +
                             shape_str(a.shape()));
        }
        std::copy_n(src.data() + rows[r] * w, w, out.data() + r * w);
    }
    Shape s = a.shape();
    s[0] = rows.size();
    return make_result(std::move(s), std::move(out), "gather_rows", {a}, [rows, w](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t j = 0; j < w; ++j) g[rows[r] * w + j] += self.grad[r * w + j];
        }
    });
}

Tensor slice_last(const Tensor& a, std::size_t start, std::size_t len) {
    require_defined(a, "slice_last");
    std::size_t d = a.shape().back();
    if (len == 0 || start + len > d) {
        throw ShapeError("slice_last: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") outside " + shape_str(a.shape()));
    }
    std::size_t rows = a.numel() / d;
    std::vector<double> out(rows * len);
    auto src = a.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(src.data() + r * d + start, len, out.data() + r * len);
    Shape s = a.shape();
    s.back() = len;
    return make_result(std::move(s), std::move(out), "slice_last", {a}, [rows, d, start, len](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < len; ++j) g[r * d + start + j] += self.grad[r * len + j];
        }
    });
}

Tensor dot(const Tensor& a, const Tensor& b) {
    require_defined(a, "dot");
    require_defined(b, "dot");
    if (a.rank() != 1 || a.shape() != b.shape()) shape_fail("dot", a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
    return make_result({1}, {s}, "dot", {a, b}, [](Node& self) {
        Node* na = self.inputs[0].get();
        Node* nb = self.inputs[1].get();
        double g = self.grad[0];
        if (na->requires_grad) {
            double* ga = na->grad_buffer();
            for (std::size_t i = 0; i < na->data.size(); ++i) ga[i] += g * nb->data[i];
        }
        if (nb->requires_grad) {
            double* gb = nb->grad_buffer();
            for (std::size_t i = 0; i < nb->data.size(); ++i) gb[i] += g * na->data[i];
        }
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_defined(a, "mse");
    require_defined(b, "mse");
    if (a.shape() != b.shape()) shape_fail("mse", a, b);
    double s = 0.0;
    std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) {
        double e = a.data()[i] - b.data()[i];
        s += e * e;
    }
    double inv = 1.0 / static_cast<double>(n);
    return make_result({1}, {s * inv}, "mse", {a, b}, [inv](Node& self) {
        Node* na = self.inputs[0].get();
        Node* nb = self.inputs[1].get();
        double g = self.grad[0] * 2.0 * inv;
        std::size_t n = na->data.size();
        if (na->requires_grad) {
            double* ga = na->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g * (na->data[i] - nb->data[i]);
        }
        if (nb->requires_grad) {
            double* gb = nb->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (na->data[i] - nb->data[i]);
        }
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    require_defined(logits, "cross_entropy");
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    std::size_t bsz = logits.dim(0), c = logits.dim(1);
    auto src = logits.data();
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    double loss = 0.0;
    for (std::size_t r = 0; r < bsz; ++r) {
        if (labels[r] >= c) throw IndexError("cross_entropy: label out of range");
        const double* x = src.data() + r * c;
        double mx = *std::max_element(x, x + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(x[j] - mx);
        double lse = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = std::exp(x[j] - lse);
        loss -= x[labels[r]] - lse;
    }
    loss /= static_cast<double>(bsz);
    return make_result({1}, {loss}, "cross_entropy", {logits}, [probs, labels, bsz, c](Node& self) {
        Node* in = self.inputs[0].get();
        if (!in->requires_grad) return;
        double* g = in->grad_buffer();
        double f = self.grad[0] / static_cast<double>(bsz);
        for (std::size_t r = 0; r < bsz; ++r) {
            for (std::size_t j = 0; j < c; ++j) {
                double t = j == labels[r] ? 1.0 : 0.0;
                g[r * c + j] += f * ((*probs)[r * c + j] - t);
            }
        }
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
    require_defined(x, "conv2d");
    require_defined(w, "conv2d");
    require_defined(b, "conv2d");
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) shape_fail("conv2d", x, w);
    if (b.shape() != Shape{w.dim(0)}) shape_fail("conv2d", w, b);
    if (stride == 0) throw ContractError("conv2d: stride must be positive");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    if (H + 2 * pad < KH || W + 2 * pad < KW) shape_fail("conv2d", x, w);
    const std::size_t OH = (H + 2 * pad - KH) / stride + 1;
    const std::size_t OW = (W + 2 * pad - KW) / stride + 1;
    const std::size_t ckk = C * KH * KW;
    const std::size_t rows = B * OH * OW;

    // patch matrix: one row per output position, (c, kh, kw) columns
    auto cols = std::make_shared<std::vector<double>>(rows * ckk, 0.0);
    auto xs = x.data();
    for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow) {
                double* row = cols->data() + ((n * OH + oh) * OW + ow) * ckk;
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t i = 0; i < KH; ++i) {
                        std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) - static_cast<std::ptrdiff_t>(pad);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t j = 0; j < KW; ++j) {
                            std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) - static_cast<std::ptrdiff_t>(pad);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                            row[(c * KH + i) * KW + j] = xs[((n * C + c) * H + ih) * W + iw];
                        }
                    }
                }
            }
        }
    }
    std::vector<double> prod(rows * O, 0.0);
    gemm_nt(cols->data(), w.data().data(), prod.data(), rows, ckk, O);
    std::vector<double> out(B * O * OH * OW);
    auto bs = b.data();
    const std::size_t plane = OH * OW;
    for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t p = 0; p < plane; ++p) {
            for (std::size_t o = 0; o < O; ++o) out[(n * O + o) * plane + p] = prod[(n * plane + p) * O + o] + bs[o];
        }
    }
    return make_result({B, O, OH, OW}, std::move(out), "conv2d", {x, w, b},
                       [=](Node& self) {
                           Node* nx = self.inputs[0].get();
                           Node* nw = self.inputs[1].get();
                           Node* nb = self.inputs[2].get();
                           std::vector<double> dprod(rows * O);
                           for (std::size_t n = 0; n < B; ++n) {
                               for (std::size_t p = 0; p < plane; ++p) {
                                   for (std::size_t o = 0; o < O; ++o) {
                                       dprod[(n * plane + p) * O + o] = self.grad[(n * O + o) * plane + p];
                                   }
                               }
                           }
                           if (nb->requires_grad) {
                               double* g = nb->grad_buffer();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t o = 0; o < O; ++o) g[o] += dprod[r * O + o];
                               }
                           }
                           if (nw->requires_grad) {
                               // dW(O, ckk) += dprod^T(O, rows) * cols(rows, ckk)
                               gemm_tn(dprod.data(), cols->data(), nw->grad_buffer(), rows, O, ckk);
                           }
                           if (nx->requires_grad) {
                               std::vector<double> dcols(rows * ckk, 0.0);
                               gemm_nn(dprod.data(), nw->data.data(), dcols.data(), rows, O, ckk);
                               double* g = nx->grad_buffer();
                               for (std::size_t n = 0; n < B; ++n) {
                                   for (std::size_t oh = 0; oh < OH; ++oh) {
                                       for (std::size_t ow = 0; ow < OW; ++ow) {
                                           const double* row = dcols.data() + ((n * OH + oh) * OW + ow) * ckk;
                                           for (std::size_t c = 0; c < C; ++c) {
                                               for (std::size_t i = 0; i < KH; ++i) {
                                                   std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) - static_cast<std::ptrdiff_t>(pad);
                                                   if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                                   for (std::size_t j = 0; j < KW; ++j) {
                                                       std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) - static_cast<std::ptrdiff_t>(pad);
                                                       if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                                       g[((n * C + c) * H + ih) * W + iw] += row[(c * KH + i) * KW + j];
                                                   }
                                               }
                                           }
                                       }
                                   }
                               }
                           }
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_defined(x, "linear");
    require_defined(w, "linear");
    require_defined(b, "linear");
    if (w.rank() != 2 || x.shape().back() != w.dim(0)) shape_fail("linear", x, w);
    if (b.shape() != Shape{w.dim(1)}) shape_fail("linear", w, b);
    const std::size_t k = w.dim(0), n = w.dim(1);
    const std::size_t m = x.numel() / k;
    std::vector<double> out(m * n);
    auto bs = b.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bs.begin(), bs.end(), out.begin() + static_cast<std::ptrdiff_t>(i * n));
    gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
    Shape s = x.shape();
    s.back() = n;
    return make_result(std::move(s), std::move(out), "linear", {x, w, b}, [m, k, n](Node& self) {
        Node* nx = self.inputs[0].get();
        Node* nw = self.inputs[1].get();
        Node* nb = self.inputs[2].get();
        if (nx->requires_grad) gemm_nt(self.grad.data(), nw->data.data(), nx->grad_buffer(), m, n, k);
        if (nw->requires_grad) gemm_tn(nx->data.data(), self.grad.data(), nw->grad_buffer(), m, k, n);
        if (nb->requires_grad) {
            double* g = nb->grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
            }
        }
    });
}

}  // namespace fedssl::ops
