#include "dynshuffle/ops.hpp"

#include "dynshuffle/error.hpp"
#include "dynshuffle/tape.hpp"
#include "gemm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dynshuffle {

using detail::gemm;

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// Inputs are captured by value in backward rules; a mutable copy is needed to
// accumulate into them.
void accumulate(Tensor t, std::span<const float> delta) {
    if (t.requires_grad()) t.accumulate_grad(delta);
}

struct ConvGeometry {
    std::size_t n, c, h, w;
    std::size_t cout, cin_g, cout_g, groups;
    std::size_t kh, kw, sh, sw, ph, pw;
    std::size_t ho, wo;

    std::size_t patch() const { return cin_g * kh * kw; }
    std::size_t out_plane() const { return ho * wo; }
    bool pointwise() const { return kh == 1 && kw == 1 && sh == 1 && sw == 1 && ph == 0 && pw == 0; }
};

// cols[(ci·kh + i)·kw + j, oy·wo + ox] = x[ci, oy·sh - ph + i, ox·sw - pw + j]
void im2col(const float* x, const ConvGeometry& g, float* cols) {
    const std::size_t plane = g.out_plane();
    for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
        const float* xc = x + ci * g.h * g.w;
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                float* row = cols + ((ci * g.kh + i) * g.kw + j) * plane;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.sh + i) - static_cast<long>(g.ph);
                    float* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill(dst, dst + g.wo, 0.0f);
                        continue;
                    }
                    const float* src = xc + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.sw + j) - static_cast<long>(g.pw);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0f : src[ix];
                    }
                }
            }
        }
    }
}

void col2im(const float* cols, const ConvGeometry& g, float* dx) {
    const std::size_t plane = g.out_plane();
    for (std::size_t ci = 0; ci < g.cin_g; ++ci) {
        float* xc = dx + ci * g.h * g.w;
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                const float* row = cols + ((ci * g.kh + i) * g.kw + j) * plane;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.sh + i) - static_cast<long>(g.ph);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    float* dst = xc + static_cast<std::size_t>(iy) * g.w;
                    const float* src = row + oy * g.wo;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.sw + j) - static_cast<long>(g.pw);
                        if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

Tensor conv_impl(const Tensor& x, const Tensor& w, std::size_t groups, std::size_t sh, std::size_t sw,
                 std::size_t ph, std::size_t pw, const char* op) {
    require_rank(x, 4, op);
    require_rank(w, 4, op);
    ConvGeometry g{};
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.cout = w.dim(0);
    g.groups = groups;
    if (groups == 0 || g.c % groups != 0 || g.cout % groups != 0) {
        throw ConfigError(std::string(op) + ": channels " + std::to_string(g.c) + " -> " + std::to_string(g.cout) +
                          " not divisible by groups " + std::to_string(groups));
    }
    g.cin_g = g.c / groups;
    g.cout_g = g.cout / groups;
    if (w.dim(1) != g.cin_g) {
        throw DimensionError(std::string(op) + ": weight " + shape_str(w.shape()) + " does not match input " +
                             shape_str(x.shape()) + " with groups " + std::to_string(groups));
    }
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.sh = sh;
    g.sw = sw;
    g.ph = ph;
    g.pw = pw;
    g.ho = conv_output_extent(g.h, g.kh, sh, ph);
    g.wo = conv_output_extent(g.w, g.kw, sw, pw);

    const std::size_t plane = g.out_plane();
    const std::size_t in_sample = g.c * g.h * g.w;
    const std::size_t out_sample = g.cout * plane;
    std::vector<float> out(g.n * out_sample, 0.0f);
    std::vector<float> cols(g.pointwise() ? 0 : g.patch() * plane);
    const float* xv = x.values().data();
    const float* wv = w.values().data();
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const float* xg = xv + n * in_sample + gi * g.cin_g * g.h * g.w;
            const float* src = xg;
            if (!g.pointwise()) {
                im2col(xg, g, cols.data());
                src = cols.data();
            }
            gemm(false, false, g.cout_g, plane, g.patch(), wv + gi * g.cout_g * g.patch(), g.patch(), src, plane,
                 0.0f, out.data() + n * out_sample + gi * g.cout_g * plane, plane);
        }
    }

    return make_result({g.n, g.cout, g.ho, g.wo}, std::move(out), {x, w}, op, [x, w, g](const Tensor& y) {
        const std::size_t plane = g.out_plane();
        const std::size_t in_sample = g.c * g.h * g.w;
        const std::size_t out_sample = g.cout * plane;
        const float* gy = y.grad().data();
        const float* xv = x.values().data();
        const float* wv = w.values().data();
        std::vector<float> cols(g.pointwise() ? 0 : g.patch() * plane);
        std::vector<float> dcols(g.patch() * plane);
        std::vector<float> dw(w.requires_grad() ? w.numel() : 0, 0.0f);
        std::vector<float> dx(x.requires_grad() ? x.numel() : 0, 0.0f);
        for (std::size_t n = 0; n < g.n; ++n) {
            for (std::size_t gi = 0; gi < g.groups; ++gi) {
                const float* gyg = gy + n * out_sample + gi * g.cout_g * plane;
                const float* wg = wv + gi * g.cout_g * g.patch();
                if (w.requires_grad()) {
                    const float* xg = xv + n * in_sample + gi * g.cin_g * g.h * g.w;
                    const float* src = xg;
                    if (!g.pointwise()) {
                        im2col(xg, g, cols.data());
                        src = cols.data();
                    }
                    gemm(false, true, g.cout_g, g.patch(), plane, gyg, plane, src, plane, 1.0f,
                         dw.data() + gi * g.cout_g * g.patch(), g.patch());
                }
                if (x.requires_grad()) {
                    float* dxg = dx.data() + n * in_sample + gi * g.cin_g * g.h * g.w;
                    if (g.pointwise()) {
                        gemm(true, false, g.patch(), plane, g.cout_g, wg, g.patch(), gyg, plane, 1.0f, dxg, plane);
                    } else {
                        gemm(true, false, g.patch(), plane, g.cout_g, wg, g.patch(), gyg, plane, 0.0f, dcols.data(),
                             plane);
                        col2im(dcols.data(), g, dxg);
                    }
                }
            }
        }
        accumulate(w, dw);
        accumulate(x, dx);
    });
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    std::vector<float> out(m * n);
    gemm(false, false, m, n, k, a.values().data(), k, b.values().data(), n, 0.0f, out.data(), n);
    return make_result({m, n}, std::move(out), {a, b}, "matmul", [a, b, m, k, n](const Tensor& y) {
        const float* g = y.grad().data();
        if (a.requires_grad()) {
            std::vector<float> da(m * k);
            gemm(false, true, m, k, n, g, n, b.values().data(), n, 0.0f, da.data(), k);
            accumulate(a, da);
        }
        if (b.requires_grad()) {
            std::vector<float> db(k * n);
            gemm(true, false, k, n, m, a.values().data(), k, g, n, 0.0f, db.data(), n);
            accumulate(b, db);
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) {
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    std::vector<float> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        gemm(false, false, m, n, k, a.values().data() + i * m * k, k, b.values().data() + i * k * n, n, 0.0f,
             out.data() + i * m * n, n);
    }
    return make_result({batch, m, n}, std::move(out), {a, b}, "bmm", [a, b, batch, m, k, n](const Tensor& y) {
        const float* g = y.grad().data();
        if (a.requires_grad()) {
            std::vector<float> da(batch * m * k);
            for (std::size_t i = 0; i < batch; ++i) {
                gemm(false, true, m, k, n, g + i * m * n, n, b.values().data() + i * k * n, n, 0.0f,
                     da.data() + i * m * k, k);
            }
            accumulate(a, da);
        }
        if (b.requires_grad()) {
            std::vector<float> db(batch * k * n);
            for (std::size_t i = 0; i < batch; ++i) {
                gemm(true, false, k, n, m, a.values().data() + i * m * k, k, g + i * m * n, n, 0.0f,
                     db.data() + i * k * n, n);
            }
            accumulate(b, db);
        }
    });
}

Tensor kron(const Tensor& a, const Tensor& b) {
    const bool batched = a.rank() == 3;
    if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0)))) {
        throw DimensionError("kron: expected two matrices or two equally batched stacks, got " +
                             shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t batch = batched ? a.dim(0) : 1;
    const std::size_t off = batched ? 1 : 0;
    const std::size_t m = a.dim(off), n = a.dim(off + 1), p = b.dim(off), q = b.dim(off + 1);
    const std::size_t rows = m * p, cols = n * q;
    std::vector<float> out(batch * rows * cols);
    const float* av = a.values().data();
    const float* bv = b.values().data();
    for (std::size_t z = 0; z < batch; ++z) {
        const float* az = av + z * m * n;
        const float* bz = bv + z * p * q;
        float* oz = out.data() + z * rows * cols;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t s = 0; s < p; ++s)
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t t = 0; t < q; ++t) oz[(i * p + s) * cols + j * q + t] = az[i * n + j] * bz[s * q + t];
    }
    Shape shape = batched ? Shape{batch, rows, cols} : Shape{rows, cols};
    return make_result(std::move(shape), std::move(out), {a, b}, "kron",
                       [a, b, batch, m, n, p, q](const Tensor& y) {
                           const std::size_t rows = m * p, cols = n * q;
                           const float* g = y.grad().data();
                           const float* av = a.values().data();
                           const float* bv = b.values().data();
                           std::vector<float> da(a.requires_grad() ? a.numel() : 0, 0.0f);
                           std::vector<float> db(b.requires_grad() ? b.numel() : 0, 0.0f);
                           for (std::size_t z = 0; z < batch; ++z) {
                               const float* gz = g + z * rows * cols;
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j)
                                       for (std::size_t s = 0; s < p; ++s)
                                           for (std::size_t t = 0; t < q; ++t) {
                                               const float go = gz[(i * p + s) * cols + j * q + t];
                                               if (!da.empty()) da[z * m * n + i * n + j] += go * bv[z * p * q + s * q + t];
                                               if (!db.empty()) db[z * p * q + s * q + t] += go * av[z * m * n + i * n + j];
                                           }
                           }
                           accumulate(a, da);
                           accumulate(b, db);
                       });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank(x, 2, "affine");
    require_rank(w, 2, "affine");
    require_rank(b, 1, "affine");
    const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
    if (w.dim(0) != in || b.dim(0) != out_dim) {
        throw DimensionError("affine: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                             ", bias " + shape_str(b.shape()) + " are incompatible");
    }
    std::vector<float> out(batch * out_dim);
    for (std::size_t i = 0; i < batch; ++i) std::copy(b.values().begin(), b.values().end(), out.begin() + i * out_dim);
    gemm(false, false, batch, out_dim, in, x.values().data(), in, w.values().data(), out_dim, 1.0f, out.data(),
         out_dim);
    return make_result({batch, out_dim}, std::move(out), {x, w, b}, "affine",
                       [x, w, b, batch, in, out_dim](const Tensor& y) {
                           const float* g = y.grad().data();
                           if (x.requires_grad()) {
                               std::vector<float> dx(batch * in);
                               gemm(false, true, batch, in, out_dim, g, out_dim, w.values().data(), out_dim, 0.0f,
                                    dx.data(), in);
                               accumulate(x, dx);
                           }
                           if (w.requires_grad()) {
                               std::vector<float> dw(in * out_dim);
                               gemm(true, false, in, out_dim, batch, x.values().data(), in, g, out_dim, 0.0f,
                                    dw.data(), out_dim);
                               accumulate(w, dw);
                           }
                           if (b.requires_grad()) {
                               std::vector<float> db(out_dim, 0.0f);
                               for (std::size_t i = 0; i < batch; ++i)
                                   for (std::size_t j = 0; j < out_dim; ++j) db[j] += g[i * out_dim + j];
                               accumulate(b, db);
                           }
                       });
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<float> out(a.numel());
    std::transform(a.values().begin(), a.values().end(), b.values().begin(), out.begin(), std::plus<>());
    return make_result(a.shape(), std::move(out), {a, b}, "add", [a, b](const Tensor& y) {
        accumulate(a, y.grad());
        accumulate(b, y.grad());
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<float> out(a.numel());
    std::transform(a.values().begin(), a.values().end(), b.values().begin(), out.begin(), std::multiplies<>());
    return make_result(a.shape(), std::move(out), {a, b}, "mul", [a, b](const Tensor& y) {
        const auto g = y.grad();
        std::vector<float> d(g.size());
        if (a.requires_grad()) {
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * b.values()[i];
            accumulate(a, d);
        }
        if (b.requires_grad()) {
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * a.values()[i];
            accumulate(b, d);
        }
    });
}

Tensor scale(const Tensor& a, float factor) {
    std::vector<float> out(a.numel());
    std::transform(a.values().begin(), a.values().end(), out.begin(), [factor](float v) { return v * factor; });
    return make_result(a.shape(), std::move(out), {a}, "scale", [a, factor](const Tensor& y) {
        const auto g = y.grad();
        std::vector<float> d(g.size());
        std::transform(g.begin(), g.end(), d.begin(), [factor](float v) { return v * factor; });
        accumulate(a, d);
    });
}

Tensor relu(const Tensor& x) {
    std::vector<float> out(x.numel());
    std::transform(x.values().begin(), x.values().end(), out.begin(), [](float v) { return v > 0.0f ? v : 0.0f; });
    return make_result(x.shape(), std::move(out), {x}, "relu", [x](const Tensor& y) {
        const auto g = y.grad();
        const auto xv = x.values();
        std::vector<float> d(g.size());
        // The derivative at exactly zero is taken as 0.
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = xv[i] > 0.0f ? g[i] : 0.0f;
        accumulate(x, d);
    });
}

Tensor sum(const Tensor& x) {
    const double total = std::accumulate(x.values().begin(), x.values().end(), 0.0);
    return make_result({1}, {static_cast<float>(total)}, {x}, "sum", [x](const Tensor& y) {
        accumulate(x, std::vector<float>(x.numel(), y.grad()[0]));
    });
}

Tensor mean(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    const double total = std::accumulate(x.values().begin(), x.values().end(), 0.0);
    return make_result({1}, {static_cast<float>(total / n)}, {x}, "mean", [x](const Tensor& y) {
        accumulate(x, std::vector<float>(x.numel(), static_cast<float>(y.grad()[0] / static_cast<double>(x.numel()))));
    });
}

// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return make_result(std::move(shape), std::vector<float>(x.values().begin(), x.values().end()), {x}, "reshape",
                       [x](const Tensor& y) { accumulate(x, y.grad()); });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
        !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2)) {
        throw DimensionError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::size_t inner = a.numel() / (n * ca);
    Shape shape = a.shape();
    shape[1] = ca + cb;
    std::vector<float> out(a.numel() + b.numel());
    for (std::size_t i = 0; i < n; ++i) {
        auto dst = out.begin() + i * (ca + cb) * inner;
        std::copy_n(a.values().begin() + i * ca * inner, ca * inner, dst);
        std::copy_n(b.values().begin() + i * cb * inner, cb * inner, dst + ca * inner);
    }
    return make_result(std::move(shape), std::move(out), {a, b}, "concat_channels",
                       [a, b, n, ca, cb, inner](const Tensor& y) {
                           const auto g = y.grad();
                           if (a.requires_grad()) {
                               std::vector<float> d(a.numel());
                               for (std::size_t i = 0; i < n; ++i)
                                   std::copy_n(g.begin() + i * (ca + cb) * inner, ca * inner, d.begin() + i * ca * inner);
                               accumulate(a, d);
                           }
                           if (b.requires_grad()) {
                               std::vector<float> d(b.numel());
                               for (std::size_t i = 0; i < n; ++i)
                                   std::copy_n(g.begin() + (i * (ca + cb) + ca) * inner, cb * inner,
                                               d.begin() + i * cb * inner);
                               accumulate(b, d);
                           }
                       });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
    if (x.rank() < 2 || count == 0 || begin + count > x.dim(1)) {
        throw DimensionError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t inner = x.numel() / (n * c);
    Shape shape = x.shape();
    shape[1] = count;
    std::vector<float> out(n * count * inner);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(x.values().begin() + (i * c + begin) * inner, count * inner, out.begin() + i * count * inner);
    return make_result(std::move(shape), std::move(out), {x}, "slice_channels",
                       [x, n, c, begin, count, inner](const Tensor& y) {
                           const auto g = y.grad();
                           std::vector<float> d(x.numel(), 0.0f);
                           for (std::size_t i = 0; i < n; ++i)
                               std::copy_n(g.begin() + i * count * inner, count * inner,
                                           d.begin() + (i * c + begin) * inner);
                           accumulate(x, d);
                       });
}

Tensor broadcast_batch(const Tensor& x, std::size_t n) {
    if (n == 0) throw DimensionError("broadcast_batch: batch extent must be >= 1");
    Shape shape{n};
    shape.insert(shape.end(), x.shape().begin(), x.shape().end());
    std::vector<float> out(n * x.numel());
    for (std::size_t i = 0; i < n; ++i) std::copy(x.values().begin(), x.values().end(), out.begin() + i * x.numel());
    return make_result(std::move(shape), std::move(out), {x}, "broadcast_batch", [x, n](const Tensor& y) {
        const auto g = y.grad();
        std::vector<float> d(x.numel(), 0.0f);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d.size(); ++j) d[j] += g[i * d.size() + j];
        accumulate(x, d);
    });
}

Tensor block_diag_repeat(const Tensor& m, std::size_t groups) {
    require_rank(m, 3, "block_diag_repeat");
    if (groups == 0) throw ConfigError("block_diag_repeat: groups must be >= 1");
    const std::size_t batch = m.dim(0), r = m.dim(1), c = m.dim(2);
    const std::size_t rows = groups * r, cols = groups * c;
    std::vector<float> out(batch * rows * cols, 0.0f);
    for (std::size_t z = 0; z < batch; ++z)
        for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t i = 0; i < r; ++i)
                std::copy_n(m.values().begin() + (z * r + i) * c, c,
                            out.begin() + z * rows * cols + (gi * r + i) * cols + gi * c);
    return make_result({batch, rows, cols}, std::move(out), {m}, "block_diag_repeat",
                       [m, batch, groups, r, c](const Tensor& y) {
                           const std::size_t rows = groups * r, cols = groups * c;
                           const auto g = y.grad();
                           std::vector<float> d(m.numel(), 0.0f);
                           for (std::size_t z = 0; z < batch; ++z)
                               for (std::size_t gi = 0; gi < groups; ++gi)
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < c; ++j)
                                           d[(z * r + i) * c + j] += g[z * rows * cols + (gi * r + i) * cols + gi * c + j];
                           accumulate(m, d);
                       });
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
    if (m.rank() < 2) throw DimensionError("gather_rows: expected rank >= 2, got " + shape_str(m.shape()));
    const std::size_t r = m.dim(m.rank() - 2), c = m.dim(m.rank() - 1);
    const std::size_t batch = m.numel() / (r * c);
    for (auto src : rows) {
        if (src >= r) throw DimensionError("gather_rows: row index " + std::to_string(src) + " out of range");
    }
    if (rows.empty()) throw DimensionError("gather_rows: empty row map");
    Shape shape = m.shape();
    shape[shape.size() - 2] = rows.size();
    const std::size_t ro = rows.size();
    std::vector<std::size_t> map(rows.begin(), rows.end());
    std::vector<float> out(batch * ro * c);
    for (std::size_t z = 0; z < batch; ++z)
        for (std::size_t i = 0; i < ro; ++i)
            std::copy_n(m.values().begin() + (z * r + map[i]) * c, c, out.begin() + (z * ro + i) * c);
    return make_result(std::move(shape), std::move(out), {m}, "gather_rows", [m, map, batch, r, c](const Tensor& y) {
        const auto g = y.grad();
        const std::size_t ro = map.size();
        std::vector<float> d(m.numel(), 0.0f);
        for (std::size_t z = 0; z < batch; ++z)
            for (std::size_t i = 0; i < ro; ++i)
                for (std::size_t j = 0; j < c; ++j) d[(z * r + map[i]) * c + j] += g[(z * ro + i) * c + j];
        accumulate(m, d);
    });
}

Tensor crop2d(const Tensor& m, std::size_t rows, std::size_t cols) {
    if (m.rank() < 2) throw DimensionError("crop2d: expected rank >= 2, got " + shape_str(m.shape()));
    const std::size_t r = m.dim(m.rank() - 2), c = m.dim(m.rank() - 1);
    if (rows == 0 || cols == 0 || rows > r || cols > c) {
        throw DimensionError("crop2d: cannot take " + std::to_string(rows) + "x" + std::to_string(cols) + " from " +
                             shape_str(m.shape()));
    }
    const std::size_t batch = m.numel() / (r * c);
    Shape shape = m.shape();
    shape[shape.size() - 2] = rows;
    shape[shape.size() - 1] = cols;
    std::vector<float> out(batch * rows * cols);
    for (std::size_t z = 0; z < batch; ++z)
        for (std::size_t i = 0; i < rows; ++i)
            std::copy_n(m.values().begin() + (z * r + i) * c, cols, out.begin() + (z * rows + i) * cols);
    return make_result(std::move(shape), std::move(out), {m}, "crop2d", [m, batch, r, c, rows, cols](const Tensor& y) {
        const auto g = y.grad();
        std::vector<float> d(m.numel(), 0.0f);
        for (std::size_t z = 0; z < batch; ++z)
            for (std::size_t i = 0; i < rows; ++i)
                std::copy_n(g.begin() + (z * rows + i) * cols, cols, d.begin() + (z * r + i) * c);
        accumulate(m, d);
    });
}

// ---------------------------------------------------------------------------

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
    if (stride == 0) throw ConfigError("convolution stride must be >= 1");
    if (kernel == 0 || kernel > in + 2 * pad) {
        throw ConfigError("kernel of length " + std::to_string(kernel) + " does not fit input of length " +
                          std::to_string(in) + " with padding " + std::to_string(pad));
    }
    return (in + 2 * pad - kernel) / stride + 1;
}

Tensor conv2d_grouped(const Tensor& x, const Tensor& w, std::size_t groups, std::size_t stride, std::size_t pad) {
    return conv_impl(x, w, groups, stride, stride, pad, pad, "conv2d_grouped");
}

Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    require_rank(x, 3, "conv1d");
    require_rank(w, 3, "conv1d");
    if (w.dim(1) != x.dim(1)) {
        throw DimensionError("conv1d: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
    }
    conv_output_extent(x.dim(2), w.dim(2), stride, pad);
    const Tensor x4 = reshape(x, {x.dim(0), x.dim(1), 1, x.dim(2)});
    const Tensor w4 = reshape(w, {w.dim(0), w.dim(1), 1, w.dim(2)});
    const Tensor y = conv_impl(x4, w4, 1, 1, stride, 0, pad, "conv1d");
    return reshape(y, {y.dim(0), y.dim(1), y.dim(3)});
}

Tensor global_avg_pool(const Tensor& x) {
    require_rank(x, 4, "global_avg_pool");
    const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    std::vector<float> out(n * c);
    for (std::size_t i = 0; i < n * c; ++i) {
        const auto begin = x.values().begin() + i * plane;
        out[i] = static_cast<float>(std::accumulate(begin, begin + plane, 0.0) / static_cast<double>(plane));
    }
    return make_result({n, c}, std::move(out), {x}, "global_avg_pool", [x, n, c, plane](const Tensor& y) {
        const auto g = y.grad();
        std::vector<float> d(x.numel());
        const float inv = 1.0f / static_cast<float>(plane);
        for (std::size_t i = 0; i < n * c; ++i) std::fill_n(d.begin() + i * plane, plane, g[i] * inv);
        accumulate(x, d);
    });
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t pad) {
    require_rank(x, 4, "avg_pool2d");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = conv_output_extent(h, kernel, stride, pad);
    const std::size_t wo = conv_output_extent(w, kernel, stride, pad);
    const float inv = 1.0f / static_cast<float>(kernel * kernel);
    std::vector<float> out(n * c * ho * wo, 0.0f);
    const auto xv = x.values();
    auto for_window = [=](std::size_t oy, std::size_t ox, auto&& fn) {
        for (std::size_t i = 0; i < kernel; ++i) {
            const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t j = 0; j < kernel; ++j) {
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                fn(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix));
            }
        }
    };
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                float acc = 0.0f;
                for_window(oy, ox, [&](std::size_t idx) { acc += xv[p * h * w + idx]; });
                out[(p * ho + oy) * wo + ox] = acc * inv;
            }
    return make_result({n, c, ho, wo}, std::move(out), {x}, "avg_pool2d",
                       [x, n, c, h, w, ho, wo, inv, for_window](const Tensor& y) {
                           const auto g = y.grad();
                           std::vector<float> d(x.numel(), 0.0f);
                           for (std::size_t p = 0; p < n * c; ++p)
                               for (std::size_t oy = 0; oy < ho; ++oy)
                                   for (std::size_t ox = 0; ox < wo; ++ox) {
                                       const float go = g[(p * ho + oy) * wo + ox] * inv;
                                       for_window(oy, ox, [&](std::size_t idx) { d[p * h * w + idx] += go; });
                                   }
                           accumulate(x, d);
                       });
}

// ---------------------------------------------------------------------------

BatchNormState::BatchNormState(std::size_t channels)
    : scale(channels ? Tensor::full({channels}, 1.0f, true) : Tensor()),
      offset(channels ? Tensor::zeros({channels}, true) : Tensor()),
      running_mean(channels, 0.0f),
      running_var(channels, 1.0f) {}

Tensor batchnorm(const Tensor& x, BatchNormState& state, Mode mode) {
    if (x.rank() < 2) throw DimensionError("batchnorm: expected [N x C x ...], got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t inner = x.numel() / (n * c);
    if (state.channels() != c) {
        throw DimensionError("batchnorm: " + std::to_string(state.channels()) + " channels of parameters for input " +
                             shape_str(x.shape()));
    }
    const std::size_t count = n * inner;
    const auto xv = x.values();
    std::vector<float> mean_c(c), inv_std(c);
    if (mode == Mode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const float* p = xv.data() + (i * c + ch) * inner;
                for (std::size_t j = 0; j < inner; ++j) s += p[j];
            }
            const double mu = s / static_cast<double>(count);
            for (std::size_t i = 0; i < n; ++i) {
                const float* p = xv.data() + (i * c + ch) * inner;
                for (std::size_t j = 0; j < inner; ++j) s2 += (p[j] - mu) * (p[j] - mu);
            }
            const double var = s2 / static_cast<double>(count);
            mean_c[ch] = static_cast<float>(mu);
            inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + state.eps));
            const double unbiased = count > 1 ? s2 / static_cast<double>(count - 1) : var;
            state.running_mean[ch] = state.momentum * state.running_mean[ch] + (1.0f - state.momentum) * static_cast<float>(mu);
            state.running_var[ch] =
                state.momentum * state.running_var[ch] + (1.0f - state.momentum) * static_cast<float>(unbiased);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean_c[ch] = state.running_mean[ch];
            inv_std[ch] = 1.0f / std::sqrt(state.running_var[ch] + state.eps);
        }
    }
    const auto gamma = state.scale.values();
    const auto beta = state.offset.values();
    std::vector<float> xhat(x.numel()), out(x.numel());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * inner;
            for (std::size_t j = 0; j < inner; ++j) {
                const float h = (xv[base + j] - mean_c[ch]) * inv_std[ch];
                xhat[base + j] = h;
                out[base + j] = gamma[ch] * h + beta[ch];
            }
        }
    Tensor scale_t = state.scale;
    Tensor offset_t = state.offset;
    return make_result(x.shape(), std::move(out), {x, scale_t, offset_t}, "batchnorm",
                       [x, scale_t, offset_t, mode, n, c, inner, inv_std, xhat = std::move(xhat)](const Tensor& y) {
                           const auto g = y.grad();
                           const auto gamma = scale_t.values();
                           const std::size_t count = n * inner;
                           std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                   const std::size_t base = (i * c + ch) * inner;
                                   for (std::size_t j = 0; j < inner; ++j) {
                                       sum_g[ch] += g[base + j];
                                       sum_gx[ch] += g[base + j] * xhat[base + j];
                                   }
                               }
                           if (scale_t.requires_grad()) {
                               std::vector<float> d(c);
                               for (std::size_t ch = 0; ch < c; ++ch) d[ch] = static_cast<float>(sum_gx[ch]);
                               accumulate(scale_t, d);
                           }
                           if (offset_t.requires_grad()) {
                               std::vector<float> d(c);
                               for (std::size_t ch = 0; ch < c; ++ch) d[ch] = static_cast<float>(sum_g[ch]);
                               accumulate(offset_t, d);
                           }
                           if (!x.requires_grad()) return;
                           std::vector<float> dx(x.numel());
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                   const std::size_t base = (i * c + ch) * inner;
                                   const double k = gamma[ch] * inv_std[ch];
                                   if (mode == Mode::eval) {
                                       for (std::size_t j = 0; j < inner; ++j) dx[base + j] = static_cast<float>(k * g[base + j]);
                                       continue;
                                   }
                                   const double mg = sum_g[ch] / static_cast<double>(count);
                                   const double mgx = sum_gx[ch] / static_cast<double>(count);
                                   for (std::size_t j = 0; j < inner; ++j)
                                       dx[base + j] = static_cast<float>(k * (g[base + j] - mg - xhat[base + j] * mgx));
                               }
                           accumulate(x, dx);
                       });
}

// ---------------------------------------------------------------------------

Tensor row_softmax(const Tensor& x) {
    const std::size_t cols = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / cols;
    const auto xv = x.values();
    std::vector<float> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const float* in = xv.data() + r * cols;
        float* o = out.data() + r * cols;
        const float mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (std::size_t j = 0; j < cols; ++j) z += std::exp(static_cast<double>(in[j]) - mx);
        for (std::size_t j = 0; j < cols; ++j) o[j] = static_cast<float>(std::exp(static_cast<double>(in[j]) - mx) / z);
    }
    return make_result(x.shape(), std::move(out), {x}, "row_softmax", [x, rows, cols](const Tensor& y) {
        const auto g = y.grad();
        const auto p = y.values();
        std::vector<float> d(x.numel());
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += static_cast<double>(g[r * cols + j]) * p[r * cols + j];
            for (std::size_t j = 0; j < cols; ++j)
                d[r * cols + j] = static_cast<float>(p[r * cols + j] * (g[r * cols + j] - dot));
        }
        accumulate(x, d);
    });
}

Tensor cross_entropy_mean(const Tensor& logits, std::span<const std::int32_t> labels) {
    require_rank(logits, 2, "cross_entropy_mean");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) {
        throw DimensionError("cross_entropy_mean: " + std::to_string(labels.size()) + " labels for logits " +
                             shape_str(logits.shape()));
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
            throw InputError("cross_entropy_mean: label " + std::to_string(labels[i]) + " at position " +
                             std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
        }
    }
    const auto lv = logits.values();
    std::vector<float> probs(n * k);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const float* row = lv.data() + i * k;
        const double mx = *std::max_element(row, row + k);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        const double lse = mx + std::log(z);
        total += lse - row[labels[i]];
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<float>(std::exp(row[j] - lse));
    }
    std::vector<std::int32_t> lab(labels.begin(), labels.end());
    return make_result({1}, {static_cast<float>(total / static_cast<double>(n))}, {logits}, "cross_entropy_mean",
                       [logits, n, k, lab, probs = std::move(probs)](const Tensor& y) {
                           const float scale_g = y.grad()[0] / static_cast<float>(n);
                           std::vector<float> d(n * k);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < k; ++j) {
                                   const float target = static_cast<std::size_t>(lab[i]) == j ? 1.0f : 0.0f;
                                   d[i * k + j] = (probs[i * k + j] - target) * scale_g;
                               }
                           accumulate(logits, d);
                       });
}

}  // namespace dynshuffle
