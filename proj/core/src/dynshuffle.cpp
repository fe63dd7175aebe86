#include "dynshuffle/dynshuffle.hpp"

#include "dynshuffle/error.hpp"
#include "dynshuffle/tape.hpp"

#include <algorithm>
#include <cmath>

namespace dynshuffle {

namespace {

std::size_t row_argmax(const float* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

// Splits a [N×r×c] or [r×c] tensor into (batch, rows, cols).
struct MatrixStack {
    std::size_t batch, rows, cols;
};

MatrixStack matrix_stack(const Tensor& m, const char* op) {
    if (m.rank() == 2) return {1, m.dim(0), m.dim(1)};
    if (m.rank() == 3) return {m.dim(0), m.dim(1), m.dim(2)};
    throw DimensionError(std::string(op) + ": expected a matrix or a batch of matrices, got " + shape_str(m.shape()));
}

std::vector<std::size_t> argmax_rows(const float* m, std::size_t rows, std::size_t cols) {
    std::vector<std::size_t> out(rows);
    for (std::size_t r = 0; r < rows; ++r) out[r] = row_argmax(m + r * cols, cols);
    return out;
}

// Position of composed row r inside the group-shared block, after S.
struct RowOrigin {
    std::size_t group, a, s;
};

std::vector<RowOrigin> row_origins(const AuxNetConfig& cfg) {
    const std::size_t g = cfg.groups, block = cfg.block_rows();
    std::vector<RowOrigin> out(cfg.clip_target);
    for (std::size_t r = 0; r < cfg.clip_target; ++r) {
        // S reads row (r mod g)·|K| + r div g of I_g ⊗ K.
        const std::size_t src = (r % g) * block + r / g;
        const std::size_t local = src % block;
        out[r] = {src / block, local / cfg.m2_rows, local % cfg.m2_rows};
    }
    return out;
}

double dot(const float* a, const float* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

void check_factor_shapes(const Tensor& m1, const Tensor& m2, const AuxNetConfig& cfg, const char* op) {
    const auto a = matrix_stack(m1, op);
    const auto b = matrix_stack(m2, op);
    if (a.rows != cfg.m1_rows || a.cols != cfg.m1_cols || b.rows != cfg.m2_rows || b.cols != cfg.m2_cols ||
        a.batch != b.batch || m1.rank() != m2.rank()) {
        throw DimensionError(std::string(op) + ": factors " + shape_str(m1.shape()) + " and " + shape_str(m2.shape()) +
                             " do not match " + cfg.describe());
    }
}

}  // namespace

// --- generator --------------------------------------------------------------

AuxNetState::AuxNetState(const AuxNetConfig& cfg, Rng& rng) : bn(cfg.conv.channels) {
    cfg.validate();
    const std::size_t c = cfg.input_channels;
    mlp1_w1 = kaiming_uniform({c, cfg.mlp1_hidden}, c, rng);
    mlp1_b1 = fan_in_uniform({cfg.mlp1_hidden}, c, rng);
    mlp1_w2 = kaiming_uniform({cfg.mlp1_hidden, cfg.mlp1_out()}, cfg.mlp1_hidden, rng);
    mlp1_b2 = fan_in_uniform({cfg.mlp1_out()}, cfg.mlp1_hidden, rng);
    mlp2_w1 = kaiming_uniform({c, cfg.mlp2_hidden}, c, rng);
    mlp2_b1 = fan_in_uniform({cfg.mlp2_hidden}, c, rng);
    mlp2_w2 = kaiming_uniform({cfg.mlp2_hidden, cfg.mlp2_out}, cfg.mlp2_hidden, rng);
    mlp2_b2 = fan_in_uniform({cfg.mlp2_out}, cfg.mlp2_hidden, rng);
    conv_w = kaiming_uniform({cfg.conv.channels, 1, cfg.conv.kernel}, cfg.conv.kernel, rng);
}

void AuxNetState::collect(const std::string& prefix, StateCollector& out) {
    out.param(prefix + ".mlp1.w1", mlp1_w1);
    out.param(prefix + ".mlp1.b1", mlp1_b1);
    out.param(prefix + ".mlp1.w2", mlp1_w2);
    out.param(prefix + ".mlp1.b2", mlp1_b2);
    out.param(prefix + ".mlp2.w1", mlp2_w1);
    out.param(prefix + ".mlp2.b1", mlp2_b1);
    out.param(prefix + ".mlp2.w2", mlp2_w2);
    out.param(prefix + ".mlp2.b2", mlp2_b2);
    out.param(prefix + ".conv1d.w", conv_w);
    out.batchnorm(prefix + ".bn", bn);
}

AuxOutput aux_forward(const Tensor& pooled, AuxNetState& state, const AuxNetConfig& cfg, Mode mode) {
    if (pooled.rank() != 2 || pooled.dim(1) != cfg.input_channels) {
        throw ConfigError("aux network expects [N x " + std::to_string(cfg.input_channels) + "] input, got " +
                          shape_str(pooled.shape()));
    }
    const std::size_t n = pooled.dim(0);
    AuxOutput out;

    Tensor h1 = relu(affine(pooled, state.mlp1_w1, state.mlp1_b1));
    Tensor o1 = affine(h1, state.mlp1_w2, state.mlp1_b2);
    out.m1_soft = row_softmax(reshape(o1, {n, cfg.m1_rows, cfg.m1_cols}));

    Tensor h2 = relu(affine(pooled, state.mlp2_w1, state.mlp2_b1));
    Tensor o2 = affine(h2, state.mlp2_w2, state.mlp2_b2);
    Tensor signal = conv1d(reshape(o2, {n, 1, cfg.mlp2_out}), state.conv_w, cfg.conv.stride, cfg.conv.pad);
    signal = batchnorm(signal, state.bn, mode);
    out.m2_soft = row_softmax(reshape(signal, {n, cfg.m2_rows, cfg.m2_cols}));
    return out;
}

// --- binarization and regularizers ------------------------------------------

Tensor binarize_ste(const Tensor& m_soft) {
    if (m_soft.rank() < 1) throw DimensionError("binarize_ste: scalar input");
    const std::size_t cols = m_soft.shape().back();
    const std::size_t rows = m_soft.numel() / cols;
    const auto v = m_soft.values();
    std::vector<float> out(m_soft.numel(), 0.0f);
    for (std::size_t r = 0; r < rows; ++r) out[r * cols + row_argmax(v.data() + r * cols, cols)] = 1.0f;
    return make_result(m_soft.shape(), std::move(out), {m_soft}, "binarize_ste", [m_soft](const Tensor& y) {
        const auto g = y.grad();
        const auto mask = y.values();
        std::vector<float> d(g.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * mask[i];
        Tensor target = m_soft;
        target.accumulate_grad(d);
    });
}

Tensor orth_reg(const Tensor& m) {
    const auto st = matrix_stack(m, "orth_reg");
    if (st.rows != st.cols) {
        throw UsageError("orth_reg: matrix " + shape_str(m.shape()) + " is not square; use rect_reg");
    }
    const std::size_t r = st.rows, per = r * r;
    const auto v = m.values();
    // D = MMᵀ − I per sample, kept for the backward pass.
    std::vector<double> d(st.batch * per);
    std::vector<double> norms(st.batch);
    double total = 0.0;
    for (std::size_t z = 0; z < st.batch; ++z) {
        const float* mz = v.data() + z * per;
        double* dz = d.data() + z * per;
        double sq = 0.0;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < r; ++j) {
                const double e = dot(mz + i * r, mz + j * r, r) - (i == j ? 1.0 : 0.0);
                dz[i * r + j] = e;
                sq += e * e;
            }
        norms[z] = std::sqrt(sq);
        total += norms[z];
    }
    const float value = static_cast<float>(total / static_cast<double>(st.batch));
    return make_result({1}, {value}, {m}, "orth_reg", [m, st, d = std::move(d), norms = std::move(norms)](const Tensor& y) {
        const double g = y.grad()[0] / static_cast<double>(st.batch);
        const std::size_t r = st.rows, per = r * r;
        const auto v = m.values();
        std::vector<float> out(m.numel(), 0.0f);
        for (std::size_t z = 0; z < st.batch; ++z) {
            if (norms[z] == 0.0) continue;
            // dR/dM = (D + Dᵀ)M / R = 2DM / R, D symmetric.
            const double k = 2.0 * g / norms[z];
            const double* dz = d.data() + z * per;
            const float* mz = v.data() + z * per;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < r; ++j) {
                    double acc = 0.0;
                    for (std::size_t l = 0; l < r; ++l) acc += dz[i * r + l] * mz[l * r + j];
                    out[z * per + i * r + j] = static_cast<float>(k * acc);
                }
        }
        Tensor target = m;
        target.accumulate_grad(out);
    });
}

Tensor rect_reg(const Tensor& m) {
    const auto st = matrix_stack(m, "rect_reg");
    const std::size_t per = st.rows * st.cols;
    const auto v = m.values();
    std::vector<double> row_norms(st.batch * st.rows);
    std::vector<double> regs(st.batch);
    double total = 0.0;
    for (std::size_t z = 0; z < st.batch; ++z) {
        double sq = 0.0;
        for (std::size_t j = 0; j < st.rows; ++j) {
            const float* row = v.data() + z * per + j * st.cols;
            const double n = std::sqrt(dot(row, row, st.cols));
            row_norms[z * st.rows + j] = n;
            sq += (n - 1.0) * (n - 1.0);
        }
        regs[z] = std::sqrt(sq);
        total += regs[z];
    }
    const float value = static_cast<float>(total / static_cast<double>(st.batch));
    return make_result({1}, {value}, {m}, "rect_reg",
                       [m, st, row_norms = std::move(row_norms), regs = std::move(regs)](const Tensor& y) {
                           const double g = y.grad()[0] / static_cast<double>(st.batch);
                           const std::size_t per = st.rows * st.cols;
                           const auto v = m.values();
                           std::vector<float> out(m.numel(), 0.0f);
                           for (std::size_t z = 0; z < st.batch; ++z) {
                               if (regs[z] == 0.0) continue;
                               for (std::size_t j = 0; j < st.rows; ++j) {
                                   const double n = row_norms[z * st.rows + j];
                                   if (n == 0.0) continue;
                                   const double k = g * (n - 1.0) / (regs[z] * n);
                                   const std::size_t base = z * per + j * st.cols;
                                   for (std::size_t c = 0; c < st.cols; ++c)
                                       out[base + c] = static_cast<float>(k * v[base + c]);
                               }
                           }
                           Tensor target = m;
                           target.accumulate_grad(out);
                       });
}

Tensor factor_reg(const Tensor& m) {
    const auto st = matrix_stack(m, "factor_reg");
    return st.rows == st.cols ? orth_reg(m) : rect_reg(m);
}

// --- composition ------------------------------------------------------------

PermutationMatrix composition_shuffle(const AuxNetConfig& cfg) {
    return build_manual_shuffle(cfg.groups, cfg.composed_rows());
}

ComposedSelection compose_selection(std::span<const std::size_t> sigma1, std::span<const std::size_t> sigma2,
                                    const AuxNetConfig& cfg, const float* m1_soft, const float* m2_soft) {
    cfg.validate();
    if (sigma1.size() != cfg.m1_rows || sigma2.size() != cfg.m2_rows) {
        throw DimensionError("compose: factor maps of length " + std::to_string(sigma1.size()) + " and " +
                             std::to_string(sigma2.size()) + " do not match " + cfg.describe());
    }
    const std::size_t c2 = cfg.m2_cols, block_cols = cfg.block_cols(), width = cfg.input_width;
    const auto origins = row_origins(cfg);
    std::vector<std::size_t> map(cfg.clip_target);
    std::vector<bool> repaired(cfg.clip_target, false);
    for (std::size_t r = 0; r < cfg.clip_target; ++r) {
        const auto [gi, a, s] = origins[r];
        if (sigma1[a] >= cfg.m1_cols || sigma2[s] >= c2) throw DimensionError("compose: factor map out of range");
        const std::size_t col = gi * block_cols + sigma1[a] * c2 + sigma2[s];
        if (col < width) {
            map[r] = col;
            continue;
        }
        if (m1_soft == nullptr || m2_soft == nullptr) {
            throw UsageError("compose: clipping " + cfg.describe() + " needs the soft factors for repair");
        }
        // Argmax of the soft composition's row over the kept columns; only
        // columns in this row's group block are nonzero.
        std::size_t best = 0;
        float best_v = -1.0f;
        for (std::size_t c = 0; c < width; ++c) {
            float v = 0.0f;
            if (c / block_cols == gi) {
                const std::size_t local = c % block_cols;
                v = m1_soft[a * cfg.m1_cols + local / c2] * m2_soft[s * c2 + local % c2];
            }
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        map[r] = best;
        repaired[r] = true;
    }
    return {SelectionMatrix(width, std::move(map)), std::move(repaired)};
}

Tensor compose(const Tensor& m1_bin, const Tensor& m2_bin, const AuxNetConfig& cfg, const Tensor& m1_soft,
               const Tensor& m2_soft) {
    if (m1_bin.rank() != 2) throw DimensionError("compose: expected single factor matrices");
    check_factor_shapes(m1_bin, m2_bin, cfg, "compose");
    const auto s1 = argmax_rows(m1_bin.values().data(), cfg.m1_rows, cfg.m1_cols);
    const auto s2 = argmax_rows(m2_bin.values().data(), cfg.m2_rows, cfg.m2_cols);
    const float* p1 = m1_soft.defined() ? m1_soft.values().data() : nullptr;
    const float* p2 = m2_soft.defined() ? m2_soft.values().data() : nullptr;
    return compose_selection(s1, s2, cfg, p1, p2).selection.dense();
}

Tensor compose_dense(const Tensor& m1, const Tensor& m2, const AuxNetConfig& cfg) {
    check_factor_shapes(m1, m2, cfg, "compose_dense");
    cfg.validate();
    Tensor k = kron(m1, m2);
    const bool batched = k.rank() == 3;
    if (!batched) k = reshape(k, {1, k.dim(0), k.dim(1)});
    if (cfg.groups > 1) {
        k = block_diag_repeat(k, cfg.groups);
        const auto s = composition_shuffle(cfg);
        k = gather_rows(k, s.map());
    }
    if (cfg.needs_clip()) k = crop2d(k, cfg.clip_target, cfg.input_width);
    return k;
}

Tensor apply_channel_matrix(const Tensor& m, const Tensor& f) {
    if (f.rank() < 2) throw DimensionError("apply_channel_matrix: feature map " + shape_str(f.shape()));
    const std::size_t n = f.dim(0), cin = f.dim(1);
    const std::size_t inner = f.numel() / (n * cin);
    Tensor mm = m;
    if (m.rank() == 2) mm = broadcast_batch(m, n);
    if (mm.rank() != 3 || mm.dim(0) != n || mm.dim(2) != cin) {
        throw DimensionError("apply_channel_matrix: matrix " + shape_str(m.shape()) + " against features " +
                             shape_str(f.shape()));
    }
    Tensor y = bmm(mm, reshape(f, {n, cin, inner}));
    Shape shape = f.shape();
    shape[1] = mm.dim(1);
    return reshape(y, std::move(shape));
}

Tensor dynamic_shift(const Tensor& f, const Tensor& b1, const Tensor& b2, const AuxNetConfig& cfg,
                     const Tensor& m1_soft, const Tensor& m2_soft, std::vector<SelectionMatrix>* selections) {
    check_factor_shapes(b1, b2, cfg, "dynamic_shift");
    if (b1.rank() != 3) throw DimensionError("dynamic_shift: factors must be batched [N x r x c]");
    if (f.rank() < 2 || f.dim(1) != cfg.input_width || f.dim(0) != b1.dim(0)) {
        throw DimensionError("dynamic_shift: features " + shape_str(f.shape()) + " against " + cfg.describe());
    }
    const std::size_t n = f.dim(0), cin = cfg.input_width, cout = cfg.clip_target;
    const std::size_t inner = f.numel() / (n * cin);
    const std::size_t r1 = cfg.m1_rows, c1 = cfg.m1_cols, r2 = cfg.m2_rows, c2 = cfg.m2_cols;
    const bool soft = m1_soft.defined() && m2_soft.defined();

    std::vector<std::vector<std::size_t>> sig1(n), sig2(n);
    std::vector<ComposedSelection> comp(n);
    Shape shape = f.shape();
    shape[1] = cout;
    std::vector<float> out(n * cout * inner);
    const auto fv = f.values();
    for (std::size_t i = 0; i < n; ++i) {
        sig1[i] = argmax_rows(b1.values().data() + i * r1 * c1, r1, c1);
        sig2[i] = argmax_rows(b2.values().data() + i * r2 * c2, r2, c2);
        comp[i] = compose_selection(sig1[i], sig2[i], cfg, soft ? m1_soft.values().data() + i * r1 * c1 : nullptr,
                                    soft ? m2_soft.values().data() + i * r2 * c2 : nullptr);
        const auto& sel = comp[i].selection;
        for (std::size_t r = 0; r < cout; ++r)
            std::copy_n(fv.begin() + (i * cin + sel[r]) * inner, inner, out.begin() + (i * cout + r) * inner);
        if (selections) selections->push_back(sel);
    }

    return make_result(
        std::move(shape), std::move(out), {f, b1, b2}, "dynamic_shift",
        [f, b1, b2, cfg, n, inner, sig1 = std::move(sig1), sig2 = std::move(sig2), comp = std::move(comp)](const Tensor& y) {
            const std::size_t cin = cfg.input_width, cout = cfg.clip_target;
            const std::size_t r1 = cfg.m1_rows, c1 = cfg.m1_cols, r2 = cfg.m2_rows, c2 = cfg.m2_cols;
            const std::size_t block_cols = cfg.block_cols();
            const auto origins = row_origins(cfg);
            const auto g = y.grad();
            const auto fv = f.values();
            std::vector<float> df(f.requires_grad() ? f.numel() : 0, 0.0f);
            std::vector<double> d1(b1.requires_grad() ? b1.numel() : 0, 0.0);
            std::vector<double> d2(b2.requires_grad() ? b2.numel() : 0, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& sel = comp[i].selection;
                const float* fi = fv.data() + i * cin * inner;
                for (std::size_t r = 0; r < cout; ++r) {
                    const float* gr = g.data() + (i * cout + r) * inner;
                    if (!df.empty()) {
                        float* dst = df.data() + (i * cin + sel[r]) * inner;
                        for (std::size_t j = 0; j < inner; ++j) dst[j] += gr[j];
                    }
                    if (comp[i].repaired[r]) continue;
                    const auto [gi, a, s] = origins[r];
                    // dM[r, c'] = <G[r], F[c']>; M[r, (b,t)] = B1[a,b]·B2[s,t].
                    if (!d1.empty()) {
                        for (std::size_t b = 0; b < c1; ++b) {
                            const std::size_t col = gi * block_cols + b * c2 + sig2[i][s];
                            if (col < cin) d1[(i * r1 + a) * c1 + b] += dot(gr, fi + col * inner, inner);
                        }
                    }
                    if (!d2.empty()) {
                        for (std::size_t t = 0; t < c2; ++t) {
                            const std::size_t col = gi * block_cols + sig1[i][a] * c2 + t;
                            if (col < cin) d2[(i * r2 + s) * c2 + t] += dot(gr, fi + col * inner, inner);
                        }
                    }
                }
            }
            auto flush = [](Tensor t, const std::vector<double>& d) {
                std::vector<float> v(d.begin(), d.end());
                t.accumulate_grad(v);
            };
            if (!df.empty()) {
                Tensor target = f;
                target.accumulate_grad(df);
            }
            if (!d1.empty()) flush(b1, d1);
            if (!d2.empty()) flush(b2, d2);
        });
}

// --- full pipelines ---------------------------------------------------------

ShuffleResult dynshuffle_forward(const Tensor& f, AuxNetState& state, const AuxNetConfig& cfg, Mode mode,
                                 std::vector<SelectionMatrix>* selections) {
    if (f.rank() != 4 || f.dim(1) != cfg.input_channels) {
        throw DimensionError("dynamic shuffle over " + std::to_string(cfg.input_channels) + " channels applied to " +
                             shape_str(f.shape()));
    }
    const AuxOutput m = aux_forward(global_avg_pool(f), state, cfg, mode);
    ShuffleResult out;
    out.output = dynamic_shift(f, binarize_ste(m.m1_soft), binarize_ste(m.m2_soft), cfg, m.m1_soft, m.m2_soft,
                               selections);
    out.reg = add(factor_reg(m.m1_soft), factor_reg(m.m2_soft));
    return out;
}

ShuffleResult static_dynamic_forward(const Tensor& f, const Tensor& static_m, AuxNetState& state,
                                     const AuxNetConfig& cfg, Mode mode) {
    if (cfg.clip_target < cfg.input_width) {
        throw ConfigError("static-dynamic shuffle cannot reduce " + std::to_string(cfg.input_width) + " channels to " +
                          std::to_string(cfg.clip_target));
    }
    if (static_m.rank() != 2 || static_m.dim(0) != cfg.clip_target || static_m.dim(1) != cfg.input_width) {
        throw DimensionError("static-dynamic shuffle: static matrix " + shape_str(static_m.shape()) + " against " +
                             cfg.describe());
    }
    if (f.rank() != 4 || f.dim(1) != cfg.input_width) {
        throw DimensionError("static-dynamic shuffle applied to " + shape_str(f.shape()));
    }
    const std::size_t n = f.dim(0);
    const AuxOutput m = aux_forward(global_avg_pool(f), state, cfg, mode);
    Tensor dyn = compose_dense(binarize_ste(m.m1_soft), binarize_ste(m.m2_soft), cfg);
    Tensor effective = add(dyn, broadcast_batch(static_m, n));
    ShuffleResult out;
    out.output = apply_channel_matrix(effective, f);
    out.reg = add(rect_reg(m.m1_soft), rect_reg(m.m2_soft));
    return out;
}

Tensor stacked_identity(std::size_t out_channels, std::size_t in_channels, float value) {
    std::vector<float> v(out_channels * in_channels, 0.0f);
    for (std::size_t r = 0; r < out_channels; ++r) v[r * in_channels + r % in_channels] = value;
    return Tensor({out_channels, in_channels}, std::move(v));
}

void force_identity(AuxNetState& state, const AuxNetConfig& cfg) {
    if (cfg.m1_rows != cfg.m1_cols || cfg.m2_rows > cfg.m2_cols) {
        throw ConfigError("force_identity: factor shapes of " + cfg.describe() + " have no identity");
    }
    const std::size_t s = cfg.conv.stride, p = cfg.conv.pad, lout = cfg.conv_length();
    if (s < 2 || p + 1 >= cfg.conv.kernel || (lout - 1) * s + 1 >= cfg.mlp2_out) {
        throw ConfigError("force_identity: Conv1D geometry of " + cfg.describe() + " cannot realize an identity");
    }
    // Branch 1: constant logits 10·I.
    std::fill(state.mlp1_w2.mutable_values().begin(), state.mlp1_w2.mutable_values().end(), 0.0f);
    auto b1 = state.mlp1_b2.mutable_values();
    std::fill(b1.begin(), b1.end(), 0.0f);
    for (std::size_t a = 0; a < cfg.m1_rows; ++a) b1[a * cfg.m1_cols + a] = 10.0f;

    // Branch 2: constant signal x[t] = (t/s)², and two taps per channel so
    // that channel c sees w0·x[js] + w1·x[js+1] = −(j−c)² + const.
    std::fill(state.mlp2_w2.mutable_values().begin(), state.mlp2_w2.mutable_values().end(), 0.0f);
    auto b2 = state.mlp2_b2.mutable_values();
    for (std::size_t t = 0; t < b2.size(); ++t) {
        const float u = static_cast<float>(t) / static_cast<float>(s);
        b2[t] = u * u;
    }
    auto w = state.conv_w.mutable_values();
    std::fill(w.begin(), w.end(), 0.0f);
    const std::size_t k = cfg.conv.kernel;
    for (std::size_t c = 0; c < cfg.conv.channels; ++c) {
        const float cs = static_cast<float>(c * s);
        w[c * k + p] = -1.0f - cs;
        w[c * k + p + 1] = cs;
    }
    auto scale = state.bn.scale.mutable_values();
    std::fill(scale.begin(), scale.end(), 1.0f);
    auto offset = state.bn.offset.mutable_values();
    std::fill(offset.begin(), offset.end(), 0.0f);
}

// --- layer ------------------------------------------------------------------

DynamicShuffle::DynamicShuffle(AuxNetConfig cfg, ShuffleOptions options, Rng& rng)
    : cfg_(std::move(cfg)), options_(options) {
    cfg_.validate();
    reference_ = PermutationMatrix::identity(cfg_.clip_target);
    if (options_.dynamic_input) {
        state_ = AuxNetState(cfg_, rng);
    } else {
        logits1_ = normal_tensor({cfg_.m1_rows, cfg_.m1_cols}, 0.5f, rng, true);
        logits2_ = normal_tensor({cfg_.m2_rows, cfg_.m2_cols}, 0.5f, rng, true);
    }
}

AuxOutput DynamicShuffle::factors(const Tensor& f, Mode mode) {
    if (options_.dynamic_input) return aux_forward(global_avg_pool(f), state_, cfg_, mode);
    const std::size_t n = f.dim(0);
    return {broadcast_batch(row_softmax(logits1_), n), broadcast_batch(row_softmax(logits2_), n)};
}

Tensor DynamicShuffle::forward(const Tensor& f, ForwardContext& ctx, const std::string& name) {
    if (f.rank() != 4 || f.dim(1) != cfg_.input_channels) {
        throw DimensionError("dynamic shuffle '" + name + "' over " + std::to_string(cfg_.input_channels) +
                             " channels applied to " + shape_str(f.shape()));
    }
    const AuxOutput m = factors(f, ctx.mode);
    if (ctx.stats) {
        ctx.stats->macs += macs();
        ctx.stats->aux_macs += macs();
    }
    ctx.regs.push_back(add(factor_reg(m.m1_soft), factor_reg(m.m2_soft)));

    std::vector<SelectionMatrix> selections;
    auto* capture = ctx.capture ? &selections : nullptr;
    Tensor out;
    if (options_.binarize || ctx.force_binarize) {
        out = dynamic_shift(f, binarize_ste(m.m1_soft), binarize_ste(m.m2_soft), cfg_, m.m1_soft, m.m2_soft, capture);
    } else {
        out = apply_channel_matrix(compose_dense(m.m1_soft, m.m2_soft, cfg_), f);
        if (capture) {
            const std::size_t per1 = cfg_.m1_rows * cfg_.m1_cols, per2 = cfg_.m2_rows * cfg_.m2_cols;
            for (std::size_t i = 0; i < f.dim(0); ++i) {
                const float* p1 = m.m1_soft.values().data() + i * per1;
                const float* p2 = m.m2_soft.values().data() + i * per2;
                const auto s1 = argmax_rows(p1, cfg_.m1_rows, cfg_.m1_cols);
                const auto s2 = argmax_rows(p2, cfg_.m2_rows, cfg_.m2_cols);
                selections.push_back(compose_selection(s1, s2, cfg_, p1, p2).selection);
            }
        }
    }
    if (ctx.capture) ctx.capture->push_back({name, std::move(selections), reference_});
    return out;
}

void DynamicShuffle::collect(const std::string& prefix, StateCollector& out) {
    if (options_.dynamic_input) {
        state_.collect(prefix, out);
    } else {
        out.param(prefix + ".logits1", logits1_, false);
        out.param(prefix + ".logits2", logits2_, false);
    }
}

std::size_t DynamicShuffle::param_count() const {
    if (options_.dynamic_input) return cfg_.param_count();
    return cfg_.m1_rows * cfg_.m1_cols + cfg_.m2_rows * cfg_.m2_cols;
}

std::size_t DynamicShuffle::macs() const { return options_.dynamic_input ? cfg_.macs() : 0; }

void DynamicShuffle::force_identity() {
    if (!options_.dynamic_input) {
        throw ConfigError("force_identity applies to input-dependent shuffles only");
    }
    dynshuffle::force_identity(state_, cfg_);
}

}  // namespace dynshuffle
