#include "gradcheck_suite.hpp"

#include <dynshuffle/aux_config.hpp>
#include <dynshuffle/dynshuffle.hpp>
#include <dynshuffle/gradcheck.hpp>
#include <dynshuffle/init.hpp>
#include <dynshuffle/ops.hpp>
#include <dynshuffle/permutation.hpp>
#include <dynshuffle/tape.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>

namespace dsh {

using namespace dynshuffle;

namespace {

using Op = std::function<Tensor(const Tensor&)>;

// Step for the fourth-order stencil on smooth nonlinear ops.

// Identity forward whose backward passes only half the gradient.
Tensor halve_grad(const Tensor& y) {
    const auto v = y.values();
    return make_result(y.shape(), std::vector<float>(v.begin(), v.end()), {y}, "fault", [y](const Tensor& out) {
        std::vector<float> g(out.grad().begin(), out.grad().end());
        for (auto& e : g) e *= 0.5f;
        Tensor t = y;
        t.accumulate_grad(g);
    });
}

struct Suite {
    Rng rng;
    double tol;
    std::string fault;
    std::vector<GradCheckEntry> out;

    Tensor normal(Shape s, float sd = 1.0f) { return normal_tensor(std::move(s), sd, rng); }
    Tensor uniform(Shape s, float lo, float hi) { return uniform_tensor(std::move(s), lo, hi, rng); }

    // Random values kept at least margin away from zero.
    Tensor off_zero(Shape s, float margin) {
        Tensor t = uniform(std::move(s), margin, 1.0f);
        std::bernoulli_distribution sign(0.5);
        for (auto& v : t.mutable_values())
            if (sign(rng)) v = -v;
        return t;
    }

    // Scalar loss <op(x), W> with W drawn once to match the output shape.
    ScalarFunction projected(const std::string& name, Op op, const Tensor& x) {
        const Tensor w = normal(op(x).shape());
        const bool broken = name == fault;
        return [op = std::move(op), w, broken](const Tensor& in) {
            Tensor y = op(in);
            if (broken) y = halve_grad(y);
            return sum(mul(y, w));
        };
    }

    // Finite differences of <op(x_i), W> for every listed input. The default
    // suits ops affine in x, where the central quotient is exact for any step
    // and a wide one keeps float rounding small. Smooth nonlinear ops pass the
    // fourth-order stencil with a per-op step where float32 rounding and
    // truncation error roughly balance.
    void fd(const std::string& name, std::vector<std::pair<Op, Tensor>> cases, double eps = 0.5,
            Stencil stencil = Stencil::second_order) {
        double worst = 0.0;
        for (auto& [op, x] : cases) worst = std::max(worst, finite_diff_check(projected(name, op, x), x, eps, stencil));
        out.push_back({name, worst, worst < tol, "finite-diff"});
    }

    void record(const std::string& name, double err, bool passed, const std::string& method) {
        out.push_back({name, err, passed, method});
    }
};

std::vector<std::size_t> random_perm(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    std::shuffle(p.begin(), p.end(), rng);
    return p;
}

// Binary factors with one 1 per row at a random column.
Tensor random_binary(std::size_t n, std::size_t r, std::size_t c, Rng& rng) {
    std::vector<float> v(n * r * c, 0.0f);
    std::uniform_int_distribution<std::size_t> col(0, c - 1);
    for (std::size_t i = 0; i < n * r; ++i) v[i * c + col(rng)] = 1.0f;
    return Tensor({n, r, c}, std::move(v));
}

double max_rel_diff(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) return INFINITY;
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(double(a[i]) - b[i]) / std::max(1.0, std::abs(double(b[i]))));
    }
    return worst;
}

std::size_t count_unequal(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) return std::max(a.size(), b.size());
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += a[i] != b[i];
    return n;
}

std::span<const float> grad_or_empty(const Tensor& t) { return t.grad(); }

void primitives(Suite& s) {
    {
        Tensor a = s.normal({3, 4}), b = s.normal({4, 5});
        s.fd("matmul", {{[b](const Tensor& x) { return matmul(x, b); }, a},
                        {[a](const Tensor& x) { return matmul(a, x); }, b}});
    }
    {
        Tensor a = s.normal({2, 3, 4}), b = s.normal({2, 4, 2});
        s.fd("bmm", {{[b](const Tensor& x) { return bmm(x, b); }, a}, {[a](const Tensor& x) { return bmm(a, x); }, b}});
    }
    {
        Tensor a = s.normal({2, 3}), b = s.normal({3, 2});
        Tensor ba = s.normal({2, 2, 2}), bb = s.normal({2, 2, 3});
        s.fd("kron", {{[b](const Tensor& x) { return kron(x, b); }, a},
                      {[a](const Tensor& x) { return kron(a, x); }, b},
                      {[bb](const Tensor& x) { return kron(x, bb); }, ba},
                      {[ba](const Tensor& x) { return kron(ba, x); }, bb}});
    }
    {
        Tensor x = s.normal({3, 4}), w = s.normal({4, 5}), b = s.normal({5});
        s.fd("affine", {{[w, b](const Tensor& t) { return affine(t, w, b); }, x},
                        {[x, b](const Tensor& t) { return affine(x, t, b); }, w},
                        {[x, w](const Tensor& t) { return affine(x, w, t); }, b}});
    }
    {
        Tensor a = s.normal({3, 4}), b = s.normal({3, 4});
        s.fd("add", {{[b](const Tensor& x) { return add(x, b); }, a}, {[a](const Tensor& x) { return add(a, x); }, b}});
        s.fd("mul", {{[b](const Tensor& x) { return mul(x, b); }, a}, {[a](const Tensor& x) { return mul(a, x); }, b}});
        s.fd("scale", {{[](const Tensor& x) { return scale(x, 1.7f); }, a}});
        s.fd("sum", {{[](const Tensor& x) { return sum(x); }, a}});
        s.fd("mean", {{[](const Tensor& x) { return mean(x); }, a}});
        s.fd("reshape", {{[](const Tensor& x) { return reshape(x, {2, 6}); }, a}});
    }
    // Inputs sit at least 0.2 from the kink, beyond the step.
    s.fd("relu", {{[](const Tensor& x) { return relu(x); }, s.off_zero({4, 5}, 0.2f)}}, 0.1);
    {
        Tensor a = s.normal({2, 3, 2}), b = s.normal({2, 2, 2});
        s.fd("concat_channels", {{[b](const Tensor& x) { return concat_channels(x, b); }, a},
                                 {[a](const Tensor& x) { return concat_channels(a, x); }, b}});
        s.fd("slice_channels", {{[](const Tensor& x) { return slice_channels(x, 1, 3); }, s.normal({2, 5, 3})}});
        s.fd("broadcast_batch", {{[](const Tensor& x) { return broadcast_batch(x, 3); }, s.normal({3, 4})}});
        s.fd("block_diag_repeat", {{[](const Tensor& x) { return block_diag_repeat(x, 3); }, s.normal({2, 2, 3})}});
        const std::vector<std::size_t> rows{3, 0, 0, 2};
        s.fd("gather_rows", {{[rows](const Tensor& x) { return gather_rows(x, rows); }, s.normal({2, 4, 3})}});
        s.fd("crop2d", {{[](const Tensor& x) { return crop2d(x, 3, 4); }, s.normal({2, 4, 5})}});
    }
    {
        Tensor x = s.normal({2, 6, 5, 5}), w = s.normal({6, 2, 3, 3}, 0.5f);
        s.fd("conv2d_grouped", {{[w](const Tensor& t) { return conv2d_grouped(t, w, 3, 2, 1); }, x},
                                {[x](const Tensor& t) { return conv2d_grouped(x, t, 3, 2, 1); }, w}});
    }
    {
        Tensor x = s.normal({2, 2, 11}), w = s.normal({3, 2, 4}, 0.5f);
        s.fd("conv1d", {{[w](const Tensor& t) { return conv1d(t, w, 2, 1); }, x},
                        {[x](const Tensor& t) { return conv1d(x, t, 2, 1); }, w}});
    }
    s.fd("global_avg_pool", {{[](const Tensor& x) { return global_avg_pool(x); }, s.normal({2, 3, 4, 4})}});
    s.fd("avg_pool2d", {{[](const Tensor& x) { return avg_pool2d(x, 3, 2, 1); }, s.normal({2, 2, 5, 5})}});
    {
        BatchNormState bn(3);
        bn.scale = s.uniform({3}, 0.5f, 1.5f).set_requires_grad();
        bn.offset = s.normal({3}).set_requires_grad();
        Tensor x = s.normal({8, 3, 2, 2});
        auto run = [&bn](const Tensor& t) { return batchnorm(t, bn, Mode::train); };
        auto run_x = [&bn, x](const Tensor&) { return batchnorm(x, bn, Mode::train); };
        s.fd("batchnorm", {{run, x}, {run_x, bn.scale}, {run_x, bn.offset}}, 0.1, Stencil::fourth_order);
    }
    s.fd("row_softmax", {{[](const Tensor& x) { return row_softmax(x); }, s.normal({3, 5})}}, 0.05,
         Stencil::fourth_order);
    {
        const std::vector<std::int32_t> labels{0, 3, 4, 1};
        s.fd("cross_entropy_mean",
             {{[labels](const Tensor& x) { return cross_entropy_mean(x, labels); }, s.normal({4, 5})}}, 0.1,
             Stencil::fourth_order);
    }
}

void shuffle_ops(Suite& s) {
    {
        const PermutationMatrix p(random_perm(5, s.rng));
        s.fd("apply_shift", {{[p](const Tensor& x) { return apply_shift(p, x); }, s.normal({2, 5, 3})}});
        const SelectionMatrix sel(4, {1, 1, 3, 0, 2, 1});
        s.fd("apply_selection", {{[sel](const Tensor& x) { return apply_selection(sel, x); }, s.normal({2, 4, 3})}});
    }
    {
        Tensor m = s.normal({2, 4, 3}), f = s.normal({2, 3, 2, 2}), shared = s.normal({4, 3});
        s.fd("apply_channel_matrix", {{[f](const Tensor& x) { return apply_channel_matrix(x, f); }, m},
                                      {[m](const Tensor& x) { return apply_channel_matrix(m, x); }, f},
                                      {[f](const Tensor& x) { return apply_channel_matrix(x, f); }, shared}});
    }
    s.fd("orth_reg", {{[](const Tensor& x) { return orth_reg(x); }, s.uniform({2, 4, 4}, 0.0f, 1.0f)}}, 0.05,
         Stencil::fourth_order);
    // Eight-wide rows keep R clear of its non-differentiable zero.
    s.fd("rect_reg", {{[](const Tensor& x) { return rect_reg(x); }, s.uniform({2, 3, 8}, 0.0f, 1.0f)}}, 0.02,
         Stencil::fourth_order);
    {
        const AuxNetConfig shared = derive_aux_config(12, 3);
        Tensor a = s.uniform({2, 2, 2}, 0.0f, 1.0f), b = s.uniform({2, 2, 2}, 0.0f, 1.0f);
        const AuxNetConfig clipped = generator_config(GeneratorNet::v2_1x, 2);
        Tensor ca = s.uniform({1, 6, 6}, 0.0f, 1.0f), cb = s.uniform({1, 10, 10}, 0.0f, 1.0f);
        s.fd("compose_dense", {{[b, shared](const Tensor& x) { return compose_dense(x, b, shared); }, a},
                               {[a, shared](const Tensor& x) { return compose_dense(a, x, shared); }, b},
                               {[cb, clipped](const Tensor& x) { return compose_dense(x, cb, clipped); }, ca},
                               {[ca, clipped](const Tensor& x) { return compose_dense(ca, x, clipped); }, cb}});
    }
    {
        // Binary factors are held fixed: only the feature gather is checked here.
        const AuxNetConfig cfg = derive_aux_config(12, 3);
        const Tensor b1 = random_binary(2, cfg.m1_rows, cfg.m1_cols, s.rng);
        const Tensor b2 = random_binary(2, cfg.m2_rows, cfg.m2_cols, s.rng);
        const AuxNetConfig clipped = generator_config(GeneratorNet::v2_1x, 2);
        const Tensor s1 = s.uniform({1, 6, 6}, 0.0f, 1.0f), s2 = s.uniform({1, 10, 10}, 0.0f, 1.0f);
        const Tensor c1 = binarize_ste(s1), c2 = binarize_ste(s2);
        s.fd("dynamic_shift", {{[=](const Tensor& x) { return dynamic_shift(x, b1, b2, cfg); }, s.normal({2, 12, 2, 2})},
                               {[=](const Tensor& x) { return dynamic_shift(x, c1, c2, clipped, s1, s2); },
                                s.normal({1, 58, 1, 1})}});
    }
}

// Factor gradients of the gather against the dense route
// apply_channel_matrix(compose_dense(b1, b2), f), which is plain multilinear
// algebra.
void factor_oracle(Suite& s) {
    const AuxNetConfig cfg = derive_aux_config(12, 3);
    const Tensor f = s.normal({2, 12, 2, 2});
    const Tensor w = s.normal({2, 12, 2, 2});
    const Tensor b1 = random_binary(2, cfg.m1_rows, cfg.m1_cols, s.rng);
    const Tensor b2 = random_binary(2, cfg.m2_rows, cfg.m2_cols, s.rng);
    auto grads = [&](bool dense) {
        Tensor x1 = b1.detach().set_requires_grad(), x2 = b2.detach().set_requires_grad();
        Tensor fx = f.detach().set_requires_grad();
        Tape tape;
        Tensor loss;
        {
            Tape::Recording rec(tape);
            Tensor y = dense ? apply_channel_matrix(compose_dense(x1, x2, cfg), fx) : dynamic_shift(fx, x1, x2, cfg);
            if (!dense && s.fault == "dynamic_shift.factors") y = halve_grad(y);
            loss = sum(mul(y, w));
        }
        tape.backward(loss);
        std::vector<float> all;
        for (const Tensor& t : {x1, x2, fx}) all.insert(all.end(), t.grad().begin(), t.grad().end());
        return all;
    };
    const double err = max_rel_diff(grads(false), grads(true));
    s.record("dynamic_shift.factors", err, err < s.tol, "dense-oracle");
}

void ste_checks(Suite& s) {
    {
        const Tensor m = s.normal({2, 4, 5}).set_requires_grad();
        const Tensor g = s.normal({2, 4, 5});
        Tape tape;
        Tensor b, loss;
        {
            Tape::Recording rec(tape);
            b = binarize_ste(m);
            Tensor y = s.fault == "binarize_ste" ? halve_grad(b) : b;
            loss = sum(mul(y, g));
        }
        tape.backward(loss);
        std::vector<float> expect(m.numel());
        for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = g.values()[i] * b.values()[i];
        const std::size_t bad = count_unequal(grad_or_empty(m), expect);
        s.record("binarize_ste", static_cast<double>(bad), bad == 0, "mask");
    }
    {
        // Inside the full pipeline the gradient reaching each soft factor is the
        // factor's upstream gradient masked by its binarization, and the fused
        // layer reproduces the step-by-step graph exactly.
        const AuxNetConfig cfg = derive_aux_config(12, 3);
        Rng init(s.rng());
        AuxNetState state(cfg, init);
        const Tensor f = s.normal({2, 12, 3, 3}).set_requires_grad();
        const Tensor w = s.normal({2, 12, 3, 3});
        StateCollector params;
        state.collect("aux", params);
        auto snapshot = [&] {
            std::vector<float> all(f.grad().begin(), f.grad().end());
            for (auto& p : params.params) all.insert(all.end(), p.tensor.grad().begin(), p.tensor.grad().end());
            return all;
        };
        auto reset = [&] {
            Tensor(f).clear_grad();
            for (auto& p : params.params) p.tensor.clear_grad();
        };

        std::size_t bad = 0;
        std::vector<float> manual_out, manual_grads;
        {
            Tape tape;
            AuxOutput m;
            Tensor b1, b2, loss;
            {
                Tape::Recording rec(tape);
                m = aux_forward(global_avg_pool(f), state, cfg, Mode::train);
                b1 = binarize_ste(m.m1_soft);
                b2 = binarize_ste(m.m2_soft);
                Tensor y = dynamic_shift(f, s.fault == "dynshuffle_forward" ? halve_grad(b1) : b1, b2, cfg,
                                         m.m1_soft, m.m2_soft);
                manual_out.assign(y.values().begin(), y.values().end());
                loss = sum(mul(y, w));
            }
            tape.backward(loss);
            for (const auto& [soft, bin] : {std::pair{m.m1_soft, b1}, std::pair{m.m2_soft, b2}}) {
                std::vector<float> expect(bin.numel(), 0.0f);
                if (bin.has_grad())
                    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = bin.grad()[i] * bin.values()[i];
                std::vector<float> got(soft.numel(), 0.0f);
                if (soft.has_grad()) std::copy(soft.grad().begin(), soft.grad().end(), got.begin());
                bad += count_unequal(got, expect);
            }
            manual_grads = snapshot();
        }
        reset();
        {
            Tape tape;
            Tensor loss;
            {
                Tape::Recording rec(tape);
                const ShuffleResult r = dynshuffle_forward(f, state, cfg, Mode::train);
                bad += count_unequal(r.output.values(), manual_out);
                loss = sum(mul(r.output, w));
            }
            tape.backward(loss);
            bad += count_unequal(snapshot(), manual_grads);
        }
        reset();
        s.record("dynshuffle_forward", static_cast<double>(bad), bad == 0, "mask");
    }
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(const GradCheckOptions& opts) {
    Suite s{Rng(opts.seed), opts.tolerance, opts.inject_fault, {}};
    primitives(s);
    shuffle_ops(s);
    factor_oracle(s);
    ste_checks(s);
    return s.out;
}

std::vector<std::string> gradcheck_op_names() {
    std::vector<std::string> names;
    for (const auto& e : run_gradcheck_suite({})) names.push_back(e.op);
    return names;
}

}  // namespace dsh
