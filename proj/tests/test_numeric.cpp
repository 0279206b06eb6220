#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include <moelab/graph.hpp>
#include <moelab/rng.hpp>
#include <moelab/tensor.hpp>

#include "fd_check.hpp"

using namespace moelab;

namespace {

Tensor random_tensor(Rng &rng, std::vector<std::size_t> shape, double scale = 1.0)
{
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); i++)
        t[i] = scale * rng.normal();
    return t;
}

} // namespace

TEST_SUITE_BEGIN("numeric");

TEST_CASE("tensor shape/data invariants")
{
    CHECK_THROWS_AS(Tensor({ 2, 3 }, { 1.0, 2.0 }), Error);
    CHECK_THROWS_AS(Tensor({ 0, 3 }), Error);
    Tensor t({ 2, 2 }, { 1, 2, 3, 4 });
    CHECK(t.at(1, 0) == 3.0);
    Tensor bad({ 2 }, { 1.0, std::nan("") });
    CHECK_THROWS_AS(bad.check_finite("test"), Error);
}

TEST_CASE("rng streams are reproducible and fork independent")
{
    Rng a(42), b(42);
    for (int i = 0; i < 100; i++)
        CHECK(a.next_u64() == b.next_u64());

    Rng c(42);
    Rng f1 = c.fork(1), f2 = c.fork(2);
    CHECK(f1.next_u64() != f2.next_u64());
    // forking does not disturb the parent stream
    Rng d(42);
    for (int i = 0; i < 10; i++)
        (void)d.fork(i);
    Rng e(42);
    CHECK(d.next_u64() == e.next_u64());

    Rng u(7);
    for (int i = 0; i < 1000; i++) {
        const double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
        CHECK(u.below(13) < 13);
    }
}

TEST_CASE("matmul identity and hand arithmetic")
{
    Graph g;
    Rng rng(1);
    Var eye = g.constant(Tensor({ 2, 2 }, { 1, 0, 0, 1 }));
    Var a = g.constant(random_tensor(rng, { 2, 2 }));
    Var prod = matmul(eye, a);
    for (std::size_t i = 0; i < 4; i++)
        CHECK(prod.value()[i] == a.value()[i]);

    Var b = g.constant(Tensor({ 2, 2 }, { 1, 2, 3, 4 }));
    Var c = g.constant(Tensor({ 2, 1 }, { 0, 1 }));
    Var bc = matmul(b, c);
    CHECK(bc.value()[0] == 2.0);
    CHECK(bc.value()[1] == 4.0);

    CHECK_THROWS_AS(matmul(b, g.constant(Tensor({ 3, 1 }))), Error);
}

TEST_CASE("matmul gradient of sum equals ones·bT and matches finite differences")
{
    Rng rng(2);
    Parameter a("a", random_tensor(rng, { 5, 7 }));
    Parameter b("b", random_tensor(rng, { 7, 3 }));

    auto build = [&](Graph &g) { return vsum(matmul(g.param(a), g.param(b))); };
    auto rep = fd::compare({ &a, &b }, build);
    CHECK(rep.max_rel < 1e-6);

    // closed form: d(sum)/dA = ones(5,3)·Bᵀ, i.e. dA[i][p] = Σ_j B[p][j]
    a.zero_grad();
    b.zero_grad();
    {
        Graph g;
        g.backward(build(g));
    }
    for (std::size_t i = 0; i < 5; i++)
        for (std::size_t p = 0; p < 7; p++) {
            double want = 0.0;
            for (std::size_t j = 0; j < 3; j++)
                want += b.value.at(p, j);
            CHECK(a.grad.at(i, p) == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("softmax basics")
{
    Graph g;
    Var u = softmax(g.constant(Tensor({ 4 }, { 0, 0, 0, 0 })));
    for (std::size_t i = 0; i < 4; i++)
        CHECK(u.value()[i] == doctest::Approx(0.25).epsilon(1e-15));

    Var s = softmax(g.constant(Tensor({ 2 }, { std::log(2.0), 0.0 })));
    CHECK(s.value()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(s.value()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax sums to one and is bitwise shift invariant on exact inputs")
{
    Rng rng(3);
    for (int trial = 0; trial < 200; trial++) {
        const std::size_t n = 1 + rng.below(16);
        // dyadic inputs so adding the shift is exact in binary64
        Tensor v({ n });
        for (std::size_t i = 0; i < n; i++)
            v[i] = static_cast<double>(static_cast<std::int64_t>(rng.below(16384)) - 8192) * 0x1.0p-10;
        const double c = static_cast<double>(static_cast<std::int64_t>(rng.below(1 << 20)) - (1 << 19)) * 0x1.0p-10;
        Tensor vs({ n });
        for (std::size_t i = 0; i < n; i++)
            vs[i] = v[i] + c;

        Graph g;
        Var s1 = softmax(g.constant(v));
        Var s2 = softmax(g.constant(vs));
        double total = 0.0;
        for (std::size_t i = 0; i < n; i++) {
            const double x1 = s1.value()[i], x2 = s2.value()[i];
            total += x1;
            CHECK(std::memcmp(&x1, &x2, sizeof(double)) == 0);
            CHECK(x1 > 0.0);
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("constant vector softmax is uniform")
{
    Rng rng(4);
    for (int trial = 0; trial < 20; trial++) {
        const std::size_t n = 1 + rng.below(8);
        const double c = rng.range(-50.0, 50.0);
        Tensor v({ n });
        v.fill(c);
        Graph g;
        Var s = softmax(g.constant(v));
        for (std::size_t i = 0; i < n; i++)
            CHECK(s.value()[i] == doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-14));
    }
}

TEST_CASE("cosine closed forms and guard")
{
    Graph g;
    Rng rng(5);
    Var u = g.constant(random_tensor(rng, { 6 }));
    CHECK(cosine(u, u).value().item() == doctest::Approx(1.0).epsilon(1e-12));

    Var e1 = g.constant(Tensor({ 2 }, { 1, 0 }));
    Var e2 = g.constant(Tensor({ 2 }, { 0, 1 }));
    CHECK(cosine(e1, e2).value().item() == 0.0);

    Var d = g.constant(Tensor({ 2 }, { 1, 1 }));
    CHECK(cosine(d, e1).value().item() == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));

    // zero vector: guarded value 0 with zero gradient
    Parameter z("z", Tensor({ 3 }));
    Parameter w("w", random_tensor(rng, { 3 }));
    Graph g2;
    Var c = cosine(g2.param(z), g2.param(w));
    CHECK(c.value().item() == 0.0);
    g2.backward(c);
    for (std::size_t i = 0; i < 3; i++) {
        CHECK(z.grad[i] == 0.0);
        CHECK(w.grad[i] == 0.0);
    }
}

TEST_CASE("swish values")
{
    Graph g;
    Var z = swish(g.constant(Tensor({ 1 }, { 0.0 })));
    CHECK(z.value().item() == 0.0);

    Var one = swish(g.constant(Tensor({ 1 }, { 1.0 })));
    CHECK(one.value().item() == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));

    for (double x : { 20.0, 40.0, 80.0 }) {
        Var big = swish(g.constant(Tensor({ 1 }, { x })));
        CHECK(big.value().item() / x == doctest::Approx(1.0).epsilon(1e-8));
    }
}

TEST_CASE("backward on simple losses")
{
    Rng rng(6);
    Parameter p("p", random_tensor(rng, { 4, 3 }));

    p.zero_grad();
    {
        Graph g;
        g.backward(vsum(g.param(p)));
    }
    for (std::size_t i = 0; i < p.value.size(); i++)
        CHECK(p.grad[i] == 1.0);

    p.zero_grad();
    {
        Graph g;
        Var v = g.param(p);
        g.backward(dot(v, v));
    }
    for (std::size_t i = 0; i < p.value.size(); i++)
        CHECK(p.grad[i] == doctest::Approx(2.0 * p.value[i]).epsilon(1e-15));

    // grads accumulate across backward passes until zero_grad
    p.zero_grad();
    for (int pass = 0; pass < 2; pass++) {
        Graph g;
        g.backward(vsum(g.param(p)));
    }
    for (std::size_t i = 0; i < p.value.size(); i++)
        CHECK(p.grad[i] == 2.0);
}

TEST_CASE("backward rejects non-scalar loss")
{
    Graph g;
    Rng rng(7);
    Var m = g.constant(random_tensor(rng, { 2, 2 }));
    CHECK_THROWS_AS(g.backward(m), Error);
}

TEST_CASE("every registered op matches finite differences")
{
    Rng rng(8);

    SUBCASE("elementwise and reductions")
    {
        Parameter a("a", random_tensor(rng, { 3, 4 }));
        Parameter b("b", random_tensor(rng, { 3, 4 }));
        auto rep = fd::compare({ &a, &b }, [&](Graph &g) {
            Var x = g.param(a), y = g.param(b);
            Var m = mul(add(x, y), sub(x, scale(y, 0.5)));
            return add(vmean(square(m)), vsum(swish(m)));
        });
        CHECK(rep.max_rel < 1e-5);
    }

    SUBCASE("matmul family")
    {
        Parameter a("a", random_tensor(rng, { 4, 5 }));
        Parameter b("b", random_tensor(rng, { 5, 3 }));
        Parameter c("c", random_tensor(rng, { 3, 5 }));
        Parameter x("x", random_tensor(rng, { 5 }));
        auto rep = fd::compare({ &a, &b, &c, &x }, [&](Graph &g) {
            Var m1 = matmul(g.param(a), g.param(b));
            Var m2 = matmul_nt(g.param(a), g.param(c));
            Var v = matvec(g.param(a), g.param(x));
            return add(add(vsum(square(m1)), vsum(square(m2))), vsum(square(v)));
        });
        CHECK(rep.max_rel < 1e-5);
    }

    SUBCASE("softmax, logsumexp, cross entropy")
    {
        Parameter q("q", random_tensor(rng, { 6, 5 }));
        std::vector<std::uint32_t> targets = { 0, 3, 2, 4, 1, 1 };
        auto rep = fd::compare({ &q }, [&](Graph &g) {
            Var m = g.param(q);
            Var s = softmax_rows(m);
            Var lse = logsumexp_rows(m);
            Var ce = cross_entropy_mean(m, targets);
            Var first = softmax(row(m, 0));
            return add(add(vsum(square(s)), vmean(square(lse))), add(ce, vsum(square(first))));
        });
        CHECK(rep.max_rel < 1e-5);
    }

    SUBCASE("cosine away from the guard")
    {
        Parameter u("u", random_tensor(rng, { 8 }));
        Parameter v("v", random_tensor(rng, { 8 }));
        auto rep = fd::compare({ &u, &v }, [&](Graph &g) {
            return square(cosine(g.param(u), g.param(v)));
        });
        CHECK(rep.max_rel < 1e-5);
    }

    SUBCASE("structural ops")
    {
        Parameter t("t", random_tensor(rng, { 7, 4 }));
        std::vector<std::uint32_t> ids = { 2, 0, 6, 6, 3 };
        auto rep = fd::compare({ &t }, [&](Graph &g) {
            Var table = g.param(t);
            Var e = embed(table, ids);
            Var r0 = row(e, 0);
            Var r1 = row(e, 1);
            Var st = stack_rows({ r0, r1, r0 });
            Var picked = elem(st, 2, 1);
            Var scaled = mul_scalar(mean_cols(e), picked);
            return add(vsum(scaled), dot(r0, r1));
        });
        CHECK(rep.max_rel < 1e-5);
    }
}

TEST_CASE("recomputation is bit identical")
{
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Parameter a("a", random_tensor(rng, { 6, 6 }));
        Parameter b("b", random_tensor(rng, { 6, 6 }));
        Graph g;
        Var loss = vsum(square(matmul(swish(g.param(a)), g.param(b))));
        g.backward(loss);
        std::vector<double> out;
        out.push_back(loss.value().item());
        for (std::size_t i = 0; i < a.grad.size(); i++)
            out.push_back(a.grad[i]);
        return out;
    };
    auto r1 = run(99), r2 = run(99);
    REQUIRE(r1.size() == r2.size());
    for (std::size_t i = 0; i < r1.size(); i++)
        CHECK(std::memcmp(&r1[i], &r2[i], sizeof(double)) == 0);
}

TEST_SUITE_END();
