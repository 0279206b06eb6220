#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <moelab/losses.hpp>
#include <moelab/theory.hpp>

#include "fd_check.hpp"

using namespace moelab;

namespace {

MoeConfig config(std::size_t experts, std::size_t top_k, std::size_t layers, std::size_t hidden,
                 std::size_t ffn, std::size_t vocab)
{
    MoeConfig cfg;
    cfg.experts = experts;
    cfg.top_k = top_k;
    cfg.layers = layers;
    cfg.hidden = hidden;
    cfg.ffn = ffn;
    cfg.vocab = vocab;
    return cfg;
}

Tensor random_tensor(Rng &rng, std::vector<std::size_t> shape)
{
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); i++)
        t[i] = rng.normal();
    return t;
}

// literal three-deep loop over Eq-style terms, written independently of the
// production path
double coupling_bruteforce(const std::vector<Tensor> &scores, std::size_t k)
{
    if (scores.size() < 2)
        return 0.0;
    const std::size_t batch = scores[0].rows(), experts = scores[0].cols();
    double total = 0.0;
    for (std::size_t i = 0; i < batch; i++)
        for (std::size_t l = 0; l + 1 < scores.size(); l++)
            for (std::size_t e = 0; e < experts; e++) {
                // rank next-layer partners by joint probability, ties to the
                // lowest index
                std::vector<std::size_t> order(experts);
                std::iota(order.begin(), order.end(), std::size_t{ 0 });
                std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                    const double ja = scores[l].at(i, e) * scores[l + 1].at(i, a);
                    const double jb = scores[l].at(i, e) * scores[l + 1].at(i, b);
                    if (ja != jb)
                        return ja > jb;
                    return a < b;
                });
                for (std::size_t r = 0; r < k; r++)
                    total += scores[l].at(i, e) * scores[l + 1].at(i, order[r]);
            }
    return -total / static_cast<double>(batch);
}

double sp_bruteforce(const std::vector<LayerOutput> &louts)
{
    const std::size_t batch = louts[0].active.size();
    double total = 0.0;
    for (const LayerOutput &lo : louts)
        for (std::size_t i = 0; i < batch; i++)
            for (std::size_t a = 0; a < lo.active[i].size(); a++)
                for (std::size_t b = a + 1; b < lo.active[i].size(); b++) {
                    auto za = lo.z_activation(i, a);
                    auto zb = lo.z_activation(i, b);
                    double d = 0.0, na = 0.0, nb = 0.0;
                    for (std::size_t j = 0; j < za.size(); j++) {
                        d += za[j] * zb[j];
                        na += za[j] * za[j];
                        nb += zb[j] * zb[j];
                    }
                    const double c = d / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
                    total += c * c;
                }
    return total / static_cast<double>(batch);
}

// fabricate a layer output with given per-token slot activations (slot s of
// every token maps to expert s), for closed-form cases
LayerOutput fabricate(Graph &g, const std::vector<std::vector<Tensor>> &zs, std::size_t experts)
{
    LayerOutput lo;
    const std::size_t batch = zs.size();
    const std::size_t slots = zs[0].size();
    Tensor scores({ batch, experts });
    scores.fill(1.0 / static_cast<double>(experts));
    lo.scores = g.constant(scores);
    lo.logits = g.constant(Tensor({ batch, experts }));
    lo.active.resize(batch);
    lo.expert_z.resize(experts);
    lo.expert_rows.resize(experts);
    lo.slot_pos.assign(batch, std::vector<std::size_t>(slots, 0));
    for (std::size_t s = 0; s < slots; s++) {
        const std::size_t width = zs[0][s].size();
        Tensor block({ batch, width });
        for (std::size_t i = 0; i < batch; i++)
            for (std::size_t j = 0; j < width; j++)
                block.at(i, j) = zs[i][s][j];
        lo.expert_z[s] = g.constant(std::move(block));
        for (std::size_t i = 0; i < batch; i++) {
            lo.active[i].push_back(s);
            lo.slot_pos[i][s] = i;
            lo.expert_rows[s].push_back(i);
        }
    }
    lo.y = g.constant(Tensor({ batch, 1 }));
    return lo;
}

} // namespace

TEST_SUITE_BEGIN("losses");

TEST_CASE("specialization loss closed forms")
{
    SUBCASE("top-1 routing has no pairs")
    {
        MoeConfig cfg = config(4, 1, 2, 8, 16, 16);
        Rng rng(1);
        MoeModel model = MoeModel::init(cfg, rng);
        Graph g;
        ForwardResult fwd = model_forward(g, model, { 3, 7, 11 });
        CHECK(specialization_loss(g, fwd.layer_outputs).value().item() == 0.0);
    }

    SUBCASE("identical activations contribute one per token per layer")
    {
        Graph g;
        Tensor z({ 3 }, { 1.0, -2.0, 0.5 });
        std::vector<std::vector<Tensor>> zs = { { z, z }, { z, z } };
        std::vector<LayerOutput> louts = { fabricate(g, zs, 4), fabricate(g, zs, 4) };
        CHECK(specialization_loss(g, louts).value().item() == doctest::Approx(2.0).epsilon(1e-12));
    }

    SUBCASE("orthogonal activations contribute nothing")
    {
        Graph g;
        Tensor a({ 2 }, { 1.0, 0.0 });
        Tensor b({ 2 }, { 0.0, 1.0 });
        std::vector<std::vector<Tensor>> zs = { { a, b } };
        std::vector<LayerOutput> louts = { fabricate(g, zs, 4) };
        CHECK(specialization_loss(g, louts).value().item() == 0.0);
    }

    SUBCASE("random case matches the double-loop oracle")
    {
        MoeConfig cfg = config(4, 3, 2, 8, 16, 16);
        Rng rng(2);
        MoeModel model = MoeModel::init(cfg, rng);
        Graph g;
        ForwardResult fwd = model_forward(g, model, { 1, 5, 9, 13 });
        const double got = specialization_loss(g, fwd.layer_outputs).value().item();
        CHECK(got == doctest::Approx(sp_bruteforce(fwd.layer_outputs)).epsilon(1e-12));
    }
}

TEST_CASE("specialization loss stays inside its range")
{
    Rng rng(3);
    for (int trial = 0; trial < 10; trial++) {
        MoeConfig cfg = config(4, 1 + rng.below(4), 2, 8, 16, 16);
        MoeModel model = MoeModel::init(cfg, rng);
        Graph g;
        ForwardResult fwd = model_forward(g, model, { 0, 3, 8, 15 });
        const double sp = specialization_loss(g, fwd.layer_outputs).value().item();
        const double cap = static_cast<double>(cfg.layers * cfg.top_k * (cfg.top_k - 1)) / 2.0;
        CHECK(sp >= 0.0);
        CHECK(sp <= cap + 1e-12);
    }
}

TEST_CASE("coupling loss closed forms and bounds")
{
    SUBCASE("uniform scores, L=2, E=4, k=2 give -1/2 per token")
    {
        Graph g;
        Tensor uni({ 3, 4 });
        uni.fill(0.25);
        std::vector<Var> scores = { g.constant(uni), g.constant(uni) };
        CouplingLoss cp = coupling_loss(g, scores, 2);
        CHECK(cp.defined);
        CHECK(cp.value.value().item() == doctest::Approx(-0.5).epsilon(1e-12));
    }

    SUBCASE("single layer is zero with the warning flag")
    {
        Graph g;
        Tensor uni({ 2, 4 });
        uni.fill(0.25);
        CouplingLoss cp = coupling_loss(g, { g.constant(uni) }, 2);
        CHECK_FALSE(cp.defined);
        CHECK(cp.value.value().item() == 0.0);
    }

    SUBCASE("random softmax scores match the brute-force enumeration and the bound")
    {
        Rng rng(4);
        for (int trial = 0; trial < 20; trial++) {
            const std::size_t layers = 2 + rng.below(3);
            const std::size_t experts = 2 + rng.below(5);
            const std::size_t k = 1 + rng.below(experts);
            const std::size_t batch = 1 + rng.below(6);
            std::vector<Tensor> mats;
            Graph g;
            std::vector<Var> vars;
            for (std::size_t l = 0; l < layers; l++) {
                Var q = g.constant(random_tensor(rng, { batch, experts }));
                Var s = softmax_rows(q);
                vars.push_back(s);
                mats.push_back(s.value());
            }
            CouplingLoss cp = coupling_loss(g, vars, k);
            const double brute = coupling_bruteforce(mats, k);
            CHECK(cp.value.value().item() == doctest::Approx(brute).epsilon(1e-12));
            CHECK(coupling_loss_value(mats, k) == doctest::Approx(brute).epsilon(1e-12));
            CHECK(cp.value.value().item() >= -static_cast<double>(layers - 1) - 1e-12);
            CHECK(cp.value.value().item() <= 0.0);
        }
    }

    SUBCASE("constructed routing attains the optimum")
    {
        Tensor eta({ 2 });
        eta.fill(0.5);
        auto scores = construct_coupled_balanced(16, 4, 2, 4, eta);
        CHECK(coupling_loss_value(scores, 2) == doctest::Approx(-3.0).epsilon(1e-12));
    }
}

TEST_CASE("load balance loss")
{
    SUBCASE("uniform scores and loads give exactly one")
    {
        Graph g;
        Tensor scores({ 8, 4 });
        scores.fill(0.25);
        std::vector<std::vector<std::size_t>> active(8);
        for (std::size_t i = 0; i < 8; i++)
            active[i] = { i % 4, (i + 1) % 4 };
        CHECK(load_balance_loss(g, g.constant(scores), active).value().item() ==
              doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("full concentration gives E")
    {
        Graph g;
        Tensor scores({ 4, 4 });
        for (std::size_t i = 0; i < 4; i++)
            scores.at(i, 0) = 1.0;
        std::vector<std::vector<std::size_t>> active(4, std::vector<std::size_t>{ 0 });
        CHECK(load_balance_loss(g, g.constant(scores), active).value().item() ==
              doctest::Approx(4.0).epsilon(1e-12));
    }

    SUBCASE("random case matches the double-loop oracle")
    {
        Rng rng(5);
        const std::size_t batch = 64, experts = 8, k = 2;
        Graph g;
        Var s = softmax_rows(g.constant(random_tensor(rng, { batch, experts })));
        std::vector<std::vector<std::size_t>> active(batch);
        for (auto &set : active) {
            while (set.size() < k) {
                const std::size_t e = rng.below(experts);
                if (std::find(set.begin(), set.end(), e) == set.end())
                    set.push_back(e);
            }
        }
        double want = 0.0;
        for (std::size_t e = 0; e < experts; e++) {
            double f = 0.0;
            for (const auto &set : active)
                for (std::size_t a : set)
                    if (a == e)
                        f += 1.0;
            f /= static_cast<double>(batch * k);
            double p = 0.0;
            for (std::size_t i = 0; i < batch; i++)
                p += s.value().at(i, e);
            p /= static_cast<double>(batch);
            want += f * p;
        }
        want *= static_cast<double>(experts);
        CHECK(load_balance_loss(g, s, active).value().item() == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("router z loss")
{
    SUBCASE("zero logits give squared log of E")
    {
        Graph g;
        Tensor q({ 5, 8 });
        const double want = std::log(8.0) * std::log(8.0);
        CHECK(z_loss(g, { g.constant(q) }).value().item() == doctest::Approx(want).epsilon(1e-12));
    }

    SUBCASE("a logit shift changes the value")
    {
        Graph g;
        Rng rng(6);
        Tensor q = random_tensor(rng, { 4, 6 });
        Tensor qs = q;
        for (std::size_t i = 0; i < qs.size(); i++)
            qs[i] += 2.0;
        const double a = z_loss(g, { g.constant(q) }).value().item();
        const double b = z_loss(g, { g.constant(qs) }).value().item();
        CHECK(std::abs(a - b) > 1e-6);
    }

    SUBCASE("random case matches direct evaluation")
    {
        Graph g;
        Rng rng(7);
        Tensor q1 = random_tensor(rng, { 3, 5 });
        Tensor q2 = random_tensor(rng, { 3, 5 });
        double want = 0.0;
        for (const Tensor *q : { &q1, &q2 })
            for (std::size_t i = 0; i < 3; i++) {
                double denom = 0.0;
                for (std::size_t e = 0; e < 5; e++)
                    denom += std::exp(q->at(i, e));
                want += std::log(denom) * std::log(denom);
            }
        want /= 6.0;
        const double got = z_loss(g, { g.constant(q1), g.constant(q2) }).value().item();
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("total loss composition")
{
    MoeConfig cfg = config(4, 2, 2, 8, 16, 16);
    Rng rng(8);
    MoeModel model = MoeModel::init(cfg, rng);
    std::vector<std::uint32_t> tokens = { 2, 6, 10 };
    std::vector<std::uint32_t> targets = { 6, 10, 2 };

    SUBCASE("zero weights collapse to the task loss")
    {
        Graph g;
        ForwardResult fwd = model_forward(g, model, tokens);
        LossWeights w{ 0, 0, 0, 0 };
        LossBundle bundle = total_loss(g, fwd.logits, targets, fwd.layer_outputs, w, cfg.top_k);
        CHECK(bundle.values.total == bundle.values.task);
    }

    SUBCASE("top-1 routing makes the sp term vanish")
    {
        MoeConfig c1 = cfg;
        c1.top_k = 1;
        Rng r2(9);
        MoeModel m1 = MoeModel::init(c1, r2);
        Graph g;
        ForwardResult fwd = model_forward(g, m1, tokens);
        LossWeights w{ 0, 0, 1.0, 0 };
        LossBundle bundle = total_loss(g, fwd.logits, targets, fwd.layer_outputs, w, c1.top_k);
        CHECK(bundle.values.sp == 0.0);
        CHECK(bundle.values.total == bundle.values.task);
    }

    SUBCASE("defaults equal the hand-composed weighted sum in the same order")
    {
        Graph g;
        ForwardResult fwd = model_forward(g, model, tokens);
        LossWeights w;
        LossBundle bundle = total_loss(g, fwd.logits, targets, fwd.layer_outputs, w, cfg.top_k);
        double total = bundle.values.task;
        total = total + w.lambda_lb * bundle.values.lb;
        total = total + w.lambda_z * bundle.values.z;
        total = total + w.lambda_sp * bundle.values.sp;
        total = total + w.lambda_cp * bundle.values.cp;
        CHECK(bundle.values.total == total);
    }
}

TEST_CASE("full objective gradients match finite differences on a small config")
{
    Rng rng(10);
    MoeConfig cfg = config(4, 2, 2, 8, 16, 16);
    MoeModel model = MoeModel::init(cfg, rng);
    std::vector<std::uint32_t> tokens = { 0, 5, 9 };
    std::vector<std::uint32_t> targets = { 5, 9, 0 };
    LossWeights w;
    auto rep = fd::compare(model.parameters(), [&](Graph &g) {
        ForwardResult fwd = model_forward(g, model, tokens);
        return total_loss(g, fwd.logits, targets, fwd.layer_outputs, w, cfg.top_k).total;
    });
    CHECK(rep.max_rel < 1e-5);
}

TEST_CASE("gradient alignment identity on actual backward passes")
{
    Rng rng(11);
    for (int trial = 0; trial < 5; trial++) {
        MoeConfig cfg = config(4 + 4 * rng.below(2), 2 + rng.below(2), 2, 8, 16, 16);
        Rng init = rng.fork(trial);
        MoeModel model = MoeModel::init(cfg, init);
        BoundReport r = check_gradient_alignment(
                model, static_cast<std::uint32_t>(rng.below(cfg.vocab)), LossWeights{});
        CHECK(report_applicable(r));
        CHECK(r.holds);
    }
}

TEST_CASE("pure coupling descent raises top-k routing mass")
{
    MoeConfig cfg = config(4, 2, 3, 8, 16, 16);
    Rng rng(12);
    MoeModel model = MoeModel::init(cfg, rng);
    std::vector<std::uint32_t> tokens;
    for (int i = 0; i < 16; i++)
        tokens.push_back(static_cast<std::uint32_t>(rng.below(cfg.vocab)));

    auto topk_mass = [&](const std::vector<LayerOutput> &louts) {
        double mass = 0.0;
        std::size_t n = 0;
        for (const LayerOutput &lo : louts)
            for (std::size_t i = 0; i < lo.active.size(); i++) {
                for (std::size_t e : lo.active[i])
                    mass += lo.scores.value().at(i, e);
                n++;
            }
        return mass / static_cast<double>(n);
    };

    const double lr = 0.05;
    int non_monotone = 0;
    double prev = -1.0;
    for (int step = 0; step < 200; step++) {
        model.zero_grads();
        Graph g;
        ForwardResult fwd = model_forward(g, model, tokens);
        CouplingLoss cp = coupling_loss(g, fwd.layer_outputs, cfg.top_k);
        g.backward(cp.value);
        const double mass = topk_mass(fwd.layer_outputs);
        if (prev >= 0.0 && mass < prev)
            non_monotone++;
        prev = mass;
        // experts frozen: only the routers descend
        for (MoeLayer &layer : model.layers)
            for (std::size_t i = 0; i < layer.routers.value.size(); i++)
                layer.routers.value[i] -= lr * layer.routers.grad[i];
    }
    CHECK(non_monotone <= 10); // 5% of 200 steps
}

TEST_SUITE_END();
