#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <moelab/theory.hpp>

using namespace moelab;

TEST_SUITE_BEGIN("theory");

TEST_CASE("bound report invariant")
{
    BoundReport r = make_report("x", 1.0, 2.0);
    CHECK(r.holds);
    CHECK(r.slack == doctest::Approx(1.0));
    r = make_report("x", 2.0, 1.0);
    CHECK_FALSE(r.holds);
    BoundReport v = vacuous_report("x", "why");
    CHECK(v.holds);
    CHECK_FALSE(report_applicable(v));
}

TEST_CASE("hungarian recovers planted permutations")
{
    // cost favors a known permutation
    const std::size_t n = 5;
    std::vector<std::size_t> sigma = { 3, 0, 4, 1, 2 };
    std::vector<std::vector<double>> cost(n, std::vector<double>(n, 1.0));
    for (std::size_t i = 0; i < n; i++)
        cost[i][sigma[i]] = 0.0;
    CHECK(hungarian_min(cost) == sigma);
}

TEST_CASE("coupling coefficient")
{
    Rng rng(1);

    SUBCASE("relabeled assignments give kappa one and recover the relabeling")
    {
        const std::size_t experts = 5, n = 200;
        std::vector<std::size_t> sigma = { 2, 4, 0, 3, 1 };
        std::vector<std::uint32_t> a(n), b(n);
        for (std::size_t i = 0; i < n; i++) {
            a[i] = static_cast<std::uint32_t>(rng.below(experts));
            b[i] = static_cast<std::uint32_t>(sigma[a[i]]);
        }
        KappaResult k = coupling_coefficient(a, b, experts);
        CHECK(k.kappa == 1.0);
        for (std::size_t e = 0; e < experts; e++)
            CHECK(k.perm[e] == sigma[e]);
    }

    SUBCASE("independent uniform assignments approach 1/E")
    {
        const std::size_t experts = 4, n = 40000;
        std::vector<std::uint32_t> a(n), b(n);
        for (std::size_t i = 0; i < n; i++) {
            a[i] = static_cast<std::uint32_t>(rng.below(experts));
            b[i] = static_cast<std::uint32_t>(rng.below(experts));
        }
        KappaResult k = coupling_coefficient(a, b, experts);
        CHECK(k.kappa > 0.25 - 0.03);
        CHECK(k.kappa < 0.25 + 0.03);
    }

    SUBCASE("hungarian equals factorial brute force exactly")
    {
        for (int trial = 0; trial < 50; trial++) {
            const std::size_t experts = 2 + rng.below(5);
            const std::size_t n = 1 + rng.below(60);
            std::vector<std::uint32_t> a(n), b(n);
            for (std::size_t i = 0; i < n; i++) {
                a[i] = static_cast<std::uint32_t>(rng.below(experts));
                b[i] = static_cast<std::uint32_t>(rng.below(experts));
            }
            KappaResult fast = coupling_coefficient(a, b, experts);
            KappaResult slow = coupling_coefficient_bruteforce(a, b, experts);
            CHECK(fast.kappa == slow.kappa);
        }
    }

    SUBCASE("kappa is invariant under relabeling either layer")
    {
        const std::size_t experts = 4, n = 300;
        std::vector<std::uint32_t> a(n), b(n);
        for (std::size_t i = 0; i < n; i++) {
            a[i] = static_cast<std::uint32_t>(rng.below(experts));
            b[i] = rng.uniform() < 0.7 ? a[i] : static_cast<std::uint32_t>(rng.below(experts));
        }
        const double base = coupling_coefficient(a, b, experts).kappa;
        std::vector<std::uint32_t> relabel = { 3, 1, 0, 2 };
        std::vector<std::uint32_t> a2(n), b2(n);
        for (std::size_t i = 0; i < n; i++) {
            a2[i] = relabel[a[i]];
            b2[i] = relabel[b[i]];
        }
        CHECK(coupling_coefficient(a2, b, experts).kappa == base);
        CHECK(coupling_coefficient(a, b2, experts).kappa == base);
    }

    SUBCASE("empty input is rejected")
    {
        CHECK_THROWS_AS(coupling_coefficient({}, {}, 4), Error);
    }
}

TEST_CASE("entropy and its corollary bound")
{
    SUBCASE("uniform and one-hot entropies")
    {
        std::vector<double> uni(8, 0.125);
        CHECK(router_entropy(uni) == doctest::Approx(std::log(8.0)).epsilon(1e-12));
        std::vector<double> hot = { 1.0, 0.0, 0.0 };
        CHECK(router_entropy(hot) == 0.0);
    }

    SUBCASE("closed-form bound value")
    {
        const double want = std::log(2.0) + 0.5 * std::log(7.0);
        CHECK(entropy_bound(0.5, 8) == doctest::Approx(want).epsilon(1e-12));
        CHECK(entropy_bound(0.5, 8) == doctest::Approx(1.6662).epsilon(1e-4));
        CHECK_THROWS_AS(entropy_bound(0.6, 8), Error);
        CHECK_THROWS_AS(entropy_bound(0.0, 8), Error);
    }

    SUBCASE("sampled decisive vectors never exceed the bound")
    {
        for (double delta : { 0.1, 0.5 }) {
            BoundReport r = check_entropy_corollary(delta, 8, 20000, 7);
            CHECK(r.holds);
            CHECK(r.context.at("violations") == "0");
        }
    }
}

TEST_CASE("weak specialization theorem checker")
{
    SUBCASE("two experts, hand-computed router gradient")
    {
        // losses (0, 1), uniform scores: dL/dz_best = ½(0 − ½) = −¼
        Tensor losses({ 1, 2 }, { 0.0, 1.0 });
        Tensor logits({ 1, 2 }, { 0.0, 0.0 });
        BoundReport r = check_sharp_routing(losses, logits, 0.5, 0.1, 0.5);
        CHECK(report_applicable(r));
        CHECK(std::stod(r.context.at("formula_max_gap")) < 1e-12);
        CHECK(r.context.at("sign_violations") == "0");
        // oracle gap = L − ℓ_best = ½
        CHECK(std::stod(r.context.at("oracle_gap_mean")) == doctest::Approx(0.5).epsilon(1e-12));
    }

    SUBCASE("one-hot routing satisfies the bound trivially")
    {
        Tensor losses({ 4, 3 });
        Tensor logits({ 4, 3 });
        for (std::size_t i = 0; i < 4; i++) {
            losses.at(i, 0) = 0.1;
            losses.at(i, 1) = 0.9;
            losses.at(i, 2) = 0.8;
            logits.at(i, 0) = 50.0;
        }
        BoundReport r = check_sharp_routing(losses, logits, 0.5, 0.0, 0.25);
        CHECK(report_applicable(r));
        CHECK(r.holds);
        CHECK(r.rhs == 1.0); // every token routes sharply to the best expert
    }

    SUBCASE("degenerate margin scale is rejected")
    {
        Tensor losses({ 1, 2 }, { 0.0, 1.0 });
        Tensor logits({ 1, 2 });
        CHECK_THROWS_AS(check_sharp_routing(losses, logits, 0.0, 0.1, 0.5), Error);
    }

    SUBCASE("tied best experts are reported as inapplicable")
    {
        Tensor losses({ 1, 2 }, { 0.3, 0.3 });
        Tensor logits({ 1, 2 });
        BoundReport r = check_sharp_routing(losses, logits, 0.1, 0.5, 0.5);
        CHECK_FALSE(report_applicable(r));
    }
}

TEST_CASE("region risk theorem checker")
{
    SUBCASE("perfect purity gives at least the full improvement")
    {
        const std::size_t n = 16;
        std::vector<double> w(n, 1.0), old_l(n, 0.8), new_l(n, 0.3);
        std::vector<bool> region(n, true);
        BoundReport r = check_region_risk(w, region, old_l, new_l, 0.01, 1.0);
        CHECK(report_applicable(r));
        CHECK(r.holds);
        // with every token in-region, the region risk drop equals Δ_e = 0.5
        CHECK(r.lhs == doctest::Approx(0.3).epsilon(1e-12));
        CHECK(r.rhs == doctest::Approx(0.8 - (0.5 - 0.01)).epsilon(1e-12));
    }

    SUBCASE("vacuous regime is flagged")
    {
        const std::size_t n = 8;
        std::vector<double> w(n, 1.0), old_l(n, 0.5), new_l(n, 0.45);
        std::vector<bool> region(n, true);
        region[0] = false;
        BoundReport r = check_region_risk(w, region, old_l, new_l, 0.2, 1.0);
        CHECK(report_applicable(r));
        CHECK(r.context.count("vacuous") == 1);
    }

    SUBCASE("violated purity precondition is inapplicable")
    {
        const std::size_t n = 8;
        std::vector<double> w(n, 1.0), old_l(n, 0.5), new_l(n, 0.1);
        std::vector<bool> region(n, false);
        region[0] = true;
        BoundReport r = check_region_risk(w, region, old_l, new_l, 0.05, 1.0);
        CHECK_FALSE(report_applicable(r));
    }
}

TEST_CASE("backward transfer checker")
{
    Rng rng(2);

    SUBCASE("perfect coupling onto the allocation has zero aligned error")
    {
        const std::size_t n = 100, experts = 4;
        LatentAllocation alloc;
        alloc.regions = experts;
        std::vector<std::uint32_t> c_l(n), c_l1(n);
        for (std::size_t i = 0; i < n; i++) {
            alloc.assign.push_back(static_cast<std::uint32_t>(rng.below(experts)));
            c_l1[i] = alloc.assign[i];
            c_l[i] = (alloc.assign[i] + 1) % experts; // fixed relabeling
        }
        BoundReport r = check_backward_transfer(c_l, c_l1, alloc);
        CHECK(r.holds);
        CHECK(r.lhs == 0.0);
        CHECK(std::stod(r.context.at("kappa")) == 1.0);
    }

    SUBCASE("constructed slack instance")
    {
        // ε_{l+1} = 0.1 and κ = 0.9 by construction on 100 tokens
        const std::size_t n = 100, experts = 4;
        LatentAllocation alloc;
        alloc.regions = experts;
        std::vector<std::uint32_t> c_l(n), c_l1(n);
        for (std::size_t i = 0; i < n; i++) {
            alloc.assign.push_back(static_cast<std::uint32_t>(i % experts));
            c_l[i] = alloc.assign[i];
            c_l1[i] = i < 90 ? alloc.assign[i] : (alloc.assign[i] + 1) % experts;
        }
        BoundReport r = check_backward_transfer(c_l, c_l1, alloc);
        CHECK(r.holds);
        CHECK(std::stod(r.context.at("kappa")) == doctest::Approx(0.9).epsilon(1e-12));
        CHECK(r.rhs == doctest::Approx(0.2).epsilon(1e-12));
        CHECK(r.lhs == 0.0);
    }
}

TEST_CASE("balanced partition")
{
    Rng rng(3);

    SUBCASE("distinct projections split into equal blocks")
    {
        Tensor tokens({ 8, 1 }, { 5, 1, 7, 3, 0, 6, 2, 4 });
        Tensor dir({ 1 }, { 1.0 });
        BalancedPartition p = balanced_partition(tokens, dir, 4);
        std::vector<std::size_t> counts(4, 0);
        for (std::size_t s : p.assign)
            counts[s]++;
        for (std::size_t c : counts)
            CHECK(c == 2);
        CHECK(p.assign[4] == 0); // projection 0
        CHECK(p.assign[2] == 3); // projection 7
    }

    SUBCASE("collinear tokens chunk in sorted order")
    {
        Tensor tokens({ 6, 2 });
        for (std::size_t i = 0; i < 6; i++) {
            tokens.at(i, 0) = static_cast<double>(i);
            tokens.at(i, 1) = 2.0 * static_cast<double>(i);
        }
        Tensor dir({ 2 }, { 1.0, 1.0 });
        BalancedPartition p = balanced_partition(tokens, dir, 3);
        CHECK(p.assign == std::vector<std::size_t>({ 0, 0, 1, 1, 2, 2 }));
    }

    SUBCASE("assignment is invariant under positive rescaling of the direction")
    {
        Tensor tokens({ 16, 4 });
        for (std::size_t i = 0; i < tokens.size(); i++)
            tokens[i] = rng.normal();
        Tensor dir({ 4 });
        for (std::size_t j = 0; j < 4; j++)
            dir[j] = rng.normal();
        Tensor dir2 = dir;
        for (std::size_t j = 0; j < 4; j++)
            dir2[j] *= 3.5;
        CHECK(balanced_partition(tokens, dir, 4).assign == balanced_partition(tokens, dir2, 4).assign);
    }

    SUBCASE("bad inputs are rejected")
    {
        Tensor tokens({ 7, 2 });
        Tensor dir({ 2 }, { 1.0, 0.0 });
        CHECK_THROWS_AS(balanced_partition(tokens, dir, 4), Error);
        Tensor zero({ 2 });
        Tensor ok({ 8, 2 });
        CHECK_THROWS_AS(balanced_partition(ok, zero, 4), Error);
    }
}

TEST_CASE("coupled balanced construction")
{
    SUBCASE("alternating pattern for B=4, E=2, k=1, L=3")
    {
        Tensor eta({ 1 }, { 1.0 });
        auto scores = construct_coupled_balanced(4, 2, 1, 3, eta);
        REQUIRE(scores.size() == 3);
        for (const Tensor &s : scores) {
            std::vector<std::size_t> loads(2, 0);
            for (std::size_t i = 0; i < 4; i++) {
                CHECK(s.at(i, i % 2) == 1.0);
                CHECK(s.at(i, (i + 1) % 2) == 0.0);
                loads[i % 2]++;
            }
            CHECK(loads[0] == 2);
            CHECK(loads[1] == 2);
        }
        CHECK(coupling_loss_value(scores, 1) == doctest::Approx(-2.0).epsilon(1e-15));
    }

    SUBCASE("loads are exactly Bk/E across layers")
    {
        Tensor eta({ 2 }, { 0.75, 0.25 });
        auto scores = construct_coupled_balanced(64, 8, 2, 3, eta);
        for (const Tensor &s : scores) {
            std::vector<std::size_t> loads(8, 0);
            for (std::size_t i = 0; i < 64; i++)
                for (std::size_t e = 0; e < 8; e++)
                    if (s.at(i, e) != 0.0)
                        loads[e]++;
            for (std::size_t l : loads)
                CHECK(l == 16);
        }
        CHECK(coupling_loss_value(scores, 2) == doctest::Approx(-2.0).epsilon(1e-13));
    }

    SUBCASE("invalid inputs are rejected")
    {
        Tensor eta({ 2 }, { 0.6, 0.6 });
        CHECK_THROWS_AS(construct_coupled_balanced(16, 4, 2, 2, eta), Error);
        Tensor ok({ 2 }, { 0.5, 0.5 });
        CHECK_THROWS_AS(construct_coupled_balanced(15, 4, 2, 2, ok), Error);
    }
}

TEST_CASE("specialization propagation checker")
{
    SUBCASE("exact transfer with zero slack parameters")
    {
        // orthogonal routers, tokens exactly on them, layers identical
        Tensor routers({ 2, 4 }, { 1, 0, 0, 0, 0, 1, 0, 0 });
        Tensor tokens({ 2, 4 }, { 1, 0, 0, 0, 0, 1, 0, 0 });
        BoundReport r = check_specialization_propagation(routers, routers, tokens, tokens, 1e-9, 1e-9, 1e-9);
        CHECK(report_applicable(r));
        CHECK(r.holds);
        CHECK(r.lhs == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("violated continuity premise is inapplicable")
    {
        Tensor routers({ 2, 4 }, { 1, 0, 0, 0, 0, 1, 0, 0 });
        Tensor tokens({ 2, 4 }, { 1, 0, 0, 0, 0, 1, 0, 0 });
        Tensor drifted({ 2, 4 }, { 0, 0, 1, 0, 0, 0, 0, 1 });
        BoundReport r = check_specialization_propagation(routers, routers, tokens, drifted, 0.05, 0.1, 0.05);
        CHECK_FALSE(report_applicable(r));
    }
}

TEST_CASE("balanced kmeans and cluster agreement")
{
    Rng rng(4);

    SUBCASE("cluster sizes are balanced")
    {
        Tensor pts({ 64, 3 });
        for (std::size_t i = 0; i < pts.size(); i++)
            pts[i] = rng.normal();
        auto labels = kmeans_balanced(pts, 4, 5);
        std::vector<std::size_t> sizes(4, 0);
        for (std::size_t l : labels)
            sizes[l]++;
        for (std::size_t s : sizes)
            CHECK(s == 16);
    }

    SUBCASE("identical representations agree fully")
    {
        Tensor pts({ 40, 4 });
        for (std::size_t i = 0; i < pts.size(); i++)
            pts[i] = rng.normal();
        CHECK(cluster_agreement(pts, pts, 4, 6) == 100.0);
    }

    SUBCASE("well-separated blobs survive an orthogonal rotation")
    {
        const std::size_t n = 80, width = 4, clusters = 4;
        Tensor pts({ n, width });
        for (std::size_t i = 0; i < n; i++)
            for (std::size_t j = 0; j < width; j++)
                pts.at(i, j) = (j == i % clusters ? 8.0 : 0.0) + 0.3 * rng.normal();
        // rotation that permutes coordinates (orthogonal)
        Tensor rot({ n, width });
        for (std::size_t i = 0; i < n; i++)
            for (std::size_t j = 0; j < width; j++)
                rot.at(i, j) = pts.at(i, (j + 1) % width);
        const double base = cluster_agreement(pts, pts, clusters, 7);
        const double rotated = cluster_agreement(pts, rot, clusters, 7);
        CHECK(rotated >= base - 5.0);
    }

    SUBCASE("independent blobs agree at chance level")
    {
        const std::size_t n = 2000, width = 4, clusters = 4;
        Tensor a({ n, width }), b({ n, width });
        for (std::size_t i = 0; i < a.size(); i++) {
            a[i] = rng.normal();
            b[i] = rng.normal();
        }
        const double agree = cluster_agreement(a, b, clusters, 8);
        CHECK(agree > 15.0);
        CHECK(agree < 40.0);
    }

    SUBCASE("fewer tokens than clusters is rejected")
    {
        Tensor a({ 2, 3 }), b({ 2, 3 });
        CHECK_THROWS_AS(cluster_agreement(a, b, 4, 9), Error);
    }
}

TEST_CASE("randomized falsification suites hold")
{
    for (const char *name : { "propagation", "sharp_routing", "region_risk", "kappa", "backward" }) {
        auto reports = run_suite(name, 20260810);
        for (const BoundReport &r : reports) {
            INFO(name << ": " << r.name);
            CHECK(r.holds);
            if (r.context.count("violations"))
                CHECK(r.context.at("violations") == "0");
        }
    }
}

TEST_SUITE_END();
