#include <moelab/theory.hpp>

#include <algorithm>
#include <cmath>

#include <moelab/rng.hpp>

// Randomized, self-generating validation suites. Each suite draws
// condition-satisfying instances, runs the corresponding validator, and
// reports either per-instance results (small suites) or an aggregate whose
// lhs/rhs come from the tightest instance seen.

namespace moelab {

namespace {

std::string fmt(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

struct Aggregate {
    BoundReport worst;
    bool have_worst = false;
    std::size_t trials = 0, violations = 0, inapplicable = 0;

    void add(const BoundReport &r)
    {
        trials++;
        if (!report_applicable(r)) {
            inapplicable++;
            return;
        }
        if (!r.holds)
            violations++;
        if (!have_worst || r.slack < worst.slack) {
            worst = r;
            have_worst = true;
        }
    }

    std::size_t applicable() const { return trials - inapplicable; }

    BoundReport finish(const std::string &name) const
    {
        if (!have_worst) {
            BoundReport r = vacuous_report(name, "no applicable instance generated");
            r.context["trials"] = std::to_string(trials);
            return r;
        }
        BoundReport r = worst;
        r.name = name;
        r.context["trials"] = std::to_string(trials);
        r.context["violations"] = std::to_string(violations);
        r.context["inapplicable"] = std::to_string(inapplicable);
        return r;
    }
};

std::vector<double> gaussian_vec(Rng &rng, std::size_t n, double scale = 1.0)
{
    std::vector<double> v(n);
    for (double &x : v)
        x = scale * rng.normal();
    return v;
}

void normalize(std::vector<double> &v)
{
    double n = 0.0;
    for (double x : v)
        n += x * x;
    n = std::sqrt(n);
    if (n > 0.0)
        for (double &x : v)
            x /= n;
}

// random orthonormal set via Gram-Schmidt on gaussian draws
std::vector<std::vector<double>> orthonormal_set(Rng &rng, std::size_t count, std::size_t dim)
{
    std::vector<std::vector<double>> basis;
    while (basis.size() < count) {
        auto v = gaussian_vec(rng, dim);
        for (const auto &b : basis) {
            double d = 0.0;
            for (std::size_t j = 0; j < dim; j++)
                d += v[j] * b[j];
            for (std::size_t j = 0; j < dim; j++)
                v[j] -= d * b[j];
        }
        double n = 0.0;
        for (double x : v)
            n += x * x;
        if (n < 1e-8)
            continue;
        normalize(v);
        basis.push_back(std::move(v));
    }
    return basis;
}

double cos_vecs(const std::vector<double> &a, const std::vector<double> &b)
{
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < a.size(); j++) {
        d += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    return d / std::sqrt(na * nb);
}

Tensor rows_to_tensor(const std::vector<std::vector<double>> &rows)
{
    Tensor t({ rows.size(), rows[0].size() });
    for (std::size_t i = 0; i < rows.size(); i++)
        for (std::size_t j = 0; j < rows[i].size(); j++)
            t.at(i, j) = rows[i][j];
    return t;
}

// ----- individual suites -----

std::vector<BoundReport> suite_alignment(std::uint64_t seed)
{
    std::vector<BoundReport> reports;
    Rng rng(seed);
    const std::size_t experts_opts[] = { 4, 8 };
    const std::size_t k_opts[] = { 2, 3 };
    const std::size_t h_opts[] = { 8, 16 };
    const std::size_t ffn_opts[] = { 16, 32 };
    for (int i = 0; i < 50; i++) {
        MoeConfig cfg;
        cfg.experts = experts_opts[rng.below(2)];
        cfg.top_k = k_opts[rng.below(2)];
        cfg.layers = 1 + rng.below(3);
        cfg.hidden = h_opts[rng.below(2)];
        cfg.ffn = ffn_opts[rng.below(2)];
        cfg.vocab = 32;
        cfg.shared_expert = rng.below(2) == 0;
        Rng init = rng.fork(1000 + static_cast<std::uint64_t>(i));
        MoeModel model = MoeModel::init(cfg, init);
        const auto token = static_cast<std::uint32_t>(rng.below(cfg.vocab));
        BoundReport r = check_gradient_alignment(model, token, LossWeights{});
        r.context["config"] = "E=" + std::to_string(cfg.experts) + ",k=" + std::to_string(cfg.top_k) +
                              ",L=" + std::to_string(cfg.layers) + ",h=" + std::to_string(cfg.hidden) +
                              ",ffn=" + std::to_string(cfg.ffn);
        reports.push_back(std::move(r));
    }
    return reports;
}

std::vector<BoundReport> suite_propagation(std::uint64_t seed)
{
    Aggregate agg;
    Rng rng(seed);
    // keep drawing until 1000 instances satisfy every premise
    for (int trial = 0; trial < 3000 && agg.applicable() < 1000; trial++) {
        const std::size_t experts = 3 + rng.below(4); // 3..6 tokens, one expert each
        const std::size_t dim = 16;
        auto basis = orthonormal_set(rng, experts, dim);

        const double router_noise = rng.range(0.0, 0.12);
        const double token_noise = rng.range(0.0, 0.10);
        const double drift_noise = rng.range(0.0, 0.15);

        std::vector<std::vector<double>> r_l, x_l, x_l1, r_l1;
        for (std::size_t e = 0; e < experts; e++) {
            auto r = basis[e];
            auto p = gaussian_vec(rng, dim, router_noise / std::sqrt(static_cast<double>(dim)));
            for (std::size_t j = 0; j < dim; j++)
                r[j] += p[j];
            normalize(r);
            r_l.push_back(r);

            auto x = r;
            p = gaussian_vec(rng, dim, token_noise / std::sqrt(static_cast<double>(dim)));
            for (std::size_t j = 0; j < dim; j++)
                x[j] += p[j];
            normalize(x);
            x_l.push_back(x);

            auto x1 = x;
            p = gaussian_vec(rng, dim, drift_noise / std::sqrt(static_cast<double>(dim)));
            for (std::size_t j = 0; j < dim; j++)
                x1[j] += p[j];
            normalize(x1);
            x_l1.push_back(x1);

            auto r1 = x1;
            p = gaussian_vec(rng, dim, token_noise / std::sqrt(static_cast<double>(dim)));
            for (std::size_t j = 0; j < dim; j++)
                r1[j] += p[j];
            normalize(r1);
            r_l1.push_back(r1);
        }

        // measured premise magnitudes of this construction (+ tiny slack)
        double delta = 0.0, iota = 0.0, epsilon = 0.0;
        for (std::size_t i = 0; i < experts; i++) {
            delta = std::max(delta, std::sqrt(std::max(0.0, 1.0 - cos_vecs(x_l[i], x_l1[i]))));
            iota = std::max(iota, std::sqrt(std::max(0.0, 1.0 - cos_vecs(x_l[i], r_l[i]))));
            iota = std::max(iota, std::sqrt(std::max(0.0, 1.0 - cos_vecs(x_l1[i], r_l1[i]))));
            for (std::size_t j = i + 1; j < experts; j++)
                epsilon = std::max(epsilon, std::abs(cos_vecs(r_l[i], r_l[j])));
        }
        BoundReport r = check_specialization_propagation(rows_to_tensor(r_l), rows_to_tensor(r_l1),
                                                rows_to_tensor(x_l), rows_to_tensor(x_l1),
                                                delta + 1e-9, epsilon + 1e-9, iota + 1e-9);
        agg.add(r);
    }
    return { agg.finish("propagation.router_specialization") };
}

std::vector<BoundReport> suite_entropy(std::uint64_t seed)
{
    std::vector<BoundReport> reports;
    int stream = 0;
    for (double delta : { 0.1, 0.25, 0.5 })
        for (std::size_t experts : { 4u, 8u, 16u }) {
            BoundReport r = check_entropy_corollary(delta, experts, 100000,
                                                    Rng(seed).fork(70 + stream).seed());
            reports.push_back(std::move(r));
            stream++;
        }
    return reports;
}

std::vector<BoundReport> suite_sharp_routing(std::uint64_t seed)
{
    Aggregate bound_agg, formula_agg;
    Rng rng(seed);
    const double deltas[] = { 0.1, 0.25, 0.5 };
    for (int trial = 0; trial < 1000; trial++) {
        const std::size_t experts = 2 + rng.below(5);
        const std::size_t n = 64;
        const double gamma0 = 0.2;
        const double sharpness = rng.range(0.0, 8.0);

        Tensor losses({ n, experts });
        Tensor logits({ n, experts });
        std::size_t margin_ok = 0;
        for (std::size_t i = 0; i < n; i++) {
            const auto best = static_cast<std::size_t>(rng.below(experts));
            const double base = rng.range(0.0, 0.5);
            const bool good = rng.uniform() < 0.95;
            if (good)
                margin_ok++;
            for (std::size_t e = 0; e < experts; e++) {
                if (e == best) {
                    losses.at(i, e) = base;
                } else {
                    const double margin = good ? gamma0 + rng.range(0.0, 0.5)
                                               : 1e-3 + rng.range(0.0, gamma0 - 1e-3);
                    losses.at(i, e) = base + margin;
                }
                logits.at(i, e) = rng.normal() - sharpness * losses.at(i, e);
            }
        }
        const double eps0 = 1.0 - static_cast<double>(margin_ok) / static_cast<double>(n) + 1e-12;
        const double delta = deltas[trial % 3];
        BoundReport r = check_sharp_routing(losses, logits, gamma0, eps0, delta);
        bound_agg.add(r);
        if (report_applicable(r))
            formula_agg.add(make_report("sharp_routing.gradient_formula",
                                        std::stod(r.context.at("formula_max_gap")), 1e-10,
                                        { { "sign_violations", r.context.at("sign_violations") } }));
    }
    return { bound_agg.finish("sharp_routing.sharpness"), formula_agg.finish("sharp_routing.gradient_formula") };
}

std::vector<BoundReport> suite_region_risk(std::uint64_t seed)
{
    Aggregate agg;
    Rng rng(seed);
    // non-vacuous condition-satisfying instances only; 1000 of them
    for (int trial = 0; trial < 3000 && agg.applicable() < 1000; trial++) {
        const std::size_t n = 128;
        std::vector<double> weights(n), old_losses(n), new_losses(n);
        std::vector<bool> region(n);
        for (std::size_t i = 0; i < n; i++) {
            region[i] = rng.uniform() < 0.9;
            weights[i] = region[i] ? 0.5 + rng.uniform() : 0.05 * rng.uniform();
            old_losses[i] = 0.4 + 0.6 * rng.uniform();
            new_losses[i] = old_losses[i] * rng.range(0.0, 0.3);
        }
        // at least one token on each side keeps alpha interior
        region[0] = true;
        region[1] = false;
        weights[1] = std::max(weights[1], 0.01);

        double wsum = 0.0, alpha = 0.0;
        for (std::size_t i = 0; i < n; i++)
            wsum += weights[i];
        for (std::size_t i = 0; i < n; i++)
            if (region[i])
                alpha += weights[i] / wsum;
        const double eta = std::min(0.95, 1.0 - alpha + 0.02 + 0.05 * rng.uniform());

        BoundReport r = check_region_risk(weights, region, old_losses, new_losses, eta, 1.0);
        // keep the falsification pool to non-vacuous instances
        if (r.context.count("vacuous"))
            continue;
        agg.add(r);
    }
    return { agg.finish("region_risk.improvement") };
}

std::vector<BoundReport> suite_kappa(std::uint64_t seed)
{
    Aggregate agg;
    Rng rng(seed);
    for (int trial = 0; trial < 200; trial++) {
        const std::size_t experts = 2 + rng.below(5); // 2..6
        const std::size_t n = 1 + rng.below(200);
        std::vector<std::uint32_t> a(n), b(n);
        for (std::size_t i = 0; i < n; i++) {
            a[i] = static_cast<std::uint32_t>(rng.below(experts));
            b[i] = static_cast<std::uint32_t>(rng.below(experts));
        }
        KappaResult fast = coupling_coefficient(a, b, experts);
        KappaResult slow = coupling_coefficient_bruteforce(a, b, experts);
        agg.add(make_report("kappa.oracle_equivalence", std::abs(fast.kappa - slow.kappa), 0.0,
                            { { "experts", std::to_string(experts) },
                              { "tokens", std::to_string(n) },
                              { "exact", fast.kappa == slow.kappa ? "true" : "false" } }));
    }
    return { agg.finish("kappa.oracle_equivalence") };
}

std::vector<BoundReport> suite_backward(std::uint64_t seed)
{
    Aggregate agg;
    Rng rng(seed);
    for (int trial = 0; trial < 10000; trial++) {
        const std::size_t experts = 2 + rng.below(5);
        const std::size_t n = 1 + rng.below(300);
        LatentAllocation alloc;
        alloc.regions = experts;
        alloc.assign.resize(n);
        std::vector<std::uint32_t> c_l(n), c_l1(n);
        const bool correlated = rng.below(2) == 0;
        std::vector<std::uint32_t> relabel(experts);
        for (std::size_t e = 0; e < experts; e++)
            relabel[e] = static_cast<std::uint32_t>((e + 1) % experts);
        for (std::size_t i = 0; i < n; i++) {
            alloc.assign[i] = static_cast<std::uint32_t>(rng.below(experts));
            if (correlated) {
                c_l1[i] = rng.uniform() < 0.85 ? alloc.assign[i]
                                               : static_cast<std::uint32_t>(rng.below(experts));
                c_l[i] = rng.uniform() < 0.85 ? relabel[c_l1[i]]
                                              : static_cast<std::uint32_t>(rng.below(experts));
            } else {
                c_l[i] = static_cast<std::uint32_t>(rng.below(experts));
                c_l1[i] = static_cast<std::uint32_t>(rng.below(experts));
            }
        }
        agg.add(check_backward_transfer(c_l, c_l1, alloc));
    }
    return { agg.finish("coupling.backward_transfer") };
}

std::vector<BoundReport> suite_partition(std::uint64_t seed)
{
    Aggregate agg;
    Rng rng(seed);
    for (int trial = 0; trial < 100; trial++) {
        const std::size_t batch = 64, experts = 8, width = 16;
        Tensor tokens({ batch, width });
        for (std::size_t i = 0; i < tokens.size(); i++)
            tokens[i] = rng.normal();
        Tensor direction({ width });
        for (std::size_t j = 0; j < width; j++)
            direction[j] = rng.normal();

        BalancedPartition part = balanced_partition(tokens, direction, experts);

        std::size_t violations = 0;
        std::vector<std::size_t> counts(experts, 0);
        for (std::size_t s : part.assign)
            counts[s]++;
        for (std::size_t c : counts)
            if (c != batch / experts)
                violations++;

        // interval property: along the projection order the slab index never
        // decreases, and thresholds separate adjacent blocks
        std::vector<double> proj(batch);
        for (std::size_t i = 0; i < batch; i++) {
            double d = 0.0;
            for (std::size_t j = 0; j < width; j++)
                d += tokens.at(i, j) * direction[j];
            proj[i] = d;
        }
        std::vector<std::size_t> order(batch);
        for (std::size_t i = 0; i < batch; i++)
            order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (proj[a] != proj[b])
                return proj[a] < proj[b];
            return a < b;
        });
        for (std::size_t pos = 1; pos < batch; pos++)
            if (part.assign[order[pos]] < part.assign[order[pos - 1]])
                violations++;
        for (std::size_t c = 1; c < experts; c++) {
            const double lo = proj[order[c * (batch / experts) - 1]];
            const double hi = proj[order[c * (batch / experts)]];
            const double t = part.thresholds[c - 1];
            if (lo < hi && !(lo < t && t < hi))
                violations++;
            if (lo > hi)
                violations++;
        }
        agg.add(make_report("partition.balanced_slabs", static_cast<double>(violations), 0.0,
                            { { "batch", std::to_string(batch) } }));
    }
    return { agg.finish("partition.balanced_slabs") };
}

std::vector<BoundReport> suite_construct(std::uint64_t /*seed*/)
{
    std::vector<BoundReport> reports;
    struct Case {
        std::size_t batch, experts, top_k, layers;
    };
    for (const Case &c : { Case{ 4, 2, 1, 3 }, Case{ 16, 4, 2, 4 }, Case{ 64, 8, 2, 3 } }) {
        Tensor eta({ c.top_k });
        eta.fill(1.0 / static_cast<double>(c.top_k));
        auto scores = construct_coupled_balanced(c.batch, c.experts, c.top_k, c.layers, eta);

        const double cp = coupling_loss_value(scores, c.top_k);
        const double target = -static_cast<double>(c.layers - 1);
        std::map<std::string, std::string> ctx = { { "batch", std::to_string(c.batch) },
                                                   { "experts", std::to_string(c.experts) },
                                                   { "top_k", std::to_string(c.top_k) },
                                                   { "layers", std::to_string(c.layers) },
                                                   { "cp_per_token", fmt(cp) } };
        reports.push_back(make_report("construct.coupling_optimal", std::abs(cp - target), 1e-12, ctx));

        std::size_t max_dev = 0;
        for (const Tensor &s : scores) {
            std::vector<std::size_t> loads(c.experts, 0);
            for (std::size_t i = 0; i < c.batch; i++)
                for (std::size_t e = 0; e < c.experts; e++)
                    if (s.at(i, e) != 0.0)
                        loads[e]++;
            const std::size_t want = c.batch * c.top_k / c.experts;
            for (std::size_t l : loads)
                max_dev = std::max(max_dev, l > want ? l - want : want - l);
        }
        reports.push_back(
                make_report("construct.exact_balance", static_cast<double>(max_dev), 0.0, std::move(ctx)));
    }
    return reports;
}

std::vector<BoundReport> suite_cluster(std::uint64_t seed)
{
    std::vector<BoundReport> reports;
    Rng rng(seed);
    const std::size_t n = 256, width = 8, clusters = 4;

    Tensor reps({ n, width });
    for (std::size_t i = 0; i < n; i++) {
        const std::size_t blob = i % clusters;
        for (std::size_t j = 0; j < width; j++)
            reps.at(i, j) = (j == blob ? 6.0 : 0.0) + rng.normal();
    }
    const double same = cluster_agreement(reps, reps, clusters, 11);
    reports.push_back(make_report("cluster.identity_agreement", 100.0 - same, 0.0,
                                  { { "agreement_percent", fmt(same) } }));

    Tensor other({ n, width });
    for (std::size_t i = 0; i < other.size(); i++)
        other[i] = rng.normal();
    const double indep = cluster_agreement(reps, other, clusters, 11);
    reports.push_back(make_report("cluster.independent_agreement",
                                  std::abs(indep - 100.0 / static_cast<double>(clusters)), 14.0,
                                  { { "agreement_percent", fmt(indep) } }));
    return reports;
}

} // namespace

std::vector<std::string> suite_names()
{
    return { "alignment",  "propagation",    "entropy",   "sharp_routing", "region_risk",
             "kappa",  "backward", "partition", "construct", "cluster" };
}

std::vector<BoundReport> run_suite(const std::string &name, std::uint64_t seed)
{
    if (name == "alignment")
        return suite_alignment(seed);
    if (name == "propagation")
        return suite_propagation(seed);
    if (name == "entropy")
        return suite_entropy(seed);
    if (name == "sharp_routing")
        return suite_sharp_routing(seed);
    if (name == "region_risk")
        return suite_region_risk(seed);
    if (name == "kappa")
        return suite_kappa(seed);
    if (name == "backward")
        return suite_backward(seed);
    if (name == "partition")
        return suite_partition(seed);
    if (name == "construct")
        return suite_construct(seed);
    if (name == "cluster")
        return suite_cluster(seed);
    if (name == "all") {
        std::vector<BoundReport> all;
        for (const std::string &s : suite_names()) {
            auto part = run_suite(s, seed);
            all.insert(all.end(), part.begin(), part.end());
        }
        return all;
    }
    fail("unknown check suite: " + name);
}

} // namespace moelab
