#include <moelab/theory.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <moelab/rng.hpp>

namespace moelab {

BoundReport make_report(std::string name, double lhs, double rhs,
                        std::map<std::string, std::string> context)
{
    BoundReport r;
    r.name = std::move(name);
    r.lhs = lhs;
    r.rhs = rhs;
    r.slack = rhs - lhs;
    r.holds = lhs <= rhs + BoundReport::kTol;
    r.context = std::move(context);
    return r;
}

BoundReport vacuous_report(std::string name, const std::string &reason,
                           std::map<std::string, std::string> context)
{
    context["applicable"] = "false";
    context["reason"] = reason;
    return make_report(std::move(name), 0.0, 0.0, std::move(context));
}

bool report_applicable(const BoundReport &r)
{
    auto it = r.context.find("applicable");
    return it == r.context.end() || it->second != "false";
}

namespace {

double dot_span(std::span<const double> a, std::span<const double> b)
{
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); i++)
        s += a[i] * b[i];
    return s;
}

double norm_span(std::span<const double> a)
{
    return std::sqrt(dot_span(a, a));
}

double cosine_value(std::span<const double> a, std::span<const double> b)
{
    const double na = norm_span(a), nb = norm_span(b);
    if (na < 1e-12 || nb < 1e-12)
        return 0.0;
    return std::clamp(dot_span(a, b) / (na * nb), -1.0, 1.0);
}

std::string fmt(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

} // namespace

// ----- assignment kernels -----

std::vector<std::size_t> hungarian_min(const std::vector<std::vector<double>> &cost)
{
    const std::size_t n = cost.size();
    require(n > 0, "hungarian: empty cost matrix");
    for (const auto &row : cost)
        require(row.size() == n, "hungarian: cost matrix must be square");

    const double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1, 0);

    for (std::size_t i = 1; i <= n; i++) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), kInf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            std::size_t j1 = 0;
            double delta = kInf;
            for (std::size_t j = 1; j <= n; j++) {
                if (used[j])
                    continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; j++) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::size_t> row_to_col(n, 0);
    for (std::size_t j = 1; j <= n; j++)
        if (p[j] != 0)
            row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

namespace {

std::vector<std::vector<double>> cooccurrence(const std::vector<std::uint32_t> &c_l,
                                              const std::vector<std::uint32_t> &c_l1,
                                              std::size_t experts)
{
    require(!c_l.empty(), "coupling_coefficient: empty assignments");
    require(c_l.size() == c_l1.size(), "coupling_coefficient: assignment lengths differ");
    std::vector<std::vector<double>> counts(experts, std::vector<double>(experts, 0.0));
    for (std::size_t i = 0; i < c_l.size(); i++) {
        require(c_l[i] < experts && c_l1[i] < experts, "coupling_coefficient: assignment out of range");
        counts[c_l[i]][c_l1[i]] += 1.0;
    }
    return counts;
}

} // namespace

KappaResult coupling_coefficient(const std::vector<std::uint32_t> &c_l,
                                 const std::vector<std::uint32_t> &c_l1, std::size_t experts)
{
    auto counts = cooccurrence(c_l, c_l1, experts);
    std::vector<std::vector<double>> cost(experts, std::vector<double>(experts, 0.0));
    for (std::size_t e = 0; e < experts; e++)
        for (std::size_t v = 0; v < experts; v++)
            cost[e][v] = -counts[e][v];
    KappaResult out;
    out.perm = hungarian_min(cost);
    double mass = 0.0;
    for (std::size_t e = 0; e < experts; e++)
        mass += counts[e][out.perm[e]];
    out.kappa = mass / static_cast<double>(c_l.size());
    return out;
}

KappaResult coupling_coefficient_bruteforce(const std::vector<std::uint32_t> &c_l,
                                            const std::vector<std::uint32_t> &c_l1, std::size_t experts)
{
    require(experts <= 6, "brute-force coupling coefficient is gated to E <= 6");
    auto counts = cooccurrence(c_l, c_l1, experts);
    std::vector<std::size_t> perm(experts);
    std::iota(perm.begin(), perm.end(), std::size_t{ 0 });
    KappaResult best;
    best.kappa = -1.0;
    do {
        double mass = 0.0;
        for (std::size_t e = 0; e < experts; e++)
            mass += counts[e][perm[e]];
        const double kappa = mass / static_cast<double>(c_l.size());
        if (kappa > best.kappa) {
            best.kappa = kappa;
            best.perm = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

// ----- balanced k-means -----

std::vector<std::size_t> kmeans_balanced(const Tensor &points, std::size_t clusters, std::uint64_t seed)
{
    require(points.rank() == 2, "kmeans: points must be B×h");
    const std::size_t batch = points.rows(), width = points.cols();
    require(batch >= clusters && clusters >= 1, "kmeans: need at least as many points as clusters");

    auto dist2 = [&](std::span<const double> a, std::span<const double> b) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.size(); j++) {
            const double d = a[j] - b[j];
            s += d * d;
        }
        return s;
    };

    // farthest-point seeding
    Rng rng(seed);
    std::vector<std::vector<double>> centers;
    std::vector<double> nearest(batch, std::numeric_limits<double>::infinity());
    std::size_t first = static_cast<std::size_t>(rng.below(batch));
    auto add_center = [&](std::size_t idx) {
        auto prow = points.row(idx);
        centers.emplace_back(prow.begin(), prow.end());
        for (std::size_t i = 0; i < batch; i++)
            nearest[i] = std::min(nearest[i], dist2(points.row(i), centers.back()));
    };
    add_center(first);
    while (centers.size() < clusters) {
        std::size_t far = 0;
        for (std::size_t i = 1; i < batch; i++)
            if (nearest[i] > nearest[far])
                far = i;
        add_center(far);
    }

    // Lloyd iterations
    std::vector<std::size_t> labels(batch, 0);
    for (int iter = 0; iter < 100; iter++) {
        bool changed = false;
        for (std::size_t i = 0; i < batch; i++) {
            std::size_t best = 0;
            double bd = dist2(points.row(i), centers[0]);
            for (std::size_t c = 1; c < clusters; c++) {
                const double d = dist2(points.row(i), centers[c]);
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            if (labels[i] != best) {
                labels[i] = best;
                changed = true;
            }
        }
        if (!changed && iter > 0)
            break;
        std::vector<std::vector<double>> sums(clusters, std::vector<double>(width, 0.0));
        std::vector<std::size_t> sizes(clusters, 0);
        for (std::size_t i = 0; i < batch; i++) {
            auto prow = points.row(i);
            for (std::size_t j = 0; j < width; j++)
                sums[labels[i]][j] += prow[j];
            sizes[labels[i]]++;
        }
        for (std::size_t c = 0; c < clusters; c++)
            if (sizes[c] > 0)
                for (std::size_t j = 0; j < width; j++)
                    centers[c][j] = sums[c][j] / static_cast<double>(sizes[c]);
    }

    // distance-greedy balancing: cap sizes at ceil(B/E)
    const std::size_t cap = (batch + clusters - 1) / clusters;
    std::vector<std::size_t> sizes(clusters, 0);
    for (std::size_t l : labels)
        sizes[l]++;
    while (true) {
        std::size_t big = clusters;
        for (std::size_t c = 0; c < clusters; c++)
            if (sizes[c] > cap && (big == clusters || sizes[c] > sizes[big]))
                big = c;
        if (big == clusters)
            break;
        // farthest member of the oversized cluster
        std::size_t worst = batch;
        double worst_d = -1.0;
        for (std::size_t i = 0; i < batch; i++) {
            if (labels[i] != big)
                continue;
            const double d = dist2(points.row(i), centers[big]);
            if (d > worst_d) {
                worst_d = d;
                worst = i;
            }
        }
        // nearest cluster with room
        std::size_t dest = clusters;
        double dest_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < clusters; c++) {
            if (c == big || sizes[c] >= cap)
                continue;
            const double d = dist2(points.row(worst), centers[c]);
            if (d < dest_d) {
                dest_d = d;
                dest = c;
            }
        }
        require(dest < clusters, "kmeans balancing: no destination with room");
        labels[worst] = dest;
        sizes[big]--;
        sizes[dest]++;
    }
    return labels;
}

double cluster_agreement(const Tensor &reps_l, const Tensor &reps_l1, std::size_t clusters,
                         std::uint64_t seed)
{
    require(reps_l.rank() == 2 && reps_l1.rank() == 2 && reps_l.rows() == reps_l1.rows(),
            "cluster_agreement: same token count required on both layers");
    require(reps_l.rows() >= clusters, "cluster_agreement: fewer tokens than clusters");

    auto la = kmeans_balanced(reps_l, clusters, seed);
    auto lb = kmeans_balanced(reps_l1, clusters, seed);
    std::vector<std::uint32_t> ca(la.begin(), la.end()), cb(lb.begin(), lb.end());
    KappaResult k = coupling_coefficient(ca, cb, clusters);
    return 100.0 * k.kappa;
}

// ----- validators -----

BoundReport check_gradient_alignment(MoeModel &model, std::uint32_t token,
                                           const LossWeights &weights)
{
    model.zero_grads();
    Graph g;
    ForwardResult fwd = model_forward(g, model, { token });
    const std::uint32_t target = (token + 1) % static_cast<std::uint32_t>(model.cfg.vocab);
    LossBundle bundle = total_loss(g, fwd.logits, { target }, fwd.layer_outputs, weights, model.cfg.top_k);
    g.backward(bundle.total);

    double max_gap = 0.0;
    std::size_t pairs = 0;
    for (std::size_t l = 0; l < model.cfg.layers; l++) {
        const LayerOutput &lo = fwd.layer_outputs[l];
        const auto &active = lo.active[0];
        for (std::size_t a = 0; a < active.size(); a++)
            for (std::size_t b = a + 1; b < active.size(); b++) {
                const Tensor &ga = model.layers[l].experts[active[a]].w_down.grad;
                const Tensor &gb = model.layers[l].experts[active[b]].w_down.grad;
                const double cos_grad = cosine_value({ ga.data(), ga.size() }, { gb.data(), gb.size() });
                const double cos_act = cosine_value(lo.z_activation(0, a), lo.z_activation(0, b));
                max_gap = std::max(max_gap, std::abs(cos_grad - cos_act));
                pairs++;
            }
    }
    if (pairs == 0)
        return vacuous_report("alignment.gradient_activation", "no co-activated pair (top_k = 1)");
    return make_report("alignment.gradient_activation", max_gap, 1e-8,
                       { { "pairs", std::to_string(pairs) }, { "token", std::to_string(token) } });
}

BoundReport check_specialization_propagation(const Tensor &routers_l, const Tensor &routers_l1,
                                    const Tensor &tokens_l, const Tensor &tokens_l1, double delta,
                                    double epsilon, double iota)
{
    require(routers_l.rank() == 2 && routers_l1.rank() == 2 && routers_l.same_shape(routers_l1),
            "check_specialization_propagation: router matrices must be E×h with matching shapes");
    require(tokens_l.rank() == 2 && tokens_l1.rank() == 2 && tokens_l.same_shape(tokens_l1),
            "check_specialization_propagation: token matrices must be n×h with matching shapes");
    require(tokens_l.cols() == routers_l.cols(), "check_specialization_propagation: width mismatch");
    const std::size_t n = tokens_l.rows(), experts = routers_l.rows();
    require(n >= 2, "check_specialization_propagation: need at least two tokens");

    std::map<std::string, std::string> ctx = { { "delta", fmt(delta) },
                                               { "epsilon", fmt(epsilon) },
                                               { "iota", fmt(iota) } };
    constexpr double kSlack = 1e-12;

    auto top1 = [&](const Tensor &xs, const Tensor &rs, std::size_t i) {
        std::size_t best = 0;
        double bv = dot_span(xs.row(i), rs.row(0));
        for (std::size_t e = 1; e < experts; e++) {
            const double v = dot_span(xs.row(i), rs.row(e));
            if (v > bv) {
                bv = v;
                best = e;
            }
        }
        return best;
    };

    std::vector<std::size_t> e_l(n), e_l1(n);
    for (std::size_t i = 0; i < n; i++) {
        e_l[i] = top1(tokens_l, routers_l, i);
        e_l1[i] = top1(tokens_l1, routers_l1, i);
    }

    // Condition 1: representation continuity
    for (std::size_t i = 0; i < n; i++)
        if (cosine_value(tokens_l.row(i), tokens_l1.row(i)) < 1.0 - delta * delta - kSlack)
            return vacuous_report("propagation.router_specialization", "condition 1 (representation continuity) fails", ctx);

    // Condition 2: source-layer specialization between distinct experts
    for (std::size_t i = 0; i < n; i++)
        for (std::size_t j = i + 1; j < n; j++) {
            if (e_l[i] == e_l[j])
                continue;
            if (std::abs(cosine_value(routers_l.row(e_l[i]), routers_l.row(e_l[j]))) > epsilon + kSlack)
                return vacuous_report("propagation.router_specialization", "condition 2 (source specialization) fails", ctx);
        }

    // Condition 3: confident coupled decisions on both layers
    for (std::size_t i = 0; i < n; i++) {
        const bool ok = cosine_value(tokens_l.row(i), routers_l.row(e_l[i])) >= 1.0 - iota * iota - kSlack &&
                        cosine_value(tokens_l1.row(i), routers_l1.row(e_l1[i])) >= 1.0 - iota * iota - kSlack;
        if (!ok)
            return vacuous_report("propagation.router_specialization", "condition 3 (coupling confidence) fails", ctx);
    }

    double lhs = -1.0;
    for (std::size_t i = 0; i < n; i++)
        for (std::size_t j = i + 1; j < n; j++) {
            if (e_l[i] == e_l[j] || e_l1[i] == e_l1[j])
                continue;
            lhs = std::max(lhs, std::abs(cosine_value(routers_l1.row(e_l1[i]), routers_l1.row(e_l1[j]))));
        }
    if (lhs < 0.0)
        return vacuous_report("propagation.router_specialization", "no pair with distinct cross-layer partners", ctx);

    const double dd = delta + 2.0 * iota;
    const double rhs = epsilon + 2.0 * std::sqrt(2.0) * dd + 2.0 * dd * dd;
    return make_report("propagation.router_specialization", lhs, rhs, std::move(ctx));
}

double router_entropy(std::span<const double> scores)
{
    double h = 0.0;
    for (double p : scores) {
        require(p >= 0.0, "router_entropy: negative probability");
        if (p > 0.0)
            h -= p * std::log(p);
    }
    return h;
}

double entropy_bound(double delta, std::size_t experts)
{
    require(delta > 0.0 && delta <= 0.5, "entropy_bound: delta must lie in (0, 1/2]");
    require(experts >= 2, "entropy_bound: need at least two experts");
    const double h = -delta * std::log(delta) - (1.0 - delta) * std::log(1.0 - delta);
    return h + delta * std::log(static_cast<double>(experts - 1));
}

BoundReport check_entropy_corollary(double delta, std::size_t experts, std::size_t samples,
                                    std::uint64_t seed)
{
    const double bound = entropy_bound(delta, experts);
    Rng rng(seed);
    double max_entropy = 0.0;
    std::size_t violations = 0;
    std::vector<double> g(experts);
    for (std::size_t s = 0; s < samples; s++) {
        const double p = 1.0 - delta * rng.uniform(); // top entry in [1−δ, 1)
        double rest = 0.0;
        for (std::size_t e = 0; e + 1 < experts; e++) {
            const double u = (static_cast<double>(rng.next_u64() >> 11) + 1.0) * 0x1.0p-53;
            g[e] = -std::log(u);
            rest += g[e];
        }
        const std::size_t top = static_cast<std::size_t>(rng.below(experts));
        std::vector<double> probs(experts);
        std::size_t src = 0;
        for (std::size_t e = 0; e < experts; e++) {
            if (e == top) {
                probs[e] = p;
            } else {
                probs[e] = (1.0 - p) * g[src] / rest;
                src++;
            }
        }
        const double h = router_entropy(probs);
        max_entropy = std::max(max_entropy, h);
        if (h > bound + BoundReport::kTol)
            violations++;
    }
    return make_report("entropy.corollary", max_entropy, bound,
                       { { "delta", fmt(delta) },
                         { "experts", std::to_string(experts) },
                         { "samples", std::to_string(samples) },
                         { "violations", std::to_string(violations) } });
}

BoundReport check_sharp_routing(const Tensor &expert_losses, const Tensor &router_logits,
                                double gamma0, double eps0, double delta)
{
    require(gamma0 > 0.0, "check_sharp_routing: gamma0 must be positive");
    require(delta > 0.0 && delta < 1.0, "check_sharp_routing: delta must lie in (0, 1)");
    require(expert_losses.rank() == 2 && expert_losses.same_shape(router_logits),
            "check_sharp_routing: losses and logits must be n×E with matching shapes");
    const std::size_t n = expert_losses.rows(), experts = expert_losses.cols();
    require(experts >= 2, "check_sharp_routing: need at least two experts");

    std::map<std::string, std::string> ctx = { { "gamma0", fmt(gamma0) },
                                               { "eps0", fmt(eps0) },
                                               { "delta", fmt(delta) } };

    double formula_gap = 0.0;
    std::size_t sign_violations = 0, margin_ok = 0, sharp = 0;
    double mean_oracle_gap = 0.0;

    for (std::size_t i = 0; i < n; i++) {
        auto lrow = expert_losses.row(i);
        // unique best expert (A1)
        std::size_t best = 0;
        for (std::size_t e = 1; e < experts; e++)
            if (lrow[e] < lrow[best])
                best = e;
        double margin = std::numeric_limits<double>::infinity();
        bool unique = true;
        for (std::size_t e = 0; e < experts; e++) {
            if (e == best)
                continue;
            const double gap = lrow[e] - lrow[best];
            if (gap <= 0.0)
                unique = false;
            margin = std::min(margin, gap);
        }
        if (!unique)
            return vacuous_report("sharp_routing.sharpness", "condition A1 (unique best expert) fails", ctx);
        if (margin >= gamma0)
            margin_ok++;

        // mixture and router-gradient formula via a backward pass with the
        // per-expert losses held constant
        Parameter z("z", Tensor({ experts }, std::vector<double>(router_logits.row(i).begin(),
                                                                 router_logits.row(i).end())));
        Graph g;
        Var gv = softmax(g.param(z));
        Var mix = dot(gv, g.constant(Tensor({ experts }, std::vector<double>(lrow.begin(), lrow.end()))));
        g.backward(mix);
        const Tensor &probs = gv.value();
        const double mixture = mix.value().item();
        for (std::size_t e = 0; e < experts; e++) {
            const double predicted = probs[e] * (lrow[e] - mixture);
            formula_gap = std::max(formula_gap, std::abs(z.grad[e] - predicted));
        }
        if (margin > 0.0 && probs[best] < 1.0 && !(z.grad[best] < 0.0))
            sign_violations++;

        mean_oracle_gap += mixture - lrow[best];
        if (probs[best] >= 1.0 - delta)
            sharp++;
    }
    mean_oracle_gap /= static_cast<double>(n);

    const double margin_prob = static_cast<double>(margin_ok) / static_cast<double>(n);
    if (margin_prob < 1.0 - eps0)
        return vacuous_report("sharp_routing.sharpness", "condition A2 (high-probability margin) fails", ctx);

    ctx["formula_max_gap"] = fmt(formula_gap);
    ctx["sign_violations"] = std::to_string(sign_violations);
    ctx["oracle_gap_mean"] = fmt(mean_oracle_gap);

    const double lower = 1.0 - eps0 - mean_oracle_gap / (gamma0 * delta);
    const double empirical = static_cast<double>(sharp) / static_cast<double>(n);
    return make_report("sharp_routing.sharpness", lower, empirical, std::move(ctx));
}

BoundReport check_region_risk(const std::vector<double> &routing_weights,
                                  const std::vector<bool> &in_region,
                                  const std::vector<double> &losses_old,
                                  const std::vector<double> &losses_new, double eta, double loss_bound)
{
    const std::size_t n = routing_weights.size();
    require(n > 0 && in_region.size() == n && losses_old.size() == n && losses_new.size() == n,
            "check_region_risk: population arrays must share a length");
    require(eta > 0.0 && eta < 1.0, "check_region_risk: eta must lie in (0, 1)");
    require(loss_bound > 0.0, "check_region_risk: loss bound must be positive");

    std::map<std::string, std::string> ctx = { { "eta", fmt(eta) }, { "loss_bound", fmt(loss_bound) } };

    double wsum = 0.0;
    for (double w : routing_weights) {
        require(w >= 0.0, "check_region_risk: negative routing weight");
        wsum += w;
    }
    if (wsum <= 0.0)
        return vacuous_report("region_risk.improvement", "expert receives no routing mass", ctx);

    // (B3) bounded losses
    for (std::size_t i = 0; i < n; i++) {
        const bool ok = losses_old[i] >= 0.0 && losses_old[i] <= loss_bound && losses_new[i] >= 0.0 &&
                        losses_new[i] <= loss_bound;
        if (!ok)
            return vacuous_report("region_risk.improvement", "condition B3 (bounded loss) fails", ctx);
    }

    double alpha = 0.0, eff_old = 0.0, eff_new = 0.0;
    double region_mass = 0.0, region_old = 0.0, region_new = 0.0;
    for (std::size_t i = 0; i < n; i++) {
        const double d = routing_weights[i] / wsum;
        eff_old += d * losses_old[i];
        eff_new += d * losses_new[i];
        if (in_region[i]) {
            alpha += d;
            region_mass += d;
            region_old += d * losses_old[i];
            region_new += d * losses_new[i];
        }
    }
    ctx["alpha"] = fmt(alpha);
    if (alpha < 1.0 - eta - 1e-12)
        return vacuous_report("region_risk.improvement", "condition B1 (high purity) fails", ctx);
    if (region_mass <= 0.0)
        return vacuous_report("region_risk.improvement", "advantage region carries no mass", ctx);

    const double delta_e = eff_old - eff_new;
    ctx["delta_e"] = fmt(delta_e);
    if (delta_e <= 0.0)
        return vacuous_report("region_risk.improvement", "condition B2 (effective improvement) fails", ctx);
    if (delta_e <= eta * loss_bound)
        ctx["vacuous"] = "true"; // bound carries no information in this regime

    const double rs_old = region_old / region_mass;
    const double rs_new = region_new / region_mass;
    ctx["region_risk_old"] = fmt(rs_old);
    ctx["region_risk_new"] = fmt(rs_new);
    return make_report("region_risk.improvement", rs_new, rs_old - (delta_e - eta * loss_bound),
                       std::move(ctx));
}

BoundReport check_backward_transfer(const std::vector<std::uint32_t> &c_l,
                                    const std::vector<std::uint32_t> &c_l1,
                                    const LatentAllocation &allocation)
{
    const std::size_t n = c_l.size();
    require(n > 0 && c_l1.size() == n && allocation.assign.size() == n,
            "check_backward_transfer: assignments must share a token index set");
    const std::size_t experts = allocation.regions;
    KappaResult k = coupling_coefficient(c_l, c_l1, experts);

    std::size_t next_err = 0, aligned_err = 0;
    for (std::size_t i = 0; i < n; i++) {
        if (c_l1[i] != allocation.assign[i])
            next_err++;
        if (k.perm[c_l[i]] != allocation.assign[i])
            aligned_err++;
    }
    const double eps_next = static_cast<double>(next_err) / static_cast<double>(n);
    const double lhs = static_cast<double>(aligned_err) / static_cast<double>(n);
    return make_report("coupling.backward_transfer", lhs, eps_next + (1.0 - k.kappa),
                       { { "kappa", fmt(k.kappa) }, { "eps_next_layer", fmt(eps_next) } });
}

BalancedPartition balanced_partition(const Tensor &tokens, const Tensor &direction, std::size_t experts)
{
    require(tokens.rank() == 2, "balanced_partition: tokens must be B×h");
    require(direction.rank() == 1 && direction.size() == tokens.cols(),
            "balanced_partition: direction width mismatch");
    const std::size_t batch = tokens.rows();
    require(experts >= 1 && batch % experts == 0,
            "balanced_partition: expert count must divide the batch size");
    require(norm_span({ direction.data(), direction.size() }) > 0.0,
            "balanced_partition: direction must be nonzero");

    std::vector<double> proj(batch);
    for (std::size_t i = 0; i < batch; i++)
        proj[i] = dot_span(tokens.row(i), { direction.data(), direction.size() });

    std::vector<std::size_t> order(batch);
    std::iota(order.begin(), order.end(), std::size_t{ 0 });
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (proj[a] != proj[b])
            return proj[a] < proj[b];
        return a < b; // projection ties break toward the lower token index
    });

    const std::size_t block = batch / experts;
    BalancedPartition out;
    out.assign.resize(batch);
    for (std::size_t pos = 0; pos < batch; pos++)
        out.assign[order[pos]] = pos / block;
    for (std::size_t c = 1; c < experts; c++) {
        const double lo = proj[order[c * block - 1]];
        const double hi = proj[order[c * block]];
        out.thresholds.push_back(0.5 * (lo + hi));
    }
    return out;
}

std::vector<Tensor> construct_coupled_balanced(std::size_t batch, std::size_t experts, std::size_t top_k,
                                               std::size_t layers, const Tensor &eta)
{
    require(experts >= 1 && batch % experts == 0,
            "construct_coupled_balanced: expert count must divide the batch size");
    require(top_k >= 1 && top_k <= experts, "construct_coupled_balanced: need 1 <= k <= E");
    require(layers >= 1, "construct_coupled_balanced: need at least one layer");

    const bool per_layer = eta.rank() == 2;
    if (per_layer)
        require(eta.rows() == layers && eta.cols() == top_k,
                "construct_coupled_balanced: eta must be k weights or L×k rows");
    else
        require(eta.rank() == 1 && eta.size() == top_k,
                "construct_coupled_balanced: eta must be k weights or L×k rows");

    auto eta_row = [&](std::size_t l) {
        return per_layer ? eta.row(l) : std::span<const double>(eta.data(), eta.size());
    };
    for (std::size_t l = 0; l < (per_layer ? layers : 1); l++) {
        double s = 0.0;
        for (double w : eta_row(l)) {
            require(w >= 0.0, "construct_coupled_balanced: eta weights must be non-negative");
            s += w;
        }
        require(std::abs(s - 1.0) <= 1e-12, "construct_coupled_balanced: eta rows must sum to 1");
    }

    std::vector<Tensor> scores;
    for (std::size_t l = 0; l < layers; l++) {
        Tensor s({ batch, experts });
        auto weights = eta_row(l);
        for (std::size_t i = 0; i < batch; i++)
            for (std::size_t r = 0; r < top_k; r++) {
                // slot r of token i designates expert (r + i) mod E; the k
                // starting offsets are distinct, so the active set has k
                // distinct experts
                const std::size_t e = (r + i) % experts;
                s.at(i, e) = weights[r];
            }
        scores.push_back(std::move(s));
    }
    return scores;
}

} // namespace moelab
