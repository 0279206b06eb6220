#include <moelab/losses.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moelab {

namespace {

struct CosPair {
    Var mat_a, mat_b;
    std::size_t row_a, row_b;
};

constexpr double kCosEps = 1e-12;

// cos of two activation rows with the same epsilon guard as the cosine op
double guarded_cos(std::span<const double> a, std::span<const double> b, double &na_out,
                   double &nb_out)
{
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < a.size(); j++) {
        d += a[j] * b[j];
        na += a[j] * a[j];
        nb += b[j] * b[j];
    }
    na_out = std::sqrt(na);
    nb_out = std::sqrt(nb);
    if (na_out < kCosEps || nb_out < kCosEps)
        return 0.0;
    return std::clamp(d / std::max(na_out * nb_out, kCosEps), -1.0, 1.0);
}

} // namespace

Var specialization_loss(Graph &g, const std::vector<LayerOutput> &layer_outputs)
{
    require(!layer_outputs.empty(), "specialization_loss: no layer outputs");
    const std::size_t batch = layer_outputs[0].active.size();

    // one record per co-activated unordered pair, across layers and tokens
    std::vector<CosPair> pairs;
    for (const LayerOutput &lo : layer_outputs)
        for (std::size_t i = 0; i < batch; i++) {
            const std::size_t slots = lo.active[i].size();
            for (std::size_t a = 0; a < slots; a++)
                for (std::size_t b = a + 1; b < slots; b++)
                    pairs.push_back(CosPair{ lo.expert_z[lo.active[i][a]],
                                             lo.expert_z[lo.active[i][b]], lo.slot_pos[i][a],
                                             lo.slot_pos[i][b] });
        }
    if (pairs.empty())
        return g.scalar(0.0);

    double total = 0.0;
    for (const CosPair &p : pairs) {
        double na, nb;
        const double c = guarded_cos(p.mat_a.value().row(p.row_a), p.mat_b.value().row(p.row_b), na, nb);
        total += c * c;
    }
    const double inv_batch = 1.0 / static_cast<double>(batch);
    Var o = g.node("specialization_loss", Tensor::scalar(total * inv_batch));
    g.set_backward(o, [&g, o, pairs, inv_batch]() {
        const double go = g.grad_of(o)[0] * inv_batch;
        for (const CosPair &p : pairs) {
            auto za = g.value_of(p.mat_a).row(p.row_a);
            auto zb = g.value_of(p.mat_b).row(p.row_b);
            double na, nb;
            const double c = guarded_cos(za, zb, na, nb);
            if (na < kCosEps || nb < kCosEps)
                continue; // guarded: zero gradient
            auto ga = g.grad_of(p.mat_a).row(p.row_a);
            auto gb = g.grad_of(p.mat_b).row(p.row_b);
            const double scale2c = go * 2.0 * c;
            const double inv = 1.0 / std::max(na * nb, kCosEps);
            const bool pinned = na * nb < kCosEps;
            for (std::size_t j = 0; j < za.size(); j++) {
                // d(c²)/dz = 2c·dc/dz with dc/dz the guarded cosine rule
                const double dca = pinned ? zb[j] * inv : zb[j] * inv - c * za[j] / (na * na);
                const double dcb = pinned ? za[j] * inv : za[j] * inv - c * zb[j] / (nb * nb);
                ga[j] += scale2c * dca;
                gb[j] += scale2c * dcb;
            }
        }
    });
    return o;
}

namespace {

// Ranked order of a score row: value descending, index ascending on ties.
std::vector<std::size_t> ranked(std::span<const double> s)
{
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), std::size_t{ 0 });
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (s[a] != s[b])
            return s[a] > s[b];
        return a < b;
    });
    return order;
}

struct CouplingPlan {
    double value = 0.0;
    // per (token, adjacent pair): the k selected next-layer experts for
    // positive-score source experts, and for exact-zero source experts
    std::vector<std::vector<std::vector<std::size_t>>> top_pos;  // [pair][token] -> k indices
    std::vector<std::vector<std::vector<std::size_t>>> top_zero; // [pair][token] -> k indices
};

CouplingPlan coupling_forward(const std::vector<const Tensor *> &scores, std::size_t k)
{
    const std::size_t layers = scores.size();
    const std::size_t batch = scores[0]->rows();
    CouplingPlan plan;
    plan.top_pos.resize(layers - 1);
    plan.top_zero.resize(layers - 1);

    double total = 0.0;
    for (std::size_t l = 0; l + 1 < layers; l++) {
        const Tensor &s0 = *scores[l];
        const Tensor &s1 = *scores[l + 1];
        plan.top_pos[l].resize(batch);
        plan.top_zero[l].resize(batch);
        for (std::size_t i = 0; i < batch; i++) {
            auto row0 = s0.row(i);
            auto row1 = s1.row(i);
            // Joint probability s0[e]·s1[ν] ranks ν exactly like s1 whenever
            // s0[e] > 0 (same tie rule); an exact-zero s0[e] makes every
            // joint probability zero, so ties send T to the lowest indices.
            auto order = ranked(row1);
            auto &pos = plan.top_pos[l][i];
            pos.assign(order.begin(), order.begin() + k);
            auto &zero = plan.top_zero[l][i];
            for (std::size_t v = 0; v < k; v++)
                zero.push_back(v);

            double top_sum = 0.0;
            for (std::size_t v : pos)
                top_sum += row1[v];
            double src_sum = 0.0;
            for (std::size_t e = 0; e < row0.size(); e++)
                if (row0[e] > 0.0)
                    src_sum += row0[e];
            total += src_sum * top_sum;
        }
    }
    plan.value = -total / static_cast<double>(batch);
    return plan;
}

} // namespace

CouplingLoss coupling_loss(Graph &g, const std::vector<Var> &layer_scores, std::size_t top_k)
{
    if (layer_scores.size() < 2)
        return CouplingLoss{ g.scalar(0.0), false };

    const std::size_t batch = layer_scores[0].value().rows();
    std::vector<const Tensor *> mats;
    for (const Var &v : layer_scores) {
        require(v.value().rank() == 2 && v.value().rows() == batch && v.value().cols() == layer_scores[0].value().cols(),
                "coupling_loss: score matrices must share shape");
        mats.push_back(&v.value());
    }
    require(top_k >= 1 && top_k <= layer_scores[0].value().cols(), "coupling_loss: invalid top_k");

    CouplingPlan plan = coupling_forward(mats, top_k);
    Var o = g.node("coupling_loss", Tensor::scalar(plan.value));
    g.set_backward(o, [&g, layer_scores, o, plan, batch, top_k]() {
        const double go = g.grad_of(o)[0] / static_cast<double>(batch);
        for (std::size_t l = 0; l + 1 < layer_scores.size(); l++) {
            const Tensor &s0 = g.value_of(layer_scores[l]);
            const Tensor &s1 = g.value_of(layer_scores[l + 1]);
            Tensor &g0 = g.grad_of(layer_scores[l]);
            Tensor &g1 = g.grad_of(layer_scores[l + 1]);
            for (std::size_t i = 0; i < s0.rows(); i++) {
                auto row0 = s0.row(i);
                auto row1 = s1.row(i);
                const auto &pos = plan.top_pos[l][i];
                const auto &zero = plan.top_zero[l][i];
                double top_sum = 0.0;
                for (std::size_t v : pos)
                    top_sum += row1[v];
                double zero_sum = 0.0;
                for (std::size_t v : zero)
                    zero_sum += row1[v];
                double src_sum = 0.0;
                for (std::size_t e = 0; e < row0.size(); e++) {
                    if (row0[e] > 0.0) {
                        g0.at(i, e) -= go * top_sum;
                        src_sum += row0[e];
                    } else {
                        g0.at(i, e) -= go * zero_sum;
                    }
                }
                for (std::size_t v : pos)
                    g1.at(i, v) -= go * src_sum;
            }
        }
    });
    return CouplingLoss{ o, true };
}

CouplingLoss coupling_loss(Graph &g, const std::vector<LayerOutput> &layer_outputs, std::size_t top_k)
{
    std::vector<Var> scores;
    scores.reserve(layer_outputs.size());
    for (const LayerOutput &lo : layer_outputs)
        scores.push_back(lo.scores);
    return coupling_loss(g, scores, top_k);
}

double coupling_loss_value(const std::vector<Tensor> &layer_scores, std::size_t top_k)
{
    if (layer_scores.size() < 2)
        return 0.0;
    std::vector<const Tensor *> mats;
    for (const Tensor &t : layer_scores)
        mats.push_back(&t);
    return coupling_forward(mats, top_k).value;
}

Var load_balance_loss(Graph &g, Var scores, const std::vector<std::vector<std::size_t>> &active)
{
    const Tensor &sv = scores.value();
    require(sv.rank() == 2, "load_balance_loss: scores must be B×E");
    const std::size_t batch = sv.rows(), experts = sv.cols();
    require(active.size() == batch, "load_balance_loss: one active set per token required");

    Tensor fractions({ experts });
    std::size_t slots = 0;
    for (const auto &set : active) {
        for (std::size_t e : set) {
            require(e < experts, "load_balance_loss: active expert out of range");
            fractions[e] += 1.0;
        }
        slots += set.size();
    }
    require(slots > 0, "load_balance_loss: empty active sets");
    for (std::size_t e = 0; e < experts; e++)
        fractions[e] /= static_cast<double>(slots);

    Var mean_scores = mean_cols(scores);
    return scale(dot(g.constant(std::move(fractions)), mean_scores), static_cast<double>(experts));
}

Var z_loss(Graph &, const std::vector<Var> &logits_per_layer)
{
    require(!logits_per_layer.empty(), "z_loss: no logits");
    const std::size_t batch = logits_per_layer[0].value().rows();
    Var acc;
    for (const Var &q : logits_per_layer) {
        Var term = vsum(square(logsumexp_rows(q)));
        acc = acc.valid() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(batch * logits_per_layer.size()));
}

LossBundle total_loss(Graph &g, Var logits, const std::vector<std::uint32_t> &targets,
                      const std::vector<LayerOutput> &layer_outputs, const LossWeights &weights,
                      std::size_t top_k)
{
    weights.validate();

    LossBundle out;
    out.task = cross_entropy_mean(logits, targets);

    Var lb_acc;
    std::vector<Var> logit_mats;
    for (const LayerOutput &lo : layer_outputs) {
        Var term = load_balance_loss(g, lo.scores, lo.active);
        lb_acc = lb_acc.valid() ? add(lb_acc, term) : term;
        logit_mats.push_back(lo.logits);
    }
    out.lb = scale(lb_acc, 1.0 / static_cast<double>(layer_outputs.size()));
    out.z = z_loss(g, logit_mats);
    out.sp = specialization_loss(g, layer_outputs);
    CouplingLoss cp = coupling_loss(g, layer_outputs, top_k);
    out.cp = cp.value;

    Var total = out.task;
    total = add(total, scale(out.lb, weights.lambda_lb));
    total = add(total, scale(out.z, weights.lambda_z));
    total = add(total, scale(out.sp, weights.lambda_sp));
    total = add(total, scale(out.cp, weights.lambda_cp));
    out.total = total;

    out.values.task = out.task.value().item();
    out.values.lb = out.lb.value().item();
    out.values.z = out.z.value().item();
    out.values.sp = out.sp.value().item();
    out.values.cp = out.cp.value().item();
    out.values.total = out.total.value().item();
    out.values.cp_defined = cp.defined;
    return out;
}

} // namespace moelab
