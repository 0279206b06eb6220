#include <moelab/moe.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace moelab {

void MoeConfig::validate() const
{
    require(experts >= 1 && top_k >= 1 && top_k <= experts,
            "config requires 1 <= top_k <= experts, got k=" + std::to_string(top_k) +
                    " E=" + std::to_string(experts));
    require(layers >= 1, "config requires at least one layer");
    require(hidden >= 1 && ffn >= 1 && vocab >= 1, "config widths must be positive");
    if (aux_loss_free)
        require(bias_step > 0.0, "aux_loss_free requires a positive bias_step");
}

namespace {

Tensor gaussian(Rng &rng, std::vector<std::size_t> shape, double scale)
{
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); i++)
        t[i] = scale * rng.normal();
    return t;
}

ExpertParams init_expert(const MoeConfig &cfg, Rng &rng, const std::string &prefix)
{
    const double in_scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    const double out_scale = 1.0 / std::sqrt(static_cast<double>(cfg.ffn));
    return ExpertParams{
        Parameter(prefix + ".w_gate", gaussian(rng, { cfg.ffn, cfg.hidden }, in_scale)),
        Parameter(prefix + ".w_up", gaussian(rng, { cfg.ffn, cfg.hidden }, in_scale)),
        Parameter(prefix + ".w_down", gaussian(rng, { cfg.hidden, cfg.ffn }, out_scale)),
    };
}

} // namespace

MoeModel MoeModel::init(const MoeConfig &cfg, Rng &rng)
{
    cfg.validate();
    MoeModel model;
    model.cfg = cfg;
    model.embedding = Parameter("embedding", gaussian(rng, { cfg.vocab, cfg.hidden }, 1.0));
    const double router_scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    for (std::size_t l = 0; l < cfg.layers; l++) {
        const std::string lp = "layer" + std::to_string(l);
        MoeLayer layer;
        layer.routers = Parameter(lp + ".routers", gaussian(rng, { cfg.experts, cfg.hidden }, router_scale));
        for (std::size_t e = 0; e < cfg.experts; e++)
            layer.experts.push_back(init_expert(cfg, rng, lp + ".expert" + std::to_string(e)));
        if (cfg.shared_expert)
            layer.shared = init_expert(cfg, rng, lp + ".shared");
        layer.bias.assign(cfg.experts, 0.0);
        model.layers.push_back(std::move(layer));
    }
    model.head = Parameter("head", gaussian(rng, { cfg.vocab, cfg.hidden }, router_scale));
    return model;
}

std::vector<Parameter *> MoeModel::parameters()
{
    std::vector<Parameter *> out;
    out.push_back(&embedding);
    for (auto &layer : layers) {
        out.push_back(&layer.routers);
        for (auto &e : layer.experts) {
            out.push_back(&e.w_gate);
            out.push_back(&e.w_up);
            out.push_back(&e.w_down);
        }
        if (layer.shared) {
            out.push_back(&layer.shared->w_gate);
            out.push_back(&layer.shared->w_up);
            out.push_back(&layer.shared->w_down);
        }
    }
    out.push_back(&head);
    return out;
}

std::vector<const Parameter *> MoeModel::parameters() const
{
    auto mutable_list = const_cast<MoeModel *>(this)->parameters();
    return { mutable_list.begin(), mutable_list.end() };
}

void MoeModel::zero_grads()
{
    for (Parameter *p : parameters())
        p->zero_grad();
}

RouteResult route(Graph &g, MoeLayer &layer, Var x, const MoeConfig &cfg)
{
    cfg.validate();
    require(x.value().rank() == 2 && x.value().cols() == cfg.hidden,
            "route: input must be B×hidden, got " + shape_str(x.value().shape()));

    RouteResult out;
    out.logits = matmul_nt(x, g.param(layer.routers));
    out.scores = softmax_rows(out.logits);

    const Tensor &q = out.logits.value();
    const std::size_t batch = q.rows(), experts = cfg.experts;
    std::vector<std::size_t> order(experts);
    std::vector<double> sel(experts);
    out.active.resize(batch);
    for (std::size_t i = 0; i < batch; i++) {
        auto qrow = q.row(i);
        for (std::size_t e = 0; e < experts; e++)
            sel[e] = cfg.aux_loss_free ? qrow[e] + layer.bias[e] : qrow[e];
        std::iota(order.begin(), order.end(), std::size_t{ 0 });
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (sel[a] != sel[b])
                return sel[a] > sel[b];
            return a < b;
        });
        out.active[i].assign(order.begin(), order.begin() + cfg.top_k);
    }
    return out;
}

ExpertOut expert_forward(Graph &g, ExpertParams &expert, Var x_row)
{
    Var gate = swish(matvec(g.param(expert.w_gate), x_row));
    Var up = matvec(g.param(expert.w_up), x_row);
    Var z = mul(gate, up);
    Var y = matvec(g.param(expert.w_down), z);
    return ExpertOut{ z, y };
}

namespace {

// Weighted scatter of per-expert output blocks back into token order:
// out[i] = Σ_slots scores[i, e]·Y_e[row of (i, slot)]. One node instead of
// B·k elem/mul/add chains.
Var combine_expert_outputs(Graph &g, Var scores, const std::vector<Var> &expert_y,
                           const std::vector<std::vector<std::size_t>> &expert_rows,
                           std::size_t batch, std::size_t hidden)
{
    Tensor out({ batch, hidden });
    const Tensor &sv = scores.value();
    for (std::size_t e = 0; e < expert_y.size(); e++) {
        if (!expert_y[e].valid())
            continue;
        const Tensor &ye = expert_y[e].value();
        for (std::size_t p = 0; p < expert_rows[e].size(); p++) {
            const std::size_t i = expert_rows[e][p];
            const double w = sv.at(i, e);
            auto src = ye.row(p);
            auto dst = out.row(i);
            for (std::size_t j = 0; j < hidden; j++)
                dst[j] += w * src[j];
        }
    }
    Var o = g.node("moe_combine", std::move(out));
    g.set_backward(o, [&g, scores, expert_y, expert_rows, o, hidden]() {
        const Tensor &go = g.grad_of(o);
        const Tensor &sv = g.value_of(scores);
        Tensor &gs = g.grad_of(scores);
        for (std::size_t e = 0; e < expert_y.size(); e++) {
            if (!expert_y[e].valid())
                continue;
            const Tensor &ye = g.value_of(expert_y[e]);
            Tensor &gy = g.grad_of(expert_y[e]);
            for (std::size_t p = 0; p < expert_rows[e].size(); p++) {
                const std::size_t i = expert_rows[e][p];
                const double w = sv.at(i, e);
                auto gout = go.row(i);
                auto yrow = ye.row(p);
                auto grow = gy.row(p);
                double dot_acc = 0.0;
                for (std::size_t j = 0; j < hidden; j++) {
                    grow[j] += w * gout[j];
                    dot_acc += gout[j] * yrow[j];
                }
                gs.at(i, e) += dot_acc;
            }
        }
    });
    return o;
}

} // namespace

LayerOutput layer_forward(Graph &g, MoeLayer &layer, Var x, const MoeConfig &cfg)
{
    RouteResult r = route(g, layer, x, cfg);
    const std::size_t batch = x.value().rows();

    LayerOutput out;
    out.logits = r.logits;
    out.scores = r.scores;
    out.active = std::move(r.active);
    out.expert_z.resize(cfg.experts);
    out.expert_rows.resize(cfg.experts);
    out.slot_pos.assign(batch, std::vector<std::size_t>(cfg.top_k, 0));

    for (std::size_t i = 0; i < batch; i++)
        for (std::size_t s = 0; s < cfg.top_k; s++) {
            const std::size_t e = out.active[i][s];
            out.slot_pos[i][s] = out.expert_rows[e].size();
            out.expert_rows[e].push_back(i);
        }

    std::vector<Var> expert_y(cfg.experts);
    for (std::size_t e = 0; e < cfg.experts; e++) {
        if (out.expert_rows[e].empty())
            continue;
        Var xe = gather_rows(x, out.expert_rows[e]);
        ExpertParams &ex = layer.experts[e];
        Var gate = swish(matmul_nt(xe, g.param(ex.w_gate)));
        Var up = matmul_nt(xe, g.param(ex.w_up));
        out.expert_z[e] = mul(gate, up);
        // y = z·W_downᵀ since W_down is hidden×ffn
        expert_y[e] = matmul_nt(out.expert_z[e], g.param(ex.w_down));
    }

    out.y = combine_expert_outputs(g, out.scores, expert_y, out.expert_rows, batch, cfg.hidden);
    if (layer.shared) {
        // shared expert is always active and added unweighted
        ExpertParams &sh = *layer.shared;
        Var gate = swish(matmul_nt(x, g.param(sh.w_gate)));
        Var up = matmul_nt(x, g.param(sh.w_up));
        out.y = add(out.y, matmul_nt(mul(gate, up), g.param(sh.w_down)));
    }
    return out;
}

ForwardResult model_forward(Graph &g, MoeModel &model, const std::vector<std::uint32_t> &tokens)
{
    const MoeConfig &cfg = model.cfg;
    cfg.validate();
    require(!tokens.empty(), "model_forward: empty token batch");

    ForwardResult out;
    out.trace.batch = static_cast<std::uint32_t>(tokens.size());
    out.trace.layers = static_cast<std::uint32_t>(cfg.layers);
    out.trace.experts = static_cast<std::uint32_t>(cfg.experts);
    out.trace.top_k = static_cast<std::uint32_t>(cfg.top_k);

    Var x = embed(g.param(model.embedding), tokens);
    std::vector<std::vector<RoutingTrace::Entry>> step(cfg.layers);
    for (std::size_t l = 0; l < cfg.layers; l++) {
        LayerOutput lo = layer_forward(g, model.layers[l], x, cfg);
        x = add(x, lo.y); // residual connection

        auto &entries = step[l];
        entries.resize(tokens.size());
        const Tensor &scores = lo.scores.value();
        for (std::size_t i = 0; i < tokens.size(); i++) {
            RoutingTrace::Entry &e = entries[i];
            e.token_id = tokens[i];
            for (std::size_t a : lo.active[i])
                e.active.push_back(static_cast<std::uint16_t>(a));
            auto srow = scores.row(i);
            e.scores.assign(srow.begin(), srow.end());
        }
        out.layer_outputs.push_back(std::move(lo));
    }
    out.logits = matmul_nt(x, g.param(model.head));
    out.trace.append_step(std::move(step));
    return out;
}

void update_balancing_bias(MoeLayer &layer, const std::vector<std::size_t> &loads, const MoeConfig &cfg)
{
    require(cfg.aux_loss_free, "update_balancing_bias requires aux_loss_free");
    require(loads.size() == cfg.experts, "one load count per expert required");

    double mean_load = 0.0;
    for (std::size_t c : loads)
        mean_load += static_cast<double>(c);
    mean_load /= static_cast<double>(cfg.experts);

    for (std::size_t e = 0; e < cfg.experts; e++) {
        const double violation = mean_load - static_cast<double>(loads[e]);
        const double sign = violation > 0.0 ? 1.0 : (violation < 0.0 ? -1.0 : 0.0);
        layer.bias[e] += cfg.bias_step * sign;
    }
    double mean_bias = 0.0;
    for (double b : layer.bias)
        mean_bias += b;
    mean_bias /= static_cast<double>(cfg.experts);
    for (double &b : layer.bias)
        b -= mean_bias;
}

} // namespace moelab
