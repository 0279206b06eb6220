#include <moelab/graph.hpp>

#include <algorithm>
#include <cmath>

namespace moelab {

const Tensor &Var::value() const
{
    return g_->value_of(*this);
}

const Tensor &Var::grad() const
{
    return g_->nodes_[id_].grad;
}

Var Graph::constant(Tensor t)
{
    nodes_.push_back(Node{ std::move(t), Tensor(), nullptr, nullptr });
    Node &n = nodes_.back();
    n.grad = Tensor::zeros_like(n.value);
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::param(Parameter &p)
{
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end())
        return Var(this, it->second);
    Var v = constant(p.value);
    nodes_[v.id()].bound = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
}

Var Graph::node(const char *what, Tensor value)
{
    value.check_finite(what);
    return constant(std::move(value));
}

void Graph::set_backward(Var v, std::function<void()> back)
{
    nodes_[v.id()].back = std::move(back);
}

void Graph::backward(Var loss)
{
    require(loss.valid() && loss.graph() == this, "backward: loss is not a node of this graph");
    require(nodes_[loss.id()].value.is_scalar(), "backward: loss must be a scalar");
    nodes_[loss.id()].grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (nodes_[i].back)
            nodes_[i].back();
    }
    for (auto &n : nodes_) {
        if (n.bound) {
            Tensor &g = n.bound->grad;
            for (std::size_t i = 0; i < g.size(); i++)
                g[i] += n.grad[i];
        }
    }
}

namespace {

Graph &common_graph(Var a, Var b)
{
    require(a.valid() && b.valid() && a.graph() == b.graph(), "operands must live on the same graph");
    return *a.graph();
}

void check_same_shape(const Tensor &a, const Tensor &b, const char *what)
{
    if (!a.same_shape(b))
        fail(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

double sigmoid(double x)
{
    return 1.0 / (1.0 + std::exp(-x));
}

// softmax of src into dst with max-subtraction
void softmax_span(std::span<const double> src, std::span<double> dst)
{
    double m = src[0];
    for (double x : src)
        m = std::max(m, x);
    double denom = 0.0;
    for (std::size_t i = 0; i < src.size(); i++) {
        dst[i] = std::exp(src[i] - m);
        denom += dst[i];
    }
    for (std::size_t i = 0; i < src.size(); i++)
        dst[i] /= denom;
}

} // namespace

Var add(Var a, Var b)
{
    Graph &g = common_graph(a, b);
    const Tensor &av = a.value(), &bv = b.value();
    check_same_shape(av, bv, "add");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); i++)
        out[i] = av[i] + bv[i];
    Var o = g.node("add", std::move(out));
    g.set_backward(o, [&g, a, b, o]() {
        const Tensor &go = g.grad_of(o);
        Tensor &ga = g.grad_of(a);
        Tensor &gb = g.grad_of(b);
        for (std::size_t i = 0; i < go.size(); i++) {
            ga[i] += go[i];
            gb[i] += go[i];
        }
    });
    return o;
}

Var sub(Var a, Var b)
{
    Graph &g = common_graph(a, b);
    const Tensor &av = a.value(), &bv = b.value();
    check_same_shape(av, bv, "sub");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); i++)
        out[i] = av[i] - bv[i];
    Var o = g.node("sub", std::move(out));
    g.set_backward(o, [&g, a, b, o]() {
        const Tensor &go = g.grad_of(o);
        Tensor &ga = g.grad_of(a);
        Tensor &gb = g.grad_of(b);
        for (std::size_t i = 0; i < go.size(); i++) {
            ga[i] += go[i];
            gb[i] -= go[i];
        }
    });
    return o;
}

Var mul(Var a, Var b)
{
    Graph &g = common_graph(a, b);
    const Tensor &av = a.value(), &bv = b.value();
    check_same_shape(av, bv, "mul");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); i++)
        out[i] = av[i] * bv[i];
    Var o = g.node("mul", std::move(out));
    g.set_backward(o, [&g, a, b, o]() {
        const Tensor &go = g.grad_of(o);
        const Tensor &av = g.value_of(a);
        const Tensor &bv = g.value_of(b);
        Tensor &ga = g.grad_of(a);
        Tensor &gb = g.grad_of(b);
        for (std::size_t i = 0; i < go.size(); i++) {
            ga[i] += go[i] * bv[i];
            gb[i] += go[i] * av[i];
        }
    });
    return o;
}

Var neg(Var a)
{
    return scale(a, -1.0);
}

Var scale(Var a, double c)
{
    Graph &g = *a.graph();
    const Tensor &av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); i++)
        out[i] = av[i] * c;
    Var o = g.node("scale", std::move(out));
    g.set_backward(o, [&g, a, o, c]() {
        const Tensor &go = g.grad_of(o);
        Tensor &ga = g.grad_of(a);
        for (std::size_t i = 0; i < go.size(); i++)
            ga[i] += go[i] * c;
    });
    return o;
}

Var square(Var a)
{
    Graph &g = *a.graph();
    const Tensor &av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); i++)
        out[i] = av[i] * av[i];
    Var o = g.node("square", std::move(out));
    g.set_backward(o, [&g, a, o]() {
        const Tensor &go = g.grad_of(o);
        const Tensor &av = g.value_of(a);
        Tensor &ga = g.grad_of(a);
        for (std::size_t i = 0; i < go.size(); i++)
            ga[i] += 2.0 * av[i] * go[i];
    });
    return o;
}

Var vsum(Var a)
{
    Graph &g = *a.graph();
    const Tensor &av = a.value();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); i++)
        s += av[i];
    Var o = g.node("sum", Tensor::scalar(s));
    g.set_backward(o, [&g, a, o]() {
        const double go = g.grad_of(o)[0];
        Tensor &ga = g.grad_of(a);
        for (std::size_t i = 0; i < ga.size(); i++)
            ga[i] += go;
    });
    return o;
}

Var vmean(Var a)
{
    return scale(vsum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var dot(Var a, Var b)
{
    Graph &g = common_graph(a, b);
    const Tensor &av = a.value(), &bv = b.value();
    check_same_shape(av, bv, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); i++)
        s += av[i] * bv[i];
    Var o = g.node("dot", Tensor::scalar(s));
    g.set_backward(o, [&g, a, b, o]() {
        const double go = g.grad_of(o)[0];
        const Tensor &av = g.value_of(a);
        const Tensor &bv = g.value_of(b);
        Tensor &ga = g.grad_of(a);
        Tensor &gb = g.grad_of(b);
        for (std::size_t i = 0; i < av.size(); i++) {
            ga[i] += go * bv[i];
            gb[i] += go * av[i];
        }
    });
    return o;
}

Var matmul(Var a, Var b)
{
    Graph &g = common_graph(a, b);
    const Tensor &av = a.value(), &bv = b.value();
    if (!(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows()))
        fail("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({ m, n });
    for (std::size_t i = 0; i < m; i++) {
        double *dst = out.row(i).data();
        const double *arow = av.row(i).data();
        for (std::size_t p = 0; p < k; p++) {
            const double av_ip = arow[p];
            const double *brow = bv.row(p).data();
            for (std::size_t j = 0; j < n; j++)
                dst[j] += av_ip * brow[j];
        }
    }
    Var o = g.node("matmul", std::move(out));
    g.set_backward(o, [&g, a, b, o, m, k, n]() {
        const Tensor &go = g.grad_of(o);
        const Tensor &av = g.value_of(a);
        const Tensor &bv = g.value_of(b);
        Tensor &ga = g.grad_of(a);
        Tensor &gb = g.grad_of(b);
        // dA = dC · Bᵀ
        for (std::size_t i = 0; i < m; i++) {
            const double *grow = go.row(i).data();
            double *garow = ga.row(i).data();
            for (std::size_t p = 0; p < k; p++) {
                const double *brow = bv.row(p).data();
                double acc = 0.0;
                for (std::size_t j = 0; j < n; j++)
                    acc += grow[j] * brow[j];
                garow[p] += acc;
            }
        }
        // dB = Aᵀ · dC
        for (std::size_t i = 0; i < m; i++) {
            const double *arow = av.row(i).data();
            const double *grow = go.row(i).data();
            for (std::size_t p = 0; p < k; p++) {
                const double av_ip = arow[p];
                double *gbrow = gb.row(p).data();
                for (std::size_t j = 0; j < n; j++)
                    gbrow[j] += av_ip * grow[j];
            }
        }
    });
    return o;
}

Var matmul_nt(Var a, Var b)
{
    Graph &g = common_graph(a, b);
    const Tensor &av = a.value(), &bv = b.value();
    if (!(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.cols()))
        fail("matmul_nt: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor out({ m, n });
    for (std::size_t i = 0; i < m; i++) {
        const double *arow = av.row(i).data();
        double *dst = out.row(i).data();
        for (std::size_t j = 0; j < n; j++) {
            const double *brow = bv.row(j).data();
            double acc = 0.0;
            for (std::size_t p = 0; p < k; p++)
                acc += arow[p] * brow[p];
            dst[j] = acc;
        }
    }
    Var o = g.node("matmul_nt", std::move(out));
    g.set_backward(o, [&g, a, b, o, m, k, n]() {
        const Tensor &go = g.grad_of(o);
        const Tensor &av = g.value_of(a);
        const Tensor &bv = g.value_of(b);
        Tensor &ga = g.grad_of(a);
        Tensor &gb = g.grad_of(b);
        // dA = dC · B
        for (std::size_t i = 0; i < m; i++) {
            const double *grow = go.row(i).data();
            double *garow = ga.row(i).data();
            for (std::size_t j = 0; j < n; j++) {
                const double go_ij = grow[j];
                const double *brow = bv.row(j).data();
                for (std::size_t p = 0; p < k; p++)
                    garow[p] += go_ij * brow[p];
            }
        }
        // dB = dCᵀ · A
        for (std::size_t i = 0; i < m; i++) {
            const double *grow = go.row(i).data();
            const double *arow = av.row(i).data();
            for (std::size_t j = 0; j < n; j++) {
                const double go_ij = grow[j];
                double *gbrow = gb.row(j).data();
                for (std::size_t p = 0; p < k; p++)
                    gbrow[p] += go_ij * arow[p];
            }
        }
    });
    return o;
}

Var matvec(Var a, Var x)
{
    Graph &g = common_graph(a, x);
    const Tensor &av = a.value(), &xv = x.value();
    if (!(av.rank() == 2 && xv.rank() == 1 && av.cols() == xv.size()))
        fail("matvec: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(xv.shape()));
    const std::size_t m = av.rows(), n = av.cols();
    Tensor out({ m });
    for (std::size_t i = 0; i < m; i++) {
        const double *arow = av.row(i).data();
        double acc = 0.0;
        for (std::size_t j = 0; j < n; j++)
            acc += arow[j] * xv[j];
        out[i] = acc;
    }
    Var o = g.node("matvec", std::move(out));
    g.set_backward(o, [&g, a, x, o, m, n]() {
        const Tensor &go = g.grad_of(o);
        const Tensor &av = g.value_of(a);
        const Tensor &xv = g.value_of(x);
        Tensor &ga = g.grad_of(a);
        Tensor &gx = g.grad_of(x);
        for (std::size_t i = 0; i < m; i++) {
            const double go_i = go[i];
            double *garow = ga.row(i).data();
            const double *arow = av.row(i).data();
            for (std::size_t j = 0; j < n; j++) {
                garow[j] += go_i * xv[j];
                gx[j] += go_i * arow[j];
            }
        }
    });
    return o;
}

Var swish(Var x)
{
    Graph &g = *x.graph();
    const Tensor &xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); i++)
        out[i] = xv[i] * sigmoid(xv[i]);
    Var o = g.node("swish", std::move(out));
    g.set_backward(o, [&g, x, o]() {
        const Tensor &go = g.grad_of(o);
        const Tensor &xv = g.value_of(x);
        Tensor &gx = g.grad_of(x);
        for (std::size_t i = 0; i < go.size(); i++) {
            const double s = sigmoid(xv[i]);
            gx[i] += go[i] * (s + xv[i] * s * (1.0 - s));
        }
    });
    return o;
}

namespace {

// shared softmax backward: dq = s ⊙ (dL − ⟨dL, s⟩), applied per row
void softmax_backward_row(std::span<const double> s, std::span<const double> go, std::span<double> gq)
{
    double inner = 0.0;
    for (std::size_t i = 0; i < s.size(); i++)
        inner += go[i] * s[i];
    for (std::size_t i = 0; i < s.size(); i++)
        gq[i] += s[i] * (go[i] - inner);
}

} // namespace

Var softmax(Var v)
{
    Graph &g = *v.graph();
    const Tensor &vv = v.value();
    require(vv.rank() == 1 && vv.size() >= 1, "softmax: expects a non-empty rank-1 tensor");
    Tensor out(vv.shape());
    softmax_span({ vv.data(), vv.size() }, { out.data(), out.size() });
    Var o = g.node("softmax", std::move(out));
    g.set_backward(o, [&g, v, o]() {
        const Tensor &s = g.value_of(o);
        const Tensor &go = g.grad_of(o);
        Tensor &gv = g.grad_of(v);
        softmax_backward_row({ s.data(), s.size() }, { go.data(), go.size() }, { gv.data(), gv.size() });
    });
    return o;
}

Var softmax_rows(Var m)
{
    Graph &g = *m.graph();
    const Tensor &mv = m.value();
    require(mv.rank() == 2, "softmax_rows: expects a rank-2 tensor");
    Tensor out(mv.shape());
    for (std::size_t r = 0; r < mv.rows(); r++)
        softmax_span(mv.row(r), out.row(r));
    Var o = g.node("softmax_rows", std::move(out));
    g.set_backward(o, [&g, m, o]() {
        const Tensor &s = g.value_of(o);
        const Tensor &go = g.grad_of(o);
        Tensor &gm = g.grad_of(m);
        for (std::size_t r = 0; r < s.rows(); r++)
            softmax_backward_row(s.row(r), go.row(r), gm.row(r));
    });
    return o;
}

Var logsumexp_rows(Var m)
{
    Graph &g = *m.graph();
    const Tensor &mv = m.value();
    require(mv.rank() == 2, "logsumexp_rows: expects a rank-2 tensor");
    const std::size_t b = mv.rows(), w = mv.cols();
    Tensor out({ b });
    for (std::size_t r = 0; r < b; r++) {
        auto rowv = mv.row(r);
        double mx = rowv[0];
        for (double x : rowv)
            mx = std::max(mx, x);
        double acc = 0.0;
        for (double x : rowv)
            acc += std::exp(x - mx);
        out[r] = mx + std::log(acc);
    }
    Var o = g.node("logsumexp_rows", std::move(out));
    g.set_backward(o, [&g, m, o, b, w]() {
        const Tensor &mv = g.value_of(m);
        const Tensor &lse = g.value_of(o);
        const Tensor &go = g.grad_of(o);
        Tensor &gm = g.grad_of(m);
        for (std::size_t r = 0; r < b; r++) {
            auto rowv = mv.row(r);
            auto growm = gm.row(r);
            for (std::size_t j = 0; j < w; j++)
                growm[j] += go[r] * std::exp(rowv[j] - lse[r]);
        }
    });
    return o;
}

Var cosine(Var u, Var v)
{
    Graph &g = common_graph(u, v);
    const Tensor &uv = u.value(), &vv = v.value();
    check_same_shape(uv, vv, "cosine");
    constexpr double kEps = 1e-12;
    double uu = 0.0, vv2 = 0.0, uvdot = 0.0;
    for (std::size_t i = 0; i < uv.size(); i++) {
        uu += uv[i] * uv[i];
        vv2 += vv[i] * vv[i];
        uvdot += uv[i] * vv[i];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv2);
    const bool guarded = (nu < kEps || nv < kEps);
    double c = 0.0;
    bool denom_guarded = false;
    if (!guarded) {
        const double denom = std::max(nu * nv, kEps);
        denom_guarded = (nu * nv < kEps);
        c = std::clamp(uvdot / denom, -1.0, 1.0);
    }
    Var o = g.node("cosine", Tensor::scalar(c));
    if (!guarded) {
        g.set_backward(o, [&g, u, v, o, nu, nv, denom_guarded]() {
            const double go = g.grad_of(o)[0];
            const double c = g.value_of(o)[0];
            const Tensor &uv = g.value_of(u);
            const Tensor &vv = g.value_of(v);
            Tensor &gu = g.grad_of(u);
            Tensor &gv = g.grad_of(v);
            if (denom_guarded) {
                // denominator pinned at the epsilon: d(uᵀv/eps)
                const double inv = go / 1e-12;
                for (std::size_t i = 0; i < uv.size(); i++) {
                    gu[i] += inv * vv[i];
                    gv[i] += inv * uv[i];
                }
                return;
            }
            const double inv = 1.0 / (nu * nv);
            for (std::size_t i = 0; i < uv.size(); i++) {
                gu[i] += go * (vv[i] * inv - c * uv[i] / (nu * nu));
                gv[i] += go * (uv[i] * inv - c * vv[i] / (nv * nv));
            }
        });
    }
    return o;
}

Var row(Var m, std::size_t r)
{
    Graph &g = *m.graph();
    const Tensor &mv = m.value();
    require(mv.rank() == 2 && r < mv.rows(), "row: index out of range");
    const std::size_t w = mv.cols();
    Tensor out({ w });
    auto src = mv.row(r);
    for (std::size_t j = 0; j < w; j++)
        out[j] = src[j];
    Var o = g.node("row", std::move(out));
    g.set_backward(o, [&g, m, o, r]() {
        const Tensor &go = g.grad_of(o);
        Tensor &gm = g.grad_of(m);
        auto dst = gm.row(r);
        for (std::size_t j = 0; j < go.size(); j++)
            dst[j] += go[j];
    });
    return o;
}

Var elem(Var m, std::size_t r, std::size_t c)
{
    Graph &g = *m.graph();
    const Tensor &mv = m.value();
    require(mv.rank() == 2 && r < mv.rows() && c < mv.cols(), "elem: index out of range");
    Var o = g.node("elem", Tensor::scalar(mv.at(r, c)));
    g.set_backward(o, [&g, m, o, r, c]() {
        g.grad_of(m).at(r, c) += g.grad_of(o)[0];
    });
    return o;
}

Var mul_scalar(Var v, Var s)
{
    Graph &g = common_graph(v, s);
    const Tensor &vv = v.value();
    require(s.value().is_scalar(), "mul_scalar: second operand must be scalar");
    const double sv = s.value()[0];
    Tensor out(vv.shape());
    for (std::size_t i = 0; i < out.size(); i++)
        out[i] = vv[i] * sv;
    Var o = g.node("mul_scalar", std::move(out));
    g.set_backward(o, [&g, v, s, o]() {
        const Tensor &go = g.grad_of(o);
        const Tensor &vv = g.value_of(v);
        const double sv = g.value_of(s)[0];
        Tensor &gv = g.grad_of(v);
        double acc = 0.0;
        for (std::size_t i = 0; i < go.size(); i++) {
            gv[i] += go[i] * sv;
            acc += go[i] * vv[i];
        }
        g.grad_of(s)[0] += acc;
    });
    return o;
}

Var stack_rows(const std::vector<Var> &rows)
{
    require(!rows.empty(), "stack_rows: needs at least one row");
    Graph &g = *rows[0].graph();
    const std::size_t w = rows[0].value().size();
    Tensor out({ rows.size(), w });
    for (std::size_t r = 0; r < rows.size(); r++) {
        const Tensor &rv = rows[r].value();
        require(rv.rank() == 1 && rv.size() == w, "stack_rows: rows must be rank-1 of equal width");
        auto dst = out.row(r);
        for (std::size_t j = 0; j < w; j++)
            dst[j] = rv[j];
    }
    Var o = g.node("stack_rows", std::move(out));
    g.set_backward(o, [&g, rows, o]() {
        const Tensor &go = g.grad_of(o);
        for (std::size_t r = 0; r < rows.size(); r++) {
            Tensor &gr = g.grad_of(rows[r]);
            auto src = go.row(r);
            for (std::size_t j = 0; j < gr.size(); j++)
                gr[j] += src[j];
        }
    });
    return o;
}

Var mean_cols(Var m)
{
    Graph &g = *m.graph();
    const Tensor &mv = m.value();
    require(mv.rank() == 2, "mean_cols: expects a rank-2 tensor");
    const std::size_t b = mv.rows(), w = mv.cols();
    Tensor out({ w });
    for (std::size_t r = 0; r < b; r++) {
        auto src = mv.row(r);
        for (std::size_t j = 0; j < w; j++)
            out[j] += src[j];
    }
    const double inv = 1.0 / static_cast<double>(b);
    for (std::size_t j = 0; j < w; j++)
        out[j] *= inv;
    Var o = g.node("mean_cols", std::move(out));
    g.set_backward(o, [&g, m, o, b, w, inv]() {
        const Tensor &go = g.grad_of(o);
        Tensor &gm = g.grad_of(m);
        for (std::size_t r = 0; r < b; r++) {
            auto dst = gm.row(r);
            for (std::size_t j = 0; j < w; j++)
                dst[j] += go[j] * inv;
        }
    });
    return o;
}

Var embed(Var table, const std::vector<std::uint32_t> &ids)
{
    Graph &g = *table.graph();
    const Tensor &tv = table.value();
    require(tv.rank() == 2, "embed: table must be rank-2");
    require(!ids.empty(), "embed: empty id list");
    const std::size_t v = tv.rows(), h = tv.cols();
    for (std::uint32_t id : ids)
        if (id >= v)
            fail("embed: token id " + std::to_string(id) + " out of range (vocab " + std::to_string(v) + ")");
    Tensor out({ ids.size(), h });
    for (std::size_t r = 0; r < ids.size(); r++) {
        auto src = tv.row(ids[r]);
        auto dst = out.row(r);
        for (std::size_t j = 0; j < h; j++)
            dst[j] = src[j];
    }
    Var o = g.node("embed", std::move(out));
    g.set_backward(o, [&g, table, o, ids]() {
        const Tensor &go = g.grad_of(o);
        Tensor &gt = g.grad_of(table);
        for (std::size_t r = 0; r < ids.size(); r++) {
            auto src = go.row(r);
            auto dst = gt.row(ids[r]);
            for (std::size_t j = 0; j < dst.size(); j++)
                dst[j] += src[j];
        }
    });
    return o;
}

Var gather_rows(Var m, const std::vector<std::size_t> &rows)
{
    Graph &g = *m.graph();
    const Tensor &mv = m.value();
    require(mv.rank() == 2, "gather_rows: source must be rank-2");
    require(!rows.empty(), "gather_rows: empty row list");
    const std::size_t w = mv.cols();
    for (std::size_t r : rows)
        require(r < mv.rows(), "gather_rows: row index out of range");
    Tensor out({ rows.size(), w });
    for (std::size_t i = 0; i < rows.size(); i++) {
        auto src = mv.row(rows[i]);
        auto dst = out.row(i);
        for (std::size_t j = 0; j < w; j++)
            dst[j] = src[j];
    }
    Var o = g.node("gather_rows", std::move(out));
    g.set_backward(o, [&g, m, o, rows]() {
        const Tensor &go = g.grad_of(o);
        Tensor &gm = g.grad_of(m);
        for (std::size_t i = 0; i < rows.size(); i++) {
            auto src = go.row(i);
            auto dst = gm.row(rows[i]);
            for (std::size_t j = 0; j < dst.size(); j++)
                dst[j] += src[j];
        }
    });
    return o;
}

Var cross_entropy_mean(Var logits, const std::vector<std::uint32_t> &targets)
{
    Graph &g = *logits.graph();
    const Tensor &lv = logits.value();
    require(lv.rank() == 2, "cross_entropy_mean: logits must be rank-2");
    require(lv.rows() == targets.size(), "cross_entropy_mean: one target per row required");
    const std::size_t b = lv.rows(), w = lv.cols();
    for (std::uint32_t t : targets)
        require(t < w, "cross_entropy_mean: target out of range");
    double acc = 0.0;
    for (std::size_t r = 0; r < b; r++) {
        auto rowv = lv.row(r);
        double mx = rowv[0];
        for (double x : rowv)
            mx = std::max(mx, x);
        double denom = 0.0;
        for (double x : rowv)
            denom += std::exp(x - mx);
        acc += mx + std::log(denom) - rowv[targets[r]];
    }
    Var o = g.node("cross_entropy_mean", Tensor::scalar(acc / static_cast<double>(b)));
    g.set_backward(o, [&g, logits, o, targets, b, w]() {
        const double go = g.grad_of(o)[0] / static_cast<double>(b);
        const Tensor &lv = g.value_of(logits);
        Tensor &gl = g.grad_of(logits);
        std::vector<double> probs(w);
        for (std::size_t r = 0; r < b; r++) {
            softmax_span(lv.row(r), { probs.data(), w });
            auto dst = gl.row(r);
            for (std::size_t j = 0; j < w; j++)
                dst[j] += go * probs[j];
            dst[targets[r]] -= go;
        }
    });
    return o;
}

} // namespace moelab
