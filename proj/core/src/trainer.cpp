#include <moelab/trainer.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <memory>

#include <moelab/theory.hpp>

namespace moelab {

void TrainConfig::validate() const
{
    require(steps >= 1, "train config requires at least one step");
    require(batch_tokens >= 1, "train config requires a positive token batch");
    require(lr >= 0.0, "train config requires a non-negative learning rate");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
            "train config requires beta coefficients in [0, 1)");
    require(warmup_frac >= 0.0 && warmup_frac <= 1.0, "warmup_frac must lie in [0, 1]");
    require(eval_every >= 1 && checkpoint_every >= 1, "eval/checkpoint cadence must be positive");
    require(eval_seqs >= 1, "train config requires a non-empty eval subset");
    weights.validate();
}

AdamW::AdamW(double beta1, double beta2, double weight_decay, double eps) :
        beta1_(beta1),
        beta2_(beta2),
        weight_decay_(weight_decay),
        eps_(eps)
{
}

void AdamW::step(const std::vector<Parameter *> &params, double lr)
{
    if (m_.empty()) {
        for (Parameter *p : params) {
            m_.push_back(Tensor::zeros_like(p->value));
            v_.push_back(Tensor::zeros_like(p->value));
        }
    }
    require(m_.size() == params.size(), "AdamW: parameter list changed between steps");
    t_++;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params.size(); pi++) {
        Parameter &p = *params[pi];
        Tensor &m = m_[pi];
        Tensor &v = v_[pi];
        for (std::size_t i = 0; i < p.value.size(); i++) {
            const double g = p.grad[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p.value[i]);
        }
    }
}

std::optional<double> expert_overlap_metric(const std::vector<LayerOutput> &layer_outputs)
{
    double total = 0.0;
    std::size_t pairs = 0;
    for (const LayerOutput &lo : layer_outputs)
        for (std::size_t i = 0; i < lo.active.size(); i++) {
            const std::size_t slots = lo.active[i].size();
            for (std::size_t a = 0; a < slots; a++)
                for (std::size_t b = a + 1; b < slots; b++) {
                    auto za = lo.z_activation(i, a);
                    auto zb = lo.z_activation(i, b);
                    double d = 0.0, na = 0.0, nb = 0.0;
                    for (std::size_t j = 0; j < za.size(); j++) {
                        d += za[j] * zb[j];
                        na += za[j] * za[j];
                        nb += zb[j] * zb[j];
                    }
                    const double denom = std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
                    total += std::abs(std::clamp(d / denom, -1.0, 1.0));
                    pairs++;
                }
        }
    if (pairs == 0)
        return std::nullopt;
    return total / static_cast<double>(pairs);
}

double stability_fraction(const RoutingTrace &a, const RoutingTrace &b)
{
    require(a.config_matches(b), "stability_fraction: trace configs differ");
    require(a.step_count() == b.step_count(), "stability_fraction: step counts differ");
    std::size_t same = 0, total = 0;
    for (std::size_t s = 0; s < a.step_count(); s++)
        for (std::size_t l = 0; l < a.layers; l++)
            for (std::size_t i = 0; i < a.batch; i++) {
                require(a.at(s, l, i).token_id == b.at(s, l, i).token_id,
                        "stability_fraction: traces cover different token sets");
                if (a.top1(s, l, i) == b.top1(s, l, i))
                    same++;
                total++;
            }
    return static_cast<double>(same) / static_cast<double>(total);
}

Tensor conditional_activation_matrix(const RoutingTrace &trace, std::size_t layer)
{
    require(trace.step_count() > 0, "conditional_activation_matrix: empty trace");
    require(layer + 1 < trace.layers, "conditional_activation_matrix: needs a next layer");
    const std::size_t experts = trace.experts;
    Tensor m({ experts, experts });
    std::vector<std::size_t> row_counts(experts, 0);
    for (std::size_t s = 0; s < trace.step_count(); s++)
        for (std::size_t i = 0; i < trace.batch; i++) {
            const std::size_t e = trace.top1(s, layer, i);
            const std::size_t v = trace.top1(s, layer + 1, i);
            m.at(e, v) += 1.0;
            row_counts[e]++;
        }
    for (std::size_t e = 0; e < experts; e++)
        if (row_counts[e] > 0)
            for (std::size_t v = 0; v < experts; v++)
                m.at(e, v) /= static_cast<double>(row_counts[e]);
    return m;
}

namespace {

std::string fmt17(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Batch {
    std::vector<std::uint32_t> inputs;
    std::vector<std::uint32_t> targets;
};

Batch make_batch(const Corpus &corpus, const std::vector<std::size_t> &seq_indices)
{
    Batch b;
    const std::size_t positions = corpus.cfg.seq_len - 1;
    b.inputs.reserve(seq_indices.size() * positions);
    b.targets.reserve(seq_indices.size() * positions);
    for (std::size_t s : seq_indices) {
        const auto &seq = corpus.sequences[s];
        for (std::size_t p = 0; p < positions; p++) {
            b.inputs.push_back(seq[p]);
            b.targets.push_back(seq[p + 1]);
        }
    }
    return b;
}

struct EvalPass {
    LossBreakdown loss;
    MetricsRow row;
    RoutingTrace trace;
};

EvalPass evaluate(MoeModel &model, const Batch &batch, const LossWeights &weights, std::size_t step)
{
    Graph g;
    ForwardResult fwd = model_forward(g, model, batch.inputs);
    LossBundle bundle = total_loss(g, fwd.logits, batch.targets, fwd.layer_outputs, weights,
                                   model.cfg.top_k);

    EvalPass out;
    out.loss = bundle.values;
    out.trace = std::move(fwd.trace);

    MetricsRow &row = out.row;
    row.step = step;
    row.task = bundle.values.task;
    row.lb = bundle.values.lb;
    row.z = bundle.values.z;
    row.sp = bundle.values.sp;
    row.cp = bundle.values.cp;

    double entropy = 0.0;
    std::size_t rows = 0;
    for (const LayerOutput &lo : fwd.layer_outputs) {
        const Tensor &s = lo.scores.value();
        for (std::size_t i = 0; i < s.rows(); i++) {
            entropy += router_entropy(s.row(i));
            rows++;
        }
    }
    row.entropy = entropy / static_cast<double>(rows);

    const auto overlap = expert_overlap_metric(fwd.layer_outputs);
    row.overlap = overlap ? *overlap : std::numeric_limits<double>::quiet_NaN();

    if (model.cfg.layers >= 2) {
        double kappa = 0.0;
        for (std::size_t l = 0; l + 1 < model.cfg.layers; l++) {
            std::vector<std::uint32_t> c_l, c_l1;
            for (std::size_t i = 0; i < out.trace.batch; i++) {
                c_l.push_back(out.trace.top1(0, l, i));
                c_l1.push_back(out.trace.top1(0, l + 1, i));
            }
            kappa += coupling_coefficient(c_l, c_l1, model.cfg.experts).kappa;
        }
        row.kappa = kappa / static_cast<double>(model.cfg.layers - 1);
    } else {
        row.kappa = std::numeric_limits<double>::quiet_NaN();
    }

    double ratio_sum = 0.0;
    for (const LayerOutput &lo : fwd.layer_outputs) {
        std::vector<std::size_t> loads(model.cfg.experts, 0);
        for (const auto &set : lo.active)
            for (std::size_t e : set)
                loads[e]++;
        const auto [mn, mx] = std::minmax_element(loads.begin(), loads.end());
        ratio_sum += *mn == 0 ? std::numeric_limits<double>::infinity()
                              : static_cast<double>(*mx) / static_cast<double>(*mn);
    }
    row.load_ratio = ratio_sum / static_cast<double>(model.cfg.layers);
    return out;
}

struct FileCloser {
    void operator()(std::FILE *f) const
    {
        if (f)
            std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void put_u32(std::FILE *f, std::uint32_t v)
{
    unsigned char b[4] = { static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                           static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24) };
    std::fwrite(b, 1, 4, f);
}

void put_u64(std::FILE *f, std::uint64_t v)
{
    for (int i = 0; i < 8; i++)
        std::fputc(static_cast<int>((v >> (8 * i)) & 0xFF), f);
}

std::uint32_t get_u32(std::FILE *f, const std::string &path)
{
    unsigned char b[4];
    require(std::fread(b, 1, 4, f) == 4, "truncated checkpoint file: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::FILE *f, const std::string &path)
{
    std::uint64_t v = 0;
    for (int i = 0; i < 8; i++) {
        const int c = std::fgetc(f);
        require(c != EOF, "truncated checkpoint file: " + path);
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

} // namespace

std::string metrics_csv_header()
{
    return "step,task,lb,z,sp,cp,entropy,overlap,kappa,load_ratio";
}

std::string metrics_csv_row(const MetricsRow &r)
{
    std::string out = std::to_string(r.step);
    for (double v : { r.task, r.lb, r.z, r.sp, r.cp, r.entropy, r.overlap, r.kappa, r.load_ratio }) {
        out += ",";
        out += fmt17(v);
    }
    return out;
}

TrainResult train(MoeModel &model, const Corpus &corpus, const TrainConfig &cfg,
                  const std::string &out_dir, const std::string &config_echo)
{
    cfg.validate();
    corpus.cfg.validate();
    require(model.cfg.vocab == corpus.cfg.vocab, "train: model and corpus vocabularies differ");
    const std::size_t positions = corpus.cfg.seq_len - 1;
    require(cfg.batch_tokens % positions == 0,
            "train: batch_tokens must be a multiple of seq_len-1 (sequence-major batches)");
    const std::size_t batch_seqs = cfg.batch_tokens / positions;

    // fixed evaluation subset: the first eval_seqs sequences of the corpus
    std::vector<std::size_t> eval_indices;
    for (std::size_t s = 0; s < std::min(cfg.eval_seqs, corpus.cfg.n_seqs); s++)
        eval_indices.push_back(s);
    const Batch eval_batch = make_batch(corpus, eval_indices);

    FilePtr metrics_file;
    if (!out_dir.empty()) {
        const std::string path = out_dir + "/metrics.csv";
        metrics_file.reset(std::fopen(path.c_str(), "wb"));
        require(metrics_file != nullptr, "cannot open metrics file for writing: " + path);
        const std::string header = metrics_csv_header() + "\n";
        std::fwrite(header.data(), 1, header.size(), metrics_file.get());
    }

    AdamW opt(cfg.beta1, cfg.beta2, cfg.weight_decay);
    const std::vector<Parameter *> params = model.parameters();
    Rng batch_root(cfg.seed);

    const std::size_t warmup = static_cast<std::size_t>(cfg.warmup_frac * static_cast<double>(cfg.steps));

    TrainResult result;
    for (std::size_t step = 0; step < cfg.steps; step++) {
        Rng rng = batch_root.fork(step);
        std::vector<std::size_t> indices(batch_seqs);
        for (auto &i : indices)
            i = static_cast<std::size_t>(rng.below(corpus.cfg.n_seqs));
        const Batch batch = make_batch(corpus, indices);

        LossBreakdown values;
        try {
            Graph g;
            ForwardResult fwd = model_forward(g, model, batch.inputs);
            LossBundle bundle = total_loss(g, fwd.logits, batch.targets, fwd.layer_outputs,
                                           cfg.weights, model.cfg.top_k);
            values = bundle.values;
            model.zero_grads();
            g.backward(bundle.total);

            if (model.cfg.aux_loss_free) {
                for (std::size_t l = 0; l < model.cfg.layers; l++) {
                    std::vector<std::size_t> loads(model.cfg.experts, 0);
                    for (const auto &set : fwd.layer_outputs[l].active)
                        for (std::size_t e : set)
                            loads[e]++;
                    update_balancing_bias(model.layers[l], loads, model.cfg);
                }
            }
        } catch (const Error &e) {
            fail("training aborted at step " + std::to_string(step + 1) + ": " + e.what() +
                 " (last total=" + fmt17(result.final_loss.total) + ", task=" +
                 fmt17(result.final_loss.task) + ")");
        }
        result.final_loss = values;

        const double lr = warmup > 0 && step < warmup
                                  ? cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup)
                                  : cfg.lr;
        opt.step(params, lr);

        const std::size_t done = step + 1;
        const bool want_eval = done % cfg.eval_every == 0 || done == cfg.steps;
        const bool want_checkpoint = done % cfg.checkpoint_every == 0 || done == cfg.steps;
        if (!want_eval && !want_checkpoint)
            continue;

        EvalPass eval = evaluate(model, eval_batch, cfg.weights, done);
        if (want_eval) {
            result.metrics.push_back(eval.row);
            if (metrics_file) {
                const std::string line = metrics_csv_row(eval.row) + "\n";
                std::fwrite(line.data(), 1, line.size(), metrics_file.get());
            }
        }
        if (want_checkpoint &&
            (result.checkpoint_steps.empty() || result.checkpoint_steps.back() != done)) {
            result.checkpoint_steps.push_back(done);
            result.checkpoint_traces.push_back(eval.trace);
            if (!out_dir.empty()) {
                write_checkpoint(model, out_dir + "/checkpoint_" + std::to_string(done) + ".bin",
                                 config_echo);
                write_trace(eval.trace, out_dir + "/trace_" + std::to_string(done) + ".trace");
            }
        }
    }
    return result;
}

void write_checkpoint(const MoeModel &model, const std::string &path, const std::string &config_echo)
{
    FilePtr f(std::fopen(path.c_str(), "wb"));
    require(f != nullptr, "cannot open checkpoint file for writing: " + path);
    std::fwrite("MOEC", 1, 4, f.get());
    put_u32(f.get(), 1); // version
    put_u64(f.get(), config_echo.size());
    std::fwrite(config_echo.data(), 1, config_echo.size(), f.get());

    const auto params = model.parameters();
    put_u32(f.get(), static_cast<std::uint32_t>(params.size()));
    for (const Parameter *p : params) {
        put_u32(f.get(), static_cast<std::uint32_t>(p->name.size()));
        std::fwrite(p->name.data(), 1, p->name.size(), f.get());
        put_u32(f.get(), static_cast<std::uint32_t>(p->value.rank()));
        for (std::size_t d : p->value.shape())
            put_u64(f.get(), d);
        for (std::size_t i = 0; i < p->value.size(); i++) {
            std::uint64_t bits;
            const double v = p->value[i];
            std::memcpy(&bits, &v, 8);
            put_u64(f.get(), bits);
        }
    }
    require(std::ferror(f.get()) == 0, "write failure on checkpoint file: " + path);
}

std::string read_checkpoint(MoeModel &model, const std::string &path)
{
    FilePtr f(std::fopen(path.c_str(), "rb"));
    require(f != nullptr, "cannot open checkpoint file: " + path);
    char magic[4];
    require(std::fread(magic, 1, 4, f.get()) == 4 && std::memcmp(magic, "MOEC", 4) == 0,
            "bad magic in checkpoint file: " + path);
    const std::uint32_t version = get_u32(f.get(), path);
    require(version == 1, "unsupported checkpoint version in " + path);

    std::string echo(get_u64(f.get(), path), '\0');
    require(std::fread(echo.data(), 1, echo.size(), f.get()) == echo.size(),
            "truncated checkpoint file: " + path);

    const auto params = model.parameters();
    const std::uint32_t count = get_u32(f.get(), path);
    require(count == params.size(), "checkpoint parameter count mismatch in " + path);
    for (Parameter *p : params) {
        std::string name(get_u32(f.get(), path), '\0');
        require(std::fread(name.data(), 1, name.size(), f.get()) == name.size(),
                "truncated checkpoint file: " + path);
        require(name == p->name, "checkpoint parameter order mismatch: expected " + p->name +
                                         ", found " + name + " in " + path);
        const std::uint32_t rank = get_u32(f.get(), path);
        require(rank == p->value.rank(), "checkpoint shape mismatch for " + name);
        for (std::size_t d = 0; d < rank; d++)
            require(get_u64(f.get(), path) == p->value.dim(d), "checkpoint shape mismatch for " + name);
        for (std::size_t i = 0; i < p->value.size(); i++) {
            const std::uint64_t bits = get_u64(f.get(), path);
            double v;
            std::memcpy(&v, &bits, 8);
            p->value[i] = v;
        }
    }
    return echo;
}

} // namespace moelab
