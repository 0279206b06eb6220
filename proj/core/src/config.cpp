#include <moelab/config.hpp>

#include <cstdio>
#include <cstdlib>
#include <memory>

#include <moelab/rng.hpp>

namespace moelab {

std::uint64_t RunConfig::init_seed() const
{
    return Rng(seed).fork(1).seed();
}

std::uint64_t RunConfig::corpus_seed() const
{
    return Rng(seed).fork(2).seed();
}

std::uint64_t RunConfig::plant_seed() const
{
    return Rng(seed).fork(3).seed();
}

std::uint64_t RunConfig::batch_seed() const
{
    return Rng(seed).fork(4).seed();
}

void RunConfig::validate() const
{
    model.validate();
    synth.validate();
    train.validate();
    require(model.vocab == synth.vocab, "config: [model] vocab and [synth] vocab must agree");
    require(shards >= 1 && model.experts % shards == 0,
            "config: [placement] shards must divide the expert count");
    require(remote_penalty >= 0.0 && remote_penalty < 1.0,
            "config: remote_penalty must lie in [0, 1)");
}

bool RunConfig::operator==(const RunConfig &o) const
{
    return emit_config(*this) == emit_config(o);
}

RunConfig default_run_config()
{
    RunConfig cfg;
    cfg.model.experts = 8;
    cfg.model.top_k = 2;
    cfg.model.layers = 4;
    cfg.model.hidden = 32;
    cfg.model.ffn = 64;
    cfg.model.vocab = 256;
    cfg.synth.clusters = 8;
    cfg.synth.vocab = 256;
    cfg.synth.seq_len = 16;
    cfg.synth.n_seqs = 512;
    return cfg;
}

namespace {

std::string fmt17(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct Parser {
    const std::string &origin;
    std::string section;
    int line_no = 0;

    [[noreturn]] void error(const std::string &msg) const
    {
        throw UsageError(origin + ":" + std::to_string(line_no) + ": " + msg);
    }

    std::size_t to_size(const std::string &v) const
    {
        try {
            std::size_t pos = 0;
            const unsigned long long parsed = std::stoull(v, &pos);
            if (pos != v.size())
                error("trailing characters after integer value '" + v + "'");
            return static_cast<std::size_t>(parsed);
        } catch (const UsageError &) {
            throw;
        } catch (const std::exception &) {
            error("expected a non-negative integer, got '" + v + "'");
        }
    }

    std::uint64_t to_u64(const std::string &v) const { return to_size(v); }

    double to_double(const std::string &v) const
    {
        char *end = nullptr;
        const double parsed = std::strtod(v.c_str(), &end);
        if (end == v.c_str() || *end != '\0')
            error("expected a real number, got '" + v + "'");
        return parsed;
    }

    bool to_bool(const std::string &v) const
    {
        if (v == "true")
            return true;
        if (v == "false")
            return false;
        error("expected true or false, got '" + v + "'");
    }
};

std::string trim(const std::string &s)
{
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t'))
        b++;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r'))
        e--;
    return s.substr(b, e - b);
}

} // namespace

RunConfig parse_config(const std::string &text, const std::string &origin)
{
    RunConfig cfg = default_run_config();
    Parser p{ origin, "", 0 };

    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        p.line_no++;

        const std::size_t hash = line.find('#');
        if (hash != std::string::npos)
            line = line.substr(0, hash);
        line = trim(line);
        if (line.empty())
            continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                p.error("unterminated section header");
            p.section = line.substr(1, line.size() - 2);
            const bool known = p.section == "run" || p.section == "model" || p.section == "synth" ||
                               p.section == "train" || p.section == "loss" || p.section == "placement";
            if (!known)
                p.error("unknown section [" + p.section + "]");
            continue;
        }

        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            p.error("expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            p.error("empty key");
        if (value.empty())
            p.error("empty value for key '" + key + "'");
        if (p.section.empty())
            p.error("key '" + key + "' appears before any section header");

        if (p.section == "run") {
            if (key == "seed")
                cfg.seed = p.to_u64(value);
            else if (key == "out_dir")
                cfg.out_dir = value;
            else
                p.error("unknown key '" + key + "' in section [run]");
        } else if (p.section == "model") {
            if (key == "experts")
                cfg.model.experts = p.to_size(value);
            else if (key == "top_k")
                cfg.model.top_k = p.to_size(value);
            else if (key == "layers")
                cfg.model.layers = p.to_size(value);
            else if (key == "hidden")
                cfg.model.hidden = p.to_size(value);
            else if (key == "ffn")
                cfg.model.ffn = p.to_size(value);
            else if (key == "vocab")
                cfg.model.vocab = p.to_size(value);
            else if (key == "shared_expert")
                cfg.model.shared_expert = p.to_bool(value);
            else if (key == "aux_loss_free")
                cfg.model.aux_loss_free = p.to_bool(value);
            else if (key == "bias_step")
                cfg.model.bias_step = p.to_double(value);
            else
                p.error("unknown key '" + key + "' in section [model]");
        } else if (p.section == "synth") {
            if (key == "clusters")
                cfg.synth.clusters = p.to_size(value);
            else if (key == "seq_len")
                cfg.synth.seq_len = p.to_size(value);
            else if (key == "n_seqs")
                cfg.synth.n_seqs = p.to_size(value);
            else if (key == "markov_stay")
                cfg.synth.markov_stay = p.to_double(value);
            else if (key == "embed_sep")
                cfg.synth.embed_sep = p.to_double(value);
            else
                p.error("unknown key '" + key + "' in section [synth]");
        } else if (p.section == "train") {
            if (key == "steps")
                cfg.train.steps = p.to_size(value);
            else if (key == "batch_tokens")
                cfg.train.batch_tokens = p.to_size(value);
            else if (key == "lr")
                cfg.train.lr = p.to_double(value);
            else if (key == "beta1")
                cfg.train.beta1 = p.to_double(value);
            else if (key == "beta2")
                cfg.train.beta2 = p.to_double(value);
            else if (key == "weight_decay")
                cfg.train.weight_decay = p.to_double(value);
            else if (key == "warmup_frac")
                cfg.train.warmup_frac = p.to_double(value);
            else if (key == "eval_every")
                cfg.train.eval_every = p.to_size(value);
            else if (key == "checkpoint_every")
                cfg.train.checkpoint_every = p.to_size(value);
            else if (key == "eval_seqs")
                cfg.train.eval_seqs = p.to_size(value);
            else
                p.error("unknown key '" + key + "' in section [train]");
        } else if (p.section == "loss") {
            if (key == "lambda_lb")
                cfg.train.weights.lambda_lb = p.to_double(value);
            else if (key == "lambda_z")
                cfg.train.weights.lambda_z = p.to_double(value);
            else if (key == "lambda_sp")
                cfg.train.weights.lambda_sp = p.to_double(value);
            else if (key == "lambda_cp")
                cfg.train.weights.lambda_cp = p.to_double(value);
            else
                p.error("unknown key '" + key + "' in section [loss]");
        } else if (p.section == "placement") {
            if (key == "shards")
                cfg.shards = p.to_size(value);
            else if (key == "remote_penalty")
                cfg.remote_penalty = p.to_double(value);
            else
                p.error("unknown key '" + key + "' in section [placement]");
        }
    }

    // the synthetic vocabulary always follows the model's
    cfg.synth.vocab = cfg.model.vocab;
    cfg.synth.seed = cfg.corpus_seed();
    cfg.train.seed = cfg.batch_seed();
    try {
        cfg.validate();
    } catch (const Error &e) {
        throw UsageError(origin + ": " + e.what());
    }
    return cfg;
}

RunConfig load_config(const std::string &path)
{
    std::FILE *f = std::fopen(path.c_str(), "rb");
    if (!f)
        throw UsageError("cannot open config file: " + path);
    std::string text;
    char buf[4096];
    std::size_t got;
    while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0)
        text.append(buf, got);
    std::fclose(f);
    return parse_config(text, path);
}

std::string emit_config(const RunConfig &cfg)
{
    std::string out;
    out += "[run]\n";
    out += "seed = " + std::to_string(cfg.seed) + "\n";
    if (!cfg.out_dir.empty())
        out += "out_dir = " + cfg.out_dir + "\n";
    out += "\n[model]\n";
    out += "experts = " + std::to_string(cfg.model.experts) + "\n";
    out += "top_k = " + std::to_string(cfg.model.top_k) + "\n";
    out += "layers = " + std::to_string(cfg.model.layers) + "\n";
    out += "hidden = " + std::to_string(cfg.model.hidden) + "\n";
    out += "ffn = " + std::to_string(cfg.model.ffn) + "\n";
    out += "vocab = " + std::to_string(cfg.model.vocab) + "\n";
    out += std::string("shared_expert = ") + (cfg.model.shared_expert ? "true" : "false") + "\n";
    out += std::string("aux_loss_free = ") + (cfg.model.aux_loss_free ? "true" : "false") + "\n";
    out += "bias_step = " + fmt17(cfg.model.bias_step) + "\n";
    out += "\n[synth]\n";
    out += "clusters = " + std::to_string(cfg.synth.clusters) + "\n";
    out += "seq_len = " + std::to_string(cfg.synth.seq_len) + "\n";
    out += "n_seqs = " + std::to_string(cfg.synth.n_seqs) + "\n";
    out += "markov_stay = " + fmt17(cfg.synth.markov_stay) + "\n";
    out += "embed_sep = " + fmt17(cfg.synth.embed_sep) + "\n";
    out += "\n[train]\n";
    out += "steps = " + std::to_string(cfg.train.steps) + "\n";
    out += "batch_tokens = " + std::to_string(cfg.train.batch_tokens) + "\n";
    out += "lr = " + fmt17(cfg.train.lr) + "\n";
    out += "beta1 = " + fmt17(cfg.train.beta1) + "\n";
    out += "beta2 = " + fmt17(cfg.train.beta2) + "\n";
    out += "weight_decay = " + fmt17(cfg.train.weight_decay) + "\n";
    out += "warmup_frac = " + fmt17(cfg.train.warmup_frac) + "\n";
    out += "eval_every = " + std::to_string(cfg.train.eval_every) + "\n";
    out += "checkpoint_every = " + std::to_string(cfg.train.checkpoint_every) + "\n";
    out += "eval_seqs = " + std::to_string(cfg.train.eval_seqs) + "\n";
    out += "\n[loss]\n";
    out += "lambda_lb = " + fmt17(cfg.train.weights.lambda_lb) + "\n";
    out += "lambda_z = " + fmt17(cfg.train.weights.lambda_z) + "\n";
    out += "lambda_sp = " + fmt17(cfg.train.weights.lambda_sp) + "\n";
    out += "lambda_cp = " + fmt17(cfg.train.weights.lambda_cp) + "\n";
    out += "\n[placement]\n";
    out += "shards = " + std::to_string(cfg.shards) + "\n";
    out += "remote_penalty = " + fmt17(cfg.remote_penalty) + "\n";
    return out;
}

} // namespace moelab
