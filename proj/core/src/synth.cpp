#include <moelab/synth.hpp>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

#include <json.hpp>

namespace moelab {

void SynthConfig::validate() const
{
    require(clusters >= 1 && clusters <= vocab, "synth config requires 1 <= clusters <= vocab");
    require(seq_len >= 2, "synth config requires sequences of at least two tokens");
    require(n_seqs >= 1, "synth config requires at least one sequence");
    require(markov_stay >= 0.0 && markov_stay <= 1.0, "markov_stay must lie in [0, 1]");
    require(embed_sep >= 0.0, "embed_sep must be non-negative");
}

std::uint32_t cluster_of_token(const SynthConfig &cfg, std::uint32_t token)
{
    // even block split; exactly balanced when clusters | vocab
    return static_cast<std::uint32_t>((static_cast<std::size_t>(token) * cfg.clusters) / cfg.vocab);
}

Corpus generate_corpus(const SynthConfig &cfg)
{
    cfg.validate();

    Corpus out;
    out.cfg = cfg;
    out.allocation.regions = cfg.clusters;
    out.allocation.assign.resize(cfg.vocab);
    std::vector<std::vector<std::uint32_t>> members(cfg.clusters);
    for (std::uint32_t t = 0; t < cfg.vocab; t++) {
        const std::uint32_t c = cluster_of_token(cfg, t);
        out.allocation.assign[t] = c;
        members[c].push_back(t);
    }

    Rng root(cfg.seed);
    out.sequences.resize(cfg.n_seqs);
    for (std::size_t s = 0; s < cfg.n_seqs; s++) {
        Rng rng = root.fork(s);
        std::uint32_t cluster = static_cast<std::uint32_t>(rng.below(cfg.clusters));
        auto &seq = out.sequences[s];
        seq.reserve(cfg.seq_len);
        for (std::size_t p = 0; p < cfg.seq_len; p++) {
            const auto &pool = members[cluster];
            seq.push_back(pool[rng.below(pool.size())]);
            if (cfg.clusters > 1 && rng.uniform() >= cfg.markov_stay) {
                // switch uniformly among the other clusters
                std::uint32_t next = static_cast<std::uint32_t>(rng.below(cfg.clusters - 1));
                if (next >= cluster)
                    next++;
                cluster = next;
            }
        }
    }
    return out;
}

void plant_embeddings(MoeModel &model, const LatentAllocation &allocation, double embed_sep, Rng rng)
{
    require(allocation.assign.size() == model.cfg.vocab,
            "plant_embeddings: allocation must cover the model vocabulary");
    const std::size_t hidden = model.cfg.hidden;

    std::vector<std::vector<double>> centers(allocation.regions, std::vector<double>(hidden, 0.0));
    for (auto &center : centers) {
        double norm = 0.0;
        for (double &x : center) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (double &x : center)
            x = embed_sep * x / norm;
    }
    for (std::uint32_t t = 0; t < model.cfg.vocab; t++) {
        const auto &center = centers[allocation.assign[t]];
        for (std::size_t j = 0; j < hidden; j++)
            model.embedding.value.at(t, j) = center[j] + rng.normal();
    }
}

namespace {

struct FileCloser {
    void operator()(std::FILE *f) const
    {
        if (f)
            std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

nlohmann::ordered_json config_json(const SynthConfig &cfg)
{
    return { { "clusters", cfg.clusters }, { "vocab", cfg.vocab },
             { "seq_len", cfg.seq_len },   { "n_seqs", cfg.n_seqs },
             { "markov_stay", cfg.markov_stay }, { "embed_sep", cfg.embed_sep },
             { "seed", cfg.seed } };
}

} // namespace

void write_corpus(const Corpus &corpus, const std::string &path)
{
    FilePtr f(std::fopen(path.c_str(), "wb"));
    require(f != nullptr, "cannot open corpus file for writing: " + path);
    for (const auto &seq : corpus.sequences)
        for (std::uint32_t t : seq) {
            unsigned char b[4] = { static_cast<unsigned char>(t), static_cast<unsigned char>(t >> 8),
                                   static_cast<unsigned char>(t >> 16),
                                   static_cast<unsigned char>(t >> 24) };
            std::fwrite(b, 1, 4, f.get());
        }
    require(std::ferror(f.get()) == 0, "write failure on corpus file: " + path);
    f.reset();

    nlohmann::ordered_json side;
    side["config"] = config_json(corpus.cfg);
    side["allocation"] = corpus.allocation.assign;
    const std::string side_path = path + ".json";
    FilePtr sf(std::fopen(side_path.c_str(), "wb"));
    require(sf != nullptr, "cannot open corpus sidecar for writing: " + side_path);
    const std::string text = side.dump(2) + "\n";
    std::fwrite(text.data(), 1, text.size(), sf.get());
    require(std::ferror(sf.get()) == 0, "write failure on corpus sidecar: " + side_path);
}

Corpus read_corpus(const std::string &path)
{
    const std::string side_path = path + ".json";
    FilePtr sf(std::fopen(side_path.c_str(), "rb"));
    require(sf != nullptr, "cannot open corpus sidecar: " + side_path);
    std::string text;
    char buf[4096];
    std::size_t got;
    while ((got = std::fread(buf, 1, sizeof(buf), sf.get())) > 0)
        text.append(buf, got);
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(text);
    } catch (const std::exception &e) {
        fail("malformed corpus sidecar " + side_path + ": " + e.what());
    }

    Corpus corpus;
    const auto &cj = side.at("config");
    corpus.cfg.clusters = cj.at("clusters").get<std::size_t>();
    corpus.cfg.vocab = cj.at("vocab").get<std::size_t>();
    corpus.cfg.seq_len = cj.at("seq_len").get<std::size_t>();
    corpus.cfg.n_seqs = cj.at("n_seqs").get<std::size_t>();
    corpus.cfg.markov_stay = cj.at("markov_stay").get<double>();
    corpus.cfg.embed_sep = cj.at("embed_sep").get<double>();
    corpus.cfg.seed = cj.at("seed").get<std::uint64_t>();
    corpus.cfg.validate();
    corpus.allocation.assign = side.at("allocation").get<std::vector<std::uint32_t>>();
    corpus.allocation.regions = corpus.cfg.clusters;
    require(corpus.allocation.assign.size() == corpus.cfg.vocab,
            "corpus sidecar allocation does not cover the vocabulary: " + side_path);

    FilePtr f(std::fopen(path.c_str(), "rb"));
    require(f != nullptr, "cannot open corpus file: " + path);
    corpus.sequences.assign(corpus.cfg.n_seqs, {});
    for (auto &seq : corpus.sequences) {
        seq.resize(corpus.cfg.seq_len);
        for (auto &t : seq) {
            unsigned char b[4];
            require(std::fread(b, 1, 4, f.get()) == 4, "truncated corpus file: " + path);
            t = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
            require(t < corpus.cfg.vocab, "corpus token out of range: " + path);
        }
    }
    return corpus;
}

} // namespace moelab
