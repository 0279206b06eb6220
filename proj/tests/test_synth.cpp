#include <doctest.h>

#include <cmath>
#include <cstdio>

#include <moelab/synth.hpp>

using namespace moelab;

namespace {

SynthConfig small_synth()
{
    SynthConfig cfg;
    cfg.clusters = 4;
    cfg.vocab = 16;
    cfg.seq_len = 12;
    cfg.n_seqs = 64;
    cfg.markov_stay = 0.8;
    cfg.seed = 5;
    return cfg;
}

} // namespace

TEST_SUITE_BEGIN("synth");

TEST_CASE("allocation is exactly balanced when clusters divide the vocab")
{
    SynthConfig cfg = small_synth();
    Corpus corpus = generate_corpus(cfg);
    std::vector<std::size_t> counts(cfg.clusters, 0);
    for (std::uint32_t c : corpus.allocation.assign)
        counts[c]++;
    for (std::size_t c : counts)
        CHECK(c == cfg.vocab / cfg.clusters);
}

TEST_CASE("stay probability one keeps each sequence in one cluster")
{
    SynthConfig cfg = small_synth();
    cfg.markov_stay = 1.0;
    Corpus corpus = generate_corpus(cfg);
    for (const auto &seq : corpus.sequences) {
        const std::uint32_t c0 = corpus.allocation.assign[seq[0]];
        for (std::uint32_t t : seq)
            CHECK(corpus.allocation.assign[t] == c0);
    }
}

TEST_CASE("uniform switching gives uniform cluster marginals")
{
    SynthConfig cfg = small_synth();
    cfg.clusters = 4;
    cfg.markov_stay = 0.25; // stay probability 1/n means uniform transitions
    cfg.n_seqs = 512;
    cfg.seq_len = 32;
    Corpus corpus = generate_corpus(cfg);
    std::vector<std::size_t> counts(cfg.clusters, 0);
    std::size_t total = 0;
    for (const auto &seq : corpus.sequences)
        for (std::uint32_t t : seq) {
            counts[corpus.allocation.assign[t]]++;
            total++;
        }
    const double expect = static_cast<double>(total) / static_cast<double>(cfg.clusters);
    const double sigma = std::sqrt(expect * (1.0 - 1.0 / static_cast<double>(cfg.clusters)));
    for (std::size_t c : counts)
        CHECK(std::abs(static_cast<double>(c) - expect) < 3.0 * sigma);
}

TEST_CASE("same seed reproduces the corpus exactly")
{
    SynthConfig cfg = small_synth();
    Corpus a = generate_corpus(cfg);
    Corpus b = generate_corpus(cfg);
    CHECK(a.sequences == b.sequences);
    CHECK(a.allocation.assign == b.allocation.assign);
}

TEST_CASE("invalid configs are rejected")
{
    SynthConfig cfg = small_synth();
    cfg.clusters = 32;
    CHECK_THROWS_AS(generate_corpus(cfg), Error);
    cfg = small_synth();
    cfg.markov_stay = 1.5;
    CHECK_THROWS_AS(generate_corpus(cfg), Error);
}

TEST_CASE("corpus round-trips through its file format")
{
    SynthConfig cfg = small_synth();
    Corpus corpus = generate_corpus(cfg);
    const std::string path = "/tmp/moelab_corpus_test.bin";
    write_corpus(corpus, path);
    Corpus back = read_corpus(path);
    CHECK(back.sequences == corpus.sequences);
    CHECK(back.allocation.assign == corpus.allocation.assign);
    CHECK(back.cfg.seed == cfg.seed);
    std::remove(path.c_str());
    std::remove((path + ".json").c_str());
}

namespace {

double probe_accuracy(const MoeModel &model, const LatentAllocation &alloc)
{
    // nearest-centroid linear probe on the embedding rows
    const std::size_t hidden = model.cfg.hidden;
    std::vector<std::vector<double>> centroids(alloc.regions, std::vector<double>(hidden, 0.0));
    std::vector<std::size_t> counts(alloc.regions, 0);
    for (std::uint32_t t = 0; t < model.cfg.vocab; t++) {
        for (std::size_t j = 0; j < hidden; j++)
            centroids[alloc.assign[t]][j] += model.embedding.value.at(t, j);
        counts[alloc.assign[t]]++;
    }
    for (std::size_t c = 0; c < alloc.regions; c++)
        for (double &x : centroids[c])
            x /= static_cast<double>(counts[c]);

    std::size_t correct = 0;
    for (std::uint32_t t = 0; t < model.cfg.vocab; t++) {
        std::size_t best = 0;
        double bd = 0.0;
        for (std::size_t c = 0; c < alloc.regions; c++) {
            double d = 0.0;
            for (std::size_t j = 0; j < hidden; j++) {
                const double diff = model.embedding.value.at(t, j) - centroids[c][j];
                d += diff * diff;
            }
            if (c == 0 || d < bd) {
                bd = d;
                best = c;
            }
        }
        if (best == alloc.assign[t])
            correct++;
    }
    return static_cast<double>(correct) / static_cast<double>(model.cfg.vocab);
}

} // namespace

TEST_CASE("planted embeddings")
{
    MoeConfig mc;
    mc.experts = 4;
    mc.top_k = 2;
    mc.layers = 1;
    mc.hidden = 32;
    mc.ffn = 16;
    mc.vocab = 64;
    SynthConfig sc = small_synth();
    sc.vocab = 64;
    sc.clusters = 8;
    Corpus corpus = generate_corpus(sc);

    SUBCASE("high separation makes clusters linearly recoverable")
    {
        Rng rng(7);
        MoeModel model = MoeModel::init(mc, rng);
        plant_embeddings(model, corpus.allocation, 10.0, Rng(7).fork(3));
        CHECK(probe_accuracy(model, corpus.allocation) >= 0.99);
    }

    SUBCASE("probe accuracy weakly increases with separation")
    {
        double prev = -1.0;
        for (double sep : { 0.5, 2.0, 8.0 }) {
            Rng rng(8);
            MoeModel model = MoeModel::init(mc, rng);
            plant_embeddings(model, corpus.allocation, sep, Rng(8).fork(3));
            const double acc = probe_accuracy(model, corpus.allocation);
            CHECK(acc >= prev);
            prev = acc;
        }
    }

    SUBCASE("deterministic under a fixed seed")
    {
        Rng rng(9);
        MoeModel a = MoeModel::init(mc, rng);
        Rng rng2(9);
        MoeModel b = MoeModel::init(mc, rng2);
        plant_embeddings(a, corpus.allocation, 3.0, Rng(11));
        plant_embeddings(b, corpus.allocation, 3.0, Rng(11));
        for (std::size_t i = 0; i < a.embedding.value.size(); i++)
            CHECK(a.embedding.value[i] == b.embedding.value[i]);
    }
}

TEST_SUITE_END();
