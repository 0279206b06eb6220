#pragma once

#include <string>
#include <vector>

#include <moelab/moe.hpp>
#include <moelab/theory.hpp>

namespace moelab {

struct SynthConfig {
    std::size_t clusters = 8;  // latent regions
    std::size_t vocab = 256;   // must cover the clusters
    std::size_t seq_len = 16;  // tokens per sequence
    std::size_t n_seqs = 512;  // sequences in the corpus
    double markov_stay = 0.9;  // probability the next token stays in the same cluster
    double embed_sep = 3.0;    // cluster-center separation in embedding space
    std::uint64_t seed = 1;

    void validate() const;
};

// Synthetic corpus with a known latent token-to-cluster allocation. Token
// ids are split evenly across clusters (exactly even when clusters divide
// the vocab); sequences follow a cluster-level Markov chain with the given
// stay probability and switch uniformly among the other clusters.
struct Corpus {
    SynthConfig cfg;
    std::vector<std::vector<std::uint32_t>> sequences;
    LatentAllocation allocation; // token id -> cluster id
};

Corpus generate_corpus(const SynthConfig &cfg);

std::uint32_t cluster_of_token(const SynthConfig &cfg, std::uint32_t token);

// Re-initializes the model's token embeddings as cluster center (scaled by
// embed_sep) plus unit Gaussian noise, making the latent allocation linearly
// recoverable at high separation.
void plant_embeddings(MoeModel &model, const LatentAllocation &allocation, double embed_sep, Rng rng);

// Corpus file: little-endian u32 token blocks, one per sequence, plus a JSON
// sidecar (<path>.json) carrying the config echo and the allocation map.
void write_corpus(const Corpus &corpus, const std::string &path);
Corpus read_corpus(const std::string &path);

} // namespace moelab
