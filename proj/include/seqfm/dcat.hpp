#pragma once

#include <string>
#include <vector>

#include "seqfm/model.hpp"

namespace seqfm {

// Batch rows -> unique rows mapping. rep[i] names the unique standing in for
// batch row i; first[u] is the batch row that unique u was taken from.
struct DedupPlan {
    int b = 0;
    int b_u = 0;
    std::vector<int> rep;
    std::vector<int> first;
};

// Dedup keyed on raw event content of the valid prefix (id, action, surface,
// timestamp); parameters and embeddings play no part in the key. First
// occurrence wins; order of uniques follows first appearance.
DedupPlan dedup_segments(const std::vector<Segment>& batch, std::vector<Segment>* uniques);

Mat broadcast_rows(const Mat& uniq, const DedupPlan& plan);
// Adjoint of broadcast_rows: sums duplicate-row gradients into unique rows.
Mat broadcast_adjoint_rows(const Mat& d_full, const DedupPlan& plan);

// Per-layer K/V of one unique sequence. Layers are stored even when their
// attention output was skipped; the crossing pass needs every layer's keys.
struct SeqKV {
    int n = 0;
    std::vector<Mat> k, v; // per layer, n x d_model
};

struct KVCache {
    int n_layers = 0;
    int d_model = 0;
    std::vector<SeqKV> seqs;

    size_t byte_size() const;
};

// Context pass: runs each unique sequence once, recording every layer's K/V.
// When emit_hidden is false the final layer computes only its K/V projections
// (its attention output would feed nothing). h_user, if given, receives the
// per-token output representations of each unique (requires emit_hidden).
KVCache context_forward(const TransformerParams& p, const IdEmbSource& ids,
                        const std::vector<Segment>& uniques, bool emit_hidden,
                        std::vector<Mat>* h_user = nullptr, int n_threads = 1);

// Raw input rows for candidate tokens: id embedding plus position pos_index[i]
// (one past the sequence the candidate is appended to). No action/surface.
Mat candidate_inputs(const TransformerParams& p, const IdEmbSource& ids,
                     const std::vector<u64>& items, const std::vector<int>& pos_index);

// Crossing pass: each candidate token attends over its unique's cached K/V
// plus itself, layer by layer, and returns the output representation rows.
// Equals the naive reference on the same inputs.
Mat cross_forward(const TransformerParams& p, const KVCache& cache, const DedupPlan& plan,
                  const Mat& e_cand, int n_threads = 1);

// Fixed-window variant: a rotated ring of `window` physical slots per unique,
// holding the newest window-1 tokens so one slot is always free for the
// candidate. start is the physical slot of the oldest kept token.
struct FixedSeqKV {
    int kept = 0;
    int start = 0;
    std::vector<Mat> k, v; // per layer, window x d_model; only kept slots valid
};

struct FixedKVCache {
    int window = 0;
    int n_layers = 0;
    int d_model = 0;
    std::vector<FixedSeqKV> seqs;

    size_t byte_size() const;
};

// Truncates each unique to its newest window-1 events (positions restart at
// zero) and runs the context pass into ring layout. rotation picks where the
// ring starts; results must not depend on it.
FixedKVCache context_forward_fixed(const TransformerParams& p, const IdEmbSource& ids,
                                   const std::vector<Segment>& uniques, int window,
                                   int rotation = 0, bool emit_hidden = false,
                                   std::vector<Mat>* h_user = nullptr, int n_threads = 1);

Mat cross_forward_fixed(const TransformerParams& p, const FixedKVCache& cache,
                        const DedupPlan& plan, const Mat& e_cand, int n_threads = 1);

// Reference implementation: one full forward of [sequence ++ candidate token]
// per batch row, output taken at the candidate position.
Mat naive_candidate_outputs(const TransformerParams& p, const IdEmbSource& ids,
                            const std::vector<Segment>& batch, const std::vector<u64>& items,
                            int n_threads = 1);

// ---------------------------------------------------------------------------

struct BenchArm {
    std::string name;
    double wall_s = 0.0; // median over trials
    double cand_per_s = 0.0;
    double attn_flops = 0.0;      // 4*d per (query, key) visit, all layers
    double est_total_flops = 0.0; // attention + linear/MLP terms
};

struct BenchResult {
    int batch = 0, dedup_ratio = 0, uniques = 0, seq_len = 0, window = 0;
    int trials = 0, threads = 0;
    BenchArm naive, dedup, fixed;
    double speedup_dedup = 0.0, speedup_fixed = 0.0; // naive wall / variant wall
    double attn_ratio_reported = 0.0; // naive.attn_flops / dedup.attn_flops
    double attn_ratio_analytic = 0.0; // B*L^2 / (B_u*L^2 + 2*B*L)
    double max_abs_diff_dedup = 0.0;  // output agreement vs naive, sanity
    double max_abs_diff_fixed = 0.0;  // vs naive when window > seq_len, else vs oracle skipped
};

// Deterministic synthetic inputs from seed; every arm scores the same batch.
// The dedup arm emits user hidden states (the production context pass does),
// so its attention cost is the analytic B_u*L^2 + 2*B*L term.
BenchResult run_bench(const TransformerParams& p, const IdEmbSource& ids, int batch,
                      int dedup_ratio, int seq_len, int window, int trials, int threads,
                      u64 seed);

} // namespace seqfm
