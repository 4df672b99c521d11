#pragma once

#include <array>
#include <string>
#include <vector>

#include "seqfm/eval.hpp"
#include "seqfm/losses.hpp"
#include "seqfm/model.hpp"
#include "seqfm/optim.hpp"
#include "seqfm/seqdata.hpp"

namespace seqfm {

// Prediction heads of the toy ranking model. Order is the label layout of
// RankingExample and the column order of the head output matrices.
enum class RankHead { Save = 0, Click = 1, Hide = 2 };
inline constexpr int kRankHeadCount = 3;
const char* rank_head_name(RankHead h);

// How the candidate item meets the user sequence.
//   Base:     candidate token appended to the sequence (early fusion).
//   Aux:      like Base, but the candidate token embedding also carries the
//             projected auxiliary embedding.
//   AuxLt:    like Aux, plus a learnable token inserted before the candidate;
//             its output joins the selectors.
//   LiteMean: sequence runs without the candidate; selector is mean-pooled H.
//   LiteLast: same, selector is H at the last valid position.
enum class FusionVariant { Base, Aux, AuxLt, LiteMean, LiteLast };
const char* fusion_variant_name(FusionVariant v);
FusionVariant fusion_variant_from_name(const std::string& name);

// One fine-tuning sample: the user's newest events, a candidate item, its age
// at request time, an optional auxiliary item embedding, and per-head binary
// outcomes.
struct RankingExample {
    Segment seq;              // valid <= the configured event cap
    u64 candidate = 0;
    double age_seconds = 0.0; // request time minus item creation time
    Vec aux;                  // empty = absent
    std::array<int, kRankHeadCount> labels{0, 0, 0};
};

// Candidates scored together for one request; the HIT@3 evaluation group.
struct RankingGroup {
    u64 user_id = 0;
    std::vector<RankingExample> examples;
};

// Cold-start knobs. CIR swaps the candidate id for a random one during a
// fraction of training steps; IDD drops sequence-module outputs elementwise
// with an age-dependent probability. Both are identities at inference.
struct ColdStartConfig {
    bool cir = false;
    bool idd = false;
    double cir_prob = 0.10;
    double fresh_days = 7.0;  // idd band edges
    double mid_days = 28.0;
    double drop_fresh = 0.7;  // age < fresh_days
    double drop_mid = 0.5;    // fresh_days <= age < mid_days

    void validate() const;
};

// Trainable tensors owned by the ranking model (the "new" parameter group).
// The crossing MLP consumes [module outputs ++ candidate id embedding ++
// dense context features]; each head reads its own output column, so zeroing
// one head's slice cannot move the others. The module head sees module
// outputs alone. Names all start with "rank.".
struct RankingHeadParams {
    Param w1, b1, w2, b2;     // crossing MLP, w2: hidden x heads
    Param mod_w, mod_b;       // module-only head, d_module x heads
    Param aux_proj;           // d_aux -> d_emb, zero-initialized
    Param lt;                 // 1 x d_emb learnable token

    int d_module = 0; // width of the module-output feature block
    int d_feat = 0;   // full crossing input width

    // sel_per_example: module output vectors per example (2 for AuxLt, 1
    // otherwise, 0 when the sequence module is disabled).
    void init(int d_model, int d_emb, int d_aux, int n_ctx, int hidden, int sel_per_example,
              u64 seed);
    std::vector<Param*> all_params();
    void zero_grads();
};

struct FinetuneConfig {
    FusionVariant variant = FusionVariant::Base;
    ColdStartConfig cold;
    bool use_seq_module = true; // false: crossing sees only id emb + context
    int max_events = 32;        // newest events kept per example
    int crossing_hidden = 64;
    int d_aux = 16;
    double w_mod = 0.5;   // BCE on the module-only head
    double w_mse = 0.5;   // MSE(module logits, detached final logits)
    double w_align = 0.1; // cosine alignment of projected aux to id embedding
    double w_seq = 0.0;   // optional NTL+MTL on the finetuning sequences
    PretrainConfig seq_loss; // window etc. for the optional term

    int n_ctx() const { return 3 + 1 + kSurfaceCount; } // age band, length, surface
    int sel_per_example() const;
    void validate(const ModelConfig& model) const;
};

// Token rows for one example plus where the selectors live. Lite variants
// produce candidate-independent rows (bit-equal across candidates).
struct BuiltInput {
    Mat e;            // n x d_emb token rows
    int n = 0;
    int cand_pos = -1; // candidate token row; -1 for lite variants
    int lt_pos = -1;   // learnable-token row; -1 unless AuxLt
    Vec cand_emb;      // candidate id embedding (crossing feature)
};

// Builds the transformer input for one example under the variant rules.
// Errors: Aux/AuxLt without an auxiliary embedding.
BuiltInput build_input(const TransformerParams& p, const IdEmbSource& ids,
                       const RankingHeadParams& rp, FusionVariant variant,
                       const RankingExample& ex);

// With probability cfg.cir_prob (when enabled), replaces the candidate id
// with a uniform random 64-bit id. Labels are untouched. Training only;
// callers must not invoke it at inference.
RankingExample candidate_randomization(const RankingExample& ex, const ColdStartConfig& cfg,
                                       Rng& rng);

// Elementwise inverted dropout over the module-output selectors, probability
// chosen by the candidate's age band. Identity at inference and for ages past
// mid_days. Errors: negative age.
Mat item_age_dropout(const Mat& module_outputs, double age_seconds, const ColdStartConfig& cfg,
                     Rng& rng, bool training);

struct RankingOutputs {
    std::array<double, kRankHeadCount> prob{};
    std::array<double, kRankHeadCount> logit{};
    std::array<double, kRankHeadCount> module_logit{};
};

// Scores one example end to end (sequence module -> selectors -> crossing
// MLP). training applies CIR and IDD per cfg.cold; inference is
// deterministic. rng may be null when nothing stochastic is enabled.
RankingOutputs rank_forward(const TransformerParams& p, const IdEmbSource& ids,
                            const RankingHeadParams& rp, const RankingExample& ex,
                            const FinetuneConfig& cfg, bool training = false, Rng* rng = nullptr);

// Batch scorer for inference. Deduplicates identical sequences and reuses
// each unique's K/V cache across its candidates (Base/Aux), or computes the
// candidate-independent selector once per unique (lite variants). AuxLt falls
// back to the per-example path. Scores match rank_forward.
std::vector<RankingOutputs> rank_forward_batch(const TransformerParams& p,
                                               const IdEmbSource& ids,
                                               const RankingHeadParams& rp,
                                               const std::vector<RankingExample>& batch,
                                               const FinetuneConfig& cfg);

struct FinetuneLossValues {
    double total = 0;
    double bce_final = 0;
    double bce_module = 0;
    double mse = 0;
    double align = 0;
    double seq = 0; // ntl + mtl when w_seq > 0
    int examples = 0;
};

// Full-batch training loss:
//   mean BCE over final heads
//   + w_mod  * mean BCE over the module-only head
//   + w_mse  * mean squared gap between module logits and detached final logits
//   + w_align* mean cosine distance(projected aux, candidate id embedding)
//   + w_seq  * (l_ntl + l_mtl over the batch sequences)
// With sink non-null, gradients accumulate into p, rp and sink. train_rng
// drives CIR/IDD when enabled; leaving them off makes the loss deterministic.
FinetuneLossValues finetune_loss(TransformerParams& p, const HashedEmbeddingTable& table,
                                 RankingHeadParams& rp,
                                 const std::vector<RankingExample>& batch,
                                 const FinetuneConfig& cfg, Rng* train_rng = nullptr,
                                 EmbeddingGradSink* sink = nullptr);

// Parameter-group tag for the two-speed schedule: 0 = pretrained (transformer
// + id table), 1 = ranking-new (rank.*). Unknown names error.
int finetune_group(const std::string& param_name);

// Optimizer with the pretrained group at pretrained_factor * lr and the new
// group at lr. pretrained_factor 0 freezes the pretrained weights.
Optimizer make_finetune_optimizer(const OptimConfig& oc, TransformerParams& p,
                                  RankingHeadParams& rp, HashedEmbeddingTable* table,
                                  float pretrained_factor = 0.1f);

// ---------------------------------------------------------------------------
// Synthetic ranking data on top of SyntheticWorld. Candidate outcomes are
// Bernoulli draws tied to the user-item topic affinity, so sequence-aware
// models have signal to find; candidate ages span all freshness bands.

struct RankingDataConfig {
    int groups_per_user = 2;
    int group_size = 8;
    int max_events = 32;
    double in_topic_fraction = 0.5; // candidates drawn from the user's topics
    u64 rng_seed = 99;
};

std::vector<RankingGroup> make_ranking_groups(const std::vector<UserSequence>& seqs,
                                              const SyntheticWorld& world,
                                              const RankingDataConfig& rc);

// Scores every group and fills a ScoredGroup per request for the HIT@3
// metrics. Inference mode; ages are converted to days.
std::vector<ScoredGroup> score_groups(const TransformerParams& p, const IdEmbSource& ids,
                                      const RankingHeadParams& rp,
                                      const std::vector<RankingGroup>& groups,
                                      const FinetuneConfig& cfg);

// ---------------------------------------------------------------------------
// Training driver.

struct FinetuneRunConfig {
    FinetuneConfig ft;
    RankingDataConfig data;
    OptimConfig optim;
    float pretrained_factor = 0.1f;
    int batch_examples = 64;
    int epochs = 2;
    u64 seed = 5;
    double val_fraction = 0.2; // group-level split by user hash
    int log_every = 0;

    std::string to_config_text() const;
};

struct FinetuneEpochStats {
    int epoch = 0;
    int steps = 0;
    FinetuneLossValues loss; // term-weighted means over the epoch
    MetricReport report;     // held-out HIT@3 per head and age band
};

struct FinetuneResult {
    RankingHeadParams rank;
    std::vector<FinetuneEpochStats> epochs;
    int train_groups = 0, val_groups = 0;
};

// Fine-tunes the given model (mutated in place) on synthetic ranking groups
// derived from `seqs` and `world`. Emits one line per epoch with per-head
// HIT@3 overall / <7d / 7-28d. Deterministic for a fixed config.
FinetuneResult finetune_run(TransformerParams& p, HashedEmbeddingTable& table,
                            const std::vector<UserSequence>& seqs, const SyntheticWorld& world,
                            const FinetuneRunConfig& cfg, std::ostream* log = nullptr);

} // namespace seqfm
