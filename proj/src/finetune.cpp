#include "seqfm/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ostream>
#include <sstream>

#include "seqfm/dcat.hpp"

namespace seqfm {

const char* rank_head_name(RankHead h) {
    switch (h) {
        case RankHead::Save: return "save";
        case RankHead::Click: return "click";
        case RankHead::Hide: return "hide";
    }
    return "?";
}

const char* fusion_variant_name(FusionVariant v) {
    switch (v) {
        case FusionVariant::Base: return "base";
        case FusionVariant::Aux: return "aux";
        case FusionVariant::AuxLt: return "aux-lt";
        case FusionVariant::LiteMean: return "lite-mean";
        case FusionVariant::LiteLast: return "lite-last";
    }
    return "?";
}

FusionVariant fusion_variant_from_name(const std::string& name) {
    for (FusionVariant v : {FusionVariant::Base, FusionVariant::Aux, FusionVariant::AuxLt,
                            FusionVariant::LiteMean, FusionVariant::LiteLast})
        if (name == fusion_variant_name(v)) return v;
    SEQFM_CHECK(false, "unknown fusion variant '" << name << "'");
    return FusionVariant::Base;
}

void ColdStartConfig::validate() const {
    SEQFM_CHECK(cir_prob >= 0.0 && cir_prob <= 1.0, "cir_prob must be in [0,1]");
    SEQFM_CHECK(drop_fresh >= 0.0 && drop_fresh < 1.0, "drop_fresh must be in [0,1)");
    SEQFM_CHECK(drop_mid >= 0.0 && drop_mid < 1.0, "drop_mid must be in [0,1)");
    SEQFM_CHECK(fresh_days > 0.0 && fresh_days < mid_days,
                "age bands must satisfy 0 < fresh_days < mid_days");
}

int FinetuneConfig::sel_per_example() const {
    if (!use_seq_module) return 0;
    return variant == FusionVariant::AuxLt ? 2 : 1;
}

void FinetuneConfig::validate(const ModelConfig& model) const {
    cold.validate();
    SEQFM_CHECK(max_events >= 0, "max_events must be >= 0");
    SEQFM_CHECK(crossing_hidden >= 1, "crossing_hidden must be >= 1");
    SEQFM_CHECK(w_mod >= 0 && w_mse >= 0 && w_align >= 0 && w_seq >= 0,
                "loss weights must be non-negative");
    // room for the learnable and candidate tokens after the sequence
    SEQFM_CHECK(model.max_len >= max_events + 2,
                "model.max_len " << model.max_len << " too small for max_events " << max_events
                                 << " plus candidate tokens");
    if (variant == FusionVariant::Aux || variant == FusionVariant::AuxLt)
        SEQFM_CHECK(d_aux >= 1, "aux variants need d_aux >= 1");
    if (!use_seq_module) {
        SEQFM_CHECK(variant == FusionVariant::Base,
                    "disabling the sequence module requires the base variant");
        SEQFM_CHECK(w_seq == 0, "sequence loss needs the sequence module");
    }
    if (w_seq > 0) seq_loss.validate(std::max(2, max_events));
}

// ---------------------------------------------------------------------------
// Parameters

void RankingHeadParams::init(int d_model, int d_emb, int d_aux, int n_ctx, int hidden,
                             int sel_per_example, u64 seed) {
    d_module = sel_per_example * d_model;
    d_feat = d_module + d_emb + n_ctx;
    Rng rng(mix64(seed ^ 0x72616e6bULL));

    w1 = Param("rank.cross.w1", d_feat, hidden);
    b1 = Param("rank.cross.b1", 1, hidden);
    w2 = Param("rank.cross.w2", hidden, kRankHeadCount);
    b2 = Param("rank.cross.b2", 1, kRankHeadCount);
    w1.init_gaussian(rng, std::sqrt(2.0f / static_cast<float>(d_feat)));
    w2.init_gaussian(rng, 0.02f);

    mod_w = Param("rank.module.w", d_module, kRankHeadCount);
    mod_b = Param("rank.module.b", 1, kRankHeadCount);
    mod_w.init_gaussian(rng, 0.02f);

    // zero so aux variants start exactly equal to base; the BCE path still
    // produces a gradient through the candidate token
    aux_proj = Param("rank.aux_proj", d_aux, d_emb);
    lt = Param("rank.lt", 1, d_emb);
    lt.init_gaussian(rng, 0.02f);
}

std::vector<Param*> RankingHeadParams::all_params() {
    return {&w1, &b1, &w2, &b2, &mod_w, &mod_b, &aux_proj, &lt};
}

void RankingHeadParams::zero_grads() {
    for (Param* p : all_params()) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Cold start

RankingExample candidate_randomization(const RankingExample& ex, const ColdStartConfig& cfg,
                                       Rng& rng) {
    RankingExample out = ex;
    if (cfg.cir && rng.uniform() < cfg.cir_prob) out.candidate = rng.next_u64();
    return out;
}

namespace {

double idd_drop_prob(double age_seconds, const ColdStartConfig& cfg) {
    SEQFM_CHECK(age_seconds >= 0.0, "candidate age must be non-negative, got " << age_seconds);
    double days = age_seconds / 86400.0;
    if (days < cfg.fresh_days) return cfg.drop_fresh;
    if (days < cfg.mid_days) return cfg.drop_mid;
    return 0.0;
}

// mask-returning core; mask is empty for the identity case
Mat idd_apply(const Mat& x, double age_seconds, const ColdStartConfig& cfg, Rng* rng,
              bool training, Mat* mask_out) {
    double pd = idd_drop_prob(age_seconds, cfg);
    if (!training || !cfg.idd || pd <= 0.0 || x.size() == 0) {
        if (mask_out) *mask_out = Mat();
        return x;
    }
    SEQFM_CHECK(rng != nullptr, "inverted dropout needs an rng during training");
    Mat mask(x.rows, x.cols);
    Mat y(x.rows, x.cols);
    float scale = static_cast<float>(1.0 / (1.0 - pd));
    for (size_t i = 0; i < x.a.size(); i++) {
        float m = rng->uniform() >= pd ? scale : 0.0f;
        mask.a[i] = m;
        y.a[i] = x.a[i] * m;
    }
    if (mask_out) *mask_out = std::move(mask);
    return y;
}

} // namespace

Mat item_age_dropout(const Mat& module_outputs, double age_seconds, const ColdStartConfig& cfg,
                     Rng& rng, bool training) {
    return idd_apply(module_outputs, age_seconds, cfg, &rng, training, nullptr);
}

// ---------------------------------------------------------------------------
// Input assembly

BuiltInput build_input(const TransformerParams& p, const IdEmbSource& ids,
                       const RankingHeadParams& rp, FusionVariant variant,
                       const RankingExample& ex) {
    const int d_emb = p.cfg.d_emb;
    SEQFM_CHECK(ids.emb_dim() == d_emb, "id source dim mismatch");
    const int n_seq = ex.seq.valid;

    BuiltInput bi;
    bi.cand_emb.assign(static_cast<size_t>(d_emb), 0.0f);
    ids.lookup_id(ex.candidate, bi.cand_emb.data());

    const bool lite = variant == FusionVariant::LiteMean || variant == FusionVariant::LiteLast;
    const bool with_lt = variant == FusionVariant::AuxLt;
    const bool with_aux = variant == FusionVariant::Aux || variant == FusionVariant::AuxLt;

    bi.n = lite ? n_seq : n_seq + (with_lt ? 2 : 1);
    SEQFM_CHECK(bi.n <= p.cfg.max_len,
                "input of " << bi.n << " tokens exceeds max_len " << p.cfg.max_len);
    bi.e = Mat(bi.n, d_emb);
    if (n_seq > 0) {
        Mat seq_rows = segment_inputs(p, ids, ex.seq.events.data(), n_seq);
        std::memcpy(bi.e.row(0), seq_rows.a.data(), sizeof(float) * seq_rows.size());
    }
    if (lite) return bi;

    const bool learned_pos = p.cfg.pos_mode == ModelConfig::PosMode::Learned;
    if (with_lt) {
        bi.lt_pos = n_seq;
        float* row = bi.e.row(bi.lt_pos);
        std::memcpy(row, rp.lt.v.row(0), sizeof(float) * static_cast<size_t>(d_emb));
        if (learned_pos) axpy(1.0f, p.pos_emb.v.row(bi.lt_pos), row, d_emb);
    }
    bi.cand_pos = bi.n - 1;
    float* crow = bi.e.row(bi.cand_pos);
    std::memcpy(crow, bi.cand_emb.data(), sizeof(float) * static_cast<size_t>(d_emb));
    if (with_aux) {
        SEQFM_CHECK(!ex.aux.empty(), "variant '" << fusion_variant_name(variant)
                                                 << "' requires an auxiliary embedding");
        SEQFM_CHECK(static_cast<int>(ex.aux.size()) == rp.aux_proj.v.rows,
                    "aux dim " << ex.aux.size() << " != projector rows " << rp.aux_proj.v.rows);
        for (int i = 0; i < rp.aux_proj.v.rows; i++)
            axpy(ex.aux[static_cast<size_t>(i)], rp.aux_proj.v.row(i), crow, d_emb);
    }
    if (learned_pos) axpy(1.0f, p.pos_emb.v.row(bi.cand_pos), crow, d_emb);
    return bi;
}

// ---------------------------------------------------------------------------
// Forward core shared by training, inference, and the batch path

namespace {

void ctx_features(const RankingExample& ex, const FinetuneConfig& cfg, float* out) {
    double days = ex.age_seconds / 86400.0;
    SEQFM_CHECK(ex.age_seconds >= 0.0, "candidate age must be non-negative");
    int n_ctx = cfg.n_ctx();
    std::fill(out, out + n_ctx, 0.0f);
    out[days < cfg.cold.fresh_days ? 0 : days < cfg.cold.mid_days ? 1 : 2] = 1.0f;
    out[3] = cfg.max_events > 0
                 ? std::min(1.0f, static_cast<float>(ex.seq.valid) /
                                      static_cast<float>(cfg.max_events))
                 : 0.0f;
    if (ex.seq.valid > 0) {
        Surface s = ex.seq.events[static_cast<size_t>(ex.seq.valid - 1)].surface;
        out[4 + static_cast<int>(s)] = 1.0f;
    }
}

struct ExCache {
    RankingExample ex; // after candidate randomization
    BuiltInput bi;
    ForwardCache fc;
    Mat H;
    Mat sel;      // sel_per_example x d_model, after dropout
    Mat idd_mask; // empty when the dropout was an identity
    Mat feat;     // 1 x d_feat
    Mat z1, a1;   // 1 x hidden
    Mat logits;   // 1 x heads
    Mat mlogits;  // 1 x heads
};

// selector rows according to the variant; H may be empty for lite variants
// with no valid events
Mat gather_selectors(const Mat& H, const BuiltInput& bi, FusionVariant variant, int d_model) {
    switch (variant) {
        case FusionVariant::Base:
        case FusionVariant::Aux: {
            Mat s(1, d_model);
            std::memcpy(s.row(0), H.row(bi.cand_pos), sizeof(float) * static_cast<size_t>(d_model));
            return s;
        }
        case FusionVariant::AuxLt: {
            Mat s(2, d_model);
            std::memcpy(s.row(0), H.row(bi.lt_pos), sizeof(float) * static_cast<size_t>(d_model));
            std::memcpy(s.row(1), H.row(bi.cand_pos), sizeof(float) * static_cast<size_t>(d_model));
            return s;
        }
        case FusionVariant::LiteMean: {
            Mat s(1, d_model);
            if (H.rows > 0) {
                for (int i = 0; i < H.rows; i++) axpy(1.0f, H.row(i), s.row(0), d_model);
                for (int j = 0; j < d_model; j++) s.at(0, j) /= static_cast<float>(H.rows);
            }
            return s;
        }
        case FusionVariant::LiteLast: {
            Mat s(1, d_model);
            if (H.rows > 0)
                std::memcpy(s.row(0), H.row(H.rows - 1),
                            sizeof(float) * static_cast<size_t>(d_model));
            return s;
        }
    }
    return Mat();
}

// adjoint of gather_selectors into dH
void scatter_selectors(const Mat& dsel, const BuiltInput& bi, FusionVariant variant, Mat& dH) {
    int d = dsel.cols;
    switch (variant) {
        case FusionVariant::Base:
        case FusionVariant::Aux:
            axpy(1.0f, dsel.row(0), dH.row(bi.cand_pos), d);
            return;
        case FusionVariant::AuxLt:
            axpy(1.0f, dsel.row(0), dH.row(bi.lt_pos), d);
            axpy(1.0f, dsel.row(1), dH.row(bi.cand_pos), d);
            return;
        case FusionVariant::LiteMean:
            if (dH.rows > 0) {
                float inv = 1.0f / static_cast<float>(dH.rows);
                for (int i = 0; i < dH.rows; i++) axpy(inv, dsel.row(0), dH.row(i), d);
            }
            return;
        case FusionVariant::LiteLast:
            if (dH.rows > 0) axpy(1.0f, dsel.row(0), dH.row(dH.rows - 1), d);
            return;
    }
}

// crossing MLP given already-gathered selectors; fills feat/z1/a1/logits
void crossing_forward(const RankingHeadParams& rp, const FinetuneConfig& cfg, const Mat& sel,
                      const Vec& cand_emb, const RankingExample& ex, ExCache& ec) {
    ec.feat = Mat(1, rp.d_feat);
    float* f = ec.feat.row(0);
    if (rp.d_module > 0)
        std::memcpy(f, sel.a.data(), sizeof(float) * static_cast<size_t>(rp.d_module));
    std::memcpy(f + rp.d_module, cand_emb.data(), sizeof(float) * cand_emb.size());
    ctx_features(ex, cfg, f + rp.d_module + static_cast<int>(cand_emb.size()));

    matmul(ec.feat, rp.w1.v, ec.z1);
    for (int j = 0; j < ec.z1.cols; j++) ec.z1.at(0, j) += rp.b1.v.at(0, j);
    ec.a1 = Mat(1, ec.z1.cols);
    for (int j = 0; j < ec.z1.cols; j++) ec.a1.at(0, j) = gelu(ec.z1.at(0, j));
    matmul(ec.a1, rp.w2.v, ec.logits);
    for (int j = 0; j < kRankHeadCount; j++) ec.logits.at(0, j) += rp.b2.v.at(0, j);

    ec.mlogits = Mat(1, kRankHeadCount);
    if (rp.d_module > 0) {
        Mat selflat(1, rp.d_module);
        std::memcpy(selflat.row(0), sel.a.data(), sizeof(float) * static_cast<size_t>(rp.d_module));
        matmul(selflat, rp.mod_w.v, ec.mlogits);
    }
    for (int j = 0; j < kRankHeadCount; j++) ec.mlogits.at(0, j) += rp.mod_b.v.at(0, j);
}

void forward_one(const TransformerParams& p, const IdEmbSource& ids, const RankingHeadParams& rp,
                 const FinetuneConfig& cfg, const RankingExample& ex_in, bool training, Rng* rng,
                 ExCache& ec) {
    if (training && cfg.cold.cir) {
        SEQFM_CHECK(rng != nullptr, "candidate randomization needs an rng");
        ec.ex = candidate_randomization(ex_in, cfg.cold, *rng);
    } else {
        ec.ex = ex_in;
    }
    SEQFM_CHECK(ec.ex.age_seconds >= 0.0, "candidate age must be non-negative");

    if (cfg.use_seq_module) {
        ec.bi = build_input(p, ids, rp, cfg.variant, ec.ex);
        if (ec.bi.n > 0) ec.H = forward_rows(p, ec.bi.e, &ec.fc);
        Mat raw = gather_selectors(ec.H, ec.bi, cfg.variant, p.cfg.d_model);
        ec.sel = idd_apply(raw, ec.ex.age_seconds, cfg.cold, rng, training, &ec.idd_mask);
    } else {
        ec.bi.cand_emb.assign(static_cast<size_t>(p.cfg.d_emb), 0.0f);
        ids.lookup_id(ec.ex.candidate, ec.bi.cand_emb.data());
        ec.sel = Mat();
    }
    crossing_forward(rp, cfg, ec.sel, ec.bi.cand_emb, ec.ex, ec);
}

RankingOutputs outputs_from(const ExCache& ec) {
    RankingOutputs out;
    for (int j = 0; j < kRankHeadCount; j++) {
        double l = ec.logits.at(0, j);
        out.logit[static_cast<size_t>(j)] = l;
        out.prob[static_cast<size_t>(j)] = 1.0 / (1.0 + std::exp(-l));
        out.module_logit[static_cast<size_t>(j)] = ec.mlogits.at(0, j);
    }
    return out;
}

double bce_with_logit(double l, int y) {
    return std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::abs(l)));
}

double sigmoidd(double l) { return 1.0 / (1.0 + std::exp(-l)); }

// gradients of the crossing MLP and module head back to the selectors and the
// candidate id embedding feature
void crossing_backward(RankingHeadParams& rp, const ExCache& ec, const Mat& dlogits,
                       const Mat& dmlogits, Mat& dsel, Vec& dcand_emb) {
    matmul_at_b_acc(ec.a1, dlogits, rp.w2.g);
    for (int j = 0; j < kRankHeadCount; j++) rp.b2.g.at(0, j) += dlogits.at(0, j);
    Mat da1;
    matmul_a_bt(dlogits, rp.w2.v, da1);
    for (int j = 0; j < da1.cols; j++) da1.at(0, j) *= gelu_grad(ec.z1.at(0, j));
    matmul_at_b_acc(ec.feat, da1, rp.w1.g);
    for (int j = 0; j < da1.cols; j++) rp.b1.g.at(0, j) += da1.at(0, j);
    Mat dfeat;
    matmul_a_bt(da1, rp.w1.v, dfeat);

    if (rp.d_module > 0) {
        Mat selflat(1, rp.d_module);
        std::memcpy(selflat.row(0), ec.sel.a.data(),
                    sizeof(float) * static_cast<size_t>(rp.d_module));
        matmul_at_b_acc(selflat, dmlogits, rp.mod_w.g);
        Mat dselflat;
        matmul_a_bt(dmlogits, rp.mod_w.v, dselflat);
        for (int j = 0; j < rp.d_module; j++) dfeat.at(0, j) += dselflat.at(0, j);
    }
    for (int j = 0; j < kRankHeadCount; j++) rp.mod_b.g.at(0, j) += dmlogits.at(0, j);

    dsel = Mat(ec.sel.rows, ec.sel.cols);
    if (rp.d_module > 0)
        std::memcpy(dsel.a.data(), dfeat.row(0), sizeof(float) * static_cast<size_t>(rp.d_module));
    int d_emb = static_cast<int>(ec.bi.cand_emb.size());
    dcand_emb.assign(static_cast<size_t>(d_emb), 0.0f);
    std::memcpy(dcand_emb.data(), dfeat.row(0) + rp.d_module,
                sizeof(float) * static_cast<size_t>(d_emb));
}

} // namespace

RankingOutputs rank_forward(const TransformerParams& p, const IdEmbSource& ids,
                            const RankingHeadParams& rp, const RankingExample& ex,
                            const FinetuneConfig& cfg, bool training, Rng* rng) {
    ExCache ec;
    forward_one(p, ids, rp, cfg, ex, training, rng, ec);
    return outputs_from(ec);
}

// ---------------------------------------------------------------------------
// Batch inference

std::vector<RankingOutputs> rank_forward_batch(const TransformerParams& p,
                                               const IdEmbSource& ids,
                                               const RankingHeadParams& rp,
                                               const std::vector<RankingExample>& batch,
                                               const FinetuneConfig& cfg) {
    std::vector<RankingOutputs> out(batch.size());
    if (batch.empty()) return out;

    bool empty_seq = false;
    for (const RankingExample& ex : batch) empty_seq |= ex.seq.valid == 0;

    // paths without a shared-context shortcut run one example at a time; the
    // learnable token sits between context and candidate, so its output is
    // cheap only in the full per-example pass
    if (!cfg.use_seq_module || cfg.variant == FusionVariant::AuxLt || empty_seq) {
        for (size_t i = 0; i < batch.size(); i++) out[i] = rank_forward(p, ids, rp, batch[i], cfg);
        return out;
    }

    std::vector<Segment> segs(batch.size());
    for (size_t i = 0; i < batch.size(); i++) segs[i] = batch[i].seq;
    std::vector<Segment> uniques;
    DedupPlan plan = dedup_segments(segs, &uniques);

    if (cfg.variant == FusionVariant::LiteMean || cfg.variant == FusionVariant::LiteLast) {
        // candidate-independent selector, once per unique sequence
        std::vector<Mat> sel_u(uniques.size());
        for (size_t u = 0; u < uniques.size(); u++) {
            Mat H = model_forward(p, ids, uniques[u]);
            BuiltInput dummy;
            dummy.n = H.rows;
            sel_u[u] = gather_selectors(H, dummy, cfg.variant, p.cfg.d_model);
        }
        for (size_t i = 0; i < batch.size(); i++) {
            ExCache ec;
            ec.ex = batch[i];
            ec.bi.cand_emb.assign(static_cast<size_t>(p.cfg.d_emb), 0.0f);
            ids.lookup_id(ec.ex.candidate, ec.bi.cand_emb.data());
            ec.sel = sel_u[static_cast<size_t>(plan.rep[static_cast<int>(i)])];
            crossing_forward(rp, cfg, ec.sel, ec.bi.cand_emb, ec.ex, ec);
            out[i] = outputs_from(ec);
        }
        return out;
    }

    // base/aux: one context pass per unique, then every candidate token
    // crosses against its cached keys and values
    KVCache cache = context_forward(p, ids, uniques, /*emit_hidden=*/false);
    std::vector<u64> items(batch.size());
    std::vector<int> pos_index(batch.size());
    for (size_t i = 0; i < batch.size(); i++) {
        items[i] = batch[i].candidate;
        pos_index[i] = uniques[static_cast<size_t>(plan.rep[static_cast<int>(i)])].valid;
    }
    Mat e_cand = candidate_inputs(p, ids, items, pos_index);
    if (cfg.variant == FusionVariant::Aux) {
        for (size_t i = 0; i < batch.size(); i++) {
            const Vec& aux = batch[i].aux;
            SEQFM_CHECK(!aux.empty(), "variant 'aux' requires an auxiliary embedding");
            SEQFM_CHECK(static_cast<int>(aux.size()) == rp.aux_proj.v.rows,
                        "aux dim mismatch in batch");
            for (int r = 0; r < rp.aux_proj.v.rows; r++)
                axpy(aux[static_cast<size_t>(r)], rp.aux_proj.v.row(r),
                     e_cand.row(static_cast<int>(i)), p.cfg.d_emb);
        }
    }
    Mat H_cand = cross_forward(p, cache, plan, e_cand);
    for (size_t i = 0; i < batch.size(); i++) {
        ExCache ec;
        ec.ex = batch[i];
        ec.bi.cand_emb.assign(static_cast<size_t>(p.cfg.d_emb), 0.0f);
        ids.lookup_id(ec.ex.candidate, ec.bi.cand_emb.data());
        ec.sel = Mat(1, p.cfg.d_model);
        std::memcpy(ec.sel.row(0), H_cand.row(static_cast<int>(i)),
                    sizeof(float) * static_cast<size_t>(p.cfg.d_model));
        crossing_forward(rp, cfg, ec.sel, ec.bi.cand_emb, ec.ex, ec);
        out[i] = outputs_from(ec);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loss

FinetuneLossValues finetune_loss(TransformerParams& p, const HashedEmbeddingTable& table,
                                 RankingHeadParams& rp,
                                 const std::vector<RankingExample>& batch,
                                 const FinetuneConfig& cfg, Rng* train_rng,
                                 EmbeddingGradSink* sink) {
    const int B = static_cast<int>(batch.size());
    SEQFM_CHECK(B >= 1, "finetune_loss needs a non-empty batch");
    const bool training = train_rng != nullptr;
    const bool aux_variant =
        cfg.variant == FusionVariant::Aux || cfg.variant == FusionVariant::AuxLt;

    FinetuneLossValues out;
    out.examples = B;

    std::vector<ExCache> ecs(batch.size());
    for (size_t i = 0; i < batch.size(); i++)
        forward_one(p, table, rp, cfg, batch[i], training, train_rng, ecs[i]);

    // per-example head gradients, filled as the terms are accumulated
    std::vector<Mat> dlogits(batch.size()), dmlogits(batch.size());
    for (size_t i = 0; i < batch.size(); i++) {
        dlogits[i] = Mat(1, kRankHeadCount);
        dmlogits[i] = Mat(1, kRankHeadCount);
    }

    const double invB = 1.0 / B;
    for (size_t i = 0; i < batch.size(); i++) {
        const ExCache& ec = ecs[i];
        for (int h = 0; h < kRankHeadCount; h++) {
            int y = ec.ex.labels[static_cast<size_t>(h)];
            double l = ec.logits.at(0, h);
            out.bce_final += bce_with_logit(l, y) * invB;
            dlogits[i].at(0, h) += static_cast<float>((sigmoidd(l) - y) * invB);
            if (rp.d_module > 0) {
                double ml = ec.mlogits.at(0, h);
                out.bce_module += bce_with_logit(ml, y) * invB;
                dmlogits[i].at(0, h) +=
                    static_cast<float>(cfg.w_mod * (sigmoidd(ml) - y) * invB);
                // distillation toward the final logit, which stays detached
                double gap = ml - l;
                out.mse += gap * gap / kRankHeadCount * invB;
                dmlogits[i].at(0, h) +=
                    static_cast<float>(cfg.w_mse * 2.0 * gap / kRankHeadCount * invB);
            }
        }
    }

    // cosine alignment of the projected aux embedding to the id embedding
    if (aux_variant && cfg.w_align > 0) {
        for (size_t i = 0; i < batch.size(); i++) {
            const ExCache& ec = ecs[i];
            const Vec& aux = ec.ex.aux;
            int d_emb = p.cfg.d_emb;
            Vec u(static_cast<size_t>(d_emb), 0.0f);
            for (int r = 0; r < rp.aux_proj.v.rows; r++)
                axpy(aux[static_cast<size_t>(r)], rp.aux_proj.v.row(r), u.data(), d_emb);
            const Vec& v = ec.bi.cand_emb;
            double nu = l2_norm(u.data(), d_emb), nv = l2_norm(v.data(), d_emb);
            if (nu < 1e-8 || nv < 1e-8) {
                out.align += invB; // worst-case distance, no usable direction
                continue;
            }
            double c = dot(u.data(), v.data(), d_emb) / (nu * nv);
            out.align += (1.0 - c) * invB;
            if (sink) {
                double s = cfg.w_align * invB;
                for (int j = 0; j < d_emb; j++) {
                    double du = -(v[static_cast<size_t>(j)] / (nu * nv) -
                                  c * u[static_cast<size_t>(j)] / (nu * nu));
                    for (int r = 0; r < rp.aux_proj.v.rows; r++)
                        rp.aux_proj.g.at(r, j) +=
                            static_cast<float>(s * du * aux[static_cast<size_t>(r)]);
                }
            }
        }
    }

    // optional contrastive loss over the batch sequences, sharing the H rows
    TargetPool pool;
    LossPlan plan;
    MlpCache psi_cache;
    Mat h_all, dh_all, dz;
    std::vector<int> offsets(batch.size(), -1);
    if (cfg.w_seq > 0) {
        std::vector<std::vector<int>> maps(batch.size());
        int total = 0;
        for (size_t i = 0; i < batch.size(); i++) {
            const Segment& seg = ecs[i].ex.seq;
            maps[i].assign(static_cast<size_t>(seg.length()), -1);
            for (int t = 0; t < seg.valid; t++)
                if (cfg.seq_loss.is_positive(seg.events[static_cast<size_t>(t)].action))
                    maps[i][static_cast<size_t>(t)] =
                        pool.add(seg.user_id, seg.events[static_cast<size_t>(t)].item_id);
            offsets[i] = total;
            total += seg.valid;
        }
        Mat item_embs(pool.size(), table.d_emb());
        for (int r = 0; r < pool.size(); r++)
            table.lookup(pool.item[static_cast<size_t>(r)], item_embs.row(r));
        mlp_forward(p.psi, item_embs, pool.z, &psi_cache);

        h_all = Mat(total, p.cfg.d_model);
        Rng plan_rng(train_rng ? train_rng->next_u64() : 7u);
        for (size_t i = 0; i < batch.size(); i++) {
            const Segment& seg = ecs[i].ex.seq;
            for (int t = 0; t < seg.valid; t++)
                std::memcpy(h_all.row(offsets[i] + t), ecs[i].H.row(t),
                            sizeof(float) * static_cast<size_t>(p.cfg.d_model));
            LossPlan one = build_loss_plan(seg, cfg.seq_loss, pool, maps[i], plan_rng);
            auto shift = [&](std::vector<LossTerm>& dst, std::vector<LossTerm>& src) {
                for (LossTerm& t : src) {
                    t.anchor += offsets[i];
                    dst.push_back(std::move(t));
                }
            };
            shift(plan.ntl, one.ntl);
            shift(plan.mtl, one.mtl);
            shift(plan.ftl, one.ftl);
        }
        double tau = p.tau();
        LossValues lv = pretrain_loss(h_all, plan, pool, tau, cfg.seq_loss);
        out.seq = lv.total;
        if (sink && pool.size() > 0) {
            dh_all = Mat(h_all.rows, h_all.cols);
            dz = Mat(pool.z.rows, pool.z.cols);
            double dlog_tau = 0.0;
            pretrain_loss_backward(h_all, plan, pool, tau, cfg.seq_loss, cfg.w_seq, dh_all, dz,
                                   &dlog_tau);
            p.log_tau.g.at(0, 0) += static_cast<float>(dlog_tau);
        }
    }

    out.total = out.bce_final + cfg.w_mod * out.bce_module + cfg.w_mse * out.mse +
                cfg.w_align * out.align + cfg.w_seq * out.seq;
    if (!sink) return out;

    // backward through the crossing heads and the transformer
    for (size_t i = 0; i < batch.size(); i++) {
        ExCache& ec = ecs[i];
        Mat dsel;
        Vec dcand_emb;
        crossing_backward(rp, ec, dlogits[i], dmlogits[i], dsel, dcand_emb);
        sink->accumulate_lookup_grad(table, ec.ex.candidate, dcand_emb.data());

        if (!cfg.use_seq_module) continue;
        if (ec.idd_mask.size() > 0)
            for (size_t k = 0; k < dsel.a.size(); k++) dsel.a[k] *= ec.idd_mask.a[k];

        if (ec.bi.n == 0) continue;
        Mat dH(ec.H.rows, ec.H.cols);
        scatter_selectors(dsel, ec.bi, cfg.variant, dH);
        if (cfg.w_seq > 0 && offsets[i] >= 0)
            for (int t = 0; t < ec.ex.seq.valid; t++)
                axpy(1.0f, dh_all.row(offsets[i] + t), dH.row(t), p.cfg.d_model);

        Mat dE = backward_rows(p, ec.fc, dH);
        int n_seq = ec.ex.seq.valid;
        if (n_seq > 0) {
            Mat dE_seq(n_seq, p.cfg.d_emb);
            std::memcpy(dE_seq.a.data(), dE.a.data(), sizeof(float) * dE_seq.size());
            segment_inputs_backward(p, table, *sink, ec.ex.seq.events.data(), n_seq, 0, dE_seq);
        }
        const bool learned_pos = p.cfg.pos_mode == ModelConfig::PosMode::Learned;
        if (ec.bi.lt_pos >= 0) {
            const float* drow = dE.row(ec.bi.lt_pos);
            axpy(1.0f, drow, rp.lt.g.row(0), p.cfg.d_emb);
            if (learned_pos) axpy(1.0f, drow, p.pos_emb.g.row(ec.bi.lt_pos), p.cfg.d_emb);
        }
        if (ec.bi.cand_pos >= 0) {
            const float* drow = dE.row(ec.bi.cand_pos);
            sink->accumulate_lookup_grad(table, ec.ex.candidate, drow);
            if (learned_pos) axpy(1.0f, drow, p.pos_emb.g.row(ec.bi.cand_pos), p.cfg.d_emb);
            if (cfg.variant == FusionVariant::Aux || cfg.variant == FusionVariant::AuxLt) {
                const Vec& aux = ec.ex.aux;
                for (int r = 0; r < rp.aux_proj.v.rows; r++)
                    axpy(aux[static_cast<size_t>(r)], drow, rp.aux_proj.g.row(r), p.cfg.d_emb);
            }
        }
    }

    if (cfg.w_seq > 0 && pool.size() > 0 && dz.size() > 0) {
        Mat d_item_embs;
        mlp_backward(p.psi, psi_cache, dz, d_item_embs);
        for (int r = 0; r < pool.size(); r++)
            sink->accumulate_lookup_grad(table, pool.item[static_cast<size_t>(r)],
                                         d_item_embs.row(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter groups

int finetune_group(const std::string& name) {
    auto starts = [&](const char* pre) { return name.rfind(pre, 0) == 0; };
    if (starts("rank.")) return 1;
    if (name == "log_tau" || name == "action_emb" || name == "surface_emb" || name == "pos_emb")
        return 0;
    if (starts("phi_in.") || starts("phi_out.") || starts("psi.") || starts("layer")) return 0;
    SEQFM_CHECK(false, "parameter '" << name << "' belongs to no fine-tuning group");
    return -1;
}

Optimizer make_finetune_optimizer(const OptimConfig& oc, TransformerParams& p,
                                  RankingHeadParams& rp, HashedEmbeddingTable* table,
                                  float pretrained_factor) {
    Optimizer opt(oc);
    for (Param* q : p.all_params())
        opt.add_param(q, finetune_group(q->name) == 0 ? pretrained_factor : 1.0f);
    for (Param* q : rp.all_params())
        opt.add_param(q, finetune_group(q->name) == 0 ? pretrained_factor : 1.0f);
    if (table) opt.add_table(table, pretrained_factor);
    return opt;
}

// ---------------------------------------------------------------------------
// Synthetic ranking data

std::vector<RankingGroup> make_ranking_groups(const std::vector<UserSequence>& seqs,
                                              const SyntheticWorld& world,
                                              const RankingDataConfig& rc) {
    SEQFM_CHECK(rc.group_size >= 1 && rc.groups_per_user >= 1, "degenerate ranking data config");
    std::vector<RankingGroup> out;
    out.reserve(seqs.size() * static_cast<size_t>(rc.groups_per_user));
    const u64 n_items = world.config().num_items;

    for (const UserSequence& us : seqs) {
        Rng rng(mix64(rc.rng_seed ^ mix64(us.user_id ^ 0x726b64ULL)));
        auto mix = world.user_mixture(us.user_id);

        Segment seg;
        seg.user_id = us.user_id;
        size_t keep = std::min(us.events.size(), static_cast<size_t>(rc.max_events));
        seg.events.assign(us.events.end() - static_cast<long>(keep), us.events.end());
        seg.valid = static_cast<int>(keep);

        for (int g = 0; g < rc.groups_per_user; g++) {
            RankingGroup grp;
            grp.user_id = us.user_id;
            for (int k = 0; k < rc.group_size; k++) {
                RankingExample ex;
                ex.seq = seg;
                bool in_topic = rng.uniform() < rc.in_topic_fraction;
                if (in_topic) {
                    u32 t = mix.topics[rng.uniform_u64(mix.topics.size())];
                    const auto& items = world.topic_items(t);
                    ex.candidate = items[rng.uniform_u64(items.size())];
                } else {
                    ex.candidate = rng.uniform_u64(n_items);
                }
                double a = std::min(1.0, world.topic_affinity(us.user_id, ex.candidate));
                ex.labels[static_cast<size_t>(RankHead::Save)] =
                    rng.bernoulli(0.08 + 0.50 * a) ? 1 : 0;
                ex.labels[static_cast<size_t>(RankHead::Click)] =
                    rng.bernoulli(0.15 + 0.45 * a) ? 1 : 0;
                ex.labels[static_cast<size_t>(RankHead::Hide)] =
                    rng.bernoulli(0.25 * (1.0 - a) + 0.02) ? 1 : 0;
                ex.age_seconds = static_cast<double>(world.reference_time() -
                                                     world.item_creation_time(ex.candidate));
                ex.aux = world.item_aux_embedding(ex.candidate);
                grp.examples.push_back(std::move(ex));
            }
            out.push_back(std::move(grp));
        }
    }
    return out;
}

std::vector<ScoredGroup> score_groups(const TransformerParams& p, const IdEmbSource& ids,
                                      const RankingHeadParams& rp,
                                      const std::vector<RankingGroup>& groups,
                                      const FinetuneConfig& cfg) {
    std::vector<ScoredGroup> out;
    out.reserve(groups.size());
    for (const RankingGroup& g : groups) {
        ScoredGroup sg;
        sg.group_id = g.user_id;
        std::vector<RankingOutputs> ro = rank_forward_batch(p, ids, rp, g.examples, cfg);
        for (size_t i = 0; i < g.examples.size(); i++) {
            GroupItem it;
            it.scores.assign(ro[i].prob.begin(), ro[i].prob.end());
            it.labels.assign(g.examples[i].labels.begin(), g.examples[i].labels.end());
            it.age_days = g.examples[i].age_seconds / 86400.0;
            sg.items.push_back(std::move(it));
        }
        out.push_back(std::move(sg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training driver

std::string FinetuneRunConfig::to_config_text() const {
    std::ostringstream o;
    o << "finetune.variant=" << fusion_variant_name(ft.variant) << "\n";
    o << "finetune.use_seq_module=" << (ft.use_seq_module ? 1 : 0) << "\n";
    o << "finetune.max_events=" << ft.max_events << "\n";
    o << "finetune.crossing_hidden=" << ft.crossing_hidden << "\n";
    o << "finetune.d_aux=" << ft.d_aux << "\n";
    o << "finetune.w_mod=" << ft.w_mod << "\n";
    o << "finetune.w_mse=" << ft.w_mse << "\n";
    o << "finetune.w_align=" << ft.w_align << "\n";
    o << "finetune.w_seq=" << ft.w_seq << "\n";
    o << "finetune.cir=" << (ft.cold.cir ? 1 : 0) << "\n";
    o << "finetune.idd=" << (ft.cold.idd ? 1 : 0) << "\n";
    o << "finetune.cir_prob=" << ft.cold.cir_prob << "\n";
    o << "finetune.pretrained_factor=" << pretrained_factor << "\n";
    o << "finetune.optim.lr=" << optim.lr << "\n";
    o << "finetune.batch_examples=" << batch_examples << "\n";
    o << "finetune.epochs=" << epochs << "\n";
    o << "finetune.seed=" << seed << "\n";
    o << "finetune.val_fraction=" << val_fraction << "\n";
    o << "data.groups_per_user=" << data.groups_per_user << "\n";
    o << "data.group_size=" << data.group_size << "\n";
    o << "data.max_events=" << data.max_events << "\n";
    o << "data.rng_seed=" << data.rng_seed << "\n";
    return o.str();
}

FinetuneResult finetune_run(TransformerParams& p, HashedEmbeddingTable& table,
                            const std::vector<UserSequence>& seqs, const SyntheticWorld& world,
                            const FinetuneRunConfig& cfg, std::ostream* log) {
    FinetuneConfig ft = cfg.ft;
    ft.max_events = cfg.data.max_events;
    ft.validate(p.cfg);

    std::vector<RankingGroup> groups = make_ranking_groups(seqs, world, cfg.data);

    // held-out split at user granularity so no sequence leaks across
    u64 salt = mix64(cfg.seed ^ 0x66747370ULL);
    u64 cut = static_cast<u64>(std::llround(cfg.val_fraction * 10000.0));
    std::vector<const RankingGroup*> train_groups, val_groups;
    for (const RankingGroup& g : groups)
        (mix64(g.user_id ^ salt) % 10000 < cut ? val_groups : train_groups).push_back(&g);

    FinetuneResult res;
    res.train_groups = static_cast<int>(train_groups.size());
    res.val_groups = static_cast<int>(val_groups.size());
    SEQFM_CHECK(!train_groups.empty(), "no training groups after the split");

    res.rank.init(p.cfg.d_model, p.cfg.d_emb, ft.d_aux, ft.n_ctx(), ft.crossing_hidden,
                  ft.sel_per_example(), mix64(cfg.seed ^ 0x72686561ULL));
    Optimizer opt = make_finetune_optimizer(cfg.optim, p, res.rank, &table, cfg.pretrained_factor);

    std::vector<const RankingExample*> examples;
    for (const RankingGroup* g : train_groups)
        for (const RankingExample& ex : g->examples) examples.push_back(&ex);

    Rng rng(mix64(cfg.seed ^ 0x6674726eULL));
    std::vector<std::string> head_names;
    for (int h = 0; h < kRankHeadCount; h++)
        head_names.push_back(rank_head_name(static_cast<RankHead>(h)));

    for (int epoch = 1; epoch <= cfg.epochs; epoch++) {
        std::vector<size_t> order(examples.size());
        for (size_t i = 0; i < order.size(); i++) order[i] = i;
        for (size_t i = order.size(); i > 1; i--)
            std::swap(order[i - 1], order[rng.uniform_u64(i)]);

        FinetuneEpochStats st;
        st.epoch = epoch;
        EmbeddingGradSink sink;
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_examples)) {
            std::vector<RankingExample> batch;
            for (size_t b = pos;
                 b < order.size() && b < pos + static_cast<size_t>(cfg.batch_examples); b++)
                batch.push_back(*examples[order[b]]);
            FinetuneLossValues lv = finetune_loss(p, table, res.rank, batch, ft, &rng, &sink);
            SEQFM_CHECK(std::isfinite(lv.total), "non-finite fine-tuning loss at step "
                                                     << opt.steps() + 1);
            opt.step({&sink});
            st.steps++;
            st.loss.total += lv.total;
            st.loss.bce_final += lv.bce_final;
            st.loss.bce_module += lv.bce_module;
            st.loss.mse += lv.mse;
            st.loss.align += lv.align;
            st.loss.seq += lv.seq;
            st.loss.examples += lv.examples;
            if (log && cfg.log_every > 0 && st.steps % cfg.log_every == 0)
                (*log) << "epoch " << epoch << " step " << st.steps << " loss " << lv.total
                       << "\n";
        }
        if (st.steps > 0) {
            st.loss.total /= st.steps;
            st.loss.bce_final /= st.steps;
            st.loss.bce_module /= st.steps;
            st.loss.mse /= st.steps;
            st.loss.align /= st.steps;
            st.loss.seq /= st.steps;
        }

        std::vector<RankingGroup> val_copy;
        val_copy.reserve(val_groups.size());
        for (const RankingGroup* g : val_groups) val_copy.push_back(*g);
        std::vector<ScoredGroup> scored = score_groups(p, table, res.rank, val_copy, ft);
        st.report = evaluate_groups(scored, head_names);

        if (log) {
            (*log) << "epoch " << epoch << " loss " << st.loss.total << " hit@3";
            for (int h = 0; h < kRankHeadCount; h++)
                (*log) << " " << head_names[static_cast<size_t>(h)] << " "
                       << st.report.overall[static_cast<size_t>(h)] << "/"
                       << st.report.fresh7[static_cast<size_t>(h)] << "/"
                       << st.report.fresh28[static_cast<size_t>(h)];
            (*log) << "\n";
        }
        res.epochs.push_back(std::move(st));
    }
    return res;
}

} // namespace seqfm
