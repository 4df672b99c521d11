#include "seqfm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace seqfm {

namespace {

double dot_d(const float* a, const float* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; i++) s += static_cast<double>(a[i]) * b[i];
    return s;
}

} // namespace

std::vector<int> sample_negatives(const TargetPool& pool, u64 anchor_user, int K, Rng& rng) {
    SEQFM_CHECK(K >= 1, "sample_negatives: K must be >= 1");
    std::unordered_set<u64> own;
    for (int i = 0; i < pool.size(); i++)
        if (pool.user[i] == anchor_user) own.insert(pool.item[i]);

    std::vector<int> eligible;
    eligible.reserve(pool.size());
    for (int i = 0; i < pool.size(); i++)
        if (!own.count(pool.item[i])) eligible.push_back(i);
    SEQFM_CHECK(!eligible.empty(),
                "sample_negatives: no eligible in-batch negatives for user " << anchor_user);

    if (static_cast<int>(eligible.size()) <= K) return eligible; // shortfall: use all

    // partial Fisher-Yates, first K entries
    for (int i = 0; i < K; i++) {
        size_t j = i + rng.uniform_u64(eligible.size() - i);
        std::swap(eligible[i], eligible[j]);
    }
    eligible.resize(static_cast<size_t>(K));
    return eligible;
}

LossPlan build_loss_plan(const Segment& seg, const PretrainConfig& cfg, const TargetPool& pool,
                         const std::vector<int>& pos_to_pool, Rng& rng) {
    SEQFM_CHECK(static_cast<int>(pos_to_pool.size()) >= seg.valid,
                "build_loss_plan: pos_to_pool shorter than valid prefix");
    LossPlan plan;
    int n = seg.valid;

    auto add_term = [&](std::vector<LossTerm>& into, int anchor, int j) {
        LossTerm t;
        t.anchor = anchor;
        t.target = pos_to_pool[j];
        SEQFM_CHECK(t.target >= 0 && t.target < pool.size(),
                    "build_loss_plan: position " << j << " has no pool entry");
        t.negs = sample_negatives(pool, seg.user_id, cfg.negatives, rng);
        if (static_cast<int>(t.negs.size()) < cfg.negatives) plan.shortfall++;
        into.push_back(std::move(t));
    };

    // next token: anchor i, target i+1
    for (int i = 0; i + 1 < n; i++)
        if (cfg.is_positive(seg.events[i + 1].action)) add_term(plan.ntl, i, i + 1);

    // multi token: targets in (i, i+window]
    for (int i = 0; i + 1 < n; i++) {
        int hi = std::min(i + cfg.window, n - 1);
        for (int j = i + 1; j <= hi; j++)
            if (cfg.is_positive(seg.events[j].action)) add_term(plan.mtl, i, j);
    }

    // future token: anchored at the downstream boundary position
    if (n < cfg.l_downstream + 1) {
        plan.ftl_skipped = true;
    } else {
        int anchor = cfg.l_downstream - 1;
        int hi = std::min(cfg.l_downstream + cfg.window - 1, n - 1);
        for (int j = cfg.l_downstream; j <= hi; j++)
            if (cfg.is_positive(seg.events[j].action)) add_term(plan.ftl, anchor, j);
    }
    return plan;
}

double info_nce(const float* h, const float* z_pos, const Mat& z_negs, double tau, int dim) {
    SEQFM_CHECK(tau > 0.0, "info_nce: tau must be positive, got " << tau);
    SEQFM_CHECK(z_negs.cols == dim || z_negs.rows == 0, "info_nce: negative dim mismatch");
    double u_pos = dot_d(h, z_pos, dim) / tau;
    double m = u_pos;
    for (int k = 0; k < z_negs.rows; k++) m = std::max(m, dot_d(h, z_negs.row(k), dim) / tau);
    double denom = std::exp(u_pos - m);
    for (int k = 0; k < z_negs.rows; k++)
        denom += std::exp(dot_d(h, z_negs.row(k), dim) / tau - m);
    return -(u_pos - m) + std::log(denom);
}

namespace {

double term_loss(const Mat& H, const TargetPool& pool, const LossTerm& t, double tau) {
    SEQFM_CHECK(tau > 0.0, "pretrain_loss: tau must be positive, got " << tau);
    const float* h = H.row(t.anchor);
    int d = H.cols;
    double u_pos = dot_d(h, pool.z.row(t.target), d) / tau;
    double m = u_pos;
    for (int k : t.negs) m = std::max(m, dot_d(h, pool.z.row(k), d) / tau);
    double denom = std::exp(u_pos - m);
    for (int k : t.negs) denom += std::exp(dot_d(h, pool.z.row(k), d) / tau - m);
    return -(u_pos - m) + std::log(denom);
}

// coeff multiplies this term's gradient (loss weight / term count * dtotal).
void term_backward(const Mat& H, const TargetPool& pool, const LossTerm& t, double tau,
                   double coeff, Mat& dH, Mat& dZ, double* dlog_tau) {
    const float* h = H.row(t.anchor);
    int d = H.cols;
    int K = static_cast<int>(t.negs.size());

    std::vector<double> u(static_cast<size_t>(K) + 1);
    u[0] = dot_d(h, pool.z.row(t.target), d) / tau;
    double m = u[0];
    for (int k = 0; k < K; k++) {
        u[k + 1] = dot_d(h, pool.z.row(t.negs[k]), d) / tau;
        m = std::max(m, u[k + 1]);
    }
    double denom = 0.0;
    for (double uv : u) denom += std::exp(uv - m);

    double dlt = 0.0;
    float* dh = dH.row(t.anchor);
    for (int k = 0; k <= K; k++) {
        double p = std::exp(u[k] - m) / denom;
        double du = (k == 0 ? p - 1.0 : p) * coeff; // dLoss/du_k
        int zrow = k == 0 ? t.target : t.negs[k - 1];
        double ds = du / tau;
        axpy(static_cast<float>(ds), pool.z.row(zrow), dh, d);
        axpy(static_cast<float>(ds), h, dZ.row(zrow), d);
        dlt -= du * u[k]; // u = s * exp(-log_tau)
    }
    if (dlog_tau) *dlog_tau += dlt;
}

} // namespace

LossValues pretrain_loss(const Mat& H, const LossPlan& plan, const TargetPool& pool, double tau,
                         const PretrainConfig& cfg) {
    LossValues lv;
    for (const LossTerm& t : plan.ntl) lv.l_ntl += term_loss(H, pool, t, tau);
    for (const LossTerm& t : plan.mtl) lv.l_mtl += term_loss(H, pool, t, tau);
    for (const LossTerm& t : plan.ftl) lv.l_ftl += term_loss(H, pool, t, tau);
    lv.n_ntl = static_cast<int>(plan.ntl.size());
    lv.n_mtl = static_cast<int>(plan.mtl.size());
    lv.n_ftl = static_cast<int>(plan.ftl.size());
    if (lv.n_ntl) lv.l_ntl /= lv.n_ntl;
    if (lv.n_mtl) lv.l_mtl /= lv.n_mtl;
    if (lv.n_ftl) lv.l_ftl /= lv.n_ftl;
    lv.total = cfg.w_ntl * lv.l_ntl + cfg.w_mtl * lv.l_mtl + cfg.w_ftl * lv.l_ftl;
    return lv;
}

void pretrain_loss_backward(const Mat& H, const LossPlan& plan, const TargetPool& pool,
                            double tau, const PretrainConfig& cfg, double dtotal, Mat& dH,
                            Mat& dZ, double* dlog_tau) {
    SEQFM_CHECK(dH.rows == H.rows && dH.cols == H.cols, "pretrain_loss_backward: dH shape");
    SEQFM_CHECK(dZ.rows == pool.z.rows && dZ.cols == pool.z.cols,
                "pretrain_loss_backward: dZ shape");
    if (!plan.ntl.empty()) {
        double c = dtotal * cfg.w_ntl / static_cast<double>(plan.ntl.size());
        for (const LossTerm& t : plan.ntl) term_backward(H, pool, t, tau, c, dH, dZ, dlog_tau);
    }
    if (!plan.mtl.empty()) {
        double c = dtotal * cfg.w_mtl / static_cast<double>(plan.mtl.size());
        for (const LossTerm& t : plan.mtl) term_backward(H, pool, t, tau, c, dH, dZ, dlog_tau);
    }
    if (!plan.ftl.empty()) {
        double c = dtotal * cfg.w_ftl / static_cast<double>(plan.ftl.size());
        for (const LossTerm& t : plan.ftl) term_backward(H, pool, t, tau, c, dH, dZ, dlog_tau);
    }
}

} // namespace seqfm
