#pragma once

#include <vector>

#include "seqfm/common.hpp"
#include "seqfm/mat.hpp"
#include "seqfm/seqdata.hpp"

namespace seqfm {

struct PretrainConfig {
    u32 a_pos_mask = (1u << static_cast<int>(Action::Save)) |
                     (1u << static_cast<int>(Action::Download));
    int window = 8;       // multi-token window L'
    int l_downstream = 32; // anchor position for the future-token loss
    int negatives = 127;   // K
    float tau_init = 0.05f;
    float w_ntl = 1.0f, w_mtl = 1.0f, w_ftl = 1.0f;

    bool is_positive(Action a) const { return (a_pos_mask >> static_cast<int>(a)) & 1u; }
    void validate(int L) const {
        SEQFM_CHECK(window >= 1, "window must be >= 1");
        SEQFM_CHECK(negatives >= 1, "negatives must be >= 1");
        SEQFM_CHECK(l_downstream >= 1 && l_downstream < L,
                    "l_downstream must satisfy 1 <= l_downstream < L (got "
                        << l_downstream << " with L=" << L << ")");
    }
};

// In-batch pool of contrastive targets: every positive event in the batch
// contributes one entry. z rows are the psi outputs for the entries.
struct TargetPool {
    std::vector<u64> user;
    std::vector<u64> item;
    Mat z; // filled by the caller once all entries exist

    int add(u64 u, u64 it) {
        user.push_back(u);
        item.push_back(it);
        return static_cast<int>(user.size()) - 1;
    }
    int size() const { return static_cast<int>(user.size()); }
};

// One contrastive term: H[anchor] against pool row `target` and the sampled
// negative pool rows.
struct LossTerm {
    int anchor = 0;
    int target = 0;
    std::vector<int> negs;
};

struct LossPlan {
    std::vector<LossTerm> ntl, mtl, ftl;
    bool ftl_skipped = false; // segment too short for the future-token anchor
    int shortfall = 0;        // terms that got fewer than K negatives
};

// Uniform sample without replacement from pool entries whose item is not
// positively engaged by anchor_user. Returns fewer than K on shortfall
// (recorded by the caller); zero eligible entries is an error.
std::vector<int> sample_negatives(const TargetPool& pool, u64 anchor_user, int K, Rng& rng);

// Enumerates the loss terms of one segment. pos_to_pool maps segment position
// -> pool row for positive positions (-1 elsewhere). Negative draws consume
// rng in term order (ntl, then mtl, then ftl; anchors ascending, targets
// ascending).
LossPlan build_loss_plan(const Segment& seg, const PretrainConfig& cfg, const TargetPool& pool,
                         const std::vector<int>& pos_to_pool, Rng& rng);

// -log( e^{s+/tau} / (e^{s+/tau} + sum_k e^{s-_k/tau}) ), max-subtracted,
// accumulated in double. Vectors must be same dim; similarity is the inner
// product.
double info_nce(const float* h, const float* z_pos, const Mat& z_negs, double tau, int dim);

struct LossValues {
    double l_ntl = 0, l_mtl = 0, l_ftl = 0;
    int n_ntl = 0, n_mtl = 0, n_ftl = 0;
    double total = 0;
};

// Each component averages over its term count (0 when empty); total is the
// weighted sum.
LossValues pretrain_loss(const Mat& H, const LossPlan& plan, const TargetPool& pool, double tau,
                         const PretrainConfig& cfg);

// Gradient of dtotal * total w.r.t. H rows, pool z rows, and log(tau).
// dH/dZ must be preallocated to the shapes of H / pool.z; accumulates.
void pretrain_loss_backward(const Mat& H, const LossPlan& plan, const TargetPool& pool,
                            double tau, const PretrainConfig& cfg, double dtotal, Mat& dH,
                            Mat& dZ, double* dlog_tau);

} // namespace seqfm
