#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "seqfm/losses.hpp"
#include "seqfm/model.hpp"

using namespace seqfm;

namespace {

// direct double-precision form, no max subtraction; safe for small logits
double nce_oracle(const Vec& h, const Vec& zp, const std::vector<Vec>& zn, double tau) {
    auto sim = [&](const Vec& a, const Vec& b) {
        double s = 0.0;
        for (size_t i = 0; i < a.size(); i++) s += static_cast<double>(a[i]) * b[i];
        return s;
    };
    double num = std::exp(sim(h, zp) / tau);
    double den = num;
    for (const auto& z : zn) den += std::exp(sim(h, z) / tau);
    return -std::log(num / den);
}

Segment make_segment(u64 user, const std::vector<Action>& actions, int L, u64 item_base) {
    Segment s;
    s.user_id = user;
    s.valid = static_cast<int>(actions.size());
    s.events.resize(static_cast<size_t>(L));
    for (int i = 0; i < s.valid; i++) {
        s.events[static_cast<size_t>(i)].timestamp = 1000 + static_cast<u64>(i);
        s.events[static_cast<size_t>(i)].action = actions[static_cast<size_t>(i)];
        s.events[static_cast<size_t>(i)].surface = Surface::Homefeed;
        s.events[static_cast<size_t>(i)].item_id = item_base + static_cast<u64>(i);
    }
    return s;
}

Vec row_vec(const Mat& m, int r) { return Vec(m.row(r), m.row(r) + m.cols); }

} // namespace

TEST_CASE("info_nce: one negative at unit/zero similarity, tau 1") {
    Vec h = {1.0f, 0.0f};
    Vec zp = {1.0f, 0.0f};
    Mat zn(1, 2);
    zn.at(0, 1) = 1.0f; // orthogonal, similarity 0
    double loss = info_nce(h.data(), zp.data(), zn, 1.0, 2);
    CHECK(loss == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-9));
}

TEST_CASE("info_nce: K identical negatives give log(K+1)") {
    int dim = 4, K = 127;
    Vec h = {0.5f, -0.25f, 0.8f, 0.1f};
    Vec zp = {0.3f, 0.9f, -0.2f, 0.4f};
    Mat zn(K, dim);
    for (int k = 0; k < K; k++)
        for (int j = 0; j < dim; j++) zn.at(k, j) = zp[static_cast<size_t>(j)];
    double loss = info_nce(h.data(), zp.data(), zn, 0.05, dim);
    CHECK(std::fabs(loss - std::log(128.0)) < 1e-6);
}

TEST_CASE("info_nce: well-separated positive vanishes as tau shrinks") {
    Vec h = {1.0f, 0.0f};
    Vec zp = {1.0f, 0.0f};  // sim 1
    Mat zn(1, 2);
    zn.at(0, 0) = 0.5f;     // sim 0.5
    CHECK(info_nce(h.data(), zp.data(), zn, 0.01, 2) < 1e-12);
}

TEST_CASE("info_nce: extreme logits stay finite via max subtraction") {
    Vec h = {1.0f, 0.0f};
    Vec good = {1.0f, 0.0f};
    Vec bad = {-1.0f, 0.0f};
    Mat zn_bad(1, 2);
    zn_bad.at(0, 0) = -1.0f;
    double easy = info_nce(h.data(), good.data(), zn_bad, 1e-4, 2);
    CHECK(std::isfinite(easy));
    CHECK(easy < 1e-12);

    Mat zn_good(1, 2);
    zn_good.at(0, 0) = 1.0f;
    double hard = info_nce(h.data(), bad.data(), zn_good, 1e-4, 2);
    CHECK(std::isfinite(hard));
    // dominated by the similarity gap over tau: (1 - (-1)) / 1e-4
    CHECK(hard == doctest::Approx(20000.0).epsilon(1e-3));
}

TEST_CASE("info_nce: non-positive temperature is an error") {
    Vec h = {1.0f}, zp = {1.0f};
    Mat zn(1, 1);
    CHECK_THROWS_AS(info_nce(h.data(), zp.data(), zn, 0.0, 1), std::runtime_error);
    CHECK_THROWS_AS(info_nce(h.data(), zp.data(), zn, -0.5, 1), std::runtime_error);
}

TEST_CASE("sample_negatives: excludes every pool item the user engaged") {
    TargetPool pool;
    pool.add(10, 1); // row 0
    pool.add(10, 2); // row 1
    pool.add(20, 2); // row 2: same item as row 1, different user
    pool.add(20, 3); // row 3
    Rng rng(5);

    auto negs_a = sample_negatives(pool, 10, 8, rng);
    REQUIRE(negs_a.size() == 1);        // only item 3 is not in user 10's positives
    CHECK(negs_a[0] == 3);

    auto negs_b = sample_negatives(pool, 20, 8, rng);
    REQUIRE(negs_b.size() == 1);        // items 2 and 3 are engaged by user 20
    CHECK(negs_b[0] == 0);

    auto negs_c = sample_negatives(pool, 99, 2, rng); // outside user: everything eligible
    CHECK(negs_c.size() == 2);

    TargetPool blocked;
    blocked.add(10, 7);
    blocked.add(20, 7); // same item again
    CHECK_THROWS_WITH_AS(sample_negatives(blocked, 10, 4, rng), doctest::Contains("eligible"),
                         std::runtime_error);
}

TEST_CASE("sample_negatives: without replacement and near-uniform") {
    TargetPool pool;
    for (int i = 0; i < 20; i++) pool.add(100 + static_cast<u64>(i), 500 + static_cast<u64>(i));
    Rng rng(17);
    std::vector<int> freq(20, 0);
    const int draws = 2000, K = 5;
    for (int t = 0; t < draws; t++) {
        auto negs = sample_negatives(pool, 9999, K, rng);
        REQUIRE(negs.size() == static_cast<size_t>(K));
        std::set<int> uniq(negs.begin(), negs.end());
        CHECK(uniq.size() == static_cast<size_t>(K));
        for (int idx : negs) {
            REQUIRE(idx >= 0);
            REQUIRE(idx < 20);
            freq[static_cast<size_t>(idx)]++;
        }
    }
    // each index expects draws*K/20 = 500 hits, sd ~19.4; allow 5 sigma
    for (int f : freq) {
        CHECK(f > 400);
        CHECK(f < 600);
    }
}

TEST_CASE("build_loss_plan: anchors and targets follow the window rules") {
    PretrainConfig cfg;
    cfg.window = 3;
    cfg.l_downstream = 5;
    cfg.negatives = 2;

    // positions:       0      1      2     3      4      5      6
    std::vector<Action> acts = {Action::Click, Action::Save, Action::Click, Action::Save,
                                Action::Click, Action::Save, Action::Save};
    Segment seg = make_segment(1, acts, 8, 100);

    TargetPool pool;
    std::vector<int> pos_to_pool(acts.size(), -1);
    for (size_t i = 0; i < acts.size(); i++)
        if (cfg.is_positive(acts[i]))
            pos_to_pool[i] = pool.add(seg.user_id, seg.events[i].item_id);
    for (int i = 0; i < 40; i++) pool.add(777, 9000 + static_cast<u64>(i)); // other-user filler
    Rng rng(3);
    LossPlan plan = build_loss_plan(seg, cfg, pool, pos_to_pool, rng);

    // next-token terms: anchor i where i+1 is positive; target is i+1's pool row
    REQUIRE(plan.ntl.size() == 4);
    CHECK(plan.ntl[0].anchor == 0);
    CHECK(plan.ntl[1].anchor == 2);
    CHECK(plan.ntl[2].anchor == 4);
    CHECK(plan.ntl[3].anchor == 5);
    for (const auto& t : plan.ntl)
        CHECK(t.target == pos_to_pool[static_cast<size_t>(t.anchor) + 1]);

    // multi-token: pairs (i, j) with i < j <= i + 3, j positive
    std::set<std::pair<int, int>> expect_mtl;
    for (int i = 0; i + 1 < seg.valid; i++)
        for (int j = i + 1; j <= std::min(i + cfg.window, seg.valid - 1); j++)
            if (cfg.is_positive(acts[static_cast<size_t>(j)]))
                expect_mtl.insert({i, pos_to_pool[static_cast<size_t>(j)]});
    std::set<std::pair<int, int>> got_mtl;
    for (const auto& t : plan.mtl) got_mtl.insert({t.anchor, t.target});
    CHECK(got_mtl == expect_mtl);

    // future terms: anchor l_downstream-1 = 4, target positions [5, min(5+3-1, valid-1)]
    CHECK_FALSE(plan.ftl_skipped);
    REQUIRE(plan.ftl.size() == 2);
    CHECK(plan.ftl[0].anchor == 4);
    CHECK(plan.ftl[0].target == pos_to_pool[5]);
    CHECK(plan.ftl[1].anchor == 4);
    CHECK(plan.ftl[1].target == pos_to_pool[6]);

    for (const auto* vec : {&plan.ntl, &plan.mtl, &plan.ftl})
        for (const auto& t : *vec) {
            CHECK(t.negs.size() == 2);
            CHECK(t.target >= 0);
            CHECK(t.target < pool.size());
        }
}

TEST_CASE("build_loss_plan: future terms skipped when the segment is short") {
    PretrainConfig cfg;
    cfg.l_downstream = 6;
    cfg.negatives = 1;
    TargetPool pool;
    pool.add(42, 1);
    pool.add(43, 2);

    std::vector<Action> acts(6, Action::Click); // valid == l_downstream: one short
    Segment seg = make_segment(7, acts, 8, 300);
    std::vector<int> p2p(acts.size(), -1);
    Rng rng(4);
    LossPlan plan = build_loss_plan(seg, cfg, pool, p2p, rng);
    CHECK(plan.ftl_skipped);
    CHECK(plan.ftl.empty());

    // a positive position without a pool entry breaks the caller contract
    std::vector<Action> bad = {Action::Click, Action::Save};
    Segment bseg = make_segment(7, bad, 8, 300);
    std::vector<int> bp2p(bad.size(), -1);
    CHECK_THROWS_WITH_AS(build_loss_plan(bseg, cfg, pool, bp2p, rng),
                         doctest::Contains("pool"), std::runtime_error);

    std::vector<Action> acts7(7, Action::Click);
    acts7[6] = Action::Download;
    Segment seg7 = make_segment(7, acts7, 8, 300);
    TargetPool pool7;
    std::vector<int> p2p7(acts7.size(), -1);
    p2p7[6] = pool7.add(seg7.user_id, seg7.events[6].item_id);
    pool7.add(55, 999);
    LossPlan plan7 = build_loss_plan(seg7, cfg, pool7, p2p7, rng);
    CHECK_FALSE(plan7.ftl_skipped);
    REQUIRE(plan7.ftl.size() == 1);
    CHECK(plan7.ftl[0].anchor == 5);
    CHECK(plan7.ftl[0].target == p2p7[6]);
}

TEST_CASE("build_loss_plan: shortfall counted when the pool is thin") {
    PretrainConfig cfg;
    cfg.negatives = 127;
    cfg.l_downstream = 3;
    std::vector<Action> acts = {Action::Click, Action::Save};
    Segment seg = make_segment(1, acts, 4, 10);
    TargetPool pool;
    std::vector<int> p2p(acts.size(), -1);
    p2p[1] = pool.add(1, seg.events[1].item_id);
    for (int i = 0; i < 3; i++) pool.add(50, 600 + static_cast<u64>(i));
    Rng rng(8);
    LossPlan plan = build_loss_plan(seg, cfg, pool, p2p, rng);
    // ntl anchor 0 and mtl pair (0,1): both get only 3 of 127 negatives
    REQUIRE(plan.ntl.size() == 1);
    REQUIRE(plan.mtl.size() == 1);
    CHECK(plan.ntl[0].negs.size() == 3);
    CHECK(plan.shortfall == 2);
}

TEST_CASE("build_loss_plan: deterministic for a fixed seed") {
    PretrainConfig cfg;
    cfg.negatives = 4;
    cfg.l_downstream = 3;
    std::vector<Action> acts = {Action::Save, Action::Save, Action::Click, Action::Save,
                                Action::Download};
    Segment seg = make_segment(3, acts, 8, 40);
    TargetPool pool;
    std::vector<int> p2p(acts.size(), -1);
    for (size_t i = 0; i < acts.size(); i++)
        if (cfg.is_positive(acts[i])) p2p[i] = pool.add(3, seg.events[i].item_id);
    for (int i = 0; i < 30; i++) pool.add(70, 800 + static_cast<u64>(i));

    Rng r1(11), r2(11), r3(12);
    LossPlan a = build_loss_plan(seg, cfg, pool, p2p, r1);
    LossPlan b = build_loss_plan(seg, cfg, pool, p2p, r2);
    LossPlan c = build_loss_plan(seg, cfg, pool, p2p, r3);
    REQUIRE(a.ntl.size() == b.ntl.size());
    bool all_same = true, any_diff_c = false;
    for (size_t i = 0; i < a.ntl.size(); i++) {
        all_same = all_same && a.ntl[i].negs == b.ntl[i].negs;
        any_diff_c = any_diff_c || a.ntl[i].negs != c.ntl[i].negs;
    }
    for (size_t i = 0; i < a.mtl.size(); i++) all_same = all_same && a.mtl[i].negs == b.mtl[i].negs;
    CHECK(all_same);
    CHECK(any_diff_c); // different seed, different draws
}

TEST_CASE("pretrain_loss: window 1 multi-token equals next-token") {
    PretrainConfig cfg;
    cfg.window = 1;
    cfg.negatives = 64; // above pool size: both passes keep every eligible row
    cfg.l_downstream = 30;
    std::vector<Action> acts;
    Rng arng(21);
    for (int i = 0; i < 12; i++)
        acts.push_back(arng.bernoulli(0.5) ? Action::Save : Action::Click);
    acts[3] = Action::Save;
    Segment seg = make_segment(5, acts, 16, 100);

    TargetPool pool;
    std::vector<int> p2p(acts.size(), -1);
    for (size_t i = 0; i < acts.size(); i++)
        if (cfg.is_positive(acts[i])) p2p[i] = pool.add(5, seg.events[i].item_id);
    for (int i = 0; i < 10; i++) pool.add(90, 7000 + static_cast<u64>(i));
    Rng zr(22);
    pool.z = Mat::gaussian(pool.size(), 6, zr, 1.0f);
    Mat h = Mat::gaussian(seg.valid, 6, zr, 1.0f);

    Rng prng(23);
    LossPlan plan = build_loss_plan(seg, cfg, pool, p2p, prng);
    REQUIRE(plan.ntl.size() == plan.mtl.size());
    LossValues lv = pretrain_loss(h, plan, pool, 0.5, cfg);
    CHECK(lv.n_ntl == lv.n_mtl);
    CHECK(lv.l_ntl == doctest::Approx(lv.l_mtl).epsilon(1e-12));
}

TEST_CASE("pretrain_loss: matches a term-by-term oracle on random segments") {
    Rng rng(31);
    PretrainConfig cfg;
    cfg.window = 4;
    cfg.l_downstream = 4;
    cfg.negatives = 6;
    cfg.w_ntl = 1.0f;
    cfg.w_mtl = 0.6f;
    cfg.w_ftl = 1.4f;
    const int dim = 6;

    for (int trial = 0; trial < 50; trial++) {
        int n = 2 + static_cast<int>(rng.uniform_u64(11));
        std::vector<Action> acts;
        for (int i = 0; i < n; i++)
            acts.push_back(static_cast<Action>(rng.uniform_u64(kActionCount)));
        Segment seg = make_segment(1000 + trial, acts, 16, trial * 100);

        TargetPool pool;
        std::vector<int> p2p(acts.size(), -1);
        for (size_t i = 0; i < acts.size(); i++)
            if (cfg.is_positive(acts[i]))
                p2p[i] = pool.add(seg.user_id, seg.events[i].item_id);
        int fill = 4 + static_cast<int>(rng.uniform_u64(12));
        for (int i = 0; i < fill; i++)
            pool.add(5000 + static_cast<u64>(i), 100000 + static_cast<u64>(rng.uniform_u64(1000)));
        pool.z = Mat::gaussian(pool.size(), dim, rng, 0.7f);
        Mat h = Mat::gaussian(n, dim, rng, 0.7f);

        Rng prng(100 + trial);
        LossPlan plan = build_loss_plan(seg, cfg, pool, p2p, prng);
        double tau = 0.3;
        LossValues lv = pretrain_loss(h, plan, pool, tau, cfg);

        auto component = [&](const std::vector<LossTerm>& terms) {
            double s = 0.0;
            for (const auto& t : terms) {
                std::vector<Vec> zn;
                for (int idx : t.negs) zn.push_back(row_vec(pool.z, idx));
                s += nce_oracle(row_vec(h, t.anchor), row_vec(pool.z, t.target), zn, tau);
            }
            return terms.empty() ? 0.0 : s / static_cast<double>(terms.size());
        };
        double ntl = component(plan.ntl), mtl = component(plan.mtl), ftl = component(plan.ftl);
        CHECK(std::fabs(lv.l_ntl - ntl) <= 1e-6 * std::max(1.0, std::fabs(ntl)));
        CHECK(std::fabs(lv.l_mtl - mtl) <= 1e-6 * std::max(1.0, std::fabs(mtl)));
        CHECK(std::fabs(lv.l_ftl - ftl) <= 1e-6 * std::max(1.0, std::fabs(ftl)));
        double total = cfg.w_ntl * ntl + cfg.w_mtl * mtl + cfg.w_ftl * ftl;
        CHECK(std::fabs(lv.total - total) <= 1e-6 * std::max(1.0, std::fabs(total)));
        CHECK(lv.n_ntl == static_cast<int>(plan.ntl.size()));
        CHECK(lv.n_mtl == static_cast<int>(plan.mtl.size()));
        CHECK(lv.n_ftl == static_cast<int>(plan.ftl.size()));
    }
}

TEST_CASE("pretrain_loss: component weights select components") {
    PretrainConfig cfg;
    cfg.window = 2;
    cfg.l_downstream = 2;
    cfg.negatives = 3;
    std::vector<Action> acts = {Action::Click, Action::Save, Action::Save, Action::Click};
    Segment seg = make_segment(2, acts, 8, 10);
    TargetPool pool;
    std::vector<int> p2p(acts.size(), -1);
    for (size_t i = 0; i < acts.size(); i++)
        if (cfg.is_positive(acts[i])) p2p[i] = pool.add(2, seg.events[i].item_id);
    for (int i = 0; i < 6; i++) pool.add(60, 4000 + static_cast<u64>(i));
    Rng rng(41);
    pool.z = Mat::gaussian(pool.size(), 5, rng, 1.0f);
    Mat h = Mat::gaussian(seg.valid, 5, rng, 1.0f);
    LossPlan plan = build_loss_plan(seg, cfg, pool, p2p, rng);

    cfg.w_ntl = 1.0f;
    cfg.w_mtl = 0.0f;
    cfg.w_ftl = 0.0f;
    LossValues only_ntl = pretrain_loss(h, plan, pool, 0.2, cfg);
    CHECK(only_ntl.total == doctest::Approx(only_ntl.l_ntl).epsilon(1e-12));

    cfg.w_ntl = 0.0f;
    cfg.w_ftl = 1.0f;
    LossValues only_ftl = pretrain_loss(h, plan, pool, 0.2, cfg);
    CHECK(only_ftl.total == doctest::Approx(only_ftl.l_ftl).epsilon(1e-12));

    // no positives anywhere: all components empty and zero
    std::vector<Action> cold(5, Action::Click);
    Segment cseg = make_segment(3, cold, 8, 90);
    std::vector<int> cp2p(cold.size(), -1);
    LossPlan cplan = build_loss_plan(cseg, cfg, pool, cp2p, rng);
    LossValues cv = pretrain_loss(h, cplan, pool, 0.2, cfg);
    CHECK(cv.n_ntl == 0);
    CHECK(cv.total == 0.0);
}

TEST_CASE("pretrain_loss: fresh model starts near log(K+1) at unit temperature") {
    ModelConfig mc;
    mc.max_len = 24;
    TransformerParams p;
    p.init(mc, 77, 1.0f); // tau 1: similarities of unit vectors stay small logits
    HashedEmbeddingTable table(8, 512, 8, 13);

    SyntheticConfig sc;
    sc.num_users = 40;
    sc.num_items = 400;
    sc.rng_seed = 19;
    auto seqs = generate_synthetic(sc);
    PretrainConfig cfg; // K = 127
    cfg.l_downstream = 8;

    TargetPool pool;
    std::vector<Segment> segs;
    std::vector<std::vector<int>> maps;
    for (const auto& us : seqs) {
        auto cut = segment(us, 24);
        for (auto& seg : cut) {
            std::vector<int> p2p(24, -1);
            for (int i = 0; i < seg.valid; i++)
                if (cfg.is_positive(seg.events[static_cast<size_t>(i)].action))
                    p2p[static_cast<size_t>(i)] =
                        pool.add(seg.user_id, seg.events[static_cast<size_t>(i)].item_id);
            segs.push_back(std::move(seg));
            maps.push_back(std::move(p2p));
        }
    }
    REQUIRE(pool.size() > 200);
    pool.z = Mat(pool.size(), mc.d_model);
    {
        int r = 0;
        for (size_t s = 0; s < segs.size(); s++)
            for (int i = 0; i < segs[s].valid; i++)
                if (maps[s][static_cast<size_t>(i)] >= 0) {
                    Vec z = psi_forward(p, table.lookup(segs[s].events[static_cast<size_t>(i)].item_id));
                    std::copy(z.begin(), z.end(), pool.z.row(r));
                    r++;
                }
        REQUIRE(r == pool.size());
    }

    Rng rng(55);
    double sum = 0.0;
    int terms = 0;
    for (size_t s = 0; s < segs.size() && terms < 400; s++) {
        Mat h = model_forward(p, table, segs[s]);
        LossPlan plan = build_loss_plan(segs[s], cfg, pool, maps[s], rng);
        LossValues lv = pretrain_loss(h, plan, pool, p.tau(), cfg);
        sum += lv.l_ntl * lv.n_ntl;
        terms += lv.n_ntl;
    }
    REQUIRE(terms > 100);
    double mean = sum / terms;
    CHECK(mean == doctest::Approx(std::log(128.0)).epsilon(0.05));
}

TEST_CASE("pretrain_loss_backward: finite differences and linearity") {
    Rng rng(61);
    const int dim = 5, n = 6;
    PretrainConfig cfg;
    cfg.window = 3;
    cfg.l_downstream = 3;
    cfg.negatives = 3;
    cfg.w_ntl = 1.0f;
    cfg.w_mtl = 0.7f;
    cfg.w_ftl = 1.3f;

    std::vector<Action> acts = {Action::Click, Action::Save, Action::Click,
                                Action::Download, Action::Save, Action::Save};
    Segment seg = make_segment(4, acts, 8, 20);
    TargetPool pool;
    std::vector<int> p2p(acts.size(), -1);
    for (size_t i = 0; i < acts.size(); i++)
        if (cfg.is_positive(acts[i])) p2p[i] = pool.add(4, seg.events[i].item_id);
    for (int i = 0; i < 5; i++) pool.add(80, 3000 + static_cast<u64>(i));
    pool.z = Mat::gaussian(pool.size(), dim, rng, 0.8f);
    Mat h = Mat::gaussian(n, dim, rng, 0.8f);
    LossPlan plan = build_loss_plan(seg, cfg, pool, p2p, rng);
    REQUIRE(!plan.ntl.empty());
    REQUIRE(!plan.ftl.empty());

    const double tau = 0.4;
    auto loss_at = [&](double t) { return pretrain_loss(h, plan, pool, t, cfg).total; };

    Mat dh(n, dim), dz(pool.size(), dim);
    double dlt = 0.0;
    pretrain_loss_backward(h, plan, pool, tau, cfg, 1.0, dh, dz, &dlt);

    auto fd_ok = [](double analytic, double numeric) {
        double tol = 1e-3 * std::max({std::fabs(analytic), std::fabs(numeric), 0.05});
        return std::fabs(analytic - numeric) <= tol;
    };

    const float eps = 1e-3f;
    for (size_t i = 0; i < h.a.size(); i++) {
        float saved = h.a[i];
        h.a[i] = saved + eps;
        double up = loss_at(tau);
        h.a[i] = saved - eps;
        double dn = loss_at(tau);
        h.a[i] = saved;
        CHECK(fd_ok(dh.a[i], (up - dn) / (2.0 * eps)));
    }
    for (size_t i = 0; i < pool.z.a.size(); i++) {
        float saved = pool.z.a[i];
        pool.z.a[i] = saved + eps;
        double up = loss_at(tau);
        pool.z.a[i] = saved - eps;
        double dn = loss_at(tau);
        pool.z.a[i] = saved;
        CHECK(fd_ok(dz.a[i], (up - dn) / (2.0 * eps)));
    }
    {
        const double hlt = 1e-4;
        double up = loss_at(tau * std::exp(hlt));
        double dn = loss_at(tau * std::exp(-hlt));
        double fd = (up - dn) / (2.0 * hlt);
        CHECK(std::fabs(dlt - fd) <= 1e-4 * std::max(1.0, std::fabs(fd)));
    }

    // backward is linear in dtotal
    Mat dh2(n, dim), dz2(pool.size(), dim);
    double dlt2 = 0.0;
    pretrain_loss_backward(h, plan, pool, tau, cfg, 2.0, dh2, dz2, &dlt2);
    for (size_t i = 0; i < dh.a.size(); i++)
        CHECK(dh2.a[i] == doctest::Approx(2.0f * dh.a[i]).epsilon(1e-6));
    CHECK(dlt2 == doctest::Approx(2.0 * dlt).epsilon(1e-9));
}
