#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "seqfm/eval.hpp"

using namespace seqfm;
using doctest::Approx;

namespace {

GroupItem gi(double score, int label, double age = 100.0) {
    GroupItem it;
    it.scores = {score};
    it.labels = {label};
    it.age_days = age;
    return it;
}

ScoredGroup grp(u64 id, std::vector<GroupItem> items) {
    ScoredGroup g;
    g.group_id = id;
    g.items = std::move(items);
    return g;
}

// independent reference: selection by repeated max of (score, -index)
double hit3_oracle(const std::vector<ScoredGroup>& groups, int head) {
    double acc = 0.0;
    for (const ScoredGroup& g : groups) {
        int n = static_cast<int>(g.items.size());
        int m = std::min(3, n);
        std::vector<bool> used(static_cast<size_t>(n), false);
        int pos = 0;
        for (int r = 0; r < m; r++) {
            int best = -1;
            for (int i = 0; i < n; i++) {
                if (used[static_cast<size_t>(i)]) continue;
                if (best < 0) {
                    best = i;
                    continue;
                }
                double si = g.items[static_cast<size_t>(i)].scores[static_cast<size_t>(head)];
                double sb = g.items[static_cast<size_t>(best)].scores[static_cast<size_t>(head)];
                if (si > sb) best = i; // equal keeps the earlier index
            }
            used[static_cast<size_t>(best)] = true;
            pos += g.items[static_cast<size_t>(best)].labels[static_cast<size_t>(head)];
        }
        acc += static_cast<double>(pos) / m;
    }
    return acc / static_cast<double>(groups.size());
}

} // namespace

TEST_CASE("ranking metric matches hand-worked groups") {
    // three items, all positive: any order gives 3/3
    std::vector<ScoredGroup> a = {grp(1, {gi(0.2, 1), gi(0.9, 1), gi(0.5, 1)})};
    CHECK(hit_at_3(a, 0) == Approx(1.0));

    // five items, positives ranked 1st and 4th: one of the top three
    std::vector<ScoredGroup> b = {
        grp(2, {gi(0.9, 1), gi(0.8, 0), gi(0.7, 0), gi(0.6, 1), gi(0.5, 0)})};
    CHECK(hit_at_3(b, 0) == Approx(1.0 / 3.0));

    // single positive item: denominator is min(3, 1)
    std::vector<ScoredGroup> c = {grp(3, {gi(0.1, 1)})};
    CHECK(hit_at_3(c, 0) == Approx(1.0));

    // two groups average
    std::vector<ScoredGroup> d = {a[0], b[0]};
    CHECK(hit_at_3(d, 0) == Approx((1.0 + 1.0 / 3.0) / 2.0));
}

TEST_CASE("ranking metric agrees with a selection oracle on random small groups") {
    Rng rng(404);
    for (int trial = 0; trial < 2000; trial++) {
        int n_groups = 1 + static_cast<int>(rng.uniform_u64(4));
        std::vector<ScoredGroup> groups;
        for (int g = 0; g < n_groups; g++) {
            int n = 1 + static_cast<int>(rng.uniform_u64(6));
            std::vector<GroupItem> items;
            for (int i = 0; i < n; i++) {
                // coarse scores so ties happen often
                double s = static_cast<double>(rng.uniform_u64(5)) * 0.25;
                items.push_back(gi(s, static_cast<int>(rng.uniform_u64(2))));
            }
            groups.push_back(grp(static_cast<u64>(g), std::move(items)));
        }
        double got = hit_at_3(groups, 0);
        double want = hit3_oracle(groups, 0);
        CHECK(got == Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("scaling every score by a positive constant leaves the metric unchanged") {
    Rng rng(77);
    std::vector<ScoredGroup> groups;
    for (int g = 0; g < 40; g++) {
        int n = 1 + static_cast<int>(rng.uniform_u64(8));
        std::vector<GroupItem> items;
        for (int i = 0; i < n; i++)
            items.push_back(gi(rng.normal(), static_cast<int>(rng.uniform_u64(2))));
        groups.push_back(grp(static_cast<u64>(g), std::move(items)));
    }
    double base = hit_at_3(groups, 0);
    for (double c : {0.001, 3.0, 1e6}) {
        std::vector<ScoredGroup> scaled = groups;
        for (ScoredGroup& g : scaled)
            for (GroupItem& it : g.items) it.scores[0] *= c;
        CHECK(hit_at_3(scaled, 0) == base);
    }
}

TEST_CASE("a negative added below the top three leaves groups of three or more unchanged") {
    Rng rng(78);
    for (int trial = 0; trial < 200; trial++) {
        int n = 3 + static_cast<int>(rng.uniform_u64(4));
        std::vector<GroupItem> items;
        double lo = 1e18;
        for (int i = 0; i < n; i++) {
            double s = rng.normal();
            lo = std::min(lo, s);
            items.push_back(gi(s, static_cast<int>(rng.uniform_u64(2))));
        }
        std::vector<ScoredGroup> before = {grp(1, items)};
        items.push_back(gi(lo - 1.0, 0));
        std::vector<ScoredGroup> after = {grp(1, items)};
        CHECK(hit_at_3(after, 0) == hit_at_3(before, 0));
    }
}

TEST_CASE("tied scores rank the earlier item first") {
    // all scores equal: top three are items 0, 1, 2
    std::vector<ScoredGroup> g = {grp(1, {gi(1.0, 0), gi(1.0, 1), gi(1.0, 0), gi(1.0, 1)})};
    CHECK(hit_at_3(g, 0) == Approx(1.0 / 3.0));

    // swapping which tied index holds the positive changes the outcome
    std::vector<ScoredGroup> h = {grp(1, {gi(1.0, 1), gi(1.0, 1), gi(1.0, 1), gi(1.0, 0)})};
    CHECK(hit_at_3(h, 0) == Approx(1.0));
}

TEST_CASE("age bands re-rank within the filtered subset") {
    // overall: strong negative beats the fresh positive. Within the <7d band
    // only the positive remains.
    std::vector<ScoredGroup> groups = {
        grp(1, {gi(10.0, 0, 30.0), gi(5.0, 1, 2.0)}),
        grp(2, {gi(1.0, 0, 14.0), gi(2.0, 1, 14.0)}), // no <7d items
    };
    CHECK(hit_at_3(groups, 0) == Approx((0.5 + 0.5) / 2.0));
    CHECK(hit_at_3_age(groups, 0, 7.0) == Approx(1.0));           // group 2 skipped
    CHECK(hit_at_3_age(groups, 0, 28.0) == Approx((1.0 + 0.5) / 2.0));

    // band boundary is strict
    std::vector<ScoredGroup> edge = {grp(3, {gi(1.0, 1, 7.0)})};
    CHECK(hit_at_3_age(edge, 0, 7.0) == 0.0); // nothing qualifies
    CHECK(hit_at_3_age(edge, 0, 28.0) == Approx(1.0));
}

TEST_CASE("metric input validation") {
    std::vector<ScoredGroup> empty;
    CHECK_THROWS_WITH_AS(hit_at_3(empty, 0), doctest::Contains("no groups"), std::runtime_error);

    std::vector<ScoredGroup> hollow = {grp(9, {})};
    CHECK_THROWS_WITH_AS(hit_at_3(hollow, 0), doctest::Contains("empty group"),
                         std::runtime_error);

    std::vector<ScoredGroup> ok = {grp(1, {gi(1.0, 1)})};
    CHECK_THROWS_WITH_AS(hit_at_3(ok, 1), doctest::Contains("out of range"), std::runtime_error);
    CHECK_THROWS_WITH_AS(hit_at_3(ok, -1), doctest::Contains("out of range"),
                         std::runtime_error);

    std::vector<ScoredGroup> bad = {grp(1, {gi(std::nan(""), 1)})};
    CHECK_THROWS_WITH_AS(hit_at_3(bad, 0), doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("per-head report covers every head and band") {
    GroupItem two;
    two.scores = {1.0, 2.0};
    two.labels = {1, 0};
    two.age_days = 3.0;
    GroupItem other;
    other.scores = {0.5, 3.0};
    other.labels = {0, 1};
    other.age_days = 40.0;
    std::vector<ScoredGroup> groups = {grp(1, {two, other})};

    MetricReport r = evaluate_groups(groups, {"save", "click"});
    REQUIRE(r.heads.size() == 2);
    REQUIRE(r.overall.size() == 2);
    REQUIRE(r.fresh7.size() == 2);
    REQUIRE(r.fresh28.size() == 2);
    CHECK(r.groups == 1);
    CHECK(r.overall[0] == Approx(0.5)); // head 0 ranks the positive first
    CHECK(r.overall[1] == Approx(0.5));
    CHECK(r.fresh7[0] == Approx(1.0));  // only the fresh item survives the band
    CHECK(r.fresh7[1] == Approx(0.0));
}

// ---------------------------------------------------------------------------

namespace {

struct RecallRig {
    ModelConfig mc;
    TransformerParams p;
    HashedEmbeddingTable table;

    RecallRig(int d_model, u64 seed) {
        mc.d_model = d_model;
        mc.n_layers = 1;
        mc.n_heads = 2;
        mc.mlp_ratio = 2;
        mc.max_len = 32;
        mc.d_emb = 8;
        p.init(mc, seed);
        table = HashedEmbeddingTable(2, 64, 4, seed + 1);
    }
};

Segment seg_of(u64 user, const std::vector<std::pair<Action, u64>>& evs) {
    Segment s;
    s.user_id = user;
    for (size_t i = 0; i < evs.size(); i++) {
        Event e;
        e.timestamp = 1000 + static_cast<u64>(i);
        e.action = evs[i].first;
        e.surface = Surface::Homefeed;
        e.item_id = evs[i].second;
        s.events.push_back(e);
    }
    s.valid = static_cast<int>(evs.size());
    return s;
}

} // namespace

TEST_CASE("catalog rows are the target head outputs in item order") {
    RecallRig rig(16, 5);
    std::vector<u64> items = {3, 99, 42};
    Catalog c = build_catalog(rig.p, rig.table, items);
    REQUIRE(c.z.rows == 3);
    REQUIRE(c.z.cols == 16);
    CHECK(c.items == items);
    for (int r = 0; r < 3; r++) {
        Vec emb(static_cast<size_t>(rig.table.d_emb()));
        rig.table.lookup(items[static_cast<size_t>(r)], emb.data());
        Vec z = psi_forward(rig.p, emb);
        double norm = 0.0;
        for (int j = 0; j < 16; j++) {
            CHECK(c.z.at(r, j) == z[static_cast<size_t>(j)]);
            norm += static_cast<double>(z[static_cast<size_t>(j)]) * z[static_cast<size_t>(j)];
        }
        CHECK(std::sqrt(norm) == Approx(1.0).epsilon(1e-5));
    }
    CHECK_THROWS_WITH_AS(build_catalog(rig.p, rig.table, {}), doctest::Contains("empty"),
                         std::runtime_error);
}

TEST_CASE("recall is total when the catalog cannot miss") {
    RecallRig rig(16, 6);
    PretrainConfig lc;
    std::vector<Segment> segs = {
        seg_of(1, {{Action::Click, 7}, {Action::Save, 7}, {Action::Save, 7}})};

    // one catalog row: every anchor ranks it first
    Catalog one = build_catalog(rig.p, rig.table, {7});
    CHECK(recall_at_k(rig.p, rig.table, one, segs, lc, 1) == Approx(1.0));

    // k equal to the catalog size can never miss either
    Catalog many = build_catalog(rig.p, rig.table, {7, 8, 9, 10});
    CHECK(recall_at_k(rig.p, rig.table, many, segs, lc, 4) == Approx(1.0));

    CHECK_THROWS_WITH_AS(recall_at_k(rig.p, rig.table, many, segs, lc, 5),
                         doctest::Contains("exceeds catalog"), std::runtime_error);
    CHECK_THROWS_WITH_AS(recall_at_k(rig.p, rig.table, many, segs, lc, 0),
                         doctest::Contains("k must be"), std::runtime_error);
}

TEST_CASE("anchors are the positions directly before a positive event") {
    RecallRig rig(16, 7);
    PretrainConfig lc;
    Catalog cat = build_catalog(rig.p, rig.table, {1, 2, 3, 4, 5, 6, 7, 8});

    // no positives after position 0: no anchors, recall reports 0
    std::vector<Segment> none = {seg_of(1, {{Action::Save, 1}, {Action::Click, 2}})};
    CHECK(recall_at_k(rig.p, rig.table, cat, none, lc, 8) == 0.0);

    // a positive whose item is absent from the catalog is a caller error
    std::vector<Segment> missing = {seg_of(1, {{Action::Click, 1}, {Action::Save, 999}})};
    CHECK_THROWS_WITH_AS(recall_at_k(rig.p, rig.table, cat, missing, lc, 8),
                         doctest::Contains("missing from catalog"), std::runtime_error);

    // the anchor cap truncates exactly at segment boundaries
    std::vector<Segment> two = {
        seg_of(1, {{Action::Click, 1}, {Action::Save, 2}, {Action::Save, 3}}),
        seg_of(2, {{Action::Click, 4}, {Action::Download, 5}})};
    std::vector<Segment> first_only = {two[0]};
    double capped = recall_at_k(rig.p, rig.table, cat, two, lc, 8, 2);
    double manual = recall_at_k(rig.p, rig.table, cat, first_only, lc, 8);
    CHECK(capped == Approx(manual));
}

TEST_CASE("an untrained model retrieves at chance level") {
    RecallRig rig(16, 11);
    PretrainConfig lc;
    std::vector<u64> items(1000);
    for (size_t i = 0; i < items.size(); i++) items[i] = 10000 + i;
    Catalog cat = build_catalog(rig.p, rig.table, items);

    Rng rng(123);
    std::vector<Segment> segs;
    for (int s = 0; s < 120; s++) {
        std::vector<std::pair<Action, u64>> evs;
        for (int i = 0; i < 16; i++)
            evs.push_back({i % 2 ? Action::Save : Action::Click,
                           10000 + rng.uniform_u64(items.size())});
        segs.push_back(seg_of(static_cast<u64>(s), evs));
    }
    // expectation 10/1000 = 1%; the bound is a loose binomial envelope
    double r = recall_at_k(rig.p, rig.table, cat, segs, lc, 10);
    CHECK(r >= 0.0005);
    CHECK(r <= 0.035);
}

// ---------------------------------------------------------------------------

namespace {

MetricReport mini_report(double overall, double f28, double f7) {
    MetricReport r;
    r.heads = {"save"};
    r.overall = {overall};
    r.fresh28 = {f28};
    r.fresh7 = {f7};
    r.groups = 10;
    return r;
}

} // namespace

TEST_CASE("ablation table computes lifts against the named baseline") {
    std::vector<AblationEntry> runs = {
        {"base", mini_report(0.40, 0.30, 0.20)},
        {"full", mini_report(0.50, 0.30, 0.10)},
    };
    std::string txt = ablation_report(runs, "base");
    CHECK(txt.find("base (10 groups)") != std::string::npos);
    CHECK(txt.find("full (10 groups)") != std::string::npos);
    CHECK(txt.find("0.5000 (+25.0%)") != std::string::npos);
    CHECK(txt.find("0.3000 (+0.0%)") != std::string::npos);
    CHECK(txt.find("0.1000 (-50.0%)") != std::string::npos);
    // rows keep input order
    CHECK(txt.find("base (") < txt.find("full ("));

    std::string rec = ablation_records(runs, "base");
    CHECK(rec.find("full.save.overall=0.5000") != std::string::npos);
    CHECK(rec.find("full.save.lift_overall=0.2500") != std::string::npos);
    CHECK(rec.find("base.save.lift_overall=0.0000") != std::string::npos);
}

TEST_CASE("ablation lift against a zero baseline is not a number") {
    std::vector<AblationEntry> runs = {
        {"base", mini_report(0.0, 0.2, 0.2)},
        {"full", mini_report(0.5, 0.2, 0.2)},
    };
    std::string txt = ablation_report(runs, "base");
    CHECK(txt.find("0.5000 (n/a)") != std::string::npos);
}

TEST_CASE("ablation table input validation") {
    std::vector<AblationEntry> runs = {{"a", mini_report(0.1, 0.1, 0.1)}};
    CHECK_THROWS_WITH_AS(ablation_report(runs, "missing"), doctest::Contains("missing"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(ablation_report({}, "a"), doctest::Contains("no runs"),
                         std::runtime_error);

    std::vector<AblationEntry> mismatched = runs;
    MetricReport other = mini_report(0.1, 0.1, 0.1);
    other.heads = {"click"};
    mismatched.push_back({"b", other});
    CHECK_THROWS_WITH_AS(ablation_report(mismatched, "a"), doctest::Contains("heads differ"),
                         std::runtime_error);
}
