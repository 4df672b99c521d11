#include "seqfm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace seqfm {

namespace {

double group_hit_at_3(const std::vector<const GroupItem*>& items, int head) {
    int n = static_cast<int>(items.size());
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (const GroupItem* it : items) {
        SEQFM_CHECK(head >= 0 && head < static_cast<int>(it->scores.size()),
                    "hit_at_3: head " << head << " out of range");
        SEQFM_CHECK(std::isfinite(it->scores[static_cast<size_t>(head)]),
                    "hit_at_3: non-finite score");
    }
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        double sa = items[static_cast<size_t>(a)]->scores[static_cast<size_t>(head)];
        double sb = items[static_cast<size_t>(b)]->scores[static_cast<size_t>(head)];
        if (sa != sb) return sa > sb;
        return a < b;
    });
    int top = std::min(3, n);
    int pos = 0;
    for (int r = 0; r < top; r++)
        pos += items[static_cast<size_t>(order[static_cast<size_t>(r)])]
                   ->labels[static_cast<size_t>(head)] != 0;
    return static_cast<double>(pos) / top;
}

} // namespace

double hit_at_3(const std::vector<ScoredGroup>& groups, int head) {
    SEQFM_CHECK(!groups.empty(), "hit_at_3: no groups");
    double sum = 0.0;
    for (const ScoredGroup& g : groups) {
        SEQFM_CHECK(!g.items.empty(), "hit_at_3: empty group " << g.group_id);
        std::vector<const GroupItem*> items;
        items.reserve(g.items.size());
        for (const GroupItem& it : g.items) items.push_back(&it);
        sum += group_hit_at_3(items, head);
    }
    return sum / static_cast<double>(groups.size());
}

double hit_at_3_age(const std::vector<ScoredGroup>& groups, int head, double max_age_days) {
    SEQFM_CHECK(!groups.empty(), "hit_at_3: no groups");
    double sum = 0.0;
    int counted = 0;
    for (const ScoredGroup& g : groups) {
        std::vector<const GroupItem*> items;
        for (const GroupItem& it : g.items)
            if (it.age_days < max_age_days) items.push_back(&it);
        if (items.empty()) continue;
        sum += group_hit_at_3(items, head);
        counted++;
    }
    return counted == 0 ? 0.0 : sum / counted;
}

MetricReport evaluate_groups(const std::vector<ScoredGroup>& groups,
                             const std::vector<std::string>& head_names) {
    MetricReport r;
    r.heads = head_names;
    r.groups = static_cast<int>(groups.size());
    for (size_t h = 0; h < head_names.size(); h++) {
        int head = static_cast<int>(h);
        r.overall.push_back(hit_at_3(groups, head));
        r.fresh7.push_back(hit_at_3_age(groups, head, 7.0));
        r.fresh28.push_back(hit_at_3_age(groups, head, 28.0));
    }
    return r;
}

// ---------------------------------------------------------------------------

Catalog build_catalog(const TransformerParams& p, const IdEmbSource& ids,
                      const std::vector<u64>& items) {
    SEQFM_CHECK(!items.empty(), "build_catalog: empty item list");
    Catalog c;
    c.items = items;
    c.z = Mat(static_cast<int>(items.size()), p.cfg.d_model);
    Vec emb(static_cast<size_t>(ids.emb_dim()));
    for (size_t i = 0; i < items.size(); i++) {
        ids.lookup_id(items[i], emb.data());
        Vec z = psi_forward(p, emb);
        std::copy(z.begin(), z.end(), c.z.row(static_cast<int>(i)));
    }
    return c;
}

double recall_at_k(const TransformerParams& p, const IdEmbSource& ids, const Catalog& catalog,
                   const std::vector<Segment>& segments, const PretrainConfig& loss_cfg, int k,
                   int max_anchors) {
    SEQFM_CHECK(k >= 1, "recall_at_k: k must be >= 1");
    SEQFM_CHECK(k <= catalog.z.rows, "recall_at_k: k " << k << " exceeds catalog size "
                                                       << catalog.z.rows);
    std::unordered_map<u64, int> row_of;
    row_of.reserve(catalog.items.size());
    for (size_t i = 0; i < catalog.items.size(); i++)
        row_of[catalog.items[i]] = static_cast<int>(i);

    long anchors = 0, hits = 0;
    for (const Segment& seg : segments) {
        if (seg.valid < 2) continue;
        Mat h = model_forward(p, ids, seg);
        for (int i = 0; i + 1 < seg.valid; i++) {
            const Event& nxt = seg.events[static_cast<size_t>(i) + 1];
            if (!loss_cfg.is_positive(nxt.action)) continue;
            auto it = row_of.find(nxt.item_id);
            SEQFM_CHECK(it != row_of.end(),
                        "recall_at_k: item " << nxt.item_id << " missing from catalog");
            int t = it->second;
            const float* hrow = h.row(i);
            double s_true = 0.0;
            for (int j = 0; j < catalog.z.cols; j++)
                s_true += static_cast<double>(hrow[j]) * catalog.z.at(t, j);
            // rank among all catalog rows; ties resolved by catalog order
            int rank = 1;
            for (int r = 0; r < catalog.z.rows; r++) {
                if (r == t) continue;
                double s = 0.0;
                const float* zr = catalog.z.row(r);
                for (int j = 0; j < catalog.z.cols; j++)
                    s += static_cast<double>(hrow[j]) * zr[j];
                if (s > s_true || (s == s_true && r < t)) rank++;
            }
            anchors++;
            if (rank <= k) hits++;
            if (max_anchors > 0 && anchors >= max_anchors) break;
        }
        if (max_anchors > 0 && anchors >= max_anchors) break;
    }
    return anchors == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(anchors);
}

// ---------------------------------------------------------------------------

namespace {

const AblationEntry* find_entry(const std::vector<AblationEntry>& runs,
                                const std::string& name) {
    for (const AblationEntry& e : runs)
        if (e.name == name) return &e;
    return nullptr;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

std::string fmt_lift(double v, double base) {
    if (base == 0.0) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%+.1f%%", (v - base) / base * 100.0);
    return buf;
}

} // namespace

std::string ablation_report(const std::vector<AblationEntry>& runs,
                            const std::string& baseline_name) {
    SEQFM_CHECK(!runs.empty(), "ablation_report: no runs");
    const AblationEntry* base = find_entry(runs, baseline_name);
    SEQFM_CHECK(base != nullptr, "ablation_report: baseline '" << baseline_name << "' missing");

    std::ostringstream out;
    out << "metric columns: overall / fresh<28d / fresh<7d (lift vs " << baseline_name << ")\n";
    for (const AblationEntry& e : runs) {
        SEQFM_CHECK(e.report.heads == base->report.heads,
                    "ablation_report: run '" << e.name << "' heads differ from baseline");
        out << e.name << " (" << e.report.groups << " groups)\n";
        for (size_t h = 0; h < e.report.heads.size(); h++) {
            out << "  " << e.report.heads[h] << ": " << fmt(e.report.overall[h]) << " ("
                << fmt_lift(e.report.overall[h], base->report.overall[h]) << ")  "
                << fmt(e.report.fresh28[h]) << " ("
                << fmt_lift(e.report.fresh28[h], base->report.fresh28[h]) << ")  "
                << fmt(e.report.fresh7[h]) << " ("
                << fmt_lift(e.report.fresh7[h], base->report.fresh7[h]) << ")\n";
        }
    }
    return out.str();
}

std::string ablation_records(const std::vector<AblationEntry>& runs,
                             const std::string& baseline_name) {
    SEQFM_CHECK(!runs.empty(), "ablation_records: no runs");
    const AblationEntry* base = find_entry(runs, baseline_name);
    SEQFM_CHECK(base != nullptr, "ablation_records: baseline '" << baseline_name << "' missing");
    std::ostringstream out;
    for (const AblationEntry& e : runs)
        for (size_t h = 0; h < e.report.heads.size(); h++) {
            const std::string key = e.name + "." + e.report.heads[h];
            out << key << ".overall=" << fmt(e.report.overall[h]) << "\n";
            out << key << ".fresh28=" << fmt(e.report.fresh28[h]) << "\n";
            out << key << ".fresh7=" << fmt(e.report.fresh7[h]) << "\n";
            if (base->report.overall[h] != 0.0)
                out << key << ".lift_overall="
                    << fmt((e.report.overall[h] - base->report.overall[h]) /
                           base->report.overall[h])
                    << "\n";
        }
    return out.str();
}

} // namespace seqfm
