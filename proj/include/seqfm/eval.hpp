#pragma once

#include <string>
#include <vector>

#include "seqfm/losses.hpp"
#include "seqfm/model.hpp"

namespace seqfm {

// One ranked item inside a request group: per-head scores and binary labels,
// plus the item's age at request time.
struct GroupItem {
    std::vector<double> scores;
    std::vector<int> labels;
    double age_days = 0.0;
};

// Items recommended together in one request.
struct ScoredGroup {
    u64 group_id = 0;
    std::vector<GroupItem> items;
};

// Mean over groups of (positives among the top min(3,n) by the head's score)
// / min(3,n). Ties break by ascending item index so reports are reproducible.
double hit_at_3(const std::vector<ScoredGroup>& groups, int head);

// Same metric restricted to items younger than max_age_days; groups with no
// such item are skipped. Bands are cumulative: <7d is a subset of <28d.
double hit_at_3_age(const std::vector<ScoredGroup>& groups, int head, double max_age_days);

// Per-head metric table for one run.
struct MetricReport {
    std::vector<std::string> heads;
    std::vector<double> overall;
    std::vector<double> fresh7;  // age < 7d
    std::vector<double> fresh28; // age < 28d
    int groups = 0;
};

MetricReport evaluate_groups(const std::vector<ScoredGroup>& groups,
                             const std::vector<std::string>& head_names);

// ---------------------------------------------------------------------------
// Retrieval probe for pretraining quality.

// Target vectors for a fixed item list, rows aligned with `items`.
struct Catalog {
    std::vector<u64> items;
    Mat z; // items x d_model, via the target head over each item's embedding
};

Catalog build_catalog(const TransformerParams& p, const IdEmbSource& ids,
                      const std::vector<u64>& items);

// Fraction of next-positive events whose catalog vector ranks in the top k by
// inner product with the output at the preceding position. Anchors are
// positions i with a positive event at i+1 inside the valid prefix.
// max_anchors > 0 caps the probe for speed (first anchors in order).
double recall_at_k(const TransformerParams& p, const IdEmbSource& ids, const Catalog& catalog,
                   const std::vector<Segment>& segments, const PretrainConfig& loss_cfg, int k,
                   int max_anchors = 0);

// ---------------------------------------------------------------------------
// Ablation table over named runs; lifts are relative to the named baseline.

struct AblationEntry {
    std::string name;
    MetricReport report;
};

// Aligned text table; cells show the metric and (metric-baseline)/baseline.
// Row order follows `runs`. Baseline must be present by name.
std::string ablation_report(const std::vector<AblationEntry>& runs,
                            const std::string& baseline_name);

// Machine-readable lines: run.head.column=value
std::string ablation_records(const std::vector<AblationEntry>& runs,
                             const std::string& baseline_name);

} // namespace seqfm
