#include "seqfm/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ostream>
#include <set>
#include <sstream>

namespace seqfm {

std::string PretrainRunConfig::to_config_text() const {
    std::ostringstream o;
    o << model.to_config_text();
    o << "loss.window=" << loss.window << "\n";
    o << "loss.l_downstream=" << loss.l_downstream << "\n";
    o << "loss.negatives=" << loss.negatives << "\n";
    o << "loss.tau_init=" << loss.tau_init << "\n";
    o << "loss.w_ntl=" << loss.w_ntl << "\n";
    o << "loss.w_mtl=" << loss.w_mtl << "\n";
    o << "loss.w_ftl=" << loss.w_ftl << "\n";
    o << "optim.lr=" << optim.lr << "\n";
    o << "optim.weight_decay=" << optim.weight_decay << "\n";
    o << "optim.plain_sgd=" << (optim.plain_sgd ? 1 : 0) << "\n";
    o << "table.subtables=" << table_subtables << "\n";
    o << "table.rows=" << table_rows << "\n";
    o << "table.d_sub=" << table_d_sub << "\n";
    o << "train.segment_len=" << segment_len << "\n";
    o << "train.batch_segments=" << batch_segments << "\n";
    o << "train.epochs=" << epochs << "\n";
    o << "train.seed=" << seed << "\n";
    o << "train.val_fraction=" << val_fraction << "\n";
    return o.str();
}

void split_users(const std::vector<UserSequence>& data, double val_fraction, u64 seed,
                 std::vector<const UserSequence*>& train, std::vector<const UserSequence*>& val) {
    SEQFM_CHECK(val_fraction >= 0.0 && val_fraction < 1.0,
                "split_users: val_fraction must be in [0,1)");
    u64 salt = mix64(seed ^ 0x73706c6974ULL);
    u64 cut = static_cast<u64>(std::llround(val_fraction * 10000.0));
    train.clear();
    val.clear();
    for (const UserSequence& us : data) {
        if (mix64(us.user_id ^ salt) % 10000 < cut)
            val.push_back(&us);
        else
            train.push_back(&us);
    }
}

namespace {

struct BatchStats {
    LossValues lv;
    int shortfall = 0;
};

// One optimization step over a batch of segments. Losses are normalized per
// term across the whole batch, so all segments' outputs are concatenated and
// fed through a single merged plan.
BatchStats run_batch(TransformerParams& p, HashedEmbeddingTable& table, Optimizer& opt,
                     const PretrainRunConfig& cfg, const std::vector<const Segment*>& batch,
                     Rng& rng) {
    const int d_model = cfg.model.d_model;

    TargetPool pool;
    std::vector<std::vector<int>> maps(batch.size());
    int total_rows = 0;
    for (size_t s = 0; s < batch.size(); s++) {
        const Segment& seg = *batch[s];
        maps[s].assign(static_cast<size_t>(seg.length()), -1);
        for (int i = 0; i < seg.valid; i++)
            if (cfg.loss.is_positive(seg.events[static_cast<size_t>(i)].action))
                maps[s][static_cast<size_t>(i)] =
                    pool.add(seg.user_id, seg.events[static_cast<size_t>(i)].item_id);
        total_rows += seg.valid;
    }

    // target vectors for every pool entry, cached for the backward pass
    Mat item_embs(pool.size(), table.d_emb());
    for (int r = 0; r < pool.size(); r++) table.lookup(pool.item[static_cast<size_t>(r)],
                                                       item_embs.row(r));
    MlpCache psi_cache;
    mlp_forward(p.psi, item_embs, pool.z, &psi_cache);

    // per-segment forwards into one concatenated output matrix
    Mat h_all(total_rows, d_model);
    std::vector<ForwardCache> caches(batch.size());
    std::vector<int> offsets(batch.size());
    int off = 0;
    for (size_t s = 0; s < batch.size(); s++) {
        const Segment& seg = *batch[s];
        offsets[s] = off;
        Mat e = segment_inputs(p, table, seg.events.data(), seg.valid);
        Mat h = forward_rows(p, e, &caches[s]);
        std::memcpy(h_all.row(off), h.a.data(), sizeof(float) * h.size());
        off += seg.valid;
    }

    // merged plan: anchors shift to concatenated rows, pool rows are global
    LossPlan plan;
    BatchStats out;
    for (size_t s = 0; s < batch.size(); s++) {
        LossPlan one = build_loss_plan(*batch[s], cfg.loss, pool, maps[s], rng);
        auto shift = [&](std::vector<LossTerm>& dst, std::vector<LossTerm>& src) {
            for (LossTerm& t : src) {
                t.anchor += offsets[s];
                dst.push_back(std::move(t));
            }
        };
        shift(plan.ntl, one.ntl);
        shift(plan.mtl, one.mtl);
        shift(plan.ftl, one.ftl);
        out.shortfall += one.shortfall;
    }

    double tau = p.tau();
    out.lv = pretrain_loss(h_all, plan, pool, tau, cfg.loss);
    SEQFM_CHECK(std::isfinite(out.lv.total), "non-finite loss");

    Mat dh(h_all.rows, d_model), dz(pool.size(), d_model);
    double dlog_tau = 0.0;
    pretrain_loss_backward(h_all, plan, pool, tau, cfg.loss, 1.0, dh, dz, &dlog_tau);
    p.log_tau.g.at(0, 0) += static_cast<float>(dlog_tau);

    EmbeddingGradSink sink;
    for (size_t s = 0; s < batch.size(); s++) {
        const Segment& seg = *batch[s];
        Mat dh_seg(seg.valid, d_model);
        std::memcpy(dh_seg.a.data(), dh.row(offsets[s]), sizeof(float) * dh_seg.size());
        Mat de = backward_rows(p, caches[s], dh_seg);
        segment_inputs_backward(p, table, sink, seg.events.data(), seg.valid, 0, de);
    }
    if (pool.size() > 0) {
        Mat d_item_embs;
        mlp_backward(p.psi, psi_cache, dz, d_item_embs);
        for (int r = 0; r < pool.size(); r++)
            sink.accumulate_lookup_grad(table, pool.item[static_cast<size_t>(r)],
                                        d_item_embs.row(r));
    }
    opt.step({&sink});
    return out;
}

} // namespace

PretrainResult pretrain_run(const std::vector<UserSequence>& data, const PretrainRunConfig& cfg,
                            std::ostream* log) {
    SEQFM_CHECK(cfg.segment_len >= 2, "pretrain: segment_len must be >= 2");
    SEQFM_CHECK(cfg.model.max_len >= cfg.segment_len,
                "pretrain: model max_len " << cfg.model.max_len << " below segment_len "
                                           << cfg.segment_len);
    SEQFM_CHECK(cfg.batch_segments >= 1, "pretrain: batch_segments must be >= 1");
    SEQFM_CHECK(cfg.epochs >= 0, "pretrain: epochs must be >= 0");
    cfg.loss.validate(cfg.segment_len);
    SEQFM_CHECK(cfg.table_subtables * cfg.table_d_sub == cfg.model.d_emb,
                "pretrain: table dims " << cfg.table_subtables << "x" << cfg.table_d_sub
                                        << " do not produce d_emb " << cfg.model.d_emb);

    PretrainResult res;
    res.params.init(cfg.model, mix64(cfg.seed ^ 0x696e6974ULL), cfg.loss.tau_init);
    res.table = HashedEmbeddingTable(cfg.table_subtables, cfg.table_rows, cfg.table_d_sub,
                                     mix64(cfg.seed ^ 0x7461626cULL));

    std::vector<const UserSequence*> train_users, val_users;
    split_users(data, cfg.val_fraction, cfg.seed, train_users, val_users);
    res.train_users = static_cast<int>(train_users.size());
    res.val_users = static_cast<int>(val_users.size());

    std::vector<Segment> train_segs, val_segs;
    for (const UserSequence* us : train_users)
        for (Segment& s : segment(*us, cfg.segment_len))
            if (s.valid >= 2) train_segs.push_back(std::move(s));
    for (const UserSequence* us : val_users)
        for (Segment& s : segment(*us, cfg.segment_len))
            if (s.valid >= 2) val_segs.push_back(std::move(s));
    SEQFM_CHECK(cfg.epochs == 0 || !train_segs.empty(), "pretrain: no trainable segments");

    // retrieval catalog: every item observed anywhere in the dataset
    std::set<u64> item_set;
    for (const UserSequence& us : data)
        for (const Event& e : us.events) item_set.insert(e.item_id);
    std::vector<u64> catalog_items(item_set.begin(), item_set.end());

    Optimizer opt(cfg.optim);
    opt.add_params(res.params.all_params());
    opt.add_table(&res.table);

    Rng rng(mix64(cfg.seed ^ 0x747261696eULL));
    i64 step_index = 0;
    for (int epoch = 1; epoch <= cfg.epochs; epoch++) {
        std::vector<int> order(train_segs.size());
        for (size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);
        for (size_t i = order.size(); i > 1; i--)
            std::swap(order[i - 1], order[rng.uniform_u64(i)]);

        EpochStats es;
        es.epoch = epoch;
        double sum_ntl = 0, sum_mtl = 0, sum_ftl = 0;
        long n_ntl = 0, n_mtl = 0, n_ftl = 0;
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_segments)) {
            std::vector<const Segment*> batch;
            for (size_t b = pos; b < order.size() && b < pos + cfg.batch_segments; b++)
                batch.push_back(&train_segs[static_cast<size_t>(order[b])]);
            step_index++;
            BatchStats bs;
            try {
                bs = run_batch(res.params, res.table, opt, cfg, batch, rng);
            } catch (const std::runtime_error& err) {
                SEQFM_CHECK(false, "pretrain aborted at step " << step_index << ": "
                                                               << err.what());
            }
            es.steps++;
            sum_ntl += bs.lv.l_ntl * bs.lv.n_ntl;
            sum_mtl += bs.lv.l_mtl * bs.lv.n_mtl;
            sum_ftl += bs.lv.l_ftl * bs.lv.n_ftl;
            n_ntl += bs.lv.n_ntl;
            n_mtl += bs.lv.n_mtl;
            n_ftl += bs.lv.n_ftl;
            if (log && cfg.log_every > 0 && step_index % cfg.log_every == 0)
                (*log) << "step " << step_index << " l_ntl " << bs.lv.l_ntl << " l_mtl "
                       << bs.lv.l_mtl << " l_ftl " << bs.lv.l_ftl << " tau "
                       << res.params.tau() << "\n";
        }
        es.l_ntl = n_ntl ? sum_ntl / n_ntl : 0.0;
        es.l_mtl = n_mtl ? sum_mtl / n_mtl : 0.0;
        es.l_ftl = n_ftl ? sum_ftl / n_ftl : 0.0;
        es.total = cfg.loss.w_ntl * es.l_ntl + cfg.loss.w_mtl * es.l_mtl +
                   cfg.loss.w_ftl * es.l_ftl;
        es.tau = res.params.tau();

        es.recall = -1.0;
        if (!val_segs.empty() && !catalog_items.empty() &&
            cfg.recall_k <= static_cast<int>(catalog_items.size())) {
            Catalog cat = build_catalog(res.params, res.table, catalog_items);
            es.recall = recall_at_k(res.params, res.table, cat, val_segs, cfg.loss,
                                    cfg.recall_k, cfg.recall_max_anchors);
        }
        if (log)
            (*log) << "epoch " << epoch << "/" << cfg.epochs << " steps " << es.steps
                   << " l_ntl " << es.l_ntl << " l_mtl " << es.l_mtl << " l_ftl " << es.l_ftl
                   << " total " << es.total << " tau " << es.tau << " recall@" << cfg.recall_k
                   << " " << es.recall << "\n";
        res.epochs.push_back(es);
    }
    res.steps = step_index;
    return res;
}

} // namespace seqfm
