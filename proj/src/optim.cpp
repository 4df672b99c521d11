#include "seqfm/optim.hpp"

#include <cmath>

namespace seqfm {

void Optimizer::add_param(Param* p, float lr_factor) {
    SEQFM_CHECK(p != nullptr, "optimizer: null param");
    SEQFM_CHECK(t_ == 0, "optimizer: cannot register params after stepping");
    for (const Slot& s : slots_)
        SEQFM_CHECK(s.p != p, "optimizer: param '" << p->name << "' registered twice");
    Slot s;
    s.p = p;
    s.lr_factor = lr_factor;
    if (!cfg_.plain_sgd) {
        s.m = Mat(p->v.rows, p->v.cols);
        s.v = Mat(p->v.rows, p->v.cols);
    }
    slots_.push_back(std::move(s));
}

void Optimizer::add_params(const std::vector<Param*>& ps, float lr_factor) {
    for (Param* p : ps) add_param(p, lr_factor);
}

void Optimizer::add_table(HashedEmbeddingTable* t, float lr_factor) {
    SEQFM_CHECK(t != nullptr, "optimizer: null table");
    SEQFM_CHECK(t_ == 0, "optimizer: cannot register tables after stepping");
    TableSlot ts;
    ts.t = t;
    ts.lr_factor = lr_factor;
    tables_.push_back(std::move(ts));
}

void Optimizer::update_span(float* w, const float* g, float* m, float* v, int n, float factor,
                            double bc1, double bc2) {
    float lr = cfg_.lr * factor;
    if (lr == 0.0f) return;
    if (cfg_.plain_sgd) {
        for (int i = 0; i < n; i++) w[i] -= lr * (g[i] + cfg_.weight_decay * w[i]);
        return;
    }
    for (int i = 0; i < n; i++) {
        m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        w[i] -= lr * static_cast<float>(mhat / (std::sqrt(vhat) + cfg_.eps) +
                                        cfg_.weight_decay * w[i]);
    }
}

void Optimizer::step(const std::vector<EmbeddingGradSink*>& sinks) {
    SEQFM_CHECK(sinks.size() == tables_.size(),
                "optimizer: got " << sinks.size() << " sinks for " << tables_.size()
                                  << " registered tables");
    t_++;
    double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));

    for (Slot& s : slots_) {
        update_span(s.p->v.a.data(), s.p->g.a.data(),
                    cfg_.plain_sgd ? nullptr : s.m.a.data(),
                    cfg_.plain_sgd ? nullptr : s.v.a.data(),
                    static_cast<int>(s.p->v.size()), s.lr_factor, bc1, bc2);
        s.p->g.zero();
    }

    for (size_t ti = 0; ti < tables_.size(); ti++) {
        TableSlot& ts = tables_[ti];
        EmbeddingGradSink& sink = *sinks[ti];
        int d = ts.t->d_sub();
        for (const auto& [key, grad] : sink.rows()) {
            float* w = ts.t->row(key.first, key.second);
            if (cfg_.plain_sgd) {
                update_span(w, grad.data(), nullptr, nullptr, d, ts.lr_factor, bc1, bc2);
                continue;
            }
            auto it = ts.state.find(key);
            if (it == ts.state.end())
                it = ts.state.emplace(key, std::make_pair(Vec(d, 0.0f), Vec(d, 0.0f))).first;
            update_span(w, grad.data(), it->second.first.data(), it->second.second.data(), d,
                        ts.lr_factor, bc1, bc2);
        }
        sink.clear();
    }
}

} // namespace seqfm
