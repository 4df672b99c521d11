#pragma once

#include <map>
#include <utility>
#include <vector>

#include "seqfm/embed.hpp"
#include "seqfm/model.hpp"

namespace seqfm {

struct OptimConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
    bool plain_sgd = false; // skip moments, p -= lr * factor * g
};

// Decoupled-weight-decay Adam over registered dense params plus lazily
// materialized per-row state for hashed-table gradients. Every trainable
// tensor must be registered before the first step; lr_factor scales the
// group's effective rate (0 freezes it).
class Optimizer {
public:
    explicit Optimizer(OptimConfig cfg) : cfg_(cfg) {}

    void add_param(Param* p, float lr_factor = 1.0f);
    void add_params(const std::vector<Param*>& ps, float lr_factor = 1.0f);
    void add_table(HashedEmbeddingTable* t, float lr_factor = 1.0f);

    // Applies dense gradients, then each sink to its table (sinks[i] pairs
    // with the i-th registered table). Zeroes what it consumed.
    void step(const std::vector<EmbeddingGradSink*>& sinks = {});

    i64 steps() const { return t_; }
    const OptimConfig& config() const { return cfg_; }

private:
    struct Slot {
        Param* p;
        float lr_factor;
        Mat m, v;
    };
    struct TableSlot {
        HashedEmbeddingTable* t;
        float lr_factor;
        // (subtable, row) -> first/second moment rows, created on first touch
        std::map<std::pair<int, u32>, std::pair<Vec, Vec>> state;
    };

    void update_span(float* w, const float* g, float* m, float* v, int n, float factor,
                     double bc1, double bc2);

    OptimConfig cfg_;
    std::vector<Slot> slots_;
    std::vector<TableSlot> tables_;
    i64 t_ = 0;
};

} // namespace seqfm
