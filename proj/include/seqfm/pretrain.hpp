#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "seqfm/eval.hpp"
#include "seqfm/losses.hpp"
#include "seqfm/model.hpp"
#include "seqfm/optim.hpp"

namespace seqfm {

struct PretrainRunConfig {
    ModelConfig model;
    PretrainConfig loss;
    OptimConfig optim;

    int table_subtables = 8;
    int table_rows = 4096;
    int table_d_sub = 8;

    int segment_len = 64;   // L; also the forward length cap
    int batch_segments = 16;
    int epochs = 3;
    u64 seed = 1;
    double val_fraction = 0.1; // split by user-id hash
    int log_every = 0;         // steps between progress lines; 0 = epochs only

    int recall_k = 10;
    int recall_max_anchors = 2000; // probe cap per epoch; 0 = all

    std::string to_config_text() const;
};

struct EpochStats {
    int epoch = 0;
    int steps = 0;
    double l_ntl = 0, l_mtl = 0, l_ftl = 0, total = 0; // term-weighted epoch means
    double tau = 0;
    double recall = 0; // recall@k on the held-out split; -1 when unavailable
};

struct PretrainResult {
    TransformerParams params;
    HashedEmbeddingTable table;
    std::vector<EpochStats> epochs;
    int train_users = 0, val_users = 0;
    i64 steps = 0;
};

// Hash split on user id; val_fraction of users go to the second vector.
void split_users(const std::vector<UserSequence>& data, double val_fraction, u64 seed,
                 std::vector<const UserSequence*>& train, std::vector<const UserSequence*>& val);

// Full training loop: segment, batch, optimize the contrastive objectives,
// probe retrieval recall on the held-out users after each epoch. Deterministic
// for a fixed config. epochs == 0 returns the initialization untouched.
// Non-finite losses abort with the failing step index.
PretrainResult pretrain_run(const std::vector<UserSequence>& data, const PretrainRunConfig& cfg,
                            std::ostream* log = nullptr);

} // namespace seqfm
