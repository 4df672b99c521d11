#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "seqfm/common.hpp"
#include "seqfm/mat.hpp"
#include "seqfm/rng.hpp"

namespace seqfm {

// Closed action/surface enumerations. Serialized as the small integers below;
// order is part of the on-disk format.
enum class Action : u8 {
    Save = 0,
    Click = 1,
    Clickthrough = 2,
    Download = 3,
    Share = 4,
    Hide = 5,
    Impression = 6,
};
inline constexpr int kActionCount = 7;

enum class Surface : u8 {
    Homefeed = 0,
    RelatedItems = 1,
    Search = 2,
    Other = 3,
};
inline constexpr int kSurfaceCount = 4;

const char* action_name(Action a);
const char* surface_name(Surface s);
std::optional<Action> action_from_name(const std::string& name);

struct Event {
    u64 timestamp = 0; // seconds since epoch
    Action action = Action::Impression;
    Surface surface = Surface::Other;
    u64 item_id = 0;
};

inline bool operator==(const Event& a, const Event& b) {
    return a.timestamp == b.timestamp && a.action == b.action &&
           a.surface == b.surface && a.item_id == b.item_id;
}

struct UserSequence {
    u64 user_id = 0;
    std::vector<Event> events; // timestamps non-decreasing
};

inline bool operator==(const UserSequence& a, const UserSequence& b) {
    return a.user_id == b.user_id && a.events == b.events;
}

// Fixed-length window of one user's events. events.size() == length L;
// the first `valid` entries are real, the rest is zero padding.
struct Segment {
    u64 user_id = 0;
    std::vector<Event> events;
    int valid = 0;

    int length() const { return static_cast<int>(events.size()); }
};

struct SegmentBatch {
    int L = 0;
    std::vector<Segment> segments;

    int batch_size() const { return static_cast<int>(segments.size()); }
    bool mask(int b, int i) const { return i < segments[b].valid; }
};

// Cuts a sequence into non-overlapping segments of length L. The final short
// segment is kept and right-padded; concatenating the valid prefixes
// reproduces the sequence exactly.
std::vector<Segment> segment(const UserSequence& seq, int L);

struct SyntheticConfig {
    u32 num_users = 1000;
    u32 num_items = 1000;
    u32 num_topics = 16;
    u32 events_per_user_min = 100;
    u32 events_per_user_max = 200;
    double positive_rate = 0.3;
    u64 rng_seed = 7;
    u32 aux_dim = 16; // dimension of the synthetic auxiliary item vectors
};

// Deterministic latent structure behind a synthetic dataset: topic vectors,
// item->topic assignment, per-user topic mixtures, item creation times.
// Everything is a pure function of the config, so consumers (ranking data,
// aux embeddings, serving) can reconstruct it from the config alone.
class SyntheticWorld {
public:
    explicit SyntheticWorld(const SyntheticConfig& cfg);

    const SyntheticConfig& config() const { return cfg_; }

    u32 item_topic(u64 item_id) const;
    // Creation timestamp; spread so the <7d / 7-28d / >=28d age bands are all
    // populated relative to reference_time().
    u64 item_creation_time(u64 item_id) const;
    u64 reference_time() const { return reference_time_; }

    // Topic unit vector plus small item-specific noise; stand-in for a
    // pretrained content/graph embedding.
    Vec item_aux_embedding(u64 item_id) const;

    struct UserMixture {
        std::vector<u32> topics;   // 1..3 distinct topics
        std::vector<double> weights; // same size, sums to 1
    };
    UserMixture user_mixture(u64 user_id) const;

    // Items of a topic, for sampling positives.
    const std::vector<u64>& topic_items(u32 topic) const { return topic_items_[topic]; }

    double topic_affinity(u64 user_id, u64 item_id) const;

private:
    SyntheticConfig cfg_;
    Mat topic_vecs_; // num_topics x aux_dim, unit rows
    std::vector<std::vector<u64>> topic_items_;
    u64 reference_time_ = 0;
};

// Deterministic generator: positive-action events draw items from the user's
// topic mixture, negative/impression events draw uniformly. Timestamps are
// strictly increasing within a user.
std::vector<UserSequence> generate_synthetic(const SyntheticConfig& cfg);

// Binary sequence file ("PSEQ1"), little-endian. An optional config trailer
// ("PCFG" + u32 len + key=value text) may follow the user records; it is how
// artifacts carry their producing configuration.
void write_sequences(const std::vector<UserSequence>& seqs, const std::string& path,
                     const std::string& config_text = "");
std::vector<UserSequence> read_sequences(const std::string& path,
                                         std::string* config_text = nullptr);

} // namespace seqfm
