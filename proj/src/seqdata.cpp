#include "seqfm/seqdata.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace seqfm {

const char* action_name(Action a) {
    switch (a) {
        case Action::Save: return "save";
        case Action::Click: return "click";
        case Action::Clickthrough: return "clickthrough";
        case Action::Download: return "download";
        case Action::Share: return "share";
        case Action::Hide: return "hide";
        case Action::Impression: return "impression";
    }
    return "?";
}

const char* surface_name(Surface s) {
    switch (s) {
        case Surface::Homefeed: return "homefeed";
        case Surface::RelatedItems: return "related-items";
        case Surface::Search: return "search";
        case Surface::Other: return "other";
    }
    return "?";
}

std::optional<Action> action_from_name(const std::string& name) {
    for (int i = 0; i < kActionCount; i++) {
        auto a = static_cast<Action>(i);
        if (name == action_name(a)) return a;
    }
    return std::nullopt;
}

std::vector<Segment> segment(const UserSequence& seq, int L) {
    SEQFM_CHECK(L >= 2, "segment: L must be >= 2, got " << L);
    std::vector<Segment> out;
    const auto n = static_cast<int>(seq.events.size());
    for (int start = 0; start < n; start += L) {
        Segment s;
        s.user_id = seq.user_id;
        s.valid = std::min(L, n - start);
        s.events.assign(static_cast<size_t>(L), Event{});
        std::copy(seq.events.begin() + start, seq.events.begin() + start + s.valid,
                  s.events.begin());
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic world

SyntheticWorld::SyntheticWorld(const SyntheticConfig& cfg) : cfg_(cfg) {
    SEQFM_CHECK(cfg.num_topics >= 1 && cfg.num_topics <= cfg.num_items,
                "SyntheticConfig: need 1 <= num_topics <= num_items");
    SEQFM_CHECK(cfg.positive_rate > 0.0 && cfg.positive_rate < 1.0,
                "SyntheticConfig: positive_rate must be in (0,1)");
    SEQFM_CHECK(cfg.events_per_user_min >= 1 &&
                    cfg.events_per_user_min <= cfg.events_per_user_max,
                "SyntheticConfig: bad events_per_user range");

    Rng rng(mix64(cfg.rng_seed ^ 0x746f706963ULL)); // topic stream
    topic_vecs_ = Mat(static_cast<int>(cfg.num_topics), static_cast<int>(cfg.aux_dim));
    for (int t = 0; t < topic_vecs_.rows; t++) {
        float* r = topic_vecs_.row(t);
        for (int j = 0; j < topic_vecs_.cols; j++) r[j] = static_cast<float>(rng.normal());
        float n = l2_norm(r, topic_vecs_.cols);
        for (int j = 0; j < topic_vecs_.cols; j++) r[j] /= (n > 0 ? n : 1.0f);
    }
    topic_items_.assign(cfg.num_topics, {});
    for (u64 it = 0; it < cfg.num_items; it++) {
        topic_items_[item_topic(it)].push_back(it);
    }
    // Topics can come out empty at small num_items; reassign orphans so every
    // topic has at least one item to sample from.
    for (u32 t = 0; t < cfg.num_topics; t++) {
        if (topic_items_[t].empty()) topic_items_[t].push_back(t % cfg.num_items);
    }
    reference_time_ = 1700000000ULL + 400ULL * 86400ULL;
}

u32 SyntheticWorld::item_topic(u64 item_id) const {
    return static_cast<u32>(mix64(cfg_.rng_seed ^ mix64(item_id ^ 0xabcdULL)) % cfg_.num_topics);
}

u64 SyntheticWorld::item_creation_time(u64 item_id) const {
    // ~1/3 of items in each freshness band: <7d, 7-28d, >=28d old at the
    // reference time.
    u64 h = mix64(cfg_.rng_seed ^ mix64(item_id ^ 0x4372ULL));
    u64 band = h % 3;
    u64 frac = (h >> 8) % 1000;
    u64 age_secs = 0;
    const u64 day = 86400;
    switch (band) {
        case 0: age_secs = frac * 7 * day / 1000; break;
        case 1: age_secs = 7 * day + frac * 21 * day / 1000; break;
        default: age_secs = 28 * day + frac * 300 * day / 1000; break;
    }
    return reference_time_ - age_secs;
}

Vec SyntheticWorld::item_aux_embedding(u64 item_id) const {
    u32 t = item_topic(item_id);
    Rng rng(mix64(cfg_.rng_seed ^ mix64(item_id ^ 0x617578ULL)));
    Vec v(cfg_.aux_dim);
    const float* tv = topic_vecs_.row(static_cast<int>(t));
    for (u32 j = 0; j < cfg_.aux_dim; j++)
        v[j] = tv[j] + 0.1f * static_cast<float>(rng.normal());
    return v;
}

SyntheticWorld::UserMixture SyntheticWorld::user_mixture(u64 user_id) const {
    Rng rng(mix64(cfg_.rng_seed ^ mix64(user_id ^ 0x75736572ULL)));
    u32 k = 1 + static_cast<u32>(rng.uniform_u64(3)); // 1..3 topics
    k = std::min(k, cfg_.num_topics);
    UserMixture m;
    while (m.topics.size() < k) {
        u32 t = static_cast<u32>(rng.uniform_u64(cfg_.num_topics));
        if (std::find(m.topics.begin(), m.topics.end(), t) == m.topics.end())
            m.topics.push_back(t);
    }
    double total = 0;
    for (size_t i = 0; i < m.topics.size(); i++) {
        double w = 0.5 + rng.uniform();
        m.weights.push_back(w);
        total += w;
    }
    for (auto& w : m.weights) w /= total;
    return m;
}

double SyntheticWorld::topic_affinity(u64 user_id, u64 item_id) const {
    auto mix = user_mixture(user_id);
    u32 t = item_topic(item_id);
    for (size_t i = 0; i < mix.topics.size(); i++)
        if (mix.topics[i] == t) return mix.weights[i] * mix.topics.size();
    return 0.0;
}

std::vector<UserSequence> generate_synthetic(const SyntheticConfig& cfg) {
    SyntheticWorld world(cfg);
    std::vector<UserSequence> out;
    out.reserve(cfg.num_users);

    constexpr Action kPositiveActions[] = {Action::Save, Action::Click, Action::Clickthrough,
                                           Action::Download, Action::Share};

    for (u64 uid = 0; uid < cfg.num_users; uid++) {
        Rng rng(mix64(cfg.rng_seed ^ mix64(uid ^ 0x657674ULL)));
        auto mix = world.user_mixture(uid);

        UserSequence seq;
        seq.user_id = uid;
        u32 n = cfg.events_per_user_min +
                static_cast<u32>(rng.uniform_u64(cfg.events_per_user_max - cfg.events_per_user_min + 1));
        // Sequences end a little before the world reference time so ranking
        // requests can use reference_time() as "now".
        u64 ts = world.reference_time() - 86400ULL - n * 3600ULL;

        seq.events.reserve(n);
        for (u32 i = 0; i < n; i++) {
            ts += 1 + rng.uniform_u64(3600);
            Event e;
            e.timestamp = ts;
            double su = rng.uniform();
            e.surface = su < 0.5   ? Surface::Homefeed
                        : su < 0.7 ? Surface::RelatedItems
                        : su < 0.9 ? Surface::Search
                                   : Surface::Other;
            if (rng.bernoulli(cfg.positive_rate)) {
                e.action = kPositiveActions[rng.uniform_u64(5)];
                // pick a topic by mixture weight, then an item in it
                double r = rng.uniform();
                size_t ti = 0;
                double acc = 0;
                for (; ti + 1 < mix.topics.size(); ti++) {
                    acc += mix.weights[ti];
                    if (r < acc) break;
                }
                const auto& items = world.topic_items(mix.topics[ti]);
                e.item_id = items[rng.uniform_u64(items.size())];
            } else {
                e.action = rng.bernoulli(0.8) ? Action::Impression : Action::Hide;
                e.item_id = rng.uniform_u64(cfg.num_items);
            }
            seq.events.push_back(e);
        }
        out.push_back(std::move(seq));
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk format

namespace {

constexpr char kMagic[5] = {'P', 'S', 'E', 'Q', '1'};
constexpr char kCfgMagic[4] = {'P', 'C', 'F', 'G'};

template <typename T>
void put(std::string& buf, T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T)); // little-endian host assumed (x86/arm64)
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    bool eof() const { return pos >= buf.size(); }
    size_t remaining() const { return buf.size() - pos; }

    template <typename T>
    T get(const char* what, size_t record) {
        SEQFM_CHECK(remaining() >= sizeof(T),
                    "sequence file truncated while reading " << what << " (record " << record << ")");
        T v;
        std::memcpy(&v, buf.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
};

} // namespace

void write_sequences(const std::vector<UserSequence>& seqs, const std::string& path,
                     const std::string& config_text) {
    std::string buf;
    buf.append(kMagic, sizeof(kMagic));
    put<u32>(buf, static_cast<u32>(seqs.size()));
    for (const auto& s : seqs) {
        put<u64>(buf, s.user_id);
        put<u32>(buf, static_cast<u32>(s.events.size()));
        for (const auto& e : s.events) {
            put<u64>(buf, e.timestamp);
            put<u8>(buf, static_cast<u8>(e.action));
            put<u8>(buf, static_cast<u8>(e.surface));
            put<u64>(buf, e.item_id);
        }
    }
    if (!config_text.empty()) {
        buf.append(kCfgMagic, sizeof(kCfgMagic));
        put<u32>(buf, static_cast<u32>(config_text.size()));
        buf.append(config_text);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    SEQFM_CHECK(f.good(), "cannot open " << path << " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    SEQFM_CHECK(f.good(), "write failed for " << path);
}

std::vector<UserSequence> read_sequences(const std::string& path, std::string* config_text) {
    std::ifstream f(path, std::ios::binary);
    SEQFM_CHECK(f.good(), "cannot open " << path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    SEQFM_CHECK(buf.size() >= sizeof(kMagic) + sizeof(u32),
                "sequence file too short for header: " << path);
    SEQFM_CHECK(std::memcmp(buf.data(), kMagic, sizeof(kMagic)) == 0,
                "bad magic in sequence file: " << path);

    Reader r{buf, sizeof(kMagic)};
    u32 user_count = r.get<u32>("user count", 0);

    std::vector<UserSequence> out;
    out.reserve(user_count);
    size_t record = 0; // global event record index, for error messages
    for (u32 u = 0; u < user_count; u++) {
        UserSequence seq;
        seq.user_id = r.get<u64>("user id", record);
        u32 n = r.get<u32>("event count", record);
        seq.events.reserve(n);
        u64 prev_ts = 0;
        for (u32 i = 0; i < n; i++, record++) {
            Event e;
            e.timestamp = r.get<u64>("timestamp", record);
            u8 action = r.get<u8>("action", record);
            u8 surface = r.get<u8>("surface", record);
            e.item_id = r.get<u64>("item id", record);
            SEQFM_CHECK(action < kActionCount,
                        "invalid action value " << int(action) << " at record " << record);
            SEQFM_CHECK(surface < kSurfaceCount,
                        "invalid surface value " << int(surface) << " at record " << record);
            e.action = static_cast<Action>(action);
            e.surface = static_cast<Surface>(surface);
            SEQFM_CHECK(i == 0 || e.timestamp >= prev_ts,
                        "non-monotonic timestamp at record " << record << " (user " << seq.user_id
                                                             << ", event " << i << ")");
            prev_ts = e.timestamp;
            seq.events.push_back(e);
        }
        out.push_back(std::move(seq));
    }

    if (config_text) config_text->clear();
    if (!r.eof()) {
        SEQFM_CHECK(r.remaining() >= sizeof(kCfgMagic) + sizeof(u32) &&
                        std::memcmp(buf.data() + r.pos, kCfgMagic, sizeof(kCfgMagic)) == 0,
                    "trailing bytes after user records are not a config trailer");
        r.pos += sizeof(kCfgMagic);
        u32 len = r.get<u32>("config length", record);
        SEQFM_CHECK(r.remaining() >= len, "sequence file truncated inside config trailer");
        if (config_text) config_text->assign(buf.data() + r.pos, len);
        r.pos += len;
        SEQFM_CHECK(r.eof(), "trailing bytes after config trailer");
    }
    return out;
}

} // namespace seqfm
