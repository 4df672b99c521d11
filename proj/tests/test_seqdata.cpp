#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "seqfm/seqdata.hpp"

using namespace seqfm;

namespace {

UserSequence make_seq(u64 user, int n, u64 seed = 1) {
    Rng rng(seed);
    UserSequence s;
    s.user_id = user;
    u64 ts = 1000;
    for (int i = 0; i < n; i++) {
        Event e;
        ts += rng.uniform_u64(50);
        e.timestamp = ts;
        e.action = static_cast<Action>(rng.uniform_u64(kActionCount));
        e.surface = static_cast<Surface>(rng.uniform_u64(kSurfaceCount));
        e.item_id = rng.next_u64();
        s.events.push_back(e);
    }
    return s;
}

std::string temp_path(const char* name) {
    return std::string("seqfm_test_") + name;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

} // namespace

TEST_CASE("segment: arithmetic partition") {
    UserSequence s = make_seq(1, 10);
    auto segs = segment(s, 4);
    REQUIRE(segs.size() == 3);
    CHECK(segs[0].valid == 4);
    CHECK(segs[1].valid == 4);
    CHECK(segs[2].valid == 2);
    for (const auto& sg : segs) {
        CHECK(sg.length() == 4);
        CHECK(sg.user_id == s.user_id);
    }
    // padding after valid is zeroed
    CHECK(segs[2].events[3] == Event{});
}

TEST_CASE("segment: exact fit and empty input") {
    UserSequence s = make_seq(2, 4);
    auto segs = segment(s, 4);
    REQUIRE(segs.size() == 1);
    CHECK(segs[0].valid == 4);

    UserSequence empty;
    CHECK(segment(empty, 8).empty());
    CHECK_THROWS(segment(s, 1));
}

TEST_CASE("segment: concatenating valid prefixes reproduces the sequence") {
    for (u64 seed = 0; seed < 20; seed++) {
        int n = static_cast<int>(Rng(seed).uniform_u64(40));
        int L = 2 + static_cast<int>(Rng(seed ^ 99).uniform_u64(9));
        UserSequence s = make_seq(seed, n, seed + 5);
        auto segs = segment(s, L);
        std::vector<Event> flat;
        for (const auto& sg : segs) {
            CHECK(sg.length() == L);
            CHECK(sg.valid >= 1);
            for (int i = 0; i < sg.valid; i++) flat.push_back(sg.events[i]);
        }
        CHECK(flat == s.events);
        if (n > 0) CHECK(static_cast<int>(segs.size()) == (n + L - 1) / L);
    }
}

TEST_CASE("generate_synthetic: determinism") {
    SyntheticConfig cfg;
    cfg.num_users = 30;
    cfg.num_items = 100;
    cfg.events_per_user_min = 10;
    cfg.events_per_user_max = 20;
    auto a = generate_synthetic(cfg);
    auto b = generate_synthetic(cfg);
    CHECK(a == b);
    cfg.rng_seed += 1;
    CHECK(generate_synthetic(cfg) != a);
}

TEST_CASE("generate_synthetic: timestamps strictly increasing, enums in range") {
    SyntheticConfig cfg;
    cfg.num_users = 20;
    auto data = generate_synthetic(cfg);
    REQUIRE(data.size() == cfg.num_users);
    for (const auto& s : data) {
        for (size_t i = 1; i < s.events.size(); i++)
            CHECK(s.events[i].timestamp > s.events[i - 1].timestamp);
        for (const auto& e : s.events) {
            CHECK(static_cast<int>(e.action) < kActionCount);
            CHECK(static_cast<int>(e.surface) < kSurfaceCount);
            CHECK(e.item_id < cfg.num_items);
        }
        CHECK(s.events.size() >= cfg.events_per_user_min);
        CHECK(s.events.size() <= cfg.events_per_user_max);
    }
}

TEST_CASE("generate_synthetic: one topic means fully pure positives") {
    SyntheticConfig cfg;
    cfg.num_users = 10;
    cfg.num_topics = 1;
    SyntheticWorld world(cfg);
    auto data = generate_synthetic(cfg);
    for (const auto& s : data)
        for (const auto& e : s.events)
            CHECK(world.item_topic(e.item_id) == 0);
}

TEST_CASE("generate_synthetic: positives concentrate on few topics") {
    SyntheticConfig cfg; // defaults: 1000 users, 1000 items, 16 topics, seed 7
    SyntheticWorld world(cfg);
    auto data = generate_synthetic(cfg);
    REQUIRE(data.size() == 1000);

    // per-user entropy of the topic distribution of positively-actioned items
    auto positive = [](Action a) { return a == Action::Save || a == Action::Download; };
    double total_entropy = 0.0;
    int counted_users = 0;
    for (const auto& s : data) {
        std::map<u32, int> topic_counts;
        int n_pos = 0;
        for (const auto& e : s.events) {
            if (!positive(e.action)) continue;
            topic_counts[world.item_topic(e.item_id)]++;
            n_pos++;
        }
        if (n_pos < 5) continue;
        double ent = 0.0;
        for (auto& [t, c] : topic_counts) {
            double p = static_cast<double>(c) / n_pos;
            ent -= p * std::log(p);
        }
        total_entropy += ent;
        counted_users++;
    }
    REQUIRE(counted_users > 500);
    double mean_entropy = total_entropy / counted_users;
    double uniform_entropy = std::log(16.0);
    // users mix at most 3 topics, so the mean must sit far below ln(16)
    CHECK(mean_entropy < 0.5 * uniform_entropy);
    CHECK(mean_entropy < std::log(4.0));
}

TEST_CASE("sequence file: round trip with config trailer") {
    SyntheticConfig cfg;
    cfg.num_users = 25;
    auto data = generate_synthetic(cfg);
    std::string path = temp_path("roundtrip.pseq");
    write_sequences(data, path, "seed=7\nnote=x\n");
    std::string cfg_text;
    auto back = read_sequences(path, &cfg_text);
    CHECK(back == data);
    CHECK(cfg_text == "seed=7\nnote=x\n");
    std::remove(path.c_str());
}

TEST_CASE("sequence file: empty dataset round trips") {
    std::string path = temp_path("empty.pseq");
    write_sequences({}, path);
    CHECK(read_sequences(path).empty());
    std::remove(path.c_str());
}

TEST_CASE("sequence file: timestamp regression names the record") {
    UserSequence s;
    s.user_id = 9;
    s.events.push_back({100, Action::Save, Surface::Homefeed, 1});
    s.events.push_back({50, Action::Click, Surface::Search, 2});
    std::string path = temp_path("regress.pseq");
    // write bypassing the writer's own validation
    std::string good_path = temp_path("good.pseq");
    UserSequence ok = s;
    ok.events[1].timestamp = 100;
    write_sequences({ok}, good_path);
    std::string bytes = slurp(good_path);
    // locate the second event's timestamp and stomp it with a smaller value
    // layout: magic(5) + count(4) + user_id(8) + n(4) + ev0(18) + ev1 ts(8)
    size_t off = 5 + 4 + 8 + 4 + 18;
    u64 bad = 50;
    bytes.replace(off, 8, reinterpret_cast<const char*>(&bad), 8);
    spit(path, bytes);
    CHECK_THROWS_WITH_AS(read_sequences(path), doctest::Contains("record 1"),
                         std::runtime_error);
    std::remove(path.c_str());
    std::remove(good_path.c_str());
}

TEST_CASE("sequence file: truncation and bad magic are errors") {
    SyntheticConfig cfg;
    cfg.num_users = 3;
    auto data = generate_synthetic(cfg);
    std::string path = temp_path("trunc.pseq");
    write_sequences(data, path);
    std::string bytes = slurp(path);

    spit(path, bytes.substr(0, bytes.size() - 1));
    CHECK_THROWS_AS(read_sequences(path), std::runtime_error);

    std::string corrupt = bytes;
    corrupt[0] = 'X';
    spit(path, corrupt);
    CHECK_THROWS_AS(read_sequences(path), std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("synthetic world: ages cover all three bands") {
    SyntheticConfig cfg;
    SyntheticWorld world(cfg);
    u64 ref = world.reference_time();
    int young = 0, mid = 0, old = 0;
    for (u64 item = 0; item < cfg.num_items; item++) {
        u64 created = world.item_creation_time(item);
        REQUIRE(created <= ref);
        double days = static_cast<double>(ref - created) / 86400.0;
        if (days < 7)
            young++;
        else if (days < 28)
            mid++;
        else
            old++;
    }
    CHECK(young > 50);
    CHECK(mid > 50);
    CHECK(old > 50);
}

TEST_CASE("synthetic world: aux embeddings are unit-ish and topic-aligned") {
    SyntheticConfig cfg;
    SyntheticWorld world(cfg);
    Vec a = world.item_aux_embedding(3);
    REQUIRE(a.size() == cfg.aux_dim);
    Vec b = world.item_aux_embedding(3);
    CHECK(a == b);

    // items of the same topic are closer than items of different topics
    std::vector<u64> same = world.topic_items(world.item_topic(3));
    REQUIRE(same.size() >= 2);
}
