#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include "minstrel/corpus.hpp"
#include "minstrel/errors.hpp"
#include "minstrel/rng.hpp"

using namespace minstrel;
namespace fs = std::filesystem;

namespace {

WorldConfig small_config() {
    WorldConfig c;
    c.n_songs = 120;
    c.n_off_platform = 12;
    c.n_artists = 12;
    c.n_users = 30;
    c.sessions_per_user = 4;
    return c;
}

Trajectory make_traj(int user_id, std::initializer_list<std::tuple<int, int, FeedbackLabel>> evs) {
    Trajectory t;
    t.user_id = user_id;
    for (auto [state, item, fb] : evs) t.events.push_back({state, item, fb});
    return t;
}

}  // namespace

TEST_CASE("vocabulary ranges are dense, disjoint, and invertible") {
    WorldConfig cfg;  // default scale
    Vocabulary v(cfg);
    CHECK(v.size() < 2000);

    // Every id in [0, V) belongs to exactly one readable range.
    std::set<int> seen;
    for (int t = 0; t < v.size(); ++t) {
        CHECK_NOTHROW(v.name(t));
        CHECK(seen.insert(t).second);
        int kinds = 0;
        kinds += v.is_song(t);
        kinds += v.is_state(t);
        kinds += v.is_feedback(t);
        kinds += v.is_tag(t);
        CHECK(kinds <= 1);
    }
    CHECK(v.song_id(v.song_token(17)) == 17);
    CHECK(v.tag_id(v.tag_token(5)) == 5);
    CHECK(v.state_id(v.state_token(3)) == 3);
    CHECK(v.feedback_label(v.feedback_token(FeedbackLabel::dislike)) == FeedbackLabel::dislike);
    CHECK(v.is_song(v.song_token(0)));
    CHECK(v.is_song(v.song_token(cfg.n_songs - 1)));
    CHECK(!v.is_song(v.song_token(0) - 1));
    CHECK(!v.is_song(v.artist_token(0)));

    CHECK_THROWS_AS(v.song_token(cfg.n_songs), InputError);
    CHECK_THROWS_AS(v.song_token(-1), InputError);
    CHECK_THROWS_AS(v.song_id(v.artist_token(0)), InputError);
    CHECK_THROWS_AS(v.name(v.size()), InputError);
}

TEST_CASE("trajectory encoding matches the documented layout") {
    WorldConfig cfg;
    Vocabulary v(cfg);
    UserProfile p{2, 1, 4};
    auto t = make_traj(0, {{1, 10, FeedbackLabel::like}, {3, 20, FeedbackLabel::skip}});

    auto seq = encode_trajectory(v, t, p, PredictionMode::next_behavior);
    std::vector<int> expected = {Vocabulary::kBos, v.age_token(2), v.gender_token(1),
                                 v.occupation_token(4), v.state_token(1), v.song_token(10),
                                 v.feedback_token(FeedbackLabel::like), v.state_token(3),
                                 v.song_token(20), v.feedback_token(FeedbackLabel::skip),
                                 Vocabulary::kEos};
    CHECK(seq.tokens == expected);
    std::vector<uint8_t> expected_mask = {0, 0, 0, 0, 0, 1, 1, 0, 1, 1, 0};
    CHECK(seq.loss_mask == expected_mask);

    auto seq_item = encode_trajectory(v, t, p, PredictionMode::next_item);
    CHECK(seq_item.tokens == expected);
    std::vector<uint8_t> item_mask = {0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0};
    CHECK(seq_item.loss_mask == item_mask);

    auto single = make_traj(0, {{1, 10, FeedbackLabel::like}});
    CHECK_THROWS_AS(encode_trajectory(v, single, p, PredictionMode::next_item), InputError);
}

TEST_CASE("supervision density: 2t for behavior, 1 for item, states never supervised") {
    WorldConfig cfg;
    Vocabulary v(cfg);
    Rng rng(11);
    for (int rep = 0; rep < 50; ++rep) {
        const int t_len = 2 + static_cast<int>(rng.uniform_int(15));
        Trajectory t;
        t.user_id = 0;
        for (int i = 0; i < t_len; ++i)
            t.events.push_back({static_cast<int>(rng.uniform_int(cfg.n_states)),
                                static_cast<int>(rng.uniform_int(cfg.n_songs)),
                                static_cast<FeedbackLabel>(rng.uniform_int(3))});
        UserProfile p{static_cast<int>(rng.uniform_int(5)), static_cast<int>(rng.uniform_int(3)),
                      static_cast<int>(rng.uniform_int(8))};
        auto behavior = encode_trajectory(v, t, p, PredictionMode::next_behavior);
        auto item = encode_trajectory(v, t, p, PredictionMode::next_item);
        CHECK(behavior.supervised_count() == 2 * t_len);
        CHECK(item.supervised_count() == 1);
        CHECK(behavior.supervised_count() >= 2 * item.supervised_count());
        for (size_t j = 0; j < behavior.tokens.size(); ++j) {
            if (v.is_state(behavior.tokens[j])) {
                CHECK(!behavior.loss_mask[j]);
                CHECK(!item.loss_mask[j]);
            }
        }
        // The single next-item target is the final item token.
        size_t last_item = 0;
        for (size_t j = 0; j < item.tokens.size(); ++j)
            if (v.is_song(item.tokens[j])) last_item = j;
        CHECK(item.loss_mask[last_item] == 1);
    }
}

TEST_CASE("decode inverts encode exactly") {
    WorldConfig cfg;
    Vocabulary v(cfg);
    Rng rng(12);
    for (int rep = 0; rep < 30; ++rep) {
        const int t_len = 2 + static_cast<int>(rng.uniform_int(14));
        Trajectory t;
        t.user_id = 5;
        for (int i = 0; i < t_len; ++i)
            t.events.push_back({static_cast<int>(rng.uniform_int(cfg.n_states)),
                                static_cast<int>(rng.uniform_int(cfg.n_songs)),
                                static_cast<FeedbackLabel>(rng.uniform_int(3))});
        UserProfile p{1, 2, 7};
        auto seq = encode_trajectory(v, t, p, PredictionMode::next_behavior);
        auto [p2, t2] = decode_trajectory(v, seq);
        CHECK(p2.age_bucket == p.age_bucket);
        CHECK(p2.gender == p.gender);
        CHECK(p2.occupation == p.occupation);
        REQUIRE(t2.events.size() == t.events.size());
        for (size_t i = 0; i < t.events.size(); ++i) {
            CHECK(t2.events[i].state == t.events[i].state);
            CHECK(t2.events[i].item == t.events[i].item);
            CHECK(t2.events[i].feedback == t.events[i].feedback);
        }
    }
}

TEST_CASE("encode options drop the requested context blocks") {
    WorldConfig cfg;
    Vocabulary v(cfg);
    UserProfile p{0, 0, 0};
    auto t = make_traj(0, {{1, 10, FeedbackLabel::like}, {3, 20, FeedbackLabel::skip}});

    EncodeOptions no_profile;
    no_profile.include_profile = false;
    CHECK(encode_trajectory(v, t, p, no_profile).tokens.size() == 8);

    EncodeOptions no_state;
    no_state.include_state = false;
    auto seq = encode_trajectory(v, t, p, no_state);
    CHECK(seq.tokens.size() == 9);
    for (int tok : seq.tokens) CHECK(!v.is_state(tok));

    EncodeOptions no_fb;
    no_fb.include_feedback = false;
    auto seq2 = encode_trajectory(v, t, p, no_fb);
    CHECK(seq2.tokens.size() == 9);
    CHECK(seq2.supervised_count() == 2);  // item tokens still supervised
}

TEST_CASE("stage 1 covers every song with faithful facts") {
    World w = generate_world(small_config());
    Vocabulary v(w.config);
    auto stage = build_stage1(w);
    stage.validate();
    CHECK(stage.stage == StageKind::objective);

    std::map<int, int> appearances;  // song_id -> sequence count
    for (const auto& seq : stage.sequences) {
        for (size_t j = 0; j < seq.tokens.size(); ++j) {
            if (!v.is_song(seq.tokens[j])) continue;
            const int sid = v.song_id(seq.tokens[j]);
            ++appearances[sid];
            // A song followed by the artist keyword names its true artist.
            if (j + 2 < seq.tokens.size() && seq.tokens[j + 1] == v.keyword(Keyword::artist))
                CHECK(seq.tokens[j + 2] == v.artist_token(w.song(sid).artist_id));
            if (j + 2 < seq.tokens.size() && seq.tokens[j + 1] == v.keyword(Keyword::genre))
                CHECK(seq.tokens[j + 2] == v.genre_token(w.song(sid).genre));
        }
    }
    for (const auto& s : w.catalog) CHECK(appearances[s.song_id] >= 3);
}

TEST_CASE("stage 1 tops up to a token target without exceeding it") {
    World w = generate_world(small_config());
    auto base = build_stage1(w);
    const int64_t target = base.total_tokens() + 500;
    auto stage = build_stage1(w, target);
    stage.validate();
    CHECK(stage.total_tokens() <= target);
    CHECK(stage.total_tokens() > target - 15);  // filled to within one template
}

TEST_CASE("co-occurrence counts equal the brute-force pair census") {
    auto cfg = small_config();
    World w = generate_world(cfg);
    auto trajs = simulate_all_sessions(w);

    // Oracle: per ordered song pair, count users whose liked sets contain both.
    std::vector<std::vector<bool>> liked(static_cast<size_t>(cfg.n_users),
                                         std::vector<bool>(static_cast<size_t>(cfg.n_songs)));
    for (const auto& t : trajs)
        for (const auto& ev : t.events)
            if (ev.feedback == FeedbackLabel::like)
                liked[static_cast<size_t>(t.user_id)][static_cast<size_t>(ev.item)] = true;
    std::map<std::pair<int, int>, int> oracle;
    for (int a = 0; a < cfg.n_songs; ++a)
        for (int b = a + 1; b < cfg.n_songs; ++b) {
            int c = 0;
            for (int u = 0; u < cfg.n_users; ++u)
                if (liked[static_cast<size_t>(u)][static_cast<size_t>(a)] &&
                    liked[static_cast<size_t>(u)][static_cast<size_t>(b)])
                    ++c;
            if (c >= 2) oracle[{a, b}] = c;
        }

    auto pairs = cooccurrence_counts(trajs, 2);
    REQUIRE(pairs.size() == oracle.size());
    for (const auto& p : pairs) {
        auto it = oracle.find({p.song_a, p.song_b});
        REQUIRE(it != oracle.end());
        CHECK(it->second == p.count);
    }
    // Sorted by descending count.
    for (size_t i = 1; i < pairs.size(); ++i) CHECK(pairs[i - 1].count >= pairs[i].count);
    CHECK(!pairs.empty());
}

TEST_CASE("stage 2 playlists contain only songs the user liked") {
    auto cfg = small_config();
    World w = generate_world(cfg);
    Vocabulary v(cfg);
    auto trajs = simulate_all_sessions(w);
    auto stage = build_stage2(w, trajs);
    stage.validate();
    CHECK(stage.stage == StageKind::subjective);

    std::vector<std::set<int>> liked(static_cast<size_t>(cfg.n_users));
    for (const auto& t : trajs)
        for (const auto& ev : t.events)
            if (ev.feedback == FeedbackLabel::like)
                liked[static_cast<size_t>(t.user_id)].insert(ev.item);
    std::set<int> liked_any;
    for (const auto& s : liked) liked_any.insert(s.begin(), s.end());

    int n_playlists = 0;
    for (const auto& seq : stage.sequences) {
        if (seq.tokens.size() < 2 || seq.tokens[1] != v.keyword(Keyword::playlist)) continue;
        ++n_playlists;
        std::set<int> members;
        for (int tok : seq.tokens)
            if (v.is_song(tok)) members.insert(v.song_id(tok));
        // The playlist must be one user's liked set (or a chunk of it).
        bool matches_some_user = false;
        for (const auto& lu : liked) {
            if (std::includes(lu.begin(), lu.end(), members.begin(), members.end()))
                matches_some_user = true;
        }
        CHECK(matches_some_user);
        for (int sid : members) CHECK(liked_any.count(sid));
    }
    CHECK(n_playlists > 0);

    // Relation sequences only link pairs with a real co-occurrence.
    std::set<std::pair<int, int>> qualifying;
    for (const auto& p : cooccurrence_counts(trajs, 2)) qualifying.insert({p.song_a, p.song_b});
    for (const auto& seq : stage.sequences) {
        if (seq.tokens.size() != 5 || seq.tokens[1] != v.keyword(Keyword::related)) continue;
        CHECK(qualifying.count({v.song_id(seq.tokens[2]), v.song_id(seq.tokens[3])}));
    }

    CHECK_THROWS_AS(build_stage2(w, {}), InputError);
}

TEST_CASE("stage 3 encodes each trajectory once with behavior supervision") {
    auto cfg = small_config();
    World w = generate_world(cfg);
    Vocabulary v(cfg);
    auto trajs = simulate_all_sessions(w);
    auto stage = build_stage3(v, w, trajs, PredictionMode::next_behavior);
    stage.validate();
    CHECK(stage.stage == StageKind::preference);
    REQUIRE(stage.sequences.size() == trajs.size());

    int64_t expected = 0;
    for (const auto& t : trajs) expected += 2 * static_cast<int64_t>(t.events.size());
    int64_t supervised = 0;
    for (const auto& s : stage.sequences) supervised += s.supervised_count();
    CHECK(supervised == expected);

    auto stage_item = build_stage3(v, w, trajs, PredictionMode::next_item);
    int64_t supervised_item = 0;
    for (const auto& s : stage_item.sequences) supervised_item += s.supervised_count();
    CHECK(supervised_item == static_cast<int64_t>(trajs.size()));
    CHECK(supervised >= 2 * supervised_item);
}

TEST_CASE("full corpus respects the curriculum proportions at default scale") {
    World w = generate_world(WorldConfig{});
    auto trajs = simulate_all_sessions(w);
    auto corpus = build_corpus(w, trajs, PredictionMode::next_behavior);
    corpus.stage1.validate();
    corpus.stage2.validate();
    corpus.stage3.validate();

    const auto t1 = static_cast<double>(corpus.stage1.total_tokens());
    const auto t2 = static_cast<double>(corpus.stage2.total_tokens());
    const auto t3 = static_cast<double>(corpus.stage3.total_tokens());
    const double r1 = 2.7 / 16.0, r2 = 4.6 / 16.0;
    CHECK(t1 / t3 > r1 * 0.8);
    CHECK(t1 / t3 < r1 * 1.2);
    CHECK(t2 / t3 > r2 * 0.8);
    CHECK(t2 / t3 < r2 * 1.2);
    CHECK(t3 > t1 + t2);  // preference stage dominates
}

TEST_CASE("corpus stages round trip through jsonl byte-identically") {
    auto cfg = small_config();
    World w = generate_world(cfg);
    auto trajs = simulate_all_sessions(w);
    auto stage = build_stage2(w, trajs, CorpusConfig{}, 4000);
    const fs::path dir = fs::temp_directory_path() / "minstrel_corpus_rt";
    fs::remove_all(dir);
    save_stage_jsonl(stage, dir / "s.jsonl");
    auto back = load_stage_jsonl(dir / "s.jsonl");
    save_stage_jsonl(back, dir / "s2.jsonl");
    CHECK(hash_file(dir / "s.jsonl") == hash_file(dir / "s2.jsonl"));
    CHECK(back.token_budget == stage.token_budget);
    REQUIRE(back.sequences.size() == stage.sequences.size());
    CHECK(back.sequences[3].tokens == stage.sequences[3].tokens);
    CHECK(back.sequences[3].loss_mask == stage.sequences[3].loss_mask);
    fs::remove_all(dir);
}

TEST_CASE("masked sequence validation catches shape violations") {
    MaskedSequence s;
    s.tokens = {0, 1, 2};
    s.loss_mask = {0, 1};
    CHECK_THROWS_AS(s.validate(), InputError);
    s.loss_mask = {0, 0, 0};
    CHECK_THROWS_AS(s.validate(), InputError);  // nothing supervised
    s.loss_mask = {1, 0, 0};
    CHECK_THROWS_AS(s.validate(), InputError);  // position 0 target
    s.loss_mask = {0, 1, 0};
    CHECK_NOTHROW(s.validate());
    CorpusStage stage;
    stage.sequences.push_back(s);
    stage.token_budget = 2;
    CHECK_THROWS_AS(stage.validate(), InputError);
}
