#include "minstrel/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include "minstrel/errors.hpp"
#include "minstrel/rng.hpp"
#include "minstrel/util.hpp"

namespace minstrel {

const char* to_string(StageKind s) {
    switch (s) {
        case StageKind::objective: return "objective";
        case StageKind::subjective: return "subjective";
        case StageKind::preference: return "preference";
    }
    return "objective";
}

StageKind stage_from_string(const std::string& s) {
    if (s == "objective") return StageKind::objective;
    if (s == "subjective") return StageKind::subjective;
    if (s == "preference") return StageKind::preference;
    throw InputError("unknown corpus stage: " + s);
}

const char* to_string(PredictionMode m) {
    return m == PredictionMode::next_item ? "next_item" : "next_behavior";
}

PredictionMode mode_from_string(const std::string& s) {
    if (s == "next_item") return PredictionMode::next_item;
    if (s == "next_behavior") return PredictionMode::next_behavior;
    throw InputError("unknown prediction mode: " + s);
}

void MaskedSequence::validate() const {
    if (tokens.size() != loss_mask.size())
        throw InputError("masked sequence: token/mask length mismatch");
    if (tokens.empty()) throw InputError("masked sequence: empty");
    if (tokens.size() > kMaxSequenceTokens)
        throw InputError("masked sequence exceeds the context window");
    if (loss_mask[0]) throw InputError("masked sequence: position 0 cannot be a target");
    if (supervised_count() == 0) throw InputError("masked sequence: no supervised positions");
}

int64_t MaskedSequence::supervised_count() const {
    int64_t n = 0;
    for (uint8_t m : loss_mask) n += m;
    return n;
}

int64_t CorpusStage::total_tokens() const {
    int64_t n = 0;
    for (const auto& s : sequences) n += static_cast<int64_t>(s.tokens.size());
    return n;
}

void CorpusStage::validate() const {
    if (total_tokens() > token_budget) throw InputError("corpus stage exceeds its token budget");
    for (const auto& s : sequences) s.validate();
}

MaskedSequence encode_trajectory(const Vocabulary& vocab, const Trajectory& traj,
                                 const UserProfile& profile, PredictionMode mode) {
    EncodeOptions opt;
    opt.mode = mode;
    return encode_trajectory(vocab, traj, profile, opt);
}

MaskedSequence encode_trajectory(const Vocabulary& vocab, const Trajectory& traj,
                                 const UserProfile& profile, const EncodeOptions& options) {
    if (traj.events.size() < 2)
        throw InputError("trajectory too short to encode: needs >= 2 events");
    MaskedSequence seq;
    auto push = [&seq](int token, bool target) {
        seq.tokens.push_back(token);
        seq.loss_mask.push_back(target ? 1 : 0);
    };
    push(Vocabulary::kBos, false);
    if (options.include_profile) {
        push(vocab.age_token(profile.age_bucket), false);
        push(vocab.gender_token(profile.gender), false);
        push(vocab.occupation_token(profile.occupation), false);
    }
    const bool behavior = options.mode == PredictionMode::next_behavior;
    int last_item_pos = -1;
    for (const auto& ev : traj.events) {
        if (options.include_state) push(vocab.state_token(ev.state), false);
        push(vocab.song_token(ev.item), behavior);
        last_item_pos = static_cast<int>(seq.tokens.size()) - 1;
        if (options.include_feedback) push(vocab.feedback_token(ev.feedback), behavior);
    }
    push(Vocabulary::kEos, false);
    if (!behavior) seq.loss_mask[static_cast<size_t>(last_item_pos)] = 1;
    seq.validate();
    return seq;
}

std::pair<UserProfile, Trajectory> decode_trajectory(const Vocabulary& vocab,
                                                     const MaskedSequence& seq) {
    const auto& t = seq.tokens;
    if (t.size() < 8 || t.front() != Vocabulary::kBos || t.back() != Vocabulary::kEos)
        throw InputError("decode: not a full trajectory layout");
    UserProfile profile;
    // Profile token accessors validate ranges on the way out.
    size_t i = 1;
    profile.age_bucket = t[i] - vocab.age_token(0);
    profile.gender = t[i + 1] - vocab.gender_token(0);
    profile.occupation = t[i + 2] - vocab.occupation_token(0);
    vocab.age_token(profile.age_bucket);
    vocab.gender_token(profile.gender);
    vocab.occupation_token(profile.occupation);
    i += 3;
    Trajectory traj;
    while (i + 1 < t.size()) {
        if ((t.size() - 1 - i) % 3 != 0)
            throw InputError("decode: truncated event triple");
        InteractionEvent ev;
        ev.state = vocab.state_id(t[i]);
        ev.item = vocab.song_id(t[i + 1]);
        ev.feedback = vocab.feedback_label(t[i + 2]);
        traj.events.push_back(ev);
        i += 3;
    }
    if (traj.events.size() < 2) throw InputError("decode: fewer than 2 events");
    return {profile, traj};
}

namespace {

MaskedSequence plain_lm(std::vector<int> tokens) {
    MaskedSequence s;
    s.tokens = std::move(tokens);
    s.loss_mask.assign(s.tokens.size(), 1);
    s.loss_mask[0] = 0;
    return s;
}

// Liked songs per user in first-like order, aggregated over all sessions.
std::vector<std::vector<int>> liked_by_user(const std::vector<Trajectory>& trajectories) {
    int max_uid = 0;
    for (const auto& t : trajectories) max_uid = std::max(max_uid, t.user_id);
    std::vector<std::vector<int>> liked(static_cast<size_t>(max_uid) + 1);
    std::vector<std::unordered_set<int>> seen(static_cast<size_t>(max_uid) + 1);
    for (const auto& t : trajectories) {
        for (const auto& ev : t.events) {
            if (ev.feedback != FeedbackLabel::like) continue;
            if (seen[static_cast<size_t>(t.user_id)].insert(ev.item).second)
                liked[static_cast<size_t>(t.user_id)].push_back(ev.item);
        }
    }
    return liked;
}

}  // namespace

std::vector<PairCount> cooccurrence_counts(const std::vector<Trajectory>& trajectories,
                                           int cooc_min) {
    if (trajectories.empty()) throw InputError("cooccurrence_counts: no trajectories");
    auto liked = liked_by_user(trajectories);
    std::unordered_map<uint64_t, int> counts;
    for (auto& songs : liked) {
        std::sort(songs.begin(), songs.end());
        for (size_t i = 0; i < songs.size(); ++i)
            for (size_t j = i + 1; j < songs.size(); ++j) {
                const uint64_t key = (static_cast<uint64_t>(songs[i]) << 32) |
                                     static_cast<uint32_t>(songs[j]);
                ++counts[key];
            }
    }
    std::vector<PairCount> out;
    for (const auto& [key, count] : counts) {
        if (count < cooc_min) continue;
        out.push_back({static_cast<int>(key >> 32), static_cast<int>(key & 0xffffffffu), count});
    }
    std::sort(out.begin(), out.end(), [](const PairCount& a, const PairCount& b) {
        if (a.count != b.count) return a.count > b.count;
        if (a.song_a != b.song_a) return a.song_a < b.song_a;
        return a.song_b < b.song_b;
    });
    return out;
}

CorpusStage build_stage1(const World& world, int64_t target_tokens) {
    const Vocabulary vocab(world.config);
    CorpusStage stage;
    stage.stage = StageKind::objective;

    for (const auto& s : world.catalog) {
        const int song = vocab.song_token(s.song_id);
        stage.sequences.push_back(plain_lm({Vocabulary::kBos, vocab.keyword(Keyword::song), song,
                                            vocab.keyword(Keyword::artist),
                                            vocab.artist_token(s.artist_id), Vocabulary::kEos}));
        stage.sequences.push_back(plain_lm({Vocabulary::kBos, vocab.keyword(Keyword::song), song,
                                            vocab.keyword(Keyword::genre),
                                            vocab.genre_token(s.genre), Vocabulary::kEos}));
        std::vector<int> tag_seq = {Vocabulary::kBos, vocab.keyword(Keyword::song), song,
                                    vocab.keyword(Keyword::tags)};
        for (int t : s.tags) tag_seq.push_back(vocab.tag_token(t));
        tag_seq.push_back(Vocabulary::kEos);
        stage.sequences.push_back(plain_lm(std::move(tag_seq)));
    }

    int64_t total = stage.total_tokens();
    stage.token_budget = std::max(target_tokens, total);

    // Top up with tag-expansion descriptions until the budget is met: a song
    // followed by a shuffled subset of its tags. These stand in for free-text
    // song descriptions at this scale.
    if (target_tokens > total) {
        Rng rng = Rng(world.config.rng_seed).substream("corpus_stage1");
        std::vector<int> order(world.catalog.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        rng.shuffle(order);
        size_t cursor = 0;
        while (true) {
            const auto& s = world.catalog[static_cast<size_t>(order[cursor])];
            cursor = (cursor + 1) % order.size();
            std::vector<int> tags = s.tags;
            rng.shuffle(tags);
            const size_t keep = 1 + rng.uniform_int(tags.size());
            std::vector<int> seq = {Vocabulary::kBos, vocab.keyword(Keyword::song),
                                    vocab.song_token(s.song_id), vocab.keyword(Keyword::about)};
            for (size_t i = 0; i < keep; ++i) seq.push_back(vocab.tag_token(tags[i]));
            seq.push_back(Vocabulary::kEos);
            if (total + static_cast<int64_t>(seq.size()) > stage.token_budget) break;
            total += static_cast<int64_t>(seq.size());
            stage.sequences.push_back(plain_lm(std::move(seq)));
        }
    }
    return stage;
}

CorpusStage build_stage2(const World& world, const std::vector<Trajectory>& trajectories,
                         const CorpusConfig& config, int64_t target_tokens) {
    if (trajectories.empty()) throw InputError("build_stage2: no trajectories");
    const Vocabulary vocab(world.config);
    CorpusStage stage;
    stage.stage = StageKind::subjective;

    // Category mix under a budget follows the corpus design ratios
    // comments : playlists : relations = 2 : 0.8 : 1.8. Unbudgeted builds
    // emit every playlist, every qualifying relation, and one comment per
    // catalog song.
    const bool budgeted = target_tokens > 0;
    const int64_t playlist_cap =
        budgeted ? static_cast<int64_t>(std::llround(target_tokens * (0.8 / 4.6)))
                 : std::numeric_limits<int64_t>::max();

    // (a) playlists: per user, liked songs in first-like order, chunked to fit
    // the context window.
    auto liked = liked_by_user(trajectories);
    int64_t total = 0;
    for (size_t uid = 0; uid < liked.size() && total < playlist_cap; ++uid) {
        const auto& songs = liked[uid];
        if (songs.empty()) continue;
        const size_t chunk = kMaxSequenceTokens - 3;
        for (size_t start = 0; start < songs.size() && total < playlist_cap; start += chunk) {
            std::vector<int> seq = {Vocabulary::kBos, vocab.keyword(Keyword::playlist)};
            for (size_t i = start; i < std::min(songs.size(), start + chunk); ++i)
                seq.push_back(vocab.song_token(songs[i]));
            seq.push_back(Vocabulary::kEos);
            total += static_cast<int64_t>(seq.size());
            stage.sequences.push_back(plain_lm(std::move(seq)));
        }
    }

    // (b) co-liked relations, strongest first, capped at their mix share so
    // comments keep theirs.
    const int64_t budget = budgeted ? std::max(target_tokens, total)
                                    : std::numeric_limits<int64_t>::max();
    const int64_t relation_cap =
        budgeted ? total + static_cast<int64_t>(std::llround(target_tokens * (1.8 / 4.6)))
                 : std::numeric_limits<int64_t>::max();
    auto pairs = cooccurrence_counts(trajectories, config.cooc_min);
    for (const auto& p : pairs) {
        if (total + 5 > std::min(relation_cap, budget)) break;
        stage.sequences.push_back(plain_lm({Vocabulary::kBos, vocab.keyword(Keyword::related),
                                            vocab.song_token(p.song_a),
                                            vocab.song_token(p.song_b), Vocabulary::kEos}));
        total += 5;
    }

    // (c) comment analogs: subjective tag phrases about a song, the largest
    // category. Under a budget they fill everything the caps left over.
    Rng rng = Rng(world.config.rng_seed).substream("corpus_stage2");
    std::vector<int> order;
    for (const auto& s : world.catalog) order.push_back(s.song_id);
    rng.shuffle(order);
    size_t cursor = 0;
    int64_t emitted_comments = 0;
    while (true) {
        const auto& s = world.song(order[cursor]);
        cursor = (cursor + 1) % order.size();
        std::vector<int> tags = s.tags;
        rng.shuffle(tags);
        const size_t keep = 1 + rng.uniform_int(std::min<size_t>(tags.size(), 3));
        std::vector<int> seq = {Vocabulary::kBos, vocab.keyword(Keyword::comment)};
        for (size_t i = 0; i < keep; ++i) seq.push_back(vocab.tag_token(tags[i]));
        seq.push_back(vocab.keyword(Keyword::about));
        seq.push_back(vocab.song_token(s.song_id));
        seq.push_back(Vocabulary::kEos);
        const auto len = static_cast<int64_t>(seq.size());
        if (budgeted) {
            if (total + len > budget) break;
        } else if (emitted_comments >= static_cast<int64_t>(order.size())) {
            break;
        }
        total += len;
        ++emitted_comments;
        stage.sequences.push_back(plain_lm(std::move(seq)));
    }

    stage.token_budget = budgeted ? budget : total;
    return stage;
}

CorpusStage build_stage3(const Vocabulary& vocab, const World& world,
                         const std::vector<Trajectory>& trajectories, PredictionMode mode) {
    if (trajectories.empty()) throw InputError("build_stage3: no trajectories");
    CorpusStage stage;
    stage.stage = StageKind::preference;
    stage.sequences.reserve(trajectories.size());
    for (const auto& t : trajectories)
        stage.sequences.push_back(
            encode_trajectory(vocab, t, world.user(t.user_id).profile, mode));
    stage.token_budget = stage.total_tokens();
    return stage;
}

Corpus build_corpus(const World& world, const std::vector<Trajectory>& trajectories,
                    PredictionMode mode, const CorpusConfig& config) {
    const Vocabulary vocab(world.config);
    Corpus c;
    c.stage3 = build_stage3(vocab, world, trajectories, mode);
    const auto t3 = static_cast<double>(c.stage3.total_tokens());
    const auto t1 = static_cast<int64_t>(std::llround(t3 * config.stage1_ratio / config.stage3_ratio));
    const auto t2 = static_cast<int64_t>(std::llround(t3 * config.stage2_ratio / config.stage3_ratio));
    c.stage1 = build_stage1(world, t1);
    c.stage2 = build_stage2(world, trajectories, config, t2);
    return c;
}

void save_stage_jsonl(const CorpusStage& stage, const std::filesystem::path& path) {
    std::vector<json> records;
    records.reserve(stage.sequences.size() + 1);
    records.push_back(json{{"kind", "stage"},
                           {"stage", to_string(stage.stage)},
                           {"token_budget", stage.token_budget}});
    for (const auto& s : stage.sequences)
        records.push_back(json{{"tokens", s.tokens}, {"loss_mask", s.loss_mask}});
    write_jsonl(path, records);
}

CorpusStage load_stage_jsonl(const std::filesystem::path& path) {
    auto records = read_jsonl(path);
    if (records.empty() || !records[0].contains("kind") || records[0]["kind"] != "stage")
        throw InputError("corpus stage file missing header: " + path.string());
    CorpusStage stage;
    stage.stage = stage_from_string(records[0].at("stage"));
    stage.token_budget = records[0].at("token_budget");
    for (size_t i = 1; i < records.size(); ++i) {
        MaskedSequence s;
        s.tokens = records[i].at("tokens").get<std::vector<int>>();
        s.loss_mask = records[i].at("loss_mask").get<std::vector<uint8_t>>();
        stage.sequences.push_back(std::move(s));
    }
    return stage;
}

}  // namespace minstrel
