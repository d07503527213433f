#include "minstrel/world.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_set>

#include "minstrel/errors.hpp"

namespace minstrel {

const char* to_string(TitleSuffix s) {
    switch (s) {
        case TitleSuffix::plain: return "plain";
        case TitleSuffix::live: return "live";
        case TitleSuffix::remix: return "remix";
        case TitleSuffix::cover: return "cover";
    }
    return "plain";
}

const char* to_string(FeedbackLabel f) {
    switch (f) {
        case FeedbackLabel::like: return "like";
        case FeedbackLabel::skip: return "skip";
        case FeedbackLabel::dislike: return "dislike";
    }
    return "skip";
}

TitleSuffix suffix_from_string(const std::string& s) {
    if (s == "live") return TitleSuffix::live;
    if (s == "remix") return TitleSuffix::remix;
    if (s == "cover") return TitleSuffix::cover;
    return TitleSuffix::plain;
}

FeedbackLabel feedback_from_string(const std::string& s) {
    if (s == "like") return FeedbackLabel::like;
    if (s == "dislike") return FeedbackLabel::dislike;
    return FeedbackLabel::skip;
}

bool Song::has_tag(int tag) const {
    return std::find(tags.begin(), tags.end(), tag) != tags.end();
}

void WorldConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("world config: " + msg); };
    if (n_songs <= 0) fail("n_songs must be positive");
    if (n_off_platform < 0 || n_off_platform >= n_songs) fail("n_off_platform must be in [0, n_songs)");
    if (n_artists <= 0) fail("n_artists must be positive");
    if (n_users <= 0) fail("n_users must be positive");
    if (tag_lexicon_size <= 1) fail("tag_lexicon_size must be > 1");
    if (n_genres <= 0) fail("n_genres must be positive");
    if (n_states <= 0) fail("n_states must be positive");
    if (session_length_min < 1 || session_length_max < session_length_min)
        fail("session length range invalid");
    if (sessions_per_user <= 0) fail("sessions_per_user must be positive");
    if (min_saved_songs < 5) fail("min_saved_songs must be >= 5");
    if (max_saved_songs < min_saved_songs) fail("max_saved_songs < min_saved_songs");
    if (item_temperature <= 0) fail("item_temperature must be positive");
    if (feedback_temperature <= 0) fail("feedback_temperature must be positive");
    if (relevance_threshold < 1) fail("relevance_threshold must be >= 1");
}

const Song& World::song(int song_id) const {
    if (song_id < 0 || song_id >= static_cast<int>(catalog.size()))
        throw InputError("unknown song_id: " + std::to_string(song_id));
    return catalog[static_cast<size_t>(song_id)];
}

const UserSpec& World::user(int user_id) const {
    if (user_id < 0 || user_id >= static_cast<int>(users.size()))
        throw InputError("unknown user_id: " + std::to_string(user_id));
    return users[static_cast<size_t>(user_id)];
}

std::vector<int> World::on_platform_ids() const {
    std::vector<int> ids;
    for (const auto& s : catalog)
        if (s.on_platform) ids.push_back(s.song_id);
    return ids;
}

int World::n_on_platform() const {
    int n = 0;
    for (const auto& s : catalog)
        if (s.on_platform) ++n;
    return n;
}

double World::catalog_mean_affinity(const UserSpec& u) const {
    double sum = 0.0;
    for (const auto& s : catalog) sum += oracle_affinity(*this, u, s);
    return sum / static_cast<double>(catalog.size());
}

double World::calibrate_affinity(double affinity) const {
    const double range = affinity_hi - affinity_lo;
    if (range <= 0) return 0.0;
    return std::clamp((affinity - affinity_lo) / range * 10.0, 0.0, 10.0);
}

double state_tag_match(const World& world, int state, const Song& song) {
    if (state < 0 || state >= static_cast<int>(world.state_tags.size()))
        throw InputError("unknown state: " + std::to_string(state));
    const auto& st = world.state_tags[static_cast<size_t>(state)];
    int matched = 0;
    for (int t : song.tags)
        if (std::find(st.begin(), st.end(), t) != st.end()) ++matched;
    return static_cast<double>(matched) / static_cast<double>(song.tags.size());
}

double oracle_affinity(const World& world, const UserSpec& user, const Song& song) {
    double dot = 0.0;
    const double inv = 1.0 / static_cast<double>(song.tags.size());
    for (int t : song.tags) dot += user.latent_pref[static_cast<size_t>(t)] * inv;
    return dot + world.config.w_pop * std::log1p(song.popularity);
}

double oracle_affinity(const World& world, const UserSpec& user, const Song& song, int state) {
    return oracle_affinity(world, user, song) +
           world.config.w_state * state_tag_match(world, state, song);
}

namespace {

std::vector<double> unit_normal_vector(Rng& rng, int dim) {
    std::vector<double> v(static_cast<size_t>(dim));
    double norm2 = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x *= inv;
    return v;
}

std::string make_stem(Rng& rng) {
    static const char* syllables[] = {"ka", "lo", "ve", "mi", "ra", "su", "ne", "ta",
                                      "ri", "do", "fa", "zu", "bel", "mor", "lin", "gra",
                                      "sol", "via", "den", "pol"};
    const int n = 2 + static_cast<int>(rng.uniform_int(2));
    std::string stem;
    for (int i = 0; i < n; ++i) stem += syllables[rng.uniform_int(std::size(syllables))];
    return stem;
}

// Tags lean toward the song's genre block so the tag space has clusters.
std::vector<int> sample_song_tags(Rng& rng, const WorldConfig& cfg, int genre) {
    const int n_tags = 2 + static_cast<int>(rng.uniform_int(4));  // 2..5
    const int block = std::max(1, cfg.tag_lexicon_size / cfg.n_genres);
    const int block_lo = (genre * block) % cfg.tag_lexicon_size;
    std::set<int> picked;
    while (static_cast<int>(picked.size()) < n_tags) {
        int tag;
        if (rng.uniform() < 0.55) {
            tag = block_lo + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(block)));
        } else {
            tag = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.tag_lexicon_size)));
        }
        picked.insert(tag);
    }
    return {picked.begin(), picked.end()};
}

}  // namespace

World generate_world(const WorldConfig& config) {
    config.validate();
    World w;
    w.config = config;
    Rng root(config.rng_seed);

    // Situational states: a fixed tag subset per state.
    {
        Rng r = root.substream("state_tags");
        const int per_state = std::max(2, config.tag_lexicon_size / config.n_states);
        w.state_tags.resize(static_cast<size_t>(config.n_states));
        for (auto& st : w.state_tags) {
            std::set<int> picked;
            while (static_cast<int>(picked.size()) < per_state)
                picked.insert(static_cast<int>(
                    r.uniform_int(static_cast<uint64_t>(config.tag_lexicon_size))));
            st.assign(picked.begin(), picked.end());
        }
    }

    // Songs.
    {
        Rng r = root.substream("songs");
        std::unordered_set<std::string> used_stems;
        w.catalog.reserve(static_cast<size_t>(config.n_songs));
        for (int id = 0; id < config.n_songs; ++id) {
            Song s;
            s.song_id = id;
            s.artist_id = static_cast<int>(r.uniform_int(static_cast<uint64_t>(config.n_artists)));
            s.genre = static_cast<int>(r.uniform_int(static_cast<uint64_t>(config.n_genres)));
            // ~15% of songs are an alternate cut of an earlier song: same stem,
            // different suffix. The diversity reward treats those as near-duplicates.
            if (id > 10 && r.uniform() < 0.15) {
                const auto& base = w.catalog[r.uniform_int(static_cast<uint64_t>(id))];
                s.title_stem = base.title_stem;
                s.title_suffix = static_cast<TitleSuffix>(1 + r.uniform_int(kNumTitleSuffixes - 1));
                s.artist_id = r.uniform() < 0.5 ? base.artist_id : s.artist_id;
            } else {
                std::string stem = make_stem(r);
                while (used_stems.count(stem)) stem = make_stem(r);
                used_stems.insert(stem);
                s.title_stem = stem;
                s.title_suffix = TitleSuffix::plain;
            }
            s.tags = sample_song_tags(r, config, s.genre);
            s.popularity = std::exp(r.normal(0.0, 0.8));
            s.on_platform = true;
            w.catalog.push_back(std::move(s));
        }
        // Off-platform subset, spread uniformly over the catalog.
        std::vector<int> ids(static_cast<size_t>(config.n_songs));
        for (int i = 0; i < config.n_songs; ++i) ids[static_cast<size_t>(i)] = i;
        Rng ro = root.substream("off_platform");
        ro.shuffle(ids);
        for (int i = 0; i < config.n_off_platform; ++i)
            w.catalog[static_cast<size_t>(ids[static_cast<size_t>(i)])].on_platform = false;
    }

    // Users. The latent preference blends a profile archetype with personal
    // noise, so profile tokens carry real signal about listening behavior.
    {
        const int n_archetype_cells = 5 * 3 * 8;
        std::vector<std::vector<double>> archetypes;
        archetypes.reserve(static_cast<size_t>(n_archetype_cells));
        for (int cell = 0; cell < n_archetype_cells; ++cell) {
            Rng ra = root.substream("archetype", static_cast<uint64_t>(cell));
            archetypes.push_back(unit_normal_vector(ra, config.tag_lexicon_size));
        }

        std::vector<int> on_ids;
        for (const auto& s : w.catalog)
            if (s.on_platform) on_ids.push_back(s.song_id);

        w.users.reserve(static_cast<size_t>(config.n_users));
        for (int uid = 0; uid < config.n_users; ++uid) {
            Rng r = root.substream("user", static_cast<uint64_t>(uid));
            UserSpec u;
            u.user_id = uid;
            u.profile.age_bucket = static_cast<int>(r.uniform_int(5));
            u.profile.gender = static_cast<int>(r.uniform_int(3));
            u.profile.occupation = static_cast<int>(r.uniform_int(8));
            const int cell =
                (u.profile.age_bucket * 3 + u.profile.gender) * 8 + u.profile.occupation;
            const auto& arch = archetypes[static_cast<size_t>(cell)];
            auto personal = unit_normal_vector(r, config.tag_lexicon_size);
            u.latent_pref.resize(static_cast<size_t>(config.tag_lexicon_size));
            double norm2 = 0.0;
            for (size_t i = 0; i < u.latent_pref.size(); ++i) {
                u.latent_pref[i] = config.profile_mix * arch[i] +
                                   (1.0 - config.profile_mix) * personal[i];
                norm2 += u.latent_pref[i] * u.latent_pref[i];
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (auto& x : u.latent_pref) x *= inv;
            w.users.push_back(std::move(u));
        }

        // Saved songs: affinity-weighted sample without replacement from the
        // on-platform catalog, then enforced to beat the catalog mean.
        for (auto& u : w.users) {
            Rng r = root.substream("saved", static_cast<uint64_t>(u.user_id));
            const int k = static_cast<int>(
                r.uniform_range(config.min_saved_songs, config.max_saved_songs));
            std::vector<double> logits(on_ids.size());
            for (size_t i = 0; i < on_ids.size(); ++i)
                logits[i] = oracle_affinity(w, u, w.catalog[static_cast<size_t>(on_ids[i])]) / 0.15;
            std::vector<int> pool = on_ids;
            std::vector<double> pool_logits = logits;
            for (int pick = 0; pick < k && !pool.empty(); ++pick) {
                const size_t idx = r.categorical_logits(pool_logits);
                u.saved_songs.push_back(pool[idx]);
                pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(idx));
                pool_logits.erase(pool_logits.begin() + static_cast<std::ptrdiff_t>(idx));
            }
            std::sort(u.saved_songs.begin(), u.saved_songs.end());

            const double cat_mean = w.catalog_mean_affinity(u);
            auto saved_mean = [&]() {
                double s = 0;
                for (int id : u.saved_songs)
                    s += oracle_affinity(w, u, w.catalog[static_cast<size_t>(id)]);
                return s / static_cast<double>(u.saved_songs.size());
            };
            while (saved_mean() <= cat_mean) {
                // Swap the weakest favorite for the best unsaved on-platform song.
                size_t worst = 0;
                double worst_aff = 1e300;
                for (size_t i = 0; i < u.saved_songs.size(); ++i) {
                    const double a = oracle_affinity(
                        w, u, w.catalog[static_cast<size_t>(u.saved_songs[i])]);
                    if (a < worst_aff) {
                        worst_aff = a;
                        worst = i;
                    }
                }
                int best_id = -1;
                double best_aff = -1e300;
                for (int id : on_ids) {
                    if (std::find(u.saved_songs.begin(), u.saved_songs.end(), id) !=
                        u.saved_songs.end())
                        continue;
                    const double a = oracle_affinity(w, u, w.catalog[static_cast<size_t>(id)]);
                    if (a > best_aff) {
                        best_aff = a;
                        best_id = id;
                    }
                }
                if (best_id < 0 || best_aff <= worst_aff) break;
                u.saved_songs[worst] = best_id;
                std::sort(u.saved_songs.begin(), u.saved_songs.end());
            }
        }
    }

    // Freeze the affinity calibration range over (user, on-platform song) pairs.
    {
        double lo = 1e300, hi = -1e300;
        for (const auto& u : w.users) {
            for (const auto& s : w.catalog) {
                if (!s.on_platform) continue;
                const double a = oracle_affinity(w, u, s);
                lo = std::min(lo, a);
                hi = std::max(hi, a);
            }
        }
        w.affinity_lo = lo;
        w.affinity_hi = hi;
    }
    return w;
}

Trajectory simulate_session(const World& world, const UserSpec& user, int length, Rng& rng) {
    if (length < 1) throw InputError("session length must be >= 1");
    const auto& cfg = world.config;
    std::vector<int> on_ids = world.on_platform_ids();
    Trajectory traj;
    traj.user_id = user.user_id;
    traj.events.reserve(static_cast<size_t>(length));
    std::vector<double> item_logits(on_ids.size());
    for (int step = 0; step < length; ++step) {
        InteractionEvent ev;
        ev.state = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.n_states)));
        for (size_t i = 0; i < on_ids.size(); ++i) {
            const auto& s = world.catalog[static_cast<size_t>(on_ids[i])];
            item_logits[i] = oracle_affinity(world, user, s, ev.state) / cfg.item_temperature;
        }
        ev.item = on_ids[rng.categorical_logits(item_logits)];
        const double a =
            oracle_affinity(world, user, world.catalog[static_cast<size_t>(ev.item)], ev.state);
        const double fb_logits[3] = {(a - cfg.like_threshold) / cfg.feedback_temperature, 0.0,
                                     (cfg.dislike_threshold - a) / cfg.feedback_temperature};
        ev.feedback = static_cast<FeedbackLabel>(rng.categorical_logits(fb_logits));
        traj.events.push_back(ev);
    }
    return traj;
}

std::vector<Trajectory> simulate_user_sessions(const World& world, const UserSpec& user,
                                               int n_sessions) {
    const auto& cfg = world.config;
    Rng root(cfg.rng_seed);
    std::vector<Trajectory> out;
    out.reserve(static_cast<size_t>(n_sessions));
    for (int s = 0; s < n_sessions; ++s) {
        Rng r = root.substream("session", static_cast<uint64_t>(user.user_id),
                               static_cast<uint64_t>(s));
        const int len =
            static_cast<int>(r.uniform_range(cfg.session_length_min, cfg.session_length_max));
        out.push_back(simulate_session(world, user, len, r));
    }
    return out;
}

std::vector<Trajectory> simulate_all_sessions(const World& world) {
    std::vector<Trajectory> out;
    for (const auto& u : world.users) {
        auto per_user = simulate_user_sessions(world, u, world.config.sessions_per_user);
        for (auto& t : per_user) out.push_back(std::move(t));
    }
    return out;
}

bool oracle_relevance(const World& world, const Query& query, const Song& song) {
    if (query.intent_tags.empty()) throw InputError("query carries no intent tags");
    int overlap = 0;
    for (int t : query.intent_tags)
        if (song.has_tag(t)) ++overlap;
    return overlap >= world.config.relevance_threshold;
}

// --- serialization ---

namespace {

json config_to_json(const WorldConfig& c) {
    return json{{"n_songs", c.n_songs},
                {"n_off_platform", c.n_off_platform},
                {"n_artists", c.n_artists},
                {"n_users", c.n_users},
                {"tag_lexicon_size", c.tag_lexicon_size},
                {"n_genres", c.n_genres},
                {"n_states", c.n_states},
                {"session_length_min", c.session_length_min},
                {"session_length_max", c.session_length_max},
                {"sessions_per_user", c.sessions_per_user},
                {"min_saved_songs", c.min_saved_songs},
                {"max_saved_songs", c.max_saved_songs},
                {"rng_seed", c.rng_seed},
                {"w_pop", c.w_pop},
                {"w_state", c.w_state},
                {"profile_mix", c.profile_mix},
                {"item_temperature", c.item_temperature},
                {"like_threshold", c.like_threshold},
                {"dislike_threshold", c.dislike_threshold},
                {"feedback_temperature", c.feedback_temperature},
                {"relevance_threshold", c.relevance_threshold}};
}

WorldConfig config_from_json(const json& j) {
    WorldConfig c;
    c.n_songs = j.at("n_songs");
    c.n_off_platform = j.at("n_off_platform");
    c.n_artists = j.at("n_artists");
    c.n_users = j.at("n_users");
    c.tag_lexicon_size = j.at("tag_lexicon_size");
    c.n_genres = j.at("n_genres");
    c.n_states = j.at("n_states");
    c.session_length_min = j.at("session_length_min");
    c.session_length_max = j.at("session_length_max");
    c.sessions_per_user = j.at("sessions_per_user");
    c.min_saved_songs = j.at("min_saved_songs");
    c.max_saved_songs = j.at("max_saved_songs");
    c.rng_seed = j.at("rng_seed");
    c.w_pop = j.at("w_pop");
    c.w_state = j.at("w_state");
    c.profile_mix = j.at("profile_mix");
    c.item_temperature = j.at("item_temperature");
    c.like_threshold = j.at("like_threshold");
    c.dislike_threshold = j.at("dislike_threshold");
    c.feedback_temperature = j.at("feedback_temperature");
    c.relevance_threshold = j.at("relevance_threshold");
    return c;
}

}  // namespace

json World::to_json() const {
    json j;
    j["config"] = config_to_json(config);
    j["state_tags"] = state_tags;
    j["affinity_lo"] = affinity_lo;
    j["affinity_hi"] = affinity_hi;
    return j;
}

World World::from_json(const json& j) {
    World w;
    w.config = config_from_json(j.at("config"));
    w.state_tags = j.at("state_tags").get<std::vector<std::vector<int>>>();
    w.affinity_lo = j.at("affinity_lo");
    w.affinity_hi = j.at("affinity_hi");
    return w;
}

void save_world_jsonl(const World& world, const std::filesystem::path& path) {
    std::vector<json> records;
    json header = world.to_json();
    header["kind"] = "world";
    records.push_back(std::move(header));
    for (const auto& s : world.catalog) {
        records.push_back(json{{"kind", "song"},
                               {"song_id", s.song_id},
                               {"title_stem", s.title_stem},
                               {"title_suffix", to_string(s.title_suffix)},
                               {"artist_id", s.artist_id},
                               {"genre", s.genre},
                               {"tags", s.tags},
                               {"popularity", s.popularity},
                               {"on_platform", s.on_platform}});
    }
    for (const auto& u : world.users) {
        records.push_back(json{{"kind", "user"},
                               {"user_id", u.user_id},
                               {"age_bucket", u.profile.age_bucket},
                               {"gender", u.profile.gender},
                               {"occupation", u.profile.occupation},
                               {"latent_pref", u.latent_pref},
                               {"saved_songs", u.saved_songs}});
    }
    write_jsonl(path, records);
}

World load_world_jsonl(const std::filesystem::path& path) {
    auto records = read_jsonl(path);
    World w;
    bool have_header = false;
    for (const auto& r : records) {
        const std::string kind = r.at("kind");
        if (kind == "world") {
            w = World::from_json(r);
            have_header = true;
        } else if (kind == "song") {
            Song s;
            s.song_id = r.at("song_id");
            s.title_stem = r.at("title_stem");
            s.title_suffix = suffix_from_string(r.at("title_suffix"));
            s.artist_id = r.at("artist_id");
            s.genre = r.at("genre");
            s.tags = r.at("tags").get<std::vector<int>>();
            s.popularity = r.at("popularity");
            s.on_platform = r.at("on_platform");
            w.catalog.push_back(std::move(s));
        } else if (kind == "user") {
            UserSpec u;
            u.user_id = r.at("user_id");
            u.profile.age_bucket = r.at("age_bucket");
            u.profile.gender = r.at("gender");
            u.profile.occupation = r.at("occupation");
            u.latent_pref = r.at("latent_pref").get<std::vector<double>>();
            u.saved_songs = r.at("saved_songs").get<std::vector<int>>();
            w.users.push_back(std::move(u));
        }
    }
    if (!have_header) throw InputError("world file missing header record: " + path.string());
    std::sort(w.catalog.begin(), w.catalog.end(),
              [](const Song& a, const Song& b) { return a.song_id < b.song_id; });
    std::sort(w.users.begin(), w.users.end(),
              [](const UserSpec& a, const UserSpec& b) { return a.user_id < b.user_id; });
    return w;
}

void save_trajectories_jsonl(const std::vector<Trajectory>& trajectories,
                             const std::filesystem::path& path) {
    std::vector<json> records;
    records.reserve(trajectories.size());
    for (const auto& t : trajectories) {
        json events = json::array();
        for (const auto& e : t.events)
            events.push_back(json{{"state", e.state},
                                  {"item", e.item},
                                  {"feedback", to_string(e.feedback)}});
        records.push_back(json{{"user_id", t.user_id}, {"events", std::move(events)}});
    }
    write_jsonl(path, records);
}

std::vector<Trajectory> load_trajectories_jsonl(const std::filesystem::path& path) {
    auto records = read_jsonl(path);
    std::vector<Trajectory> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        Trajectory t;
        t.user_id = r.at("user_id");
        for (const auto& e : r.at("events")) {
            InteractionEvent ev;
            ev.state = e.at("state");
            ev.item = e.at("item");
            ev.feedback = feedback_from_string(e.at("feedback"));
            t.events.push_back(ev);
        }
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace minstrel
