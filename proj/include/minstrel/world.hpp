#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "minstrel/rng.hpp"
#include "minstrel/util.hpp"

namespace minstrel {

enum class TitleSuffix : int { plain = 0, live = 1, remix = 2, cover = 3 };
enum class FeedbackLabel : int { like = 0, skip = 1, dislike = 2 };

constexpr int kNumTitleSuffixes = 4;
constexpr int kNumFeedbackLabels = 3;

const char* to_string(TitleSuffix s);
const char* to_string(FeedbackLabel f);

struct Song {
    int song_id = -1;
    std::string title_stem;
    TitleSuffix title_suffix = TitleSuffix::plain;
    int artist_id = -1;
    int genre = -1;
    std::vector<int> tags;  // sorted, distinct, 2..5 entries
    double popularity = 0.0;
    bool on_platform = true;

    bool has_tag(int tag) const;
};

struct UserProfile {
    int age_bucket = 0;
    int gender = 0;
    int occupation = 0;
};

struct UserSpec {
    int user_id = -1;
    UserProfile profile;
    std::vector<double> latent_pref;  // unit L2 norm over tag lexicon
    std::vector<int> saved_songs;     // on-platform song ids
};

struct InteractionEvent {
    int state = 0;
    int item = -1;  // song_id
    FeedbackLabel feedback = FeedbackLabel::skip;
};

struct Trajectory {
    int user_id = -1;
    std::vector<InteractionEvent> events;
};

struct WorldConfig {
    int n_songs = 500;
    int n_off_platform = 50;
    int n_artists = 40;
    int n_users = 200;
    int tag_lexicon_size = 24;
    int n_genres = 8;
    int n_states = 6;
    int session_length_min = 8;
    int session_length_max = 16;
    int sessions_per_user = 12;
    int min_saved_songs = 5;
    int max_saved_songs = 12;
    uint64_t rng_seed = 7;

    // Oracle affinity weights.
    double w_pop = 0.10;
    double w_state = 0.30;
    // How strongly the profile archetype shapes the latent preference (0..1).
    double profile_mix = 0.55;

    // Session simulation.
    double item_temperature = 0.18;
    double like_threshold = 0.25;
    double dislike_threshold = 0.10;
    double feedback_temperature = 0.08;

    // Query relevance gate.
    int relevance_threshold = 1;

    void validate() const;  // throws ConfigError
};

struct World {
    WorldConfig config;
    std::vector<Song> catalog;  // indexed by song_id
    std::vector<UserSpec> users;
    // Tags associated with each situational state, used by the affinity bonus.
    std::vector<std::vector<int>> state_tags;
    // Affinity range over all (user, on-platform song) pairs, frozen at
    // generation time; used for the fixed [0,10] score calibration.
    double affinity_lo = 0.0;
    double affinity_hi = 1.0;

    const Song& song(int song_id) const;  // throws InputError on bad id
    const UserSpec& user(int user_id) const;
    std::vector<int> on_platform_ids() const;
    int n_on_platform() const;

    // Mean state-free affinity over the whole catalog for one user.
    double catalog_mean_affinity(const UserSpec& u) const;

    // Maps a state-free affinity onto [0,10] using the frozen range.
    double calibrate_affinity(double affinity) const;

    json to_json() const;
    static World from_json(const json& j);
};

struct Query {
    int query_id = -1;
    std::vector<int> intent_tags;  // 1..3 tags, sorted
    std::vector<int> surface_form;  // token ids, filled by the vocab renderer
    enum class Source : int { generated = 0, simulated_online = 1 } source = Source::generated;
};

// --- operations ---

World generate_world(const WorldConfig& config);

// Ground-truth affinity. The state-free overload omits the situational bonus.
double oracle_affinity(const World& world, const UserSpec& user, const Song& song, int state);
double oracle_affinity(const World& world, const UserSpec& user, const Song& song);

// Fraction of the song's tags matching the state's tag set, in [0,1].
double state_tag_match(const World& world, int state, const Song& song);

// Simulates one listening session for the user. Items are drawn from the
// on-platform catalog with probability proportional to exp(affinity/T).
Trajectory simulate_session(const World& world, const UserSpec& user, int length, Rng& rng);

// All sessions for all users under the config's session plan.
std::vector<Trajectory> simulate_all_sessions(const World& world);
std::vector<Trajectory> simulate_user_sessions(const World& world, const UserSpec& user,
                                               int n_sessions);

bool oracle_relevance(const World& world, const Query& query, const Song& song);

// Serialization: one record per song and per user.
void save_world_jsonl(const World& world, const std::filesystem::path& path);
World load_world_jsonl(const std::filesystem::path& path);
void save_trajectories_jsonl(const std::vector<Trajectory>& trajectories,
                             const std::filesystem::path& path);
std::vector<Trajectory> load_trajectories_jsonl(const std::filesystem::path& path);

}  // namespace minstrel
