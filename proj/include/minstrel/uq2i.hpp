#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "minstrel/corpus.hpp"
#include "minstrel/rewards.hpp"
#include "minstrel/rng.hpp"
#include "minstrel/util.hpp"
#include "minstrel/vocab.hpp"
#include "minstrel/world.hpp"

namespace minstrel {

// Disjoint user pools. Instruction tuning, preference alignment, and
// held-out evaluation must never share a user.
struct UserSplits {
    std::vector<int> sft_users;
    std::vector<int> rl_users;
    std::vector<int> eval_users;

    static UserSplits make(int n_users, double sft_fraction = 0.6, double rl_fraction = 0.25);
    void validate(int n_users) const;  // disjoint, complete, each nonempty
};

struct QueryCluster {
    int cluster_id = -1;
    std::vector<int> member_queries;
    std::vector<int> indexed_songs;  // sorted on-platform ids, each relevant to a member
    std::vector<double> centroid;    // tag-frequency vector
};

// Immutable after construction: queries by id, their clusters, and the
// song -> query linkage used for retrieval.
struct QueryIndex {
    std::vector<Query> queries;
    std::vector<QueryCluster> clusters;
    std::vector<std::vector<int>> song_queries;  // per song: template query ids
    std::vector<int> query_cluster;              // per query: cluster id

    void validate(const World& world) const;
};

struct UQ2IConfig {
    int queries_per_song = 2;
    int n_online_queries = 250;  // popularity-weighted random intents
    int n_clusters = 60;         // roughly one cluster per 8 songs
    int max_intent_tags = 3;
    int history_window = 8;  // interaction events kept in the prompt
    int list_length = 10;
    int max_retries = 8;
    double sft_fraction = 0.6;
    double rl_fraction = 0.25;

    void validate() const;
};

QueryIndex build_query_index(const World& world, const Vocabulary& vocab, const UQ2IConfig& config,
                             Rng& rng);

struct RetrievedCandidates {
    Query query;
    int seed_song = -1;
    std::vector<int> candidates;  // the seed query's full cluster index
};

// Samples a saved song and one of its queries, then returns that query's
// cluster index. Empty optional when no saved song has a query.
std::optional<RetrievedCandidates> retrieve_candidates(const UserSpec& user,
                                                       const QueryIndex& index, Rng& rng);

struct UQ2ISample {
    int sample_id = -1;
    int user_id = -1;
    std::vector<int> context_tokens;  // profile + recent events + query marker + surface
    Query query;
    std::vector<int> output_items;  // exactly list_length distinct on-platform ids, rm-descending

    json to_json() const;
    static UQ2ISample from_json(const json& j);
};

enum class SplitKind : int { sft = 0, rl = 1, eval = 2 };
const char* to_string(SplitKind s);

std::vector<UQ2ISample> synthesize_dataset(const World& world, const Vocabulary& vocab,
                                           const QueryIndex& index, const PersonalizationRM& rm,
                                           int n_samples, SplitKind split,
                                           const UserSplits& splits, const UQ2IConfig& config,
                                           uint64_t seed);

// Rendered output region: item SEP item ... item EOS.
std::vector<int> render_output_tokens(const Vocabulary& vocab, const std::vector<int>& items);

// Full training sequence: context unsupervised, generated region supervised.
MaskedSequence to_masked_sequence(const UQ2ISample& sample, const Vocabulary& vocab);

// Recovers the interaction events embedded in a sample's context prefix
// (the recent-history window the dedup reward runs against).
std::vector<InteractionEvent> context_events(const UQ2ISample& sample, const Vocabulary& vocab);

void save_samples_jsonl(const std::vector<UQ2ISample>& samples, SplitKind split,
                        const Vocabulary& vocab, const std::filesystem::path& path);
std::vector<UQ2ISample> load_samples_jsonl(const std::filesystem::path& path,
                                           SplitKind expected_split);

}  // namespace minstrel
