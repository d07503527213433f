#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "minstrel/util.hpp"
#include "minstrel/vocab.hpp"
#include "minstrel/world.hpp"

namespace minstrel {

struct RMExample {
    int user_id = 0;
    int state = 0;
    int song_id = 0;
    FeedbackLabel feedback = FeedbackLabel::skip;
};

// Learned logistic scorer over observable features: per-tag empirical
// like-rate interactions, popularity, and state match. Deliberately distinct
// from the ground-truth affinity so the reward stays imperfect.
class PersonalizationRM {
public:
    // Score in [0, 10]; the state-free overload holds the state feature at
    // its training mean.
    double score(const World& world, int user_id, const Song& song) const;
    double score(const World& world, int user_id, const Song& song, int state) const;

    int64_t trained_on() const { return trained_on_; }

    json to_json() const;
    static PersonalizationRM from_json(const json& j);

private:
    friend PersonalizationRM train_personalization_rm(const World& world,
                                                      const std::vector<RMExample>& examples);

    std::vector<double> features(const World& world, int user_id, const Song& song,
                                 int state, bool use_state) const;
    double raw_score(const std::vector<double>& feats) const;

    std::vector<double> weights_;
    double bias_ = 0.0;
    int64_t trained_on_ = 0;
    int n_tags_ = 0;
    int n_genres_ = 0;
    std::vector<std::vector<double>> user_tag_rate_;    // per user, per tag
    std::vector<std::vector<double>> user_genre_rate_;  // per user, per genre
    std::vector<double> song_rate_;                     // per song, pooled
    std::vector<double> global_tag_rate_;
    double global_rate_ = 0.5;
    std::vector<double> feat_mean_, feat_std_;
};

// Logistic regression (like = 1 vs rest) by full-batch gradient descent until
// the log-loss change drops below 1e-6 or 500 epochs pass. Requires >= 1000
// examples containing both classes.
PersonalizationRM train_personalization_rm(const World& world,
                                           const std::vector<RMExample>& examples);

void save_rm_json(const PersonalizationRM& rm, const std::filesystem::path& path);
PersonalizationRM load_rm_json(const std::filesystem::path& path);

struct RewardWeights {
    double lambda_pers = 0.5;
    double lambda_format = 0.25;
    double lambda_fact = 0.25;
    double lambda_div = 0.25;
    double lambda_dedup = 0.25;

    void validate() const;  // all weights nonnegative
};

struct RewardConfig {
    RewardWeights weights;
    double rel_fraction = 0.8;   // list fraction needed to pass the relevance gate
    int dedup_window = 20;       // how many recent likes count as "recent"
    int list_length = 10;
    bool relevance_gate = true;  // false: gate forced open, r_rel still reported

    void validate() const;
};

struct RuleRewards {
    int r_format = 0;      // {0,1}: exact list structure
    double r_fact = 0.0;   // fraction of parsed items on-platform
    double r_div = 0.0;    // 1 - near-duplicate fraction
    double r_dedup = 0.0;  // 1 - recently-liked fraction
    std::vector<int> parsed_items;
};

struct RewardBreakdown {
    int r_rel = 0;
    double r_pers = 0.0;
    int r_format = 0;
    double r_fact = 0.0;
    double r_div = 0.0;
    double r_dedup = 0.0;
    double r_hyb = 0.0;
    std::vector<int> parsed_items;

    json to_json() const;
};

// 1 iff the fraction of items passing the relevance oracle meets
// rel_fraction; an empty list fails the gate.
int judge_relevance(const World& world, const Query& query, const std::vector<int>& items,
                    double rel_fraction = 0.8);

// Pure function of the raw generated tokens. Never throws on malformed
// output; violations become penalties.
RuleRewards rule_rewards(const Vocabulary& vocab, const World& world,
                         std::span<const int> raw_output, const Trajectory& user_history,
                         const RewardConfig& config = {});

// Combines pre-computed components; the relevance gate multiplies only the
// personalization term.
RewardBreakdown hybrid_reward(int r_rel, double r_pers, const RuleRewards& rules,
                              const RewardWeights& weights);

// Full per-rollout evaluation: parse, rule rewards, relevance gate over the
// parsed items, RM-scored personalization (mean over parsed items).
RewardBreakdown evaluate_rollout(const World& world, const Vocabulary& vocab,
                                 const PersonalizationRM& rm, const Query& query, int user_id,
                                 const Trajectory& user_history, std::span<const int> raw_output,
                                 const RewardConfig& config = {});

}  // namespace minstrel
