#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "minstrel/corpus.hpp"
#include "minstrel/policy.hpp"
#include "minstrel/rewards.hpp"
#include "minstrel/uq2i.hpp"
#include "minstrel/util.hpp"
#include "minstrel/vocab.hpp"
#include "minstrel/world.hpp"

namespace minstrel {

// One evaluation surface: four offline list metrics, two multiple-choice
// probe accuracies, and held-out trajectory perplexity. Sections that a
// given evaluation does not cover stay at their neutral defaults.
struct MetricsReport {
    double personalization = 0.0;      // [0, 10], oracle affinity calibrated
    double relevance_pct = 0.0;        // [0, 100], prompts passing the judge
    double diversity_pct = 0.0;        // [0, 100], catalog coverage
    double factuality_pct = 0.0;       // [0, 100], on-platform share
    double u2i_ppl = 1.0;              // >= 1, item-token perplexity
    double music_knowledge_acc = 0.0;  // [0, 100]
    double q2i_acc = 0.0;              // [0, 100]
    int n_eval_prompts = 0;
    std::string config_fingerprint;

    void validate() const;  // throws NumericError when a field leaves range
    json to_json() const;
    static MetricsReport from_json(const json& j);
    static std::string csv_header();
    std::string csv_row() const;
};

struct EvalConfig {
    int n_probes = 400;       // per probe family
    int max_new_tokens = 24;  // greedy decoding budget per prompt
    double rel_fraction = 0.8;
    int list_length = 10;
    uint64_t probe_seed = 1789;

    void validate() const;
};

// Argmax decoding from a prompt prefix; stops at EOS or after max_new
// tokens. Returns only the generated tokens, EOS included when reached.
std::vector<int> greedy_decode(const PolicyParams& params, const std::vector<int>& prefix,
                               int max_new);

// One prompt's greedy decode with its parse. Persisted so every metric can
// be recomputed from files alone.
struct DecodedList {
    int sample_id = -1;
    int user_id = -1;
    int query_id = -1;
    std::vector<int> raw_tokens;
    std::vector<int> parsed_song_ids;
    bool format_ok = false;

    json to_json() const;
    static DecodedList from_json(const json& j);
};

struct EvalResult {
    MetricsReport report;
    std::vector<DecodedList> decoded;
    // Mean |reward-model score - calibrated oracle score| over decoded
    // items; -1 when no reward model was supplied.
    double rm_oracle_gap = -1.0;
};

// The four offline metrics over held-out prompts. Asserts every prompt user
// sits in the eval split, greedy-decodes one list per prompt, and scores:
// personalization (mean calibrated affinity over parsed items), relevance
// (% prompts with a clean parse passing the relevance judge), diversity
// (distinct on-platform items across all prompts / catalog), factuality
// (mean on-platform share over parsed prefixes). Malformed outputs score
// their parsed prefix and fail relevance; probe fields stay at defaults.
EvalResult evaluate_policy(const PolicyParams& policy, const std::vector<UQ2ISample>& eval_prompts,
                           const World& world, const Vocabulary& vocab, const UserSplits& splits,
                           const EvalConfig& config, const PersonalizationRM* rm = nullptr);

// Recomputes the offline metrics from persisted decodes; evaluate_policy's
// report equals this applied to its own decodes, fingerprint included.
MetricsReport metrics_from_decoded(const World& world, const std::vector<UQ2ISample>& prompts,
                                   const std::vector<DecodedList>& decoded,
                                   const EvalConfig& config, const std::string& fingerprint);

void save_decoded_jsonl(const std::vector<DecodedList>& decoded,
                        const std::filesystem::path& path);
std::vector<DecodedList> load_decoded_jsonl(const std::filesystem::path& path);

// Item-token perplexity of held-out trajectories under the given context
// encoding: exp(mean negative log-prob over item-token positions only).
double eval_u2i_ppl(const PolicyParams& policy, const Vocabulary& vocab, const World& world,
                    const std::vector<Trajectory>& trajectories, const EncodeOptions& options = {});

struct ProbeResult {
    double music_knowledge_acc = 0.0;  // [0, 100]
    double q2i_acc = 0.0;              // [0, 100]
    int n_probes = 0;                  // per family
};

// Four-way multiple choice scored by next-token log-probability.
// Music knowledge: the artist-fact layout with three artist distractors.
// Q2I: the comment layout (tags then item) with one oracle-relevant option
// against three options sharing no intent tag.
ProbeResult knowledge_probes(const PolicyParams& policy, const World& world,
                             const Vocabulary& vocab, int n_probes, uint64_t seed);

struct ScalingPoint {
    double budget_fraction = 0.0;
    MetricsReport report;
};

// Retrains from scratch at each token-budget fraction (nested subsets, one
// shared shuffle) and reports probe accuracies plus held-out perplexity.
// A zero budget skips training and reports the untrained baseline.
std::vector<ScalingPoint> scaling_sweep(const World& world, const Vocabulary& vocab,
                                        const Corpus& corpus,
                                        const std::vector<Trajectory>& heldout,
                                        const std::vector<double>& budgets,
                                        const PolicyConfig& policy_config,
                                        const TrainConfig& train_config, int n_probes,
                                        uint64_t seed);

void save_scaling_csv(const std::vector<ScalingPoint>& points,
                      const std::filesystem::path& path);

}  // namespace minstrel
