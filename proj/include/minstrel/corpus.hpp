#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "minstrel/vocab.hpp"
#include "minstrel/world.hpp"

namespace minstrel {

// Hard cap on encoded sequence length; the policy's context window matches it.
constexpr int kMaxSequenceTokens = 128;

// mask[j] = 1 means token j is a prediction target, scored from the tokens
// before it. Position 0 is never a target.
struct MaskedSequence {
    std::vector<int> tokens;
    std::vector<uint8_t> loss_mask;

    void validate() const;  // throws InputError on shape violations
    int64_t supervised_count() const;
};

enum class StageKind { objective, subjective, preference };
const char* to_string(StageKind s);
StageKind stage_from_string(const std::string& s);

enum class PredictionMode { next_item, next_behavior };
const char* to_string(PredictionMode m);
PredictionMode mode_from_string(const std::string& s);

struct CorpusStage {
    StageKind stage = StageKind::objective;
    std::vector<MaskedSequence> sequences;
    int64_t token_budget = 0;

    int64_t total_tokens() const;
    void validate() const;
};

// Context-ablation switches for encoding; defaults give the full layout.
struct EncodeOptions {
    PredictionMode mode = PredictionMode::next_behavior;
    bool include_profile = true;
    bool include_state = true;
    bool include_feedback = true;
};

// Layout: [BOS, age, gender, occupation, (state, item, feedback) x t, EOS].
// next_item supervises only the final item token; next_behavior supervises
// every item and feedback token. States and profile are context only.
MaskedSequence encode_trajectory(const Vocabulary& vocab, const Trajectory& traj,
                                 const UserProfile& profile, PredictionMode mode);
MaskedSequence encode_trajectory(const Vocabulary& vocab, const Trajectory& traj,
                                 const UserProfile& profile, const EncodeOptions& options);

// Exact inverse of the full-layout encoding.
std::pair<UserProfile, Trajectory> decode_trajectory(const Vocabulary& vocab,
                                                     const MaskedSequence& seq);

struct CorpusConfig {
    int cooc_min = 2;
    // Per-stage token proportions; stage budgets are derived from the realized
    // stage-3 size so the preference stage always dominates.
    double stage1_ratio = 2.7;
    double stage2_ratio = 4.6;
    double stage3_ratio = 16.0;
    int stage1_min_coverage = 3;  // fact sequences per song
};

// Pairs of songs (a < b) liked by >= cooc_min distinct users, sorted by
// descending count then ascending ids.
struct PairCount {
    int song_a = 0;
    int song_b = 0;
    int count = 0;
};
std::vector<PairCount> cooccurrence_counts(const std::vector<Trajectory>& trajectories,
                                           int cooc_min);

// target_tokens = 0 means "core content only"; otherwise the builder tops up
// with filler templates and never exceeds the budget.
CorpusStage build_stage1(const World& world, int64_t target_tokens = 0);
CorpusStage build_stage2(const World& world, const std::vector<Trajectory>& trajectories,
                         const CorpusConfig& config = {}, int64_t target_tokens = 0);
CorpusStage build_stage3(const Vocabulary& vocab, const World& world,
                         const std::vector<Trajectory>& trajectories, PredictionMode mode);

struct Corpus {
    CorpusStage stage1;
    CorpusStage stage2;
    CorpusStage stage3;
};

// Builds stage 3 first, then sizes stages 1 and 2 off its realized token
// count using the configured proportions.
Corpus build_corpus(const World& world, const std::vector<Trajectory>& trajectories,
                    PredictionMode mode, const CorpusConfig& config = {});

void save_stage_jsonl(const CorpusStage& stage, const std::filesystem::path& path);
CorpusStage load_stage_jsonl(const std::filesystem::path& path);

}  // namespace minstrel
