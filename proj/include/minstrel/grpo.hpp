#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "minstrel/policy.hpp"
#include "minstrel/rewards.hpp"
#include "minstrel/rng.hpp"
#include "minstrel/uq2i.hpp"
#include "minstrel/util.hpp"

namespace minstrel {

struct RLConfig {
    int group_size = 8;
    double clip_eps = 0.2;  // ratio clip half-width
    double kl_beta = 0.02;  // penalty toward the frozen reference
    double learning_rate = 5e-3;
    int n_prompts_per_step = 4;
    int epochs = 1;
    double grad_clip = 1.0;
    double temperature = 1.0;  // rollout sampling temperature

    void validate() const;
};

// One prompt's sampled candidate lists with sampling-time log-probabilities,
// rewards, and group-centered advantages.
struct RolloutGroup {
    std::vector<int> context_prefix;
    std::vector<std::vector<int>> outputs;  // generated tokens only
    std::vector<double> logprob_theta;      // over generated positions
    std::vector<double> logprob_ref;
    std::vector<double> rewards;  // combined hybrid reward
    std::vector<double> advantages;
    std::vector<RewardBreakdown> breakdowns;
    int user_id = -1;

    void validate() const;  // equal sizes, finite logprobs, centered advantages
};

std::vector<double> centered_advantages(const std::vector<double>& rewards);

// Exact KL(p || q) between categoricals given unnormalized logits.
double categorical_kl_logits(std::span<const double> logits_p, std::span<const double> logits_q);

// Clipped-ratio surrogate over one group, in pure arithmetic form so the
// loss and its log-probability derivatives are testable against closed
// forms. logprob_coeff[i] = d(loss)/d(logprob_theta[i]).
struct SurrogateTerms {
    double loss = 0.0;
    std::vector<double> logprob_coeff;
    double mean_ratio = 0.0;
    double clip_fraction = 0.0;
};
SurrogateTerms clipped_surrogate(const std::vector<double>& logprob_theta,
                                 const std::vector<double>& logprob_ref,
                                 const std::vector<double>& advantages, double clip_eps);

RolloutGroup rollout_group(const PolicyParams& policy, const PolicyParams& reference,
                           const World& world, const Vocabulary& vocab,
                           const PersonalizationRM& rm, const UQ2ISample& prompt,
                           const RewardConfig& reward_cfg, const RLConfig& config, Rng& rng);

struct StepDiagnostics {
    int step = -1;
    double loss = 0.0;
    double surrogate_loss = 0.0;
    double kl = 0.0;
    double mean_ratio = 0.0;
    double clip_fraction = 0.0;
    double grad_norm = 0.0;
    double mean_reward = 0.0;
    double mean_rel = 0.0, mean_pers = 0.0, mean_format = 0.0;
    double mean_fact = 0.0, mean_div = 0.0, mean_dedup = 0.0;

    json to_json() const;
};

// Objective value at the current policy: ratios are recomputed from the
// policy over the stored outputs, advantages and reference log-probs stay
// frozen. Accumulates the exact gradient when grad is non-null.
StepDiagnostics compute_grpo_loss(const PolicyParams& policy, const PolicyParams& reference,
                                  const std::vector<RolloutGroup>& groups, const RLConfig& config,
                                  PolicyGrad* grad);

// One clipped gradient-descent update on the group batch.
StepDiagnostics grpo_step(PolicyParams& policy, const PolicyParams& reference,
                          const std::vector<RolloutGroup>& groups, const RLConfig& config);

struct RLResult {
    PolicyParams params;
    std::vector<StepDiagnostics> trace;
};

// Full alignment loop: per-step rollout groups over shuffled prompts, one
// update per step. Prompts must come exclusively from the rl user split.
RLResult rl_train(const PolicyParams& policy, const PolicyParams& reference, const World& world,
                  const Vocabulary& vocab, const PersonalizationRM& rm,
                  const std::vector<UQ2ISample>& rl_samples, const UserSplits& splits,
                  const RewardConfig& reward_cfg, const RLConfig& config, uint64_t seed);

void save_rl_log(const std::vector<StepDiagnostics>& trace, const std::filesystem::path& path);

}  // namespace minstrel
