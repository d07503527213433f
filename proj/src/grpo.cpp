#include "minstrel/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "minstrel/errors.hpp"

namespace minstrel {

namespace {

// log softmax of raw logits, numerically stable.
std::vector<double> log_softmax(std::span<const double> logits) {
    double m = *std::max_element(logits.begin(), logits.end());
    double lse = 0.0;
    for (double l : logits) lse += std::exp(l - m);
    lse = m + std::log(lse);
    std::vector<double> out(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

MaskedSequence rollout_sequence(const std::vector<int>& prefix, const std::vector<int>& output) {
    MaskedSequence seq;
    seq.tokens = prefix;
    seq.tokens.insert(seq.tokens.end(), output.begin(), output.end());
    seq.loss_mask.assign(prefix.size(), 0);
    seq.loss_mask.insert(seq.loss_mask.end(), output.size(), 1);
    seq.validate();
    return seq;
}

}  // namespace

void RLConfig::validate() const {
    if (group_size < 2) throw ConfigError("group_size must be at least 2");
    if (clip_eps <= 0.0 || clip_eps >= 1.0) throw ConfigError("clip_eps must lie in (0, 1)");
    if (kl_beta < 0.0) throw ConfigError("kl_beta must be nonnegative");
    if (learning_rate < 0.0) throw ConfigError("learning_rate must be nonnegative");
    if (n_prompts_per_step < 1) throw ConfigError("n_prompts_per_step must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (grad_clip <= 0.0) throw ConfigError("grad_clip must be positive");
    if (temperature <= 0.0) throw ConfigError("rollout temperature must be positive");
}

void RolloutGroup::validate() const {
    size_t g = outputs.size();
    if (g < 1) throw InputError("rollout group is empty");
    if (logprob_theta.size() != g || logprob_ref.size() != g || rewards.size() != g ||
        advantages.size() != g || breakdowns.size() != g) {
        throw InputError("rollout group field sizes disagree");
    }
    double sum = 0.0;
    for (size_t i = 0; i < g; ++i) {
        if (!std::isfinite(logprob_theta[i]) || !std::isfinite(logprob_ref[i])) {
            throw NumericError("rollout log-probability is not finite");
        }
        if (outputs[i].empty()) throw InputError("rollout output is empty");
        sum += advantages[i];
    }
    if (std::abs(sum) > 1e-9) throw NumericError("rollout advantages are not centered");
}

std::vector<double> centered_advantages(const std::vector<double>& rewards) {
    if (rewards.empty()) throw InputError("cannot center an empty reward list");
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    std::vector<double> adv(rewards.size());
    for (size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - mean;
    return adv;
}

double categorical_kl_logits(std::span<const double> logits_p, std::span<const double> logits_q) {
    if (logits_p.size() != logits_q.size() || logits_p.empty()) {
        throw InputError("KL requires two equal-length logit vectors");
    }
    std::vector<double> lp = log_softmax(logits_p);
    std::vector<double> lq = log_softmax(logits_q);
    double kl = 0.0;
    for (size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
    return kl;
}

SurrogateTerms clipped_surrogate(const std::vector<double>& logprob_theta,
                                 const std::vector<double>& logprob_ref,
                                 const std::vector<double>& advantages, double clip_eps) {
    size_t g = logprob_theta.size();
    if (g == 0 || logprob_ref.size() != g || advantages.size() != g) {
        throw InputError("surrogate requires equal-length nonempty inputs");
    }
    SurrogateTerms out;
    out.logprob_coeff.assign(g, 0.0);
    double inv_g = 1.0 / static_cast<double>(g);
    int clipped = 0;
    for (size_t i = 0; i < g; ++i) {
        double r = std::exp(logprob_theta[i] - logprob_ref[i]);
        double clipped_r = std::clamp(r, 1.0 - clip_eps, 1.0 + clip_eps);
        double a = r * advantages[i];
        double b = clipped_r * advantages[i];
        if (a <= b) {
            out.loss -= inv_g * a;
            // d(-r*A/G)/d(logprob_theta) = -r*A/G
            out.logprob_coeff[i] = -inv_g * r * advantages[i];
        } else {
            // Clipped branch selected: constant in theta.
            out.loss -= inv_g * b;
            clipped++;
        }
        out.mean_ratio += inv_g * r;
    }
    out.clip_fraction = static_cast<double>(clipped) * inv_g;
    return out;
}

RolloutGroup rollout_group(const PolicyParams& policy, const PolicyParams& reference,
                           const World& world, const Vocabulary& vocab,
                           const PersonalizationRM& rm, const UQ2ISample& prompt,
                           const RewardConfig& reward_cfg, const RLConfig& config, Rng& rng) {
    config.validate();
    const std::vector<int>& prefix = prompt.context_tokens;
    int max_new = policy.config.context_length - static_cast<int>(prefix.size());
    if (max_new < 1) throw InputError("prompt leaves no room for generation");

    Trajectory history;
    history.user_id = prompt.user_id;
    history.events = context_events(prompt, vocab);

    RolloutGroup group;
    group.context_prefix = prefix;
    group.user_id = prompt.user_id;
    for (int i = 0; i < config.group_size; ++i) {
        std::vector<int> out = sample(policy, prefix, max_new, config.temperature, rng);
        MaskedSequence seq = rollout_sequence(prefix, out);
        group.logprob_theta.push_back(evaluate_logprob(policy, seq).first);
        group.logprob_ref.push_back(evaluate_logprob(reference, seq).first);
        RewardBreakdown bd = evaluate_rollout(world, vocab, rm, prompt.query, prompt.user_id,
                                              history, out, reward_cfg);
        group.rewards.push_back(bd.r_hyb);
        group.breakdowns.push_back(std::move(bd));
        group.outputs.push_back(std::move(out));
    }
    group.advantages = centered_advantages(group.rewards);
    group.validate();
    return group;
}

StepDiagnostics compute_grpo_loss(const PolicyParams& policy, const PolicyParams& reference,
                                  const std::vector<RolloutGroup>& groups, const RLConfig& config,
                                  PolicyGrad* grad) {
    config.validate();
    if (groups.empty()) throw InputError("grpo requires at least one rollout group");
    StepDiagnostics diag;
    double inv_groups = 1.0 / static_cast<double>(groups.size());
    int64_t n_outputs = 0;

    for (size_t gi = 0; gi < groups.size(); ++gi) {
        const RolloutGroup& group = groups[gi];
        group.validate();
        size_t g = group.outputs.size();
        int prefix_len = static_cast<int>(group.context_prefix.size());

        // Pass 1: forward both networks, collect current log-probs, KL, and
        // the per-position distributions the gradient needs.
        std::vector<double> lp_theta(g, 0.0);
        std::vector<ForwardCache> caches(g);
        std::vector<std::vector<int>> positions(g);
        // Per output, per generated position: policy log-softmax and its gap
        // to the reference log-softmax.
        std::vector<std::vector<std::vector<double>>> logp(g), gap(g);
        std::vector<std::vector<double>> pos_kl(g);
        double kl_sum = 0.0;
        int64_t kl_positions = 0;
        for (size_t i = 0; i < g; ++i) {
            MaskedSequence seq = rollout_sequence(group.context_prefix, group.outputs[i]);
            forward_hidden(policy, seq.tokens, caches[i]);
            ForwardCache ref_cache;
            forward_hidden(reference, seq.tokens, ref_cache);
            int n = static_cast<int>(seq.tokens.size());
            for (int t = prefix_len; t < n; ++t) {
                std::vector<double> lt = logits_at(policy, caches[i], t - 1);
                std::vector<double> lr = logits_at(reference, ref_cache, t - 1);
                std::vector<double> lpt = log_softmax(lt);
                std::vector<double> lpr = log_softmax(lr);
                lp_theta[i] += lpt[static_cast<size_t>(seq.tokens[static_cast<size_t>(t)])];
                double kl = 0.0;
                std::vector<double> d(lpt.size());
                for (size_t k = 0; k < lpt.size(); ++k) {
                    d[k] = lpt[k] - lpr[k];
                    kl += std::exp(lpt[k]) * d[k];
                }
                kl_sum += kl;
                kl_positions++;
                positions[i].push_back(t - 1);
                logp[i].push_back(std::move(lpt));
                gap[i].push_back(std::move(d));
                pos_kl[i].push_back(kl);
            }
        }

        SurrogateTerms terms =
            clipped_surrogate(lp_theta, group.logprob_ref, group.advantages, config.clip_eps);
        double group_kl = kl_sum / static_cast<double>(kl_positions);
        double group_loss = terms.loss + config.kl_beta * group_kl;
        if (!std::isfinite(group_loss)) {
            throw NumericError("grpo loss is not finite in group " + std::to_string(gi));
        }
        diag.loss += inv_groups * group_loss;
        diag.surrogate_loss += inv_groups * terms.loss;
        diag.kl += inv_groups * group_kl;
        diag.mean_ratio += inv_groups * terms.mean_ratio;
        diag.clip_fraction += inv_groups * terms.clip_fraction;

        for (size_t i = 0; i < g; ++i) {
            diag.mean_reward += group.rewards[i];
            const RewardBreakdown& bd = group.breakdowns[i];
            diag.mean_rel += bd.r_rel;
            diag.mean_pers += bd.r_pers;
            diag.mean_format += bd.r_format;
            diag.mean_fact += bd.r_fact;
            diag.mean_div += bd.r_div;
            diag.mean_dedup += bd.r_dedup;
            n_outputs++;
        }

        if (!grad) continue;
        double kl_scale =
            config.kl_beta * inv_groups / static_cast<double>(kl_positions);
        for (size_t i = 0; i < g; ++i) {
            double coeff = terms.logprob_coeff[i] * inv_groups;
            std::vector<std::vector<double>> dlogits(positions[i].size());
            for (size_t pi = 0; pi < positions[i].size(); ++pi) {
                const std::vector<double>& lpt = logp[i][pi];
                const std::vector<double>& d = gap[i][pi];
                double kl = pos_kl[i][pi];
                int target = group.outputs[i][pi];
                std::vector<double>& dl = dlogits[pi];
                dl.assign(lpt.size(), 0.0);
                for (size_t k = 0; k < lpt.size(); ++k) {
                    double p = std::exp(lpt[k]);
                    // Surrogate: coeff * d(logprob)/d(logit); KL penalty:
                    // p_k * (gap_k - kl).
                    dl[k] = coeff * ((static_cast<int>(k) == target ? 1.0 : 0.0) - p) +
                            kl_scale * p * (d[k] - kl);
                }
            }
            backward_from_logit_grads(policy, caches[i], positions[i], dlogits, *grad);
        }
    }

    if (n_outputs > 0) {
        double inv = 1.0 / static_cast<double>(n_outputs);
        diag.mean_reward *= inv;
        diag.mean_rel *= inv;
        diag.mean_pers *= inv;
        diag.mean_format *= inv;
        diag.mean_fact *= inv;
        diag.mean_div *= inv;
        diag.mean_dedup *= inv;
    }
    return diag;
}

StepDiagnostics grpo_step(PolicyParams& policy, const PolicyParams& reference,
                          const std::vector<RolloutGroup>& groups, const RLConfig& config) {
    PolicyGrad grad(policy.config);
    StepDiagnostics diag = compute_grpo_loss(policy, reference, groups, config, &grad);
    double norm = grad.global_norm();
    if (!std::isfinite(norm)) throw NumericError("grpo gradient norm is not finite");
    diag.grad_norm = norm;
    double scale = norm > config.grad_clip ? config.grad_clip / norm : 1.0;
    grad.add_scaled_to(policy, -config.learning_rate * scale);
    if (!policy.all_finite()) throw NumericError("policy parameters diverged in grpo step");
    return diag;
}

RLResult rl_train(const PolicyParams& policy, const PolicyParams& reference, const World& world,
                  const Vocabulary& vocab, const PersonalizationRM& rm,
                  const std::vector<UQ2ISample>& rl_samples, const UserSplits& splits,
                  const RewardConfig& reward_cfg, const RLConfig& config, uint64_t seed) {
    config.validate();
    reward_cfg.validate();
    splits.validate(world.config.n_users);
    if (rl_samples.empty()) throw InputError("rl training requires at least one prompt");
    std::unordered_set<int> sft_pool(splits.sft_users.begin(), splits.sft_users.end());
    std::unordered_set<int> rl_pool(splits.rl_users.begin(), splits.rl_users.end());
    for (const UQ2ISample& s : rl_samples) {
        if (sft_pool.count(s.user_id) || !rl_pool.count(s.user_id)) {
            throw InputError("rl prompt user " + std::to_string(s.user_id) +
                             " is not isolated to the rl split");
        }
    }

    RLResult result{policy, {}};
    Rng base(seed);
    int step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<size_t> order(rl_samples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng order_rng = base.substream("rl_order", static_cast<uint64_t>(epoch));
        order_rng.shuffle(order);
        for (size_t start = 0; start < order.size();
             start += static_cast<size_t>(config.n_prompts_per_step)) {
            size_t end = std::min(order.size(),
                                  start + static_cast<size_t>(config.n_prompts_per_step));
            std::vector<RolloutGroup> groups;
            for (size_t slot = start; slot < end; ++slot) {
                Rng rng = base.substream("rl_rollout", static_cast<uint64_t>(step),
                                         static_cast<uint64_t>(slot - start));
                groups.push_back(rollout_group(result.params, reference, world, vocab, rm,
                                               rl_samples[order[slot]], reward_cfg, config, rng));
            }
            StepDiagnostics diag = grpo_step(result.params, reference, groups, config);
            diag.step = step;
            result.trace.push_back(diag);
            step++;
        }
    }
    return result;
}

json StepDiagnostics::to_json() const {
    json j;
    j["kind"] = "rl_step";
    j["step"] = step;
    j["loss"] = loss;
    j["surrogate_loss"] = surrogate_loss;
    j["kl"] = kl;
    j["mean_ratio"] = mean_ratio;
    j["clip_fraction"] = clip_fraction;
    j["grad_norm"] = grad_norm;
    j["mean_reward"] = mean_reward;
    j["mean_rel"] = mean_rel;
    j["mean_pers"] = mean_pers;
    j["mean_format"] = mean_format;
    j["mean_fact"] = mean_fact;
    j["mean_div"] = mean_div;
    j["mean_dedup"] = mean_dedup;
    return j;
}

void save_rl_log(const std::vector<StepDiagnostics>& trace, const std::filesystem::path& path) {
    std::vector<json> rows;
    json header;
    header["kind"] = "rl_log";
    header["steps"] = trace.size();
    rows.push_back(header);
    for (const StepDiagnostics& d : trace) rows.push_back(d.to_json());
    write_jsonl(path, rows);
}

}  // namespace minstrel
