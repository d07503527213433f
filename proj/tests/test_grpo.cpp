#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "minstrel/errors.hpp"
#include "minstrel/grpo.hpp"
#include "minstrel/policy.hpp"
#include "minstrel/rewards.hpp"
#include "minstrel/rng.hpp"
#include "minstrel/uq2i.hpp"
#include "minstrel/vocab.hpp"
#include "minstrel/world.hpp"

using namespace minstrel;
namespace fs = std::filesystem;

namespace {

// Small end-to-end fixture: world, index, reward model, prompts, and a
// short-context policy so rollouts stay cheap.
struct Fixture {
    World world;
    Vocabulary vocab;
    QueryIndex index;
    PersonalizationRM rm;
    UserSplits splits;
    std::vector<UQ2ISample> sft_samples;
    std::vector<UQ2ISample> rl_samples;
    PolicyParams policy;  // lightly instruction-tuned

    Fixture()
        : world(make_world()),
          vocab(world.config),
          index(make_index()),
          rm(make_rm()),
          splits(UserSplits::make(world.config.n_users)),
          sft_samples(make_samples(SplitKind::sft, 48)),
          rl_samples(make_samples(SplitKind::rl, 16)),
          policy(make_policy()) {}

    static World make_world() {
        WorldConfig c;
        c.n_songs = 80;
        c.n_off_platform = 8;
        c.n_artists = 12;
        c.n_users = 30;
        c.sessions_per_user = 6;
        return generate_world(c);
    }

    QueryIndex make_index() {
        UQ2IConfig cfg;
        cfg.n_online_queries = 40;
        cfg.n_clusters = 12;
        Rng rng(31);
        return build_query_index(world, vocab, cfg, rng);
    }

    PersonalizationRM make_rm() {
        std::vector<RMExample> examples;
        for (int u = 0; u < 26; ++u) {
            for (const Trajectory& t : simulate_user_sessions(world, world.user(u), 6)) {
                for (const InteractionEvent& e : t.events) {
                    examples.push_back({u, e.state, e.item, e.feedback});
                }
            }
        }
        return train_personalization_rm(world, examples);
    }

    std::vector<UQ2ISample> make_samples(SplitKind split, int n) {
        UQ2IConfig cfg;
        cfg.n_online_queries = 40;
        cfg.n_clusters = 12;
        return synthesize_dataset(world, vocab, index, rm, n, split, splits, cfg, 13);
    }

    PolicyParams make_policy() {
        PolicyConfig pc;
        pc.vocab_size = vocab.size();
        pc.d_model = 16;
        pc.context_length = 64;
        Rng rng(41);
        PolicyParams params = PolicyParams::init(pc, rng);
        std::vector<MaskedSequence> seqs;
        for (const UQ2ISample& s : sft_samples) seqs.push_back(to_masked_sequence(s, vocab));
        TrainConfig tc;
        tc.learning_rate = 0.05;
        tc.epochs = 3;
        tc.batch_size = 8;
        return sft(std::move(params), seqs, tc, 7);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

PolicyGrad zero_grad(const PolicyConfig& c) { return PolicyGrad(c); }

bool grads_equal(const PolicyGrad& a, const PolicyGrad& b) {
    auto eq = [](const std::vector<double>& x, const std::vector<double>& y) { return x == y; };
    return eq(a.tok_emb, b.tok_emb) && eq(a.pos_emb, b.pos_emb) && eq(a.wq, b.wq) &&
           eq(a.wk, b.wk) && eq(a.wv, b.wv) && eq(a.wo, b.wo) && eq(a.w1, b.w1) &&
           eq(a.w2, b.w2);
}

bool params_equal(const PolicyParams& a, const PolicyParams& b) {
    bool same = true;
    a.for_each_tensor([&](const char* name, const std::vector<double>& ta) {
        b.for_each_tensor([&](const char* name_b, const std::vector<double>& tb) {
            if (std::string(name) == name_b) same = same && ta == tb;
        });
    });
    return same;
}

// A synthetic rollout group over the fixture's real prompt/vocab but with
// hand-chosen rewards, so the loss surface is fixed and differentiable.
RolloutGroup synthetic_group(const PolicyParams& policy, const PolicyParams& reference,
                             const UQ2ISample& prompt, const Vocabulary& vocab,
                             const std::vector<double>& rewards, uint64_t seed) {
    RolloutGroup g;
    g.context_prefix = prompt.context_tokens;
    g.user_id = prompt.user_id;
    Rng rng(seed);
    int max_new = policy.config.context_length - static_cast<int>(g.context_prefix.size());
    for (size_t i = 0; i < rewards.size(); ++i) {
        std::vector<int> out = sample(policy, g.context_prefix, max_new, 1.0, rng);
        MaskedSequence seq;
        seq.tokens = g.context_prefix;
        seq.tokens.insert(seq.tokens.end(), out.begin(), out.end());
        seq.loss_mask.assign(g.context_prefix.size(), 0);
        seq.loss_mask.insert(seq.loss_mask.end(), out.size(), 1);
        g.logprob_theta.push_back(evaluate_logprob(policy, seq).first);
        g.logprob_ref.push_back(evaluate_logprob(reference, seq).first);
        g.outputs.push_back(std::move(out));
        g.rewards.push_back(rewards[i]);
        g.breakdowns.emplace_back();
    }
    g.advantages = centered_advantages(g.rewards);
    (void)vocab;
    return g;
}

}  // namespace

TEST_CASE("advantage centering") {
    std::vector<double> adv = centered_advantages({3.0, 1.0});
    CHECK(adv[0] == doctest::Approx(1.0));
    CHECK(adv[1] == doctest::Approx(-1.0));

    adv = centered_advantages({2.5, 2.5, 2.5, 2.5});
    for (double a : adv) CHECK(a == 0.0);

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> rewards;
        for (int i = 0; i < 8; ++i) rewards.push_back(6.0 * rng.uniform());
        adv = centered_advantages(rewards);
        double sum = 0.0;
        for (double a : adv) sum += a;
        CHECK(std::abs(sum) < 1e-9);
    }
    CHECK_THROWS_AS(centered_advantages({}), InputError);
}

TEST_CASE("exact categorical KL") {
    // KL(p||p) vanishes.
    std::vector<double> logits = {0.3, -1.2, 2.0, 0.0};
    CHECK(std::abs(categorical_kl_logits(logits, logits)) <= 1e-10);

    // Closed-form Bernoulli case: p=(0.7,0.3), q=(0.5,0.5).
    std::vector<double> lp = {std::log(0.7), std::log(0.3)};
    std::vector<double> lq = {std::log(0.5), std::log(0.5)};
    double expected = 0.7 * std::log(0.7 / 0.5) + 0.3 * std::log(0.3 / 0.5);
    CHECK(categorical_kl_logits(lp, lq) == doctest::Approx(expected).epsilon(1e-12));

    // Nonnegative for arbitrary pairs; shift invariance in the logits.
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> a, b;
        for (int i = 0; i < 5; ++i) {
            a.push_back(2.0 * rng.normal());
            b.push_back(2.0 * rng.normal());
        }
        double kl = categorical_kl_logits(a, b);
        CHECK(kl >= 0.0);
        std::vector<double> shifted = a;
        for (double& v : shifted) v += 7.3;
        CHECK(categorical_kl_logits(shifted, b) == doctest::Approx(kl).epsilon(1e-9));
    }
}

TEST_CASE("clipped surrogate matches hand-computed closed form") {
    // Bernoulli-style two-rollout group. r = (1.2, 0.5), A = (+1, -1),
    // eps = 0.2: the first term rides the unclipped branch at the band edge,
    // the second clips at 0.8 and contributes no gradient.
    std::vector<double> lp_theta = {std::log(0.6), std::log(0.2)};
    std::vector<double> lp_ref = {std::log(0.5), std::log(0.4)};
    std::vector<double> adv = {1.0, -1.0};
    SurrogateTerms t = clipped_surrogate(lp_theta, lp_ref, adv, 0.2);
    CHECK(t.loss == doctest::Approx(-0.2).epsilon(1e-12));
    CHECK(t.logprob_coeff[0] == doctest::Approx(-0.6).epsilon(1e-12));
    CHECK(t.logprob_coeff[1] == 0.0);
    CHECK(t.mean_ratio == doctest::Approx(0.85).epsilon(1e-12));
    CHECK(t.clip_fraction == doctest::Approx(0.5));

    // Identical policies: every ratio is exactly 1, loss is -mean(A) = 0 for
    // centered advantages, and each coefficient is -A_i / G.
    std::vector<double> same = {std::log(0.3), std::log(0.5), std::log(0.1)};
    std::vector<double> adv3 = centered_advantages({4.0, 1.0, 1.0});
    t = clipped_surrogate(same, same, adv3, 0.2);
    CHECK(t.loss == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(t.mean_ratio == 1.0);
    CHECK(t.clip_fraction == 0.0);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(t.logprob_coeff[i] == doctest::Approx(-adv3[i] / 3.0).epsilon(1e-12));
    }
}

TEST_CASE("clipping selects the min branch everywhere") {
    Rng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        double eps = 0.05 + 0.4 * rng.uniform();
        std::vector<double> lpt, lpr, adv_src;
        for (int i = 0; i < 4; ++i) {
            lpt.push_back(-3.0 * rng.uniform());
            lpr.push_back(-3.0 * rng.uniform());
            adv_src.push_back(4.0 * rng.uniform());
        }
        std::vector<double> adv = centered_advantages(adv_src);
        SurrogateTerms t = clipped_surrogate(lpt, lpr, adv, eps);
        double expected = 0.0;
        for (size_t i = 0; i < 4; ++i) {
            double r = std::exp(lpt[i] - lpr[i]);
            double c = std::clamp(r, 1.0 - eps, 1.0 + eps);
            expected -= std::min(r * adv[i], c * adv[i]) / 4.0;
            if (std::abs(r - 1.0) <= eps) {
                // Inside the band both branches agree exactly.
                CHECK(r * adv[i] == c * adv[i]);
            }
        }
        CHECK(t.loss == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("rollout groups record exact sampling-time log-probabilities") {
    Fixture& f = fixture();
    RLConfig cfg;
    cfg.group_size = 4;
    Rng rng(55);
    RolloutGroup g = rollout_group(f.policy, f.policy, f.world, f.vocab, f.rm, f.rl_samples[0],
                                   RewardConfig{}, cfg, rng);
    REQUIRE(g.outputs.size() == 4);

    double adv_sum = 0.0;
    for (size_t i = 0; i < g.outputs.size(); ++i) {
        CHECK(!g.outputs[i].empty());
        CHECK(g.outputs[i].size() <=
              static_cast<size_t>(f.policy.config.context_length) - g.context_prefix.size());

        // Recomputation oracle: stored log-probs reproduce exactly.
        MaskedSequence seq;
        seq.tokens = g.context_prefix;
        seq.tokens.insert(seq.tokens.end(), g.outputs[i].begin(), g.outputs[i].end());
        seq.loss_mask.assign(g.context_prefix.size(), 0);
        seq.loss_mask.insert(seq.loss_mask.end(), g.outputs[i].size(), 1);
        CHECK(std::abs(evaluate_logprob(f.policy, seq).first - g.logprob_theta[i]) <= 1e-9);

        // Policy == reference: ratios are exactly one.
        CHECK(g.logprob_theta[i] == g.logprob_ref[i]);
        adv_sum += g.advantages[i];
    }
    CHECK(std::abs(adv_sum) <= 1e-9);

    // On-policy ratio sanity before any update.
    SurrogateTerms t = clipped_surrogate(g.logprob_theta, g.logprob_ref, g.advantages, 0.2);
    CHECK(std::abs(t.mean_ratio - 1.0) <= 1e-6);

    // Determinism: the same stream reproduces the group.
    Rng rng2(55);
    RolloutGroup g2 = rollout_group(f.policy, f.policy, f.world, f.vocab, f.rm, f.rl_samples[0],
                                    RewardConfig{}, cfg, rng2);
    CHECK(g2.outputs == g.outputs);
    CHECK(g2.rewards == g.rewards);
}

TEST_CASE("grpo gradient matches finite differences through ratio and KL") {
    Fixture& f = fixture();
    PolicyConfig pc = f.policy.config;
    Rng ra(101), rb(202);
    PolicyParams policy = PolicyParams::init(pc, ra);
    PolicyParams reference = PolicyParams::init(pc, rb);

    RLConfig cfg;
    cfg.group_size = 3;
    cfg.clip_eps = 0.35;
    cfg.kl_beta = 0.1;
    std::vector<RolloutGroup> groups = {
        synthetic_group(policy, reference, f.rl_samples[1], f.vocab, {4.0, 1.5, 0.5}, 71),
        synthetic_group(policy, reference, f.rl_samples[2], f.vocab, {2.0, 2.0, 5.0}, 72)};

    PolicyGrad grad = zero_grad(pc);
    StepDiagnostics diag = compute_grpo_loss(policy, reference, groups, cfg, &grad);
    CHECK(std::isfinite(diag.loss));
    CHECK(diag.kl > 0.0);  // independently initialized networks differ

    // Central finite differences on random coordinates of every tensor.
    std::vector<std::vector<double>*> tensors;
    PolicyParams probe = policy;
    std::vector<std::vector<double>*> probe_tensors = {
        &probe.tok_emb, &probe.pos_emb, &probe.wq, &probe.wk,
        &probe.wv,      &probe.wo,      &probe.w1, &probe.w2};
    std::vector<const std::vector<double>*> grad_tensors = {
        &grad.tok_emb, &grad.pos_emb, &grad.wq, &grad.wk,
        &grad.wv,      &grad.wo,      &grad.w1, &grad.w2};
    // Coordinates with a meaningful gradient must match to 1e-4 relative;
    // near-zero coordinates only need to agree within the FD noise floor
    // (central differences of an O(1) loss bottom out around 1e-10).
    Rng pick(303);
    const double eps = 1e-5;
    int checked = 0, meaningful = 0;
    double max_rel = 0.0;
    for (int probe_i = 0; probe_i < 120; ++probe_i) {
        size_t ti = pick.uniform_int(probe_tensors.size());
        std::vector<double>& tensor = *probe_tensors[ti];
        size_t ci = pick.uniform_int(tensor.size());
        double saved = tensor[ci];
        tensor[ci] = saved + eps;
        double up = compute_grpo_loss(probe, reference, groups, cfg, nullptr).loss;
        tensor[ci] = saved - eps;
        double down = compute_grpo_loss(probe, reference, groups, cfg, nullptr).loss;
        tensor[ci] = saved;
        double fd = (up - down) / (2.0 * eps);
        double an = (*grad_tensors[ti])[ci];
        CHECK(std::abs(fd - an) < 1e-9 + 1e-4 * std::max(std::abs(fd), std::abs(an)));
        if (std::abs(an) > 1e-4) {
            max_rel = std::max(max_rel, std::abs(fd - an) / std::abs(an));
            meaningful++;
        }
        checked++;
    }
    CHECK(checked == 120);
    CHECK(meaningful > 10);
    CHECK(max_rel < 1e-4);
}

TEST_CASE("on-policy step equals the plain policy gradient") {
    Fixture& f = fixture();
    RLConfig cfg;
    cfg.group_size = 4;
    cfg.kl_beta = 0.0;
    Rng rng(77);
    RolloutGroup g = rollout_group(f.policy, f.policy, f.world, f.vocab, f.rm, f.rl_samples[3],
                                   RewardConfig{}, cfg, rng);
    std::vector<RolloutGroup> groups = {g};

    PolicyGrad grad = zero_grad(f.policy.config);
    StepDiagnostics diag = compute_grpo_loss(f.policy, f.policy, groups, cfg, &grad);
    CHECK(std::abs(diag.kl) <= 1e-10);
    CHECK(std::abs(diag.mean_ratio - 1.0) <= 1e-6);
    CHECK(diag.clip_fraction == 0.0);

    // Hand-assembled REINFORCE gradient: coefficient -A_i/G on each
    // generated position's log-probability.
    PolicyGrad expected = zero_grad(f.policy.config);
    int prefix_len = static_cast<int>(g.context_prefix.size());
    for (size_t i = 0; i < g.outputs.size(); ++i) {
        std::vector<int> tokens = g.context_prefix;
        tokens.insert(tokens.end(), g.outputs[i].begin(), g.outputs[i].end());
        ForwardCache cache;
        forward_hidden(f.policy, tokens, cache);
        std::vector<int> positions;
        std::vector<std::vector<double>> dlogits;
        double coeff = -g.advantages[i] / static_cast<double>(g.outputs.size());
        for (size_t t = static_cast<size_t>(prefix_len); t < tokens.size(); ++t) {
            std::vector<double> logits = logits_at(f.policy, cache, static_cast<int>(t) - 1);
            double m = *std::max_element(logits.begin(), logits.end());
            double lse = 0.0;
            for (double l : logits) lse += std::exp(l - m);
            lse = m + std::log(lse);
            std::vector<double> dl(logits.size());
            for (size_t k = 0; k < logits.size(); ++k) {
                double p = std::exp(logits[k] - lse);
                dl[k] = coeff * ((static_cast<int>(k) == tokens[t] ? 1.0 : 0.0) - p);
            }
            positions.push_back(static_cast<int>(t) - 1);
            dlogits.push_back(std::move(dl));
        }
        backward_from_logit_grads(f.policy, cache, positions, dlogits, expected);
    }
    CHECK(grads_equal(grad, expected));
}

TEST_CASE("null advantages and zero beta leave the policy untouched") {
    Fixture& f = fixture();
    RLConfig cfg;
    cfg.group_size = 3;
    cfg.kl_beta = 0.0;
    cfg.learning_rate = 0.5;
    RolloutGroup g = synthetic_group(f.policy, f.policy, f.rl_samples[4], f.vocab,
                                     {2.0, 2.0, 2.0}, 99);
    for (double a : g.advantages) CHECK(a == 0.0);

    PolicyParams before = f.policy;
    PolicyParams stepped = f.policy;
    StepDiagnostics diag = grpo_step(stepped, f.policy, {g}, cfg);
    CHECK(params_equal(stepped, before));
    CHECK(diag.surrogate_loss == 0.0);
}

TEST_CASE("rl training isolates splits, freezes the reference, and logs") {
    Fixture& f = fixture();
    RLConfig cfg;
    cfg.group_size = 4;
    cfg.n_prompts_per_step = 4;
    cfg.epochs = 1;
    cfg.learning_rate = 0.02;

    std::vector<UQ2ISample> prompts(f.rl_samples.begin(), f.rl_samples.begin() + 8);

    // Contamination: an sft-split user in the rl dataset aborts.
    std::vector<UQ2ISample> dirty = prompts;
    dirty[0].user_id = f.splits.sft_users[0];
    CHECK_THROWS_AS(rl_train(f.policy, f.policy, f.world, f.vocab, f.rm, dirty, f.splits,
                             RewardConfig{}, cfg, 1),
                    InputError);

    PolicyParams ref_copy = f.policy;
    RLResult result = rl_train(f.policy, f.policy, f.world, f.vocab, f.rm, prompts, f.splits,
                               RewardConfig{}, cfg, 1);
    CHECK(result.trace.size() == 2);  // 8 prompts / 4 per step
    CHECK(params_equal(ref_copy, f.policy));  // reference untouched
    for (size_t i = 0; i < result.trace.size(); ++i) {
        CHECK(result.trace[i].step == static_cast<int>(i));
        CHECK(std::isfinite(result.trace[i].loss));
        CHECK(result.trace[i].kl >= 0.0);
    }
    // First step runs against an identical reference: ratios are one.
    CHECK(std::abs(result.trace[0].mean_ratio - 1.0) <= 1e-6);

    fs::path path = fs::temp_directory_path() / "minstrel_rl_log_test.jsonl";
    save_rl_log(result.trace, path);
    std::vector<json> rows = read_jsonl(path);
    REQUIRE(rows.size() == result.trace.size() + 1);
    CHECK(rows[0]["kind"] == "rl_log");
    CHECK(rows[1]["kind"] == "rl_step");
    CHECK(rows[1].contains("mean_reward"));
    fs::remove(path);

    // Determinism: matched seeds reproduce the trace.
    RLResult again = rl_train(f.policy, f.policy, f.world, f.vocab, f.rm, prompts, f.splits,
                              RewardConfig{}, cfg, 1);
    REQUIRE(again.trace.size() == result.trace.size());
    for (size_t i = 0; i < again.trace.size(); ++i) {
        CHECK(again.trace[i].to_json() == result.trace[i].to_json());
    }
    CHECK(params_equal(again.params, result.params));
}

TEST_CASE("a large KL penalty keeps the policy near the reference") {
    Fixture& f = fixture();
    RLConfig free_cfg;
    free_cfg.group_size = 4;
    free_cfg.n_prompts_per_step = 4;
    free_cfg.epochs = 3;
    free_cfg.learning_rate = 0.1;
    free_cfg.kl_beta = 0.0;
    RLConfig tight_cfg = free_cfg;
    tight_cfg.kl_beta = 1000.0;

    std::vector<UQ2ISample> prompts(f.rl_samples.begin(), f.rl_samples.begin() + 8);
    RLResult free_run = rl_train(f.policy, f.policy, f.world, f.vocab, f.rm, prompts, f.splits,
                                 RewardConfig{}, free_cfg, 5);
    RLResult tight_run = rl_train(f.policy, f.policy, f.world, f.vocab, f.rm, prompts, f.splits,
                                  RewardConfig{}, tight_cfg, 5);

    CHECK(free_run.trace.back().kl > tight_run.trace.back().kl);
}
