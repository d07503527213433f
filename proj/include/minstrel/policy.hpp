#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "minstrel/corpus.hpp"
#include "minstrel/rng.hpp"

namespace minstrel {

// One causal self-attention block + feed-forward, residual connections, tied
// input/output embeddings, no normalization layers, no biases. Small enough
// that exact double-precision gradients are cheap to verify against finite
// differences.
struct PolicyConfig {
    int vocab_size = 0;
    int d_model = 32;
    int context_length = kMaxSequenceTokens;

    int d_ff() const { return 4 * d_model; }
    void validate() const;
};

struct PolicyParams {
    PolicyConfig config;
    std::vector<double> tok_emb;  // V x d, rows are token vectors; also the output head
    std::vector<double> pos_emb;  // L x d
    std::vector<double> wq, wk, wv, wo;  // d x d, row-major: out[r] = sum_c W[r*d+c] in[c]
    std::vector<double> w1;       // 4d x d
    std::vector<double> w2;       // d x 4d

    static PolicyParams zeros(const PolicyConfig& config);
    static PolicyParams init(const PolicyConfig& config, Rng& rng, double scale = 0.3);

    size_t n_params() const;
    bool all_finite() const;

    // Visits tensors in a fixed order; the basis for checkpoints, gradient
    // flattening, and finite-difference indexing.
    template <typename F>
    void for_each_tensor(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        f("wq", wq);
        f("wk", wk);
        f("wv", wv);
        f("wo", wo);
        f("w1", w1);
        f("w2", w2);
    }
    template <typename F>
    void for_each_tensor(F&& f) const {
        const_cast<PolicyParams*>(this)->for_each_tensor(
            [&](const char* name, std::vector<double>& t) {
                f(name, static_cast<const std::vector<double>&>(t));
            });
    }
};

// Gradient accumulator with the same shapes as PolicyParams.
struct PolicyGrad {
    explicit PolicyGrad(const PolicyConfig& config);
    void zero();
    double global_norm() const;
    void add_scaled_to(PolicyParams& params, double factor) const;  // params += factor * grad
    void accumulate(const PolicyGrad& other);

    std::vector<double> tok_emb, pos_emb, wq, wk, wv, wo, w1, w2;
};

struct TrainConfig {
    double learning_rate = 3e-2;
    int batch_size = 16;
    int epochs = 2;
    int context_length = kMaxSequenceTokens;
    double temperature = 1.0;
    double grad_clip = 1.0;

    void validate() const;
};

// Intermediate activations kept for the backward pass.
struct ForwardCache {
    int n = 0;
    std::vector<int> tokens;
    std::vector<double> x0, q, k, v, ctx, x1, hpre, h, x2;  // n x d (hpre/h: n x 4d)
    std::vector<double> att;                                // n x n, causal rows
};

// Runs the network over the token prefix; logits are computed lazily per
// position via logits_at, since only a few positions are usually scored.
void forward_hidden(const PolicyParams& params, std::span<const int> tokens, ForwardCache& cache);

// Logits over the vocabulary from the hidden state at position pos
// (predicting the token at pos + 1).
std::vector<double> logits_at(const PolicyParams& params, const ForwardCache& cache, int pos);

// Backward pass from caller-supplied logit gradients at the listed positions.
// Accumulates into grad (does not zero it). This is the single gradient
// engine: cross-entropy training and the RL objective both feed it.
void backward_from_logit_grads(const PolicyParams& params, const ForwardCache& cache,
                               std::span<const int> positions,
                               const std::vector<std::vector<double>>& dlogits, PolicyGrad& grad);

// Sum of log p(token_j | prefix) over masked positions, plus the per-position
// values in sequence order.
std::pair<double, std::vector<double>> evaluate_logprob(const PolicyParams& params,
                                                        const MaskedSequence& seq);

// Mean masked cross-entropy of the batch and its gradient. Returns
// (loss, total masked positions).
std::pair<double, int64_t> batch_loss_and_grad(const PolicyParams& params,
                                               std::span<const MaskedSequence> batch,
                                               PolicyGrad& grad);

// One clipped gradient-descent step on the batch; returns the mean loss.
double train_step(PolicyParams& params, std::span<const MaskedSequence> batch,
                  const TrainConfig& config);

// Central finite differences on >= n_probes randomly chosen coordinates;
// returns the max relative error against the analytic gradient.
double check_gradients(const PolicyParams& params, const MaskedSequence& seq, double epsilon,
                       int n_probes = 200, uint64_t probe_seed = 17);

enum class Schedule { curriculum, mixed };
const char* to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);

// Shuffled minibatch epochs over the sequence set; returns per-epoch mean loss.
std::vector<double> train_epochs(PolicyParams& params,
                                 const std::vector<MaskedSequence>& sequences,
                                 const TrainConfig& config, Rng& rng);

// Curriculum: stages in the given order, each for config.epochs. Mixed: one
// pool, same total step count. Stage order must follow the curriculum and,
// for the mixed schedule, all three stages must be present.
PolicyParams pretrain(PolicyParams params, const std::vector<CorpusStage>& stages,
                      Schedule schedule, const TrainConfig& config, uint64_t seed);

// Masked cross-entropy training for instruction samples (the mask covers the
// output list region; the encoder owns that contract).
PolicyParams sft(PolicyParams params, const std::vector<MaskedSequence>& samples,
                 const TrainConfig& config, uint64_t seed);

// Ancestral sampling; temperature <= 0 decodes greedily. Stops after EOS or
// max_new tokens, returning only the newly generated tokens.
std::vector<int> sample(const PolicyParams& params, std::span<const int> prefix, int max_new,
                        double temperature, Rng& rng);

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path);
PolicyParams load_checkpoint(const std::filesystem::path& path);

}  // namespace minstrel
