#include "minstrel/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "minstrel/errors.hpp"
#include "minstrel/util.hpp"

namespace minstrel {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// Smooth tanh approximation; finite-difference checks rely on smoothness.
inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double logsumexp(std::span<const double> v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

}  // namespace

void PolicyConfig::validate() const {
    if (vocab_size <= 0) throw ConfigError("policy: vocab_size must be positive");
    if (d_model <= 0) throw ConfigError("policy: d_model must be positive");
    if (context_length < 2 || context_length > kMaxSequenceTokens)
        throw ConfigError("policy: context_length out of range");
}

void TrainConfig::validate() const {
    // Zero is allowed so a null update stays expressible; negative rates are not.
    if (learning_rate < 0) throw ConfigError("train: learning_rate must be nonnegative");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (context_length < 2 || context_length > kMaxSequenceTokens)
        throw ConfigError("train: context_length out of range");
    if (grad_clip <= 0) throw ConfigError("train: grad_clip must be positive");
}

PolicyParams PolicyParams::zeros(const PolicyConfig& config) {
    config.validate();
    PolicyParams p;
    p.config = config;
    const size_t d = static_cast<size_t>(config.d_model);
    p.tok_emb.assign(static_cast<size_t>(config.vocab_size) * d, 0.0);
    p.pos_emb.assign(static_cast<size_t>(config.context_length) * d, 0.0);
    p.wq.assign(d * d, 0.0);
    p.wk.assign(d * d, 0.0);
    p.wv.assign(d * d, 0.0);
    p.wo.assign(d * d, 0.0);
    p.w1.assign(4 * d * d, 0.0);
    p.w2.assign(d * 4 * d, 0.0);
    return p;
}

PolicyParams PolicyParams::init(const PolicyConfig& config, Rng& rng, double scale) {
    PolicyParams p = zeros(config);
    p.for_each_tensor([&](const char*, std::vector<double>& t) {
        for (auto& x : t) x = rng.normal(0.0, scale);
    });
    return p;
}

size_t PolicyParams::n_params() const {
    size_t n = 0;
    for_each_tensor([&](const char*, const std::vector<double>& t) { n += t.size(); });
    return n;
}

bool PolicyParams::all_finite() const {
    bool ok = true;
    for_each_tensor([&](const char*, const std::vector<double>& t) {
        for (double x : t)
            if (!std::isfinite(x)) ok = false;
    });
    return ok;
}

PolicyGrad::PolicyGrad(const PolicyConfig& config) {
    const size_t d = static_cast<size_t>(config.d_model);
    tok_emb.assign(static_cast<size_t>(config.vocab_size) * d, 0.0);
    pos_emb.assign(static_cast<size_t>(config.context_length) * d, 0.0);
    wq.assign(d * d, 0.0);
    wk.assign(d * d, 0.0);
    wv.assign(d * d, 0.0);
    wo.assign(d * d, 0.0);
    w1.assign(4 * d * d, 0.0);
    w2.assign(d * 4 * d, 0.0);
}

namespace {
template <typename F>
void grad_tensors(PolicyGrad& g, F&& f) {
    f(g.tok_emb);
    f(g.pos_emb);
    f(g.wq);
    f(g.wk);
    f(g.wv);
    f(g.wo);
    f(g.w1);
    f(g.w2);
}
}  // namespace

void PolicyGrad::zero() {
    grad_tensors(*this, [](std::vector<double>& t) { std::fill(t.begin(), t.end(), 0.0); });
}

double PolicyGrad::global_norm() const {
    double s = 0.0;
    grad_tensors(const_cast<PolicyGrad&>(*this), [&](std::vector<double>& t) {
        for (double x : t) s += x * x;
    });
    return std::sqrt(s);
}

void PolicyGrad::add_scaled_to(PolicyParams& params, double factor) const {
    auto axpy = [factor](const std::vector<double>& g, std::vector<double>& p) {
        for (size_t i = 0; i < g.size(); ++i) p[i] += factor * g[i];
    };
    axpy(tok_emb, params.tok_emb);
    axpy(pos_emb, params.pos_emb);
    axpy(wq, params.wq);
    axpy(wk, params.wk);
    axpy(wv, params.wv);
    axpy(wo, params.wo);
    axpy(w1, params.w1);
    axpy(w2, params.w2);
}

void PolicyGrad::accumulate(const PolicyGrad& other) {
    auto add = [](std::vector<double>& a, const std::vector<double>& b) {
        for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    add(tok_emb, other.tok_emb);
    add(pos_emb, other.pos_emb);
    add(wq, other.wq);
    add(wk, other.wk);
    add(wv, other.wv);
    add(wo, other.wo);
    add(w1, other.w1);
    add(w2, other.w2);
}

void forward_hidden(const PolicyParams& params, std::span<const int> tokens, ForwardCache& cache) {
    const int n = static_cast<int>(tokens.size());
    const int d = params.config.d_model;
    const int F = params.config.d_ff();
    if (n < 1) throw InputError("forward: empty token sequence");
    if (n > params.config.context_length) throw InputError("forward: sequence exceeds context");
    for (int t : tokens)
        if (t < 0 || t >= params.config.vocab_size)
            throw InputError("forward: token out of vocabulary: " + std::to_string(t));

    cache.n = n;
    cache.tokens.assign(tokens.begin(), tokens.end());
    const size_t nd = static_cast<size_t>(n) * d;
    cache.x0.assign(nd, 0.0);
    cache.q.assign(nd, 0.0);
    cache.k.assign(nd, 0.0);
    cache.v.assign(nd, 0.0);
    cache.ctx.assign(nd, 0.0);
    cache.x1.assign(nd, 0.0);
    cache.x2.assign(nd, 0.0);
    cache.hpre.assign(static_cast<size_t>(n) * F, 0.0);
    cache.h.assign(static_cast<size_t>(n) * F, 0.0);
    cache.att.assign(static_cast<size_t>(n) * n, 0.0);

    for (int j = 0; j < n; ++j) {
        const double* e = &params.tok_emb[static_cast<size_t>(tokens[j]) * d];
        const double* pe = &params.pos_emb[static_cast<size_t>(j) * d];
        double* x = &cache.x0[static_cast<size_t>(j) * d];
        for (int c = 0; c < d; ++c) x[c] = e[c] + pe[c];
    }

    auto project = [&](const std::vector<double>& w, std::vector<double>& out) {
        for (int j = 0; j < n; ++j) {
            const double* x = &cache.x0[static_cast<size_t>(j) * d];
            double* o = &out[static_cast<size_t>(j) * d];
            for (int r = 0; r < d; ++r) {
                const double* wr = &w[static_cast<size_t>(r) * d];
                double s = 0.0;
                for (int c = 0; c < d; ++c) s += wr[c] * x[c];
                o[r] = s;
            }
        }
    };
    project(params.wq, cache.q);
    project(params.wk, cache.k);
    project(params.wv, cache.v);

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> row(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        const double* qj = &cache.q[static_cast<size_t>(j) * d];
        double mx = -1e300;
        for (int i = 0; i <= j; ++i) {
            const double* ki = &cache.k[static_cast<size_t>(i) * d];
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += qj[c] * ki[c];
            row[static_cast<size_t>(i)] = s * inv_sqrt_d;
            mx = std::max(mx, row[static_cast<size_t>(i)]);
        }
        double z = 0.0;
        for (int i = 0; i <= j; ++i) {
            row[static_cast<size_t>(i)] = std::exp(row[static_cast<size_t>(i)] - mx);
            z += row[static_cast<size_t>(i)];
        }
        double* aj = &cache.att[static_cast<size_t>(j) * n];
        double* cj = &cache.ctx[static_cast<size_t>(j) * d];
        for (int i = 0; i <= j; ++i) {
            const double a = row[static_cast<size_t>(i)] / z;
            aj[i] = a;
            const double* vi = &cache.v[static_cast<size_t>(i) * d];
            for (int c = 0; c < d; ++c) cj[c] += a * vi[c];
        }
    }

    for (int j = 0; j < n; ++j) {
        const double* cj = &cache.ctx[static_cast<size_t>(j) * d];
        const double* x0j = &cache.x0[static_cast<size_t>(j) * d];
        double* x1j = &cache.x1[static_cast<size_t>(j) * d];
        for (int r = 0; r < d; ++r) {
            const double* wr = &params.wo[static_cast<size_t>(r) * d];
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += wr[c] * cj[c];
            x1j[r] = x0j[r] + s;
        }
    }

    for (int j = 0; j < n; ++j) {
        const double* x1j = &cache.x1[static_cast<size_t>(j) * d];
        double* hp = &cache.hpre[static_cast<size_t>(j) * F];
        double* hh = &cache.h[static_cast<size_t>(j) * F];
        for (int u = 0; u < F; ++u) {
            const double* wu = &params.w1[static_cast<size_t>(u) * d];
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += wu[c] * x1j[c];
            hp[u] = s;
            hh[u] = gelu(s);
        }
        double* x2j = &cache.x2[static_cast<size_t>(j) * d];
        for (int c = 0; c < d; ++c) {
            const double* wc = &params.w2[static_cast<size_t>(c) * F];
            double s = 0.0;
            for (int u = 0; u < F; ++u) s += wc[u] * hh[u];
            x2j[c] = x1j[c] + s;
        }
    }
}

std::vector<double> logits_at(const PolicyParams& params, const ForwardCache& cache, int pos) {
    if (pos < 0 || pos >= cache.n) throw InputError("logits_at: position out of range");
    const int d = params.config.d_model;
    const int V = params.config.vocab_size;
    std::vector<double> logits(static_cast<size_t>(V));
    const double* x = &cache.x2[static_cast<size_t>(pos) * d];
    for (int v = 0; v < V; ++v) {
        const double* e = &params.tok_emb[static_cast<size_t>(v) * d];
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += e[c] * x[c];
        logits[static_cast<size_t>(v)] = s;
    }
    return logits;
}

void backward_from_logit_grads(const PolicyParams& params, const ForwardCache& cache,
                               std::span<const int> positions,
                               const std::vector<std::vector<double>>& dlogits, PolicyGrad& grad) {
    const int n = cache.n;
    const int d = params.config.d_model;
    const int F = params.config.d_ff();
    if (positions.size() != dlogits.size())
        throw InputError("backward: positions/dlogits size mismatch");

    const size_t nd = static_cast<size_t>(n) * d;
    std::vector<double> dx2(nd, 0.0);
    std::vector<uint8_t> active(static_cast<size_t>(n), 0);

    // Output head: logits[pos] = tok_emb . x2[pos], tied embeddings.
    for (size_t pi = 0; pi < positions.size(); ++pi) {
        const int pos = positions[pi];
        if (pos < 0 || pos >= n) throw InputError("backward: position out of range");
        active[static_cast<size_t>(pos)] = 1;
        const auto& dl = dlogits[pi];
        if (static_cast<int>(dl.size()) != params.config.vocab_size)
            throw InputError("backward: dlogits row has wrong width");
        const double* x2p = &cache.x2[static_cast<size_t>(pos) * d];
        double* dx2p = &dx2[static_cast<size_t>(pos) * d];
        for (int v = 0; v < params.config.vocab_size; ++v) {
            const double g = dl[static_cast<size_t>(v)];
            if (g == 0.0) continue;
            double* ge = &grad.tok_emb[static_cast<size_t>(v) * d];
            const double* e = &params.tok_emb[static_cast<size_t>(v) * d];
            for (int c = 0; c < d; ++c) {
                ge[c] += g * x2p[c];
                dx2p[c] += g * e[c];
            }
        }
    }

    // Feed-forward block; only rows hit by the head carry gradient here.
    std::vector<double> dx1 = dx2;
    std::vector<double> dh(static_cast<size_t>(F));
    for (int j = 0; j < n; ++j) {
        if (!active[static_cast<size_t>(j)]) continue;
        const double* dfo = &dx2[static_cast<size_t>(j) * d];
        const double* hj = &cache.h[static_cast<size_t>(j) * F];
        const double* hpj = &cache.hpre[static_cast<size_t>(j) * F];
        const double* x1j = &cache.x1[static_cast<size_t>(j) * d];
        std::fill(dh.begin(), dh.end(), 0.0);
        for (int c = 0; c < d; ++c) {
            const double g = dfo[c];
            if (g == 0.0) continue;
            double* gw2 = &grad.w2[static_cast<size_t>(c) * F];
            const double* w2c = &params.w2[static_cast<size_t>(c) * F];
            for (int u = 0; u < F; ++u) {
                gw2[u] += g * hj[u];
                dh[static_cast<size_t>(u)] += g * w2c[u];
            }
        }
        double* dx1j = &dx1[static_cast<size_t>(j) * d];
        for (int u = 0; u < F; ++u) {
            const double dhp = dh[static_cast<size_t>(u)] * gelu_grad(hpj[u]);
            if (dhp == 0.0) continue;
            double* gw1 = &grad.w1[static_cast<size_t>(u) * d];
            const double* w1u = &params.w1[static_cast<size_t>(u) * d];
            for (int c = 0; c < d; ++c) {
                gw1[c] += dhp * x1j[c];
                dx1j[c] += dhp * w1u[c];
            }
        }
    }

    // Attention block.
    std::vector<double> dx0 = dx1;
    std::vector<double> dctx(nd, 0.0), dq(nd, 0.0), dk(nd, 0.0), dv(nd, 0.0);
    for (int j = 0; j < n; ++j) {
        const double* dao = &dx1[static_cast<size_t>(j) * d];
        bool any = false;
        for (int r = 0; r < d; ++r)
            if (dao[r] != 0.0) any = true;
        if (!any) continue;
        const double* cj = &cache.ctx[static_cast<size_t>(j) * d];
        double* dcj = &dctx[static_cast<size_t>(j) * d];
        for (int r = 0; r < d; ++r) {
            const double g = dao[r];
            if (g == 0.0) continue;
            double* gwo = &grad.wo[static_cast<size_t>(r) * d];
            const double* wor = &params.wo[static_cast<size_t>(r) * d];
            for (int c = 0; c < d; ++c) {
                gwo[c] += g * cj[c];
                dcj[c] += g * wor[c];
            }
        }
    }

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> da(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
        const double* dcj = &dctx[static_cast<size_t>(j) * d];
        bool any = false;
        for (int c = 0; c < d; ++c)
            if (dcj[c] != 0.0) any = true;
        if (!any) continue;
        const double* aj = &cache.att[static_cast<size_t>(j) * n];
        double dsum = 0.0;
        for (int i = 0; i <= j; ++i) {
            const double* vi = &cache.v[static_cast<size_t>(i) * d];
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += dcj[c] * vi[c];
            da[static_cast<size_t>(i)] = s;
            dsum += aj[i] * s;
            double* dvi = &dv[static_cast<size_t>(i) * d];
            for (int c = 0; c < d; ++c) dvi[c] += aj[i] * dcj[c];
        }
        const double* qj = &cache.q[static_cast<size_t>(j) * d];
        double* dqj = &dq[static_cast<size_t>(j) * d];
        for (int i = 0; i <= j; ++i) {
            const double ds = aj[i] * (da[static_cast<size_t>(i)] - dsum) * inv_sqrt_d;
            if (ds == 0.0) continue;
            const double* ki = &cache.k[static_cast<size_t>(i) * d];
            double* dki = &dk[static_cast<size_t>(i) * d];
            for (int c = 0; c < d; ++c) {
                dqj[c] += ds * ki[c];
                dki[c] += ds * qj[c];
            }
        }
    }

    auto project_back = [&](const std::vector<double>& w, std::vector<double>& gw,
                            const std::vector<double>& dout) {
        for (int j = 0; j < n; ++j) {
            const double* doj = &dout[static_cast<size_t>(j) * d];
            bool any = false;
            for (int r = 0; r < d; ++r)
                if (doj[r] != 0.0) any = true;
            if (!any) continue;
            const double* x0j = &cache.x0[static_cast<size_t>(j) * d];
            double* dx0j = &dx0[static_cast<size_t>(j) * d];
            for (int r = 0; r < d; ++r) {
                const double g = doj[r];
                if (g == 0.0) continue;
                double* gwr = &gw[static_cast<size_t>(r) * d];
                const double* wr = &w[static_cast<size_t>(r) * d];
                for (int c = 0; c < d; ++c) {
                    gwr[c] += g * x0j[c];
                    dx0j[c] += g * wr[c];
                }
            }
        }
    };
    project_back(params.wq, grad.wq, dq);
    project_back(params.wk, grad.wk, dk);
    project_back(params.wv, grad.wv, dv);

    for (int j = 0; j < n; ++j) {
        const double* dx0j = &dx0[static_cast<size_t>(j) * d];
        double* ge = &grad.tok_emb[static_cast<size_t>(cache.tokens[static_cast<size_t>(j)]) * d];
        double* gp = &grad.pos_emb[static_cast<size_t>(j) * d];
        for (int c = 0; c < d; ++c) {
            ge[c] += dx0j[c];
            gp[c] += dx0j[c];
        }
    }
}

std::pair<double, std::vector<double>> evaluate_logprob(const PolicyParams& params,
                                                        const MaskedSequence& seq) {
    seq.validate();
    if (static_cast<int>(seq.tokens.size()) > params.config.context_length)
        throw InputError("evaluate_logprob: sequence exceeds context length");
    ForwardCache cache;
    forward_hidden(params, seq.tokens, cache);
    double total = 0.0;
    std::vector<double> per_position;
    for (size_t j = 1; j < seq.tokens.size(); ++j) {
        if (!seq.loss_mask[j]) continue;
        auto logits = logits_at(params, cache, static_cast<int>(j) - 1);
        const double lp = logits[static_cast<size_t>(seq.tokens[j])] - logsumexp(logits);
        if (!std::isfinite(lp)) throw NumericError("evaluate_logprob: non-finite log-probability");
        per_position.push_back(lp);
        total += lp;
    }
    return {total, per_position};
}

std::pair<double, int64_t> batch_loss_and_grad(const PolicyParams& params,
                                               std::span<const MaskedSequence> batch,
                                               PolicyGrad& grad) {
    if (batch.empty()) throw InputError("batch_loss_and_grad: empty batch");
    int64_t total_masked = 0;
    for (const auto& s : batch) total_masked += s.supervised_count();
    if (total_masked == 0) throw InputError("batch_loss_and_grad: nothing supervised");
    const double inv = 1.0 / static_cast<double>(total_masked);

    double loss = 0.0;
    ForwardCache cache;
    for (const auto& seq : batch) {
        seq.validate();
        if (static_cast<int>(seq.tokens.size()) > params.config.context_length)
            throw InputError("train: sequence exceeds context length");
        forward_hidden(params, seq.tokens, cache);
        std::vector<int> positions;
        std::vector<std::vector<double>> dlogits;
        for (size_t j = 1; j < seq.tokens.size(); ++j) {
            if (!seq.loss_mask[j]) continue;
            auto logits = logits_at(params, cache, static_cast<int>(j) - 1);
            const double lse = logsumexp(logits);
            loss -= (logits[static_cast<size_t>(seq.tokens[j])] - lse) * inv;
            // d(-mean logp)/dlogit = (softmax - onehot) / total_masked
            auto& dl = logits;
            for (auto& x : dl) x = std::exp(x - lse) * inv;
            dl[static_cast<size_t>(seq.tokens[j])] -= inv;
            positions.push_back(static_cast<int>(j) - 1);
            dlogits.push_back(std::move(dl));
        }
        backward_from_logit_grads(params, cache, positions, dlogits, grad);
    }
    return {loss, total_masked};
}

double train_step(PolicyParams& params, std::span<const MaskedSequence> batch,
                  const TrainConfig& config) {
    config.validate();
    PolicyGrad grad(params.config);
    auto [loss, masked] = batch_loss_and_grad(params, batch, grad);
    (void)masked;
    if (!std::isfinite(loss)) throw NumericError("train_step: non-finite loss");
    const double norm = grad.global_norm();
    if (!std::isfinite(norm)) throw NumericError("train_step: non-finite gradient norm");
    const double scale = norm > config.grad_clip ? config.grad_clip / norm : 1.0;
    grad.add_scaled_to(params, -config.learning_rate * scale);
    return loss;
}

double check_gradients(const PolicyParams& params, const MaskedSequence& seq, double epsilon,
                       int n_probes, uint64_t probe_seed) {
    if (epsilon < 1e-6 || epsilon > 1e-3)
        throw InputError("check_gradients: epsilon out of [1e-6, 1e-3]");
    PolicyGrad grad(params.config);
    MaskedSequence one = seq;
    auto [loss0, masked] = batch_loss_and_grad(params, std::span(&one, 1), grad);
    (void)loss0;

    std::vector<std::vector<double>*> gtensors;
    grad_tensors(grad, [&](std::vector<double>& t) { gtensors.push_back(&t); });
    PolicyParams work = params;
    std::vector<std::vector<double>*> ptensors;
    work.for_each_tensor(
        [&](const char*, std::vector<double>& t) { ptensors.push_back(&t); });

    const size_t total = params.n_params();
    const double inv_masked = 1.0 / static_cast<double>(masked);
    auto loss_at = [&]() {
        auto [lp, per] = evaluate_logprob(work, one);
        (void)per;
        return -lp * inv_masked;
    };

    Rng rng(probe_seed);
    double max_rel = 0.0;
    for (int probe = 0; probe < n_probes; ++probe) {
        size_t flat = rng.uniform_int(total);
        size_t ti = 0;
        while (flat >= ptensors[ti]->size()) {
            flat -= ptensors[ti]->size();
            ++ti;
        }
        double& coord = (*ptensors[ti])[flat];
        const double saved = coord;
        coord = saved + epsilon;
        const double lp = loss_at();
        coord = saved - epsilon;
        const double lm = loss_at();
        coord = saved;
        const double fd = (lp - lm) / (2.0 * epsilon);
        const double an = (*gtensors[ti])[flat];
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

const char* to_string(Schedule s) { return s == Schedule::curriculum ? "curriculum" : "mixed"; }

Schedule schedule_from_string(const std::string& s) {
    if (s == "curriculum") return Schedule::curriculum;
    if (s == "mixed") return Schedule::mixed;
    throw ConfigError("unknown schedule: " + s);
}

std::vector<double> train_epochs(PolicyParams& params,
                                 const std::vector<MaskedSequence>& sequences,
                                 const TrainConfig& config, Rng& rng) {
    config.validate();
    if (sequences.empty()) throw InputError("train_epochs: no sequences");
    std::vector<size_t> order(sequences.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> epoch_losses;
    std::vector<MaskedSequence> batch;
    for (int e = 0; e < config.epochs; ++e) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        int64_t masked_sum = 0;
        for (size_t start = 0; start < order.size(); start += config.batch_size) {
            batch.clear();
            for (size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i)
                batch.push_back(sequences[order[i]]);
            int64_t batch_masked = 0;
            for (const auto& s : batch) batch_masked += s.supervised_count();
            const double loss = train_step(params, batch, config);
            loss_sum += loss * static_cast<double>(batch_masked);
            masked_sum += batch_masked;
        }
        epoch_losses.push_back(loss_sum / static_cast<double>(masked_sum));
    }
    return epoch_losses;
}

PolicyParams pretrain(PolicyParams params, const std::vector<CorpusStage>& stages,
                      Schedule schedule, const TrainConfig& config, uint64_t seed) {
    config.validate();
    if (stages.empty()) throw ConfigError("pretrain: no stages");
    for (size_t i = 1; i < stages.size(); ++i)
        if (static_cast<int>(stages[i].stage) <= static_cast<int>(stages[i - 1].stage))
            throw ConfigError("pretrain: stages out of curriculum order");
    if (schedule == Schedule::mixed && stages.size() != 3)
        throw ConfigError("pretrain: mixed schedule requires all three stages");
    for (const auto& s : stages)
        if (s.sequences.empty()) throw ConfigError("pretrain: empty stage");

    Rng root(seed);
    if (schedule == Schedule::curriculum) {
        for (const auto& stage : stages) {
            Rng r = root.substream("pretrain_stage", static_cast<uint64_t>(stage.stage));
            train_epochs(params, stage.sequences, config, r);
        }
        return params;
    }

    // Mixed: one pooled stream, exactly the curriculum's step count.
    int64_t total_steps = 0;
    std::vector<MaskedSequence> pool;
    for (const auto& stage : stages) {
        const auto n = static_cast<int64_t>(stage.sequences.size());
        total_steps += config.epochs * ((n + config.batch_size - 1) / config.batch_size);
        pool.insert(pool.end(), stage.sequences.begin(), stage.sequences.end());
    }
    Rng r = root.substream("pretrain_mixed");
    std::vector<size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<MaskedSequence> batch;
    int64_t steps = 0;
    while (steps < total_steps) {
        r.shuffle(order);
        for (size_t start = 0; start < order.size() && steps < total_steps;
             start += config.batch_size) {
            batch.clear();
            for (size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i)
                batch.push_back(pool[order[i]]);
            train_step(params, batch, config);
            ++steps;
        }
    }
    return params;
}

PolicyParams sft(PolicyParams params, const std::vector<MaskedSequence>& samples,
                 const TrainConfig& config, uint64_t seed) {
    if (samples.empty()) throw InputError("sft: no instruction samples");
    for (size_t i = 0; i < samples.size(); ++i) {
        try {
            samples[i].validate();
        } catch (const InputError& e) {
            throw InputError("sft: malformed sample " + std::to_string(i) + ": " + e.what());
        }
    }
    Rng r = Rng(seed).substream("sft");
    train_epochs(params, samples, config, r);
    return params;
}

std::vector<int> sample(const PolicyParams& params, std::span<const int> prefix, int max_new,
                        double temperature, Rng& rng) {
    if (prefix.empty()) throw InputError("sample: empty prefix");
    if (static_cast<int>(prefix.size()) + max_new > params.config.context_length)
        throw InputError("sample: prefix plus max_new exceeds context length");
    std::vector<int> tokens(prefix.begin(), prefix.end());
    std::vector<int> generated;
    ForwardCache cache;
    for (int step = 0; step < max_new; ++step) {
        forward_hidden(params, tokens, cache);
        auto logits = logits_at(params, cache, cache.n - 1);
        const int next = static_cast<int>(rng.categorical_logits(logits, temperature));
        tokens.push_back(next);
        generated.push_back(next);
        if (next == Vocabulary::kEos) break;
    }
    return generated;
}

void save_checkpoint(const PolicyParams& params, const std::filesystem::path& path) {
    json header;
    header["format"] = "minstrel-policy";
    header["version"] = 1;
    header["vocab_size"] = params.config.vocab_size;
    header["d_model"] = params.config.d_model;
    header["context_length"] = params.config.context_length;
    json tensors = json::array();
    params.for_each_tensor([&](const char* name, const std::vector<double>& t) {
        tensors.push_back(json{{"name", name}, {"size", t.size()}});
    });
    header["tensors"] = tensors;
    const std::string head = header.dump();

    std::string blob;
    blob.reserve(16 + head.size() + params.n_params() * sizeof(double));
    blob += "MNSTRLP1";
    const uint64_t head_len = head.size();
    blob.append(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
    blob += head;
    params.for_each_tensor([&](const char*, const std::vector<double>& t) {
        blob.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
    });
    write_file(path, blob);
}

PolicyParams load_checkpoint(const std::filesystem::path& path) {
    const std::string blob = read_file(path);
    if (blob.size() < 16 || blob.compare(0, 8, "MNSTRLP1") != 0)
        throw InputError("checkpoint: bad magic in " + path.string());
    uint64_t head_len = 0;
    std::memcpy(&head_len, blob.data() + 8, sizeof(head_len));
    if (16 + head_len > blob.size()) throw InputError("checkpoint: truncated header");
    const json header = json::parse(blob.substr(16, head_len));
    PolicyConfig cfg;
    cfg.vocab_size = header.at("vocab_size");
    cfg.d_model = header.at("d_model");
    cfg.context_length = header.at("context_length");
    PolicyParams params = PolicyParams::zeros(cfg);

    size_t offset = 16 + head_len;
    size_t ti = 0;
    const auto& tensors = header.at("tensors");
    bool ok = true;
    params.for_each_tensor([&](const char* name, std::vector<double>& t) {
        if (ti >= tensors.size() || tensors[ti].at("name") != name ||
            tensors[ti].at("size") != t.size())
            ok = false;
        if (!ok) return;
        const size_t bytes = t.size() * sizeof(double);
        if (offset + bytes > blob.size()) {
            ok = false;
            return;
        }
        std::memcpy(t.data(), blob.data() + offset, bytes);
        offset += bytes;
        ++ti;
    });
    if (!ok || offset != blob.size())
        throw InputError("checkpoint: layout mismatch in " + path.string());
    return params;
}

}  // namespace minstrel
