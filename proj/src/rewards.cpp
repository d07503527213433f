#include "minstrel/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "minstrel/errors.hpp"

namespace minstrel {

namespace {

constexpr double kRateSmoothing = 1.0;
constexpr double kLearningRate = 0.5;
constexpr double kLossTolerance = 1e-6;
constexpr int kMaxEpochs = 500;
constexpr int64_t kMinExamples = 1000;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

std::vector<double> PersonalizationRM::features(const World& world, int user_id, const Song& song,
                                                int state, bool use_state) const {
    // Layout: per-tag interaction rates, then aggregate mean rate, genre
    // rate, pooled song rate, log popularity, state match.
    std::vector<double> x(static_cast<size_t>(n_tags_) + 5, 0.0);
    bool known_user = user_id >= 0 && user_id < static_cast<int>(user_tag_rate_.size()) &&
                      !user_tag_rate_[static_cast<size_t>(user_id)].empty();
    const std::vector<double>& rate =
        known_user ? user_tag_rate_[static_cast<size_t>(user_id)] : global_tag_rate_;
    double inv = song.tags.empty() ? 0.0 : 1.0 / static_cast<double>(song.tags.size());
    double mean_rate = 0.0;
    for (int t : song.tags) {
        double r = rate[static_cast<size_t>(t)];
        x[static_cast<size_t>(t)] = r * inv;
        mean_rate += r * inv;
    }
    size_t i = static_cast<size_t>(n_tags_);
    x[i++] = mean_rate;
    x[i++] = known_user && song.genre >= 0 && song.genre < n_genres_
                 ? user_genre_rate_[static_cast<size_t>(user_id)][static_cast<size_t>(song.genre)]
                 : global_rate_;
    x[i++] = song.song_id >= 0 && song.song_id < static_cast<int>(song_rate_.size())
                 ? song_rate_[static_cast<size_t>(song.song_id)]
                 : global_rate_;
    x[i++] = std::log1p(song.popularity);
    // Holding the raw state feature at its training mean makes its
    // standardized value zero, so state-free scores ignore the state weight.
    x[i] = use_state ? state_tag_match(world, state, song) : feat_mean_[i];
    return x;
}

double PersonalizationRM::raw_score(const std::vector<double>& feats) const {
    double z = bias_;
    for (size_t i = 0; i < feats.size(); ++i) {
        z += weights_[i] * (feats[i] - feat_mean_[i]) / feat_std_[i];
    }
    return z;
}

double PersonalizationRM::score(const World& world, int user_id, const Song& song) const {
    return 10.0 * sigmoid(raw_score(features(world, user_id, song, 0, false)));
}

double PersonalizationRM::score(const World& world, int user_id, const Song& song,
                                int state) const {
    return 10.0 * sigmoid(raw_score(features(world, user_id, song, state, true)));
}

PersonalizationRM train_personalization_rm(const World& world,
                                           const std::vector<RMExample>& examples) {
    if (static_cast<int64_t>(examples.size()) < kMinExamples) {
        throw InputError("personalization reward model needs at least 1000 examples, got " +
                         std::to_string(examples.size()));
    }
    int64_t n_pos = 0;
    for (const RMExample& e : examples) n_pos += e.feedback == FeedbackLabel::like ? 1 : 0;
    if (n_pos == 0 || n_pos == static_cast<int64_t>(examples.size())) {
        throw InputError("personalization reward model training set has a single class");
    }

    PersonalizationRM rm;
    int n_tags = world.config.tag_lexicon_size;
    int n_genres = world.config.n_genres;
    rm.n_tags_ = n_tags;
    rm.n_genres_ = n_genres;
    rm.trained_on_ = static_cast<int64_t>(examples.size());

    // Empirical preference rates from graded feedback (dislike is stronger
    // negative evidence than skip), shrunk toward the pooled rate. Users with
    // no history fall back to the pooled table.
    auto graded = [](FeedbackLabel f) {
        switch (f) {
            case FeedbackLabel::like: return 1.0;
            case FeedbackLabel::skip: return 0.4;
            case FeedbackLabel::dislike: return 0.0;
        }
        return 0.0;
    };
    size_t nu = world.users.size();
    size_t nt = static_cast<size_t>(n_tags);
    size_t ng = static_cast<size_t>(n_genres);
    size_t ns = world.catalog.size();
    std::vector<std::vector<double>> tag_sum(nu, std::vector<double>(nt, 0.0));
    std::vector<std::vector<double>> tag_n(nu, std::vector<double>(nt, 0.0));
    std::vector<std::vector<double>> genre_sum(nu, std::vector<double>(ng, 0.0));
    std::vector<std::vector<double>> genre_n(nu, std::vector<double>(ng, 0.0));
    std::vector<double> song_sum(ns, 0.0), song_n(ns, 0.0);
    std::vector<double> g_sum(nt, 0.0), g_n(nt, 0.0);
    double all_sum = 0.0;
    for (const RMExample& e : examples) {
        if (e.user_id < 0 || e.user_id >= static_cast<int>(nu)) {
            throw InputError("reward model example references unknown user " +
                             std::to_string(e.user_id));
        }
        const Song& song = world.song(e.song_id);
        size_t u = static_cast<size_t>(e.user_id);
        double y = graded(e.feedback);
        all_sum += y;
        for (int t : song.tags) {
            tag_sum[u][static_cast<size_t>(t)] += y;
            tag_n[u][static_cast<size_t>(t)] += 1.0;
            g_sum[static_cast<size_t>(t)] += y;
            g_n[static_cast<size_t>(t)] += 1.0;
        }
        if (song.genre >= 0 && song.genre < n_genres) {
            genre_sum[u][static_cast<size_t>(song.genre)] += y;
            genre_n[u][static_cast<size_t>(song.genre)] += 1.0;
        }
        song_sum[static_cast<size_t>(e.song_id)] += y;
        song_n[static_cast<size_t>(e.song_id)] += 1.0;
    }
    rm.global_rate_ = all_sum / static_cast<double>(examples.size());
    double k = 3.0 * kRateSmoothing;
    rm.global_tag_rate_.assign(nt, rm.global_rate_);
    for (size_t t = 0; t < nt; ++t) {
        rm.global_tag_rate_[t] = (g_sum[t] + k * rm.global_rate_) / (g_n[t] + k);
    }
    rm.song_rate_.assign(ns, rm.global_rate_);
    for (size_t s = 0; s < ns; ++s) {
        rm.song_rate_[s] = (song_sum[s] + k * rm.global_rate_) / (song_n[s] + k);
    }
    rm.user_tag_rate_.assign(nu, {});
    rm.user_genre_rate_.assign(nu, {});
    for (size_t u = 0; u < nu; ++u) {
        bool any = false;
        for (size_t t = 0; t < nt; ++t) any = any || tag_n[u][t] > 0.0;
        if (!any) continue;
        rm.user_tag_rate_[u].assign(nt, 0.0);
        for (size_t t = 0; t < nt; ++t) {
            rm.user_tag_rate_[u][t] =
                (tag_sum[u][t] + k * rm.global_tag_rate_[t]) / (tag_n[u][t] + k);
        }
        rm.user_genre_rate_[u].assign(ng, 0.0);
        for (size_t g = 0; g < ng; ++g) {
            rm.user_genre_rate_[u][g] = (genre_sum[u][g] + k * rm.global_rate_) / (genre_n[u][g] + k);
        }
    }

    size_t dim = static_cast<size_t>(n_tags) + 5;
    size_t n = examples.size();
    rm.feat_mean_.assign(dim, 0.0);
    rm.feat_std_.assign(dim, 1.0);
    std::vector<std::vector<double>> xs(n);
    std::vector<double> ys(n);
    for (size_t i = 0; i < n; ++i) {
        const RMExample& e = examples[i];
        xs[i] = rm.features(world, e.user_id, world.song(e.song_id), e.state, true);
        ys[i] = e.feedback == FeedbackLabel::like ? 1.0 : 0.0;
    }
    for (size_t j = 0; j < dim; ++j) {
        double mean = 0.0;
        for (size_t i = 0; i < n; ++i) mean += xs[i][j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (size_t i = 0; i < n; ++i) var += (xs[i][j] - mean) * (xs[i][j] - mean);
        var /= static_cast<double>(n);
        rm.feat_mean_[j] = mean;
        rm.feat_std_[j] = std::max(std::sqrt(var), 1e-8);
    }
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < dim; ++j) {
            xs[i][j] = (xs[i][j] - rm.feat_mean_[j]) / rm.feat_std_[j];
        }
    }

    // Full-batch gradient descent on the mean log-loss.
    rm.weights_.assign(dim, 0.0);
    rm.bias_ = 0.0;
    double prev_loss = std::numeric_limits<double>::infinity();
    std::vector<double> grad(dim, 0.0);
    for (int epoch = 0; epoch < kMaxEpochs; ++epoch) {
        std::fill(grad.begin(), grad.end(), 0.0);
        double grad_b = 0.0;
        double loss = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double z = rm.bias_;
            for (size_t j = 0; j < dim; ++j) z += rm.weights_[j] * xs[i][j];
            double p = sigmoid(z);
            double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
            loss -= ys[i] * std::log(pc) + (1.0 - ys[i]) * std::log1p(-pc);
            double d = p - ys[i];
            for (size_t j = 0; j < dim; ++j) grad[j] += d * xs[i][j];
            grad_b += d;
        }
        loss /= static_cast<double>(n);
        if (!std::isfinite(loss)) throw NumericError("reward model log-loss diverged");
        for (size_t j = 0; j < dim; ++j) {
            rm.weights_[j] -= kLearningRate * grad[j] / static_cast<double>(n);
        }
        rm.bias_ -= kLearningRate * grad_b / static_cast<double>(n);
        if (std::abs(prev_loss - loss) < kLossTolerance) break;
        prev_loss = loss;
    }
    return rm;
}

json PersonalizationRM::to_json() const {
    json j;
    j["kind"] = "personalization_rm";
    j["n_tags"] = n_tags_;
    j["n_genres"] = n_genres_;
    j["trained_on"] = trained_on_;
    j["weights"] = weights_;
    j["bias"] = bias_;
    j["feat_mean"] = feat_mean_;
    j["feat_std"] = feat_std_;
    j["global_tag_rate"] = global_tag_rate_;
    j["global_rate"] = global_rate_;
    j["song_rate"] = song_rate_;
    json users = json::array();
    for (size_t u = 0; u < user_tag_rate_.size(); ++u) {
        if (user_tag_rate_[u].empty()) continue;
        json row;
        row["user_id"] = u;
        row["tag_rate"] = user_tag_rate_[u];
        row["genre_rate"] = user_genre_rate_[u];
        users.push_back(row);
    }
    j["user_rates"] = users;
    return j;
}

PersonalizationRM PersonalizationRM::from_json(const json& j) {
    if (!j.contains("kind") || j["kind"] != "personalization_rm") {
        throw InputError("not a personalization reward model record");
    }
    PersonalizationRM rm;
    rm.n_tags_ = j["n_tags"].get<int>();
    rm.n_genres_ = j["n_genres"].get<int>();
    rm.trained_on_ = j["trained_on"].get<int64_t>();
    rm.weights_ = j["weights"].get<std::vector<double>>();
    rm.bias_ = j["bias"].get<double>();
    rm.feat_mean_ = j["feat_mean"].get<std::vector<double>>();
    rm.feat_std_ = j["feat_std"].get<std::vector<double>>();
    rm.global_tag_rate_ = j["global_tag_rate"].get<std::vector<double>>();
    rm.global_rate_ = j["global_rate"].get<double>();
    rm.song_rate_ = j["song_rate"].get<std::vector<double>>();
    size_t max_user = 0;
    for (const json& row : j["user_rates"]) {
        max_user = std::max(max_user, row["user_id"].get<size_t>() + 1);
    }
    rm.user_tag_rate_.assign(max_user, {});
    rm.user_genre_rate_.assign(max_user, {});
    for (const json& row : j["user_rates"]) {
        size_t u = row["user_id"].get<size_t>();
        rm.user_tag_rate_[u] = row["tag_rate"].get<std::vector<double>>();
        rm.user_genre_rate_[u] = row["genre_rate"].get<std::vector<double>>();
    }
    return rm;
}

void save_rm_json(const PersonalizationRM& rm, const std::filesystem::path& path) {
    write_file(path, rm.to_json().dump(2) + "\n");
}

PersonalizationRM load_rm_json(const std::filesystem::path& path) {
    return PersonalizationRM::from_json(json::parse(read_file(path)));
}

void RewardWeights::validate() const {
    if (lambda_pers < 0.0 || lambda_format < 0.0 || lambda_fact < 0.0 || lambda_div < 0.0 ||
        lambda_dedup < 0.0) {
        throw ConfigError("reward weights must be nonnegative");
    }
}

void RewardConfig::validate() const {
    weights.validate();
    if (rel_fraction < 0.0 || rel_fraction > 1.0) {
        throw ConfigError("rel_fraction must lie in [0, 1]");
    }
    if (dedup_window < 0) throw ConfigError("dedup_window must be nonnegative");
    if (list_length <= 0) throw ConfigError("list_length must be positive");
}

int judge_relevance(const World& world, const Query& query, const std::vector<int>& items,
                    double rel_fraction) {
    if (items.empty()) return 0;
    int relevant = 0;
    for (int id : items) relevant += oracle_relevance(world, query, world.song(id)) ? 1 : 0;
    double frac = static_cast<double>(relevant) / static_cast<double>(items.size());
    return frac >= rel_fraction ? 1 : 0;
}

RuleRewards rule_rewards(const Vocabulary& vocab, const World& world,
                         std::span<const int> raw_output, const Trajectory& user_history,
                         const RewardConfig& config) {
    config.validate();
    RuleRewards out;

    // Expected shape: item (SEP item)* EOS with exactly list_length items and
    // nothing after EOS. Any violation keeps the longest parseable prefix.
    size_t i = 0;
    bool terminated = false;
    bool clean = true;
    while (i < raw_output.size()) {
        if (!vocab.is_song(raw_output[i])) {
            clean = false;
            break;
        }
        out.parsed_items.push_back(vocab.song_id(raw_output[i]));
        ++i;
        if (i >= raw_output.size()) {
            clean = false;
            break;
        }
        if (raw_output[i] == Vocabulary::kEos) {
            terminated = true;
            ++i;
            break;
        }
        if (raw_output[i] != Vocabulary::kSep) {
            clean = false;
            break;
        }
        ++i;
    }
    bool format_ok = clean && terminated && i == raw_output.size() &&
                     static_cast<int>(out.parsed_items.size()) == config.list_length;
    out.r_format = format_ok ? 1 : 0;

    size_t n = out.parsed_items.size();
    int on_platform = 0;
    for (int id : out.parsed_items) on_platform += world.song(id).on_platform ? 1 : 0;
    out.r_fact = static_cast<double>(on_platform) / static_cast<double>(std::max<size_t>(n, 1));

    // An item is a near-duplicate if it shares an artist or a title stem with
    // any earlier item (same stem with a different suffix is still the same
    // underlying song).
    int dup_pairs = 0;
    for (size_t a = 1; a < n; ++a) {
        const Song& sa = world.song(out.parsed_items[a]);
        bool dup = false;
        for (size_t b = 0; b < a && !dup; ++b) {
            const Song& sb = world.song(out.parsed_items[b]);
            dup = sa.artist_id == sb.artist_id || sa.title_stem == sb.title_stem;
        }
        dup_pairs += dup ? 1 : 0;
    }
    out.r_div = 1.0 - static_cast<double>(dup_pairs) /
                          static_cast<double>(std::max<size_t>(n > 0 ? n - 1 : 0, 1));

    std::vector<int> recent;
    for (const InteractionEvent& e : user_history.events) {
        if (e.feedback == FeedbackLabel::like) recent.push_back(e.item);
    }
    if (static_cast<int>(recent.size()) > config.dedup_window) {
        recent.erase(recent.begin(),
                     recent.end() - static_cast<ptrdiff_t>(config.dedup_window));
    }
    std::unordered_set<int> recent_set(recent.begin(), recent.end());
    int repeats = 0;
    for (int id : out.parsed_items) repeats += recent_set.count(id) ? 1 : 0;
    out.r_dedup =
        1.0 - static_cast<double>(repeats) / static_cast<double>(std::max<size_t>(n, 1));
    return out;
}

RewardBreakdown hybrid_reward(int r_rel, double r_pers, const RuleRewards& rules,
                              const RewardWeights& weights) {
    weights.validate();
    if (r_rel != 0 && r_rel != 1) throw InputError("relevance gate must be 0 or 1");
    if (!(r_pers >= 0.0 && r_pers <= 10.0)) {
        throw InputError("personalization reward must lie in [0, 10]");
    }
    RewardBreakdown out;
    out.r_rel = r_rel;
    out.r_pers = r_pers;
    out.r_format = rules.r_format;
    out.r_fact = rules.r_fact;
    out.r_div = rules.r_div;
    out.r_dedup = rules.r_dedup;
    out.parsed_items = rules.parsed_items;
    out.r_hyb = static_cast<double>(r_rel) * weights.lambda_pers * r_pers +
                weights.lambda_format * rules.r_format + weights.lambda_fact * rules.r_fact +
                weights.lambda_div * rules.r_div + weights.lambda_dedup * rules.r_dedup;
    return out;
}

json RewardBreakdown::to_json() const {
    json j;
    j["r_rel"] = r_rel;
    j["r_pers"] = r_pers;
    j["r_format"] = r_format;
    j["r_fact"] = r_fact;
    j["r_div"] = r_div;
    j["r_dedup"] = r_dedup;
    j["r_hyb"] = r_hyb;
    j["parsed_items"] = parsed_items;
    return j;
}

RewardBreakdown evaluate_rollout(const World& world, const Vocabulary& vocab,
                                 const PersonalizationRM& rm, const Query& query, int user_id,
                                 const Trajectory& user_history, std::span<const int> raw_output,
                                 const RewardConfig& config) {
    RuleRewards rules = rule_rewards(vocab, world, raw_output, user_history, config);
    int r_rel = judge_relevance(world, query, rules.parsed_items, config.rel_fraction);
    double r_pers = 0.0;
    if (!rules.parsed_items.empty()) {
        for (int id : rules.parsed_items) r_pers += rm.score(world, user_id, world.song(id));
        r_pers /= static_cast<double>(rules.parsed_items.size());
    }
    // With the gate disabled the judge's verdict is still reported but no
    // longer multiplies the personalization term.
    RewardBreakdown b =
        hybrid_reward(config.relevance_gate ? r_rel : 1, r_pers, rules, config.weights);
    b.r_rel = r_rel;
    return b;
}

}  // namespace minstrel
