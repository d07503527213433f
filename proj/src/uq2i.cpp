#include "minstrel/uq2i.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <unordered_set>

#include "minstrel/errors.hpp"

namespace minstrel {

namespace {

constexpr int kKMeansMaxIters = 100;
constexpr int kMaxSampleAttempts = 100;

json query_to_json(const Query& q) {
    json j;
    j["query_id"] = q.query_id;
    j["intent_tags"] = q.intent_tags;
    j["surface_form"] = q.surface_form;
    j["source"] = static_cast<int>(q.source);
    return j;
}

Query query_from_json(const json& j) {
    Query q;
    q.query_id = j["query_id"].get<int>();
    q.intent_tags = j["intent_tags"].get<std::vector<int>>();
    q.surface_form = j["surface_form"].get<std::vector<int>>();
    q.source = static_cast<Query::Source>(j["source"].get<int>());
    return q;
}

// Several surface shapes per intent so clustering sees diverse renderings of
// the same tag bag.
std::vector<int> render_surface(const Vocabulary& vocab, const std::vector<int>& intent_tags,
                                Rng& rng) {
    std::vector<int> tags = intent_tags;
    rng.shuffle(tags);
    std::vector<int> out;
    switch (rng.uniform_int(4)) {
        case 0:
            out.push_back(vocab.keyword(Keyword::song));
            for (int t : tags) out.push_back(vocab.tag_token(t));
            break;
        case 1:
            out.push_back(vocab.keyword(Keyword::playlist));
            for (int t : tags) out.push_back(vocab.tag_token(t));
            break;
        case 2:
            for (int t : tags) out.push_back(vocab.tag_token(t));
            out.push_back(vocab.keyword(Keyword::song));
            break;
        default:
            for (int t : tags) out.push_back(vocab.tag_token(t));
            break;
    }
    return out;
}

std::vector<double> tag_bag(const Query& q, int n_tags) {
    std::vector<double> x(static_cast<size_t>(n_tags), 0.0);
    for (int t : q.intent_tags) x[static_cast<size_t>(t)] = 1.0;
    return x;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

// Lloyd iterations with k-means++ seeding; empty clusters steal the point
// farthest from its current centroid.
std::vector<int> kmeans(const std::vector<std::vector<double>>& points, int k, Rng& rng,
                        std::vector<std::vector<double>>* out_centroids) {
    size_t n = points.size();
    size_t dim = points[0].size();
    std::vector<std::vector<double>> centroids;
    centroids.reserve(static_cast<size_t>(k));
    centroids.push_back(points[static_cast<size_t>(rng.uniform_int(n))]);
    std::vector<double> d2(n, 0.0);
    while (static_cast<int>(centroids.size()) < k) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& c : centroids) best = std::min(best, sq_dist(points[i], c));
            d2[i] = best;
            total += best;
        }
        size_t pick;
        if (total <= 0.0) {
            pick = static_cast<size_t>(rng.uniform_int(n));
        } else {
            pick = static_cast<size_t>(rng.categorical(d2));
        }
        centroids.push_back(points[pick]);
    }

    std::vector<int> assign(n, 0);
    for (int iter = 0; iter < kKMeansMaxIters; ++iter) {
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                double d = sq_dist(points[i], centroids[static_cast<size_t>(c)]);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        std::vector<int> counts(static_cast<size_t>(k), 0);
        for (size_t i = 0; i < n; ++i) counts[static_cast<size_t>(assign[i])]++;
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<size_t>(c)] > 0) continue;
            size_t steal = 0;
            double far = -1.0;
            for (size_t i = 0; i < n; ++i) {
                if (counts[static_cast<size_t>(assign[i])] <= 1) continue;
                double d = sq_dist(points[i], centroids[static_cast<size_t>(assign[i])]);
                if (d > far) {
                    far = d;
                    steal = i;
                }
            }
            counts[static_cast<size_t>(assign[steal])]--;
            assign[steal] = c;
            counts[static_cast<size_t>(c)] = 1;
            changed = true;
        }
        for (int c = 0; c < k; ++c) {
            std::fill(centroids[static_cast<size_t>(c)].begin(),
                      centroids[static_cast<size_t>(c)].end(), 0.0);
        }
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = 0; j < dim; ++j) {
                centroids[static_cast<size_t>(assign[i])][j] += points[i][j];
            }
        }
        for (int c = 0; c < k; ++c) {
            for (size_t j = 0; j < dim; ++j) {
                centroids[static_cast<size_t>(c)][j] /=
                    static_cast<double>(counts[static_cast<size_t>(c)]);
            }
        }
        if (!changed && iter > 0) break;
    }
    if (out_centroids) *out_centroids = centroids;
    return assign;
}

}  // namespace

UserSplits UserSplits::make(int n_users, double sft_fraction, double rl_fraction) {
    if (sft_fraction <= 0.0 || rl_fraction <= 0.0 || sft_fraction + rl_fraction >= 1.0) {
        throw ConfigError("user split fractions must be positive and leave an eval remainder");
    }
    int n_sft = static_cast<int>(std::llround(n_users * sft_fraction));
    int n_rl = static_cast<int>(std::llround(n_users * rl_fraction));
    UserSplits s;
    for (int u = 0; u < n_sft; ++u) s.sft_users.push_back(u);
    for (int u = n_sft; u < n_sft + n_rl; ++u) s.rl_users.push_back(u);
    for (int u = n_sft + n_rl; u < n_users; ++u) s.eval_users.push_back(u);
    s.validate(n_users);
    return s;
}

void UserSplits::validate(int n_users) const {
    if (sft_users.empty() || rl_users.empty() || eval_users.empty()) {
        throw ConfigError("every user split must be nonempty");
    }
    std::vector<int> seen(static_cast<size_t>(n_users), 0);
    auto mark = [&](const std::vector<int>& pool) {
        for (int u : pool) {
            if (u < 0 || u >= n_users) throw ConfigError("split references unknown user");
            if (seen[static_cast<size_t>(u)]++) throw ConfigError("user splits overlap");
        }
    };
    mark(sft_users);
    mark(rl_users);
    mark(eval_users);
    for (int u = 0; u < n_users; ++u) {
        if (!seen[static_cast<size_t>(u)]) throw ConfigError("user splits must cover all users");
    }
}

void UQ2IConfig::validate() const {
    if (queries_per_song < 1) throw ConfigError("queries_per_song must be at least 1");
    if (n_clusters < 2) throw ConfigError("n_clusters must be at least 2");
    if (n_online_queries < 0) throw ConfigError("n_online_queries must be nonnegative");
    if (max_intent_tags < 1 || max_intent_tags > 3) {
        throw ConfigError("max_intent_tags must lie in [1, 3]");
    }
    if (history_window < 0) throw ConfigError("history_window must be nonnegative");
    if (list_length <= 0) throw ConfigError("list_length must be positive");
    if (max_retries < 1) throw ConfigError("max_retries must be at least 1");
    if (sft_fraction <= 0.0 || rl_fraction <= 0.0 || sft_fraction + rl_fraction >= 1.0) {
        throw ConfigError("split fractions must be positive and leave an eval remainder");
    }
}

QueryIndex build_query_index(const World& world, const Vocabulary& vocab, const UQ2IConfig& config,
                             Rng& rng) {
    config.validate();
    QueryIndex index;
    index.song_queries.assign(world.catalog.size(), {});

    for (const Song& song : world.catalog) {
        if (!song.on_platform) continue;
        for (int qi = 0; qi < config.queries_per_song; ++qi) {
            int max_size =
                std::min<int>(config.max_intent_tags, static_cast<int>(song.tags.size()));
            int size = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_size)));
            std::vector<int> tags = song.tags;
            rng.shuffle(tags);
            tags.resize(static_cast<size_t>(size));
            std::sort(tags.begin(), tags.end());
            Query q;
            q.query_id = static_cast<int>(index.queries.size());
            q.intent_tags = tags;
            q.surface_form = render_surface(vocab, tags, rng);
            q.source = Query::Source::generated;
            index.song_queries[static_cast<size_t>(song.song_id)].push_back(q.query_id);
            index.queries.push_back(std::move(q));
        }
    }

    // Online queries: intents drawn from popularity-weighted tag frequencies.
    std::vector<double> tag_weight(static_cast<size_t>(world.config.tag_lexicon_size), 0.0);
    for (const Song& song : world.catalog) {
        if (!song.on_platform) continue;
        for (int t : song.tags) tag_weight[static_cast<size_t>(t)] += song.popularity;
    }
    for (int qi = 0; qi < config.n_online_queries; ++qi) {
        int size = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(config.max_intent_tags)));
        std::vector<double> w = tag_weight;
        std::vector<int> tags;
        for (int s = 0; s < size; ++s) {
            size_t t = rng.categorical(w);
            tags.push_back(static_cast<int>(t));
            w[t] = 0.0;
        }
        std::sort(tags.begin(), tags.end());
        Query q;
        q.query_id = static_cast<int>(index.queries.size());
        q.intent_tags = tags;
        q.surface_form = render_surface(vocab, tags, rng);
        q.source = Query::Source::simulated_online;
        index.queries.push_back(std::move(q));
    }

    if (config.n_clusters > static_cast<int>(index.queries.size())) {
        throw ConfigError("n_clusters exceeds the number of generated queries");
    }

    std::vector<std::vector<double>> points;
    points.reserve(index.queries.size());
    for (const Query& q : index.queries) {
        points.push_back(tag_bag(q, world.config.tag_lexicon_size));
    }
    std::vector<std::vector<double>> centroids;
    std::vector<int> assign = kmeans(points, config.n_clusters, rng, &centroids);

    // Per-query relevant song sets, then per-cluster unions.
    std::vector<int> on_platform = world.on_platform_ids();
    std::vector<QueryCluster> clusters(static_cast<size_t>(config.n_clusters));
    for (int c = 0; c < config.n_clusters; ++c) {
        clusters[static_cast<size_t>(c)].cluster_id = c;
        clusters[static_cast<size_t>(c)].centroid = centroids[static_cast<size_t>(c)];
    }
    for (size_t qid = 0; qid < index.queries.size(); ++qid) {
        clusters[static_cast<size_t>(assign[qid])].member_queries.push_back(
            static_cast<int>(qid));
    }
    for (QueryCluster& cluster : clusters) {
        std::vector<char> member(world.catalog.size(), 0);
        for (int qid : cluster.member_queries) {
            for (int sid : on_platform) {
                if (!member[static_cast<size_t>(sid)] &&
                    oracle_relevance(world, index.queries[static_cast<size_t>(qid)],
                                     world.song(sid))) {
                    member[static_cast<size_t>(sid)] = 1;
                }
            }
        }
        for (int sid : on_platform) {
            if (member[static_cast<size_t>(sid)]) cluster.indexed_songs.push_back(sid);
        }
    }

    // Keep only clusters that index at least one song, renumbering ids.
    index.query_cluster.assign(index.queries.size(), -1);
    for (QueryCluster& cluster : clusters) {
        if (cluster.member_queries.empty() || cluster.indexed_songs.empty()) continue;
        cluster.cluster_id = static_cast<int>(index.clusters.size());
        for (int qid : cluster.member_queries) {
            index.query_cluster[static_cast<size_t>(qid)] = cluster.cluster_id;
        }
        index.clusters.push_back(std::move(cluster));
    }
    index.validate(world);
    return index;
}

void QueryIndex::validate(const World& world) const {
    if (clusters.empty()) throw InputError("query index has no clusters");
    for (const QueryCluster& c : clusters) {
        if (c.member_queries.empty()) throw InputError("cluster without member queries");
        if (c.indexed_songs.empty()) throw InputError("cluster without indexed songs");
        for (int sid : c.indexed_songs) {
            if (!world.song(sid).on_platform) {
                throw InputError("cluster indexes an off-platform song");
            }
            bool relevant = false;
            for (int qid : c.member_queries) {
                relevant = relevant ||
                           oracle_relevance(world, queries[static_cast<size_t>(qid)],
                                            world.song(sid));
            }
            if (!relevant) throw InputError("indexed song irrelevant to every member query");
        }
    }
    for (size_t s = 0; s < song_queries.size(); ++s) {
        for (int qid : song_queries[s]) {
            if (qid < 0 || qid >= static_cast<int>(queries.size())) {
                throw InputError("song maps to unknown query");
            }
        }
    }
}

std::optional<RetrievedCandidates> retrieve_candidates(const UserSpec& user,
                                                       const QueryIndex& index, Rng& rng) {
    std::vector<int> eligible;
    for (int sid : user.saved_songs) {
        if (sid >= 0 && sid < static_cast<int>(index.song_queries.size()) &&
            !index.song_queries[static_cast<size_t>(sid)].empty()) {
            eligible.push_back(sid);
        }
    }
    if (eligible.empty()) return std::nullopt;
    int seed_song = eligible[static_cast<size_t>(rng.uniform_int(eligible.size()))];
    const std::vector<int>& qids = index.song_queries[static_cast<size_t>(seed_song)];
    int qid = qids[static_cast<size_t>(rng.uniform_int(qids.size()))];
    int cluster = index.query_cluster[static_cast<size_t>(qid)];
    if (cluster < 0) return std::nullopt;
    RetrievedCandidates out;
    out.query = index.queries[static_cast<size_t>(qid)];
    out.seed_song = seed_song;
    out.candidates = index.clusters[static_cast<size_t>(cluster)].indexed_songs;
    return out;
}

const char* to_string(SplitKind s) {
    switch (s) {
        case SplitKind::sft: return "sft";
        case SplitKind::rl: return "rl";
        case SplitKind::eval: return "eval";
    }
    throw InputError("unknown split kind");
}

std::vector<UQ2ISample> synthesize_dataset(const World& world, const Vocabulary& vocab,
                                           const QueryIndex& index, const PersonalizationRM& rm,
                                           int n_samples, SplitKind split,
                                           const UserSplits& splits, const UQ2IConfig& config,
                                           uint64_t seed) {
    config.validate();
    splits.validate(world.config.n_users);
    if (n_samples <= 0) throw ConfigError("n_samples must be positive");
    const std::vector<int>& pool = split == SplitKind::sft  ? splits.sft_users
                                   : split == SplitKind::rl ? splits.rl_users
                                                            : splits.eval_users;

    // Recent histories are deterministic per user, so cache them across
    // samples.
    std::unordered_map<int, std::vector<InteractionEvent>> history;
    auto user_history = [&](int uid) -> const std::vector<InteractionEvent>& {
        auto it = history.find(uid);
        if (it != history.end()) return it->second;
        std::vector<InteractionEvent> events;
        for (const Trajectory& t :
             simulate_user_sessions(world, world.user(uid), world.config.sessions_per_user)) {
            events.insert(events.end(), t.events.begin(), t.events.end());
        }
        return history.emplace(uid, std::move(events)).first->second;
    };

    std::vector<UQ2ISample> samples;
    samples.reserve(static_cast<size_t>(n_samples));
    Rng base(seed);
    for (int i = 0; i < n_samples; ++i) {
        Rng rng = base.substream("uq2i_sample", static_cast<uint64_t>(split),
                                 static_cast<uint64_t>(i));
        bool emitted = false;
        for (int attempt = 0; attempt < kMaxSampleAttempts && !emitted; ++attempt) {
            int uid = pool[static_cast<size_t>(rng.uniform_int(pool.size()))];
            std::optional<RetrievedCandidates> rc;
            for (int r = 0; r < config.max_retries; ++r) {
                rc = retrieve_candidates(world.user(uid), index, rng);
                if (rc && static_cast<int>(rc->candidates.size()) >= config.list_length) break;
                rc.reset();
            }
            if (!rc) continue;

            std::vector<std::pair<double, int>> scored;
            scored.reserve(rc->candidates.size());
            for (int sid : rc->candidates) {
                scored.emplace_back(rm.score(world, uid, world.song(sid)), sid);
            }
            std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });

            UQ2ISample s;
            s.sample_id = static_cast<int>(samples.size());
            s.user_id = uid;
            s.query = rc->query;
            for (int k = 0; k < config.list_length; ++k) {
                s.output_items.push_back(scored[static_cast<size_t>(k)].second);
            }

            const std::vector<InteractionEvent>& events = user_history(uid);
            size_t start = events.size() > static_cast<size_t>(config.history_window)
                               ? events.size() - static_cast<size_t>(config.history_window)
                               : 0;
            const UserProfile& p = world.user(uid).profile;
            s.context_tokens = {Vocabulary::kBos, vocab.age_token(p.age_bucket),
                                vocab.gender_token(p.gender),
                                vocab.occupation_token(p.occupation)};
            for (size_t e = start; e < events.size(); ++e) {
                s.context_tokens.push_back(vocab.state_token(events[e].state));
                s.context_tokens.push_back(vocab.song_token(events[e].item));
                s.context_tokens.push_back(vocab.feedback_token(events[e].feedback));
            }
            s.context_tokens.push_back(vocab.keyword(Keyword::query));
            for (int t : s.query.surface_form) s.context_tokens.push_back(t);
            s.context_tokens.push_back(vocab.keyword(Keyword::recommend));

            samples.push_back(std::move(s));
            emitted = true;
        }
        if (!emitted) {
            throw InputError("failed to synthesize an instruction sample after bounded retries");
        }
    }
    return samples;
}

std::vector<int> render_output_tokens(const Vocabulary& vocab, const std::vector<int>& items) {
    std::vector<int> out;
    for (size_t i = 0; i < items.size(); ++i) {
        if (i > 0) out.push_back(Vocabulary::kSep);
        out.push_back(vocab.song_token(items[i]));
    }
    out.push_back(Vocabulary::kEos);
    return out;
}

MaskedSequence to_masked_sequence(const UQ2ISample& sample, const Vocabulary& vocab) {
    MaskedSequence seq;
    seq.tokens = sample.context_tokens;
    seq.loss_mask.assign(seq.tokens.size(), 0);
    for (int tok : render_output_tokens(vocab, sample.output_items)) {
        seq.tokens.push_back(tok);
        seq.loss_mask.push_back(1);
    }
    seq.validate();
    return seq;
}

std::vector<InteractionEvent> context_events(const UQ2ISample& sample, const Vocabulary& vocab) {
    const std::vector<int>& toks = sample.context_tokens;
    if (toks.size() < 4 || toks[0] != Vocabulary::kBos) {
        throw InputError("malformed context prefix in instruction sample " +
                         std::to_string(sample.sample_id));
    }
    std::vector<InteractionEvent> events;
    size_t i = 4;  // BOS + profile triple
    while (i + 2 < toks.size() && vocab.is_state(toks[i])) {
        if (!vocab.is_song(toks[i + 1]) || !vocab.is_feedback(toks[i + 2])) {
            throw InputError("malformed event triple in instruction sample " +
                             std::to_string(sample.sample_id));
        }
        InteractionEvent e;
        e.state = vocab.state_id(toks[i]);
        e.item = vocab.song_id(toks[i + 1]);
        e.feedback = vocab.feedback_label(toks[i + 2]);
        events.push_back(e);
        i += 3;
    }
    return events;
}

json UQ2ISample::to_json() const {
    json j;
    j["kind"] = "uq2i_sample";
    j["sample_id"] = sample_id;
    j["user_id"] = user_id;
    j["query"] = query_to_json(query);
    j["context_tokens"] = context_tokens;
    j["output_items"] = output_items;
    return j;
}

UQ2ISample UQ2ISample::from_json(const json& j) {
    if (!j.contains("kind") || j["kind"] != "uq2i_sample") {
        throw InputError("not an instruction sample record");
    }
    UQ2ISample s;
    s.sample_id = j["sample_id"].get<int>();
    s.user_id = j["user_id"].get<int>();
    s.query = query_from_json(j["query"]);
    s.context_tokens = j["context_tokens"].get<std::vector<int>>();
    s.output_items = j["output_items"].get<std::vector<int>>();
    return s;
}

void save_samples_jsonl(const std::vector<UQ2ISample>& samples, SplitKind split,
                        const Vocabulary& vocab, const std::filesystem::path& path) {
    std::vector<json> rows;
    json header;
    header["kind"] = "uq2i_split";
    header["split"] = to_string(split);
    header["n_samples"] = samples.size();
    rows.push_back(header);
    for (const UQ2ISample& s : samples) {
        json j = s.to_json();
        j["output_tokens"] = render_output_tokens(vocab, s.output_items);
        rows.push_back(std::move(j));
    }
    write_jsonl(path, rows);
}

std::vector<UQ2ISample> load_samples_jsonl(const std::filesystem::path& path,
                                           SplitKind expected_split) {
    std::vector<json> rows = read_jsonl(path);
    if (rows.empty() || !rows[0].contains("kind") || rows[0]["kind"] != "uq2i_split") {
        throw InputError("not an instruction sample file: " + path.string());
    }
    if (rows[0]["split"].get<std::string>() != to_string(expected_split)) {
        throw InputError("instruction sample file holds the wrong split: " + path.string());
    }
    std::vector<UQ2ISample> samples;
    for (size_t i = 1; i < rows.size(); ++i) samples.push_back(UQ2ISample::from_json(rows[i]));
    if (samples.size() != rows[0]["n_samples"].get<size_t>()) {
        throw InputError("instruction sample count mismatch in " + path.string());
    }
    return samples;
}

}  // namespace minstrel
