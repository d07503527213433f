#include "minstrel/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "minstrel/errors.hpp"
#include "minstrel/rng.hpp"

namespace minstrel {

namespace {

void check_pct(double v, const char* name) {
    if (!std::isfinite(v) || v < 0.0 || v > 100.0) {
        throw NumericError(std::string(name) + " out of [0, 100]");
    }
}

// Per-prompt on-platform share of the parsed prefix; empty parses score 0.
double fact_share(const World& world, const std::vector<int>& parsed) {
    if (parsed.empty()) return 0.0;
    int on = 0;
    for (int id : parsed)
        if (world.song(id).on_platform) on++;
    return static_cast<double>(on) / static_cast<double>(parsed.size());
}

}  // namespace

void MetricsReport::validate() const {
    if (!std::isfinite(personalization) || personalization < 0.0 || personalization > 10.0) {
        throw NumericError("personalization out of [0, 10]");
    }
    check_pct(relevance_pct, "relevance_pct");
    check_pct(diversity_pct, "diversity_pct");
    check_pct(factuality_pct, "factuality_pct");
    check_pct(music_knowledge_acc, "music_knowledge_acc");
    check_pct(q2i_acc, "q2i_acc");
    if (!std::isfinite(u2i_ppl) || u2i_ppl < 1.0) throw NumericError("u2i_ppl below 1");
    if (n_eval_prompts < 0) throw NumericError("n_eval_prompts negative");
}

json MetricsReport::to_json() const {
    json j;
    j["kind"] = "metrics_report";
    j["personalization"] = personalization;
    j["relevance_pct"] = relevance_pct;
    j["diversity_pct"] = diversity_pct;
    j["factuality_pct"] = factuality_pct;
    j["u2i_ppl"] = u2i_ppl;
    j["music_knowledge_acc"] = music_knowledge_acc;
    j["q2i_acc"] = q2i_acc;
    j["n_eval_prompts"] = n_eval_prompts;
    j["config_fingerprint"] = config_fingerprint;
    return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
    MetricsReport r;
    r.personalization = j.at("personalization").get<double>();
    r.relevance_pct = j.at("relevance_pct").get<double>();
    r.diversity_pct = j.at("diversity_pct").get<double>();
    r.factuality_pct = j.at("factuality_pct").get<double>();
    r.u2i_ppl = j.at("u2i_ppl").get<double>();
    r.music_knowledge_acc = j.at("music_knowledge_acc").get<double>();
    r.q2i_acc = j.at("q2i_acc").get<double>();
    r.n_eval_prompts = j.at("n_eval_prompts").get<int>();
    r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
    r.validate();
    return r;
}

std::string MetricsReport::csv_header() {
    return "personalization,relevance_pct,diversity_pct,factuality_pct,u2i_ppl,"
           "music_knowledge_acc,q2i_acc,n_eval_prompts,config_fingerprint";
}

std::string MetricsReport::csv_row() const {
    std::ostringstream out;
    out.precision(10);
    out << personalization << ',' << relevance_pct << ',' << diversity_pct << ','
        << factuality_pct << ',' << u2i_ppl << ',' << music_knowledge_acc << ',' << q2i_acc
        << ',' << n_eval_prompts << ',' << config_fingerprint;
    return out.str();
}

void EvalConfig::validate() const {
    if (n_probes < 1) throw ConfigError("n_probes must be positive");
    if (max_new_tokens < 2) throw ConfigError("max_new_tokens must allow at least one item");
    if (rel_fraction <= 0.0 || rel_fraction > 1.0) throw ConfigError("rel_fraction out of (0, 1]");
    if (list_length < 1) throw ConfigError("list_length must be positive");
}

std::vector<int> greedy_decode(const PolicyParams& params, const std::vector<int>& prefix,
                               int max_new) {
    if (prefix.empty()) throw InputError("greedy_decode: empty prefix");
    if (max_new < 1) throw InputError("greedy_decode: max_new must be positive");
    if (static_cast<int>(prefix.size()) + max_new > params.config.context_length) {
        throw InputError("greedy_decode: prefix plus budget exceeds context length");
    }
    std::vector<int> tokens = prefix;
    std::vector<int> generated;
    ForwardCache cache;
    for (int step = 0; step < max_new; ++step) {
        forward_hidden(params, tokens, cache);
        std::vector<double> logits = logits_at(params, cache, static_cast<int>(tokens.size()) - 1);
        int best = static_cast<int>(
            std::max_element(logits.begin(), logits.end()) - logits.begin());
        tokens.push_back(best);
        generated.push_back(best);
        if (best == Vocabulary::kEos) break;
    }
    return generated;
}

json DecodedList::to_json() const {
    json j;
    j["sample_id"] = sample_id;
    j["user_id"] = user_id;
    j["query_id"] = query_id;
    j["raw_tokens"] = raw_tokens;
    j["parsed_song_ids"] = parsed_song_ids;
    j["format_ok"] = format_ok;
    return j;
}

DecodedList DecodedList::from_json(const json& j) {
    DecodedList d;
    d.sample_id = j.at("sample_id").get<int>();
    d.user_id = j.at("user_id").get<int>();
    d.query_id = j.at("query_id").get<int>();
    d.raw_tokens = j.at("raw_tokens").get<std::vector<int>>();
    d.parsed_song_ids = j.at("parsed_song_ids").get<std::vector<int>>();
    d.format_ok = j.at("format_ok").get<bool>();
    return d;
}

MetricsReport metrics_from_decoded(const World& world, const std::vector<UQ2ISample>& prompts,
                                   const std::vector<DecodedList>& decoded,
                                   const EvalConfig& config, const std::string& fingerprint) {
    config.validate();
    if (prompts.empty()) throw InputError("no prompts to score");
    if (decoded.size() != prompts.size()) throw InputError("decodes do not match prompts");

    double personalization = 0.0;
    int relevant_prompts = 0;
    double factuality = 0.0;
    std::unordered_set<int> distinct;
    for (size_t i = 0; i < prompts.size(); ++i) {
        const DecodedList& d = decoded[i];
        if (d.sample_id != prompts[i].sample_id) {
            throw InputError("decode order does not match prompt order");
        }
        const UserSpec& user = world.user(d.user_id);
        if (!d.parsed_song_ids.empty()) {
            double mean_affinity = 0.0;
            for (int id : d.parsed_song_ids) {
                mean_affinity += oracle_affinity(world, user, world.song(id));
                if (world.song(id).on_platform) distinct.insert(id);
            }
            mean_affinity /= static_cast<double>(d.parsed_song_ids.size());
            personalization += world.calibrate_affinity(mean_affinity);
        }
        if (d.format_ok &&
            judge_relevance(world, prompts[i].query, d.parsed_song_ids, config.rel_fraction)) {
            relevant_prompts++;
        }
        factuality += fact_share(world, d.parsed_song_ids);
    }

    double n = static_cast<double>(prompts.size());
    MetricsReport report;
    report.personalization = personalization / n;
    report.relevance_pct = 100.0 * static_cast<double>(relevant_prompts) / n;
    report.diversity_pct =
        100.0 * static_cast<double>(distinct.size()) / static_cast<double>(world.n_on_platform());
    report.factuality_pct = 100.0 * factuality / n;
    report.n_eval_prompts = static_cast<int>(prompts.size());
    report.config_fingerprint = fingerprint;
    report.validate();
    return report;
}

EvalResult evaluate_policy(const PolicyParams& policy, const std::vector<UQ2ISample>& eval_prompts,
                           const World& world, const Vocabulary& vocab, const UserSplits& splits,
                           const EvalConfig& config, const PersonalizationRM* rm) {
    config.validate();
    splits.validate(world.config.n_users);
    if (eval_prompts.empty()) throw InputError("no evaluation prompts");

    // Split hygiene: every prompt user must be held out from both training
    // splits.
    std::unordered_set<int> eval_pool(splits.eval_users.begin(), splits.eval_users.end());
    std::unordered_set<int> train_pool(splits.sft_users.begin(), splits.sft_users.end());
    train_pool.insert(splits.rl_users.begin(), splits.rl_users.end());
    for (const UQ2ISample& p : eval_prompts) {
        if (!eval_pool.count(p.user_id) || train_pool.count(p.user_id)) {
            throw InputError("prompt user " + std::to_string(p.user_id) +
                             " is not isolated to the eval split");
        }
    }

    RewardConfig parse_cfg;
    parse_cfg.rel_fraction = config.rel_fraction;
    parse_cfg.list_length = config.list_length;

    EvalResult result;
    for (const UQ2ISample& p : eval_prompts) {
        int budget = std::min(config.max_new_tokens,
                              policy.config.context_length -
                                  static_cast<int>(p.context_tokens.size()));
        if (budget < 1) throw InputError("prompt leaves no room for decoding");
        std::vector<int> raw = greedy_decode(policy, p.context_tokens, budget);

        Trajectory history;
        history.user_id = p.user_id;
        history.events = context_events(p, vocab);
        RuleRewards rules = rule_rewards(vocab, world, raw, history, parse_cfg);

        DecodedList d;
        d.sample_id = p.sample_id;
        d.user_id = p.user_id;
        d.query_id = p.query.query_id;
        d.raw_tokens = std::move(raw);
        d.parsed_song_ids = rules.parsed_items;
        d.format_ok = rules.r_format == 1.0;
        result.decoded.push_back(std::move(d));
    }

    json fp;
    fp["world_seed"] = world.config.rng_seed;
    fp["n_songs"] = world.config.n_songs;
    fp["n_users"] = world.config.n_users;
    fp["vocab_size"] = policy.config.vocab_size;
    fp["d_model"] = policy.config.d_model;
    fp["context_length"] = policy.config.context_length;
    fp["n_probes"] = config.n_probes;
    fp["max_new_tokens"] = config.max_new_tokens;
    fp["rel_fraction"] = config.rel_fraction;
    fp["list_length"] = config.list_length;
    fp["probe_seed"] = config.probe_seed;
    fp["n_prompts"] = eval_prompts.size();
    std::string fingerprint = hash_hex(fnv1a(fp.dump()));

    result.report =
        metrics_from_decoded(world, eval_prompts, result.decoded, config, fingerprint);

    if (rm) {
        double gap = 0.0;
        int64_t items = 0;
        for (const DecodedList& d : result.decoded) {
            const UserSpec& user = world.user(d.user_id);
            for (int id : d.parsed_song_ids) {
                const Song& song = world.song(id);
                gap += std::abs(rm->score(world, d.user_id, song) -
                                world.calibrate_affinity(oracle_affinity(world, user, song)));
                items++;
            }
        }
        result.rm_oracle_gap = items > 0 ? gap / static_cast<double>(items) : 0.0;
    }
    return result;
}

void save_decoded_jsonl(const std::vector<DecodedList>& decoded,
                        const std::filesystem::path& path) {
    std::vector<json> rows;
    json header;
    header["kind"] = "decoded_lists";
    header["n_lists"] = decoded.size();
    rows.push_back(header);
    for (const DecodedList& d : decoded) rows.push_back(d.to_json());
    write_jsonl(path, rows);
}

std::vector<DecodedList> load_decoded_jsonl(const std::filesystem::path& path) {
    std::vector<json> rows = read_jsonl(path);
    if (rows.empty() || rows[0].value("kind", "") != "decoded_lists") {
        throw InputError("not a decoded-lists file: " + path.string());
    }
    std::vector<DecodedList> decoded;
    for (size_t i = 1; i < rows.size(); ++i) decoded.push_back(DecodedList::from_json(rows[i]));
    if (decoded.size() != rows[0].at("n_lists").get<size_t>()) {
        throw InputError("decoded-lists file is truncated: " + path.string());
    }
    return decoded;
}

double eval_u2i_ppl(const PolicyParams& policy, const Vocabulary& vocab, const World& world,
                    const std::vector<Trajectory>& trajectories, const EncodeOptions& options) {
    if (trajectories.empty()) throw InputError("perplexity requires at least one trajectory");
    double total = 0.0;
    int64_t items = 0;
    for (const Trajectory& traj : trajectories) {
        const UserProfile& profile = world.user(traj.user_id).profile;
        MaskedSequence seq = encode_trajectory(vocab, traj, profile, options);
        auto [sum, per_position] = evaluate_logprob(policy, seq);
        (void)sum;
        size_t k = 0;
        for (size_t j = 1; j < seq.tokens.size(); ++j) {
            if (!seq.loss_mask[j]) continue;
            if (vocab.is_song(seq.tokens[j])) {
                total += per_position[k];
                items++;
            }
            k++;
        }
    }
    if (items == 0) throw InputError("no item positions in held-out trajectories");
    return std::exp(-total / static_cast<double>(items));
}

ProbeResult knowledge_probes(const PolicyParams& policy, const World& world,
                             const Vocabulary& vocab, int n_probes, uint64_t seed) {
    if (n_probes < 1) throw ConfigError("n_probes must be positive");
    Rng base(seed);
    ForwardCache cache;

    auto best_option = [&](const std::vector<int>& prompt, const std::vector<int>& options) {
        forward_hidden(policy, prompt, cache);
        std::vector<double> logits =
            logits_at(policy, cache, static_cast<int>(prompt.size()) - 1);
        size_t best = 0;
        for (size_t i = 1; i < options.size(); ++i) {
            if (logits[static_cast<size_t>(options[i])] >
                logits[static_cast<size_t>(options[best])]) {
                best = i;
            }
        }
        return best;
    };

    // Music knowledge: which artist recorded this song, in the same layout
    // the fact corpus uses.
    int knowledge_correct = 0;
    for (int i = 0; i < n_probes; ++i) {
        Rng rng = base.substream("probe_music", static_cast<uint64_t>(i));
        const Song& song = world.catalog[rng.uniform_int(world.catalog.size())];
        std::vector<int> artists = {song.artist_id};
        while (artists.size() < 4) {
            int a = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(world.config.n_artists)));
            if (std::find(artists.begin(), artists.end(), a) == artists.end()) {
                artists.push_back(a);
            }
        }
        std::vector<int> options;
        for (int a : artists) options.push_back(vocab.artist_token(a));
        std::vector<int> prompt = {Vocabulary::kBos, vocab.keyword(Keyword::song),
                                   vocab.song_token(song.song_id),
                                   vocab.keyword(Keyword::artist)};
        if (best_option(prompt, options) == 0) knowledge_correct++;
    }

    // Query-to-item: which song carries these tags, in the comment layout.
    // One oracle-relevant option against three options sharing no intent tag.
    int q2i_correct = 0;
    for (int i = 0; i < n_probes; ++i) {
        Rng rng = base.substream("probe_q2i", static_cast<uint64_t>(i));
        const Song* song = nullptr;
        std::vector<int> intent;
        std::vector<int> distractors;
        while (distractors.size() < 3) {
            song = &world.catalog[rng.uniform_int(world.catalog.size())];
            std::vector<int> tags = song->tags;
            rng.shuffle(tags);
            size_t keep = 1 + rng.uniform_int(std::min<size_t>(tags.size(), 3));
            intent.assign(tags.begin(), tags.begin() + static_cast<long>(keep));

            distractors.clear();
            int attempts = 0;
            while (distractors.size() < 3 && attempts < 500) {
                attempts++;
                const Song& d = world.catalog[rng.uniform_int(world.catalog.size())];
                if (d.song_id == song->song_id) continue;
                bool overlap = false;
                for (int t : intent) overlap = overlap || d.has_tag(t);
                if (overlap) continue;
                if (std::find(distractors.begin(), distractors.end(), d.song_id) !=
                    distractors.end()) {
                    continue;
                }
                distractors.push_back(d.song_id);
            }
        }
        std::vector<int> options = {vocab.song_token(song->song_id)};
        for (int id : distractors) options.push_back(vocab.song_token(id));
        std::vector<int> prompt = {Vocabulary::kBos, vocab.keyword(Keyword::comment)};
        for (int t : intent) prompt.push_back(vocab.tag_token(t));
        prompt.push_back(vocab.keyword(Keyword::about));
        if (best_option(prompt, options) == 0) q2i_correct++;
    }

    ProbeResult out;
    out.music_knowledge_acc = 100.0 * knowledge_correct / static_cast<double>(n_probes);
    out.q2i_acc = 100.0 * q2i_correct / static_cast<double>(n_probes);
    out.n_probes = n_probes;
    return out;
}

std::vector<ScalingPoint> scaling_sweep(const World& world, const Vocabulary& vocab,
                                        const Corpus& corpus,
                                        const std::vector<Trajectory>& heldout,
                                        const std::vector<double>& budgets,
                                        const PolicyConfig& policy_config,
                                        const TrainConfig& train_config, int n_probes,
                                        uint64_t seed) {
    if (budgets.size() < 3) throw ConfigError("scaling sweep needs at least 3 budget points");
    for (double b : budgets) {
        if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("budget fractions must lie in [0, 1]");
    }
    if (heldout.empty()) throw InputError("scaling sweep needs held-out trajectories");

    // One shared shuffle per stage: budget subsets are nested prefixes, so a
    // larger budget strictly contains a smaller one.
    const CorpusStage* full[3] = {&corpus.stage1, &corpus.stage2, &corpus.stage3};
    std::vector<std::vector<size_t>> order(3);
    Rng base(seed);
    for (int s = 0; s < 3; ++s) {
        order[static_cast<size_t>(s)].resize(full[s]->sequences.size());
        for (size_t i = 0; i < order[static_cast<size_t>(s)].size(); ++i) {
            order[static_cast<size_t>(s)][i] = i;
        }
        Rng rng = base.substream("scaling_subset", static_cast<uint64_t>(s));
        rng.shuffle(order[static_cast<size_t>(s)]);
    }

    std::vector<ScalingPoint> points;
    for (double budget : budgets) {
        std::vector<CorpusStage> stages;
        for (int s = 0; s < 3; ++s) {
            int64_t target = static_cast<int64_t>(
                std::llround(budget * static_cast<double>(full[s]->total_tokens())));
            CorpusStage subset;
            subset.stage = full[s]->stage;
            int64_t taken = 0;
            for (size_t idx : order[static_cast<size_t>(s)]) {
                const MaskedSequence& seq = full[s]->sequences[idx];
                int64_t len = static_cast<int64_t>(seq.tokens.size());
                if (taken + len > target) break;
                subset.sequences.push_back(seq);
                taken += len;
            }
            subset.token_budget = taken;
            if (!subset.sequences.empty()) stages.push_back(std::move(subset));
        }

        Rng init_rng(seed);
        PolicyParams params = PolicyParams::init(policy_config, init_rng);
        if (!stages.empty()) {
            params = pretrain(std::move(params), stages, Schedule::curriculum, train_config, seed);
        }

        ProbeResult probes = knowledge_probes(params, world, vocab, n_probes, seed);
        ScalingPoint point;
        point.budget_fraction = budget;
        point.report.music_knowledge_acc = probes.music_knowledge_acc;
        point.report.q2i_acc = probes.q2i_acc;
        point.report.u2i_ppl = std::max(1.0, eval_u2i_ppl(params, vocab, world, heldout));
        point.report.n_eval_prompts = n_probes;
        json fp;
        fp["budget"] = budget;
        fp["seed"] = seed;
        fp["d_model"] = policy_config.d_model;
        fp["world_seed"] = world.config.rng_seed;
        point.report.config_fingerprint = hash_hex(fnv1a(fp.dump()));
        point.report.validate();
        points.push_back(std::move(point));
    }
    return points;
}

void save_scaling_csv(const std::vector<ScalingPoint>& points,
                      const std::filesystem::path& path) {
    std::ostringstream out;
    out << "budget_fraction," << MetricsReport::csv_header() << '\n';
    out.precision(10);
    for (const ScalingPoint& p : points) {
        out << p.budget_fraction << ',' << p.report.csv_row() << '\n';
    }
    write_file(path, out.str());
}

}  // namespace minstrel
