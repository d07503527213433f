#include "minstrel/vocab.hpp"

#include "minstrel/errors.hpp"

namespace minstrel {

namespace {
constexpr int kNumAgeBuckets = 5;
constexpr int kNumGenders = 3;
constexpr int kNumOccupations = 8;
constexpr int kNumFeedback = 3;

const char* keyword_name(Keyword k) {
    switch (k) {
        case Keyword::song: return "<song>";
        case Keyword::artist: return "<by>";
        case Keyword::genre: return "<genre>";
        case Keyword::tags: return "<tagged>";
        case Keyword::about: return "<about>";
        case Keyword::comment: return "<comment>";
        case Keyword::playlist: return "<playlist>";
        case Keyword::related: return "<related>";
        case Keyword::query: return "<query>";
        case Keyword::recommend: return "<recommend>";
    }
    return "<kw?>";
}
}  // namespace

Vocabulary::Vocabulary(const WorldConfig& config) : config_(config) {
    config.validate();
    int next = keyword_base_ + kNumKeywords;
    song_base_ = next;
    next += config.n_songs;
    artist_base_ = next;
    next += config.n_artists;
    genre_base_ = next;
    next += config.n_genres;
    tag_base_ = next;
    next += config.tag_lexicon_size;
    state_base_ = next;
    next += config.n_states;
    feedback_base_ = next;
    next += kNumFeedback;
    age_base_ = next;
    next += kNumAgeBuckets;
    gender_base_ = next;
    next += kNumGenders;
    occupation_base_ = next;
    next += kNumOccupations;
    size_ = next;
}

int Vocabulary::check(int value, int lo, int n, const char* what) const {
    if (value < 0 || value >= n)
        throw InputError(std::string(what) + " out of range: " + std::to_string(value));
    return lo + value;
}

int Vocabulary::song_token(int song_id) const {
    return check(song_id, song_base_, config_.n_songs, "song_id");
}
int Vocabulary::artist_token(int artist_id) const {
    return check(artist_id, artist_base_, config_.n_artists, "artist_id");
}
int Vocabulary::genre_token(int genre) const {
    return check(genre, genre_base_, config_.n_genres, "genre");
}
int Vocabulary::tag_token(int tag) const {
    return check(tag, tag_base_, config_.tag_lexicon_size, "tag");
}
int Vocabulary::state_token(int state) const {
    return check(state, state_base_, config_.n_states, "state");
}
int Vocabulary::feedback_token(FeedbackLabel f) const {
    return feedback_base_ + static_cast<int>(f);
}
int Vocabulary::age_token(int age_bucket) const {
    return check(age_bucket, age_base_, kNumAgeBuckets, "age_bucket");
}
int Vocabulary::gender_token(int gender) const {
    return check(gender, gender_base_, kNumGenders, "gender");
}
int Vocabulary::occupation_token(int occupation) const {
    return check(occupation, occupation_base_, kNumOccupations, "occupation");
}

int Vocabulary::song_id(int token) const {
    if (!is_song(token)) throw InputError("not a song token: " + std::to_string(token));
    return token - song_base_;
}
int Vocabulary::tag_id(int token) const {
    if (!is_tag(token)) throw InputError("not a tag token: " + std::to_string(token));
    return token - tag_base_;
}
int Vocabulary::state_id(int token) const {
    if (!is_state(token)) throw InputError("not a state token: " + std::to_string(token));
    return token - state_base_;
}
FeedbackLabel Vocabulary::feedback_label(int token) const {
    if (!is_feedback(token)) throw InputError("not a feedback token: " + std::to_string(token));
    return static_cast<FeedbackLabel>(token - feedback_base_);
}

std::string Vocabulary::name(int token, const World* world) const {
    if (token == kBos) return "<bos>";
    if (token == kEos) return "<eos>";
    if (token == kSep) return "<sep>";
    if (token >= keyword_base_ && token < song_base_)
        return keyword_name(static_cast<Keyword>(token - keyword_base_));
    if (is_song(token)) {
        const int id = token - song_base_;
        if (world) {
            const auto& s = world->song(id);
            std::string n = s.title_stem;
            if (s.title_suffix != TitleSuffix::plain)
                n += std::string("(") + to_string(s.title_suffix) + ")";
            return n;
        }
        return "song" + std::to_string(id);
    }
    if (token >= artist_base_ && token < genre_base_)
        return "artist" + std::to_string(token - artist_base_);
    if (token >= genre_base_ && token < tag_base_)
        return "genre" + std::to_string(token - genre_base_);
    if (is_tag(token)) return "tag" + std::to_string(token - tag_base_);
    if (is_state(token)) return "state" + std::to_string(token - state_base_);
    if (is_feedback(token)) return to_string(feedback_label(token));
    if (token >= age_base_ && token < gender_base_)
        return "age" + std::to_string(token - age_base_);
    if (token >= gender_base_ && token < occupation_base_)
        return "gender" + std::to_string(token - gender_base_);
    if (token >= occupation_base_ && token < size_)
        return "occ" + std::to_string(token - occupation_base_);
    throw InputError("token out of vocabulary: " + std::to_string(token));
}

}  // namespace minstrel
