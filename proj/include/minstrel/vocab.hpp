#pragma once

#include <string>
#include <vector>

#include "minstrel/world.hpp"

namespace minstrel {

// Template keywords used by corpus builders and query surface forms.
enum class Keyword : int {
    song = 0,
    artist,
    genre,
    tags,
    about,
    comment,
    playlist,
    related,
    query,
    recommend,
};
constexpr int kNumKeywords = 10;

// Dense token space over the world: specials, template keywords, then one
// token per song, artist, genre, tag, state, feedback label, and profile
// value. Ranges are contiguous and queryable.
class Vocabulary {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kSep = 2;

    explicit Vocabulary(const WorldConfig& config);

    int size() const { return size_; }

    int keyword(Keyword k) const { return keyword_base_ + static_cast<int>(k); }
    int song_token(int song_id) const;
    int artist_token(int artist_id) const;
    int genre_token(int genre) const;
    int tag_token(int tag) const;
    int state_token(int state) const;
    int feedback_token(FeedbackLabel f) const;
    int age_token(int age_bucket) const;
    int gender_token(int gender) const;
    int occupation_token(int occupation) const;

    bool is_song(int token) const { return token >= song_base_ && token < artist_base_; }
    bool is_state(int token) const { return token >= state_base_ && token < feedback_base_; }
    bool is_feedback(int token) const { return token >= feedback_base_ && token < age_base_; }
    bool is_tag(int token) const { return token >= tag_base_ && token < state_base_; }

    int song_id(int token) const;       // inverse of song_token
    int tag_id(int token) const;        // inverse of tag_token
    int state_id(int token) const;      // inverse of state_token
    FeedbackLabel feedback_label(int token) const;

    // Human-readable token name, for debugging and report rendering.
    std::string name(int token, const World* world = nullptr) const;

private:
    int check(int value, int lo, int n, const char* what) const;

    WorldConfig config_;
    int keyword_base_ = 3;
    int song_base_ = 0;
    int artist_base_ = 0;
    int genre_base_ = 0;
    int tag_base_ = 0;
    int state_base_ = 0;
    int feedback_base_ = 0;
    int age_base_ = 0;
    int gender_base_ = 0;
    int occupation_base_ = 0;
    int size_ = 0;
};

}  // namespace minstrel
