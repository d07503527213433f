#include "minstrel/rng.hpp"

#include <algorithm>

namespace minstrel {

size_t argmax(std::span<const double> logits) {
    size_t best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return best;
}

size_t Rng::categorical_logits(std::span<const double> logits, double temperature) {
    if (temperature <= 0.0) return argmax(logits);
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> w(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp((logits[i] - m) / temperature);
    }
    return categorical(w);
}

}  // namespace minstrel
