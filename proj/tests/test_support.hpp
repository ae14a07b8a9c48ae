#pragma once

#include "rairl/models.hpp"

namespace rairl::testing {

inline ModelShape small_shape() {
    ModelShape s;
    s.vocab = 6;
    s.embedding = 3;
    s.hidden = 4;
    s.context = 2;
    s.bos = token_id(0);
    s.eos = token_id(1);
    return s;
}

// Weights far from the tiny init range so every path carries gradient.
inline ParameterSet spread(ParameterSet p, Rng& rng, double range = 0.7) {
    for (std::size_t b = 0; b < p.block_count(); ++b) {
        fill_uniform(p[b], rng, -range, range);
    }
    return p;
}

inline PolicyNet random_policy(const ModelShape& s, Rng& rng) {
    return PolicyNet(s, spread(PolicyNet::layout(s), rng));
}

inline DiscriminatorNet random_disc(const ModelShape& s, Rng& rng, double gamma = 1.0) {
    return DiscriminatorNet(s, spread(DiscriminatorNet::layout(s), rng), gamma);
}

inline Vector random_context(const ModelShape& s, Rng& rng) {
    Vector c(s.context);
    for (double& x : c) {
        x = rng.uniform(-1.0, 1.0);
    }
    return c;
}

// Content tokens then EOS; length in [1, max_len].
inline TokenSeq random_tokens(const ModelShape& s, Rng& rng, std::size_t max_len = 5) {
    const std::size_t n = 1 + rng.index(max_len);
    TokenSeq out;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        out.push_back(token_id(2 + rng.index(s.vocab - 2)));
    }
    out.push_back(s.eos);
    return out;
}

}  // namespace rairl::testing
