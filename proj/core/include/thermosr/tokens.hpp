#pragma once

#include <string>
#include <vector>

#include "thermosr/errors.hpp"
#include "thermosr/tensor.hpp"

namespace thermosr {

// Multi-scale token pyramid: one row-major index grid per scale, coarse to
// fine. Produced by the residual quantizer, consumed by the generator and
// the losses.
struct TokenMap {
    struct Scale {
        int h = 0;
        int w = 0;
    };
    std::vector<Scale> scales;
    std::vector<std::vector<int>> tokens;  // tokens[k] has scales[k].h * scales[k].w entries

    int num_scales() const { return static_cast<int>(scales.size()); }
    int total_tokens() const {
        int n = 0;
        for (const auto& s : scales) n += s.h * s.w;
        return n;
    }
    // Throws validation_error on ragged or out-of-range content.
    void validate(int vocab) const {
        if (scales.size() != tokens.size())
            throw validation_error("TokenMap: scale/token list size mismatch");
        for (std::size_t k = 0; k < scales.size(); ++k) {
            const auto& s = scales[k];
            if (s.h < 1 || s.w < 1) throw validation_error("TokenMap: empty scale");
            if (static_cast<int>(tokens[k].size()) != s.h * s.w)
                throw validation_error("TokenMap: token count does not match scale grid at scale " +
                                       std::to_string(k));
            for (int t : tokens[k])
                if (t < 0 || t >= vocab)
                    throw validation_error("TokenMap: token index out of range");
        }
    }
};

// Per-scale logits, each entry [h_k*w_k, K].
struct LogitsPyramid {
    std::vector<Tensor> per_scale;

    int num_scales() const { return static_cast<int>(per_scale.size()); }
};

}  // namespace thermosr
