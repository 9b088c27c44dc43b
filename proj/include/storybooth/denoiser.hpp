#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "storybooth/attention.hpp"
#include "storybooth/errors.hpp"
#include "storybooth/linalg.hpp"
#include "storybooth/rng.hpp"

namespace storybooth {

// A tiny deterministic stand-in for a diffusion UNet: a stack of attention
// layers with seeded fixed weights. It never learns anything; it exists so the
// attention and merging machinery can be driven end to end and measured.
struct ToyDenoiserConfig {
    int layers = 2;
    int channels = 16;
    int heads = 2;
    std::uint64_t weight_seed = 0;
};

inline void validate_denoiser_config(const ToyDenoiserConfig& config) {
    std::vector<std::string> issues;
    if (config.layers < 1) issues.push_back("layers must be >= 1");
    if (config.channels < 1) issues.push_back("channels must be >= 1");
    if (config.heads < 1) issues.push_back("heads must be >= 1");
    if (config.heads >= 1 && config.channels >= 1 && config.channels % config.heads != 0) {
        issues.push_back("channels must be divisible by heads");
    }
    if (!issues.empty()) throw ValidationError("invalid denoiser config", std::move(issues));
}

struct DenoiserLayer {
    ProjectionSet proj;
    Matrix w_ff; // channels x channels residual mix
};

namespace detail {

// Every entry is an independent keyed draw, scaled so row norms stay O(1).
inline Matrix seeded_matrix(int rows, int cols, double scale, std::uint64_t seed,
                            std::uint64_t tag) {
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            m(r, c) = scale * rng::gaussian({seed, tag, static_cast<std::uint64_t>(r),
                                             static_cast<std::uint64_t>(c)});
        }
    }
    return m;
}

} // namespace detail

inline std::vector<DenoiserLayer> build_denoiser(const ToyDenoiserConfig& config) {
    validate_denoiser_config(config);
    const int c = config.channels;
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    std::vector<DenoiserLayer> layers;
    layers.reserve(static_cast<std::size_t>(config.layers));
    for (int l = 0; l < config.layers; ++l) {
        const auto lk = static_cast<std::uint64_t>(l);
        DenoiserLayer layer{
            ProjectionSet{detail::seeded_matrix(c, c, scale, config.weight_seed, rng::key({lk, 1})),
                          detail::seeded_matrix(c, c, scale, config.weight_seed, rng::key({lk, 2})),
                          detail::seeded_matrix(c, c, scale, config.weight_seed, rng::key({lk, 3})),
                          {},
                          config.heads},
            detail::seeded_matrix(c, c, scale, config.weight_seed, rng::key({lk, 4}))};
        validate_projections(layer.proj, c);
        layers.push_back(std::move(layer));
    }
    return layers;
}

// Direction a subject's region is pulled toward during compositing. Depends
// only on identity, local prompt, and layer, so the same character gets the
// same pull in every frame while different prompts diverge.
inline std::vector<double> subject_bias(const std::string& subject_id,
                                        const std::string& local_prompt, int layer, int channels) {
    if (channels < 1) throw UsageError("subject_bias: channels must be >= 1");
    const std::uint64_t base = rng::key(
        {rng::hash_bytes(subject_id), rng::hash_bytes(local_prompt), static_cast<std::uint64_t>(layer)});
    std::vector<double> bias(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) {
        bias[static_cast<std::size_t>(c)] = rng::gaussian({base, static_cast<std::uint64_t>(c)});
    }
    return bias;
}

} // namespace storybooth
