// Micro-benchmark: bounded (masked) attention versus the unmasked baseline on
// the same token batch, to put a number on the gate's overhead.

#include <chrono>
#include <cstdint>
#include <iostream>
#include <string>

#include "storybooth/attention.hpp"
#include "storybooth/denoiser.hpp"
#include "storybooth/masks.hpp"
#include "storybooth/plan.hpp"
#include "storybooth/rng.hpp"

using namespace storybooth;

namespace {

double run_once(const Tensor3& tokens, const ProjectionSet& proj, const AttentionMask& mask,
                int reps) {
    const auto start = std::chrono::steady_clock::now();
    double sink = 0.0;
    for (int r = 0; r < reps; ++r) {
        const auto res = cross_frame_bounded_attention(tokens, proj, mask);
        sink += res.output.data[0];
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (sink == 42.0) std::cerr << ""; // keep the loop observable
    return seconds / reps;
}

} // namespace

int main(int argc, char** argv) {
    int b = 3, h = 8, w = 8, c = 32, reps = 20;
    if (argc > 1) reps = std::stoi(argv[1]);

    const TokenGrid grid{h, w, b};
    const int n = grid.tokens();
    Tensor3 tokens(b, n, c);
    for (std::size_t i = 0; i < tokens.data.size(); ++i) {
        tokens.data[i] = rng::gaussian({7, static_cast<std::uint64_t>(i)});
    }
    const auto layers = build_denoiser({1, c, 4, 11});
    const auto& proj = layers[0].proj;

    std::vector<SubjectMask> masks;
    const StoryboardPlan plan = mock_plan({"bench scene", b}, 2, 5);
    for (int f = 0; f < b; ++f) {
        int s = 0;
        for (const auto& layout : plan.frames[static_cast<std::size_t>(f)].layouts) {
            masks.push_back(rasterize_box(layout.box, grid, f, s++));
        }
    }

    const AttentionMask bounded = build_cross_mask(masks, grid, {0.9, 123, true});
    const AttentionMask open = all_ones_mask(MaskScope::cross, b * n);

    const double t_bounded = run_once(tokens, proj, bounded, reps);
    const double t_open = run_once(tokens, proj, open, reps);

    std::cout << "tokens=" << b * n << " channels=" << c << " reps=" << reps << "\n";
    std::cout << "bounded_ms=" << t_bounded * 1e3 << " open_ms=" << t_open * 1e3
              << " ratio=" << t_bounded / t_open << "\n";
    return 0;
}
