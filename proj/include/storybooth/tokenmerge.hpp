#pragma once

#include <algorithm>
#include <vector>

#include "storybooth/errors.hpp"
#include "storybooth/linalg.hpp"

namespace storybooth {

// Sentinel target for tokens with an all-zero gate row; such tokens pass
// through merging unchanged.
inline constexpr int kSelfTarget = -1;

// Cross-frame attention weights with the same-frame blocks zeroed, stored at
// BN x BN. Entry ((l,i),(l',j)) is the attention weight when l != l', else 0.
struct MergeGate {
    int frames = 0;
    int tokens = 0;
    Matrix values; // BN x BN

    double at(int src_frame, int src_token, int dst_frame, int dst_token) const {
        return values(src_frame * tokens + src_token, dst_frame * tokens + dst_token);
    }
};

// Per source token: the flat token index of its best cross-frame match (or
// kSelfTarget) and the gated weight at that match.
struct MergeMatch {
    std::vector<int> target;
    std::vector<double> score;
};

// Zero out the diagonal frame blocks of the cross-frame weights so matches
// can only land in a different frame.
inline MergeGate build_merge_gate(const Matrix& weights, int frames, int tokens) {
    if (frames < 1 || tokens < 1) throw UsageError("build_merge_gate: frames and tokens must be >= 1");
    if (weights.rows != weights.cols || weights.rows != frames * tokens) {
        throw UsageError("build_merge_gate: weights must be (frames*tokens) square");
    }
    MergeGate gate;
    gate.frames = frames;
    gate.tokens = tokens;
    gate.values = weights;
    for (int l = 0; l < frames; ++l) {
        for (int i = 0; i < tokens; ++i) {
            for (int j = 0; j < tokens; ++j) {
                gate.values(l * tokens + i, l * tokens + j) = 0.0;
            }
        }
    }
    return gate;
}

// Argmax over the gated weights, per source token. Ties break to the lowest
// flat index; an all-zero row maps to kSelfTarget.
inline MergeMatch match_tokens(const MergeGate& gate) {
    const int bn = gate.frames * gate.tokens;
    MergeMatch match;
    match.target.assign(static_cast<std::size_t>(bn), kSelfTarget);
    match.score.assign(static_cast<std::size_t>(bn), 0.0);
    for (int s = 0; s < bn; ++s) {
        int best = kSelfTarget;
        double best_score = 0.0;
        for (int t = 0; t < bn; ++t) {
            const double w = gate.values(s, t);
            if (w > best_score) {
                best_score = w;
                best = t;
            }
        }
        match.target[s] = best;
        match.score[s] = best_score;
    }
    return match;
}

// O_merge = (1 - alpha) * O_src + alpha * O_src[target]. Self targets copy
// through untouched, which also makes alpha = 0 an exact identity.
inline Tensor3 merge_tokens(const Tensor3& src, const MergeMatch& match, double alpha) {
    if (!(alpha >= -1.0 && alpha <= 1.0)) throw UsageError("merge_tokens: alpha must lie in [-1, 1]");
    const int bn = src.frames * src.tokens;
    if (static_cast<int>(match.target.size()) != bn) {
        throw UsageError("merge_tokens: match size does not agree with source tensor");
    }
    Tensor3 out = src;
    if (alpha == 0.0) return out;
    const Matrix flat = src.flatten();
    for (int s = 0; s < bn; ++s) {
        const int t = match.target[s];
        if (t == kSelfTarget) continue;
        if (t < 0 || t >= bn) throw UsageError("merge_tokens: match target out of range");
        for (int c = 0; c < src.channels; ++c) {
            out.data[static_cast<std::size_t>(s) * src.channels + c] =
                (1.0 - alpha) * flat(s, c) + alpha * flat(t, c);
        }
    }
    return out;
}

// One schedule window: alpha applies for t in [t_low, t_high], with shared
// endpoints resolved in favor of the higher window.
struct MergeWindow {
    double t_high = 0.0;
    double t_low = 0.0;
    double alpha = 0.0;
};

// Ordered timestep windows. Outside every window alpha is 0. Windows may meet
// at endpoints but must not overlap in their interiors; the shared timestep
// belongs to the higher (earlier in denoising) window.
class MergeSchedule {
public:
    MergeSchedule() = default;

    static MergeSchedule make(std::vector<MergeWindow> windows) {
        std::stable_sort(windows.begin(), windows.end(),
                         [](const MergeWindow& a, const MergeWindow& b) { return a.t_high > b.t_high; });
        std::vector<std::string> issues;
        for (std::size_t i = 0; i < windows.size(); ++i) {
            const auto& w = windows[i];
            if (!(w.t_high > w.t_low)) {
                issues.push_back("window " + std::to_string(i) + ": t_high must exceed t_low");
            }
            if (!(w.alpha >= -1.0 && w.alpha <= 1.0)) {
                issues.push_back("window " + std::to_string(i) + ": alpha must lie in [-1, 1]");
            }
            if (i + 1 < windows.size() && windows[i + 1].t_high > w.t_low) {
                issues.push_back("windows overlap near t = " + std::to_string(windows[i + 1].t_high));
            }
        }
        if (!issues.empty()) throw ValidationError("invalid merge schedule", std::move(issues));
        MergeSchedule s;
        s.windows_ = std::move(windows);
        return s;
    }

    // Negative unmerge early for pose variance, then positive merging for
    // consistency, then none.
    static MergeSchedule paper_default() {
        return make({{1000.0, 950.0, -0.5}, {950.0, 600.0, 0.4}});
    }

    double alpha_at(double t) const {
        if (t < 0.0) throw UsageError("alpha_at: timestep must be >= 0");
        for (const auto& w : windows_) {
            if (t >= w.t_low && t <= w.t_high) return w.alpha;
        }
        return 0.0;
    }

    const std::vector<MergeWindow>& windows() const { return windows_; }

private:
    std::vector<MergeWindow> windows_; // sorted by descending t_high
};

inline double alpha_at(const MergeSchedule& schedule, double t) { return schedule.alpha_at(t); }

} // namespace storybooth
