#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "storybooth/errors.hpp"
#include "storybooth/plan.hpp"
#include "storybooth/rng.hpp"

namespace storybooth {

// Token lattice at one attention resolution. N = height * width tokens per
// frame, frame_count frames in the storyboard.
struct TokenGrid {
    int height = 1;
    int width = 1;
    int frame_count = 1;

    int tokens() const { return height * width; }

    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

inline void validate_grid(const TokenGrid& grid) {
    if (grid.height < 1 || grid.width < 1 || grid.frame_count < 1) {
        throw UsageError("token grid dimensions must all be >= 1");
    }
}

// Binary occupancy of one subject in one frame, row-major flattening of the
// H x W lattice. Never empty.
struct SubjectMask {
    int frame = 0;   // 0-based
    int subject = 0; // 0-based index into the run's subject registry
    std::vector<std::uint8_t> bits;

    int popcount() const {
        int n = 0;
        for (auto b : bits) n += b;
        return n;
    }

    friend bool operator==(const SubjectMask&, const SubjectMask&) = default;
};

struct DropoutParams {
    double beta_d = 0.9;
    std::uint64_t seed = 0;
    bool enabled = true;
};

inline void validate_dropout(const DropoutParams& d) {
    if (!(d.beta_d >= 0.0 && d.beta_d <= 1.0)) {
        throw UsageError("beta_d must lie in [0, 1]");
    }
}

enum class MaskScope { intra, cross };

// Dense binary attention gate, N x N (intra, one frame) or BN x BN (cross).
// Diagonal entries are always 1.
struct AttentionMask {
    MaskScope scope = MaskScope::intra;
    int frame = 0; // meaningful for intra scope only
    int dim = 0;
    std::vector<std::uint8_t> bits; // dim x dim row-major

    std::uint8_t at(int i, int j) const {
        return bits[static_cast<std::size_t>(i) * dim + j];
    }
    std::uint8_t& at(int i, int j) {
        return bits[static_cast<std::size_t>(i) * dim + j];
    }
};

// Expected fraction of off-region entries the dropout term leaves allowed.
inline double expected_offregion_density(double beta_d) {
    if (!(beta_d >= 0.0 && beta_d <= 1.0)) throw UsageError("beta_d must lie in [0, 1]");
    return 1.0 - beta_d;
}

// Rasterize a normalized box onto the token lattice. A token is covered when
// its cell center lies inside the box (closed containment). Degenerate boxes
// that trap no center are snapped outward to the single token whose center is
// nearest the box center, lowest flat index on ties, so the result is never
// empty.
inline SubjectMask rasterize_box(const BoundingBox& box, const TokenGrid& grid, int frame,
                                 int subject) {
    validate_grid(grid);
    if (!box.valid()) throw UsageError("rasterize_box: invalid bounding box");
    if (frame < 0 || frame >= grid.frame_count) throw UsageError("rasterize_box: frame out of range");

    SubjectMask mask;
    mask.frame = frame;
    mask.subject = subject;
    mask.bits.assign(static_cast<std::size_t>(grid.tokens()), 0);

    int covered = 0;
    for (int r = 0; r < grid.height; ++r) {
        const double cy = (r + 0.5) / grid.height;
        for (int c = 0; c < grid.width; ++c) {
            const double cx = (c + 0.5) / grid.width;
            if (cx >= box.x0 && cx <= box.x1 && cy >= box.y0 && cy <= box.y1) {
                mask.bits[static_cast<std::size_t>(r) * grid.width + c] = 1;
                ++covered;
            }
        }
    }
    if (covered == 0) {
        const double bx = 0.5 * (box.x0 + box.x1);
        const double by = 0.5 * (box.y0 + box.y1);
        int best = 0;
        double best_d2 = -1.0;
        for (int r = 0; r < grid.height; ++r) {
            const double cy = (r + 0.5) / grid.height;
            for (int c = 0; c < grid.width; ++c) {
                const double cx = (c + 0.5) / grid.width;
                const double d2 = (cx - bx) * (cx - bx) + (cy - by) * (cy - by);
                if (best_d2 < 0.0 || d2 < best_d2) {
                    best_d2 = d2;
                    best = r * grid.width + c;
                }
            }
        }
        mask.bits[static_cast<std::size_t>(best)] = 1;
    }
    return mask;
}

// Occupancy-preserving nearest-neighbor resample between token resolutions.
// A target cell is set when any source cell overlapping its area is set, so
// downsampling never drops a subject and the output stays non-empty.
inline SubjectMask resample_mask(const SubjectMask& mask, const TokenGrid& from,
                                 const TokenGrid& to) {
    validate_grid(from);
    validate_grid(to);
    if (from.frame_count != to.frame_count) {
        throw UsageError("resample_mask: grids must share frame_count");
    }
    if (static_cast<int>(mask.bits.size()) != from.tokens()) {
        throw UsageError("resample_mask: mask size does not match source grid");
    }

    SubjectMask out;
    out.frame = mask.frame;
    out.subject = mask.subject;
    out.bits.assign(static_cast<std::size_t>(to.tokens()), 0);

    // Cells overlap iff their [k/K, (k+1)/K) spans intersect with positive
    // length; the comparisons below are that condition cleared of division.
    for (int r = 0; r < to.height; ++r) {
        for (int c = 0; c < to.width; ++c) {
            bool any = false;
            for (int i = 0; i < from.height && !any; ++i) {
                if (static_cast<long long>(i) * to.height >= static_cast<long long>(r + 1) * from.height) break;
                if (static_cast<long long>(i + 1) * to.height <= static_cast<long long>(r) * from.height) continue;
                for (int j = 0; j < from.width; ++j) {
                    if (static_cast<long long>(j) * to.width >= static_cast<long long>(c + 1) * from.width) break;
                    if (static_cast<long long>(j + 1) * to.width <= static_cast<long long>(c) * from.width) continue;
                    if (mask.bits[static_cast<std::size_t>(i) * from.width + j]) {
                        any = true;
                        break;
                    }
                }
            }
            out.bits[static_cast<std::size_t>(r) * to.width + c] = any ? 1 : 0;
        }
    }
    return out;
}

namespace detail {

// Scope tag folded into the dropout draw key so intra and cross masks used in
// the same step do not share uniform draws.
inline std::uint64_t scope_tag(MaskScope scope, int frame) {
    return scope == MaskScope::intra ? (0x10000000ull + static_cast<std::uint64_t>(frame))
                                     : 0x20000000ull;
}

inline void check_subject_masks(const std::vector<SubjectMask>& masks, int tokens) {
    for (const auto& m : masks) {
        if (static_cast<int>(m.bits.size()) != tokens) {
            throw UsageError("subject mask size does not match grid");
        }
        if (m.popcount() == 0) {
            throw UsageError("empty subject masks are rejected");
        }
    }
}

} // namespace detail

// Intra-frame attention mask: (i, j) allowed when some subject covers both
// tokens; otherwise allowed with probability (1 - beta_d) via a fresh uniform
// draw per entry; the diagonal is always allowed. With dropout disabled the
// off-region entries are 0.
inline AttentionMask build_intra_mask(const std::vector<SubjectMask>& masks, const TokenGrid& grid,
                                      const DropoutParams& dropout) {
    validate_grid(grid);
    validate_dropout(dropout);
    const int n = grid.tokens();
    detail::check_subject_masks(masks, n);
    int frame = masks.empty() ? 0 : masks.front().frame;
    for (const auto& m : masks) {
        if (m.frame != frame) throw UsageError("build_intra_mask: masks from mixed frames");
    }

    AttentionMask out;
    out.scope = MaskScope::intra;
    out.frame = frame;
    out.dim = n;
    out.bits.assign(static_cast<std::size_t>(n) * n, 0);

    const std::uint64_t tag = detail::scope_tag(MaskScope::intra, frame);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            bool allowed = (i == j);
            if (!allowed) {
                for (const auto& m : masks) {
                    if (m.bits[i] && m.bits[j]) {
                        allowed = true;
                        break;
                    }
                }
            }
            if (!allowed && dropout.enabled) {
                allowed = rng::uniform({dropout.seed, tag, static_cast<std::uint64_t>(i),
                                        static_cast<std::uint64_t>(j)}) > dropout.beta_d;
            }
            out.at(i, j) = allowed ? 1 : 0;
        }
    }
    return out;
}

// Cross-frame attention mask over the frame-major flattening (frame 0 tokens
// first). A pair is allowed when both tokens lie in the same subject's region
// in their respective frames; the dropout and diagonal rules match
// build_intra_mask. Subjects absent from a frame simply contribute nothing
// there.
inline AttentionMask build_cross_mask(const std::vector<SubjectMask>& masks, const TokenGrid& grid,
                                      const DropoutParams& dropout) {
    validate_grid(grid);
    validate_dropout(dropout);
    const int n = grid.tokens();
    const int b = grid.frame_count;
    const int bn = b * n;
    detail::check_subject_masks(masks, n);

    std::set<std::pair<int, int>> seen;
    std::map<int, std::vector<std::uint8_t>> concat; // subject -> BN occupancy
    for (const auto& m : masks) {
        if (m.frame < 0 || m.frame >= b) throw UsageError("build_cross_mask: frame out of range");
        if (!seen.insert({m.frame, m.subject}).second) {
            throw UsageError("build_cross_mask: duplicate (frame, subject) mask");
        }
        auto& vec = concat[m.subject];
        if (vec.empty()) vec.assign(static_cast<std::size_t>(bn), 0);
        for (int i = 0; i < n; ++i) {
            vec[static_cast<std::size_t>(m.frame) * n + i] = m.bits[i];
        }
    }

    AttentionMask out;
    out.scope = MaskScope::cross;
    out.frame = -1;
    out.dim = bn;
    out.bits.assign(static_cast<std::size_t>(bn) * bn, 0);

    const std::uint64_t tag = detail::scope_tag(MaskScope::cross, 0);
    for (int i = 0; i < bn; ++i) {
        for (int j = 0; j < bn; ++j) {
            bool allowed = (i == j);
            if (!allowed) {
                for (const auto& [subject, vec] : concat) {
                    if (vec[i] && vec[j]) {
                        allowed = true;
                        break;
                    }
                }
            }
            if (!allowed && dropout.enabled) {
                allowed = rng::uniform({dropout.seed, tag, static_cast<std::uint64_t>(i),
                                        static_cast<std::uint64_t>(j)}) > dropout.beta_d;
            }
            out.at(i, j) = allowed ? 1 : 0;
        }
    }
    return out;
}

// All-allowed mask; the unbounded baseline uses this shape.
inline AttentionMask all_ones_mask(MaskScope scope, int dim, int frame = 0) {
    AttentionMask out;
    out.scope = scope;
    out.frame = scope == MaskScope::intra ? frame : -1;
    out.dim = dim;
    out.bits.assign(static_cast<std::size_t>(dim) * dim, 1);
    return out;
}

} // namespace storybooth
