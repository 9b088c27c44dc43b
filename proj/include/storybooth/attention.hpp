#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "storybooth/errors.hpp"
#include "storybooth/linalg.hpp"
#include "storybooth/masks.hpp"

namespace storybooth {

// Q/K/V projections shared by all frames. d = w_q.cols must be divisible by
// heads; w_o maps the concatenated heads back to the feature width and
// defaults to identity (requiring d == C).
struct ProjectionSet {
    Matrix w_q;
    Matrix w_k;
    Matrix w_v;
    std::optional<Matrix> w_o;
    int heads = 1;

    int model_dim() const { return w_q.cols; }
    int head_dim() const { return w_q.cols / heads; }
};

inline void validate_projections(const ProjectionSet& proj, int channels) {
    if (proj.heads < 1) throw UsageError("projection set needs at least one head");
    if (proj.w_q.rows != channels || proj.w_k.rows != channels || proj.w_v.rows != channels) {
        throw UsageError("projection rows must equal the feature channel count");
    }
    if (proj.w_q.cols != proj.w_k.cols || proj.w_q.cols != proj.w_v.cols) {
        throw UsageError("q/k/v projections must share output width");
    }
    if (proj.w_q.cols % proj.heads != 0) {
        throw UsageError("model dim must be divisible by head count");
    }
    if (proj.w_o) {
        if (proj.w_o->rows != proj.w_q.cols || proj.w_o->cols != channels) {
            throw UsageError("output projection must map model dim back to channels");
        }
    } else if (proj.w_q.cols != channels) {
        throw UsageError("without an output projection, model dim must equal channels");
    }
}

// Attention output plus the post-softmax weights (head-averaged) that token
// merging consumes. weights is N x N for intra scope, BN x BN for cross.
struct AttentionResult {
    Tensor3 output;
    Matrix weights;
};

// Row-stochastic masked softmax. Masked entries are exactly zero; the row max
// is taken over allowed entries only, so a constant shift of a score row
// cannot change the result.
inline Matrix masked_softmax(const Matrix& scores, const AttentionMask& mask) {
    if (scores.rows != scores.cols) throw UsageError("masked_softmax: scores must be square");
    if (mask.dim != scores.rows) throw UsageError("masked_softmax: mask/scores shape mismatch");
    if (!all_finite(scores)) throw NumericError("masked_softmax scores");

    Matrix out(scores.rows, scores.cols);
    for (int i = 0; i < scores.rows; ++i) {
        double row_max = 0.0;
        bool any = false;
        for (int j = 0; j < scores.cols; ++j) {
            if (!mask.at(i, j)) continue;
            if (!any || scores(i, j) > row_max) row_max = scores(i, j);
            any = true;
        }
        if (!any) throw UsageError("masked_softmax: fully masked row " + std::to_string(i));
        double denom = 0.0;
        for (int j = 0; j < scores.cols; ++j) {
            if (!mask.at(i, j)) continue;
            const double e = std::exp(scores(i, j) - row_max);
            out(i, j) = e;
            denom += e;
        }
        for (int j = 0; j < scores.cols; ++j) {
            if (mask.at(i, j)) out(i, j) /= denom;
        }
    }
    return out;
}

namespace detail {

// Shared core: multi-head masked attention on a flat T x C token matrix.
// The binary mask is broadcast to every head; returned weights are the mean
// over heads.
inline AttentionResult masked_attention_core(const Matrix& tokens_flat, const ProjectionSet& proj,
                                             const AttentionMask& mask, int frames) {
    validate_projections(proj, tokens_flat.cols);
    const int t = tokens_flat.rows;
    if (mask.dim != t) throw UsageError("attention: mask dimension does not match token count");
    if (!all_finite(tokens_flat)) throw NumericError("attention input features");

    const int d = proj.model_dim();
    const int dk = proj.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    const Matrix q = matmul(tokens_flat, proj.w_q);
    const Matrix k = matmul(tokens_flat, proj.w_k);
    const Matrix v = matmul(tokens_flat, proj.w_v);
    if (!all_finite(q) || !all_finite(k) || !all_finite(v)) throw NumericError("attention projection");

    Matrix concat(t, d);
    Matrix weights(t, t);
    Matrix scores(t, t);
    for (int h = 0; h < proj.heads; ++h) {
        const int off = h * dk;
        for (int i = 0; i < t; ++i) {
            for (int j = 0; j < t; ++j) {
                double s = 0.0;
                for (int c = 0; c < dk; ++c) s += q(i, off + c) * k(j, off + c);
                scores(i, j) = s * scale;
            }
        }
        if (!all_finite(scores)) throw NumericError("attention scores");
        const Matrix a = masked_softmax(scores, mask);
        for (int i = 0; i < t; ++i) {
            for (int j = 0; j < t; ++j) {
                const double aij = a(i, j);
                weights(i, j) += aij / proj.heads;
                if (aij == 0.0) continue;
                for (int c = 0; c < dk; ++c) concat(i, off + c) += aij * v(j, off + c);
            }
        }
    }

    Matrix out_flat = proj.w_o ? matmul(concat, *proj.w_o) : concat;
    if (!all_finite(out_flat)) throw NumericError("attention output");

    AttentionResult res;
    res.output = Tensor3::from_flat(out_flat, frames);
    res.weights = std::move(weights);
    return res;
}

} // namespace detail

// Intra-frame bounded self-attention on one frame slice (N x C features).
inline AttentionResult bounded_self_attention(const Matrix& frame_features,
                                              const ProjectionSet& proj,
                                              const AttentionMask& mask) {
    if (mask.scope != MaskScope::intra) {
        throw UsageError("bounded_self_attention expects an intra-scope mask");
    }
    return detail::masked_attention_core(frame_features, proj, mask, 1);
}

// Joint attention over the frame-major flattening of all frames' tokens.
// Output comes back reshaped to B x N x C; weights stay at BN x BN for the
// token-merging stage. A single call is one whole-batch computation.
inline AttentionResult cross_frame_bounded_attention(const Tensor3& features,
                                                     const ProjectionSet& proj,
                                                     const AttentionMask& mask) {
    if (mask.scope != MaskScope::cross) {
        throw UsageError("cross_frame_bounded_attention expects a cross-scope mask");
    }
    return detail::masked_attention_core(features.flatten(), proj, mask, features.frames);
}

// Brute-force single-head reference: double-loop masked softmax then weighted
// sum, with nothing beyond max subtraction. Scores use 1/sqrt(q.cols).
inline Matrix oracle_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                               const AttentionMask& mask) {
    if (q.rows != k.rows || q.rows != v.rows || q.cols != k.cols) {
        throw UsageError("oracle_attention: shape mismatch");
    }
    if (q.rows > 256) throw UsageError("oracle_attention: sized for token counts <= 256");
    if (mask.dim != q.rows) throw UsageError("oracle_attention: mask shape mismatch");
    const int t = q.rows;
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols));

    Matrix out(t, v.cols);
    for (int i = 0; i < t; ++i) {
        double row_max = 0.0;
        bool any = false;
        for (int j = 0; j < t; ++j) {
            if (!mask.at(i, j)) continue;
            double s = 0.0;
            for (int c = 0; c < q.cols; ++c) s += q(i, c) * k(j, c);
            s *= scale;
            if (!any || s > row_max) row_max = s;
            any = true;
        }
        if (!any) throw UsageError("oracle_attention: fully masked row");
        double denom = 0.0;
        std::vector<double> num(static_cast<std::size_t>(t), 0.0);
        for (int j = 0; j < t; ++j) {
            if (!mask.at(i, j)) continue;
            double s = 0.0;
            for (int c = 0; c < q.cols; ++c) s += q(i, c) * k(j, c);
            num[j] = std::exp(s * scale - row_max);
            denom += num[j];
        }
        for (int j = 0; j < t; ++j) {
            if (!mask.at(i, j)) continue;
            const double a = num[j] / denom;
            for (int c = 0; c < v.cols; ++c) out(i, c) += a * v(j, c);
        }
    }
    return out;
}

// Mean attention mass each subject's source tokens spend on tokens that
// belong to some other subject (and not to the source subject itself).
// weights may be N x N (single frame) or BN x BN; B is inferred.
inline std::map<int, double> leakage_fraction(const Matrix& weights,
                                              const std::vector<SubjectMask>& masks,
                                              const TokenGrid& grid) {
    validate_grid(grid);
    const int n = grid.tokens();
    if (weights.rows != weights.cols) throw UsageError("leakage_fraction: weights must be square");
    if (weights.rows % n != 0) {
        throw UsageError("leakage_fraction: weights dimension is not a multiple of grid tokens");
    }
    const int b = weights.rows / n;
    const int bn = weights.rows;
    detail::check_subject_masks(masks, n);

    std::map<int, std::vector<std::uint8_t>> occupancy; // subject -> BN bits
    for (const auto& m : masks) {
        if (m.frame < 0 || m.frame >= b) throw UsageError("leakage_fraction: mask frame out of range");
        auto& vec = occupancy[m.subject];
        if (vec.empty()) vec.assign(static_cast<std::size_t>(bn), 0);
        for (int i = 0; i < n; ++i) vec[static_cast<std::size_t>(m.frame) * n + i] = m.bits[i];
    }

    std::map<int, double> leakage;
    for (const auto& [subject, own] : occupancy) {
        // Tokens of any other subject, excluding tokens the source subject
        // also covers (overlap is not leakage away from oneself).
        std::vector<std::uint8_t> other(static_cast<std::size_t>(bn), 0);
        for (const auto& [k2, vec] : occupancy) {
            if (k2 == subject) continue;
            for (int i = 0; i < bn; ++i) {
                if (vec[i] && !own[i]) other[i] = 1;
            }
        }
        double total = 0.0;
        int sources = 0;
        for (int i = 0; i < bn; ++i) {
            if (!own[i]) continue;
            ++sources;
            double mass = 0.0;
            for (int j = 0; j < bn; ++j) {
                if (other[j]) mass += weights(i, j);
            }
            total += mass;
        }
        leakage[subject] = sources > 0 ? total / sources : 0.0;
    }
    return leakage;
}

} // namespace storybooth
