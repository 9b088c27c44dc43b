#include "catch_amalgamated.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

#include "storybooth/errors.hpp"
#include "storybooth/linalg.hpp"
#include "storybooth/rng.hpp"
#include "storybooth/tokenmerge.hpp"

using namespace storybooth;

namespace {

Matrix random_weights(int dim, std::uint64_t seed) {
    Matrix w(dim, dim);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j)
            w(i, j) = rng::uniform({seed, static_cast<std::uint64_t>(i),
                                    static_cast<std::uint64_t>(j)});
    return w;
}

Tensor3 random_tensor(int b, int n, int c, std::uint64_t seed) {
    Tensor3 t(b, n, c);
    for (std::size_t i = 0; i < t.data.size(); ++i)
        t.data[i] = rng::gaussian({seed, static_cast<std::uint64_t>(i)});
    return t;
}

} // namespace

TEST_CASE("build_merge_gate zeroes same-frame blocks only") {
    const int b = 2, n = 3;
    Matrix w(b * n, b * n, 1.0);
    const MergeGate gate = build_merge_gate(w, b, n);
    for (int i = 0; i < b * n; ++i) {
        for (int j = 0; j < b * n; ++j) {
            const bool same_frame = (i / n) == (j / n);
            CHECK(gate.values(i, j) == (same_frame ? 0.0 : 1.0));
        }
    }
    CHECK(gate.at(0, 1, 1, 2) == 1.0);
    CHECK(gate.at(0, 1, 0, 2) == 0.0);

    CHECK_THROWS_AS(build_merge_gate(Matrix(5, 5), 2, 3), UsageError);
    CHECK_THROWS_AS(build_merge_gate(Matrix(6, 6), 0, 6), UsageError);
}

TEST_CASE("match_tokens picks the argmax with lowest-index ties") {
    const int b = 2, n = 2;
    Matrix w(4, 4);
    // Token (0,0): equal weight on both frame-1 tokens -> lowest flat index 2.
    w(0, 2) = 0.5;
    w(0, 3) = 0.5;
    // Token (0,1): clear winner at (1,1) = flat 3.
    w(1, 3) = 0.9;
    w(1, 2) = 0.1;
    // Token (1,0): only same-frame mass -> gated away -> self target.
    w(2, 3) = 0.7;
    // Token (1,1): nothing at all.
    const MergeMatch match = match_tokens(build_merge_gate(w, b, n));
    CHECK(match.target[0] == 2);
    CHECK(match.score[0] == 0.5);
    CHECK(match.target[1] == 3);
    CHECK(match.target[2] == kSelfTarget);
    CHECK(match.target[3] == kSelfTarget);
}

TEST_CASE("matches never land in the source frame under fuzzing") {
    const int b = 3, n = 4;
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        const MergeMatch match = match_tokens(build_merge_gate(random_weights(b * n, seed), b, n));
        for (int s = 0; s < b * n; ++s) {
            const int t = match.target[s];
            if (t == kSelfTarget) continue;
            CHECK(t / n != s / n);
        }
    }
}

TEST_CASE("merge_tokens alpha algebra") {
    const int b = 2, n = 3, c = 4;
    const Tensor3 src = random_tensor(b, n, c, 7);
    const MergeMatch match = match_tokens(build_merge_gate(random_weights(b * n, 8), b, n));

    SECTION("alpha = 0 is a bit-exact identity") {
        CHECK(merge_tokens(src, match, 0.0) == src);
    }

    SECTION("distance to target scales by |1 - alpha|") {
        for (double alpha : {-0.5, 0.4, 1.0}) {
            const Tensor3 merged = merge_tokens(src, match, alpha);
            const Matrix flat = src.flatten();
            const Matrix mflat = merged.flatten();
            for (int s = 0; s < b * n; ++s) {
                const int t = match.target[s];
                if (t == kSelfTarget) {
                    for (int ch = 0; ch < c; ++ch) CHECK(mflat(s, ch) == flat(s, ch));
                    continue;
                }
                double before = 0.0, after = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    before += (flat(s, ch) - flat(t, ch)) * (flat(s, ch) - flat(t, ch));
                    after += (mflat(s, ch) - flat(t, ch)) * (mflat(s, ch) - flat(t, ch));
                }
                CHECK_THAT(std::sqrt(after),
                           Catch::Matchers::WithinAbs(std::abs(1.0 - alpha) * std::sqrt(before),
                                                      1e-9));
            }
        }
    }

    SECTION("hand-checked blend value") {
        Tensor3 two(2, 1, 1);
        two(0, 0, 0) = 2.0;
        two(1, 0, 0) = 6.0;
        MergeMatch m;
        m.target = {1, kSelfTarget};
        m.score = {1.0, 0.0};
        const Tensor3 out = merge_tokens(two, m, 0.4);
        CHECK_THAT(out(0, 0, 0), Catch::Matchers::WithinAbs(0.6 * 2.0 + 0.4 * 6.0, 1e-15));
        CHECK(out(1, 0, 0) == 6.0);
    }

    SECTION("negative alpha pushes away from the target") {
        const Tensor3 pushed = merge_tokens(src, match, -0.5);
        const Matrix flat = src.flatten();
        const Matrix pflat = pushed.flatten();
        for (int s = 0; s < b * n; ++s) {
            const int t = match.target[s];
            if (t == kSelfTarget) continue;
            double before = 0.0, after = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                before += (flat(s, ch) - flat(t, ch)) * (flat(s, ch) - flat(t, ch));
                after += (pflat(s, ch) - flat(t, ch)) * (pflat(s, ch) - flat(t, ch));
            }
            CHECK(after >= before); // 1.5^2 x the squared distance
        }
    }
}

TEST_CASE("merge_tokens validates inputs") {
    const Tensor3 src = random_tensor(2, 2, 2, 9);
    MergeMatch match;
    match.target = {0, 1, 2, 3};
    match.score = {0, 0, 0, 0};
    CHECK_THROWS_AS(merge_tokens(src, match, 1.5), UsageError);
    CHECK_THROWS_AS(merge_tokens(src, match, -1.5), UsageError);

    MergeMatch short_match;
    short_match.target = {0};
    CHECK_THROWS_AS(merge_tokens(src, short_match, 0.5), UsageError);

    MergeMatch oob;
    oob.target = {4, kSelfTarget, kSelfTarget, kSelfTarget};
    oob.score = {1, 0, 0, 0};
    CHECK_THROWS_AS(merge_tokens(src, oob, 0.5), UsageError);
}

TEST_CASE("default schedule reproduces the documented alpha values") {
    const MergeSchedule s = MergeSchedule::paper_default();
    CHECK(alpha_at(s, 1000.0) == -0.5);
    CHECK(alpha_at(s, 800.0) == 0.4);
    CHECK(alpha_at(s, 300.0) == 0.0);
    // Shared endpoint belongs to the higher window.
    CHECK(alpha_at(s, 950.0) == -0.5);
    CHECK(alpha_at(s, 600.0) == 0.4);
    CHECK(alpha_at(s, 599.999) == 0.0);
    CHECK(alpha_at(s, 1001.0) == 0.0); // above every window
    CHECK_THROWS_AS(alpha_at(s, -1.0), UsageError);
}

TEST_CASE("schedule construction validates windows") {
    CHECK_NOTHROW(MergeSchedule::make({}));
    CHECK(MergeSchedule::make({}).alpha_at(500.0) == 0.0);

    // Windows meeting at an endpoint are fine.
    CHECK_NOTHROW(MergeSchedule::make({{1000, 900, 0.2}, {900, 700, 0.3}}));
    // Interior overlap is not.
    CHECK_THROWS_AS(MergeSchedule::make({{1000, 800, 0.2}, {900, 700, 0.3}}), ValidationError);
    // Inverted bounds and out-of-range alpha.
    CHECK_THROWS_AS(MergeSchedule::make({{700, 900, 0.2}}), ValidationError);
    CHECK_THROWS_AS(MergeSchedule::make({{900, 700, 1.2}}), ValidationError);

    // Order independence: windows are sorted internally.
    const MergeSchedule a = MergeSchedule::make({{900, 700, 0.3}, {1000, 900, 0.2}});
    CHECK(a.alpha_at(900.0) == 0.2);
    CHECK(a.alpha_at(899.0) == 0.3);
}
