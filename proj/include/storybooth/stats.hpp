#pragma once

#include <cmath>
#include <vector>

#include "storybooth/errors.hpp"

namespace storybooth {

// One-sided sign test p-value: P(X >= wins) for X ~ Binomial(wins + losses,
// 1/2). Ties must already be excluded. Exact to double rounding.
inline double sign_test_p(int wins, int losses) {
    if (wins < 0 || losses < 0) throw UsageError("sign_test_p: counts must be non-negative");
    const int n = wins + losses;
    if (n == 0) return 1.0;
    if (n > 1000) throw UsageError("sign_test_p: sized for n <= 1000");
    double term = std::pow(0.5, n); // C(n, 0) / 2^n
    double tail = 0.0;
    for (int k = 0; k <= n; ++k) {
        if (k >= wins) tail += term;
        term *= static_cast<double>(n - k) / (k + 1.0);
    }
    return tail < 1.0 ? tail : 1.0;
}

struct PairedComparison {
    int wins = 0;   // a[i] > b[i]
    int losses = 0; // a[i] < b[i]
    int ties = 0;
    double p_value = 1.0; // one-sided, for the hypothesis "a exceeds b"
};

inline PairedComparison paired_sign_test(const std::vector<double>& a,
                                         const std::vector<double>& b) {
    if (a.size() != b.size()) throw UsageError("paired_sign_test: length mismatch");
    PairedComparison out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > b[i]) ++out.wins;
        else if (a[i] < b[i]) ++out.losses;
        else ++out.ties;
    }
    out.p_value = sign_test_p(out.wins, out.losses);
    return out;
}

} // namespace storybooth
