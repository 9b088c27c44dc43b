#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "storybooth/errors.hpp"
#include "storybooth/harness.hpp"
#include "storybooth/rng.hpp"
#include "storybooth/stats.hpp"
#include "storybooth/tokenmerge.hpp"

namespace storybooth {

// The three mechanism on/off axes the paired comparisons exercise.
enum class AblationAxis { bounding, merging, negative_window };

inline const char* to_string(AblationAxis axis) {
    switch (axis) {
    case AblationAxis::bounding: return "bounding";
    case AblationAxis::merging: return "merging";
    case AblationAxis::negative_window: return "negative-window";
    }
    throw UsageError("unknown ablation axis");
}

inline AblationAxis ablation_axis_from_string(const std::string& s) {
    if (s == "bounding") return AblationAxis::bounding;
    if (s == "merging") return AblationAxis::merging;
    if (s == "negative-window") return AblationAxis::negative_window;
    throw ValidationError("unknown ablation axis: " + s,
                          {"expected one of: bounding, merging, negative-window"});
}

struct AblationArms {
    RunConfig with_mechanism;
    RunConfig without_mechanism;
    std::string label_with;
    std::string label_without;
    std::string default_metric;
    bool higher_wins = true; // expected sign of (with - without) on the default metric
};

// Derives both arms from one base config so the axis under test is the only
// difference. Merging needs cross bounding, so the bounding axis pins merging
// off in both arms and the other two axes pin bounding to cross.
inline AblationArms derive_ablation_arms(const RunConfig& base, AblationAxis axis) {
    AblationArms arms;
    arms.with_mechanism = base;
    arms.without_mechanism = base;
    switch (axis) {
    case AblationAxis::bounding:
        arms.with_mechanism.bounding = BoundingMode::cross;
        arms.with_mechanism.merging = false;
        arms.without_mechanism.bounding = BoundingMode::off;
        arms.without_mechanism.merging = false;
        arms.label_with = "cross";
        arms.label_without = "off";
        arms.default_metric = "leakage";
        arms.higher_wins = false;
        break;
    case AblationAxis::merging:
        arms.with_mechanism.bounding = BoundingMode::cross;
        arms.with_mechanism.merging = true;
        arms.without_mechanism.bounding = BoundingMode::cross;
        arms.without_mechanism.merging = false;
        arms.label_with = "merging-on";
        arms.label_without = "merging-off";
        arms.default_metric = "consistency";
        arms.higher_wins = true;
        break;
    case AblationAxis::negative_window: {
        arms.with_mechanism.bounding = BoundingMode::cross;
        arms.with_mechanism.merging = true;
        arms.without_mechanism.bounding = BoundingMode::cross;
        arms.without_mechanism.merging = true;
        std::vector<MergeWindow> kept;
        bool removed = false;
        for (const auto& w : base.merge_schedule.windows()) {
            if (w.alpha < 0.0) {
                removed = true;
            } else {
                kept.push_back(w);
            }
        }
        if (!removed) {
            throw ValidationError(
                "negative-window ablation needs a merge window with alpha < 0",
                {"the config's merge_schedule has no negative-alpha window to remove"});
        }
        arms.without_mechanism.merge_schedule = MergeSchedule::make(std::move(kept));
        arms.label_with = "negative-window-on";
        arms.label_without = "negative-window-off";
        arms.default_metric = "pose_variance";
        arms.higher_wins = true;
        break;
    }
    }
    validate_run_config(arms.with_mechanism);
    validate_run_config(arms.without_mechanism);
    return arms;
}

inline double report_metric(const RunReport& report, const std::string& metric) {
    if (metric == "leakage") return report.mean_leakage;
    if (metric == "consistency") return report.mean_consistency;
    if (metric == "pose_variance") return report.mean_pose_variance;
    throw UsageError("unknown metric: " + metric);
}

struct PairedAblation {
    std::vector<double> values_with;
    std::vector<double> values_without;
    double mean_with = 0.0;
    double mean_without = 0.0;
    PairedComparison comparison; // wins counts pairs where the with-arm is higher
};

// Runs `pairs` seeded A/B runs. Pair i derives fresh seeds from the with-arm's
// base seeds and feeds the identical seeds to both arms, so within a pair the
// arms differ only in the mechanism under test.
inline PairedAblation run_paired_ablation(const StoryboardPlan& plan, const AblationArms& arms,
                                          int pairs, const std::string& metric) {
    if (pairs < 1) throw UsageError("run_paired_ablation: pairs must be >= 1");
    PairedAblation out;
    out.values_with.reserve(static_cast<std::size_t>(pairs));
    out.values_without.reserve(static_cast<std::size_t>(pairs));
    const RunSeeds base = arms.with_mechanism.seeds;
    for (int i = 0; i < pairs; ++i) {
        RunSeeds seeds;
        seeds.noise = rng::key({base.noise, static_cast<std::uint64_t>(i)});
        seeds.dropout = rng::key({base.dropout, static_cast<std::uint64_t>(i)});
        seeds.weights = rng::key({base.weights, static_cast<std::uint64_t>(i)});
        RunConfig a = arms.with_mechanism;
        RunConfig b = arms.without_mechanism;
        a.seeds = seeds;
        b.seeds = seeds;
        out.values_with.push_back(report_metric(run_storyboard(plan, a), metric));
        out.values_without.push_back(report_metric(run_storyboard(plan, b), metric));
    }
    double sum = 0.0;
    for (double v : out.values_with) sum += v;
    out.mean_with = sum / pairs;
    sum = 0.0;
    for (double v : out.values_without) sum += v;
    out.mean_without = sum / pairs;
    out.comparison = paired_sign_test(out.values_with, out.values_without);
    return out;
}

// One-sided p-value for the axis's expected direction on its default metric.
inline double directional_p_value(const AblationArms& arms, const PairedComparison& cmp) {
    return arms.higher_wins ? sign_test_p(cmp.wins, cmp.losses)
                            : sign_test_p(cmp.losses, cmp.wins);
}

} // namespace storybooth
