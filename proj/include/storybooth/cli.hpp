#pragma once

#include <cstdint>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "storybooth/ablation.hpp"
#include "storybooth/errors.hpp"
#include "storybooth/harness.hpp"
#include "storybooth/plan.hpp"
#include "storybooth/planner.hpp"
#include "storybooth/rng.hpp"
#include "storybooth/stats.hpp"
#include "storybooth/version.hpp"

namespace storybooth {

namespace detail {

inline std::string fmt(double v) {
    nlohmann::json j = v; // shortest round-trip formatting
    return j.dump();
}

} // namespace detail

// Exit codes: 0 success (including --help/--version), 1 validation error
// (bad flags, unreadable or invalid configs, invalid inputs), 2 runtime error
// (transport, numeric, or output failures after inputs validated).
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
    CLI::App app{"storybooth: bounded-attention story synthesis, desk-scale simulator"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    auto* plan_cmd = app.add_subcommand("plan", "Generate a storyboard plan");
    std::string prompt;
    int frames = 3;
    int subjects = 2;
    std::uint64_t plan_seed = 0;
    std::string endpoint;
    std::string model_name;
    std::string plan_out;
    plan_cmd->add_option("--prompt", prompt, "Story prompt")->required();
    plan_cmd->add_option("--frames", frames, "Number of frames")->check(CLI::Range(1, 64));
    plan_cmd->add_option("--subjects", subjects, "Number of recurring subjects (mock planner)")
        ->check(CLI::Range(1, 16));
    plan_cmd->add_option("--seed", plan_seed, "Mock planner seed");
    plan_cmd->add_option("--endpoint", endpoint,
                         "Chat-completion endpoint URL; omit to use the built-in mock planner. "
                         "Reads STORYBOOTH_API_KEY for auth when set");
    plan_cmd->add_option("--model", model_name, "Model name sent to the endpoint");
    plan_cmd->add_option("-o,--out", plan_out, "Write the plan here instead of stdout");

    auto* run_cmd = app.add_subcommand("run", "Run the denoising harness over a plan");
    std::string run_config_path;
    std::string out_dir_override;
    bool dump_masks = false;
    run_cmd->add_option("--config", run_config_path, "Run config JSON path")->required();
    run_cmd->add_option("--out-dir", out_dir_override, "Override the config's out_dir");
    run_cmd->add_flag("--dump-masks", dump_masks, "Also write per-(step, layer) mask PGMs");

    auto* inspect_cmd = app.add_subcommand("inspect-mask", "Materialize one attention mask");
    std::string inspect_config_path;
    int inspect_step = 1000;
    int inspect_layer = 0;
    std::string pgm_out;
    inspect_cmd->add_option("--config", inspect_config_path, "Run config JSON path")->required();
    inspect_cmd->add_option("--step", inspect_step, "Timestep t")->check(CLI::Range(0, 1000));
    inspect_cmd->add_option("--layer", inspect_layer, "Layer index")->check(CLI::Range(0, 1 << 20));
    inspect_cmd->add_option("-o,--out", pgm_out, "Write the mask as a PGM here");

    auto* compare_cmd =
        app.add_subcommand("compare", "Paired mechanism ablation with a one-sided sign test");
    std::string compare_config_path;
    std::string ablate;
    int seeds = 20;
    std::string metric;
    compare_cmd->add_option("--config", compare_config_path, "Base run config JSON path")
        ->required();
    compare_cmd->add_option("--ablate", ablate, "Mechanism to toggle between the arms")
        ->required()
        ->check(CLI::IsMember({"bounding", "merging", "negative-window"}));
    compare_cmd->add_option("--seeds", seeds, "Number of paired seeds")->check(CLI::Range(1, 1000));
    compare_cmd->add_option("--metric", metric, "Metric to compare (default: the axis's own)")
        ->check(CLI::IsMember({"leakage", "consistency", "pose_variance"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err); // --help / --version
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    // Each subcommand validates its inputs first (failures exit 1), then
    // executes (failures exit 2).
    int phase = 1;
    try {
        if (*plan_cmd) {
            const StoryPrompt story{prompt, frames};
            if (prompt.find_first_not_of(" \t\r\n") == std::string::npos) {
                throw ValidationError("invalid prompt", {"prompt text must be non-empty"});
            }
            PlannerConfig config = default_planner_config();
            if (!endpoint.empty()) {
                config.endpoint = endpoint;
                if (!model_name.empty()) config.model_name = model_name;
                validate_planner_config(config);
            }
            phase = 2;
            StoryboardPlan plan;
            if (endpoint.empty()) {
                plan = mock_plan(story, subjects, plan_seed);
            } else {
                HttpChatClient client(endpoint);
                PlanningResult result = plan_storyboard(story, config, client);
                err << "planner succeeded after " << result.attempts << " attempt(s)\n";
                plan = std::move(result.plan);
            }
            const std::string text = serialize_plan(plan);
            if (plan_out.empty()) {
                out << text;
            } else {
                detail::write_text_file(plan_out, text);
                out << "plan written to " << plan_out << "\n";
            }
        } else if (*run_cmd) {
            RunConfig config = parse_run_config(detail::read_text_file(run_config_path));
            if (!out_dir_override.empty()) config.out_dir = out_dir_override;
            const StoryboardPlan plan = resolve_plan(config);
            phase = 2;
            const RunReport report = run_storyboard(plan, config, dump_masks);
            emit_report(report, config.out_dir);
            out << "report written to " << config.out_dir << "\n";
            out << "mean_leakage=" << detail::fmt(report.mean_leakage)
                << " mean_consistency=" << detail::fmt(report.mean_consistency)
                << " mean_pose_variance=" << detail::fmt(report.mean_pose_variance) << "\n";
        } else if (*inspect_cmd) {
            const RunConfig config = parse_run_config(detail::read_text_file(inspect_config_path));
            const StoryboardPlan plan = resolve_plan(config);
            phase = 2;
            const HarnessContext ctx = build_harness_context(plan, config);
            const AttentionMask mask = assemble_step_mask(ctx, inspect_step, inspect_layer);
            std::size_t allowed = 0;
            for (auto bit : mask.bits) allowed += bit ? 1 : 0;
            const double fraction =
                static_cast<double>(allowed) / static_cast<double>(mask.bits.size());
            out << "bounding=" << to_string(config.bounding) << " step=" << inspect_step
                << " layer=" << inspect_layer << "\n";
            out << "dim=" << mask.dim << " allowed=" << allowed
                << " fraction=" << detail::fmt(fraction) << "\n";
            if (!pgm_out.empty()) {
                detail::write_text_file(pgm_out, pgm_bytes(mask));
                out << "mask written to " << pgm_out << "\n";
            }
        } else if (*compare_cmd) {
            const RunConfig base = parse_run_config(detail::read_text_file(compare_config_path));
            const StoryboardPlan plan = resolve_plan(base);
            const AblationAxis axis = ablation_axis_from_string(ablate);
            const AblationArms arms = derive_ablation_arms(base, axis);
            if (metric.empty()) metric = arms.default_metric;
            phase = 2;
            const PairedAblation result = run_paired_ablation(plan, arms, seeds, metric);
            const PairedComparison& cmp = result.comparison;
            const std::size_t width =
                std::max(arms.label_with.size(), arms.label_without.size()) + 2;
            out << "ablation=" << ablate << " metric=" << metric << " pairs=" << seeds << "\n";
            out << std::left << std::setw(static_cast<int>(width)) << "arm" << "mean_" << metric
                << "\n";
            out << std::left << std::setw(static_cast<int>(width)) << arms.label_with
                << detail::fmt(result.mean_with) << "\n";
            out << std::left << std::setw(static_cast<int>(width)) << arms.label_without
                << detail::fmt(result.mean_without) << "\n";
            out << "wins: " << arms.label_with << "=" << cmp.wins << " " << arms.label_without
                << "=" << cmp.losses << " ties=" << cmp.ties << "\n";
            if (metric == arms.default_metric) {
                out << "sign test (expect " << metric << " "
                    << (arms.higher_wins ? "higher" : "lower") << " with " << arms.label_with
                    << "): p=" << detail::fmt(directional_p_value(arms, cmp)) << "\n";
            } else {
                out << "sign test: p_with_higher=" << detail::fmt(sign_test_p(cmp.wins, cmp.losses))
                    << " p_with_lower=" << detail::fmt(sign_test_p(cmp.losses, cmp.wins)) << "\n";
            }
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return phase;
    }
    return 0;
}

} // namespace storybooth
