#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "storybooth/attention.hpp"
#include "storybooth/denoiser.hpp"
#include "storybooth/errors.hpp"
#include "storybooth/linalg.hpp"
#include "storybooth/masks.hpp"
#include "storybooth/plan.hpp"
#include "storybooth/rng.hpp"
#include "storybooth/tokenmerge.hpp"
#include "storybooth/version.hpp"

namespace storybooth {

// Which attention gate the harness applies at every layer of every step.
enum class BoundingMode { off, intra, cross };

inline std::string to_string(BoundingMode mode) {
    switch (mode) {
        case BoundingMode::off: return "off";
        case BoundingMode::intra: return "intra";
        case BoundingMode::cross: return "cross";
    }
    throw UsageError("unknown bounding mode");
}

inline BoundingMode bounding_mode_from_string(const std::string& s) {
    if (s == "off") return BoundingMode::off;
    if (s == "intra") return BoundingMode::intra;
    if (s == "cross") return BoundingMode::cross;
    throw ValidationError("bounding must be one of \"off\", \"intra\", \"cross\", got \"" + s + "\"");
}

struct RunSeeds {
    std::uint64_t noise = 1;
    std::uint64_t dropout = 2;
    std::uint64_t weights = 3;

    friend bool operator==(const RunSeeds&, const RunSeeds&) = default;
};

struct RunConfig {
    std::string plan_path;                     // exactly one of plan_path /
    std::optional<StoryboardPlan> plan_inline; // plan_inline must be set
    int grid_h = 6;
    int grid_w = 6;
    int steps = 20;                            // uniform ladder size, or
    std::optional<std::vector<int>> ladder;    // an explicit descending ladder
    double beta_d = 0.9;
    bool dropout_enabled = true;
    BoundingMode bounding = BoundingMode::cross;
    bool merging = true;
    MergeSchedule merge_schedule = MergeSchedule::paper_default();
    RunSeeds seeds;
    std::string out_dir = "out";
    ToyDenoiserConfig denoiser; // weight_seed is overridden by seeds.weights
};

inline void validate_run_config(const RunConfig& config) {
    std::vector<std::string> issues;
    if (config.plan_path.empty() && !config.plan_inline) {
        issues.push_back("one of plan_path or plan_inline is required");
    }
    if (!config.plan_path.empty() && config.plan_inline) {
        issues.push_back("plan_path and plan_inline are mutually exclusive");
    }
    if (config.grid_h < 1 || config.grid_h > 64) issues.push_back("grid.h must lie in [1, 64]");
    if (config.grid_w < 1 || config.grid_w > 64) issues.push_back("grid.w must lie in [1, 64]");
    if (config.ladder) {
        if (config.ladder->empty()) issues.push_back("steps ladder must be non-empty");
        for (std::size_t i = 0; i < config.ladder->size(); ++i) {
            const int t = (*config.ladder)[i];
            if (t < 0 || t > 1000) {
                issues.push_back("steps ladder entries must lie in [0, 1000]");
                break;
            }
            if (i > 0 && t >= (*config.ladder)[i - 1]) {
                issues.push_back("steps ladder must be strictly descending");
                break;
            }
        }
    } else if (config.steps < 1 || config.steps > 1000) {
        issues.push_back("steps must lie in [1, 1000]");
    }
    if (!(config.beta_d >= 0.0 && config.beta_d <= 1.0)) issues.push_back("beta_d must lie in [0, 1]");
    if (config.merging && config.bounding != BoundingMode::cross) {
        issues.push_back("merging requires cross bounding: matches are cross-frame by construction");
    }
    if (config.denoiser.layers < 1) issues.push_back("denoiser.layers must be >= 1");
    if (config.denoiser.channels < 1) issues.push_back("denoiser.channels must be >= 1");
    if (config.denoiser.heads < 1) issues.push_back("denoiser.heads must be >= 1");
    if (config.denoiser.heads >= 1 && config.denoiser.channels >= 1 &&
        config.denoiser.channels % config.denoiser.heads != 0) {
        issues.push_back("denoiser.channels must be divisible by denoiser.heads");
    }
    if (!issues.empty()) throw ValidationError("invalid run config", std::move(issues));
}

namespace detail {

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path);
    return buf.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline bool json_is_uint64(const nlohmann::json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

} // namespace detail

// Strict parse of the run config document. Unknown keys are rejected so a
// typoed option can never silently fall back to a default.
inline RunConfig parse_run_config(const std::string& json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("run config is not valid JSON: ") + e.what(), json_text);
    }

    std::vector<std::string> issues;
    if (!doc.is_object()) throw ValidationError("run config", {"top-level value must be an object"});

    static const std::vector<std::string> kKnown = {
        "plan_path", "plan_inline", "grid",  "steps",          "beta_d", "dropout_enabled",
        "bounding",  "merging",     "seeds", "merge_schedule", "out_dir", "denoiser"};
    for (const auto& [k, _] : doc.items()) {
        if (std::find(kKnown.begin(), kKnown.end(), k) == kKnown.end()) {
            issues.push_back("unknown key: " + k);
        }
    }

    RunConfig config;
    if (doc.contains("plan_path")) {
        if (doc["plan_path"].is_string()) config.plan_path = doc["plan_path"].get<std::string>();
        else issues.push_back("plan_path must be a string");
    }
    if (doc.contains("plan_inline")) {
        if (doc["plan_inline"].is_object()) {
            try {
                config.plan_inline = parse_plan(doc["plan_inline"].dump());
            } catch (const Error& e) {
                issues.push_back(std::string("plan_inline: ") + e.what());
            }
        } else {
            issues.push_back("plan_inline must be an object");
        }
    }
    if (doc.contains("grid")) {
        const auto& g = doc["grid"];
        if (g.is_object() && g.contains("h") && g.contains("w") && g["h"].is_number_integer() &&
            g["w"].is_number_integer()) {
            config.grid_h = g["h"].get<int>();
            config.grid_w = g["w"].get<int>();
            for (const auto& [k, _] : g.items()) {
                if (k != "h" && k != "w") issues.push_back("grid: unknown key: " + k);
            }
        } else {
            issues.push_back("grid must be an object {\"h\": int, \"w\": int}");
        }
    }
    if (doc.contains("steps")) {
        const auto& s = doc["steps"];
        if (s.is_number_integer()) {
            config.steps = s.get<int>();
        } else if (s.is_array()) {
            std::vector<int> ladder;
            bool ok = true;
            for (const auto& v : s) {
                if (!v.is_number_integer()) {
                    issues.push_back("steps ladder entries must be integers");
                    ok = false;
                    break;
                }
                ladder.push_back(v.get<int>());
            }
            if (ok) config.ladder = std::move(ladder);
        } else {
            issues.push_back("steps must be an integer count or an array ladder");
        }
    }
    if (doc.contains("beta_d")) {
        if (doc["beta_d"].is_number()) config.beta_d = doc["beta_d"].get<double>();
        else issues.push_back("beta_d must be a number");
    }
    if (doc.contains("dropout_enabled")) {
        if (doc["dropout_enabled"].is_boolean()) config.dropout_enabled = doc["dropout_enabled"].get<bool>();
        else issues.push_back("dropout_enabled must be a boolean");
    }
    if (doc.contains("bounding")) {
        if (doc["bounding"].is_string()) {
            try {
                config.bounding = bounding_mode_from_string(doc["bounding"].get<std::string>());
            } catch (const ValidationError& e) {
                issues.push_back(e.what());
            }
        } else {
            issues.push_back("bounding must be a string");
        }
    }
    if (doc.contains("merging")) {
        if (doc["merging"].is_boolean()) config.merging = doc["merging"].get<bool>();
        else issues.push_back("merging must be a boolean");
    }
    if (doc.contains("merge_schedule")) {
        const auto& sched = doc["merge_schedule"];
        if (!sched.is_array()) {
            issues.push_back("merge_schedule must be an array of windows");
        } else {
            std::vector<MergeWindow> windows;
            bool shape_ok = true;
            for (std::size_t i = 0; i < sched.size(); ++i) {
                const auto& w = sched[i];
                if (!w.is_object() || !w.contains("t_high") || !w.contains("t_low") ||
                    !w.contains("alpha") || !w["t_high"].is_number() || !w["t_low"].is_number() ||
                    !w["alpha"].is_number()) {
                    issues.push_back("merge_schedule[" + std::to_string(i) +
                                     "] must be {\"t_high\": number, \"t_low\": number, \"alpha\": number}");
                    shape_ok = false;
                    continue;
                }
                for (const auto& [k, _] : w.items()) {
                    if (k != "t_high" && k != "t_low" && k != "alpha") {
                        issues.push_back("merge_schedule[" + std::to_string(i) + "]: unknown key: " + k);
                    }
                }
                windows.push_back({w["t_high"].get<double>(), w["t_low"].get<double>(),
                                   w["alpha"].get<double>()});
            }
            if (shape_ok) {
                try {
                    config.merge_schedule = MergeSchedule::make(std::move(windows));
                } catch (const ValidationError& e) {
                    for (const auto& i : e.issues()) issues.push_back("merge_schedule: " + i);
                }
            }
        }
    }
    if (doc.contains("seeds")) {
        const auto& s = doc["seeds"];
        if (!s.is_object()) {
            issues.push_back("seeds must be an object");
        } else {
            for (const auto& [k, v] : s.items()) {
                if (k != "noise" && k != "dropout" && k != "weights") {
                    issues.push_back("seeds: unknown key: " + k);
                } else if (!detail::json_is_uint64(v)) {
                    issues.push_back("seeds." + k + " must be a non-negative integer");
                }
            }
            if (s.contains("noise") && detail::json_is_uint64(s["noise"]))
                config.seeds.noise = s["noise"].get<std::uint64_t>();
            if (s.contains("dropout") && detail::json_is_uint64(s["dropout"]))
                config.seeds.dropout = s["dropout"].get<std::uint64_t>();
            if (s.contains("weights") && detail::json_is_uint64(s["weights"]))
                config.seeds.weights = s["weights"].get<std::uint64_t>();
        }
    }
    if (doc.contains("out_dir")) {
        if (doc["out_dir"].is_string()) config.out_dir = doc["out_dir"].get<std::string>();
        else issues.push_back("out_dir must be a string");
    }
    if (doc.contains("denoiser")) {
        const auto& d = doc["denoiser"];
        if (!d.is_object()) {
            issues.push_back("denoiser must be an object");
        } else {
            for (const auto& [k, v] : d.items()) {
                if (k != "layers" && k != "channels" && k != "heads") {
                    issues.push_back("denoiser: unknown key: " + k);
                } else if (!v.is_number_integer()) {
                    issues.push_back("denoiser." + k + " must be an integer");
                }
            }
            if (d.contains("layers") && d["layers"].is_number_integer())
                config.denoiser.layers = d["layers"].get<int>();
            if (d.contains("channels") && d["channels"].is_number_integer())
                config.denoiser.channels = d["channels"].get<int>();
            if (d.contains("heads") && d["heads"].is_number_integer())
                config.denoiser.heads = d["heads"].get<int>();
        }
    }

    if (!issues.empty()) throw ValidationError("invalid run config", std::move(issues));
    validate_run_config(config);
    return config;
}

// Load the plan the config points at (inline object or file path).
inline StoryboardPlan resolve_plan(const RunConfig& config) {
    validate_run_config(config);
    if (config.plan_inline) return *config.plan_inline;
    return parse_plan(detail::read_text_file(config.plan_path));
}

// Effective-config document embedded in the report. Contains the resolved
// plan and every semantic knob; deliberately omits paths (plan_path, out_dir)
// so reports from different working directories stay comparable.
inline nlohmann::json run_config_to_json(const RunConfig& config, const StoryboardPlan& plan) {
    nlohmann::json doc;
    doc["beta_d"] = config.beta_d;
    doc["bounding"] = to_string(config.bounding);
    doc["denoiser"] = {{"layers", config.denoiser.layers},
                       {"channels", config.denoiser.channels},
                       {"heads", config.denoiser.heads}};
    doc["dropout_enabled"] = config.dropout_enabled;
    doc["grid"] = {{"h", config.grid_h}, {"w", config.grid_w}};
    doc["merge_schedule"] = nlohmann::json::array();
    for (const auto& w : config.merge_schedule.windows()) {
        doc["merge_schedule"].push_back(
            {{"t_high", w.t_high}, {"t_low", w.t_low}, {"alpha", w.alpha}});
    }
    doc["merging"] = config.merging;
    doc["plan_inline"] = plan_to_json(plan);
    doc["seeds"] = {{"noise", config.seeds.noise},
                    {"dropout", config.seeds.dropout},
                    {"weights", config.seeds.weights}};
    if (config.ladder) {
        doc["steps"] = *config.ladder;
    } else {
        doc["steps"] = config.steps;
    }
    return doc;
}

// Descending ladder from t = 1000 down to t = 1000 / steps.
inline std::vector<int> timestep_ladder(int steps) {
    if (steps < 1 || steps > 1000) throw UsageError("timestep_ladder: steps must lie in [1, 1000]");
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        out.push_back(static_cast<int>(std::llround(1000.0 * (steps - i) / steps)));
    }
    return out;
}

struct LeakageSample {
    int step = 0;            // timestep t the sample was taken at
    std::string subject_id;
    double value = 0.0;
};

struct RunReport {
    nlohmann::json config;
    std::vector<LeakageSample> leakage;
    std::map<std::string, double> consistency;   // per subject, mean pairwise cosine
    std::map<std::string, double> pose_variance; // per subject, mean pairwise centroid distance
    double mean_leakage = 0.0;
    double mean_consistency = 0.0;
    double mean_pose_variance = 0.0;
    double wall_clock_seconds = 0.0; // kept out of report.json: reports must be byte-stable
    std::vector<std::pair<std::string, AttentionMask>> mask_dumps;
};

// Residual scales. Post-layer RMS renormalization keeps activations
// stationary, so these only set the relative strength of each term.
inline constexpr double kFfScale = 0.25;
inline constexpr double kBiasScale = 0.08;

// Everything a denoising step needs, precomputed once per run.
struct HarnessContext {
    StoryboardPlan plan;
    RunConfig config;
    TokenGrid grid;
    std::vector<std::string> subject_names;           // dense index -> subject id
    std::vector<SubjectMask> region_masks;            // every (frame, layout)
    std::vector<std::vector<std::vector<double>>> region_bias; // [region][layer][channel]
    std::vector<DenoiserLayer> layers;
};

inline HarnessContext build_harness_context(const StoryboardPlan& plan, const RunConfig& config) {
    validate_plan(plan);
    validate_run_config(config);

    HarnessContext ctx;
    ctx.plan = plan;
    ctx.config = config;
    ctx.grid = TokenGrid{config.grid_h, config.grid_w, plan.prompt.frame_count};
    validate_grid(ctx.grid);

    std::map<std::string, int> index;
    for (const auto& [id, _] : plan.subjects) {
        index[id] = static_cast<int>(ctx.subject_names.size());
        ctx.subject_names.push_back(id);
    }

    ToyDenoiserConfig dcfg = config.denoiser;
    dcfg.weight_seed = config.seeds.weights;
    ctx.layers = build_denoiser(dcfg);

    for (std::size_t f = 0; f < plan.frames.size(); ++f) {
        for (const auto& layout : plan.frames[f].layouts) {
            ctx.region_masks.push_back(rasterize_box(layout.box, ctx.grid, static_cast<int>(f),
                                                     index.at(layout.subject_id)));
            std::vector<std::vector<double>> per_layer;
            per_layer.reserve(ctx.layers.size());
            for (std::size_t l = 0; l < ctx.layers.size(); ++l) {
                per_layer.push_back(subject_bias(layout.subject_id, layout.local_prompt,
                                                 static_cast<int>(l), dcfg.channels));
            }
            ctx.region_bias.push_back(std::move(per_layer));
        }
    }
    return ctx;
}

namespace detail {

inline std::vector<SubjectMask> frame_region_masks(const HarnessContext& ctx, int frame) {
    std::vector<SubjectMask> out;
    for (const auto& m : ctx.region_masks) {
        if (m.frame == frame) out.push_back(m);
    }
    return out;
}

inline std::string mask_dump_name(int t, int layer) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "mask_t%04d_l%d.pgm", t, layer);
    return buf;
}

} // namespace detail

// The gate in effect at one (timestep, layer), always materialized at BN x BN.
// Per-frame modes place their N x N gates on the diagonal blocks and leave
// every cross-frame entry 0.
inline AttentionMask assemble_step_mask(const HarnessContext& ctx, int t, int layer) {
    const auto& cfg = ctx.config;
    const DropoutParams dropout{cfg.beta_d,
                                rng::key({cfg.seeds.dropout, static_cast<std::uint64_t>(t),
                                          static_cast<std::uint64_t>(layer)}),
                                cfg.dropout_enabled};
    if (cfg.bounding == BoundingMode::cross) {
        return build_cross_mask(ctx.region_masks, ctx.grid, dropout);
    }
    const int n = ctx.grid.tokens();
    const int b = ctx.grid.frame_count;
    AttentionMask bn;
    bn.scope = MaskScope::cross;
    bn.frame = -1;
    bn.dim = b * n;
    bn.bits.assign(static_cast<std::size_t>(b) * n * b * n, 0);
    for (int f = 0; f < b; ++f) {
        const AttentionMask fm =
            cfg.bounding == BoundingMode::off
                ? all_ones_mask(MaskScope::intra, n, f)
                : build_intra_mask(detail::frame_region_masks(ctx, f), ctx.grid, dropout);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                bn.at(f * n + i, f * n + j) = fm.at(i, j);
            }
        }
    }
    return bn;
}

// One denoising step: per layer, bounded attention under the configured mode,
// optional cross-frame token merging, residual mixing, a per-region
// compositing pull toward the subject's prompt direction, then per-frame RMS
// renormalization. Leakage, when requested, is averaged over layers.
inline Tensor3 toy_denoise_step(const HarnessContext& ctx, const Tensor3& z, int t,
                                std::map<int, double>* leakage_sink,
                                std::vector<std::pair<std::string, AttentionMask>>* dump_sink) {
    const auto& cfg = ctx.config;
    const int b = ctx.grid.frame_count;
    const int n = ctx.grid.tokens();
    const int c = cfg.denoiser.channels;
    if (z.frames != b || z.tokens != n || z.channels != c) {
        throw UsageError("toy_denoise_step: latent shape does not match context");
    }
    if (t < 0) throw UsageError("toy_denoise_step: timestep must be >= 0");

    Tensor3 cur = z;
    std::map<int, double> acc;
    for (std::size_t l = 0; l < ctx.layers.size(); ++l) {
        const AttentionMask mask_bn = assemble_step_mask(ctx, t, static_cast<int>(l));

        Tensor3 attn(b, n, c);
        Matrix weights_bn(b * n, b * n);
        if (cfg.bounding == BoundingMode::cross) {
            auto res = cross_frame_bounded_attention(cur, ctx.layers[l].proj, mask_bn);
            attn = std::move(res.output);
            weights_bn = std::move(res.weights);
        } else {
            for (int f = 0; f < b; ++f) {
                AttentionMask fm;
                fm.scope = MaskScope::intra;
                fm.frame = f;
                fm.dim = n;
                fm.bits.assign(static_cast<std::size_t>(n) * n, 0);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) fm.at(i, j) = mask_bn.at(f * n + i, f * n + j);
                auto res = bounded_self_attention(cur.frame(f), ctx.layers[l].proj, fm);
                for (int i = 0; i < n; ++i)
                    for (int ch = 0; ch < c; ++ch) attn(f, i, ch) = res.output(0, i, ch);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) weights_bn(f * n + i, f * n + j) = res.weights(i, j);
            }
        }

        if (leakage_sink) {
            for (const auto& [s, v] : leakage_fraction(weights_bn, ctx.region_masks, ctx.grid)) {
                acc[s] += v;
            }
        }

        if (cfg.merging) {
            const double alpha = cfg.merge_schedule.alpha_at(t);
            if (alpha != 0.0) {
                const MergeMatch match = match_tokens(build_merge_gate(weights_bn, b, n));
                attn = merge_tokens(attn, match, alpha);
            }
        }

        for (std::size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += attn.data[i];
        const Matrix mix = matmul(cur.flatten(), ctx.layers[l].w_ff);
        for (std::size_t i = 0; i < cur.data.size(); ++i) {
            cur.data[i] += kFfScale * std::tanh(mix.data[i]);
        }
        for (std::size_t r = 0; r < ctx.region_masks.size(); ++r) {
            const SubjectMask& m = ctx.region_masks[r];
            const std::vector<double>& bias = ctx.region_bias[r][l];
            for (int i = 0; i < n; ++i) {
                if (!m.bits[static_cast<std::size_t>(i)]) continue;
                for (int ch = 0; ch < c; ++ch) cur(m.frame, i, ch) += kBiasScale * bias[ch];
            }
        }
        for (int f = 0; f < b; ++f) {
            double sq = 0.0;
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) sq += cur(f, i, ch) * cur(f, i, ch);
            const double rms = std::sqrt(sq / (static_cast<double>(n) * c));
            if (!(rms > 0.0) || !std::isfinite(rms)) {
                throw NumericError("rms renorm, step " + std::to_string(t) + " layer " +
                                   std::to_string(l));
            }
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) cur(f, i, ch) /= rms;
        }
        if (!all_finite(cur)) {
            throw NumericError("denoise step " + std::to_string(t) + " layer " + std::to_string(l));
        }
        if (dump_sink) {
            dump_sink->push_back({detail::mask_dump_name(t, static_cast<int>(l)), mask_bn});
        }
    }
    if (leakage_sink) {
        for (auto& [s, v] : acc) (*leakage_sink)[s] = v / static_cast<double>(ctx.layers.size());
    }
    return cur;
}

namespace detail {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Union occupancy per (subject, frame) from the context's region masks.
inline std::map<int, std::map<int, std::vector<std::uint8_t>>> occupancy_by_subject(
    const HarnessContext& ctx) {
    std::map<int, std::map<int, std::vector<std::uint8_t>>> occ;
    const int n = ctx.grid.tokens();
    for (const auto& m : ctx.region_masks) {
        auto& bits = occ[m.subject][m.frame];
        if (bits.empty()) bits.assign(static_cast<std::size_t>(n), 0);
        for (int i = 0; i < n; ++i) {
            if (m.bits[static_cast<std::size_t>(i)]) bits[static_cast<std::size_t>(i)] = 1;
        }
    }
    return occ;
}

} // namespace detail

// Mean pairwise cosine similarity between a subject's per-frame region mean
// features. 1.0 when the subject appears in fewer than two frames.
inline std::map<std::string, double> subject_consistency(const HarnessContext& ctx,
                                                         const Tensor3& z) {
    const int n = ctx.grid.tokens();
    const int c = z.channels;
    std::map<std::string, double> out;
    for (const auto& [subject, frames] : detail::occupancy_by_subject(ctx)) {
        std::vector<std::vector<double>> means;
        for (const auto& [frame, bits] : frames) {
            std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
            int count = 0;
            for (int i = 0; i < n; ++i) {
                if (!bits[static_cast<std::size_t>(i)]) continue;
                ++count;
                for (int ch = 0; ch < c; ++ch) mean[static_cast<std::size_t>(ch)] += z(frame, i, ch);
            }
            for (auto& v : mean) v /= static_cast<double>(count);
            means.push_back(std::move(mean));
        }
        double sum = 0.0;
        int pairs = 0;
        for (std::size_t a = 0; a < means.size(); ++a) {
            for (std::size_t b2 = a + 1; b2 < means.size(); ++b2) {
                // clamp: rounding may push a near-parallel pair past +/-1
                sum += std::clamp(detail::cosine(means[a], means[b2]), -1.0, 1.0);
                ++pairs;
            }
        }
        out[ctx.subject_names[static_cast<std::size_t>(subject)]] =
            pairs > 0 ? sum / pairs : 1.0;
    }
    return out;
}

// Mean pairwise distance between a subject's per-frame feature-mass centroids
// (token positions weighted by token L2 norm, in normalized grid units).
// 0.0 when the subject appears in fewer than two frames.
inline std::map<std::string, double> subject_pose_variance(const HarnessContext& ctx,
                                                           const Tensor3& z) {
    const int n = ctx.grid.tokens();
    const int c = z.channels;
    const int w = ctx.grid.width;
    const int h = ctx.grid.height;
    std::map<std::string, double> out;
    for (const auto& [subject, frames] : detail::occupancy_by_subject(ctx)) {
        std::vector<std::pair<double, double>> centroids;
        for (const auto& [frame, bits] : frames) {
            double wx = 0.0, wy = 0.0, total = 0.0;
            double ux = 0.0, uy = 0.0;
            int count = 0;
            for (int i = 0; i < n; ++i) {
                if (!bits[static_cast<std::size_t>(i)]) continue;
                double sq = 0.0;
                for (int ch = 0; ch < c; ++ch) sq += z(frame, i, ch) * z(frame, i, ch);
                const double weight = std::sqrt(sq);
                const double x = (i % w + 0.5) / w;
                const double y = (i / w + 0.5) / h;
                wx += weight * x;
                wy += weight * y;
                total += weight;
                ux += x;
                uy += y;
                ++count;
            }
            if (total > 0.0) {
                centroids.push_back({wx / total, wy / total});
            } else {
                centroids.push_back({ux / count, uy / count});
            }
        }
        double sum = 0.0;
        int pairs = 0;
        for (std::size_t a = 0; a < centroids.size(); ++a) {
            for (std::size_t b2 = a + 1; b2 < centroids.size(); ++b2) {
                const double dx = centroids[a].first - centroids[b2].first;
                const double dy = centroids[a].second - centroids[b2].second;
                sum += std::sqrt(dx * dx + dy * dy);
                ++pairs;
            }
        }
        out[ctx.subject_names[static_cast<std::size_t>(subject)]] =
            pairs > 0 ? sum / pairs : 0.0;
    }
    return out;
}

// Full simulation: seeded init, the timestep ladder, per-step leakage, and
// final-state metrics. Identical (plan, config) pairs give identical reports.
inline RunReport run_storyboard(const StoryboardPlan& plan, const RunConfig& config,
                                bool collect_mask_dumps = false) {
    const auto started = std::chrono::steady_clock::now();
    HarnessContext ctx = build_harness_context(plan, config);
    const int b = ctx.grid.frame_count;
    const int n = ctx.grid.tokens();
    const int c = config.denoiser.channels;

    Tensor3 z(b, n, c);
    for (int f = 0; f < b; ++f) {
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
                z(f, i, ch) = rng::gaussian({config.seeds.noise, static_cast<std::uint64_t>(f),
                                             static_cast<std::uint64_t>(i),
                                             static_cast<std::uint64_t>(ch)});
            }
        }
    }

    RunReport report;
    const std::vector<int> ladder =
        config.ladder ? *config.ladder : timestep_ladder(config.steps);
    for (int t : ladder) {
        std::map<int, double> leak;
        z = toy_denoise_step(ctx, z, t, &leak, collect_mask_dumps ? &report.mask_dumps : nullptr);
        for (const auto& [s, v] : leak) {
            // clamp: attention mass sums can round a hair past 1
            report.leakage.push_back({t, ctx.subject_names[static_cast<std::size_t>(s)],
                                      std::clamp(v, 0.0, 1.0)});
        }
    }

    report.consistency = subject_consistency(ctx, z);
    report.pose_variance = subject_pose_variance(ctx, z);
    double sum = 0.0;
    for (const auto& s : report.leakage) sum += s.value;
    report.mean_leakage = report.leakage.empty() ? 0.0 : sum / report.leakage.size();
    sum = 0.0;
    for (const auto& [_, v] : report.consistency) sum += v;
    report.mean_consistency = report.consistency.empty() ? 0.0 : sum / report.consistency.size();
    sum = 0.0;
    for (const auto& [_, v] : report.pose_variance) sum += v;
    report.mean_pose_variance =
        report.pose_variance.empty() ? 0.0 : sum / report.pose_variance.size();
    report.config = run_config_to_json(config, plan);
    report.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

// report.json body. Key order is nlohmann's sorted object order and doubles
// round-trip exactly, so equal reports serialize byte-identically. Wall clock
// time is deliberately absent (it goes to timing.txt instead).
inline std::string report_to_json_text(const RunReport& report) {
    nlohmann::json doc;
    doc["config"] = report.config;
    doc["consistency"] = nlohmann::json::object();
    for (const auto& [id, v] : report.consistency) doc["consistency"][id] = v;
    doc["leakage"] = nlohmann::json::array();
    for (const auto& s : report.leakage) {
        doc["leakage"].push_back(
            {{"step", s.step}, {"subject_id", s.subject_id}, {"value", s.value}});
    }
    doc["pose_variance"] = nlohmann::json::object();
    for (const auto& [id, v] : report.pose_variance) doc["pose_variance"][id] = v;
    doc["summary"] = {{"mean_consistency", report.mean_consistency},
                      {"mean_leakage", report.mean_leakage},
                      {"mean_pose_variance", report.mean_pose_variance}};
    doc["version"] = kVersion;
    return doc.dump(2) + "\n";
}

// Inverse of report_to_json_text. Restores every serialized field (wall clock
// and mask dumps are artifact-only and stay at their defaults), rejecting
// unknown keys, out-of-range metric values, and config echoes that do not
// themselves parse as a valid run config.
inline RunReport parse_report(const std::string& json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("report JSON: ") + e.what());
    }
    if (!doc.is_object()) throw ValidationError("invalid report", {"top level must be an object"});

    std::vector<std::string> issues;
    static const std::vector<std::string> kKeys = {"config",        "consistency", "leakage",
                                                   "pose_variance", "summary",     "version"};
    for (const auto& [k, _] : doc.items()) {
        if (std::find(kKeys.begin(), kKeys.end(), k) == kKeys.end()) {
            issues.push_back("unknown key: " + k);
        }
    }
    for (const auto& k : kKeys) {
        if (!doc.contains(k)) issues.push_back("missing key: " + k);
    }
    if (!issues.empty()) throw ValidationError("invalid report", std::move(issues));

    RunReport report;
    if (doc["config"].is_object()) {
        try {
            const RunConfig echoed = parse_run_config(doc["config"].dump());
            (void)resolve_plan(echoed); // config echo always carries the plan inline
            report.config = doc["config"];
        } catch (const Error& e) {
            issues.push_back(std::string("config echo: ") + e.what());
        }
    } else {
        issues.push_back("config must be an object");
    }

    if (!doc["version"].is_string() || doc["version"].get<std::string>() != kVersion) {
        issues.push_back("version must be \"" + std::string(kVersion) + "\"");
    }

    if (doc["leakage"].is_array()) {
        for (std::size_t i = 0; i < doc["leakage"].size(); ++i) {
            const auto& entry = doc["leakage"][i];
            const std::string at = "leakage[" + std::to_string(i) + "]";
            if (!entry.is_object() || entry.size() != 3 || !entry.contains("step") ||
                !entry.contains("subject_id") || !entry.contains("value") ||
                !entry["step"].is_number_integer() || !entry["subject_id"].is_string() ||
                !entry["value"].is_number()) {
                issues.push_back(at + " must be {\"step\": int, \"subject_id\": string, "
                                      "\"value\": number}");
                continue;
            }
            const int step = entry["step"].get<int>();
            const double value = entry["value"].get<double>();
            if (step < 0 || step > 1000) issues.push_back(at + ".step must lie in [0, 1000]");
            if (!(value >= 0.0 && value <= 1.0)) issues.push_back(at + ".value must lie in [0, 1]");
            report.leakage.push_back({step, entry["subject_id"].get<std::string>(), value});
        }
    } else {
        issues.push_back("leakage must be an array");
    }

    auto read_map = [&issues](const nlohmann::json& obj, const std::string& name, double lo,
                              double hi, std::map<std::string, double>& out) {
        if (!obj.is_object()) {
            issues.push_back(name + " must be an object");
            return;
        }
        for (const auto& [id, v] : obj.items()) {
            if (!v.is_number() || !(v.get<double>() >= lo && v.get<double>() <= hi)) {
                issues.push_back(name + "." + id + " must be a number in [" +
                                 nlohmann::json(lo).dump() + ", " + nlohmann::json(hi).dump() +
                                 "]");
                continue;
            }
            out[id] = v.get<double>();
        }
    };
    read_map(doc["consistency"], "consistency", -1.0, 1.0, report.consistency);
    read_map(doc["pose_variance"], "pose_variance", 0.0,
             std::numeric_limits<double>::infinity(), report.pose_variance);

    const auto& summary = doc["summary"];
    if (summary.is_object() && summary.size() == 3 && summary.contains("mean_consistency") &&
        summary.contains("mean_leakage") && summary.contains("mean_pose_variance") &&
        summary["mean_consistency"].is_number() && summary["mean_leakage"].is_number() &&
        summary["mean_pose_variance"].is_number()) {
        report.mean_consistency = summary["mean_consistency"].get<double>();
        report.mean_leakage = summary["mean_leakage"].get<double>();
        report.mean_pose_variance = summary["mean_pose_variance"].get<double>();
        if (!(report.mean_consistency >= -1.0 && report.mean_consistency <= 1.0)) {
            issues.push_back("summary.mean_consistency must lie in [-1, 1]");
        }
        if (!(report.mean_leakage >= 0.0 && report.mean_leakage <= 1.0)) {
            issues.push_back("summary.mean_leakage must lie in [0, 1]");
        }
        if (!(report.mean_pose_variance >= 0.0)) {
            issues.push_back("summary.mean_pose_variance must be >= 0");
        }
    } else {
        issues.push_back("summary must be {\"mean_consistency\": number, \"mean_leakage\": "
                         "number, \"mean_pose_variance\": number}");
    }

    if (!issues.empty()) throw ValidationError("invalid report", std::move(issues));
    return report;
}

inline std::string leakage_csv(const RunReport& report) {
    std::string out = "step,subject_id,leakage\n";
    for (const auto& s : report.leakage) {
        nlohmann::json v = s.value; // shortest round-trip double formatting
        out += std::to_string(s.step) + "," + s.subject_id + "," + v.dump() + "\n";
    }
    return out;
}

// Binary PGM (P5), 255 = allowed, 0 = masked.
inline std::string pgm_bytes(const AttentionMask& mask) {
    std::string out = "P5\n" + std::to_string(mask.dim) + " " + std::to_string(mask.dim) + "\n255\n";
    out.reserve(out.size() + mask.bits.size());
    for (std::uint8_t bit : mask.bits) {
        out.push_back(static_cast<char>(bit ? 255 : 0));
    }
    return out;
}

// Write report.json, leakage.csv, timing.txt, and any mask dumps under
// out_dir. Only timing.txt is allowed to differ between identical runs.
inline void emit_report(const RunReport& report, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir + " (" + ec.message() + ")");

    detail::write_text_file((fs::path(out_dir) / "report.json").string(),
                            report_to_json_text(report));
    detail::write_text_file((fs::path(out_dir) / "leakage.csv").string(), leakage_csv(report));
    {
        nlohmann::json v = report.wall_clock_seconds;
        detail::write_text_file((fs::path(out_dir) / "timing.txt").string(),
                                "wall_clock_seconds=" + v.dump() + "\n");
    }
    if (!report.mask_dumps.empty()) {
        const fs::path mask_dir = fs::path(out_dir) / "masks";
        fs::create_directories(mask_dir, ec);
        if (ec) throw IoError("cannot create mask directory: " + mask_dir.string());
        for (const auto& [name, mask] : report.mask_dumps) {
            detail::write_text_file((mask_dir / name).string(), pgm_bytes(mask));
        }
    }
}

} // namespace storybooth
