#include "catch_amalgamated.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "storybooth/errors.hpp"
#include "storybooth/harness.hpp"
#include "storybooth/plan.hpp"
#include "storybooth/rng.hpp"
#include "storybooth/version.hpp"

using namespace storybooth;
namespace fs = std::filesystem;

namespace {

StoryboardPlan small_plan(int frames = 2) {
    return mock_plan({"two friends walk through a market", frames}, 2, 5);
}

RunConfig small_config(int frames = 2) {
    RunConfig config;
    config.plan_inline = small_plan(frames);
    config.grid_h = 4;
    config.grid_w = 4;
    config.steps = 3;
    config.denoiser.layers = 1;
    config.denoiser.channels = 8;
    config.denoiser.heads = 2;
    return config;
}

Tensor3 seeded_latent(const RunConfig& config, const StoryboardPlan& plan) {
    const int b = plan.prompt.frame_count;
    const int n = config.grid_h * config.grid_w;
    const int c = config.denoiser.channels;
    Tensor3 z(b, n, c);
    for (int f = 0; f < b; ++f)
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                z(f, i, ch) = rng::gaussian({config.seeds.noise, static_cast<std::uint64_t>(f),
                                             static_cast<std::uint64_t>(i),
                                             static_cast<std::uint64_t>(ch)});
    return z;
}

// Reference step with every consistency mechanism removed: full per-frame
// attention, residual add, tanh mixer, region bias, per-frame RMS renorm.
// toy_denoise_step with bounding=off and merging=false must match this
// bit for bit, whatever the merge schedule says.
Tensor3 plain_transformer_step(const HarnessContext& ctx, const Tensor3& z) {
    const int b = ctx.grid.frame_count;
    const int n = ctx.grid.tokens();
    const int c = ctx.config.denoiser.channels;
    Tensor3 cur = z;
    for (std::size_t l = 0; l < ctx.layers.size(); ++l) {
        Tensor3 attn(b, n, c);
        for (int f = 0; f < b; ++f) {
            const auto res = bounded_self_attention(cur.frame(f), ctx.layers[l].proj,
                                                    all_ones_mask(MaskScope::intra, n, f));
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) attn(f, i, ch) = res.output(0, i, ch);
        }
        for (std::size_t i = 0; i < cur.data.size(); ++i) cur.data[i] += attn.data[i];
        const Matrix mix = matmul(cur.flatten(), ctx.layers[l].w_ff);
        for (std::size_t i = 0; i < cur.data.size(); ++i) {
            cur.data[i] += kFfScale * std::tanh(mix.data[i]);
        }
        for (std::size_t r = 0; r < ctx.region_masks.size(); ++r) {
            const SubjectMask& m = ctx.region_masks[r];
            for (int i = 0; i < n; ++i) {
                if (!m.bits[static_cast<std::size_t>(i)]) continue;
                for (int ch = 0; ch < c; ++ch) {
                    cur(m.frame, i, ch) += kBiasScale * ctx.region_bias[r][l][ch];
                }
            }
        }
        for (int f = 0; f < b; ++f) {
            double sq = 0.0;
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) sq += cur(f, i, ch) * cur(f, i, ch);
            const double rms = std::sqrt(sq / (static_cast<double>(n) * c));
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch) cur(f, i, ch) /= rms;
        }
    }
    return cur;
}

} // namespace

TEST_CASE("run config validation") {
    SECTION("plan source is required and exclusive") {
        RunConfig config = small_config();
        config.plan_inline.reset();
        CHECK_THROWS_AS(validate_run_config(config), ValidationError);
        config.plan_inline = small_plan();
        config.plan_path = "plan.json";
        CHECK_THROWS_AS(validate_run_config(config), ValidationError);
    }
    SECTION("merging requires cross bounding") {
        for (BoundingMode mode : {BoundingMode::off, BoundingMode::intra}) {
            RunConfig config = small_config();
            config.bounding = mode;
            config.merging = true;
            try {
                validate_run_config(config);
                FAIL("expected ValidationError");
            } catch (const ValidationError& e) {
                CHECK(e.issues().size() == 1);
                CHECK(e.issues()[0].find("merging requires cross bounding") != std::string::npos);
            }
            config.merging = false;
            CHECK_NOTHROW(validate_run_config(config));
        }
    }
    SECTION("ladder must be strictly descending within [0, 1000]") {
        RunConfig config = small_config();
        config.ladder = std::vector<int>{1000, 500, 500};
        CHECK_THROWS_AS(validate_run_config(config), ValidationError);
        config.ladder = std::vector<int>{1001, 500};
        CHECK_THROWS_AS(validate_run_config(config), ValidationError);
        config.ladder = std::vector<int>{};
        CHECK_THROWS_AS(validate_run_config(config), ValidationError);
        config.ladder = std::vector<int>{1000, 500, 0};
        CHECK_NOTHROW(validate_run_config(config));
    }
    SECTION("bounds on grid, steps, beta_d, denoiser") {
        RunConfig config = small_config();
        config.grid_h = 0;
        config.grid_w = 65;
        config.steps = 0;
        config.beta_d = 1.5;
        config.denoiser.layers = 0;
        config.denoiser.channels = 6;
        config.denoiser.heads = 4; // 6 % 4 != 0
        try {
            validate_run_config(config);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(e.issues().size() == 6);
        }
    }
}

TEST_CASE("run config parsing is strict about keys and types") {
    const std::string plan_json = serialize_plan(small_plan());

    SECTION("round-trips a full document") {
        const std::string text = R"({
            "plan_inline": )" + plan_json + R"(,
            "grid": {"h": 4, "w": 5},
            "steps": 7,
            "beta_d": 0.8,
            "dropout_enabled": false,
            "bounding": "intra",
            "merging": false,
            "merge_schedule": [{"t_high": 900, "t_low": 800, "alpha": 0.25}],
            "seeds": {"noise": 10, "dropout": 11, "weights": 12},
            "out_dir": "elsewhere",
            "denoiser": {"layers": 3, "channels": 12, "heads": 3}
        })";
        const RunConfig config = parse_run_config(text);
        CHECK(config.plan_inline == small_plan());
        CHECK(config.grid_h == 4);
        CHECK(config.grid_w == 5);
        CHECK(config.steps == 7);
        CHECK_FALSE(config.ladder);
        CHECK(config.beta_d == 0.8);
        CHECK_FALSE(config.dropout_enabled);
        CHECK(config.bounding == BoundingMode::intra);
        CHECK_FALSE(config.merging);
        CHECK(config.merge_schedule.alpha_at(850) == 0.25);
        CHECK(config.seeds.noise == 10);
        CHECK(config.seeds.dropout == 11);
        CHECK(config.seeds.weights == 12);
        CHECK(config.out_dir == "elsewhere");
        CHECK(config.denoiser.layers == 3);
        CHECK(config.denoiser.channels == 12);
        CHECK(config.denoiser.heads == 3);
    }
    SECTION("array steps become an explicit ladder") {
        const RunConfig config = parse_run_config(
            R"({"plan_inline": )" + plan_json + R"(, "steps": [1000, 600, 200]})");
        REQUIRE(config.ladder);
        CHECK(*config.ladder == std::vector<int>{1000, 600, 200});
    }
    SECTION("unknown keys are rejected at every nesting level") {
        const std::vector<std::string> bad = {
            R"({"plan_inline": )" + plan_json + R"(, "stepz": 3})",
            R"({"plan_inline": )" + plan_json + R"(, "grid": {"h": 4, "w": 4, "d": 4}})",
            R"({"plan_inline": )" + plan_json + R"(, "seeds": {"noise": 1, "nois": 2}})",
            R"({"plan_inline": )" + plan_json + R"(, "denoiser": {"layers": 1, "depth": 2}})",
            R"({"plan_inline": )" + plan_json +
                R"(, "merge_schedule": [{"t_high": 900, "t_low": 800, "alpha": 0.1, "beta": 0}]})",
        };
        for (const auto& text : bad) {
            CHECK_THROWS_AS(parse_run_config(text), ValidationError);
        }
    }
    SECTION("type errors accumulate instead of stopping at the first") {
        try {
            parse_run_config(R"({"plan_path": 3, "steps": "many", "beta_d": "high"})");
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            CHECK(e.issues().size() == 3);
        }
    }
    SECTION("non-JSON input raises ParseError with the raw text") {
        try {
            parse_run_config("{nope");
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.raw_text() == "{nope");
        }
    }
}

TEST_CASE("timestep ladder is descending and spans (0, 1000]") {
    CHECK(timestep_ladder(1) == std::vector<int>{1000});
    CHECK(timestep_ladder(4) == std::vector<int>{1000, 750, 500, 250});
    CHECK(timestep_ladder(3) == std::vector<int>{1000, 667, 333});
    const auto twenty = timestep_ladder(20);
    REQUIRE(twenty.size() == 20);
    CHECK(twenty.front() == 1000);
    CHECK(twenty.back() == 50);
    for (std::size_t i = 1; i < twenty.size(); ++i) CHECK(twenty[i] < twenty[i - 1]);
    CHECK_THROWS_AS(timestep_ladder(0), UsageError);
    CHECK_THROWS_AS(timestep_ladder(1001), UsageError);
}

TEST_CASE("config echo embeds the plan and omits paths") {
    RunConfig config = small_config();
    config.out_dir = "/tmp/somewhere";
    const nlohmann::json doc = run_config_to_json(config, small_plan());
    CHECK_FALSE(doc.contains("out_dir"));
    CHECK_FALSE(doc.contains("plan_path"));
    CHECK(doc.contains("plan_inline"));
    CHECK(doc["steps"] == 3);
    CHECK(parse_plan(doc["plan_inline"].dump()) == small_plan());

    config.ladder = std::vector<int>{1000, 400};
    const nlohmann::json with_ladder = run_config_to_json(config, small_plan());
    CHECK(with_ladder["steps"] == nlohmann::json::array({1000, 400}));

    // The echo itself must parse back as a valid config.
    CHECK_NOTHROW(parse_run_config(doc.dump()));
}

TEST_CASE("resolve_plan reads inline plans and plan files") {
    RunConfig config = small_config();
    CHECK(resolve_plan(config) == small_plan());

    const fs::path path = fs::temp_directory_path() / "storybooth_test_plan.json";
    {
        std::ofstream out(path);
        out << serialize_plan(small_plan());
    }
    config.plan_inline.reset();
    config.plan_path = path.string();
    CHECK(resolve_plan(config) == small_plan());
    fs::remove(path);
    CHECK_THROWS_AS(resolve_plan(config), IoError);
}

TEST_CASE("assemble_step_mask honors the bounding mode") {
    RunConfig config = small_config();
    const StoryboardPlan plan = small_plan();
    const int n = config.grid_h * config.grid_w;
    const int b = plan.prompt.frame_count;

    SECTION("off mode is block-diagonal all-ones") {
        config.bounding = BoundingMode::off;
        config.merging = false;
        const HarnessContext ctx = build_harness_context(plan, config);
        const AttentionMask mask = assemble_step_mask(ctx, 1000, 0);
        REQUIRE(mask.dim == b * n);
        for (int i = 0; i < b * n; ++i)
            for (int j = 0; j < b * n; ++j)
                CHECK(mask.at(i, j) == (i / n == j / n ? 1 : 0));
    }
    SECTION("cross mode matches build_cross_mask under the documented seed") {
        const HarnessContext ctx = build_harness_context(plan, config);
        const int t = 700;
        const int layer = 0;
        const AttentionMask mask = assemble_step_mask(ctx, t, layer);
        const DropoutParams dropout{config.beta_d,
                                    rng::key({config.seeds.dropout, static_cast<std::uint64_t>(t),
                                              static_cast<std::uint64_t>(layer)}),
                                    config.dropout_enabled};
        CHECK(mask.bits == build_cross_mask(ctx.region_masks, ctx.grid, dropout).bits);
    }
    SECTION("dropout decouples across steps and layers") {
        RunConfig two_layer = config;
        two_layer.denoiser.layers = 2;
        const HarnessContext ctx = build_harness_context(plan, two_layer);
        CHECK(assemble_step_mask(ctx, 700, 0).bits != assemble_step_mask(ctx, 700, 1).bits);
        CHECK(assemble_step_mask(ctx, 700, 0).bits != assemble_step_mask(ctx, 600, 0).bits);
    }
    SECTION("intra mode keeps cross-frame entries at zero") {
        config.bounding = BoundingMode::intra;
        config.merging = false;
        const HarnessContext ctx = build_harness_context(plan, config);
        const AttentionMask mask = assemble_step_mask(ctx, 500, 0);
        int off_block = 0;
        for (int i = 0; i < b * n; ++i)
            for (int j = 0; j < b * n; ++j)
                if (i / n != j / n) off_block += mask.at(i, j);
        CHECK(off_block == 0);
    }
}

TEST_CASE("disabled mechanisms reduce the step to a plain transformer") {
    RunConfig config = small_config();
    config.bounding = BoundingMode::off;
    config.merging = false;
    config.denoiser.layers = 2;
    const StoryboardPlan plan = small_plan();
    const HarnessContext ctx = build_harness_context(plan, config);

    Tensor3 lib = seeded_latent(config, plan);
    Tensor3 ref = lib;
    // 1000 and 800 sit inside active merge windows; merging=false must ignore them.
    for (int t : {1000, 800, 500}) {
        lib = toy_denoise_step(ctx, lib, t, nullptr, nullptr);
        ref = plain_transformer_step(ctx, ref);
        CHECK(lib == ref);
    }
}

TEST_CASE("merging gate follows the schedule") {
    RunConfig on = small_config();
    RunConfig off = small_config();
    off.merging = false;
    const StoryboardPlan plan = small_plan();
    const HarnessContext ctx_on = build_harness_context(plan, on);
    const HarnessContext ctx_off = build_harness_context(plan, off);
    const Tensor3 z = seeded_latent(on, plan);

    // alpha_at(300) == 0: the merge is skipped entirely, outputs are identical.
    CHECK(toy_denoise_step(ctx_on, z, 300, nullptr, nullptr) ==
          toy_denoise_step(ctx_off, z, 300, nullptr, nullptr));
    // alpha_at(1000) == -0.5: the merge fires and must change the output.
    CHECK_FALSE(toy_denoise_step(ctx_on, z, 1000, nullptr, nullptr) ==
                toy_denoise_step(ctx_off, z, 1000, nullptr, nullptr));
}

TEST_CASE("toy_denoise_step validates its inputs") {
    const RunConfig config = small_config();
    const StoryboardPlan plan = small_plan();
    const HarnessContext ctx = build_harness_context(plan, config);
    const Tensor3 z = seeded_latent(config, plan);

    Tensor3 wrong(plan.prompt.frame_count, 9, config.denoiser.channels);
    CHECK_THROWS_AS(toy_denoise_step(ctx, wrong, 500, nullptr, nullptr), UsageError);
    CHECK_THROWS_AS(toy_denoise_step(ctx, z, -1, nullptr, nullptr), UsageError);

    Tensor3 poisoned = z;
    poisoned.data[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(toy_denoise_step(ctx, poisoned, 500, nullptr, nullptr), NumericError);
}

TEST_CASE("strict bounding drives leakage to exactly zero") {
    RunConfig config = small_config();
    config.beta_d = 1.0;
    const RunReport report = run_storyboard(small_plan(), config);
    REQUIRE_FALSE(report.leakage.empty());
    for (const auto& sample : report.leakage) {
        CHECK(sample.value == 0.0);
    }
    CHECK(report.mean_leakage == 0.0);
}

TEST_CASE("reports are deterministic and round-trip byte-identically") {
    const RunConfig config = small_config();
    const StoryboardPlan plan = small_plan();
    const RunReport a = run_storyboard(plan, config);
    const RunReport b = run_storyboard(plan, config);
    const std::string text = report_to_json_text(a);
    CHECK(report_to_json_text(b) == text);

    const RunReport parsed = parse_report(text);
    CHECK(report_to_json_text(parsed) == text);
    CHECK(parsed.leakage.size() == a.leakage.size());
    CHECK(parsed.consistency == a.consistency);
    CHECK(parsed.pose_variance == a.pose_variance);
    CHECK(parsed.mean_leakage == a.mean_leakage);
    CHECK(parsed.mean_consistency == a.mean_consistency);
    CHECK(parsed.mean_pose_variance == a.mean_pose_variance);
    CHECK(parsed.config == a.config);

    // The report carries one leakage sample per (step, subject).
    CHECK(a.leakage.size() == 3 * 2);
    for (const auto& s : a.leakage) {
        CHECK(s.value >= 0.0);
        CHECK(s.value <= 1.0);
    }
    for (const auto& [_, v] : a.consistency) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("parse_report rejects drifted documents") {
    const std::string text = report_to_json_text(run_storyboard(small_plan(), small_config()));
    const nlohmann::json good = nlohmann::json::parse(text);

    auto expect_invalid = [](nlohmann::json doc, const std::string& needle) {
        try {
            parse_report(doc.dump());
            FAIL("expected ValidationError for " + needle);
        } catch (const ValidationError& e) {
            bool found = false;
            for (const auto& issue : e.issues()) {
                if (issue.find(needle) != std::string::npos) found = true;
            }
            CHECK(found);
        }
    };

    nlohmann::json doc = good;
    doc["extra"] = 1;
    expect_invalid(doc, "unknown key: extra");

    doc = good;
    doc.erase("summary");
    expect_invalid(doc, "missing key: summary");

    doc = good;
    doc["version"] = "storybooth 9.9.9";
    expect_invalid(doc, "version");

    doc = good;
    doc["leakage"][0]["value"] = 1.5;
    expect_invalid(doc, "value must lie in [0, 1]");

    doc = good;
    doc["leakage"][0].erase("step");
    expect_invalid(doc, "leakage[0]");

    doc = good;
    doc["consistency"]["subject-0"] = -2.0;
    expect_invalid(doc, "consistency.subject-0");

    doc = good;
    doc["summary"].erase("mean_leakage");
    expect_invalid(doc, "summary");

    doc = good;
    doc["config"]["mystery"] = true;
    expect_invalid(doc, "config echo");

    CHECK_THROWS_AS(parse_report("[1, 2]"), ValidationError);
    CHECK_THROWS_AS(parse_report("{broken"), ParseError);
}

TEST_CASE("emit_report writes the full artifact set") {
    RunConfig config = small_config();
    config.ladder = std::vector<int>{1000, 500};
    const RunReport report = run_storyboard(small_plan(), config, true);

    const fs::path dir = fs::temp_directory_path() / "storybooth_test_harness_out";
    fs::remove_all(dir);
    emit_report(report, dir.string());

    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        REQUIRE(in);
        std::ostringstream buf;
        buf << in.rdbuf();
        return buf.str();
    };

    CHECK(slurp(dir / "report.json") == report_to_json_text(report));

    const std::string csv = slurp(dir / "leakage.csv");
    CHECK(csv.rfind("step,subject_id,leakage\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + static_cast<long>(report.leakage.size()));

    const std::string timing = slurp(dir / "timing.txt");
    CHECK(timing.rfind("wall_clock_seconds=", 0) == 0);
    CHECK(timing.back() == '\n');

    // One mask dump per (step, layer); 2 frames x 16 tokens gives a 32 x 32 PGM.
    REQUIRE(report.mask_dumps.size() == 2);
    const std::string pgm = slurp(dir / "masks" / "mask_t1000_l0.pgm");
    const std::string header = "P5\n32 32\n255\n";
    REQUIRE(pgm.rfind(header, 0) == 0);
    CHECK(pgm.size() == header.size() + 32 * 32);
    CHECK(fs::exists(dir / "masks" / "mask_t0500_l0.pgm"));

    fs::remove_all(dir);
}

TEST_CASE("single-frame stories fall back to neutral metrics") {
    RunConfig config = small_config(1);
    config.plan_inline = small_plan(1);
    const RunReport report = run_storyboard(small_plan(1), config);
    for (const auto& [_, v] : report.consistency) CHECK(v == 1.0);
    for (const auto& [_, v] : report.pose_variance) CHECK(v == 0.0);
    CHECK(report.mean_consistency == 1.0);
    CHECK(report.mean_pose_variance == 0.0);
}
