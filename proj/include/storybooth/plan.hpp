#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "storybooth/errors.hpp"
#include "storybooth/rng.hpp"

namespace storybooth {

// The story request: free-form prompt P plus the number of frames B.
struct StoryPrompt {
    std::string text;
    int frame_count = 1;

    friend bool operator==(const StoryPrompt&, const StoryPrompt&) = default;
};

// Normalized coordinates, x to the right, y down. Valid iff 0 <= x0 < x1 <= 1
// and likewise for y.
struct BoundingBox {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 1.0;
    double y1 = 1.0;

    bool valid() const {
        return 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
    }
    double area() const { return (x1 - x0) * (y1 - y0); }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Overlap area of two boxes; 0 when disjoint (shared edges do not count).
inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
    const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

// One subject's placement in one frame: local prompt plus box.
struct SubjectLayout {
    std::string subject_id;
    std::string local_prompt;
    BoundingBox box;

    friend bool operator==(const SubjectLayout&, const SubjectLayout&) = default;
};

struct FramePlan {
    int index = 1; // 1-based frame ordinal
    std::string global_prompt;
    std::vector<SubjectLayout> layouts;

    friend bool operator==(const FramePlan&, const FramePlan&) = default;
};

// Full planning output: prompt echo, subject registry, per-frame plans.
// Subject identity across frames is the registry key, never prompt text.
struct StoryboardPlan {
    StoryPrompt prompt;
    std::map<std::string, std::string> subjects; // subject_id -> canonical description
    std::vector<FramePlan> frames;

    friend bool operator==(const StoryboardPlan&, const StoryboardPlan&) = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

} // namespace detail

// Collects every violated invariant; empty result means the plan is valid.
inline std::vector<std::string> plan_violations(const StoryboardPlan& plan) {
    std::vector<std::string> issues;
    if (plan.prompt.frame_count < 1) {
        issues.push_back("prompt.frame_count must be >= 1");
    }
    if (detail::trim(plan.prompt.text).empty()) {
        issues.push_back("prompt.text must be non-empty after trimming");
    }
    if (static_cast<int>(plan.frames.size()) != plan.prompt.frame_count) {
        issues.push_back("frames has " + std::to_string(plan.frames.size()) +
                         " entries but frame_count is " + std::to_string(plan.prompt.frame_count));
    }
    std::set<std::string> seen_subjects;
    for (std::size_t f = 0; f < plan.frames.size(); ++f) {
        const FramePlan& frame = plan.frames[f];
        const std::string at = "frames[" + std::to_string(f) + "]";
        if (frame.index != static_cast<int>(f) + 1) {
            issues.push_back(at + ".index is " + std::to_string(frame.index) +
                             ", expected " + std::to_string(f + 1));
        }
        if (frame.layouts.empty()) {
            issues.push_back(at + ".layouts must be non-empty");
        }
        std::set<std::string> ids_in_frame;
        for (std::size_t s = 0; s < frame.layouts.size(); ++s) {
            const SubjectLayout& layout = frame.layouts[s];
            const std::string lat = at + ".layouts[" + std::to_string(s) + "]";
            if (detail::trim(layout.local_prompt).empty()) {
                issues.push_back(lat + ".local_prompt must be non-empty");
            }
            if (!layout.box.valid()) {
                issues.push_back(lat + ".box [" + std::to_string(layout.box.x0) + "," +
                                 std::to_string(layout.box.y0) + "," + std::to_string(layout.box.x1) +
                                 "," + std::to_string(layout.box.y1) +
                                 "] violates 0 <= x0 < x1 <= 1, 0 <= y0 < y1 <= 1");
            }
            if (!ids_in_frame.insert(layout.subject_id).second) {
                issues.push_back(lat + ".subject_id '" + layout.subject_id +
                                 "' duplicated within the frame");
            }
            if (plan.subjects.find(layout.subject_id) == plan.subjects.end()) {
                issues.push_back(lat + ".subject_id '" + layout.subject_id +
                                 "' is not in the subject registry");
            }
            seen_subjects.insert(layout.subject_id);
        }
    }
    for (const auto& [id, desc] : plan.subjects) {
        if (seen_subjects.find(id) == seen_subjects.end()) {
            issues.push_back("subject '" + id + "' appears in no frame");
        }
        (void)desc;
    }
    return issues;
}

inline void validate_plan(const StoryboardPlan& plan) {
    auto issues = plan_violations(plan);
    if (!issues.empty()) {
        throw ValidationError("invalid storyboard plan", std::move(issues));
    }
}

// Deterministic test double for the LLM planner. Boxes tile the frame
// left-to-right with equal widths; the seed only varies subject descriptions.
inline StoryboardPlan mock_plan(const StoryPrompt& prompt, int subject_count, std::uint64_t seed) {
    if (prompt.frame_count < 1) throw UsageError("mock_plan: frame_count must be >= 1");
    if (detail::trim(prompt.text).empty()) throw UsageError("mock_plan: prompt text is empty");
    if (subject_count < 1) throw UsageError("mock_plan: subject_count must be >= 1");
    constexpr int kMaxSubjects = 1 << 20;
    if (subject_count > kMaxSubjects) {
        throw CapacityError("mock_plan: cannot tile " + std::to_string(subject_count) +
                            " subjects into a unit-width frame without degenerate boxes");
    }

    static const char* kAdjectives[] = {"amber", "blue", "crimson", "dappled", "emerald",
                                        "frosted", "golden", "hazel"};
    static const char* kNouns[] = {"fox", "owl", "otter", "heron", "badger",
                                   "lynx", "crane", "marmot"};
    constexpr int kAdjCount = 8;
    constexpr int kNounCount = 8;

    StoryboardPlan plan;
    plan.prompt = prompt;
    std::vector<std::string> ids;
    ids.reserve(subject_count);
    for (int k = 0; k < subject_count; ++k) {
        const std::string id = "subject-" + std::to_string(k + 1);
        const auto adj = rng::key({seed, 0xadull, static_cast<std::uint64_t>(k)}) % kAdjCount;
        const auto noun = rng::key({seed, 0x9ull, static_cast<std::uint64_t>(k)}) % kNounCount;
        plan.subjects[id] = std::string(kAdjectives[adj]) + " " + kNouns[noun] + " " +
                            std::to_string(k + 1);
        ids.push_back(id);
    }

    for (int f = 0; f < prompt.frame_count; ++f) {
        FramePlan frame;
        frame.index = f + 1;
        frame.global_prompt = prompt.text + ", scene " + std::to_string(f + 1);
        for (int k = 0; k < subject_count; ++k) {
            BoundingBox box;
            box.x0 = static_cast<double>(k) / subject_count;
            box.x1 = static_cast<double>(k + 1) / subject_count;
            box.y0 = 0.0;
            box.y1 = 1.0;
            if (!box.valid()) {
                throw CapacityError("mock_plan: tiling produced a degenerate box for subject " +
                                    std::to_string(k + 1));
            }
            frame.layouts.push_back(SubjectLayout{ids[k], plan.subjects[ids[k]], box});
        }
        plan.frames.push_back(std::move(frame));
    }
    validate_plan(plan);
    return plan;
}

namespace detail {

using json = nlohmann::json;

inline const json& require(const json& j, const std::string& key, const std::string& path,
                           std::vector<std::string>& issues) {
    static const json kNull;
    if (!j.is_object() || !j.contains(key)) {
        issues.push_back(path + ": missing required key '" + key + "'");
        return kNull;
    }
    return j.at(key);
}

inline std::string as_string(const json& j, const std::string& path,
                             std::vector<std::string>& issues) {
    if (!j.is_string()) {
        if (!j.is_null()) issues.push_back(path + ": expected string");
        return {};
    }
    return j.get<std::string>();
}

inline BoundingBox as_box(const json& j, const std::string& path,
                          std::vector<std::string>& issues) {
    BoundingBox box;
    if (!j.is_array() || j.size() != 4 || !std::all_of(j.begin(), j.end(), [](const json& v) {
            return v.is_number();
        })) {
        if (!j.is_null()) issues.push_back(path + ": expected [x0,y0,x1,y1] array of 4 numbers");
        return box;
    }
    box.x0 = j[0].get<double>();
    box.y0 = j[1].get<double>();
    box.x1 = j[2].get<double>();
    box.y1 = j[3].get<double>();
    return box;
}

} // namespace detail

// Parses and fully validates the plan wire format:
//   {prompt, frame_count, subjects, frames:[{index, global_prompt,
//    layouts:[{subject_id, local_prompt, box:[x0,y0,x1,y1]}]}]}
inline StoryboardPlan parse_plan(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("plan syntax error: ") + e.what(), text);
    }

    std::vector<std::string> issues;
    StoryboardPlan plan;
    if (!doc.is_object()) {
        throw ValidationError("invalid storyboard plan document", {"top level must be an object"});
    }
    plan.prompt.text = detail::as_string(detail::require(doc, "prompt", "$", issues), "$.prompt", issues);
    {
        const auto& fc = detail::require(doc, "frame_count", "$", issues);
        if (fc.is_number_integer()) {
            plan.prompt.frame_count = fc.get<int>();
        } else if (!fc.is_null()) {
            issues.push_back("$.frame_count: expected integer");
        }
    }
    {
        const auto& subjects = detail::require(doc, "subjects", "$", issues);
        if (subjects.is_object()) {
            for (auto it = subjects.begin(); it != subjects.end(); ++it) {
                plan.subjects[it.key()] =
                    detail::as_string(it.value(), "$.subjects['" + it.key() + "']", issues);
            }
        } else if (!subjects.is_null()) {
            issues.push_back("$.subjects: expected object of subject_id -> description");
        }
    }
    {
        const auto& frames = detail::require(doc, "frames", "$", issues);
        if (frames.is_array()) {
            for (std::size_t f = 0; f < frames.size(); ++f) {
                const std::string at = "$.frames[" + std::to_string(f) + "]";
                const auto& jf = frames[f];
                FramePlan frame;
                const auto& idx = detail::require(jf, "index", at, issues);
                if (idx.is_number_integer()) frame.index = idx.get<int>();
                else if (!idx.is_null()) issues.push_back(at + ".index: expected integer");
                frame.global_prompt =
                    detail::as_string(detail::require(jf, "global_prompt", at, issues),
                                      at + ".global_prompt", issues);
                const auto& layouts = detail::require(jf, "layouts", at, issues);
                if (layouts.is_array()) {
                    for (std::size_t s = 0; s < layouts.size(); ++s) {
                        const std::string lat = at + ".layouts[" + std::to_string(s) + "]";
                        const auto& jl = layouts[s];
                        SubjectLayout layout;
                        layout.subject_id =
                            detail::as_string(detail::require(jl, "subject_id", lat, issues),
                                              lat + ".subject_id", issues);
                        layout.local_prompt =
                            detail::as_string(detail::require(jl, "local_prompt", lat, issues),
                                              lat + ".local_prompt", issues);
                        layout.box = detail::as_box(detail::require(jl, "box", lat, issues),
                                                    lat + ".box", issues);
                        frame.layouts.push_back(std::move(layout));
                    }
                } else if (!layouts.is_null()) {
                    issues.push_back(at + ".layouts: expected array");
                }
                plan.frames.push_back(std::move(frame));
            }
        } else if (!frames.is_null()) {
            issues.push_back("$.frames: expected array");
        }
    }
    if (!issues.empty()) {
        throw ValidationError("invalid storyboard plan document", std::move(issues));
    }
    validate_plan(plan);
    return plan;
}

inline nlohmann::json plan_to_json(const StoryboardPlan& plan) {
    validate_plan(plan);
    nlohmann::json doc;
    doc["prompt"] = plan.prompt.text;
    doc["frame_count"] = plan.prompt.frame_count;
    doc["subjects"] = nlohmann::json::object();
    for (const auto& [id, desc] : plan.subjects) doc["subjects"][id] = desc;
    doc["frames"] = nlohmann::json::array();
    for (const auto& frame : plan.frames) {
        nlohmann::json jf;
        jf["index"] = frame.index;
        jf["global_prompt"] = frame.global_prompt;
        jf["layouts"] = nlohmann::json::array();
        for (const auto& layout : frame.layouts) {
            nlohmann::json jl;
            jl["subject_id"] = layout.subject_id;
            jl["local_prompt"] = layout.local_prompt;
            jl["box"] = {layout.box.x0, layout.box.y0, layout.box.x1, layout.box.y1};
            jf["layouts"].push_back(std::move(jl));
        }
        doc["frames"].push_back(std::move(jf));
    }
    return doc;
}

// Canonical form: keys in sorted order (nlohmann object ordering), two-space
// indent, trailing newline. Structurally equal plans serialize identically.
inline std::string serialize_plan(const StoryboardPlan& plan) {
    return plan_to_json(plan).dump(2) + "\n";
}

} // namespace storybooth
