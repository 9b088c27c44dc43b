#pragma once

#include <cstdlib>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include "httplib.h"
#include "json.hpp"

#include "storybooth/errors.hpp"
#include "storybooth/plan.hpp"

namespace storybooth {

struct ChatMessage {
    std::string role; // "system" | "user" | "assistant"
    std::string content;
};

// Transport abstraction over a chat-completion endpoint. Implementations must
// be safe for concurrent independent calls.
class ChatClient {
public:
    virtual ~ChatClient() = default;
    virtual std::string complete(const std::vector<ChatMessage>& messages, const std::string& model,
                                 double temperature) = 0;
};

// One in-context exemplar: the request as the user would send it and the
// exact plan document the model should answer with.
struct PlannerExemplar {
    std::string input;
    std::string expected_plan;
};

struct PlannerConfig {
    std::vector<PlannerExemplar> exemplars; // 0..16 entries
    std::string task_description;
    std::string endpoint = "http://localhost:8080/v1/chat/completions";
    std::string model_name = "storybooth-planner";
    double temperature = 0.2;
    int max_attempts = 3;
};

inline void validate_planner_config(const PlannerConfig& config) {
    std::vector<std::string> issues;
    if (config.exemplars.size() > 16) issues.push_back("exemplars: at most 16 allowed");
    if (config.temperature < 0.0) issues.push_back("temperature must be non-negative");
    if (config.max_attempts < 1) issues.push_back("max_attempts must be >= 1");
    if (config.endpoint.empty()) issues.push_back("endpoint must be set");
    if (!issues.empty()) throw ValidationError("invalid planner config", std::move(issues));
}

// Generic HTTP JSON chat-completion client. Bearer token comes from the
// STORYBOOTH_API_KEY environment variable when present.
class HttpChatClient : public ChatClient {
public:
    explicit HttpChatClient(std::string endpoint, int timeout_seconds = 60)
        : endpoint_(std::move(endpoint)), timeout_seconds_(timeout_seconds) {}

    std::string complete(const std::vector<ChatMessage>& messages, const std::string& model,
                         double temperature) override {
        const auto split = endpoint_.find("://");
        if (split == std::string::npos) {
            throw TransportError("endpoint must include a scheme: " + endpoint_);
        }
        const auto path_start = endpoint_.find('/', split + 3);
        const std::string base =
            path_start == std::string::npos ? endpoint_ : endpoint_.substr(0, path_start);
        const std::string path =
            path_start == std::string::npos ? "/" : endpoint_.substr(path_start);

        httplib::Client client(base);
        client.set_connection_timeout(timeout_seconds_, 0);
        client.set_read_timeout(timeout_seconds_, 0);
        if (const char* key = std::getenv("STORYBOOTH_API_KEY")) {
            client.set_bearer_token_auth(key);
        }

        nlohmann::json body;
        body["model"] = model;
        body["temperature"] = temperature;
        body["messages"] = nlohmann::json::array();
        for (const auto& m : messages) {
            body["messages"].push_back({{"role", m.role}, {"content", m.content}});
        }

        auto res = client.Post(path, body.dump(), "application/json");
        if (!res) {
            throw TransportError("chat endpoint unreachable: " + endpoint_ + " (" +
                                 httplib::to_string(res.error()) + ")");
        }
        if (res->status != 200) {
            throw TransportError("chat endpoint returned HTTP " + std::to_string(res->status) +
                                 ": " + res->body);
        }
        try {
            const auto doc = nlohmann::json::parse(res->body);
            const auto& choice = doc.at("choices").at(0);
            if (choice.contains("message")) return choice.at("message").at("content").get<std::string>();
            return choice.at("text").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw TransportError(std::string("malformed chat response: ") + e.what());
        }
    }

private:
    std::string endpoint_;
    int timeout_seconds_;
};

// Recorded-transport stub: replays a fixed sequence of responses (or throws a
// transport failure) per call. Used by tests and offline runs.
class ScriptedChatClient : public ChatClient {
public:
    struct Turn {
        bool transport_failure = false;
        std::string response;
    };

    explicit ScriptedChatClient(std::vector<Turn> turns)
        : turns_(turns.begin(), turns.end()) {}

    static Turn reply(std::string text) { return Turn{false, std::move(text)}; }
    static Turn failure() { return Turn{true, {}}; }

    std::string complete(const std::vector<ChatMessage>& messages, const std::string&,
                         double) override {
        requests_.push_back(messages);
        if (turns_.empty()) throw TransportError("scripted client exhausted");
        Turn turn = std::move(turns_.front());
        turns_.pop_front();
        if (turn.transport_failure) throw TransportError("scripted transport failure");
        return turn.response;
    }

    // Conversations observed so far, for asserting on re-prompting behavior.
    const std::vector<std::vector<ChatMessage>>& requests() const { return requests_; }

private:
    std::deque<Turn> turns_;
    std::vector<std::vector<ChatMessage>> requests_;
};

namespace detail {

// Models often wrap JSON in prose or code fences; keep the outermost object.
inline std::string extract_json_object(const std::string& text) {
    const auto first = text.find('{');
    const auto last = text.rfind('}');
    if (first == std::string::npos || last == std::string::npos || last < first) return text;
    return text.substr(first, last - first + 1);
}

inline std::string planner_request_body(const StoryPrompt& prompt) {
    nlohmann::json req;
    req["prompt"] = prompt.text;
    req["frame_count"] = prompt.frame_count;
    return req.dump();
}

} // namespace detail

// The fixed chain-of-thought task description bundled with the artifact.
inline std::string default_task_description() {
    return "You are a storyboard planner. Given a story prompt and a frame count, think through "
           "the story arc scene by scene, decide which recurring characters appear where, and "
           "answer with a single JSON object and nothing else. Schema: {\"prompt\": string "
           "(echo the input), \"frame_count\": int (echo the input), \"subjects\": {subject_id: "
           "canonical description}, \"frames\": [{\"index\": 1-based int, \"global_prompt\": "
           "string, \"layouts\": [{\"subject_id\": string, \"local_prompt\": string, \"box\": "
           "[x0, y0, x1, y1] normalized with 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1}]}]}. "
           "Every frame needs at least one layout; every subject must appear in at least one "
           "frame; subject ids must be reused for the same character across frames.";
}

// Five bundled exemplars, built from plans so they always match the schema.
inline std::vector<PlannerExemplar> bundled_exemplars() {
    auto make = [](const std::string& text, int frames,
                   const std::vector<std::pair<std::string, std::string>>& subjects,
                   const std::vector<std::vector<std::pair<std::string, BoundingBox>>>& placements,
                   const std::vector<std::string>& scene_prompts) {
        StoryboardPlan plan;
        plan.prompt = {text, frames};
        for (const auto& [id, desc] : subjects) plan.subjects[id] = desc;
        for (int f = 0; f < frames; ++f) {
            FramePlan frame;
            frame.index = f + 1;
            frame.global_prompt = scene_prompts[f];
            for (const auto& [id, box] : placements[f]) {
                frame.layouts.push_back(SubjectLayout{id, plan.subjects[id], box});
            }
            plan.frames.push_back(std::move(frame));
        }
        return PlannerExemplar{detail::planner_request_body(plan.prompt), serialize_plan(plan)};
    };

    std::vector<PlannerExemplar> out;
    out.push_back(make(
        "a dog and a duck spend a day at the beach", 2,
        {{"dog", "a small brown dog with floppy ears"}, {"duck", "a white duck with an orange bill"}},
        {{{"dog", {0.05, 0.35, 0.45, 0.95}}, {"duck", {0.55, 0.40, 0.90, 0.90}}},
         {{"dog", {0.10, 0.30, 0.50, 0.90}}, {"duck", {0.55, 0.15, 0.95, 0.70}}}},
        {"dog digging in the sand while the duck waddles along the surf, sunny beach",
         "dog shaking off water while the duck flaps its wings, golden afternoon light"}));
    out.push_back(make(
        "a knight befriends a dragon", 3,
        {{"knight", "a knight in dented silver armor"}, {"dragon", "a green dragon with amber eyes"}},
        {{{"knight", {0.05, 0.25, 0.40, 0.95}}, {"dragon", {0.50, 0.10, 0.95, 0.90}}},
         {{"knight", {0.10, 0.30, 0.45, 0.95}}, {"dragon", {0.50, 0.15, 0.95, 0.85}}},
         {{"knight", {0.30, 0.40, 0.60, 0.95}}, {"dragon", {0.35, 0.05, 0.95, 0.70}}}},
        {"knight cautiously approaching the dragon outside a mountain cave",
         "knight offering bread to the dragon, both wary but curious",
         "knight riding on the dragon's back above the clouds at sunset"}));
    out.push_back(make(
        "a little robot learns to cook", 2,
        {{"robot", "a round teal robot with one blue eye"}},
        {{{"robot", {0.20, 0.20, 0.75, 0.95}}}, {{"robot", {0.15, 0.25, 0.70, 0.95}}}},
        {"robot studying a cookbook in a cluttered kitchen, morning light",
         "robot proudly holding a slightly burnt pancake, flour everywhere"}));
    out.push_back(make(
        "a cat and a rabbit race through a garden", 2,
        {{"cat", "a sleek black cat with green eyes"}, {"rabbit", "a plump grey rabbit"}},
        {{{"cat", {0.05, 0.40, 0.45, 0.90}}, {"rabbit", {0.55, 0.45, 0.95, 0.90}}},
         {{"cat", {0.50, 0.35, 0.90, 0.85}}, {"rabbit", {0.05, 0.40, 0.45, 0.90}}}},
        {"cat and rabbit at the starting line between flower beds",
         "rabbit overtaking the cat at the fountain, petals flying"}));
    out.push_back(make(
        "a girl and her kite on a windy hill", 4,
        {{"girl", "a girl in a yellow raincoat"}, {"kite", "a red diamond kite with a long tail"}},
        {{{"girl", {0.10, 0.40, 0.45, 0.95}}, {"kite", {0.55, 0.05, 0.90, 0.45}}},
         {{"girl", {0.15, 0.45, 0.50, 0.95}}, {"kite", {0.60, 0.10, 0.95, 0.50}}},
         {{"girl", {0.30, 0.50, 0.65, 0.95}}, {"kite", {0.10, 0.05, 0.45, 0.40}}},
         {{"girl", {0.25, 0.40, 0.60, 0.95}}, {"kite", {0.40, 0.10, 0.75, 0.50}}}},
        {"girl unspooling the kite line at the foot of a grassy hill",
         "kite climbing as the girl runs along the ridge",
         "kite dipping toward a lone oak tree while the girl pulls the line",
         "girl and kite silhouetted against a violet evening sky"}));
    return out;
}

inline PlannerConfig default_planner_config() {
    PlannerConfig config;
    config.task_description = default_task_description();
    config.exemplars = bundled_exemplars();
    return config;
}

// A planning outcome: the validated plan plus the full transcript (every
// message sent and received, corrections included) and the attempt count.
struct PlanningResult {
    StoryboardPlan plan;
    int attempts = 0;
    std::vector<ChatMessage> transcript;
};

// Ask the model for a storyboard plan. Parse or validation failures trigger a
// corrective re-prompt, up to config.max_attempts total attempts; transport
// failures are retried the same way. Returned plans always satisfy every plan
// invariant and match the requested prompt and frame count.
inline PlanningResult plan_storyboard(const StoryPrompt& prompt, const PlannerConfig& config,
                                      ChatClient& client) {
    if (prompt.frame_count < 1 || detail::trim(prompt.text).empty()) {
        throw ValidationError("invalid story prompt",
                              {"frame_count must be >= 1 and text must be non-empty"});
    }
    validate_planner_config(config);

    std::vector<ChatMessage> messages;
    messages.push_back({"system", config.task_description});
    for (const auto& ex : config.exemplars) {
        messages.push_back({"user", ex.input});
        messages.push_back({"assistant", ex.expected_plan});
    }
    messages.push_back({"user", detail::planner_request_body(prompt)});

    std::string last_raw;
    std::string last_error;
    for (int attempt = 1; attempt <= config.max_attempts; ++attempt) {
        std::string response;
        try {
            response = client.complete(messages, config.model_name, config.temperature);
        } catch (const TransportError& e) {
            if (attempt == config.max_attempts) {
                throw TransportError(std::string(e.what()) + " (after " + std::to_string(attempt) +
                                         " attempts)",
                                     attempt);
            }
            continue;
        }
        messages.push_back({"assistant", response});
        last_raw = response;
        try {
            StoryboardPlan plan = parse_plan(detail::extract_json_object(response));
            std::vector<std::string> issues;
            if (plan.prompt.frame_count != prompt.frame_count) {
                issues.push_back("plan has " + std::to_string(plan.prompt.frame_count) +
                                 " frames but " + std::to_string(prompt.frame_count) +
                                 " were requested");
            }
            if (plan.prompt.text != prompt.text) {
                issues.push_back("plan must echo the requested prompt text");
            }
            if (!issues.empty()) throw ValidationError("plan does not match request", std::move(issues));
            return PlanningResult{std::move(plan), attempt, std::move(messages)};
        } catch (const Error& e) {
            last_error = e.what();
            if (attempt < config.max_attempts) {
                messages.push_back(
                    {"user", std::string("Your previous output was rejected: ") + last_error +
                                 "\nReply again with a single corrected JSON object and nothing else."});
            }
        }
    }
    throw ParseError("planner output invalid after " + std::to_string(config.max_attempts) +
                         " attempts; last error: " + last_error,
                     last_raw, config.max_attempts);
}

} // namespace storybooth
