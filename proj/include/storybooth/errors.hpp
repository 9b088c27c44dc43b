#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace storybooth {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller broke a precondition (shape mismatch, mixed frames, bad mode combo).
class UsageError : public Error {
public:
    explicit UsageError(const std::string& msg) : Error(msg) {}
};

// A document or value failed schema/invariant checks. Carries every violated
// invariant, not just the first one found.
class ValidationError : public Error {
public:
    ValidationError(const std::string& context, std::vector<std::string> issues)
        : Error(join(context, issues)), issues_(std::move(issues)) {}
    explicit ValidationError(const std::string& msg)
        : Error(msg), issues_{msg} {}

    const std::vector<std::string>& issues() const { return issues_; }

private:
    static std::string join(const std::string& context, const std::vector<std::string>& issues) {
        std::string out = context;
        for (const auto& i : issues) {
            out += "\n  - " + i;
        }
        return out;
    }
    std::vector<std::string> issues_;
};

// Text that could not be parsed at all (syntax, not schema). Keeps the raw
// input so callers can log what the model/file actually said.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, std::string raw_text = {}, int attempts = 1)
        : Error(msg), raw_text_(std::move(raw_text)), attempts_(attempts) {}

    const std::string& raw_text() const { return raw_text_; }
    int attempts() const { return attempts_; }

private:
    std::string raw_text_;
    int attempts_;
};

// mock_plan cannot tile the requested number of subjects into a frame.
class CapacityError : public Error {
public:
    explicit CapacityError(const std::string& msg) : Error(msg) {}
};

// Network-level failure talking to a chat endpoint. Retriable; carries how
// many attempts were made before giving up.
class TransportError : public Error {
public:
    TransportError(const std::string& msg, int attempts = 1)
        : Error(msg), attempts_(attempts) {}
    int attempts() const { return attempts_; }

private:
    int attempts_;
};

// A non-finite value showed up mid-computation. Names the stage it was
// detected at (e.g. "scores", "step 950 layer 1").
class NumericError : public Error {
public:
    explicit NumericError(const std::string& stage)
        : Error("non-finite value at stage: " + stage), stage_(stage) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

// Filesystem trouble while emitting artifacts.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

} // namespace storybooth
