#pragma once

#include <stdexcept>
#include <string>

namespace adruwams {

/// Failure category. The numeric values double as CLI exit codes.
enum class Errc : int {
    usage = 2,
    io = 3,
    validation = 4,
    numeric = 5,
};

inline const char* errc_name(Errc c) {
    switch (c) {
    case Errc::usage: return "usage";
    case Errc::io: return "io";
    case Errc::validation: return "validation";
    case Errc::numeric: return "numeric";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, const std::string& what, Errc code = Errc::validation) {
    if (!cond) fail(code, what);
}

} // namespace adruwams
