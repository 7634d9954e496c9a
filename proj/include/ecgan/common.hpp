// Shared error taxonomy and small utilities.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ecgan {

// Raised when an input violates an operation's precondition.
using invalid_argument = std::invalid_argument;

// Raised when a dataset breaks an integrity rule (e.g. an identity present
// in only one face group). Carries the offending identities in what().
class dataset_error : public std::runtime_error {
public:
    explicit dataset_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when training produces a non-finite loss. what() carries a dump of
// the loss report captured at the failing step.
class divergence_error : public std::runtime_error {
public:
    explicit divergence_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised for I/O problems (file missing, malformed PNG, bad filename layout).
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename T>
inline T clamp(T v, T lo, T hi) {
    return v < lo ? lo : (v > hi ? hi : v);
}

inline bool is_pow2_side(int side) {
    return side == 16 || side == 32 || side == 64 || side == 128;
}

}  // namespace ecgan
