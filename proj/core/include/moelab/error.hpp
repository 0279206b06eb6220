#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string &msg)
{
    throw Error(msg);
}

inline void require(bool cond, const char *msg)
{
    if (!cond)
        throw Error(msg);
}

inline void require(bool cond, const std::string &msg)
{
    if (!cond)
        throw Error(msg);
}

} // namespace moelab
