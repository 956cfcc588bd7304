#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace forge15 {

struct CodeTest {
    std::string call;
    std::vector<int64_t> args;
    int64_t expect = 0;
};

struct MinicalcResult {
    bool pass = false;
    std::string detail;  // empty on pass
};

// Parses the program and evaluates call(args) with 64-bit checked
// arithmetic, truncating division, a 10000-step budget and a call depth
// limit of 256. Tail calls reuse the current frame, so self-recursion
// burns through the step budget instead of the depth limit. Every
// failure (parse, runtime, budget) comes back as a result, never an
// exception.
MinicalcResult run_minicalc(const std::string& program, const CodeTest& test);

}  // namespace forge15
