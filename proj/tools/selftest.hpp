#pragma once

#include <string>
#include <vector>

namespace hcseg {

struct SelftestCheck {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Oracle and invariant checks over every module; fast enough to run on each build.
std::vector<SelftestCheck> run_selftest();

} // namespace hcseg
