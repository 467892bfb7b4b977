#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

namespace semmask::cli {

/// Runs one invocation. Returns the process exit code: 0 success, 1 domain
/// error, 2 usage or I/O error. `env` stands in for the process environment.
int run(const std::vector<std::string> &args, const std::map<std::string, std::string> &env, std::ostream &out,
        std::ostream &err);

/// The process environment restricted to SEMMASK_* variables.
std::map<std::string, std::string> semmask_environment();

/// FNV-1a 64 of a byte string, as 16 hex digits.
std::string fnv1a_hex(const std::string &bytes);

}  // namespace semmask::cli
