#pragma once

#include <string>

namespace adl::detail {

// Writes to `path + ".tmp"` and renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);

std::string read_file(const std::string& path);

// Shortest decimal form that parses back to the same double.
std::string format_double(double value);

}  // namespace adl::detail
