#pragma once

#include <string>

#include <nlohmann/json.hpp>

namespace adl::detail {

// Exclusive writer lock on a run directory (created if missing). The lock
// file is removed on destruction.
class DirLock {
 public:
  explicit DirLock(const std::string& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

std::string path_join(const std::string& dir, const std::string& name);
void write_json(const std::string& path, const nlohmann::json& value);
nlohmann::json read_json(const std::string& path);

}  // namespace adl::detail
