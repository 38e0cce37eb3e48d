#include "runio.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>

#include "adl/error.hpp"
#include "fileio.hpp"

namespace adl::detail {

DirLock::DirLock(const std::string& dir) : path_(path_join(dir, ".lock")) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    throw IoError("run directory " + dir + " is locked by another writer (remove " + path_ +
                  " if no run is active)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirLock::~DirLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

std::string path_join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

void write_json(const std::string& path, const nlohmann::json& value) {
  write_file_atomic(path, value.dump(2) + "\n");
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace adl::detail
