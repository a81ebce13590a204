#include "protofed/log.hpp"

#include <iostream>
#include <mutex>
#include <set>

namespace protofed::log {

namespace {
std::mutex g_mutex;
bool g_quiet = false;
std::set<std::string> g_seen;
}  // namespace

void set_quiet(bool quiet) {
  std::lock_guard lock(g_mutex);
  g_quiet = quiet;
}

void info(const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (!g_quiet) std::cerr << "[protofed] " << message << '\n';
}

void warn(const std::string& message) {
  std::lock_guard lock(g_mutex);
  std::cerr << "[protofed] warning: " << message << '\n';
}

void warn_once(const std::string& key, const std::string& message) {
  {
    std::lock_guard lock(g_mutex);
    if (!g_seen.insert(key).second) return;
  }
  warn(message);
}

}  // namespace protofed::log
