#pragma once

#include <string>

namespace protofed::log {

void info(const std::string& message);
void warn(const std::string& message);
// Emits each distinct key at most once per process.
void warn_once(const std::string& key, const std::string& message);
void set_quiet(bool quiet);

}  // namespace protofed::log
