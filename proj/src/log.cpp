#include "msda/log.hpp"

#include <cstdio>

namespace msda {

namespace {
bool g_warnings = true;
}

void log_warn(const std::string& msg) {
  if (g_warnings) std::fprintf(stderr, "[warn] %s\n", msg.c_str());
}

void set_warnings_enabled(bool enabled) { g_warnings = enabled; }

bool warnings_enabled() { return g_warnings; }

}  // namespace msda
