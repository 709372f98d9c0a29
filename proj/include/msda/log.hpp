#pragma once

#include <string>

namespace msda {

// Warnings go to stderr with a "[warn] " prefix; tests exercising degenerate
// paths can silence them.
void log_warn(const std::string& msg);
void set_warnings_enabled(bool enabled);
bool warnings_enabled();

}  // namespace msda
