#pragma once

#include <functional>
#include <string>

namespace bda::log {

using Sink = std::function<void(const std::string&)>;

// Warnings go to stderr unless a sink is installed. Passing an empty sink
// restores the default.
void set_warning_sink(Sink sink);
void warn(const std::string& message);

}  // namespace bda::log
