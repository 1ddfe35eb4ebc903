#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dastr {

// Error type thrown by every component of the library.  Carries a plain
// message; call sites that can attach context (config key paths, stage
// indices, file names) are expected to fold it into the message text.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message) : std::runtime_error(message) {}
};

namespace detail {

inline void format_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void format_into(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  format_into(os, rest...);
}

}  // namespace detail

// Builds an Error from a sequence of streamable pieces:
//   throw make_error("bad width ", w, " for layer ", i);
template <typename... Parts>
Error make_error(const Parts&... parts) {
  std::ostringstream os;
  os.precision(17);
  detail::format_into(os, parts...);
  return Error(os.str());
}

}  // namespace dastr
