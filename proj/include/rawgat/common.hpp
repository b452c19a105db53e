#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace rawgat {

// Error taxonomy used across the library. The CLI maps `config` to the
// usage exit code (2) and everything else to the runtime exit code (1).
enum class ErrorKind {
  dimension,  // shape / rank mismatch
  contract,   // precondition violated (non-scalar loss, even kernel, ...)
  config,     // bad configuration or unknown key
  io,         // file format / filesystem problems
  numeric,    // NaN/Inf where finite values are required
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

template <class... Args>
std::string concat_msg(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace rawgat
