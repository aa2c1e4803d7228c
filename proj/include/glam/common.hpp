#pragma once

#include <cstdint>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace glam {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Extents of a dense row-major tensor. Rank 1 {1} is used for scalars.
using Shape = std::vector<i64>;

class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ContractError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class IndexError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class GenerationError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

// Locale-independent float formatting shared by every file the artifact
// emits, so reruns with the same seed are byte-identical.
inline std::string fmt_g(double v, int precision = 9) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return std::string(buf);
}

// Thread-local forward-op counter used by the FLOP accounting oracle.
// Conventions (element ops): matmul 2mkn, elementwise add/sub/mul/scale 1,
// gelu 6, softmax 5 per element, layer norm 8 per element; pure data
// movement (reshape/gather/concat/slice/transpose) is free.
struct FlopCounter {
  static bool& enabled() {
    static thread_local bool e = false;
    return e;
  }
  static u64& total() {
    static thread_local u64 t = 0;
    return t;
  }
  static void add(u64 n) {
    if (enabled()) total() += n;
  }
  struct Scope {
    Scope() {
      total() = 0;
      enabled() = true;
    }
    ~Scope() { enabled() = false; }
    u64 count() const { return total(); }
  };
};

}  // namespace glam
