#include "strega/tensor.hpp"

namespace strega {

std::string dims_to_string(const Dims& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

void require_same_dims(const Dims& a, const Dims& b, const std::string& context) {
  if (a.size() != b.size()) {
    throw ShapeError(context + ": rank " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) {
      throw ShapeError(context + ": " + dims_to_string(a) + " vs " + dims_to_string(b),
                       static_cast<int>(i));
    }
  }
}

}  // namespace strega
