#include "mqret/tensor.hpp"

#include <sstream>

namespace mqret {

std::string shape_string(const Tensor& t) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) os << "x";
    os << t.shape[i];
  }
  os << "]";
  return os.str();
}

void require_shape(const Tensor& t, const std::vector<std::size_t>& expected, const char* op,
                   const char* operand) {
  if (t.shape != expected) {
    Tensor want;
    want.shape = expected;
    throw Error(ErrorKind::Dimension, std::string(op) + ": operand '" + operand + "' has shape " +
                                          shape_string(t) + ", expected " + shape_string(want));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* operand) {
  if (t.rank() != rank) {
    throw Error(ErrorKind::Dimension, std::string(op) + ": operand '" + operand + "' has rank " +
                                          std::to_string(t.rank()) + ", expected " +
                                          std::to_string(rank));
  }
}

}  // namespace mqret
