#include "corrmoe/tensor.hpp"

#include <cmath>

#include "corrmoe/errors.hpp"

namespace corrmoe::nn {

std::string Shape::str() const {
  return "(" + std::to_string(b) + "," + std::to_string(c) + "," +
         std::to_string(n) + "," + std::to_string(k) + ")";
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw PreconditionError("Tensor::item: not a scalar, shape " +
                            shape_.str());
  return data_[0];
}

}  // namespace corrmoe::nn
