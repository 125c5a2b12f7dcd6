#include "varlap/data_sample.hpp"

#include "varlap/errors.hpp"

#include <cmath>

namespace varlap {

DataSample::DataSample(std::vector<double> y) : y_(std::move(y)) {
  if (y_.empty()) throw DegenerateDataError("DataSample: no observations");
  double sum = 0.0;
  for (double v : y_) {
    if (!std::isfinite(v)) throw DegenerateDataError("DataSample: non-finite observation");
    sum += v;
    sumsq_ += v * v;
  }
  mean_ = sum / static_cast<double>(y_.size());
  for (double v : y_) centered_ss_ += (v - mean_) * (v - mean_);
}

double DataSample::residual_ss(double c) const {
  const double d = mean_ - c;
  return centered_ss_ + static_cast<double>(y_.size()) * d * d;
}

}  // namespace varlap
