#pragma once

#include <vector>

namespace varlap {

/// I.i.d. scalar observations with cached sufficient statistics.
///
/// `centered_ss` = sum (y_i - mean_y)^2 is computed with a second pass so that
/// residual sums of squares stay accurate for large n.
class DataSample {
 public:
  DataSample() = default;
  explicit DataSample(std::vector<double> y);

  const std::vector<double>& y() const { return y_; }
  int n() const { return static_cast<int>(y_.size()); }
  double mean_y() const { return mean_; }
  double sumsq_y() const { return sumsq_; }
  double sum_y() const { return mean_ * static_cast<double>(y_.size()); }
  double centered_ss() const { return centered_ss_; }

  /// sum_i (y_i - c)^2, evaluated through the centered statistics.
  double residual_ss(double c) const;

 private:
  std::vector<double> y_;
  double mean_ = 0.0;
  double sumsq_ = 0.0;
  double centered_ss_ = 0.0;
};

}  // namespace varlap
