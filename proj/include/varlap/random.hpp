#pragma once

// Reproducible random streams. Every replication draws from its own stream
// keyed by (seed, experiment tag, n, replication), so results do not depend on
// scheduling or thread count.
//
// Algorithm: the key is mixed with SplitMix64 and seeds a std::mt19937_64;
// uniforms take the top 53 bits; normals come from the Box-Muller transform
// (both outputs used in order).

#include "varlap/data_sample.hpp"
#include "varlap/models.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace varlap {

inline constexpr const char* kRngAlgorithm = "splitmix64-key+mt19937_64+boxmuller53";

std::uint64_t fnv1a64(std::string_view text);
std::uint64_t splitmix64(std::uint64_t& state);

std::uint64_t stream_key(std::uint64_t seed, std::string_view tag, std::uint64_t n,
                         std::uint64_t rep);

class RngStream {
 public:
  explicit RngStream(std::uint64_t key);

  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double normal();

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

RngStream make_stream(std::uint64_t seed, std::string_view tag, std::uint64_t n, std::uint64_t rep);

/// y_i = f(theta0) + s z_i.
DataSample sample_data(const models::SingleParamModel& model, double theta0, int n, RngStream& rng);

/// y_i = a theta0 + exp(lambda0 / 2) z_i.
DataSample sample_data(const models::LinearLambdaModel& model, const models::GroundTruth& truth,
                       int n, RngStream& rng);

}  // namespace varlap
