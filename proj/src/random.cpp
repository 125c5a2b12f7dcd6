#include "varlap/random.hpp"

#include "varlap/errors.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace varlap {

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t stream_key(std::uint64_t seed, std::string_view tag, std::uint64_t n,
                         std::uint64_t rep) {
  std::uint64_t state = seed;
  std::uint64_t key = splitmix64(state);
  for (std::uint64_t part : {fnv1a64(tag), n, rep}) {
    state ^= part;
    key ^= splitmix64(state);
  }
  return key;
}

RngStream::RngStream(std::uint64_t key) : engine_(key) {}

double RngStream::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double phi = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(phi);
  has_spare_ = true;
  return r * std::cos(phi);
}

RngStream make_stream(std::uint64_t seed, std::string_view tag, std::uint64_t n, std::uint64_t rep) {
  return RngStream(stream_key(seed, tag, n, rep));
}

DataSample sample_data(const models::SingleParamModel& model, double theta0, int n, RngStream& rng) {
  if (n < 1) throw DomainError("sample_data: n must be >= 1");
  const double center = model.f(theta0);
  const double s = std::sqrt(model.s2);
  std::vector<double> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = center + s * rng.normal();
  return DataSample(std::move(y));
}

DataSample sample_data(const models::LinearLambdaModel& model, const models::GroundTruth& truth,
                       int n, RngStream& rng) {
  if (n < 1) throw DomainError("sample_data: n must be >= 1");
  if (!truth.lambda0) throw InvariantError("sample_data: lambda0 is required");
  const double center = model.a * truth.theta0;
  const double sd = std::exp(0.5 * *truth.lambda0);
  std::vector<double> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = center + sd * rng.normal();
  return DataSample(std::move(y));
}

}  // namespace varlap
