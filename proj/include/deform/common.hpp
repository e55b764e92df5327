#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace deform {

using Index = std::ptrdiff_t;

/// Dense row-major H x W map; row index is the northing direction, top row first.
template <typename Scalar>
using FrameT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Frame = FrameT<double>;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t position)
      : Error(what), position_(position) {}
  /// Error without a meaningful position (reported as 0).
  explicit ParseError(const std::string& what) : ParseError(what, 0) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class FitError : public Error {
 public:
  using Error::Error;
};

std::string shape_string(const std::vector<Index>& shape);

/// Splittable counter-based generator (SplitMix64 over a keyed counter).
/// Streams derived with split() are independent of the draw history of the parent.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0);

  Rng split(std::uint64_t stream) const;
  Rng split(std::string_view tag) const;

  result_type operator()();
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal(double mean = 0.0, double stddev = 1.0);

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

/// Number of workers allowed for internal parallel loops (DEFORM_THREADS caps it).
int worker_count();

/// Flushes subnormal results to zero on the calling thread and, once per process,
/// keeps large temporary buffers on the heap rather than in fresh page mappings.
/// Autodiff tapes call this; softmax tails otherwise produce subnormals that are
/// very slow on x86.
void prepare_compute_thread();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index is
/// processed exactly once; callers write to disjoint outputs so results do not
/// depend on scheduling. Workers inherit the caller's floating-point control word.
void parallel_for(Index n, const std::function<void(Index)>& fn);

}  // namespace deform
