#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "mfsgd/errors.hpp"
#include "mfsgd/half.hpp"
#include "mfsgd/random.hpp"

namespace mfsgd {

using Index = Eigen::Index;

/// One observed rating r at (row u, column v).
struct Sample {
  std::uint32_t u = 0;
  std::uint32_t v = 0;
  float r = 0.0f;

  friend bool operator==(const Sample&, const Sample&) = default;
  friend auto operator<=>(const Sample&, const Sample&) = default;
};

struct Hyperparams {
  Index k = 128;
  double lambda_p = 0.05;
  double lambda_q = 0.05;
  double alpha = 0.08;
  double beta = 0.3;

  void validate() const {
    if (k < 1) throw UsageError("rank k must be at least 1");
    if (!(lambda_p >= 0.0) || !(lambda_q >= 0.0)) throw UsageError("regularizers must be non-negative");
    if (!(alpha > 0.0)) throw UsageError("initial learning rate alpha must be positive");
    if (!(beta >= 0.0)) throw UsageError("schedule decay beta must be non-negative");
  }
};

/// s_t = alpha / (1 + beta * t^1.5), with the first epoch at t = 0.
class LearningRateSchedule {
 public:
  LearningRateSchedule(double alpha, double beta) : alpha_(alpha), beta_(beta) {
    if (!(alpha > 0.0)) throw UsageError("alpha must be positive");
    if (!(beta >= 0.0)) throw UsageError("beta must be non-negative");
  }
  explicit LearningRateSchedule(const Hyperparams& h) : LearningRateSchedule(h.alpha, h.beta) {}

  double alpha() const { return alpha_; }
  double beta() const { return beta_; }

  double at(std::int64_t epoch) const {
    const double t = static_cast<double>(epoch);
    return alpha_ / (1.0 + beta_ * t * std::sqrt(t));
  }

 private:
  double alpha_;
  double beta_;
};

inline double lr_at_epoch(const LearningRateSchedule& schedule, std::int64_t epoch) {
  if (epoch < 0) throw UsageError("epoch index must be non-negative");
  return schedule.at(epoch);
}

/// Linear map between the stored rating domain and the model domain:
/// model = (rating - offset) * factor.
struct RatingScaling {
  double offset = 0.0;
  double factor = 1.0;

  double to_model(double rating) const { return (rating - offset) * factor; }
  double to_rating(double model) const { return model / factor + offset; }
  bool is_identity() const { return offset == 0.0 && factor == 1.0; }

  friend bool operator==(const RatingScaling&, const RatingScaling&) = default;
};

enum class Precision { full32, half16 };

constexpr std::string_view to_string(Precision p) { return p == Precision::full32 ? "full32" : "half16"; }

template <typename E>
struct ElementTraits;

template <>
struct ElementTraits<float> {
  static constexpr Precision precision = Precision::full32;
  static float widen(float x) { return x; }
  static float narrow(float x) { return x; }
};

template <>
struct ElementTraits<Half> {
  static constexpr Precision precision = Precision::half16;
  static float widen(Half x) { return decode_f16(x); }
  static Half narrow(float x) { return encode_f16(x); }
};

template <typename E>
concept FeatureElement = requires(E e, float f) {
  { ElementTraits<E>::widen(e) } -> std::same_as<float>;
  { ElementTraits<E>::narrow(f) } -> std::same_as<E>;
};

/// Dense row-per-entity factor matrix (P is m x k, Q is n x k).
///
/// Element reads and writes through load_row/store_row are relaxed atomics, so
/// unsynchronized Hogwild workers observe stale but never torn values. All
/// arithmetic happens on widened float copies.
template <FeatureElement E>
class FeatureMatrix {
 public:
  using Element = E;
  using Traits = ElementTraits<E>;
  using Storage = Eigen::Matrix<E, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  static constexpr Precision precision = Traits::precision;

  FeatureMatrix() = default;
  FeatureMatrix(Index rows, Index k) : data_(rows, k) { data_.setConstant(Traits::narrow(0.0f)); }

  /// Narrows every coefficient of a float matrix into this storage.
  template <typename Derived>
  static FeatureMatrix from_floats(const Eigen::MatrixBase<Derived>& values) {
    FeatureMatrix out(values.rows(), values.cols());
    for (Index r = 0; r < values.rows(); ++r) {
      for (Index d = 0; d < values.cols(); ++d) out.data_(r, d) = Traits::narrow(static_cast<float>(values(r, d)));
    }
    return out;
  }

  Index rows() const { return data_.rows(); }
  Index k() const { return data_.cols(); }

  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  float get(Index r, Index d) const { return Traits::widen(load(data_(r, d))); }
  void set(Index r, Index d, float x) { store(data_(r, d), Traits::narrow(x)); }

  template <typename Derived>
  void load_row(Index r, Eigen::MatrixBase<Derived>& out) const {
    const E* row = data_.data() + r * k();
    for (Index d = 0; d < k(); ++d) out(d) = Traits::widen(load(row[d]));
  }

  Eigen::VectorXf row(Index r) const {
    Eigen::VectorXf out(k());
    load_row(r, out);
    return out;
  }

  /// Writes the (narrowed) row and reports whether every stored value is finite.
  template <typename Derived>
  bool store_row(Index r, const Eigen::MatrixBase<Derived>& values) {
    E* row = data_.data() + r * k();
    bool finite = true;
    for (Index d = 0; d < k(); ++d) {
      const E stored = Traits::narrow(static_cast<float>(values(d)));
      store(row[d], stored);
      finite = finite && std::isfinite(Traits::widen(stored));
    }
    return finite;
  }

  Eigen::MatrixXf widened() const {
    Eigen::MatrixXf out(rows(), k());
    for (Index r = 0; r < rows(); ++r) {
      for (Index d = 0; d < k(); ++d) out(r, d) = Traits::widen(data_(r, d));
    }
    return out;
  }

  bool all_finite() const {
    for (Index i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(Traits::widen(data_.data()[i]))) return false;
    }
    return true;
  }

  friend bool operator==(const FeatureMatrix& a, const FeatureMatrix& b) {
    if (a.rows() != b.rows() || a.k() != b.k()) return false;
    for (Index i = 0; i < a.data_.size(); ++i) {
      if (!bitwise_equal(a.data_.data()[i], b.data_.data()[i])) return false;
    }
    return true;
  }

 private:
  static E load(const E& x) { return std::atomic_ref<E>(const_cast<E&>(x)).load(std::memory_order_relaxed); }
  static void store(E& x, E value) { std::atomic_ref<E>(x).store(value, std::memory_order_relaxed); }
  static bool bitwise_equal(E a, E b) {
    if constexpr (std::same_as<E, float>) {
      return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b);
    } else {
      return a == b;
    }
  }

  Storage data_;
};

using FeatureMatrixF = FeatureMatrix<float>;
using FeatureMatrixH = FeatureMatrix<Half>;

/// Elements i.i.d. uniform in [0, scale); scale < 0 selects 1/sqrt(k).
template <FeatureElement E = float>
FeatureMatrix<E> init_features(Index rows, Index k, std::uint64_t seed, double scale = -1.0) {
  if (rows < 1 || k < 1) throw UsageError("init_features needs rows >= 1 and k >= 1");
  if (scale < 0.0) scale = 1.0 / std::sqrt(static_cast<double>(k));
  Rng rng(seed);
  FeatureMatrix<E> out(rows, k);
  for (Index r = 0; r < rows; ++r) {
    for (Index d = 0; d < k; ++d) {
      // Product can round up to scale in float; clamp back under the bound.
      float x = static_cast<float>(rng.uniform01() * scale);
      if (scale > 0.0 && x >= scale) x = std::nextafter(static_cast<float>(scale), 0.0f);
      out.storage()(r, d) = ElementTraits<E>::narrow(x);
    }
  }
  return out;
}

/// Inner product p_u . q_v accumulated in double.
template <FeatureElement E>
double predict(const FeatureMatrix<E>& P, const FeatureMatrix<E>& Q, Index u, Index v) {
  if (P.k() != Q.k()) throw UsageError("P and Q rank differ");
  if (u < 0 || u >= P.rows() || v < 0 || v >= Q.rows()) throw UsageError("predict index out of range");
  double sum = 0.0;
  for (Index d = 0; d < P.k(); ++d) sum += static_cast<double>(P.get(u, d)) * static_cast<double>(Q.get(v, d));
  return sum;
}

/// The per-sample SGD step with reusable scratch vectors.
///
/// err and both gradients come from one snapshot of p_u and q_v taken before
/// either row is written, so the two updates are order-independent.
class SgdKernel {
 public:
  explicit SgdKernel(Index k) : p_(k), q_(k) {}

  /// Returns false if any written element is non-finite.
  template <FeatureElement E>
  bool apply(FeatureMatrix<E>& P, FeatureMatrix<E>& Q, const Sample& s, float rate, float lambda_p, float lambda_q) {
    P.load_row(s.u, p_);
    Q.load_row(s.v, q_);
    const float err = s.r - p_.dot(q_);
    const bool p_ok = P.store_row(s.u, p_ + rate * (err * q_ - lambda_p * p_));
    const bool q_ok = Q.store_row(s.v, q_ + rate * (err * p_ - lambda_q * q_));
    return p_ok && q_ok;
  }

  template <FeatureElement E>
  bool apply(FeatureMatrix<E>& P, FeatureMatrix<E>& Q, const Sample& s, float rate, const Hyperparams& h) {
    return apply(P, Q, s, rate, static_cast<float>(h.lambda_p), static_cast<float>(h.lambda_q));
  }

 private:
  Eigen::VectorXf p_;
  Eigen::VectorXf q_;
};

template <FeatureElement E>
void check_shapes(const FeatureMatrix<E>& P, const FeatureMatrix<E>& Q, const Sample& s) {
  if (P.k() != Q.k()) throw UsageError("P and Q rank differ");
  if (s.u >= P.rows() || s.v >= Q.rows()) throw UsageError("sample index outside feature matrices");
}

/// Single SGD step on p_u and q_v; throws DivergenceError on a non-finite result.
template <FeatureElement E>
void sgd_update(FeatureMatrix<E>& P, FeatureMatrix<E>& Q, const Sample& s, double rate, const Hyperparams& hyper) {
  check_shapes(P, Q, s);
  if (!(rate > 0.0)) throw UsageError("learning rate must be positive");
  SgdKernel kernel(P.k());
  if (!kernel.apply(P, Q, s, static_cast<float>(rate), hyper)) {
    throw DivergenceError("non-finite feature after update at (" + std::to_string(s.u) + ", " + std::to_string(s.v) + ")");
  }
}

/// Applies one update per sample, in the given order, at the epoch-t rate.
/// Returns the number of updates performed.
template <FeatureElement E>
std::uint64_t epoch_serial(std::span<const Sample> ordered, FeatureMatrix<E>& P, FeatureMatrix<E>& Q,
                           const Hyperparams& hyper, std::int64_t epoch) {
  const auto rate = static_cast<float>(lr_at_epoch(LearningRateSchedule(hyper), epoch));
  SgdKernel kernel(P.k());
  std::uint64_t updates = 0;
  for (const Sample& s : ordered) {
    check_shapes(P, Q, s);
    if (!kernel.apply(P, Q, s, rate, hyper)) {
      throw DivergenceError("training diverged in epoch " + std::to_string(epoch));
    }
    ++updates;
  }
  return updates;
}

/// Root mean squared error of the ratings in `samples` (rating domain), with
/// model predictions mapped back through `scaling`.
template <FeatureElement E>
double rmse(std::span<const Sample> samples, const FeatureMatrix<E>& P, const FeatureMatrix<E>& Q,
            const RatingScaling& scaling = {}) {
  if (samples.empty()) throw UsageError("rmse of an empty sample list is undefined");
  double sum = 0.0;
  for (const Sample& s : samples) {
    const double e = static_cast<double>(s.r) - scaling.to_rating(predict(P, Q, s.u, s.v));
    sum += e * e;
  }
  return std::sqrt(sum / static_cast<double>(samples.size()));
}

}  // namespace mfsgd
