#pragma once

#include <cmath>
#include <vector>

#include <fmt/core.h>

#include "nmt/error.hpp"
#include "nmt/tensor.hpp"

namespace nmt {

// Inverse-square-root schedule with linear warmup:
// model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double noam_lr(long step, int model_dim, long warmup) {
  if (step < 1) throw UsageError(fmt::format("noam_lr: step must be >= 1, got {}", step));
  if (warmup < 1) throw UsageError(fmt::format("noam_lr: warmup must be >= 1, got {}", warmup));
  const double s = static_cast<double>(step);
  return std::pow(static_cast<double>(model_dim), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Bias-corrected Adam. Moments are allocated lazily to match the
// parameters passed to the first step().
template <class Scalar>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::vector<Parameter<Scalar>> &params, double lr) {
    if (first_.empty()) {
      for (const auto &p : params) {
        first_.push_back(Matrix<Scalar>::Zero(p.value().rows(), p.value().cols()));
        second_.push_back(Matrix<Scalar>::Zero(p.value().rows(), p.value().cols()));
      }
    }
    if (first_.size() != params.size()) {
      throw DimensionError(fmt::format("adam: {} moments for {} parameters", first_.size(),
                                       params.size()));
    }
    for (const auto &p : params) {
      if (!p.grad().allFinite()) {
        throw NumericError(fmt::format("adam: non-finite gradient in '{}' at step {}", p.name(),
                                       steps_ + 1));
      }
    }
    ++steps_;
    const double t = static_cast<double>(steps_);
    const auto b1 = Scalar(cfg_.beta1), b2 = Scalar(cfg_.beta2);
    const auto c1 = Scalar(1.0 - std::pow(cfg_.beta1, t));
    const auto c2 = Scalar(1.0 - std::pow(cfg_.beta2, t));
    const auto rate = Scalar(lr), eps = Scalar(cfg_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto &p = params[i];
      if (shape_of(p.grad()) != shape_of(first_[i])) {
        throw DimensionError(fmt::format("adam: gradient of '{}' has shape {}, moment {}",
                                         p.name(), to_string(shape_of(p.grad())),
                                         to_string(shape_of(first_[i]))));
      }
      first_[i] = b1 * first_[i] + (Scalar(1) - b1) * p.grad();
      second_[i] = b2 * second_[i] + (Scalar(1) - b2) * p.grad().cwiseAbs2();
      p.value().array() -= rate * (first_[i].array() / c1) /
                           ((second_[i].array() / c2).sqrt() + eps);
    }
  }

  long steps() const { return steps_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix<Scalar>> first_;
  std::vector<Matrix<Scalar>> second_;
  long steps_ = 0;
};

}  // namespace nmt
