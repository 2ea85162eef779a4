#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace mrad::ft {

inline constexpr double kProbEps = 1e-7;
inline constexpr double kDiceSmooth = 1.0;
inline constexpr double kFocalGamma = 2.0;

// Loss value together with d(loss)/d(prediction).
struct LossGrad {
    double value = 0.0;
    std::vector<double> grad;
};

// Binary cross-entropy on the anomaly probability, p clamped to [eps, 1-eps].
double bce_loss(double p, std::uint8_t y);
double bce_grad(double p, std::uint8_t y);

// 1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s), s = 1.
double dice_loss(std::span<const double> p, std::span<const std::uint8_t> t);
LossGrad dice_loss_grad(std::span<const double> p, std::span<const std::uint8_t> t);

// mean_i -(1 - p_t)^gamma ln(p_t), p_t = p if t = 1 else 1 - p, no alpha term.
double focal_loss(std::span<const double> p, std::span<const std::uint8_t> t, double gamma = kFocalGamma);
LossGrad focal_loss_grad(std::span<const double> p, std::span<const std::uint8_t> t, double gamma = kFocalGamma);

} // namespace mrad::ft
