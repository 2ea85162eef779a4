#include "mrad/losses.hpp"

#include "mrad/error.hpp"

#include <algorithm>
#include <cmath>

namespace mrad::ft {

namespace {

double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

bool clamped(double p) { return p < kProbEps || p > 1.0 - kProbEps; }

void check_lengths(std::size_t a, std::size_t b)
{
    if (a != b)
        throw_validation("prediction and target lengths differ");
}

} // namespace

double bce_loss(double p, std::uint8_t y)
{
    const double c = clamp_prob(p);
    return y ? -std::log(c) : -std::log(1.0 - c);
}

double bce_grad(double p, std::uint8_t y)
{
    if (clamped(p))
        return 0.0;
    return y ? -1.0 / p : 1.0 / (1.0 - p);
}

double dice_loss(std::span<const double> p, std::span<const std::uint8_t> t)
{
    return dice_loss_grad(p, t).value;
}

LossGrad dice_loss_grad(std::span<const double> p, std::span<const std::uint8_t> t)
{
    check_lengths(p.size(), t.size());
    double inter = 0.0, sum_p = 0.0, sum_t = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += p[i] * t[i];
        sum_p += p[i];
        sum_t += t[i];
    }
    const double num = 2.0 * inter + kDiceSmooth;
    const double den = sum_p + sum_t + kDiceSmooth;
    LossGrad out;
    out.value = 1.0 - num / den;
    out.grad.resize(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
        out.grad[i] = -(2.0 * t[i] * den - num) / (den * den);
    return out;
}

double focal_loss(std::span<const double> p, std::span<const std::uint8_t> t, double gamma)
{
    return focal_loss_grad(p, t, gamma).value;
}

LossGrad focal_loss_grad(std::span<const double> p, std::span<const std::uint8_t> t, double gamma)
{
    check_lengths(p.size(), t.size());
    LossGrad out;
    out.grad.assign(p.size(), 0.0);
    if (p.empty())
        return out;
    const double inv_n = 1.0 / static_cast<double>(p.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double c = clamp_prob(p[i]);
        const double pt = t[i] ? c : 1.0 - c;
        const double one_minus = 1.0 - pt;
        const double log_pt = std::log(pt);
        sum += -std::pow(one_minus, gamma) * log_pt;
        if (!clamped(p[i])) {
            // d/dpt of -(1-pt)^g ln(pt)
            const double dpt = (gamma > 0.0 ? gamma * std::pow(one_minus, gamma - 1.0) * log_pt : 0.0)
                               - std::pow(one_minus, gamma) / pt;
            out.grad[i] = (t[i] ? dpt : -dpt) * inv_n;
        }
    }
    out.value = sum * inv_n;
    return out;
}

} // namespace mrad::ft
