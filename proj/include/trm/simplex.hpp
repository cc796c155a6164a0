#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace trm {

/// Mixture weights over environments. `owner` is the excluded environment
/// Q (its weight is pinned to zero), or -1 when the simplex spans every
/// environment as in GroupDRO.
struct SimplexWeights {
    std::vector<double> weights;
    int owner = -1;
    double lr = 0.01;

    static SimplexWeights uniform(std::size_t num_envs, int owner = -1, double lr = 0.01) {
        SimplexWeights s;
        s.owner = owner;
        s.lr = lr;
        const double k = static_cast<double>(owner >= 0 ? num_envs - 1 : num_envs);
        s.weights.assign(num_envs, 1.0 / k);
        if (owner >= 0) s.weights[static_cast<std::size_t>(owner)] = 0.0;
        return s;
    }

    std::size_t size() const { return weights.size(); }
    double operator[](std::size_t i) const { return weights[i]; }

    void validate(double tol = 1e-9) const {
        double total = 0.0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (!(weights[i] >= 0.0) || !std::isfinite(weights[i]))
                throw std::invalid_argument("simplex weight " + std::to_string(i) + " is negative or non-finite");
            total += weights[i];
        }
        if (std::abs(total - 1.0) > tol)
            throw std::invalid_argument("simplex weights sum to " + std::to_string(total));
        if (owner >= 0 && weights.at(static_cast<std::size_t>(owner)) != 0.0)
            throw std::invalid_argument("simplex places weight on its excluded environment " +
                                        std::to_string(owner));
    }

    /// Index of the largest weight, lowest index on ties.
    std::size_t argmax() const {
        std::size_t best = 0;
        for (std::size_t i = 1; i < weights.size(); ++i)
            if (weights[i] > weights[best]) best = i;
        return best;
    }
};

/// Exponentiated-gradient ascent on the simplex:
///   w_i <- w_i exp(lr * g_i) / sum_j w_j exp(lr * g_j).
/// Entries with zero weight (including the owner) stay at zero. Computed in
/// the log domain so a large lr * g cannot overflow.
inline SimplexWeights exponentiated_gradient(const SimplexWeights& current, const std::vector<double>& gains,
                                             double lr) {
    if (gains.size() != current.size())
        throw std::invalid_argument("exponentiated_gradient: " + std::to_string(gains.size()) + " gains for " +
                                    std::to_string(current.size()) + " weights");
    current.validate();
    double top = -std::numeric_limits<double>::infinity();
    std::vector<double> logits(current.size(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < current.size(); ++i) {
        if (current.weights[i] <= 0.0) continue;
        if (!std::isfinite(gains[i])) throw std::invalid_argument("exponentiated_gradient: non-finite gain");
        logits[i] = std::log(current.weights[i]) + lr * gains[i];
        top = std::max(top, logits[i]);
    }
    SimplexWeights next = current;
    double z = 0.0;
    for (std::size_t i = 0; i < current.size(); ++i) {
        next.weights[i] = current.weights[i] > 0.0 ? std::exp(logits[i] - top) : 0.0;
        z += next.weights[i];
    }
    for (auto& w : next.weights) w /= z;
    return next;
}

}  // namespace trm
