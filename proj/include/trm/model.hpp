#pragma once

// Feature maps Phi and predictors w.
//
// Linear:  Phi(x) = W x,              W is k x d
// MLP:     Phi(x) = tanh(W1 x + b1),  W1 is h x d, k = h
//
// Binary predictors are k-vectors scored by w . Phi(x); multi-class
// predictors are K x k matrices scored by softmax(W Phi(x)).

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "envgen.hpp"
#include "rng.hpp"

namespace trm {

/// One environment's samples in the form the objectives consume.
struct Batch {
    ad::Array X;              // n x d
    std::vector<int> labels;  // +1/-1 or 0..K-1
    ad::Array ysign;          // n, binary only: labels as doubles
    int num_classes = 2;
    int env_id = 0;

    std::size_t size() const { return labels.size(); }
    bool binary() const { return num_classes == 2; }
};

inline Batch make_batch(const Dataset& ds) {
    Batch b;
    b.X = ds.features;
    b.labels = ds.labels;
    b.num_classes = ds.num_classes;
    b.env_id = ds.env_id;
    if (b.binary()) {
        std::vector<double> y(ds.labels.begin(), ds.labels.end());
        b.ysign = ad::Array::vector(std::move(y));
    }
    return b;
}

inline Batch subsample(const Dataset& ds, const std::vector<std::size_t>& rows) {
    Batch b;
    const std::size_t d = ds.dim();
    std::vector<double> x(rows.size() * d);
    b.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t r = rows[i];
        for (std::size_t j = 0; j < d; ++j) x[i * d + j] = ds.features(r, j);
        b.labels[i] = ds.labels[r];
    }
    b.X = ad::Array(ad::Shape{rows.size(), d}, std::move(x));
    b.num_classes = ds.num_classes;
    b.env_id = ds.env_id;
    if (b.binary()) {
        std::vector<double> y(b.labels.begin(), b.labels.end());
        b.ysign = ad::Array::vector(std::move(y));
    }
    return b;
}

inline std::vector<Batch> make_batches(const EnvironmentSuite& suite) {
    std::vector<Batch> out;
    for (const auto& e : suite.envs) out.push_back(make_batch(e));
    return out;
}

/// First `cap` rows of each environment (all rows when cap is 0).
inline std::vector<Batch> make_eval_batches(const EnvironmentSuite& suite, std::size_t cap) {
    std::vector<Batch> out;
    for (const auto& e : suite.envs) {
        if (cap == 0 || cap >= e.size()) {
            out.push_back(make_batch(e));
            continue;
        }
        std::vector<std::size_t> rows(cap);
        for (std::size_t i = 0; i < cap; ++i) rows[i] = i;
        out.push_back(subsample(e, rows));
    }
    return out;
}

enum class FeatureKind { linear, mlp };

struct ModelSpec {
    FeatureKind kind = FeatureKind::linear;
    std::size_t input_dim = 2;
    std::size_t feature_dim = 1;  // k; the hidden width for the MLP
    int num_classes = 2;
    // Keep the 1 x 2 linear map on the unit circle (a^2 + b^2 = 1).
    bool constrained = false;
    std::vector<double> phi_init;  // optional explicit initial W, row-major
    double init_scale = 0.5;
};

class Model {
public:
    Model() = default;

    static Model create(const ModelSpec& spec, std::uint64_t seed) {
        if (spec.input_dim == 0 || spec.feature_dim == 0) throw std::invalid_argument("model: zero dimension");
        if (spec.constrained && (spec.kind != FeatureKind::linear || spec.feature_dim != 1 || spec.input_dim != 2))
            throw std::invalid_argument("model: the unit-circle constraint applies to the 1 x 2 linear map only");
        Model m;
        m.spec_ = spec;
        Philox rng(Philox::mix(seed, 0x696e6974ULL, 0));
        const std::size_t k = spec.feature_dim, d = spec.input_dim;
        ad::Array W(ad::Shape{k, d});
        if (!spec.phi_init.empty()) {
            if (spec.phi_init.size() != k * d)
                throw std::invalid_argument("model: phi_init has " + std::to_string(spec.phi_init.size()) +
                                            " values, expected " + std::to_string(k * d));
            for (std::size_t i = 0; i < k * d; ++i) W[i] = spec.phi_init[i];
        } else {
            const double s = spec.init_scale / std::sqrt(static_cast<double>(d));
            for (std::size_t i = 0; i < k * d; ++i) W[i] = s * rng.normal();
        }
        m.phi_.push_back(ad::Var::param(W));
        if (spec.kind == FeatureKind::mlp) m.phi_.push_back(ad::Var::param(ad::Array(ad::Shape{k}, 0.0)));
        if (spec.constrained) m.project();
        return m;
    }

    const ModelSpec& spec() const { return spec_; }
    const std::vector<ad::Var>& phi() const { return phi_; }
    std::vector<ad::Var>& phi() { return phi_; }

    static std::vector<std::string> phi_names(const ModelSpec& spec) {
        if (spec.kind == FeatureKind::mlp) return {"phi.W1", "phi.b1"};
        return {"phi.W"};
    }

    /// Fresh parameter leaves holding the given values.
    void assign(const std::vector<ad::Array>& values) {
        if (values.size() != phi_.size()) throw std::invalid_argument("model: wrong number of parameter arrays");
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (values[i].shape() != phi_[i].shape())
                throw ad::ShapeError("model: parameter " + std::to_string(i) + " has shape " +
                                     ad::shape_str(values[i].shape()) + ", expected " +
                                     ad::shape_str(phi_[i].shape()));
            phi_[i] = ad::Var::param(values[i]);
        }
    }

    std::vector<ad::Array> values() const {
        std::vector<ad::Array> v;
        for (const auto& p : phi_) v.push_back(p.value());
        return v;
    }

    /// Copy whose parameters are constants; evaluating it records no graph.
    Model frozen() const {
        Model m = *this;
        for (auto& p : m.phi_) p = ad::Var(p.value());
        return m;
    }

    ad::Var features(const ad::Array& X) const {
        ad::Var x(X);
        if (spec_.kind == FeatureKind::linear) return ad::matmul(x, ad::transpose(phi_[0]));
        return ad::tanh(ad::add_row(ad::matmul(x, ad::transpose(phi_[0])), phi_[1]));
    }

    /// Renormalize onto the unit circle (constrained mode only).
    void project() {
        if (!spec_.constrained) return;
        ad::Array W = phi_[0].value();
        const double n = std::hypot(W[0], W[1]);
        if (!(n > 0)) throw ad::NonFiniteError("model: feature map collapsed to zero");
        W[0] /= n;
        W[1] /= n;
        phi_[0] = ad::Var::param(W);
    }

    /// (a, b) of the 1 x 2 linear map.
    std::pair<double, double> ab() const {
        if (spec_.kind != FeatureKind::linear || spec_.feature_dim != 1 || spec_.input_dim != 2)
            throw std::logic_error("model: (a, b) is defined for the 1 x 2 linear map only");
        return {phi_[0].value()[0], phi_[0].value()[1]};
    }

    std::size_t feature_dim() const { return spec_.feature_dim; }

    ad::Array zero_predictor() const {
        if (spec_.num_classes == 2) return ad::Array(ad::Shape{spec_.feature_dim}, 0.0);
        return ad::Array(ad::Shape{static_cast<std::size_t>(spec_.num_classes), spec_.feature_dim}, 0.0);
    }

private:
    ModelSpec spec_;
    std::vector<ad::Var> phi_;
};

/// Scores of predictor w on features F: n-vector (binary) or n x K.
inline ad::Var logits(const ad::Var& F, const ad::Var& w) {
    if (w.value().rank() == 1) return ad::matvec(F, w);
    return ad::matmul(F, ad::transpose(w));
}

/// Mean loss of predictor w on features F of batch b.
inline ad::Var env_risk(const ad::Var& F, const ad::Var& w, const Batch& b) {
    if (b.binary()) return ad::mean(ad::logistic_loss(ad::mul(ad::Var(b.ysign), logits(F, w))));
    return ad::softmax_cross_entropy(logits(F, w), b.labels);
}

/// |b/a| for the 2-d map; for a general 1 x d linear map over [z_c, z_e]
/// the ratio of the spurious block norm to the causal block norm. +inf
/// when the causal part is zero, NaN when undefined for the model.
inline double weight_ratio(double a, double b) {
    if (a == 0.0) return std::numeric_limits<double>::infinity();
    return std::abs(b / a);
}

inline double weight_ratio(const Model& m, std::size_t d_c) {
    const auto& s = m.spec();
    if (s.kind != FeatureKind::linear || s.feature_dim != 1) return std::numeric_limits<double>::quiet_NaN();
    const auto& W = m.phi()[0].value();
    double c = 0.0, e = 0.0;
    for (std::size_t j = 0; j < s.input_dim; ++j) (j < d_c ? c : e) += W[j] * W[j];
    if (c == 0.0) return std::numeric_limits<double>::infinity();
    return std::sqrt(e / c);
}

}  // namespace trm
