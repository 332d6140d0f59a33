#pragma once

// Functional gradient interface plus the central-difference oracle that
// certifies it. The oracle never touches the backward pass: it re-runs the
// forward computation at perturbed parameter values and takes difference
// quotients, so the two gradient paths share no differentiation code.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tvclip/tape.hpp"

namespace tvclip {

template <typename Real>
using ParamMap = std::map<std::string, Array<Real>>;

template <typename Real>
using VarMap = std::map<std::string, Var<Real>>;

// Builds the scalar loss on the given tape from leaves for the named
// tunable parameters. Anything else (frozen weights, data) is captured.
template <typename Real>
using LossBuilder = std::function<Var<Real>(Tape<Real>&, const VarMap<Real>&)>;

template <typename Real>
ParamMap<Real> grad(const LossBuilder<Real>& loss_fn, const ParamMap<Real>& params) {
    Tape<Real> tape;
    VarMap<Real> vars;
    for (const auto& [name, value] : params) vars[name] = tape.leaf(value, /*requires_grad=*/true, name);
    Var<Real> loss = loss_fn(tape, vars);
    if (numel(tape.shape(loss)) != 1)
        throw std::invalid_argument("grad: loss must be scalar, got shape " + shape_str(tape.shape(loss)));
    tape.backward(loss);
    ParamMap<Real> out;
    for (const auto& [name, var] : vars) out[name] = tape.grad_array(var);
    return out;
}

template <typename Real>
Real eval_loss(const LossBuilder<Real>& loss_fn, const ParamMap<Real>& params) {
    Tape<Real> tape;
    VarMap<Real> vars;
    for (const auto& [name, value] : params) vars[name] = tape.leaf(value, false, name);
    Var<Real> loss = loss_fn(tape, vars);
    if (numel(tape.shape(loss)) != 1)
        throw std::invalid_argument("loss must be scalar, got shape " + shape_str(tape.shape(loss)));
    return tape.scalar(loss);
}

// A coordinate where the one-sided difference quotients disagree; the loss
// is not differentiable there (e.g. |x| at 0) and the central estimate is
// sign-sensitive.
struct FdFlag {
    std::string param;
    int index = 0;
    double forward_est = 0.0;
    double backward_est = 0.0;
};

inline ParamMap<double> fd_oracle(const LossBuilder<double>& loss_fn, const ParamMap<double>& params, double h,
                                  std::vector<FdFlag>* flags = nullptr) {
    if (!(h >= 1e-6 && h <= 1e-3))
        throw std::invalid_argument("fd_oracle: step size " + std::to_string(h) + " outside [1e-6, 1e-3]");
    const double f0 = eval_loss(loss_fn, params);
    if (!std::isfinite(f0)) throw std::runtime_error("fd_oracle: non-finite loss at base point");
    ParamMap<double> out;
    ParamMap<double> work = params;
    for (auto& [name, value] : work) {
        Array<double> g(value.shape);
        for (size_t i = 0; i < value.data.size(); ++i) {
            const double saved = value.data[i];
            value.data[i] = saved + h;
            const double fp = eval_loss(loss_fn, work);
            value.data[i] = saved - h;
            const double fm = eval_loss(loss_fn, work);
            value.data[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("fd_oracle: non-finite perturbed loss for " + name + "[" +
                                         std::to_string(i) + "]");
            g.data[i] = (fp - fm) / (2.0 * h);
            if (flags) {
                const double fwd = (fp - f0) / h;
                const double bwd = (f0 - fm) / h;
                if (std::abs(fwd - bwd) > 0.1 * (1.0 + std::abs(g.data[i])))
                    flags->push_back({name, static_cast<int>(i), fwd, bwd});
            }
        }
        out[name] = std::move(g);
    }
    return out;
}

// max |a-b| normalized by the largest magnitude seen in either map
inline double max_rel_err(const ParamMap<double>& a, const ParamMap<double>& b) {
    double scale = 0.0, maxdiff = 0.0;
    for (const auto& [name, ga] : a) {
        const auto it = b.find(name);
        if (it == b.end()) throw std::invalid_argument("max_rel_err: missing entry " + name);
        for (size_t i = 0; i < ga.data.size(); ++i) {
            scale = std::max({scale, std::abs(ga.data[i]), std::abs(it->second.data[i])});
            maxdiff = std::max(maxdiff, std::abs(ga.data[i] - it->second.data[i]));
        }
    }
    return maxdiff / std::max(scale, 1e-8);
}

}  // namespace tvclip
