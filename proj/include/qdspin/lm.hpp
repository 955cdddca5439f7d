/**
 * @brief Weighted Levenberg-Marquardt least squares for small dense models.
 *
 * A model type provides
 *   std::size_t n_params() const;
 *   double value(double x, std::span<const double> p) const;
 *   void jacobian(double x, std::span<const double> p, std::span<double> row) const;
 *   bool normalize(std::vector<double>& p) const;   // false: outside the domain
 */
#pragma once

#include "qdspin/core.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

namespace qdspin {

struct FitResult {
    std::vector<std::string> names;
    std::vector<double> params;
    std::vector<double> sigmas;
    Eigen::MatrixXd covariance;
    std::vector<bool> fixed;
    double residual_sse = 0.0;   ///< weighted sum of squared residuals (chi^2)
    double gradient_norm = 0.0;  ///< max cosine between residual and Jacobian columns
    std::size_t n_points = 0;
    std::size_t dof = 0;
    int n_iterations = 0;
    bool converged = false;
    bool no_oscillation = false;    ///< flat data: only the offset was fitted
    std::vector<double> sse_history;  ///< SSE after every accepted step, starting at the seed

    double param(std::string_view name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return params[i];
        throw Error("FitResult: unknown parameter " + std::string(name));
    }
    double sigma(std::string_view name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return sigmas[i];
        throw Error("FitResult: unknown parameter " + std::string(name));
    }
    double reduced_chi2() const { return dof > 0 ? residual_sse / static_cast<double>(dof) : 0.0; }
};

struct LmOptions {
    int max_iterations = 200;
    double ftol = 1e-9;   ///< relative SSE reduction that ends the iteration
    double xtol = 1e-9;   ///< relative step size that ends the iteration
    double gtol = 1e-6;   ///< orthogonality threshold for the converged flag
    double lambda0 = 1e-3;
};

template <class Model>
FitResult levenberg_marquardt(const Model& model, std::span<const double> x, std::span<const double> y,
                              std::span<const double> w, std::vector<double> p, std::vector<bool> fixed,
                              const LmOptions& opt = {}) {
    const std::size_t np = model.n_params();
    const std::size_t n = x.size();
    if (p.size() != np || fixed.size() != np) throw Error("levenberg_marquardt: parameter size mismatch");
    if (y.size() != n || w.size() != n) throw Error("levenberg_marquardt: data size mismatch");
    std::vector<std::size_t> free_idx;
    for (std::size_t j = 0; j < np; ++j)
        if (!fixed[j]) free_idx.push_back(j);
    const std::size_t nf = free_idx.size();
    if (n < nf) throw Error("levenberg_marquardt: fewer points than free parameters");
    if (!model.normalize(p)) throw Error("levenberg_marquardt: initial parameters outside the model domain");

    std::vector<double> row(np);
    auto sse_of = [&](const std::vector<double>& q) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = y[i] - model.value(x[i], q);
            s += w[i] * r * r;
        }
        return s;
    };
    // Normal equations in the free parameters: A = J^T W J, g = J^T W r.
    Eigen::MatrixXd A(nf, nf);
    Eigen::VectorXd g(nf);
    auto linearize = [&](const std::vector<double>& q) {
        A.setZero();
        g.setZero();
        for (std::size_t i = 0; i < n; ++i) {
            const double r = y[i] - model.value(x[i], q);
            model.jacobian(x[i], q, row);
            for (std::size_t a = 0; a < nf; ++a) {
                const double ja = row[free_idx[a]] * w[i];
                g(a) += ja * r;
                for (std::size_t b = 0; b <= a; ++b) A(a, b) += ja * row[free_idx[b]];
            }
        }
        for (std::size_t a = 0; a < nf; ++a)
            for (std::size_t b = 0; b < a; ++b) A(b, a) = A(a, b);
    };
    auto orthogonality = [&](double sse) {
        if (nf == 0) return 0.0;
        double worst = 0.0;
        for (std::size_t a = 0; a < nf; ++a) {
            const double d = std::sqrt(A(a, a) * sse);
            if (d > 0.0) worst = std::max(worst, std::abs(g(a)) / d);
        }
        return worst;
    };

    FitResult res;
    res.n_points = n;
    res.dof = n > nf ? n - nf : 0;
    res.fixed = fixed;
    double sse = sse_of(p);
    res.sse_history.push_back(sse);
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale += w[i] * y[i] * y[i];
    const double exact_floor = 1e-28 * std::max(scale, 1e-300);

    double lambda = opt.lambda0;
    int it = 0;
    bool stop = nf == 0;
    bool small_step = false;
    while (!stop && it < opt.max_iterations) {
        ++it;
        linearize(p);
        // Tiny steps end the iteration only once the gradient test passes too.
        const double ortho = orthogonality(sse);
        if (sse <= exact_floor || ortho <= opt.gtol * 1e-3 || (small_step && ortho <= opt.gtol)) break;
        bool accepted = false;
        while (!accepted) {
            Eigen::VectorXd d(nf);
            for (std::size_t a = 0; a < nf; ++a) d(a) = A(a, a) > 0.0 ? 1.0 / std::sqrt(A(a, a)) : 1.0;
            Eigen::MatrixXd M = d.asDiagonal() * A * d.asDiagonal();
            for (std::size_t a = 0; a < nf; ++a) M(a, a) += lambda;
            const Eigen::VectorXd delta = d.asDiagonal() * Eigen::VectorXd(M.ldlt().solve(d.asDiagonal() * g));
            std::vector<double> trial = p;
            double step_rel = 0.0;
            for (std::size_t a = 0; a < nf; ++a) {
                const std::size_t j = free_idx[a];
                trial[j] += delta(a);
                step_rel = std::max(step_rel, std::abs(delta(a)) / (std::abs(p[j]) + 1e-300));
            }
            const bool finite = delta.allFinite();
            const bool ok = finite && model.normalize(trial);
            const double s_new = ok ? sse_of(trial) : std::numeric_limits<double>::infinity();
            if (ok && s_new <= sse) {
                const double reduction = sse > 0.0 ? (sse - s_new) / sse : 0.0;
                p = std::move(trial);
                sse = s_new;
                res.sse_history.push_back(sse);
                lambda = std::max(lambda / 10.0, 1e-12);
                accepted = true;
                small_step = reduction < opt.ftol || step_rel < opt.xtol;
                if (sse <= exact_floor) stop = true;
            } else {
                lambda *= 10.0;
                if (lambda > 1e16) {
                    stop = true;
                    break;
                }
            }
        }
    }

    linearize(p);
    res.params = p;
    res.residual_sse = sse;
    res.n_iterations = it;
    const bool exact = sse <= exact_floor;
    res.gradient_norm = exact ? 0.0 : orthogonality(sse);
    // A free parameter the data no longer responds to (e.g. a decay time run
    // off to infinity) passes the gradient test trivially.
    bool identifiable = true;
    for (std::size_t a = 0; a < nf; ++a) identifiable = identifiable && A(a, a) > 0.0;
    res.converged = exact || (identifiable && res.gradient_norm <= opt.gtol);

    res.covariance = Eigen::MatrixXd::Zero(np, np);
    res.sigmas.assign(np, 0.0);
    if (nf > 0) {
        // Column scaling keeps the inversion well conditioned when parameters
        // differ by many orders of magnitude (ns against GHz).
        Eigen::VectorXd d(nf);
        for (std::size_t a = 0; a < nf; ++a) d(a) = A(a, a) > 0.0 ? 1.0 / std::sqrt(A(a, a)) : 1.0;
        const Eigen::MatrixXd As = d.asDiagonal() * A * d.asDiagonal();
        const Eigen::MatrixXd inv =
            d.asDiagonal() * As.completeOrthogonalDecomposition().pseudoInverse() * d.asDiagonal();
        const double s2 = res.dof > 0 ? sse / static_cast<double>(res.dof) : 0.0;
        for (std::size_t a = 0; a < nf; ++a)
            for (std::size_t b = 0; b < nf; ++b) res.covariance(free_idx[a], free_idx[b]) = inv(a, b) * s2;
        for (std::size_t j = 0; j < np; ++j) res.sigmas[j] = std::sqrt(std::max(0.0, res.covariance(j, j)));
    }
    return res;
}

} // namespace qdspin
