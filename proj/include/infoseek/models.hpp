#pragma once

#include "infoseek/core.hpp"
#include "infoseek/rng.hpp"

#include <cmath>
#include <numbers>
#include <variant>

namespace infoseek {

// x+ = A x + B u + W q, q ~ N(0, sigma_q2 I).
struct LinearAdditive {
    Eigen::MatrixXd A;
    Eigen::MatrixXd W;
    double sigma_q2 = 0.0;
    Eigen::MatrixXd B;  // control injection; empty means no control input

    void validate() const {
        if (A.rows() != A.cols() || A.rows() == 0) throw Error("motion matrix A must be square and nonempty");
        if (W.rows() != A.rows()) throw Error("noise matrix W must have as many rows as A");
        if (B.size() != 0 && (B.rows() != A.rows() || B.cols() != 2)) throw Error("control matrix B must be dim x 2");
        if (!(sigma_q2 >= 0.0)) throw Error("driving noise variance must be nonnegative");
    }
};

// Pose (x1, x2, heading) driven by (speed, turn).
struct Odometry {
    double sigma_q2 = 0.0;
};

// Synthetic model whose Jacobian determinant depends on the control:
// x+ = ((1 + u1) x1, x2 + u2) + q, so det = 1 + u1.
struct ScaledAxis {
    double sigma_q2 = 0.0;
};

using MotionModel = std::variant<LinearAdditive, Odometry, ScaledAxis>;

inline LinearAdditive random_walk_model(double sigma_q2) {
    LinearAdditive m;
    m.A = Eigen::Matrix2d::Identity();
    m.W = Eigen::Matrix2d::Identity();
    m.B = Eigen::Matrix2d::Identity();
    m.sigma_q2 = sigma_q2;
    return m;
}

inline LinearAdditive constant_velocity_model(double sigma_q2) {
    LinearAdditive m;
    m.A.setIdentity(4, 4);
    m.A(0, 2) = 1.0;
    m.A(1, 3) = 1.0;
    m.W.setZero(4, 2);
    m.W(0, 0) = 0.5;
    m.W(1, 1) = 0.5;
    m.W(2, 0) = 1.0;
    m.W(3, 1) = 1.0;
    m.sigma_q2 = sigma_q2;
    return m;
}

inline std::size_t state_dim(const MotionModel& model) {
    return std::visit(
        [](const auto& m) -> std::size_t {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, LinearAdditive>) return static_cast<std::size_t>(m.A.rows());
            else if constexpr (std::is_same_v<T, Odometry>) return 3;
            else return 2;
        },
        model);
}

inline std::size_t noise_dim(const MotionModel& model) {
    if (const auto* m = std::get_if<LinearAdditive>(&model)) return static_cast<std::size_t>(m->W.cols());
    return state_dim(model);
}

inline double noise_variance(const MotionModel& model) {
    return std::visit([](const auto& m) { return m.sigma_q2; }, model);
}

inline void check_dims(const MotionModel& model, const StateVec& x) {
    if (static_cast<std::size_t>(x.size()) != state_dim(model))
        throw Error("state of dimension " + std::to_string(x.size()) + " does not fit a model of dimension " +
                    std::to_string(state_dim(model)));
}

inline StateVec mean_evolve(const MotionModel& model, const StateVec& x, const ControlVec& u) {
    check_dims(model, x);
    return std::visit(
        [&](const auto& m) -> StateVec {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, LinearAdditive>) {
                StateVec out = m.A * x;
                if (m.B.size() != 0) out += m.B * u;
                else if (u.squaredNorm() != 0.0) throw Error("model has no control input but a nonzero control was given");
                return out;
            } else if constexpr (std::is_same_v<T, Odometry>) {
                const double heading = x(2) + u(1);
                StateVec out(3);
                out << x(0) + u(0) * std::cos(heading), x(1) + u(0) * std::sin(heading), heading;
                return out;
            } else {
                StateVec out(2);
                out << (1.0 + u(0)) * x(0), x(1) + u(1);
                return out;
            }
        },
        model);
}

inline StateVec evolve(const MotionModel& model, const StateVec& x, const ControlVec& u, const Eigen::VectorXd& q) {
    if (static_cast<std::size_t>(q.size()) != noise_dim(model))
        throw Error("noise draw of dimension " + std::to_string(q.size()) + " does not fit the model");
    StateVec out = mean_evolve(model, x, u);
    if (const auto* m = std::get_if<LinearAdditive>(&model)) out += m->W * q;
    else out += q;
    return out;
}

inline Eigen::VectorXd draw_process_noise(const MotionModel& model, RngStream& rng) {
    const double sd = std::sqrt(noise_variance(model));
    Eigen::VectorXd q(static_cast<Eigen::Index>(noise_dim(model)));
    for (Eigen::Index i = 0; i < q.size(); ++i) q(i) = sd * rng.normal();
    return q;
}

inline Eigen::MatrixXd mean_evolve_grad_u(const MotionModel& model, const StateVec& x, const ControlVec& u) {
    check_dims(model, x);
    return std::visit(
        [&](const auto& m) -> Eigen::MatrixXd {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, LinearAdditive>) {
                if (m.B.size() == 0) return Eigen::MatrixXd::Zero(m.A.rows(), 2);
                return m.B;
            } else if constexpr (std::is_same_v<T, Odometry>) {
                const double heading = x(2) + u(1);
                Eigen::MatrixXd g(3, 2);
                g << std::cos(heading), -u(0) * std::sin(heading),
                     std::sin(heading), u(0) * std::cos(heading),
                     0.0, 1.0;
                return g;
            } else {
                Eigen::MatrixXd g(2, 2);
                g << x(0), 0.0, 0.0, 1.0;
                return g;
            }
        },
        model);
}

inline double jacobian_det(const MotionModel& model, const StateVec& x, const ControlVec& u) {
    check_dims(model, x);
    return std::visit(
        [&](const auto& m) -> double {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, LinearAdditive>) return m.A.determinant();
            else if constexpr (std::is_same_v<T, Odometry>) return 1.0;
            else return 1.0 + u(0);
        },
        model);
}

// Gradient of the Jacobian determinant with respect to the control.
inline Eigen::Vector2d jacobian_det_grad_u(const MotionModel& model, const StateVec& x, const ControlVec&) {
    check_dims(model, x);
    if (std::holds_alternative<ScaledAxis>(model)) return {1.0, 0.0};
    return Eigen::Vector2d::Zero();
}

// Range measurement with distance-dependent noise variance
// s0 for d <= d0, s0 * (((d / d0) - 1)^kappa + 1) beyond.
struct MeasModel {
    double sigma0_2 = 50.0;
    double d0 = 50.0;
    double kappa = 2.0;

    void validate() const {
        if (!(sigma0_2 > 0.0)) throw Error("sigma0_2 must be positive");
        if (!(d0 > 0.0)) throw Error("d0 must be positive");
        if (!(kappa >= 0.0)) throw Error("kappa must be nonnegative");
    }

    double variance(double dist) const {
        if (dist < 0.0) throw Error("negative distance");
        if (dist <= d0) return sigma0_2;
        const double t = dist / d0 - 1.0;
        return sigma0_2 * ((kappa == 2.0 ? t * t : std::pow(t, kappa)) + 1.0);
    }

    double dvariance_ddist(double dist) const {
        if (dist <= d0 || kappa == 0.0) return 0.0;
        const double t = dist / d0 - 1.0;
        return sigma0_2 * kappa * (kappa == 2.0 ? t : std::pow(t, kappa - 1.0)) / d0;
    }

    double noise_stddev(double dist) const { return std::sqrt(variance(dist)); }

    double log_likelihood_at(double y, double dist) const {
        const double v = variance(dist);
        const double r = y - dist;
        return -0.5 * std::log(2.0 * std::numbers::pi * v) - 0.5 * r * r / v;
    }

    // d/d(dist) of log_likelihood_at, including the variance dependence.
    double dlog_likelihood_ddist(double y, double dist) const {
        const double v = variance(dist);
        const double dv = dvariance_ddist(dist);
        const double r = y - dist;
        return -0.5 * dv / v + r / v + 0.5 * r * r * dv / (v * v);
    }

    double measure(const StateVec& x_l, const StateVec& x_k, RngStream& rng) const {
        const double d = (position_of(x_l) - position_of(x_k)).norm();
        return d + noise_stddev(d) * rng.normal();
    }

    double log_likelihood(double y, const StateVec& x_l, const StateVec& x_k) const {
        return log_likelihood_at(y, (position_of(x_l) - position_of(x_k)).norm());
    }

    double likelihood(double y, const StateVec& x_l, const StateVec& x_k) const {
        return std::exp(log_likelihood(y, x_l, x_k));
    }

    // Gradient of log f(y | x_l, x_k) with respect to the full state x_l
    // (only the position components are nonzero).
    Eigen::VectorXd log_likelihood_grad_xl(double y, const StateVec& x_l, const StateVec& x_k) const {
        const Eigen::Vector2d diff = position_of(x_l) - position_of(x_k);
        const double d = diff.norm();
        if (d == 0.0) throw Error("likelihood gradient is singular at coincident positions");
        Eigen::VectorXd g = Eigen::VectorXd::Zero(x_l.size());
        g.head<2>() = dlog_likelihood_ddist(y, d) * diff / d;
        return g;
    }

    Eigen::VectorXd likelihood_grad_xl(double y, const StateVec& x_l, const StateVec& x_k) const {
        return likelihood(y, x_l, x_k) * log_likelihood_grad_xl(y, x_l, x_k);
    }
};

}  // namespace infoseek
