#pragma once

#include "infoseek/core.hpp"
#include "infoseek/rng.hpp"

#include <cmath>

namespace infoseek {

struct Box {
    double x_min = -200.0, x_max = 200.0;
    double y_min = -200.0, y_max = 200.0;

    double area() const { return (x_max - x_min) * (y_max - y_min); }
};

inline ParticleSet draw_uniform_prior(std::size_t J, const Box& box, RngStream& rng) {
    if (J == 0) throw Error("prior needs at least one sample");
    if (!(box.x_max > box.x_min) || !(box.y_max > box.y_min)) throw Error("prior box has zero area");
    Eigen::MatrixXd s(2, static_cast<Eigen::Index>(J));
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        s(0, j) = rng.uniform(box.x_min, box.x_max);
        s(1, j) = rng.uniform(box.y_min, box.y_max);
    }
    return ParticleSet::uniform(std::move(s));
}

inline StateVec mmse_estimate(const ParticleSet& p) {
    if (p.empty()) throw Error("MMSE estimate of an empty particle set");
    return p.samples() * p.weights();
}

// Trace of the weighted sample covariance over the first `dims` state
// components (all components when dims == 0).
inline double cov_trace(const ParticleSet& p, std::size_t dims = 0) {
    if (p.empty()) throw Error("covariance of an empty particle set");
    const auto d = static_cast<Eigen::Index>(dims == 0 ? p.dim() : std::min(dims, p.dim()));
    // shift by the first sample so identical samples give exactly zero
    const Eigen::MatrixXd s = p.samples().topRows(d).colwise() - p.samples().topRows(d).col(0);
    const Eigen::VectorXd mu = s * p.weights();
    double t = 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) t += p.weights()(j) * (s.col(j) - mu).squaredNorm();
    return std::max(t, 0.0);
}

// Indices chosen by systematic resampling; copy count of j is floor or ceil of J w_j.
inline std::vector<std::size_t> systematic_indices(const Eigen::VectorXd& w, std::size_t count, RngStream& rng) {
    const double total = w.sum();
    if (!(total > 0.0)) throw Error("cannot resample: all weights are zero");
    std::vector<std::size_t> idx(count);
    const double step = 1.0 / static_cast<double>(count);
    double u = rng.uniform() * step;
    double cum = w(0) / total;
    std::size_t i = 0;
    const auto n = static_cast<std::size_t>(w.size());
    for (std::size_t k = 0; k < count; ++k) {
        while (u > cum && i + 1 < n) {
            ++i;
            cum += w(static_cast<Eigen::Index>(i)) / total;
        }
        idx[k] = i;
        u += step;
    }
    return idx;
}

inline Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& s, const std::vector<std::size_t>& idx) {
    Eigen::MatrixXd out(s.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = s.col(static_cast<Eigen::Index>(idx[k]));
    return out;
}

inline ParticleSet systematic_resample(const ParticleSet& p, RngStream& rng, std::size_t count = 0) {
    if (count == 0) count = p.size();
    return ParticleSet::uniform(gather_columns(p.samples(), systematic_indices(p.weights(), count, rng)));
}

struct KernelOptions {
    std::size_t jitter_dims = 0;     // leading components that receive kernel noise; 0 = all
    double bandwidth_exponent = -1.0 / 3.0;
};

// Kernel variance: J^e * T / 2 below 2 sigma0_2, sigma0_2 above.
inline double kernel_bandwidth(double T, std::size_t J, double sigma0_2, double exponent = -1.0 / 3.0) {
    if (T >= 2.0 * sigma0_2) return sigma0_2;
    return std::pow(static_cast<double>(J), exponent) * T / 2.0;
}

inline ParticleSet kernel_resample(const ParticleSet& p, double sigma0_2, RngStream& rng, KernelOptions opt = {}) {
    const std::size_t dims = opt.jitter_dims == 0 ? p.dim() : std::min(opt.jitter_dims, p.dim());
    const double T = cov_trace(p, dims);
    const double bw = kernel_bandwidth(T, p.size(), sigma0_2, opt.bandwidth_exponent);
    Eigen::MatrixXd s = gather_columns(p.samples(), systematic_indices(p.weights(), p.size(), rng));
    if (bw > 0.0) {
        const double sd = std::sqrt(bw);
        for (Eigen::Index j = 0; j < s.cols(); ++j)
            for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(dims); ++i) s(i, j) += sd * rng.normal();
    }
    return ParticleSet::uniform(std::move(s));
}

enum class ResampleKind { Systematic, Kernel };

inline std::size_t kernel_period(double T) {
    if (T < 80.0) return 40;
    if (T < 1000.0) return 20;
    return 10;
}

// n counts the agent's informative updates; n = 0 never triggers the kernel.
inline ResampleKind resample_schedule(double T, std::size_t n) {
    if (n > 0 && n % kernel_period(T) == 0) return ResampleKind::Kernel;
    return ResampleKind::Systematic;
}

}  // namespace infoseek
