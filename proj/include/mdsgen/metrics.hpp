#pragma once

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>
#include <vector>

#include "mdsgen/diffusion.hpp"
#include "mdsgen/model.hpp"

namespace mds {

namespace metric_detail {

// cyclic Jacobi eigendecomposition of a symmetric matrix (float64)
inline void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& evals,
                         std::vector<double>& evecs) {
    evecs.assign((size_t)n * n, 0.0);
    for (int i = 0; i < n; ++i) evecs[(size_t)i * n + i] = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += a[(size_t)i * n + j] * a[(size_t)i * n + j];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = a[(size_t)p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                double app = a[(size_t)p * n + p], aqq = a[(size_t)q * n + q];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = a[(size_t)k * n + p], akq = a[(size_t)k * n + q];
                    a[(size_t)k * n + p] = c * akp - s * akq;
                    a[(size_t)k * n + q] = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a[(size_t)p * n + k], aqk = a[(size_t)q * n + k];
                    a[(size_t)p * n + k] = c * apk - s * aqk;
                    a[(size_t)q * n + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = evecs[(size_t)k * n + p], vkq = evecs[(size_t)k * n + q];
                    evecs[(size_t)k * n + p] = c * vkp - s * vkq;
                    evecs[(size_t)k * n + q] = s * vkp + c * vkq;
                }
            }
    }
    evals.resize(n);
    for (int i = 0; i < n; ++i) evals[i] = a[(size_t)i * n + i];
}

// symmetric PSD matrix square root with eigenvalue floor
inline std::vector<double> sqrtm_psd(const std::vector<double>& m, int n,
                                     double floor = 1e-10) {
    // symmetrize defensively
    std::vector<double> s((size_t)n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            s[(size_t)i * n + j] = 0.5 * (m[(size_t)i * n + j] + m[(size_t)j * n + i]);
    std::vector<double> evals, v;
    jacobi_eigen(s, n, evals, v);
    std::vector<double> out((size_t)n * n, 0.0);
    for (int k = 0; k < n; ++k) {
        double r = std::sqrt(std::max(evals[k], floor));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                out[(size_t)i * n + j] += r * v[(size_t)i * n + k] * v[(size_t)j * n + k];
    }
    return out;
}

inline std::vector<double> matmul_d(const std::vector<double>& a, const std::vector<double>& b,
                                    int n) {
    std::vector<double> c((size_t)n * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            double av = a[(size_t)i * n + k];
            for (int j = 0; j < n; ++j) c[(size_t)i * n + j] += av * b[(size_t)k * n + j];
        }
    return c;
}

}  // namespace metric_detail

// ||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}); the cross term is evaluated
// through the symmetric form sqrt(sqrt(S1) S2 sqrt(S1))
inline double frechet_distance(const std::vector<double>& mu1, const std::vector<double>& s1,
                               const std::vector<double>& mu2, const std::vector<double>& s2) {
    int n = (int)mu1.size();
    if ((int)mu2.size() != n || (int)s1.size() != (size_t)n * n ||
        (int)s2.size() != (size_t)n * n)
        throw ShapeError("frechet_distance: dimension mismatch");
    for (double v : mu1) if (!std::isfinite(v)) throw ValueError("frechet: non-finite input");
    for (double v : mu2) if (!std::isfinite(v)) throw ValueError("frechet: non-finite input");
    for (double v : s1) if (!std::isfinite(v)) throw ValueError("frechet: non-finite input");
    for (double v : s2) if (!std::isfinite(v)) throw ValueError("frechet: non-finite input");
    double d2 = 0.0;
    for (int i = 0; i < n; ++i) d2 += (mu1[i] - mu2[i]) * (mu1[i] - mu2[i]);
    auto r1 = metric_detail::sqrtm_psd(s1, n);
    auto inner = metric_detail::matmul_d(metric_detail::matmul_d(r1, s2, n), r1, n);
    auto cross = metric_detail::sqrtm_psd(inner, n);
    double tr = 0.0;
    for (int i = 0; i < n; ++i)
        tr += s1[(size_t)i * n + i] + s2[(size_t)i * n + i] - 2.0 * cross[(size_t)i * n + i];
    return std::max(d2 + tr, 0.0);
}

// sample mean + covariance of n x d feature rows (float64)
inline void gaussian_moments(const std::vector<std::vector<double>>& rows,
                             std::vector<double>& mu, std::vector<double>& cov) {
    size_t n = rows.size();
    if (n < 2) throw ValueError("gaussian_moments: need at least 2 rows");
    size_t d = rows[0].size();
    mu.assign(d, 0.0);
    for (auto& r : rows)
        for (size_t j = 0; j < d; ++j) mu[j] += r[j];
    for (auto& v : mu) v /= (double)n;
    cov.assign(d * d, 0.0);
    for (auto& r : rows)
        for (size_t i = 0; i < d; ++i)
            for (size_t j = 0; j < d; ++j) cov[i * d + j] += (r[i] - mu[i]) * (r[j] - mu[j]);
    for (auto& v : cov) v /= (double)(n - 1);
}

namespace metric_detail {

inline void check_rows(const std::vector<std::vector<double>>& p) {
    if (p.empty()) throw ValueError("metric: empty probability rows");
    for (auto& r : p) {
        double s = 0.0;
        for (double v : r) {
            if (v < 0.0) throw ValueError("metric: negative probability");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) throw ValueError("metric: probability row does not sum to 1");
    }
}

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) acc += p[i] * std::log(p[i] / std::max(q[i], 1e-300));
    return acc;
}

}  // namespace metric_detail

// IS = exp(mean_i KL(p(y|x_i) || mean_i p(y|x_i)))
inline double inception_score(const std::vector<std::vector<double>>& probs) {
    metric_detail::check_rows(probs);
    size_t k = probs[0].size();
    std::vector<double> marginal(k, 0.0);
    for (auto& r : probs)
        for (size_t j = 0; j < k; ++j) marginal[j] += r[j];
    for (auto& v : marginal) v /= (double)probs.size();
    double acc = 0.0;
    for (auto& r : probs) acc += metric_detail::kl(r, marginal);
    return std::exp(acc / (double)probs.size());
}

inline double mean_kl(const std::vector<std::vector<double>>& p,
                      const std::vector<std::vector<double>>& q) {
    metric_detail::check_rows(p);
    metric_detail::check_rows(q);
    if (p.size() != q.size()) throw ShapeError("mean_kl: row count mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) acc += metric_detail::kl(p[i], q[i]);
    return acc / (double)p.size();
}

struct MetricReport {
    double frechet = 0.0;
    double inception = 1.0;
    double mean_kl = 0.0;
    double alignment_acc = 0.0;
};

// ------------------------------------------------------------------ bench

inline long long peak_resident_bytes() {
    std::ifstream f("/proc/self/status");
    std::string line;
    while (std::getline(f, line))
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream ss(line.substr(6));
            long long kb = 0;
            ss >> kb;
            return kb * 1024;
        }
    return 0;
}

struct BenchResult {
    long long param_count = 0;
    long long peak_resident = 0;
    double per_sample_seconds = 0.0;  // median single forward pass
};

inline BenchResult bench(const ModelConfig& cfg, int repetitions, Rng& rng) {
    if (repetitions < 1) throw ConfigError("bench: repetitions must be >= 1");
    BenchResult r;
    r.param_count = count_params(cfg);
    auto params = ModelParams::init(cfg, rng);
    auto cond = Tensor::randn({1, cfg.hidden}, rng);
    auto x = Tensor::randn({cfg.latent_channels, cfg.grid_rows * cfg.patch,
                            cfg.grid_cols * cfg.patch},
                           rng);
    NoGradGuard ng;
    std::vector<double> times;
    for (int i = 0; i < repetitions; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        auto out = forward_full(x, cond, 500, params);
        auto t1 = std::chrono::steady_clock::now();
        (void)out;
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    r.per_sample_seconds = times[times.size() / 2];
    r.peak_resident = peak_resident_bytes();
    return r;
}

}  // namespace mds
