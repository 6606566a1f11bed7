#include "occ4d/metrics.hpp"

#include <cmath>
#include <set>

#include "occ4d/errors.hpp"

namespace occ4d::metrics {

namespace {

void check_dims(const core::OccupancySequence& pred, const core::OccupancySequence& gt) {
    if (!(pred.dims() == gt.dims()))
        throw DataError("metric inputs have mismatched dims");
    if (pred.vocab().size() != gt.vocab().size())
        throw DataError("metric inputs have mismatched vocabularies");
}

}  // namespace

double occupancy_iou(const core::OccupancySequence& pred, const core::OccupancySequence& gt) {
    check_dims(pred, gt);
    long long inter = 0, uni = 0;
    const auto& a = pred.labels();
    const auto& b = gt.labels();
    for (size_t i = 0; i < a.size(); ++i) {
        const bool pa = a[i] != 0, pb = b[i] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    if (uni == 0) return 1.0;  // two empty scenes are identical
    return static_cast<double>(inter) / static_cast<double>(uni);
}

MiouResult class_miou(const core::OccupancySequence& pred, const core::OccupancySequence& gt) {
    check_dims(pred, gt);
    const int nc = gt.vocab().size();
    std::vector<long long> inter(nc, 0), uni(nc, 0);
    const auto& a = pred.labels();
    const auto& b = gt.labels();
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i]) {
            if (a[i] != 0) {
                ++inter[a[i]];
                ++uni[a[i]];
            }
        } else {
            if (a[i] != 0) ++uni[a[i]];
            if (b[i] != 0) ++uni[b[i]];
        }
    }

    MiouResult res;
    double sum = 0.0;
    int included = 0;
    for (int k = 1; k < nc; ++k) {
        if (uni[k] == 0) continue;  // absent from both sides: excluded
        const double iou = static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
        res.per_class[k] = iou;
        sum += iou;
        ++included;
    }
    res.miou = included > 0 ? sum / included : 1.0;
    return res;
}

FeatureStats::FeatureStats(int dim) : k_(dim) {
    if (dim < 1) throw ConfigError("FeatureStats: dim must be positive");
    mean_.assign(k_, 0.0);
    m2_.assign(static_cast<size_t>(k_) * k_, 0.0);
}

void FeatureStats::add(const std::vector<double>& x) {
    if (static_cast<int>(x.size()) != k_) throw DataError("FeatureStats: feature dim mismatch");
    ++n_;
    std::vector<double> delta(k_);
    for (int i = 0; i < k_; ++i) delta[i] = x[i] - mean_[i];
    for (int i = 0; i < k_; ++i) mean_[i] += delta[i] / static_cast<double>(n_);
    for (int i = 0; i < k_; ++i) {
        const double d2i = x[i] - mean_[i];
        for (int j = 0; j < k_; ++j) m2_[(size_t)i * k_ + j] += d2i * delta[j];
    }
}

std::vector<double> FeatureStats::covariance() const {
    std::vector<double> cov(static_cast<size_t>(k_) * k_, 0.0);
    if (n_ < 2) return cov;
    const double inv = 1.0 / static_cast<double>(n_ - 1);
    for (size_t i = 0; i < cov.size(); ++i) cov[i] = m2_[i] * inv;
    // enforce exact symmetry against one-pass roundoff
    for (int i = 0; i < k_; ++i)
        for (int j = i + 1; j < k_; ++j) {
            const double s = 0.5 * (cov[(size_t)i * k_ + j] + cov[(size_t)j * k_ + i]);
            cov[(size_t)i * k_ + j] = s;
            cov[(size_t)j * k_ + i] = s;
        }
    return cov;
}

void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs) {
    eigvecs.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) eigvecs[(size_t)i * n + i] = 1.0;

    auto at = [&a, n](int i, int j) -> double& { return a[(size_t)i * n + j]; };
    auto vt = [&eigvecs, n](int i, int j) -> double& { return eigvecs[(size_t)i * n + j]; };

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        if (off < 1e-26) break;

        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                for (int i = 0; i < n; ++i) {
                    const double aip = at(i, p), aiq = at(i, q);
                    at(i, p) = c * aip - s * aiq;
                    at(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = at(p, i), aqi = at(q, i);
                    at(p, i) = c * api - s * aqi;
                    at(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = vt(i, p), viq = vt(i, q);
                    vt(i, p) = c * vip - s * viq;
                    vt(i, q) = s * vip + c * viq;
                }
            }
    }

    eigvals.resize(n);
    for (int i = 0; i < n; ++i) eigvals[i] = a[(size_t)i * n + i];
}

namespace {

// V diag(f(lambda)) V^T
std::vector<double> eigen_rebuild(const std::vector<double>& eigvals,
                                  const std::vector<double>& eigvecs, int n,
                                  double (*f)(double)) {
    std::vector<double> out(static_cast<size_t>(n) * n, 0.0);
    for (int k = 0; k < n; ++k) {
        const double fv = f(eigvals[k]);
        if (fv == 0.0) continue;
        for (int i = 0; i < n; ++i) {
            const double vik = eigvecs[(size_t)i * n + k] * fv;
            for (int j = 0; j < n; ++j) out[(size_t)i * n + j] += vik * eigvecs[(size_t)j * n + k];
        }
    }
    return out;
}

double sqrt_clamped(double x) { return x > 0.0 ? std::sqrt(x) : 0.0; }

std::vector<double> mat_mul(const std::vector<double>& a, const std::vector<double>& b, int n) {
    std::vector<double> out(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < n; ++k) {
            const double av = a[(size_t)i * n + k];
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) out[(size_t)i * n + j] += av * b[(size_t)k * n + j];
        }
    return out;
}

}  // namespace

double fid_proxy(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim()) throw DataError("fid_proxy: feature dimension mismatch");
    const int n = a.dim();

    double mean_term = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = a.mean()[i] - b.mean()[i];
        mean_term += d * d;
    }

    const std::vector<double> s1 = a.covariance();
    const std::vector<double> s2 = b.covariance();
    double trace12 = 0.0;
    for (int i = 0; i < n; ++i) trace12 += s1[(size_t)i * n + i] + s2[(size_t)i * n + i];

    // sqrt(S1) via eigendecomposition, negatives beyond tolerance are an error
    std::vector<double> evals, evecs;
    jacobi_eigen(s1, n, evals, evecs);
    double max_eig = 0.0;
    for (double l : evals) max_eig = std::max(max_eig, std::abs(l));
    for (double l : evals)
        if (l < -1e-9 * std::max(1.0, max_eig))
            throw NumericError("fid_proxy: covariance is not positive semidefinite");
    const std::vector<double> sqrt_s1 = eigen_rebuild(evals, evecs, n, sqrt_clamped);

    // symmetrized product sqrt(S1) S2 sqrt(S1)
    std::vector<double> prod = mat_mul(mat_mul(sqrt_s1, s2, n), sqrt_s1, n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double s = 0.5 * (prod[(size_t)i * n + j] + prod[(size_t)j * n + i]);
            prod[(size_t)i * n + j] = s;
            prod[(size_t)j * n + i] = s;
        }

    std::vector<double> pvals, pvecs;
    jacobi_eigen(prod, n, pvals, pvecs);
    double pmax = 0.0;
    for (double l : pvals) pmax = std::max(pmax, std::abs(l));
    double tr_sqrt = 0.0;
    for (double l : pvals) {
        if (l < -1e-6 * std::max(1.0, pmax))
            throw NumericError("fid_proxy: matrix square root failed");
        tr_sqrt += sqrt_clamped(l);
    }

    return mean_term + trace12 - 2.0 * tr_sqrt;
}

std::vector<double> extract_features(const core::OccupancySequence& clip,
                                     const tok::Tokenizer& tokenizer) {
    const nn::Tensor latent = tokenizer.encode(clip);
    const int c = latent.shape[0];
    const long long S = latent.numel() / c;
    std::vector<double> feat(c, 0.0);
    for (int j = 0; j < c; ++j) {
        double s = 0.0;
        for (long long i = 0; i < S; ++i) s += latent.v[(size_t)j * S + i];
        feat[j] = s / static_cast<double>(S);
    }
    return feat;
}

}  // namespace occ4d::metrics
