// Reconstruction metrics (IoU, per-class IoU, mIoU) and a Frechet-distance
// generation-quality proxy over features from the frozen tokenizer encoder.
#pragma once

#include <map>
#include <vector>

#include "occ4d/core.hpp"
#include "occ4d/tokenizer.hpp"

namespace occ4d::metrics {

// binary occupied-vs-empty IoU; both-empty unions count as identical (1.0)
double occupancy_iou(const core::OccupancySequence& pred, const core::OccupancySequence& gt);

struct MiouResult {
    std::map<int, double> per_class;  // non-empty classes present in pred or gt
    double miou = 0.0;
};
MiouResult class_miou(const core::OccupancySequence& pred, const core::OccupancySequence& gt);

// Accumulates mean and sample covariance with a numerically stable one-pass
// update; the accumulation order is whatever order add() is called in.
class FeatureStats {
public:
    explicit FeatureStats(int dim);

    void add(const std::vector<double>& x);

    int dim() const { return k_; }
    long long count() const { return n_; }
    const std::vector<double>& mean() const { return mean_; }
    std::vector<double> covariance() const;  // (k, k) row-major; zero when count < 2

private:
    int k_;
    long long n_ = 0;
    std::vector<double> mean_, m2_;
};

// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2}), square root on the
// symmetrized product sqrt(S1) S2 sqrt(S1)
double fid_proxy(const FeatureStats& a, const FeatureStats& b);

// frozen-encoder features: continuous latent mean-pooled over (t', h', w')
std::vector<double> extract_features(const core::OccupancySequence& clip,
                                     const tok::Tokenizer& tokenizer);

// cyclic Jacobi eigendecomposition of a symmetric matrix; A is (n, n)
// row-major, eigvecs returns V with A = V diag(eigvals) V^T (column vectors)
void jacobi_eigen(std::vector<double> a, int n, std::vector<double>& eigvals,
                  std::vector<double>& eigvecs);

}  // namespace occ4d::metrics
