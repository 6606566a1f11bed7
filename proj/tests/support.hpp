// Shared test helpers: finite-difference gradient checking and small
// utilities. The FD oracle only re-evaluates forward passes, so it stays
// independent of the backward implementation it checks.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "occ4d/nn/autodiff.hpp"

namespace occ4d::test {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    long long checked = 0;
};

// Central finite differences over every element of every parameter.
// loss_fn must rebuild the graph from the parameters' current values.
inline GradCheckResult gradcheck(const std::function<nn::NodePtr()>& loss_fn,
                                 const std::vector<nn::NodePtr>& params, double step = 1e-5) {
    nn::zero_grads(params);
    nn::NodePtr loss = loss_fn();
    nn::backward(loss);

    std::vector<nn::Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p->grad);

    GradCheckResult res;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        nn::Tensor& value = params[pi]->value;
        for (long long i = 0; i < value.numel(); ++i) {
            const double keep = value.v[i];
            value.v[i] = keep + step;
            const double up = loss_fn()->value.v[0];
            value.v[i] = keep - step;
            const double down = loss_fn()->value.v[0];
            value.v[i] = keep;

            const double fd = (up - down) / (2.0 * step);
            const double an = analytic[pi].v[i];
            const double rel = std::abs(an - fd) / std::max(std::abs(an) + std::abs(fd), 1e-6);
            ++res.checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = params[pi]->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

inline uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : buf) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// fresh scratch directory under the build tree
inline std::string scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("occ4d_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

}  // namespace occ4d::test
