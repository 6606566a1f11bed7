#include "occ4d/sampler.hpp"

#include <cmath>
#include <limits>

#include "occ4d/errors.hpp"

namespace occ4d::sampler {

using nn::Tensor;

tok::TokenGrid sample_tokens(const SamplingSpec& spec, const diff::Denoiser& model,
                             const diff::DiffusionSchedule& sched, const Tensor& codebook,
                             bool snap_to_codebook, SampleStats* stats) {
    if (spec.steps_G != sched.G)
        throw ConfigError("sampling spec steps_G does not match the schedule");
    if (!(spec.denoise_ratio > 0.0) || spec.denoise_ratio > 1.0)
        throw ConfigError("denoise_ratio must be in (0, 1]");
    for (const auto& p : model.parameters())
        if (!p->value.all_finite())
            throw NumericError("denoiser parameter '" + p->name + "' is non-finite");

    const int G = sched.G;
    // epsilon guards ceil against r*G landing a hair above an exact integer
    const int n_exec = static_cast<int>(std::ceil(spec.denoise_ratio * G - 1e-9));
    if (n_exec < 1) throw ConfigError("denoise_ratio executes zero steps");

    const int c = model.config().token_channels;
    const int M = model.config().token_cells();
    const bool learned = model.config().learned_sigma;

    nn::Rng rng(spec.seed);
    Tensor x({c, M});
    rng.fill_normal(x.data(), x.v.size());

    const int g_stop = G - n_exec + 1;
    for (int g = G; g >= g_stop; --g) {
        auto pred = model.predict(x, spec.trajectory, g, &sched);
        Tensor mu = diff::posterior_mu_from_eps(x, pred.eps->value, g, sched);
        if (stats) ++stats->denoiser_evals;

        if (g == g_stop) {  // final executed step: z = 0
            x = std::move(mu);
            break;
        }
        double min_var = std::numeric_limits<double>::infinity();
        if (learned && pred.logvar) {
            const Tensor& lv = pred.logvar->value;
            for (long long i = 0; i < x.numel(); ++i) {
                const double var = std::exp(lv.v[i]);
                min_var = std::min(min_var, var);
                x.v[i] = mu.v[i] + std::sqrt(var) * rng.normal();
            }
        } else {
            const double var = sched.posterior_variance(g);
            min_var = var;
            const double sd = std::sqrt(var);
            for (long long i = 0; i < x.numel(); ++i) x.v[i] = mu.v[i] + sd * rng.normal();
        }
        if (stats) stats->injected_variances.push_back(min_var);
    }

    const auto& td = model.config().token_dims;
    tok::TokenGrid grid;
    if (snap_to_codebook) {
        grid.code_indices = nn::nearest_codes(x, codebook);
        grid.values = Tensor({c, td[0], td[1], td[2]});
        const int S = M;
        for (int s = 0; s < S; ++s) {
            const double* code = codebook.data() + (size_t)grid.code_indices[s] * c;
            for (int j = 0; j < c; ++j) grid.values.v[(size_t)j * S + s] = code[j];
        }
    } else {
        grid.values = Tensor::from({c, td[0], td[1], td[2]}, x.v);
    }
    return grid;
}

GeneratedClip generate_clip(const SamplingSpec& spec, const tok::Tokenizer& tokenizer,
                            const diff::Denoiser& denoiser, const diff::DiffusionSchedule& sched,
                            bool snap_to_codebook, SampleStats* stats) {
    if (tokenizer.config().latent_channels != denoiser.config().token_channels)
        throw ConfigError("tokenizer and denoiser disagree on token channel width");
    for (const auto& p : tokenizer.parameters())
        if (!p->value.all_finite())
            throw NumericError("tokenizer parameter '" + p->name + "' is non-finite");

    const tok::TokenGrid grid =
        sample_tokens(spec, denoiser, sched, tokenizer.codebook()->value, snap_to_codebook, stats);
    const Tensor logits = tokenizer.decode(grid);
    const auto vocab = core::ClassVocabulary::for_class_count(tokenizer.config().num_classes);
    return {tokenizer.logits_to_sequence(logits, vocab), spec.trajectory};
}

}  // namespace occ4d::sampler
