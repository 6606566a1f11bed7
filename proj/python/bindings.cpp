// Python bindings over the occ4d core: occupancy clips as numpy arrays,
// the tokenizer and diffusion trainers, sampling, and the metrics.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "occ4d/core.hpp"
#include "occ4d/diffusion.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/metrics.hpp"
#include "occ4d/sampler.hpp"
#include "occ4d/tokenizer.hpp"
#include "occ4d/toyworld.hpp"

namespace py = pybind11;
using namespace occ4d;

namespace {

core::GridDims dims_from_array(const py::array& labels) {
    if (labels.ndim() != 4) throw DataError("labels must be a (T, H, W, D) array");
    return {static_cast<int>(labels.shape(0)), static_cast<int>(labels.shape(1)),
            static_cast<int>(labels.shape(2)), static_cast<int>(labels.shape(3))};
}

core::OccupancySequence seq_from_array(const py::array_t<uint8_t>& labels, int num_classes) {
    const auto d = dims_from_array(labels);
    auto buf = labels.unchecked<4>();
    std::vector<uint8_t> flat(d.voxels());
    size_t i = 0;
    for (int t = 0; t < d.T; ++t)
        for (int h = 0; h < d.H; ++h)
            for (int w = 0; w < d.W; ++w)
                for (int dd = 0; dd < d.D; ++dd) flat[i++] = buf(t, h, w, dd);
    return core::OccupancySequence(d, std::move(flat),
                                   core::ClassVocabulary::for_class_count(num_classes));
}

py::array_t<uint8_t> seq_to_array(const core::OccupancySequence& seq) {
    const auto& d = seq.dims();
    py::array_t<uint8_t> out({d.T, d.H, d.W, d.D});
    std::copy(seq.labels().begin(), seq.labels().end(), out.mutable_data());
    return out;
}

core::Trajectory traj_from_array(const py::array_t<double>& traj) {
    if (traj.ndim() != 2 || traj.shape(1) != 2) throw DataError("trajectory must be (T, 2)");
    core::Trajectory out;
    auto buf = traj.unchecked<2>();
    for (py::ssize_t t = 0; t < traj.shape(0); ++t) out.positions.push_back({buf(t, 0), buf(t, 1)});
    return out;
}

py::array_t<double> traj_to_array(const core::Trajectory& traj) {
    py::array_t<double> out({static_cast<py::ssize_t>(traj.size()), py::ssize_t(2)});
    auto buf = out.mutable_unchecked<2>();
    for (size_t t = 0; t < traj.size(); ++t) {
        buf(t, 0) = traj.positions[t][0];
        buf(t, 1) = traj.positions[t][1];
    }
    return out;
}

py::array_t<double> tensor_to_array(const nn::Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<double> out(shape);
    std::copy(t.v.begin(), t.v.end(), out.mutable_data());
    return out;
}

nn::Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<int>(a.shape(i));
    nn::Tensor t(shape);
    std::copy(a.data(), a.data() + a.size(), t.v.begin());
    return t;
}

// Owns a TokenizerTrainer and exposes the core operations.
struct PyTokenizer {
    tok::TokenizerTrainer trainer;

    explicit PyTokenizer(tok::TokenizerTrainer t) : trainer(std::move(t)) {}

    static PyTokenizer create(int num_classes, int grid_depth, int class_embed_dim, int levels,
                              int latent_channels, int codebook_size, int attn_groups,
                              double commitment_beta, double dropout, int dead_code_steps,
                              double lr, double weight_decay, uint64_t seed) {
        tok::TokenizerConfig cfg;
        cfg.num_classes = num_classes;
        cfg.grid_depth = grid_depth;
        cfg.class_embed_dim = class_embed_dim;
        cfg.levels = levels;
        cfg.latent_channels = latent_channels;
        cfg.codebook_size = codebook_size;
        cfg.attn_groups = attn_groups;
        cfg.commitment_beta = commitment_beta;
        cfg.dropout = dropout;
        cfg.dead_code_steps = dead_code_steps;
        return PyTokenizer(
            tok::TokenizerTrainer(tok::Tokenizer::init(cfg, seed), lr, weight_decay, seed + 1));
    }

    int num_classes() const { return trainer.model().config().num_classes; }

    py::array_t<double> encode(const py::array_t<uint8_t>& labels) {
        return tensor_to_array(trainer.model().encode(seq_from_array(labels, num_classes())));
    }

    py::tuple quantize(const py::array_t<double>& latent) {
        const auto grid = trainer.model().quantize(tensor_from_array(latent));
        py::array_t<int> idx(static_cast<py::ssize_t>(grid.code_indices.size()));
        std::copy(grid.code_indices.begin(), grid.code_indices.end(), idx.mutable_data());
        return py::make_tuple(tensor_to_array(grid.values), idx);
    }

    py::array_t<double> decode(const py::array_t<double>& tokens) {
        tok::TokenGrid grid;
        grid.values = tensor_from_array(tokens);
        return tensor_to_array(trainer.model().decode(grid));
    }

    py::array_t<uint8_t> reconstruct(const py::array_t<uint8_t>& labels) {
        return seq_to_array(trainer.model().reconstruct(seq_from_array(labels, num_classes())));
    }

    py::dict loss(const py::array_t<uint8_t>& labels) {
        const auto parts = trainer.model().loss(seq_from_array(labels, num_classes()));
        py::dict out;
        out["recon"] = parts.recon;
        out["codebook"] = parts.codebook;
        out["commit"] = parts.commit;
        out["total"] = parts.total;
        return out;
    }

    py::dict train_step(const std::vector<py::array_t<uint8_t>>& batch) {
        std::vector<core::OccupancySequence> clips;
        clips.reserve(batch.size());
        for (const auto& labels : batch) clips.push_back(seq_from_array(labels, num_classes()));
        std::vector<const core::OccupancySequence*> ptrs;
        for (const auto& c : clips) ptrs.push_back(&c);
        const auto rec = trainer.step(ptrs);
        py::dict out;
        out["step"] = rec.step;
        out["recon"] = rec.recon;
        out["codebook"] = rec.codebook;
        out["commit"] = rec.commit;
        out["total"] = rec.total;
        return out;
    }

    py::array_t<double> codebook() { return tensor_to_array(trainer.model().codebook()->value); }

    void save(const std::string& path) { trainer.save_checkpoint(path); }
    static PyTokenizer load(const std::string& path) {
        return PyTokenizer(tok::TokenizerTrainer::load_checkpoint(path));
    }
};

struct PyDenoiser {
    diff::DiffusionTrainer trainer;

    explicit PyDenoiser(diff::DiffusionTrainer t) : trainer(std::move(t)) {}

    static PyDenoiser create(int token_channels, std::array<int, 3> token_dims, int traj_len,
                             int width, int blocks, int heads, int mlp_ratio, bool learned_sigma,
                             double traj_scale, int schedule_steps, double beta_start,
                             double beta_end, double lr, double weight_decay, double lambda_vlb,
                             uint64_t seed) {
        diff::DenoiserConfig cfg;
        cfg.token_channels = token_channels;
        cfg.token_dims = token_dims;
        cfg.traj_len = traj_len;
        cfg.width = width;
        cfg.blocks = blocks;
        cfg.heads = heads;
        cfg.mlp_ratio = mlp_ratio;
        cfg.learned_sigma = learned_sigma;
        cfg.traj_scale = traj_scale;
        return PyDenoiser(diff::DiffusionTrainer(
            diff::Denoiser::init(cfg, seed),
            diff::DiffusionSchedule::linear(schedule_steps, beta_start, beta_end), lr,
            weight_decay, lambda_vlb, seed + 1));
    }

    py::tuple predict(const py::array_t<double>& x, const py::array_t<double>& traj, int step) {
        const auto pred = trainer.model().predict(tensor_from_array(x), traj_from_array(traj),
                                                  step, &trainer.schedule());
        return py::make_tuple(tensor_to_array(pred.eps->value),
                              pred.logvar ? py::object(tensor_to_array(pred.logvar->value))
                                          : py::object(py::none()));
    }

    double loss_simple(const py::array_t<double>& x0, const py::array_t<double>& traj, int g,
                       const py::array_t<double>& noise) {
        return diff::loss_simple(trainer.model(), tensor_from_array(x0), traj_from_array(traj), g,
                                 tensor_from_array(noise), trainer.schedule());
    }

    py::dict train_step(const std::vector<py::array_t<double>>& tokens,
                        const std::vector<py::array_t<double>>& trajs, const std::string& stage) {
        if (tokens.size() != trajs.size()) throw DataError("tokens/trajs length mismatch");
        std::vector<diff::TokenSample> samples(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) {
            samples[i].tokens = tensor_from_array(tokens[i]);
            samples[i].traj = traj_from_array(trajs[i]);
        }
        std::vector<const diff::TokenSample*> ptrs;
        for (const auto& s : samples) ptrs.push_back(&s);
        const auto rec = trainer.step(
            ptrs, stage == "full" ? diff::TrainStage::full : diff::TrainStage::simple);
        py::dict out;
        out["step"] = rec.step;
        out["l_simple"] = rec.l_simple;
        out["l_vlb"] = rec.l_vlb;
        out["total"] = rec.total;
        return out;
    }

    void save(const std::string& path) { trainer.save_checkpoint(path); }
    static PyDenoiser load(const std::string& path) {
        return PyDenoiser(diff::DiffusionTrainer::load_checkpoint(path));
    }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "4D occupancy scene tokenizer and trajectory-conditioned diffusion";
    m.attr("__version__") = "0.1.0";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<DataError>(m, "DataError");
    py::register_exception<NumericError>(m, "NumericError");

    m.def(
        "make_trajectory",
        [](const std::string& kind, int T, double dt, double speed, double yaw_rate,
           double accel) {
            return traj_to_array(toyworld::make_trajectory(
                toyworld::TrajectoryKind::parse(kind, speed, yaw_rate, accel), T, dt));
        },
        py::arg("kind"), py::arg("T"), py::arg("dt"), py::arg("speed") = 2.0,
        py::arg("yaw_rate") = 0.4, py::arg("accel") = 1.0);

    m.def(
        "generate_scene",
        [](std::array<int, 4> dims, double cell_size, int n_static, int n_dynamic, uint64_t seed,
           const py::array_t<double>& traj) {
            toyworld::WorldConfig cfg;
            cfg.dims = {dims[0], dims[1], dims[2], dims[3]};
            cfg.cell_size = cell_size;
            cfg.n_static_obstacles = n_static;
            cfg.n_dynamic_cars = n_dynamic;
            cfg.seed = seed;
            return seq_to_array(toyworld::generate_scene(cfg, traj_from_array(traj)));
        },
        py::arg("dims"), py::arg("cell_size"), py::arg("n_static_obstacles"),
        py::arg("n_dynamic_cars"), py::arg("seed"), py::arg("trajectory"));

    m.def(
        "write_clip",
        [](const py::array_t<uint8_t>& labels, const py::array_t<double>& traj,
           const std::string& path, int num_classes) {
            core::write_clip(seq_from_array(labels, num_classes), traj_from_array(traj), path);
        },
        py::arg("labels"), py::arg("trajectory"), py::arg("path"), py::arg("num_classes") = 8);

    m.def("read_clip", [](const std::string& path) {
        const auto [seq, traj] = core::read_clip(path);
        return py::make_tuple(seq_to_array(seq), traj_to_array(traj), seq.vocab().size());
    });

    m.def(
        "render_bev",
        [](const py::array_t<uint8_t>& labels, int frame, int num_classes) {
            const auto img = core::render_bev(seq_from_array(labels, num_classes), frame);
            py::array_t<uint8_t> out({img.height, img.width, 3});
            auto buf = out.mutable_unchecked<3>();
            for (int h = 0; h < img.height; ++h)
                for (int w = 0; w < img.width; ++w) {
                    buf(h, w, 0) = img.at(h, w).r;
                    buf(h, w, 1) = img.at(h, w).g;
                    buf(h, w, 2) = img.at(h, w).b;
                }
            return out;
        },
        py::arg("labels"), py::arg("frame"), py::arg("num_classes") = 8);

    m.def("compression_ratio", [](std::array<int, 3> input_thw, std::array<int, 3> token_thw) {
        return tok::compression_ratio(input_thw, token_thw);
    });

    m.def("positional_embedding",
          [](int C, int M) { return tensor_to_array(diff::positional_embedding(C, M)); });

    py::class_<PyTokenizer>(m, "Tokenizer")
        .def(py::init(&PyTokenizer::create), py::arg("num_classes") = 8, py::arg("grid_depth") = 4,
             py::arg("class_embed_dim") = 2, py::arg("levels") = 2,
             py::arg("latent_channels") = 16, py::arg("codebook_size") = 64,
             py::arg("attn_groups") = 8, py::arg("commitment_beta") = 0.25,
             py::arg("dropout") = 0.0, py::arg("dead_code_steps") = 0, py::arg("lr") = 2e-3,
             py::arg("weight_decay") = 0.01, py::arg("seed") = 0)
        .def("encode", &PyTokenizer::encode)
        .def("quantize", &PyTokenizer::quantize)
        .def("decode", &PyTokenizer::decode)
        .def("reconstruct", &PyTokenizer::reconstruct)
        .def("loss", &PyTokenizer::loss)
        .def("train_step", &PyTokenizer::train_step)
        .def("codebook", &PyTokenizer::codebook)
        .def("save", &PyTokenizer::save)
        .def_static("load", &PyTokenizer::load);

    py::class_<PyDenoiser>(m, "Denoiser")
        .def(py::init(&PyDenoiser::create), py::arg("token_channels") = 16,
             py::arg("token_dims") = std::array<int, 3>{2, 4, 4}, py::arg("traj_len") = 8,
             py::arg("width") = 128, py::arg("blocks") = 6, py::arg("heads") = 4,
             py::arg("mlp_ratio") = 4, py::arg("learned_sigma") = true,
             py::arg("traj_scale") = 4.0, py::arg("schedule_steps") = 100,
             py::arg("beta_start") = 1e-4, py::arg("beta_end") = 2e-2, py::arg("lr") = 1e-3,
             py::arg("weight_decay") = 0.01, py::arg("lambda_vlb") = 1e-3, py::arg("seed") = 0)
        .def("predict", &PyDenoiser::predict)
        .def("loss_simple", &PyDenoiser::loss_simple)
        .def("train_step", &PyDenoiser::train_step)
        .def("save", &PyDenoiser::save)
        .def_static("load", &PyDenoiser::load);

    m.def(
        "forward_noise",
        [](const py::array_t<double>& x0, int g, const py::array_t<double>& noise, int G,
           double beta_start, double beta_end) {
            const auto sched = diff::DiffusionSchedule::linear(G, beta_start, beta_end);
            return tensor_to_array(diff::forward_noise_step(tensor_from_array(x0), g,
                                                            tensor_from_array(noise), sched));
        },
        py::arg("x0"), py::arg("g"), py::arg("noise"), py::arg("G") = 100,
        py::arg("beta_start") = 1e-4, py::arg("beta_end") = 2e-2);

    m.def(
        "sample_tokens",
        [](PyDenoiser& denoiser, const py::array_t<double>& codebook,
           const py::array_t<double>& traj, double ratio, uint64_t seed, bool snap) {
            sampler::SamplingSpec spec;
            spec.steps_G = denoiser.trainer.schedule().G;
            spec.denoise_ratio = ratio;
            spec.seed = seed;
            spec.trajectory = traj_from_array(traj);
            sampler::SampleStats stats;
            const auto grid =
                sampler::sample_tokens(spec, denoiser.trainer.model(), denoiser.trainer.schedule(),
                                       tensor_from_array(codebook), snap, &stats);
            return py::make_tuple(tensor_to_array(grid.values), stats.denoiser_evals);
        },
        py::arg("denoiser"), py::arg("codebook"), py::arg("trajectory"), py::arg("ratio") = 1.0,
        py::arg("seed") = 0, py::arg("snap_to_codebook") = true);

    m.def(
        "generate_clip",
        [](PyTokenizer& tokenizer, PyDenoiser& denoiser, const py::array_t<double>& traj,
           double ratio, uint64_t seed) {
            sampler::SamplingSpec spec;
            spec.steps_G = denoiser.trainer.schedule().G;
            spec.denoise_ratio = ratio;
            spec.seed = seed;
            spec.trajectory = traj_from_array(traj);
            const auto gen =
                sampler::generate_clip(spec, tokenizer.trainer.model(), denoiser.trainer.model(),
                                       denoiser.trainer.schedule());
            return seq_to_array(gen.seq);
        },
        py::arg("tokenizer"), py::arg("denoiser"), py::arg("trajectory"), py::arg("ratio") = 1.0,
        py::arg("seed") = 0);

    m.def(
        "occupancy_iou",
        [](const py::array_t<uint8_t>& pred, const py::array_t<uint8_t>& gt, int num_classes) {
            return metrics::occupancy_iou(seq_from_array(pred, num_classes),
                                          seq_from_array(gt, num_classes));
        },
        py::arg("pred"), py::arg("gt"), py::arg("num_classes") = 8);

    m.def(
        "class_miou",
        [](const py::array_t<uint8_t>& pred, const py::array_t<uint8_t>& gt, int num_classes) {
            const auto res = metrics::class_miou(seq_from_array(pred, num_classes),
                                                 seq_from_array(gt, num_classes));
            py::dict per_class;
            for (const auto& [k, v] : res.per_class) per_class[py::int_(k)] = v;
            return py::make_tuple(res.miou, per_class);
        },
        py::arg("pred"), py::arg("gt"), py::arg("num_classes") = 8);

    m.def(
        "fid_proxy",
        [](const py::array_t<double>& real, const py::array_t<double>& gen) {
            if (real.ndim() != 2 || gen.ndim() != 2 || real.shape(1) != gen.shape(1))
                throw DataError("fid_proxy expects (n, k) feature matrices");
            const int k = static_cast<int>(real.shape(1));
            metrics::FeatureStats a(k), b(k);
            auto ra = real.unchecked<2>();
            for (py::ssize_t i = 0; i < real.shape(0); ++i) {
                std::vector<double> x(k);
                for (int j = 0; j < k; ++j) x[j] = ra(i, j);
                a.add(x);
            }
            auto rg = gen.unchecked<2>();
            for (py::ssize_t i = 0; i < gen.shape(0); ++i) {
                std::vector<double> x(k);
                for (int j = 0; j < k; ++j) x[j] = rg(i, j);
                b.add(x);
            }
            return metrics::fid_proxy(a, b);
        },
        py::arg("real_features"), py::arg("gen_features"));

    m.def(
        "extract_features",
        [](const py::array_t<uint8_t>& labels, PyTokenizer& tokenizer) {
            const auto feat = metrics::extract_features(
                seq_from_array(labels, tokenizer.num_classes()), tokenizer.trainer.model());
            py::array_t<double> out(static_cast<py::ssize_t>(feat.size()));
            std::copy(feat.begin(), feat.end(), out.mutable_data());
            return out;
        },
        py::arg("labels"), py::arg("tokenizer"));
}
