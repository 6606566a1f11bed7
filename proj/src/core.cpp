#include "occ4d/core.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "occ4d/errors.hpp"

namespace occ4d::core {

namespace {

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(buf, bits);
}

uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}

float get_f32(const uint8_t* p) {
    const uint32_t bits = get_u32(p);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace

ClassVocabulary::ClassVocabulary(std::vector<std::string> names, std::vector<Rgb> palette)
    : names_(std::move(names)), palette_(std::move(palette)) {
    if (names_.empty()) throw ConfigError("vocabulary must not be empty");
    if (names_.size() != palette_.size())
        throw ConfigError("vocabulary palette length must equal names length");
    std::set<std::string> uniq(names_.begin(), names_.end());
    if (uniq.size() != names_.size()) throw ConfigError("vocabulary names must be unique");
}

const ClassVocabulary& ClassVocabulary::toy8() {
    static const ClassVocabulary v(
        {"empty", "road", "sidewalk", "car", "building", "vegetation", "pedestrian", "barrier"},
        {{128, 128, 128},
         {226, 59, 246},
         {65, 10, 72},
         {87, 149, 237},
         {83, 112, 152},
         {90, 172, 52},
         {222, 51, 35},
         {255, 120, 50}});
    return v;
}

const ClassVocabulary& ClassVocabulary::nuscenes() {
    static const ClassVocabulary v(
        {"empty",       "others",     "barrier",      "bicycle",    "bus",
         "car",         "const_veh",  "motorcycle",   "pedestrian", "traffic_cone",
         "trailer",     "truck",      "drive_surf",   "other_flat", "sidewalk",
         "terrain",     "man_made",   "vegetation"},
        {{128, 128, 128}, {0, 0, 0},       {255, 120, 50}, {255, 192, 203}, {252, 254, 88},
         {87, 149, 237},  {140, 251, 253}, {193, 180, 61}, {222, 51, 35},   {249, 240, 162},
         {120, 64, 21},   {145, 52, 231},  {226, 59, 246}, {138, 137, 137}, {65, 10, 72},
         {176, 237, 107}, {83, 112, 152},  {90, 172, 52}});
    return v;
}

ClassVocabulary ClassVocabulary::for_class_count(int num_classes) {
    if (num_classes == toy8().size()) return toy8();
    if (num_classes == nuscenes().size()) return nuscenes();
    if (num_classes < 1) throw DataError("class count must be >= 1");
    std::vector<std::string> names;
    std::vector<Rgb> palette;
    names.emplace_back("empty");
    palette.push_back({128, 128, 128});
    for (int i = 1; i < num_classes; ++i) {
        names.push_back("class_" + std::to_string(i));
        // deterministic but spread-out colors
        const uint32_t h = static_cast<uint32_t>(i) * 2654435761u;
        palette.push_back({static_cast<uint8_t>(64 + (h & 0x7f)),
                           static_cast<uint8_t>(64 + ((h >> 8) & 0x7f)),
                           static_cast<uint8_t>(64 + ((h >> 16) & 0x7f))});
    }
    return ClassVocabulary(std::move(names), std::move(palette));
}

int ClassVocabulary::index_of(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return static_cast<int>(i);
    return -1;
}

OccupancySequence::OccupancySequence(GridDims dims, std::vector<uint8_t> labels,
                                     ClassVocabulary vocab)
    : dims_(dims), labels_(std::move(labels)), vocab_(std::move(vocab)) {
    if (dims_.T <= 0 || dims_.H <= 0 || dims_.W <= 0 || dims_.D <= 0)
        throw DataError("occupancy dims must be positive");
    if (static_cast<long long>(labels_.size()) != dims_.voxels())
        throw DataError("label count does not match dims");
    const int nc = vocab_.size();
    for (uint8_t l : labels_)
        if (l >= nc) throw DataError("label out of range for vocabulary");
}

OccupancySequence OccupancySequence::empty(GridDims dims, ClassVocabulary vocab) {
    return OccupancySequence(dims, std::vector<uint8_t>(dims.voxels(), 0), std::move(vocab));
}

bool Trajectory::all_finite() const {
    for (const auto& p : positions)
        if (!std::isfinite(p[0]) || !std::isfinite(p[1])) return false;
    return true;
}

void write_clip(const OccupancySequence& seq, const Trajectory& traj, const std::string& path) {
    const GridDims& d = seq.dims();
    if (static_cast<int>(traj.size()) != d.T)
        throw DataError("trajectory length does not match frame count");

    std::string buf;
    buf.reserve(kOccvHeaderBytes + seq.labels().size() + 8 * traj.size());
    buf.append("OCCV", 4);
    put_u32(buf, 1);
    put_u32(buf, static_cast<uint32_t>(d.T));
    put_u32(buf, static_cast<uint32_t>(d.H));
    put_u32(buf, static_cast<uint32_t>(d.W));
    put_u32(buf, static_cast<uint32_t>(d.D));
    put_u32(buf, static_cast<uint32_t>(seq.vocab().size()));
    buf.append(reinterpret_cast<const char*>(seq.labels().data()), seq.labels().size());
    for (const auto& p : traj.positions) {
        put_f32(buf, static_cast<float>(p[0]));
        put_f32(buf, static_cast<float>(p[1]));
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open clip for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("clip write failed: " + path);
}

std::pair<OccupancySequence, Trajectory> read_clip(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open clip: " + path);
    std::vector<uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (raw.size() < kOccvHeaderBytes) throw DataError("clip truncated: " + path);
    if (std::memcmp(raw.data(), "OCCV", 4) != 0) throw DataError("bad clip magic in " + path);
    const uint32_t version = get_u32(raw.data() + 4);
    if (version != 1) throw DataError("unsupported clip version in " + path);

    GridDims d;
    d.T = static_cast<int>(get_u32(raw.data() + 8));
    d.H = static_cast<int>(get_u32(raw.data() + 12));
    d.W = static_cast<int>(get_u32(raw.data() + 16));
    d.D = static_cast<int>(get_u32(raw.data() + 20));
    const uint32_t num_classes = get_u32(raw.data() + 24);
    if (d.T <= 0 || d.H <= 0 || d.W <= 0 || d.D <= 0)
        throw DataError("invalid dims in clip " + path);

    const size_t expected = kOccvHeaderBytes + static_cast<size_t>(d.voxels()) + 8ull * d.T;
    if (raw.size() != expected)
        throw DataError("clip payload truncated or oversized: " + path);

    std::vector<uint8_t> labels(raw.begin() + kOccvHeaderBytes,
                                raw.begin() + kOccvHeaderBytes + d.voxels());
    for (uint8_t l : labels)
        if (l >= num_classes) throw DataError("label exceeds declared class count in " + path);

    Trajectory traj;
    const uint8_t* tp = raw.data() + kOccvHeaderBytes + d.voxels();
    for (int t = 0; t < d.T; ++t) {
        const double x = static_cast<double>(get_f32(tp + 8 * t));
        const double y = static_cast<double>(get_f32(tp + 8 * t + 4));
        traj.positions.push_back({x, y});
    }

    OccupancySequence seq(d, std::move(labels),
                          ClassVocabulary::for_class_count(static_cast<int>(num_classes)));
    return {std::move(seq), std::move(traj)};
}

Image render_bev(const OccupancySequence& seq, int frame) {
    const GridDims& d = seq.dims();
    if (frame < 0 || frame >= d.T) throw DataError("render frame out of range");

    Image img;
    img.height = d.H;
    img.width = d.W;
    img.pixels.assign(static_cast<size_t>(d.H) * d.W, Rgb{128, 128, 128});
    for (int h = 0; h < d.H; ++h)
        for (int w = 0; w < d.W; ++w)
            for (int depth = d.D - 1; depth >= 0; --depth) {  // top-down
                const uint8_t l = seq.at(frame, h, w, depth);
                if (l != 0) {
                    img.at(h, w) = seq.vocab().color(l);
                    break;
                }
            }
    return img;
}

void write_ppm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open image for writing: " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    for (const Rgb& px : img.pixels) {
        out.put(static_cast<char>(px.r));
        out.put(static_cast<char>(px.g));
        out.put(static_cast<char>(px.b));
    }
    if (!out) throw DataError("image write failed: " + path);
}

std::vector<std::string> render_clip_frames(const OccupancySequence& seq,
                                            const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::vector<std::string> paths;
    for (int t = 0; t < seq.dims().T; ++t) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.ppm", t);
        const std::string path = (std::filesystem::path(out_dir) / name).string();
        write_ppm(render_bev(seq, t), path);
        paths.push_back(path);
    }
    return paths;
}

}  // namespace occ4d::core
