// Occupancy data model: class vocabulary, 4D label grids, ego trajectories,
// the OCCV clip file format, and the top-down render.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace occ4d::core {

struct Rgb {
    uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

// Index 0 is always the empty/free class.
class ClassVocabulary {
public:
    ClassVocabulary(std::vector<std::string> names, std::vector<Rgb> palette);

    static const ClassVocabulary& toy8();      // 8 classes incl. empty
    static const ClassVocabulary& nuscenes();  // 17 semantic classes + empty
    // Preset by class count when known, otherwise generated class_{i} names.
    static ClassVocabulary for_class_count(int num_classes);

    int size() const { return static_cast<int>(names_.size()); }
    const std::string& name(int i) const { return names_.at(i); }
    Rgb color(int i) const { return palette_.at(i); }
    int index_of(const std::string& name) const;  // -1 when absent

private:
    std::vector<std::string> names_;
    std::vector<Rgb> palette_;
};

struct GridDims {
    int T = 0, H = 0, W = 0, D = 0;
    long long voxels() const { return (long long)T * H * W * D; }
    bool operator==(const GridDims&) const = default;
};

// Labels in (t, h, w, d) row-major order.
class OccupancySequence {
public:
    OccupancySequence(GridDims dims, std::vector<uint8_t> labels, ClassVocabulary vocab);
    static OccupancySequence empty(GridDims dims, ClassVocabulary vocab);

    const GridDims& dims() const { return dims_; }
    const std::vector<uint8_t>& labels() const { return labels_; }
    const ClassVocabulary& vocab() const { return vocab_; }

    uint8_t at(int t, int h, int w, int d) const { return labels_[offset(t, h, w, d)]; }

    size_t offset(int t, int h, int w, int d) const {
        return ((((size_t)t * dims_.H + h) * dims_.W + w) * dims_.D) + d;
    }

private:
    GridDims dims_;
    std::vector<uint8_t> labels_;
    ClassVocabulary vocab_;
};

struct Trajectory {
    // T ego positions (x, y) in meters, absolute planar frame.
    std::vector<std::array<double, 2>> positions;

    size_t size() const { return positions.size(); }
    bool all_finite() const;
};

// ---- OCCV clip format, little-endian ----
// "OCCV" | u32 version=1 | u32 T | u32 H | u32 W | u32 D | u32 num_classes |
// T*H*W*D x u8 labels | T x (f32 x, f32 y)
inline constexpr size_t kOccvHeaderBytes = 28;

void write_clip(const OccupancySequence& seq, const Trajectory& traj, const std::string& path);
std::pair<OccupancySequence, Trajectory> read_clip(const std::string& path);

struct Image {
    int height = 0, width = 0;
    std::vector<Rgb> pixels;  // row-major (h, w)

    Rgb& at(int h, int w) { return pixels[(size_t)h * width + w]; }
    Rgb at(int h, int w) const { return pixels[(size_t)h * width + w]; }
};

// Top-down view of one frame: each (h, w) pixel takes the palette color of the
// highest non-empty voxel in its depth column; fully empty columns render as
// gray (128,128,128).
Image render_bev(const OccupancySequence& seq, int frame);

void write_ppm(const Image& img, const std::string& path);
// Writes frame_{t:04}.ppm per frame into out_dir; returns the file paths.
std::vector<std::string> render_clip_frames(const OccupancySequence& seq,
                                            const std::string& out_dir);

}  // namespace occ4d::core
