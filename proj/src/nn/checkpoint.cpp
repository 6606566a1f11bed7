#include "occ4d/nn/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "occ4d/errors.hpp"

namespace occ4d::nn {

namespace {

void put_u32(std::string& buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& buf, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(buf, bits);
}

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;

    void need(size_t k) const {
        if (pos + k > n) throw DataError("checkpoint truncated");
    }

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }

    float f32() {
        const uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }

    std::string bytes(size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }
};

}  // namespace

void round_to_f32(Tensor& t) {
    for (auto& x : t.v) x = static_cast<double>(static_cast<float>(x));
}

void write_checkpoint(const std::string& path, const char magic[4], const CheckpointData& data) {
    std::string buf;
    buf.append(magic, 4);
    put_u32(buf, 1);  // version
    put_u32(buf, static_cast<uint32_t>(data.config_json.size()));
    buf.append(data.config_json);
    put_u32(buf, static_cast<uint32_t>(data.rng_state.size()));
    buf.append(reinterpret_cast<const char*>(data.rng_state.data()), data.rng_state.size());
    put_u32(buf, static_cast<uint32_t>(data.tensors.size()));
    for (const auto& nt : data.tensors) {
        put_u32(buf, static_cast<uint32_t>(nt.name.size()));
        buf.append(nt.name);
        put_u32(buf, static_cast<uint32_t>(nt.t.shape.size()));
        for (int d : nt.t.shape) put_u32(buf, static_cast<uint32_t>(d));
        for (double x : nt.t.v) put_f32(buf, static_cast<float>(x));
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open checkpoint for writing: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("checkpoint write failed: " + path);
}

CheckpointData read_checkpoint(const std::string& path, const char expected_magic[4]) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::vector<uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r{raw.data(), raw.size()};

    const std::string magic = r.bytes(4);
    if (std::memcmp(magic.data(), expected_magic, 4) != 0)
        throw DataError("bad checkpoint magic in " + path);
    const uint32_t version = r.u32();
    if (version != 1) throw DataError("unsupported checkpoint version");

    CheckpointData data;
    data.config_json = r.bytes(r.u32());
    const std::string rng = r.bytes(r.u32());
    data.rng_state.assign(rng.begin(), rng.end());
    const uint32_t n_tensors = r.u32();
    data.tensors.reserve(n_tensors);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        NamedTensor nt;
        nt.name = r.bytes(r.u32());
        const uint32_t rank = r.u32();
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(r.u32());
        nt.t = Tensor(shape);
        for (auto& x : nt.t.v) x = static_cast<double>(r.f32());
        data.tensors.push_back(std::move(nt));
    }
    return data;
}

}  // namespace occ4d::nn
