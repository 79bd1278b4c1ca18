#include "pmi/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "pmi/error.hpp"

namespace pmi {

namespace {

const std::array<uint32_t, 256>& crc_table() {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int j = 0; j < 8; ++j) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    return table;
}

struct Writer {
    std::vector<uint8_t> buf;
    void bytes(const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
    template <class T>
    void pod(T v) {
        bytes(&v, sizeof(T));
    }
    void str(const std::string& s) {
        pod<uint32_t>(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
};

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t at = 0;
    void bytes(void* dst, size_t len) {
        if (at + len > n) throw DataError("checkpoint: truncated");
        std::memcpy(dst, p + at, len);
        at += len;
    }
    template <class T>
    T pod() {
        T v;
        bytes(&v, sizeof(T));
        return v;
    }
    std::string str() {
        uint32_t len = pod<uint32_t>();
        if (at + len > n) throw DataError("checkpoint: truncated string");
        std::string s(reinterpret_cast<const char*>(p + at), len);
        at += len;
        return s;
    }
};

}  // namespace

uint32_t crc32_bytes(const uint8_t* data, size_t len, uint32_t seed) {
    uint32_t c = seed ^ 0xFFFFFFFFu;
    const auto& t = crc_table();
    for (size_t i = 0; i < len; ++i) c = t[(c ^ data[i]) & 0xFF] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void checkpoint_save(const std::string& path, const Checkpoint& ckpt) {
    Writer w;
    w.bytes("PMCK", 4);
    w.pod<uint32_t>(ckpt.version);
    w.pod<uint64_t>(ckpt.seed);
    w.pod<int64_t>(ckpt.step);
    w.pod<int64_t>(ckpt.epoch);
    w.pod<int64_t>(ckpt.opt_step);
    w.str(ckpt.config_text);
    w.pod<uint32_t>(static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        w.str(name);
        w.pod<uint8_t>(static_cast<uint8_t>(t.dtype()));
        w.pod<uint8_t>(static_cast<uint8_t>(t.rank()));
        for (int64_t d : t.shape()) w.pod<int64_t>(d);
        dispatch(t.dtype(), [&](auto tag) {
            using T = decltype(tag);
            w.bytes(t.data<T>(), sizeof(T) * static_cast<size_t>(t.numel()));
            return 0;
        });
    }
    w.pod<uint32_t>(crc32_bytes(w.buf.data(), w.buf.size()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
    if (!out) throw IoError("write failed for " + path);
}

Checkpoint checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8) throw DataError("checkpoint " + path + ": too short");
    const uint32_t stored_crc = *reinterpret_cast<const uint32_t*>(buf.data() + buf.size() - 4);
    const uint32_t actual = crc32_bytes(buf.data(), buf.size() - 4);
    if (stored_crc != actual) throw DataError("checkpoint " + path + ": CRC mismatch, file is corrupt");
    Reader r{buf.data(), buf.size() - 4};
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "PMCK", 4) != 0) throw DataError("checkpoint " + path + ": bad magic");
    Checkpoint c;
    c.version = r.pod<uint32_t>();
    if (c.version != 1) throw DataError("checkpoint " + path + ": unsupported version");
    c.seed = r.pod<uint64_t>();
    c.step = r.pod<int64_t>();
    c.epoch = r.pod<int64_t>();
    c.opt_step = r.pod<int64_t>();
    c.config_text = r.str();
    const uint32_t count = r.pod<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const auto dt = static_cast<DType>(r.pod<uint8_t>());
        const int rank = r.pod<uint8_t>();
        Shape shape(static_cast<size_t>(rank));
        for (int d = 0; d < rank; ++d) shape[static_cast<size_t>(d)] = r.pod<int64_t>();
        Tensor t(shape, dt);
        dispatch(dt, [&](auto tag) {
            using T = decltype(tag);
            r.bytes(t.data<T>(), sizeof(T) * static_cast<size_t>(t.numel()));
            return 0;
        });
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

}  // namespace pmi
