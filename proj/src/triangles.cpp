#include "pmi/triangles.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "pmi/error.hpp"

namespace pmi {

void TriangleConfig::validate() const {
    if (image_size < 8) throw ConfigError("triangles: image_size too small");
    if (points_per_cluster < 1) throw ConfigError("triangles: points_per_cluster must be >= 1");
    if (cluster_radius < 0 || margin < 0) throw ConfigError("triangles: negative radius or margin");
    if (side_min <= 0 || side_max < side_min) throw ConfigError("triangles: bad side range");
    if (neg_margin <= 0) throw ConfigError("triangles: neg_margin must be positive");
    const double lo = margin + cluster_radius;
    const double hi = static_cast<double>(image_size - 1) - margin - cluster_radius;
    const double circum = side_max / std::sqrt(3.0);
    if (hi - lo < 2.0 * circum)
        throw ConfigError("triangles: no valid placement area (side_max too large for image/margins)");
}

bool equilateral_oracle(const std::array<std::array<double, 2>, 3>& m, double rel_tol) {
    double d[3];
    for (int i = 0; i < 3; ++i) {
        const int j = (i + 1) % 3;
        const double dx = m[static_cast<size_t>(i)][0] - m[static_cast<size_t>(j)][0];
        const double dy = m[static_cast<size_t>(i)][1] - m[static_cast<size_t>(j)][1];
        d[i] = std::sqrt(dx * dx + dy * dy);
        if (d[i] == 0.0) return false;
    }
    const double mx = std::max({d[0], d[1], d[2]});
    const double mn = std::min({d[0], d[1], d[2]});
    const double mean = (d[0] + d[1] + d[2]) / 3.0;
    return (mx - mn) / mean <= rel_tol;
}

namespace {

TriangleSample render(const std::array<std::array<double, 2>, 3>& mids, const TriangleConfig& cfg,
                      RngStream& rng) {
    TriangleSample s;
    const int64_t n = cfg.image_size;
    s.image.assign(static_cast<size_t>(n * n), 0);
    for (int c = 0; c < 3; ++c) {
        s.midpoints[static_cast<size_t>(c)] = {static_cast<float>(mids[static_cast<size_t>(c)][0]),
                                               static_cast<float>(mids[static_cast<size_t>(c)][1])};
        for (int p = 0; p < cfg.points_per_cluster; ++p) {
            const double r = cfg.cluster_radius * std::sqrt(rng.uniform());
            const double phi = 2.0 * M_PI * rng.uniform();
            const double x = mids[static_cast<size_t>(c)][0] + r * std::cos(phi);
            const double y = mids[static_cast<size_t>(c)][1] + r * std::sin(phi);
            int64_t xi = std::min<int64_t>(n - 1, std::max<int64_t>(0, std::llround(x)));
            int64_t yi = std::min<int64_t>(n - 1, std::max<int64_t>(0, std::llround(y)));
            s.image[static_cast<size_t>(yi * n + xi)] = 255;
        }
    }
    s.label = equilateral_oracle(mids, 1e-6) ? 1 : 0;
    return s;
}

}  // namespace

std::vector<TriangleSample> triangle_gen(RngStream& rng, int64_t count, const TriangleConfig& cfg) {
    cfg.validate();
    const double lo = cfg.margin + cfg.cluster_radius;
    const double hi = static_cast<double>(cfg.image_size - 1) - cfg.margin - cfg.cluster_radius;

    // exact 50/50 split, order shuffled
    std::vector<uint8_t> want_pos(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) want_pos[static_cast<size_t>(i)] = i < (count + 1) / 2;
    for (int64_t i = count - 1; i > 0; --i)
        std::swap(want_pos[static_cast<size_t>(i)], want_pos[static_cast<size_t>(rng.below(static_cast<uint64_t>(i + 1)))]);

    std::vector<TriangleSample> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        std::array<std::array<double, 2>, 3> mids;
        if (want_pos[static_cast<size_t>(i)]) {
            for (;;) {
                const double side = cfg.side_min + (cfg.side_max - cfg.side_min) * rng.uniform();
                const double circum = side / std::sqrt(3.0);
                if (hi - circum < lo + circum) continue;
                const double cx = lo + circum + (hi - lo - 2 * circum) * rng.uniform();
                const double cy = lo + circum + (hi - lo - 2 * circum) * rng.uniform();
                const double theta = 2.0 * M_PI * rng.uniform();
                for (int v = 0; v < 3; ++v) {
                    const double ang = theta + 2.0 * M_PI * v / 3.0;
                    mids[static_cast<size_t>(v)] = {cx + circum * std::cos(ang), cy + circum * std::sin(ang)};
                }
                break;
            }
        } else {
            for (;;) {
                for (int v = 0; v < 3; ++v)
                    mids[static_cast<size_t>(v)] = {lo + (hi - lo) * rng.uniform(),
                                                    lo + (hi - lo) * rng.uniform()};
                double d[3];
                bool distinct = true;
                for (int v = 0; v < 3; ++v) {
                    const int w = (v + 1) % 3;
                    const double dx = mids[static_cast<size_t>(v)][0] - mids[static_cast<size_t>(w)][0];
                    const double dy = mids[static_cast<size_t>(v)][1] - mids[static_cast<size_t>(w)][1];
                    d[v] = std::sqrt(dx * dx + dy * dy);
                    if (d[v] == 0.0) distinct = false;
                }
                if (!distinct) continue;
                const double mx = std::max({d[0], d[1], d[2]});
                const double mn = std::min({d[0], d[1], d[2]});
                const double mean = (d[0] + d[1] + d[2]) / 3.0;
                if ((mx - mn) / mean > cfg.neg_margin) break;
            }
        }
        out.push_back(render(mids, cfg, rng));
    }
    return out;
}

void triangles_write(const std::string& path, const std::vector<TriangleSample>& samples, int64_t image_size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write("PMI1", 4);
    const uint64_t count = samples.size();
    const uint32_t h = static_cast<uint32_t>(image_size), w = static_cast<uint32_t>(image_size);
    out.write(reinterpret_cast<const char*>(&count), 8);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    for (const TriangleSample& s : samples) {
        if (static_cast<int64_t>(s.image.size()) != image_size * image_size)
            throw IoError("triangle sample image size mismatch");
        out.write(reinterpret_cast<const char*>(s.image.data()), static_cast<std::streamsize>(s.image.size()));
        out.write(reinterpret_cast<const char*>(&s.label), 1);
        for (const auto& m : s.midpoints) out.write(reinterpret_cast<const char*>(m.data()), 8);
    }
    if (!out) throw IoError("write failed for " + path);
}

std::vector<TriangleSample> triangles_read(const std::string& path, int64_t* image_size_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open triangle dataset " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "PMI1", 4) != 0) throw DataError(path + ": bad magic, not a PMI1 container");
    uint64_t count = 0;
    uint32_t h = 0, w = 0;
    in.read(reinterpret_cast<char*>(&count), 8);
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    if (!in || h != w || h == 0) throw DataError(path + ": bad header");
    std::vector<TriangleSample> out;
    out.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        TriangleSample s;
        s.image.resize(static_cast<size_t>(h) * w);
        in.read(reinterpret_cast<char*>(s.image.data()), static_cast<std::streamsize>(s.image.size()));
        in.read(reinterpret_cast<char*>(&s.label), 1);
        for (auto& m : s.midpoints) in.read(reinterpret_cast<char*>(m.data()), 8);
        if (!in) throw DataError(path + ": truncated at record " + std::to_string(i));
        out.push_back(std::move(s));
    }
    if (image_size_out) *image_size_out = h;
    return out;
}

TaskBatch triangles_batch(const std::vector<const TriangleSample*>& samples, int64_t image_size) {
    const int64_t B = static_cast<int64_t>(samples.size());
    TaskBatch batch;
    batch.is_text = false;
    batch.images = Tensor::zeros({B, image_size, image_size}, DType::F32);
    float* px = batch.images.data<float>();
    for (int64_t b = 0; b < B; ++b) {
        const TriangleSample& s = *samples[static_cast<size_t>(b)];
        for (int64_t i = 0; i < image_size * image_size; ++i)
            px[b * image_size * image_size + i] = static_cast<float>(s.image[static_cast<size_t>(i)]) / 255.0f;
        batch.labels.push_back(s.label);
        batch.task_ids.push_back(0);
        batch.story_ids.push_back(b);
    }
    // mask left undefined: image sequences have no padding
    return batch;
}

}  // namespace pmi
