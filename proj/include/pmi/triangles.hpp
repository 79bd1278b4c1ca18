#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pmi/model.hpp"
#include "pmi/rng.hpp"

namespace pmi {

struct TriangleConfig {
    int64_t image_size = 64;
    int points_per_cluster = 8;
    double cluster_radius = 2.5;
    double side_min = 12.0;
    double side_max = 40.0;
    double margin = 4.0;
    double neg_margin = 0.15;  // minimum relative distance spread of negatives

    void validate() const;
};

struct TriangleSample {
    std::vector<uint8_t> image;  // image_size^2 bytes, intensity 0 or 255
    uint8_t label = 0;           // 1 = equilateral
    std::array<std::array<float, 2>, 3> midpoints;
};

// true iff (max pairwise distance - min) / mean <= rel_tol; coincident
// points are never equilateral.
bool equilateral_oracle(const std::array<std::array<double, 2>, 3>& midpoints, double rel_tol);

// Exactly half the samples are constructed equilateral triangles (rotated
// ideal triangle, random center/side), half rejection-sampled negatives with
// relative spread > neg_margin; order shuffled from the stream. Labels are
// recomputed from the stored midpoints, never sampled.
std::vector<TriangleSample> triangle_gen(RngStream& rng, int64_t count, const TriangleConfig& cfg);

// Container: magic "PMI1", u64 record count, u32 height, u32 width, then per
// record: height*width raw bytes, 1 label byte, 3 midpoint pairs as f32 LE.
void triangles_write(const std::string& path, const std::vector<TriangleSample>& samples, int64_t image_size);
std::vector<TriangleSample> triangles_read(const std::string& path, int64_t* image_size_out = nullptr);

TaskBatch triangles_batch(const std::vector<const TriangleSample*>& samples, int64_t image_size);

}  // namespace pmi
