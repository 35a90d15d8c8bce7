#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spectra/tensor.hpp"

namespace spectra {

/// Reflectance raster, band-sequential (all of band 0, then band 1, ...),
/// row-major within each band.
struct HsiCube {
    int height = 0;
    int width = 0;
    int bands = 0;
    std::vector<double> values;
    std::vector<double> wavelengths_nm;  // optional, may be empty

    double at(int band, int row, int col) const {
        return values[(static_cast<std::size_t>(band) * height + row) * width + col];
    }
};

/// Per-pixel labels, 0 = unlabeled, 1..n = classes.
struct GroundTruth {
    int height = 0;
    int width = 0;
    int num_classes = 0;
    std::vector<std::uint16_t> labels;  // row-major
    std::vector<std::string> class_names;
    std::vector<std::array<std::uint8_t, 3>> palette;

    std::uint16_t at(int row, int col) const {
        return labels[static_cast<std::size_t>(row) * width + col];
    }
};

using PixelList = std::vector<std::pair<int, int>>;  // (row, col)

struct SampleSplit {
    std::vector<PixelList> train;  // index 0 holds class 1
    std::vector<PixelList> test;
    std::uint64_t seed = 0;

    std::int64_t train_total() const;
    std::int64_t test_total() const;
};

// manifest + raw payload files; paths in the manifest are relative to it
std::pair<HsiCube, GroundTruth> load_cube(const std::string& manifest_path);
void write_scene(const std::string& manifest_path, const HsiCube& cube, const GroundTruth& gt,
                 const std::string& data_name = "data.f32", const std::string& gt_name = "gt.u16");

/// Per-band min-max to [0,1]; constant bands map to 0.
HsiCube normalize(const HsiCube& cube);

// s x s window centered at (row, col), out-of-bounds mirrored about the
// border (edge pixel not duplicated); cubes smaller than the reflection
// reach clamp instead. Returns [d, s, s].
Tensor extract_patch(const HsiCube& cube, int row, int col, int s);

/// Draws max(1, round(fraction * class size)) train pixels per class,
/// uniformly without replacement; the rest become test pixels.
SampleSplit stratified_split(const GroundTruth& gt, double fraction, std::uint64_t seed);

// Synthetic scene: seeded Voronoi regions, one smooth spectral signature per
// class (2-3 Gaussian bumps over the band index), additive Gaussian noise.
// Signatures are redrawn until their mean pairwise distance clears
// 5 * noise_sigma. Values are quantized to f32 so files round-trip exactly.
std::pair<HsiCube, GroundTruth> synth_scene(int height, int width, int bands, int n_classes,
                                            double noise_sigma, std::uint64_t seed);

// One epoch over the training pixels in seeded shuffle order; emits the
// final partial batch. Patches are extracted lazily per batch.
class BatchIter {
public:
    BatchIter(const SampleSplit& split, const HsiCube& cube, const GroundTruth& gt, int patch_size,
              int batch_size, std::uint64_t shuffle_seed);

    /// Fills a [b, d, s, s] batch and 0-based labels; false when exhausted.
    bool next(Tensor& patches, std::vector<int>& labels);

    std::int64_t total() const { return static_cast<std::int64_t>(order_.size()); }

private:
    const HsiCube& cube_;
    int patch_size_;
    int batch_size_;
    std::vector<std::pair<std::pair<int, int>, int>> order_;  // ((row,col), 0-based label)
    std::size_t cursor_ = 0;
};

}  // namespace spectra
