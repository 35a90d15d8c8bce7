#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "spectra/data.hpp"
#include "spectra/model.hpp"

namespace spectra {

/// rows = true class (0-based), cols = predicted class
struct ConfusionMatrix {
    int classes = 0;
    std::vector<std::int64_t> counts;

    explicit ConfusionMatrix(int n = 0)
        : classes(n), counts(static_cast<std::size_t>(n) * n, 0) {}

    std::int64_t& at(int truth, int pred) {
        return counts[static_cast<std::size_t>(truth) * classes + pred];
    }
    std::int64_t at(int truth, int pred) const {
        return counts[static_cast<std::size_t>(truth) * classes + pred];
    }
    std::int64_t total() const;
    std::int64_t row_total(int truth) const;
    std::int64_t col_total(int pred) const;
};

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& pred, int n);

struct MetricsReport {
    double oa = 0.0;
    double aa = 0.0;
    double kappa = 0.0;
    /// recall per class; -1 marks classes with no true samples
    std::vector<double> per_class;
};

// oa = trace/total, aa = mean recall over non-empty rows, kappa per Cohen
// with p_e = sum(row_i * col_i) / total^2; a degenerate p_e = 1 yields
// kappa 1 when oa = 1 and 0 otherwise.
MetricsReport metrics(const ConfusionMatrix& cm);

/// Binary PPM (P6, 8-bit). Label 0 renders black; the palette must cover
/// every nonzero label.
void render_map(const std::vector<std::uint16_t>& raster, int height, int width,
                const std::vector<std::array<std::uint8_t, 3>>& palette, const std::string& path);

/// Eval-mode class predictions (label+1) at every labeled pixel, 0 elsewhere.
std::vector<std::uint16_t> predict_raster(const ModelParams& params, const ModelConfig& cfg,
                                          const HsiCube& cube, const GroundTruth& gt,
                                          int batch_size);

struct Evaluation {
    MetricsReport report;                // over the test pixels only
    std::vector<std::uint16_t> raster;   // predictions at all labeled pixels
};

Evaluation evaluate(const ModelParams& params, const ModelConfig& cfg, const HsiCube& cube,
                    const GroundTruth& gt, const SampleSplit& split, int batch_size);

/// Aligned per-class/OA/AA/kappa table in the usual report layout.
std::string metrics_table(const MetricsReport& report, const std::vector<std::string>& class_names);

void write_metrics_kv(const MetricsReport& report, const std::string& path);

}  // namespace spectra
