#include "spectra/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace spectra {

std::int64_t ConfusionMatrix::total() const {
    std::int64_t n = 0;
    for (std::int64_t c : counts) n += c;
    return n;
}

std::int64_t ConfusionMatrix::row_total(int truth) const {
    std::int64_t n = 0;
    for (int j = 0; j < classes; ++j) n += at(truth, j);
    return n;
}

std::int64_t ConfusionMatrix::col_total(int pred) const {
    std::int64_t n = 0;
    for (int i = 0; i < classes; ++i) n += at(i, pred);
    return n;
}

ConfusionMatrix confusion(const std::vector<int>& truth, const std::vector<int>& pred, int n) {
    if (truth.size() != pred.size()) {
        throw std::invalid_argument("confusion: label vectors differ in length");
    }
    ConfusionMatrix cm(n);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int t = truth[i];
        const int p = pred[i];
        if (t < 0 || t >= n || p < 0 || p >= n) {
            throw std::out_of_range("confusion: label outside [0," + std::to_string(n) + ")");
        }
        ++cm.at(t, p);
    }
    return cm;
}

MetricsReport metrics(const ConfusionMatrix& cm) {
    const std::int64_t total = cm.total();
    if (cm.classes < 1 || total < 1) {
        throw std::invalid_argument("metrics: empty confusion matrix");
    }
    MetricsReport r;
    std::int64_t trace = 0;
    for (int i = 0; i < cm.classes; ++i) trace += cm.at(i, i);
    r.oa = static_cast<double>(trace) / static_cast<double>(total);

    r.per_class.assign(static_cast<std::size_t>(cm.classes), -1.0);
    double recall_sum = 0.0;
    int populated = 0;
    for (int i = 0; i < cm.classes; ++i) {
        const std::int64_t row = cm.row_total(i);
        if (row > 0) {
            r.per_class[static_cast<std::size_t>(i)] =
                static_cast<double>(cm.at(i, i)) / static_cast<double>(row);
            recall_sum += r.per_class[static_cast<std::size_t>(i)];
            ++populated;
        }
    }
    r.aa = populated > 0 ? recall_sum / populated : 0.0;

    double pe = 0.0;
    for (int i = 0; i < cm.classes; ++i) {
        pe += static_cast<double>(cm.row_total(i)) * static_cast<double>(cm.col_total(i));
    }
    pe /= static_cast<double>(total) * static_cast<double>(total);
    if (pe >= 1.0) {
        r.kappa = r.oa >= 1.0 ? 1.0 : 0.0;
    } else {
        r.kappa = (r.oa - pe) / (1.0 - pe);
    }
    return r;
}

void render_map(const std::vector<std::uint16_t>& raster, int height, int width,
                const std::vector<std::array<std::uint8_t, 3>>& palette, const std::string& path) {
    if (raster.size() != static_cast<std::size_t>(height) * width) {
        throw std::invalid_argument("render_map: raster size does not match the dimensions");
    }
    for (std::uint16_t label : raster) {
        if (label > palette.size()) {
            throw std::invalid_argument("render_map: label " + std::to_string(label) +
                                        " has no palette entry");
        }
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("render_map: cannot open " + path);
    }
    out << "P6\n" << width << " " << height << "\n255\n";
    for (std::uint16_t label : raster) {
        std::array<std::uint8_t, 3> rgb{0, 0, 0};
        if (label > 0) {
            rgb = palette[static_cast<std::size_t>(label - 1)];
        }
        out.write(reinterpret_cast<const char*>(rgb.data()), 3);
    }
    if (!out) {
        throw std::runtime_error("render_map: failed writing " + path);
    }
}

namespace {

// eval-mode predictions for an explicit pixel list, batched
void predict_at(const ModelParams& params, const ModelConfig& cfg, const HsiCube& cube,
                const PixelList& pixels, int batch_size, std::vector<int>& out) {
    out.assign(pixels.size(), 0);
    const int s = cfg.patch_size;
    const std::int64_t stride = static_cast<std::int64_t>(cube.bands) * s * s;
    std::size_t done = 0;
    while (done < pixels.size()) {
        const int n = static_cast<int>(std::min<std::size_t>(
            static_cast<std::size_t>(batch_size), pixels.size() - done));
        Tensor patches({n, cube.bands, s, s});
        for (int i = 0; i < n; ++i) {
            const auto& [r, c] = pixels[done + static_cast<std::size_t>(i)];
            Tensor patch = extract_patch(cube, r, c, s);
            std::copy(patch.data().begin(), patch.data().end(),
                      patches.data().begin() + i * stride);
        }
        Tape tape(false);
        const std::vector<int> pred = predict(forward(tape, patches, params, cfg, Mode::eval));
        for (int i = 0; i < n; ++i) {
            out[done + static_cast<std::size_t>(i)] = pred[static_cast<std::size_t>(i)];
        }
        done += static_cast<std::size_t>(n);
    }
}

}  // namespace

std::vector<std::uint16_t> predict_raster(const ModelParams& params, const ModelConfig& cfg,
                                          const HsiCube& cube, const GroundTruth& gt,
                                          int batch_size) {
    if (gt.height != cube.height || gt.width != cube.width) {
        throw std::invalid_argument("predict_raster: cube and ground truth dimensions differ");
    }
    PixelList labeled;
    for (int r = 0; r < gt.height; ++r) {
        for (int c = 0; c < gt.width; ++c) {
            if (gt.at(r, c) > 0) {
                labeled.emplace_back(r, c);
            }
        }
    }
    std::vector<int> pred;
    predict_at(params, cfg, cube, labeled, batch_size, pred);
    std::vector<std::uint16_t> raster(static_cast<std::size_t>(gt.height) * gt.width, 0);
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        raster[static_cast<std::size_t>(labeled[i].first) * gt.width + labeled[i].second] =
            static_cast<std::uint16_t>(pred[i] + 1);
    }
    return raster;
}

Evaluation evaluate(const ModelParams& params, const ModelConfig& cfg, const HsiCube& cube,
                    const GroundTruth& gt, const SampleSplit& split, int batch_size) {
    Evaluation ev;
    ev.raster = predict_raster(params, cfg, cube, gt, batch_size);
    std::vector<int> truth, pred;
    for (std::size_t cls = 0; cls < split.test.size(); ++cls) {
        for (const auto& [r, c] : split.test[cls]) {
            truth.push_back(static_cast<int>(cls));
            pred.push_back(ev.raster[static_cast<std::size_t>(r) * gt.width + c] - 1);
        }
    }
    ev.report = metrics(confusion(truth, pred, cfg.classes));
    return ev;
}

std::string metrics_table(const MetricsReport& report, const std::vector<std::string>& class_names) {
    std::ostringstream os;
    os << std::fixed;
    std::size_t width = 12;
    for (const std::string& name : class_names) {
        width = std::max(width, name.size() + 2);
    }
    for (std::size_t i = 0; i < report.per_class.size(); ++i) {
        const std::string name = i < class_names.size() ? class_names[i] : "class " + std::to_string(i + 1);
        os << std::setw(3) << (i + 1) << "  " << std::left << std::setw(static_cast<int>(width))
           << name << std::right;
        if (report.per_class[i] < 0.0) {
            os << "   n/a\n";
        } else {
            os << std::setprecision(2) << std::setw(6) << 100.0 * report.per_class[i] << "\n";
        }
    }
    os << std::setw(5) << "" << std::left << std::setw(static_cast<int>(width)) << "OA(%)"
       << std::right << std::setprecision(2) << std::setw(6) << 100.0 * report.oa << "\n";
    os << std::setw(5) << "" << std::left << std::setw(static_cast<int>(width)) << "AA(%)"
       << std::right << std::setw(6) << 100.0 * report.aa << "\n";
    os << std::setw(5) << "" << std::left << std::setw(static_cast<int>(width)) << "k x 100"
       << std::right << std::setw(6) << 100.0 * report.kappa << "\n";
    return os.str();
}

void write_metrics_kv(const MetricsReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("write_metrics_kv: cannot open " + path);
    }
    char buf[64];
    auto emit = [&](const std::string& key, double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out << key << " = " << buf << "\n";
    };
    emit("oa", report.oa);
    emit("aa", report.aa);
    emit("kappa", report.kappa);
    for (std::size_t i = 0; i < report.per_class.size(); ++i) {
        emit("class_" + std::to_string(i + 1), report.per_class[i]);
    }
    if (!out) {
        throw std::runtime_error("write_metrics_kv: failed writing " + path);
    }
}

}  // namespace spectra
