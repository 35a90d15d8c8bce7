#include "spectra/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "spectra/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "raster payloads are little-endian; big-endian hosts need byte swaps");

namespace spectra {

namespace fs = std::filesystem;

std::int64_t SampleSplit::train_total() const {
    std::int64_t n = 0;
    for (const auto& c : train) n += static_cast<std::int64_t>(c.size());
    return n;
}

std::int64_t SampleSplit::test_total() const {
    std::int64_t n = 0;
    for (const auto& c : test) n += static_cast<std::int64_t>(c.size());
    return n;
}

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(trim(item));
    }
    return out;
}

int parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("manifest: field '" + key + "' is not an integer: " + value);
    }
}

std::array<std::uint8_t, 3> parse_hex_color(const std::string& s) {
    if (s.size() != 7 || s[0] != '#') {
        throw std::runtime_error("manifest: bad palette color '" + s + "'");
    }
    auto hex = [&](int i) {
        const std::string byte = s.substr(static_cast<std::size_t>(i), 2);
        return static_cast<std::uint8_t>(std::stoi(byte, nullptr, 16));
    };
    return {hex(1), hex(3), hex(5)};
}

std::string color_hex(const std::array<std::uint8_t, 3>& c) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", c[0], c[1], c[2]);
    return buf;
}

std::vector<char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<char> bytes(static_cast<std::size_t>(size));
    in.read(bytes.data(), size);
    if (!in) {
        throw std::runtime_error("failed reading " + path.string());
    }
    return bytes;
}

std::array<std::uint8_t, 3> hsv_to_rgb(double h, double s, double v) {
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const double m = v - c;
    auto to8 = [&](double f) { return static_cast<std::uint8_t>(std::lround((f + m) * 255.0)); };
    return {to8(r), to8(g), to8(b)};
}

}  // namespace

std::pair<HsiCube, GroundTruth> load_cube(const std::string& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw std::runtime_error("load_cube: cannot open manifest " + manifest_path);
    }
    std::map<std::string, std::string> fields;
    std::string line;
    while (std::getline(in, line)) {
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("load_cube: malformed manifest line: " + stripped);
        }
        fields[trim(stripped.substr(0, eq))] = trim(stripped.substr(eq + 1));
    }
    static const char* known[] = {"version",   "height", "width",   "bands",
                                  "dtype",     "interleave", "data_file", "gt_file",
                                  "classes",   "palette", "wavelengths"};
    for (const auto& [key, value] : fields) {
        if (std::find_if(std::begin(known), std::end(known),
                         [&](const char* k) { return key == k; }) == std::end(known)) {
            throw std::runtime_error("load_cube: unknown manifest field '" + key + "'");
        }
    }
    for (const char* key : {"version", "height", "width", "bands", "dtype", "interleave",
                            "data_file", "gt_file", "classes", "palette"}) {
        if (!fields.count(key)) {
            throw std::runtime_error("load_cube: manifest is missing field '" + std::string(key) + "'");
        }
    }
    if (parse_int("version", fields["version"]) != 1) {
        throw std::runtime_error("load_cube: unsupported manifest version " + fields["version"]);
    }
    if (fields["dtype"] != "f32le") {
        throw std::runtime_error("load_cube: unsupported dtype " + fields["dtype"]);
    }
    if (fields["interleave"] != "BSQ") {
        throw std::runtime_error("load_cube: unsupported interleave " + fields["interleave"]);
    }

    HsiCube cube;
    cube.height = parse_int("height", fields["height"]);
    cube.width = parse_int("width", fields["width"]);
    cube.bands = parse_int("bands", fields["bands"]);
    if (cube.height < 1 || cube.width < 1 || cube.bands < 1) {
        throw std::runtime_error("load_cube: non-positive raster dimensions");
    }

    GroundTruth gt;
    gt.height = cube.height;
    gt.width = cube.width;
    gt.class_names = split_list(fields["classes"]);
    gt.num_classes = static_cast<int>(gt.class_names.size());
    for (const std::string& color : split_list(fields["palette"])) {
        gt.palette.push_back(parse_hex_color(color));
    }
    if (gt.palette.size() != gt.class_names.size()) {
        throw std::runtime_error("load_cube: palette size differs from the class list");
    }
    if (fields.count("wavelengths")) {
        for (const std::string& wl : split_list(fields["wavelengths"])) {
            cube.wavelengths_nm.push_back(std::stod(wl));
        }
        if (static_cast<int>(cube.wavelengths_nm.size()) != cube.bands) {
            throw std::runtime_error("load_cube: wavelength count differs from bands");
        }
    }

    const fs::path dir = fs::path(manifest_path).parent_path();
    const std::size_t pixels = static_cast<std::size_t>(cube.height) * cube.width;

    const auto data_bytes = read_file(dir / fields["data_file"]);
    const std::size_t expect_data = pixels * cube.bands * 4;
    if (data_bytes.size() != expect_data) {
        throw std::runtime_error("load_cube: data payload is " + std::to_string(data_bytes.size()) +
                                 " bytes, header implies " + std::to_string(expect_data));
    }
    cube.values.resize(pixels * cube.bands);
    for (std::size_t i = 0; i < cube.values.size(); ++i) {
        float f;
        std::memcpy(&f, data_bytes.data() + i * 4, 4);
        if (!std::isfinite(f)) {
            throw std::runtime_error("load_cube: non-finite reflectance value at index " +
                                     std::to_string(i));
        }
        cube.values[i] = static_cast<double>(f);
    }

    const auto gt_bytes = read_file(dir / fields["gt_file"]);
    const std::size_t expect_gt = pixels * 2;
    if (gt_bytes.size() != expect_gt) {
        throw std::runtime_error("load_cube: gt payload is " + std::to_string(gt_bytes.size()) +
                                 " bytes, header implies " + std::to_string(expect_gt));
    }
    gt.labels.resize(pixels);
    std::memcpy(gt.labels.data(), gt_bytes.data(), expect_gt);
    for (std::size_t i = 0; i < pixels; ++i) {
        if (gt.labels[i] > gt.num_classes) {
            throw std::runtime_error("load_cube: label " + std::to_string(gt.labels[i]) +
                                     " exceeds the declared " + std::to_string(gt.num_classes) +
                                     " classes");
        }
    }
    return {std::move(cube), std::move(gt)};
}

void write_scene(const std::string& manifest_path, const HsiCube& cube, const GroundTruth& gt,
                 const std::string& data_name, const std::string& gt_name) {
    if (gt.height != cube.height || gt.width != cube.width) {
        throw std::invalid_argument("write_scene: cube and ground truth dimensions differ");
    }
    const fs::path manifest(manifest_path);
    const fs::path dir = manifest.parent_path();
    if (!dir.empty()) {
        fs::create_directories(dir);
    }

    {
        std::ofstream out(dir / data_name, std::ios::binary);
        for (double v : cube.values) {
            const float f = static_cast<float>(v);
            out.write(reinterpret_cast<const char*>(&f), 4);
        }
        if (!out) throw std::runtime_error("write_scene: failed writing " + data_name);
    }
    {
        std::ofstream out(dir / gt_name, std::ios::binary);
        out.write(reinterpret_cast<const char*>(gt.labels.data()),
                  static_cast<std::streamsize>(gt.labels.size() * 2));
        if (!out) throw std::runtime_error("write_scene: failed writing " + gt_name);
    }

    std::ofstream out(manifest);
    out << "version = 1\n";
    out << "height = " << cube.height << "\n";
    out << "width = " << cube.width << "\n";
    out << "bands = " << cube.bands << "\n";
    out << "dtype = f32le\n";
    out << "interleave = BSQ\n";
    out << "data_file = " << data_name << "\n";
    out << "gt_file = " << gt_name << "\n";
    out << "classes = ";
    for (std::size_t i = 0; i < gt.class_names.size(); ++i) {
        out << (i ? ", " : "") << gt.class_names[i];
    }
    out << "\npalette = ";
    for (std::size_t i = 0; i < gt.palette.size(); ++i) {
        out << (i ? ", " : "") << color_hex(gt.palette[i]);
    }
    out << "\n";
    if (!cube.wavelengths_nm.empty()) {
        out << "wavelengths = ";
        for (std::size_t i = 0; i < cube.wavelengths_nm.size(); ++i) {
            out << (i ? ", " : "") << cube.wavelengths_nm[i];
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("write_scene: failed writing manifest");
}

HsiCube normalize(const HsiCube& cube) {
    HsiCube out = cube;
    const std::size_t pixels = static_cast<std::size_t>(cube.height) * cube.width;
    for (int b = 0; b < cube.bands; ++b) {
        double lo = cube.values[static_cast<std::size_t>(b) * pixels];
        double hi = lo;
        for (std::size_t i = 0; i < pixels; ++i) {
            const double v = cube.values[static_cast<std::size_t>(b) * pixels + i];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double range = hi - lo;
        for (std::size_t i = 0; i < pixels; ++i) {
            double& v = out.values[static_cast<std::size_t>(b) * pixels + i];
            v = range > 0.0 ? (v - lo) / range : 0.0;
        }
    }
    return out;
}

namespace {

// single mirror reflection about the border, clamped for tiny rasters
int reflect_index(int p, int n) {
    if (n == 1) return 0;
    if (p < 0) p = -p;
    else if (p >= n) p = 2 * (n - 1) - p;
    return std::clamp(p, 0, n - 1);
}

}  // namespace

Tensor extract_patch(const HsiCube& cube, int row, int col, int s) {
    if (row < 0 || row >= cube.height || col < 0 || col >= cube.width) {
        throw std::out_of_range("extract_patch: center (" + std::to_string(row) + "," +
                                std::to_string(col) + ") outside the cube");
    }
    if (s < 1 || s % 2 == 0) {
        throw std::invalid_argument("extract_patch: patch size must be odd and positive");
    }
    const int r = s / 2;
    Tensor patch({cube.bands, s, s});
    auto& out = patch.data();
    std::size_t idx = 0;
    for (int b = 0; b < cube.bands; ++b) {
        for (int dr = -r; dr <= r; ++dr) {
            const int rr = reflect_index(row + dr, cube.height);
            for (int dc = -r; dc <= r; ++dc) {
                const int cc = reflect_index(col + dc, cube.width);
                out[idx++] = cube.at(b, rr, cc);
            }
        }
    }
    return patch;
}

SampleSplit stratified_split(const GroundTruth& gt, double fraction, std::uint64_t seed) {
    if (gt.num_classes < 1) {
        throw std::invalid_argument("stratified_split: no classes declared");
    }
    std::vector<PixelList> by_class(static_cast<std::size_t>(gt.num_classes));
    for (int r = 0; r < gt.height; ++r) {
        for (int c = 0; c < gt.width; ++c) {
            const int label = gt.at(r, c);
            if (label > 0) {
                by_class[static_cast<std::size_t>(label - 1)].emplace_back(r, c);
            }
        }
    }
    SampleSplit split;
    split.seed = seed;
    split.train.resize(by_class.size());
    split.test.resize(by_class.size());
    Rng rng(mix_seed(seed, 0x511157u));
    for (std::size_t cls = 0; cls < by_class.size(); ++cls) {
        auto& pixels = by_class[cls];
        if (pixels.empty()) {
            throw std::runtime_error("stratified_split: class " + std::to_string(cls + 1) +
                                     " has no labeled pixels");
        }
        const auto count = static_cast<std::int64_t>(pixels.size());
        // round half away from zero, with at least one training pixel
        std::int64_t take = std::llround(fraction * static_cast<double>(count));
        take = std::clamp<std::int64_t>(std::max<std::int64_t>(1, take), 1, count);
        for (std::int64_t i = 0; i < take; ++i) {
            const std::int64_t j =
                i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(count - i)));
            std::swap(pixels[static_cast<std::size_t>(i)], pixels[static_cast<std::size_t>(j)]);
        }
        split.train[cls].assign(pixels.begin(), pixels.begin() + take);
        split.test[cls].assign(pixels.begin() + take, pixels.end());
        std::sort(split.train[cls].begin(), split.train[cls].end());
        std::sort(split.test[cls].begin(), split.test[cls].end());
    }
    return split;
}

std::pair<HsiCube, GroundTruth> synth_scene(int height, int width, int bands, int n_classes,
                                            double noise_sigma, std::uint64_t seed) {
    if (height < 1 || width < 1 || bands < 1 || n_classes < 1) {
        throw std::invalid_argument("synth_scene: dimensions must be positive");
    }
    if (static_cast<std::int64_t>(n_classes) > static_cast<std::int64_t>(height) * width) {
        throw std::invalid_argument("synth_scene: more classes than pixels");
    }
    if (noise_sigma < 0.0) {
        throw std::invalid_argument("synth_scene: negative noise");
    }
    Rng rng(mix_seed(seed, 0x5ce17eu));

    // Voronoi sites, spread by best-candidate sampling so the regions stay
    // compact instead of degenerating into slivers; each class owns at least
    // its own site pixel.
    std::vector<std::pair<int, int>> sites;
    for (int k = 0; k < n_classes; ++k) {
        std::pair<int, int> best{0, 0};
        std::int64_t best_score = -1;
        for (int candidate = 0; candidate < 10; ++candidate) {
            const auto flat = static_cast<std::int64_t>(
                rng.below(static_cast<std::uint64_t>(height) * static_cast<std::uint64_t>(width)));
            const std::pair<int, int> p{static_cast<int>(flat / width),
                                        static_cast<int>(flat % width)};
            std::int64_t nearest = INT64_MAX;
            bool taken = false;
            for (const auto& s : sites) {
                const std::int64_t dr = p.first - s.first;
                const std::int64_t dc = p.second - s.second;
                nearest = std::min(nearest, dr * dr + dc * dc);
                taken = taken || (dr == 0 && dc == 0);
            }
            if (taken) {
                continue;
            }
            const std::int64_t score = sites.empty() ? 0 : nearest;
            if (score > best_score) {
                best_score = score;
                best = p;
            }
        }
        if (best_score < 0) {
            // every candidate collided; fall back to the first free pixel
            for (std::int64_t flat = 0; flat < static_cast<std::int64_t>(height) * width; ++flat) {
                const std::pair<int, int> p{static_cast<int>(flat / width),
                                            static_cast<int>(flat % width)};
                if (std::find(sites.begin(), sites.end(), p) == sites.end()) {
                    best = p;
                    break;
                }
            }
        }
        sites.push_back(best);
    }

    // class signatures: redraw until they are mutually distinguishable
    std::vector<std::vector<double>> signatures;
    for (int attempt = 0; attempt < 100; ++attempt) {
        signatures.assign(static_cast<std::size_t>(n_classes), std::vector<double>());
        for (auto& sig : signatures) {
            sig.assign(static_cast<std::size_t>(bands), 0.0);
            const int bumps = 2 + static_cast<int>(rng.below(2));
            for (int k = 0; k < bumps; ++k) {
                const double amp = rng.uniform(0.2, 0.9);
                const double center = rng.uniform(0.0, static_cast<double>(bands - 1));
                const double sigma = rng.uniform(std::max(1.0, bands / 10.0), bands / 4.0 + 1.0);
                for (int b = 0; b < bands; ++b) {
                    const double t = (b - center) / sigma;
                    sig[static_cast<std::size_t>(b)] += amp * std::exp(-0.5 * t * t);
                }
            }
        }
        if (n_classes < 2) break;
        double mean_dist = 0.0;
        int pairs = 0;
        for (int a = 0; a < n_classes; ++a) {
            for (int b = a + 1; b < n_classes; ++b) {
                double d2 = 0.0;
                for (int i = 0; i < bands; ++i) {
                    const double d = signatures[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)] -
                                     signatures[static_cast<std::size_t>(b)][static_cast<std::size_t>(i)];
                    d2 += d * d;
                }
                mean_dist += std::sqrt(d2);
                ++pairs;
            }
        }
        mean_dist /= pairs;
        if (mean_dist > 5.0 * noise_sigma) break;
        if (attempt == 99) {
            throw std::runtime_error("synth_scene: could not draw distinguishable signatures");
        }
    }

    GroundTruth gt;
    gt.height = height;
    gt.width = width;
    gt.num_classes = n_classes;
    gt.labels.resize(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            int best = 0;
            std::int64_t best_d = -1;
            for (int k = 0; k < n_classes; ++k) {
                const std::int64_t dr = r - sites[static_cast<std::size_t>(k)].first;
                const std::int64_t dc = c - sites[static_cast<std::size_t>(k)].second;
                const std::int64_t d2 = dr * dr + dc * dc;
                if (best_d < 0 || d2 < best_d) {  // ties keep the lowest class
                    best_d = d2;
                    best = k;
                }
            }
            gt.labels[static_cast<std::size_t>(r) * width + c] = static_cast<std::uint16_t>(best + 1);
        }
    }
    for (int k = 0; k < n_classes; ++k) {
        char name[16];
        std::snprintf(name, sizeof(name), "class_%02d", k + 1);
        gt.class_names.emplace_back(name);
        gt.palette.push_back(hsv_to_rgb(static_cast<double>(k) / n_classes, 0.75, 0.95));
    }

    HsiCube cube;
    cube.height = height;
    cube.width = width;
    cube.bands = bands;
    cube.values.resize(static_cast<std::size_t>(height) * width * bands);
    const std::size_t pixels = static_cast<std::size_t>(height) * width;
    for (int b = 0; b < bands; ++b) {
        for (std::size_t p = 0; p < pixels; ++p) {
            const int cls = gt.labels[p] - 1;
            double v = signatures[static_cast<std::size_t>(cls)][static_cast<std::size_t>(b)];
            if (noise_sigma > 0.0) {
                v += rng.normal(0.0, noise_sigma);
            }
            // quantize to f32 so the in-memory scene equals its serialized form
            cube.values[static_cast<std::size_t>(b) * pixels + p] =
                static_cast<double>(static_cast<float>(v));
        }
    }
    return {std::move(cube), std::move(gt)};
}

BatchIter::BatchIter(const SampleSplit& split, const HsiCube& cube, const GroundTruth& gt,
                     int patch_size, int batch_size, std::uint64_t shuffle_seed)
    : cube_(cube), patch_size_(patch_size), batch_size_(batch_size) {
    if (batch_size < 1) {
        throw std::invalid_argument("BatchIter: batch size must be positive");
    }
    for (std::size_t cls = 0; cls < split.train.size(); ++cls) {
        for (const auto& pixel : split.train[cls]) {
            if (gt.at(pixel.first, pixel.second) != static_cast<int>(cls) + 1) {
                throw std::logic_error("BatchIter: split does not match the ground truth");
            }
            order_.emplace_back(pixel, static_cast<int>(cls));
        }
    }
    Rng rng(shuffle_seed);
    rng.shuffle(order_);
}

bool BatchIter::next(Tensor& patches, std::vector<int>& labels) {
    if (cursor_ >= order_.size()) {
        return false;
    }
    const int n = static_cast<int>(std::min<std::size_t>(
        static_cast<std::size_t>(batch_size_), order_.size() - cursor_));
    patches = Tensor({n, cube_.bands, patch_size_, patch_size_});
    labels.assign(static_cast<std::size_t>(n), 0);
    const std::int64_t stride =
        static_cast<std::int64_t>(cube_.bands) * patch_size_ * patch_size_;
    for (int i = 0; i < n; ++i) {
        const auto& [pixel, label] = order_[cursor_ + static_cast<std::size_t>(i)];
        Tensor patch = extract_patch(cube_, pixel.first, pixel.second, patch_size_);
        std::copy(patch.data().begin(), patch.data().end(),
                  patches.data().begin() + i * stride);
        labels[static_cast<std::size_t>(i)] = label;
    }
    cursor_ += static_cast<std::size_t>(n);
    return true;
}

}  // namespace spectra
