#include "spectra/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint records are little-endian; big-endian hosts need byte swaps");

namespace spectra {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'C', 'K'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kFlagTrainable = 1;

template <typename T>
void put(std::ofstream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const char* what) {
    T value;
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw std::runtime_error(std::string("load_checkpoint: truncated file reading ") + what);
    }
    return value;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("save_checkpoint: cannot open " + path);
    }
    out.write(kMagic, 4);
    put(out, kVersion);
    for (int v : {cfg.patch_size, cfg.bands, cfg.classes, cfg.ssfe_3d_filters, cfg.ssfe_3d_kd,
                  cfg.ssfe_3d_kh, cfg.ssfe_3d_kw, cfg.embed_dim, cfg.heads, cfg.encoder_layers,
                  cfg.mlp_hidden, cfg.ablation_case}) {
        put(out, static_cast<std::int32_t>(v));
    }
    put(out, static_cast<std::uint32_t>(params.named.size()));
    for (const auto& [name, tensor] : params.named) {
        put(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put(out, static_cast<std::uint8_t>(tensor.requires_grad() ? kFlagTrainable : 0));
        put(out, static_cast<std::uint8_t>(tensor.dim()));
        for (int e : tensor.shape()) {
            put(out, static_cast<std::int32_t>(e));
        }
        out.write(reinterpret_cast<const char*>(tensor.data().data()),
                  static_cast<std::streamsize>(tensor.data().size() * sizeof(double)));
    }
    if (!out) {
        throw std::runtime_error("save_checkpoint: failed writing " + path);
    }
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("load_checkpoint: cannot open " + path);
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
    }
    const auto version = get<std::uint8_t>(in, "version");
    if (version != kVersion) {
        throw std::runtime_error("load_checkpoint: unsupported format version " +
                                 std::to_string(version));
    }
    ModelConfig cfg;
    int* fields[] = {&cfg.patch_size, &cfg.bands,      &cfg.classes,        &cfg.ssfe_3d_filters,
                     &cfg.ssfe_3d_kd, &cfg.ssfe_3d_kh, &cfg.ssfe_3d_kw,     &cfg.embed_dim,
                     &cfg.heads,      &cfg.encoder_layers, &cfg.mlp_hidden, &cfg.ablation_case};
    for (int* field : fields) {
        *field = get<std::int32_t>(in, "config");
    }

    ModelParams params;
    const auto count = get<std::uint32_t>(in, "record count");
    for (std::uint32_t r = 0; r < count; ++r) {
        const auto name_len = get<std::uint16_t>(in, "name length");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) {
            throw std::runtime_error("load_checkpoint: truncated file reading a name");
        }
        const auto flags = get<std::uint8_t>(in, "flags");
        const auto ndim = get<std::uint8_t>(in, "rank");
        Shape shape;
        std::int64_t n = 1;
        for (int i = 0; i < ndim; ++i) {
            const auto e = get<std::int32_t>(in, "extent");
            if (e < 1) {
                throw std::runtime_error("load_checkpoint: non-positive extent in " + name);
            }
            shape.push_back(e);
            n *= e;
        }
        std::vector<double> values(static_cast<std::size_t>(n));
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
        if (!in) {
            throw std::runtime_error("load_checkpoint: truncated values for " + name);
        }
        params.named.emplace(name,
                             Tensor(std::move(shape), std::move(values), flags & kFlagTrainable));
    }
    if (in.peek() != std::ifstream::traits_type::eof()) {
        throw std::runtime_error("load_checkpoint: trailing bytes after the last record");
    }
    return {cfg, std::move(params)};
}

}  // namespace spectra
