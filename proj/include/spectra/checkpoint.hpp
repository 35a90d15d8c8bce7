#pragma once

#include <string>
#include <utility>

#include "spectra/model.hpp"

namespace spectra {

// Flat binary container: magic "SPCK", a format-version byte, the model
// configuration, then (name, flags, shape, f64 little-endian values) records
// in name order. Round trips are bit-exact.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParams& params);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::string& path);

}  // namespace spectra
