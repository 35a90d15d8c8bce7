#include "spectra/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace spectra {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

int to_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' wants an integer, got '" + value + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' wants an unsigned integer, got '" + value + "'");
    }
}

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: '" + key + "' wants a number, got '" + value + "'");
    }
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    if (key == "data") data = value;
    else if (key == "out") out = value;
    else if (key == "seed") seed = to_u64(key, value);
    else if (key == "case") ablation_case = to_int(key, value);
    else if (key == "epochs") epochs = to_int(key, value);
    else if (key == "batch") batch = to_int(key, value);
    else if (key == "lr") lr = to_double(key, value);
    else if (key == "beta1") beta1 = to_double(key, value);
    else if (key == "beta2") beta2 = to_double(key, value);
    else if (key == "adam_eps") adam_eps = to_double(key, value);
    else if (key == "repeats") repeats = to_int(key, value);
    else if (key == "fraction") fraction = to_double(key, value);
    else if (key == "patch") patch = to_int(key, value);
    else if (key == "ssfe3d_filters") ssfe3d_filters = to_int(key, value);
    else if (key == "ssfe3d_kd") ssfe3d_kd = to_int(key, value);
    else if (key == "ssfe3d_kh") ssfe3d_kh = to_int(key, value);
    else if (key == "ssfe3d_kw") ssfe3d_kw = to_int(key, value);
    else if (key == "embed_dim") embed_dim = to_int(key, value);
    else if (key == "heads") heads = to_int(key, value);
    else if (key == "layers") layers = to_int(key, value);
    else if (key == "mlp_hidden") mlp_hidden = to_int(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

std::string RunConfig::dump() const {
    std::ostringstream os;
    os << "adam_eps = " << fmt_double(adam_eps) << "\n";
    os << "batch = " << batch << "\n";
    os << "beta1 = " << fmt_double(beta1) << "\n";
    os << "beta2 = " << fmt_double(beta2) << "\n";
    os << "case = " << ablation_case << "\n";
    os << "data = " << data << "\n";
    os << "embed_dim = " << embed_dim << "\n";
    os << "epochs = " << epochs << "\n";
    os << "fraction = " << fmt_double(fraction) << "\n";
    os << "heads = " << heads << "\n";
    os << "layers = " << layers << "\n";
    os << "lr = " << fmt_double(lr) << "\n";
    os << "mlp_hidden = " << mlp_hidden << "\n";
    os << "out = " << out << "\n";
    os << "patch = " << patch << "\n";
    os << "repeats = " << repeats << "\n";
    os << "seed = " << seed << "\n";
    os << "ssfe3d_filters = " << ssfe3d_filters << "\n";
    os << "ssfe3d_kd = " << ssfe3d_kd << "\n";
    os << "ssfe3d_kh = " << ssfe3d_kh << "\n";
    os << "ssfe3d_kw = " << ssfe3d_kw << "\n";
    return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: malformed line '" + stripped + "'");
        }
        cfg.set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot open " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

ModelConfig RunConfig::model_config(int bands, int classes) const {
    ModelConfig mc;
    mc.patch_size = patch;
    mc.bands = bands;
    mc.classes = classes;
    mc.ssfe_3d_filters = ssfe3d_filters;
    mc.ssfe_3d_kd = ssfe3d_kd;
    mc.ssfe_3d_kh = ssfe3d_kh;
    mc.ssfe_3d_kw = ssfe3d_kw;
    mc.embed_dim = embed_dim;
    mc.heads = heads;
    mc.encoder_layers = layers;
    mc.mlp_hidden = mlp_hidden;
    mc.ablation_case = ablation_case;
    return mc;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch;
    tc.lr = lr;
    tc.beta1 = beta1;
    tc.beta2 = beta2;
    tc.adam_eps = adam_eps;
    tc.seed = seed;
    tc.repeats = repeats;
    tc.ablation_case = ablation_case;
    return tc;
}

}  // namespace spectra
