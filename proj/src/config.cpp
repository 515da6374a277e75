#include "fine/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "fine/serialize.hpp"

namespace fine {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ',')) out.push_back(trim(cur));
    return out;
}

long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

Dims3 parse_dims(const std::string& key, const std::string& v) {
    const std::vector<std::string> parts = split_commas(v);
    if (parts.size() != 3)
        throw ConfigError("config key '" + key + "': expected x,y,z, got '" + v + "'");
    return Dims3{static_cast<int>(parse_int(key, parts[0])),
                 static_cast<int>(parse_int(key, parts[1])),
                 static_cast<int>(parse_int(key, parts[2]))};
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    if (trim(v).empty()) return out;
    for (const std::string& p : split_commas(v)) out.push_back(static_cast<int>(parse_int(key, p)));
    return out;
}

std::pair<int, int> parse_range(const std::string& key, const std::string& v) {
    const std::vector<std::string> parts = split_commas(v);
    if (parts.size() != 2)
        throw ConfigError("config key '" + key + "': expected min,max, got '" + v + "'");
    return {static_cast<int>(parse_int(key, parts[0])), static_cast<int>(parse_int(key, parts[1]))};
}

std::string dims_text(const Dims3& d) {
    return std::to_string(d.x) + "," + std::to_string(d.y) + "," + std::to_string(d.z);
}

std::string list_text(const std::vector<int>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(xs[i]);
    }
    return s;
}

std::string double_text(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

} // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    if (key == "seed") seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "volume.dims") volume_dims = parse_dims(key, value);
    else if (key == "grid.cells") {
        const auto [a, b] = parse_range(key, value);
        grid_cells_x = a;
        grid_cells_y = b;
    }
    else if (key == "crop.size") crop_size = parse_dims(key, value);
    else if (key == "window.size") window_size = parse_dims(key, value);
    else if (key == "model.stage.dims") stage_dims = parse_int_list(key, value);
    else if (key == "model.stage.blocks") stage_blocks = parse_int_list(key, value);
    else if (key == "model.stage.downsample") stage_downsample = parse_int_list(key, value);
    else if (key == "model.fine_stages") fine_stages = parse_int_list(key, value);
    else if (key == "model.heads") heads = static_cast<int>(parse_int(key, value));
    else if (key == "model.tokens_per_window") tokens_per_window = static_cast<int>(parse_int(key, value));
    else if (key == "model.tokens_per_cell") tokens_per_cell = static_cast<int>(parse_int(key, value));
    else if (key == "model.mlp_ratio") mlp_ratio = static_cast<int>(parse_int(key, value));
    else if (key == "model.rel_pos_bias") rel_pos_bias = parse_bool(key, value);
    else if (key == "model.deep_supervision") deep_supervision = parse_bool(key, value);
    else if (key == "model.classes") classes = static_cast<int>(parse_int(key, value));
    else if (key == "model.ablate") ablate = value;
    else if (key == "train.epochs") epochs = static_cast<int>(parse_int(key, value));
    else if (key == "train.iters_per_epoch") iters_per_epoch = static_cast<int>(parse_int(key, value));
    else if (key == "train.base_lr") base_lr = parse_double(key, value);
    else if (key == "train.momentum") momentum = parse_double(key, value);
    else if (key == "train.nesterov") nesterov = parse_bool(key, value);
    else if (key == "train.poly_power") poly_power = parse_double(key, value);
    else if (key == "train.dice_weight") dice_weight = parse_double(key, value);
    else if (key == "train.ce_weight") ce_weight = parse_double(key, value);
    else if (key == "synth.distractor_count") {
        const auto [a, b] = parse_range(key, value);
        distractor_min = a;
        distractor_max = b;
    }
    else if (key == "synth.blob_radius") {
        const auto [a, b] = parse_range(key, value);
        blob_radius_min = a;
        blob_radius_max = b;
    }
    else if (key == "synth.marker_min_cell_dist") marker_min_cell_dist = static_cast<int>(parse_int(key, value));
    else if (key == "synth.noise_sigma") noise_sigma = parse_double(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
    if (stage_dims.empty() || stage_dims.size() != stage_blocks.size() ||
        stage_dims.size() != stage_downsample.size())
        throw ConfigError("model.stage.* lists must be nonempty and of equal length");
    for (std::size_t s = 0; s < stage_dims.size(); ++s) {
        if (stage_dims[s] < 1 || stage_dims[s] % heads)
            throw ConfigError("stage dim " + std::to_string(stage_dims[s]) +
                              " must be positive and divisible by heads");
        if (stage_blocks[s] < 1) throw ConfigError("stage block counts must be >= 1");
        const int f = stage_downsample[s];
        if (f != 1 && f != 2) throw ConfigError("stage downsample factors must be 1 or 2");
        if (s == 0 && f != 1) throw ConfigError("stage 0 must have downsample factor 1");
    }
    for (int fs : fine_stages)
        if (fs < 0 || fs >= static_cast<int>(stage_dims.size()))
            throw ConfigError("model.fine_stages index " + std::to_string(fs) + " out of range");
    if (ablate != "none" && ablate != "no-volume-tokens" && ablate != "no-memory")
        throw ConfigError("model.ablate must be none, no-volume-tokens or no-memory");
    if (classes < 2) throw ConfigError("model.classes must be >= 2");
    if (tokens_per_window < 1 || tokens_per_cell < 1)
        throw ConfigError("token counts must be >= 1");
    if (epochs < 0 || iters_per_epoch < 1)
        throw ConfigError("train.epochs must be >= 0 and train.iters_per_epoch >= 1");
    if (base_lr < 0 || momentum < 0 || momentum >= 1)
        throw ConfigError("train.base_lr must be >= 0 and momentum in [0,1)");
    if (dice_weight < 0 || ce_weight < 0 || std::abs(dice_weight + ce_weight - 1.0) > 1e-12)
        throw ConfigError("train.dice_weight + train.ce_weight must equal 1");
    if (crop_size.x > volume_dims.x || crop_size.y > volume_dims.y || crop_size.z > volume_dims.z)
        throw ConfigError("crop " + crop_size.str() + " exceeds volume " + volume_dims.str());
    // The crop must stay window-divisible through every downsampling step.
    Dims3 res = crop_size;
    for (std::size_t s = 0; s < stage_dims.size(); ++s) {
        if (stage_downsample[s] == 2) {
            if (res.x % 2 || res.y % 2 || res.z % 2)
                throw ConfigError("resolution " + res.str() + " at stage " + std::to_string(s) +
                                  " is not divisible by 2");
            res = Dims3{res.x / 2, res.y / 2, res.z / 2};
        }
        if (res.x % window_size.x || res.y % window_size.y || res.z % window_size.z)
            throw ConfigError("stage " + std::to_string(s) + " resolution " + res.str() +
                              " is not divisible by window " + window_size.str());
    }
    if (distractor_min < 0 || distractor_max < distractor_min)
        throw ConfigError("synth.distractor_count range is invalid");
    if (blob_radius_min < 1 || blob_radius_max < blob_radius_min)
        throw ConfigError("synth.blob_radius range is invalid");
    if (marker_min_cell_dist < 1) throw ConfigError("synth.marker_min_cell_dist must be >= 1");
    if (noise_sigma < 0) throw ConfigError("synth.noise_sigma must be >= 0");
    // Grid construction enforces cell_size >= crop footprint.
    build_grid(volume_dims, grid_cells_x, grid_cells_y, crop_size);
}

std::string RunConfig::resolved_text() const {
    std::ostringstream os;
    os << "seed = " << seed << "\n";
    os << "volume.dims = " << dims_text(volume_dims) << "\n";
    os << "grid.cells = " << grid_cells_x << "," << grid_cells_y << "\n";
    os << "crop.size = " << dims_text(crop_size) << "\n";
    os << "window.size = " << dims_text(window_size) << "\n";
    os << "model.stage.dims = " << list_text(stage_dims) << "\n";
    os << "model.stage.blocks = " << list_text(stage_blocks) << "\n";
    os << "model.stage.downsample = " << list_text(stage_downsample) << "\n";
    os << "model.fine_stages = " << list_text(fine_stages) << "\n";
    os << "model.heads = " << heads << "\n";
    os << "model.tokens_per_window = " << tokens_per_window << "\n";
    os << "model.tokens_per_cell = " << tokens_per_cell << "\n";
    os << "model.mlp_ratio = " << mlp_ratio << "\n";
    os << "model.rel_pos_bias = " << (rel_pos_bias ? "true" : "false") << "\n";
    os << "model.deep_supervision = " << (deep_supervision ? "true" : "false") << "\n";
    os << "model.classes = " << classes << "\n";
    os << "model.ablate = " << ablate << "\n";
    os << "train.epochs = " << epochs << "\n";
    os << "train.iters_per_epoch = " << iters_per_epoch << "\n";
    os << "train.base_lr = " << double_text(base_lr) << "\n";
    os << "train.momentum = " << double_text(momentum) << "\n";
    os << "train.nesterov = " << (nesterov ? "true" : "false") << "\n";
    os << "train.poly_power = " << double_text(poly_power) << "\n";
    os << "train.dice_weight = " << double_text(dice_weight) << "\n";
    os << "train.ce_weight = " << double_text(ce_weight) << "\n";
    os << "synth.distractor_count = " << distractor_min << "," << distractor_max << "\n";
    os << "synth.blob_radius = " << blob_radius_min << "," << blob_radius_max << "\n";
    os << "synth.marker_min_cell_dist = " << marker_min_cell_dist << "\n";
    os << "synth.noise_sigma = " << double_text(noise_sigma) << "\n";
    return os.str();
}

std::uint64_t RunConfig::digest() const { return fnv1a64(resolved_text()); }

RunConfig RunConfig::from_text(const std::string& text, const std::vector<std::string>& overrides) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        cfg.apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    for (const std::string& ov : overrides) {
        const std::size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + ov + "' is not of the form key=value");
        cfg.apply(trim(ov.substr(0, eq)), trim(ov.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return from_text(buf.str(), overrides);
}

} // namespace fine
