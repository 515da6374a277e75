// Command-line front end: synthetic data generation, training, evaluation,
// attention-map export and the attention cost report.
//
// Exit codes: 0 success, 1 usage/config error, 2 data/format error,
// 3 numeric failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fine/attention.hpp"
#include "fine/config.hpp"
#include "fine/data.hpp"
#include "fine/flops.hpp"
#include "fine/model.hpp"
#include "fine/serialize.hpp"

namespace fs = std::filesystem;
using namespace fine;

namespace {

RunConfig load_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    if (config_path.empty()) {
        RunConfig cfg = RunConfig::from_text("", overrides);
        return cfg;
    }
    return RunConfig::from_file(config_path, overrides);
}

void echo_config(const RunConfig& cfg, const std::string& sidecar_path) {
    std::cout << "resolved configuration:\n" << cfg.resolved_text();
    if (!sidecar_path.empty()) {
        std::ofstream os(sidecar_path);
        if (!os) throw DataError("cannot write '" + sidecar_path + "'");
        os << cfg.resolved_text();
    }
}

std::string volume_file_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "vol_%04d.fvol", index);
    return buf;
}

std::string label_file_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "lab_%04d.fvol", index);
    return buf;
}

struct DataSet {
    std::vector<Volume> volumes;
    std::vector<std::string> ids;
};

DataSet load_data_dir(const std::string& dir, Dims3 window) {
    if (!fs::is_directory(dir)) throw DataError("data directory '" + dir + "' does not exist");
    std::vector<std::string> vol_files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("vol_", 0) == 0 && name.size() > 9 &&
            name.substr(name.size() - 5) == ".fvol")
            vol_files.push_back(name);
    }
    std::sort(vol_files.begin(), vol_files.end());
    if (vol_files.empty()) throw DataError("data directory '" + dir + "' holds no vol_*.fvol files");
    DataSet ds;
    for (const std::string& name : vol_files) {
        const std::string id = name.substr(4, name.size() - 9);
        const fs::path lab = fs::path(dir) / ("lab_" + id + ".fvol");
        if (!fs::exists(lab))
            throw DataError("missing label file '" + lab.string() + "' for '" + name + "'");
        Volume v = load_volume_pair((fs::path(dir) / name).string(), lab.string());
        ds.volumes.push_back(pad_to_window(std::move(v), window));
        ds.ids.push_back(id);
    }
    return ds;
}

std::string format_metric(double v) {
    if (!std::isfinite(v)) return "undefined";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void write_pgm(const std::string& path, const std::vector<double>& vals, int width, int height) {
    if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != vals.size())
        throw ContractError("write_pgm: extent mismatch");
    double mx = 0.0;
    for (double v : vals) mx = std::max(mx, v);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write '" + path + "'");
    os << "P5\n" << width << " " << height << "\n255\n";
    for (double v : vals) {
        const int g = mx > 0.0 ? static_cast<int>(std::lround(255.0 * v / mx)) : 0;
        os.put(static_cast<char>(std::clamp(g, 0, 255)));
    }
}

void write_weight_csv(const std::string& path, const std::vector<double>& row) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write '" + path + "'");
    os << "token_index,weight\n";
    for (std::size_t i = 0; i < row.size(); ++i) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%zu,%.9f\n", i, row[i]);
        os << buf;
    }
}

std::vector<double> capture_row(const AttnCapture& cap, int row) {
    if (cap.seq_len == 0) throw ContractError("attention capture is empty");
    if (row < 0 || row >= cap.seq_len) throw BoundsError("capture row out of range");
    return std::vector<double>(cap.weights.begin() + static_cast<std::ptrdiff_t>(row) * cap.seq_len,
                               cap.weights.begin() + static_cast<std::ptrdiff_t>(row + 1) * cap.seq_len);
}

int run_gen_data(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::string& out_dir, int count) {
    const RunConfig cfg = load_config(config_path, overrides);
    fs::create_directories(out_dir);
    echo_config(cfg, (fs::path(out_dir) / "resolved_config.txt").string());
    const SyntheticSpec spec = SyntheticSpec::from_config(cfg);
    for (int i = 0; i < count; ++i) {
        Volume v = generate(spec, cfg.seed + static_cast<std::uint64_t>(i));
        v = pad_to_window(std::move(v), cfg.window_size);
        write_fvol_intensity((fs::path(out_dir) / volume_file_name(i)).string(), v);
        write_fvol_labels((fs::path(out_dir) / label_file_name(i)).string(), v);
    }
    std::cout << "wrote " << count << " volume/label pairs to " << out_dir << "\n";
    return 0;
}

int run_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& data_dir, const std::string& out_path,
              const std::string& resume_path) {
    std::unique_ptr<SegModel> model;
    BankMap banks;
    TrainerState state;
    RunConfig cfg;
    if (!resume_path.empty()) {
        LoadedCheckpoint ckpt = load_checkpoint(resume_path);
        cfg = ckpt.config;
        // command-line overrides may extend the schedule (e.g. more epochs)
        for (const std::string& ov : overrides) {
            const auto eq = ov.find('=');
            if (eq == std::string::npos) throw ConfigError("override '" + ov + "' is not key=value");
            cfg.apply(ov.substr(0, eq), ov.substr(eq + 1));
        }
        cfg.validate();
        if (RunConfig(cfg).resolved_text() != ckpt.config.resolved_text()) {
            // Rebuild only if the architecture is untouched; parameter shapes
            // must match the checkpoint.
            SegModel probe(cfg);
            if (probe.store().count() != ckpt.model->store().count())
                throw ConfigError("resume overrides change the model architecture");
        }
        model = std::make_unique<SegModel>(cfg);
        for (int i = 0; i < model->store().count(); ++i) {
            model->store().value(i) = ckpt.model->store().value(i);
            model->store().momentum(i) = ckpt.model->store().momentum(i);
        }
        banks = std::move(ckpt.banks);
        state = ckpt.state;
    } else {
        cfg = load_config(config_path, overrides);
        model = std::make_unique<SegModel>(cfg);
    }
    echo_config(cfg, out_path + ".config.txt");

    const DataSet ds = load_data_dir(data_dir, cfg.window_size);
    Trainer trainer(*model, cfg);
    if (!resume_path.empty() && !state.rng_state.empty())
        trainer.restore(state.global_iter, state.rng_state);

    trainer.run(ds.volumes, ds.ids, banks, [](int epoch, double mean_loss, double lr) {
        std::printf("epoch %4d  loss %.6f  lr %.6f\n", epoch, mean_loss, lr);
    });

    TrainerState out_state;
    out_state.global_iter = trainer.global_iter();
    out_state.rng_state = trainer.rng_state();
    save_checkpoint(out_path, *model, banks, out_state);
    std::cout << "checkpoint written to " << out_path << "\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& report_path) {
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    echo_config(ckpt.config, report_path + ".config.txt");
    const DataSet ds = load_data_dir(data_dir, ckpt.config.window_size);
    const std::string csv = eval_report_csv(*ckpt.model, ckpt.banks, ds.volumes, ds.ids);
    std::ofstream report(report_path, std::ios::binary);
    if (!report) throw DataError("cannot write '" + report_path + "'");
    report << csv;
    std::cout << "report written to " << report_path << "\n";
    return 0;
}

int run_attn(const std::string& ckpt_path, const std::string& volume_path,
             const std::string& query_str, const std::string& out_prefix) {
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    const RunConfig& cfg = ckpt.config;
    SegModel& model = *ckpt.model;
    if (model.memory_stage_indices().empty())
        throw ConfigError("attn: the checkpointed model has no memory stages to visualize");
    echo_config(cfg, out_prefix + "_config.txt");

    Dims3 q{};
    if (std::sscanf(query_str.c_str(), "%d,%d,%d", &q.x, &q.y, &q.z) != 3)
        throw ConfigError("attn: --query expects x,y,z");

    Volume vol = load_intensity(volume_path);
    vol = pad_to_window(std::move(vol), cfg.window_size);
    if (q.x < 0 || q.y < 0 || q.z < 0 || q.x >= vol.original_dims.x ||
        q.y >= vol.original_dims.y || q.z >= vol.original_dims.z)
        throw BoundsError("attn: query " + q.str() + " outside volume " +
                          vol.original_dims.str());

    // crop centered on the query, clamped to the volume
    CropSpec crop;
    crop.size = cfg.crop_size;
    crop.origin.x = std::clamp(q.x - crop.size.x / 2, 0, vol.dims.x - crop.size.x);
    crop.origin.y = std::clamp(q.y - crop.size.y / 2, 0, vol.dims.y - crop.size.y);
    crop.origin.z = std::clamp(q.z - crop.size.z / 2, 0, vol.dims.z - crop.size.z);

    // bank for this volume: stored if the id matches a training volume
    std::string id = fs::path(volume_path).filename().string();
    if (id.rfind("vol_", 0) == 0 && id.size() > 9) id = id.substr(4, id.size() - 9);
    VolumeBanks banks;
    auto it = model.memory_mode() == BlockMode::full ? ckpt.banks.find(id) : ckpt.banks.end();
    VolumeBanks* banks_ptr = nullptr;
    if (model.memory_mode() == BlockMode::full) {
        banks = it != ckpt.banks.end() ? std::move(it->second) : model.make_banks(id);
        banks_ptr = &banks;
    }

    const int enc_index = model.memory_stage_indices()[0];
    const Dims3 res = model.stage_res(enc_index);
    const WindowPartition& part = model.stage_partition(enc_index);
    const Dims3 scale{cfg.crop_size.x / res.x, cfg.crop_size.y / res.y, cfg.crop_size.z / res.z};
    const Dims3 local{(q.x - crop.origin.x) / scale.x, (q.y - crop.origin.y) / scale.y,
                      (q.z - crop.origin.z) / scale.z};
    const Dims3 win{local.x / part.window_size.x, local.y / part.window_size.y,
                    local.z / part.window_size.z};
    const Dims3 in_win{local.x % part.window_size.x, local.y % part.window_size.y,
                       local.z % part.window_size.z};
    const int window_index = (win.x * part.window_grid.y + win.y) * part.window_grid.z + win.z;
    const int token_in_window =
        (in_win.x * part.window_size.y + in_win.y) * part.window_size.z + in_win.z;

    FineBlockCapture capture;
    capture.window = window_index;

    Tape tape;
    Binding binding(tape, model.store());
    const Tensor feat = crop_intensity(vol, crop);
    model.forward(binding, feat, crop, banks_ptr, &capture, 0);

    // W-MSA: the query voxel's attention row inside its window
    {
        const std::vector<double> row = capture_row(capture.w_msa, token_in_window);
        write_weight_csv(out_prefix + "_wmsa.csv", row);
        // visual part reshaped to the window footprint at the query's local z
        std::vector<double> slice(static_cast<std::size_t>(part.window_size.x) * part.window_size.y);
        for (int x = 0; x < part.window_size.x; ++x)
            for (int y = 0; y < part.window_size.y; ++y)
                slice[static_cast<std::size_t>(x) * part.window_size.y + y] =
                    row[static_cast<std::size_t>((x * part.window_size.y + y) * part.window_size.z + in_win.z)];
        write_pgm(out_prefix + "_wmsa.pgm", slice, part.window_size.y, part.window_size.x);
    }
    // G-MSA: the query's window-token row over all window tokens + w_cap
    if (capture.g_msa.seq_len > 0) {
        const int n_v = cfg.tokens_per_window;
        const std::vector<double> row = capture_row(capture.g_msa, window_index * n_v);
        write_weight_csv(out_prefix + "_gmsa.csv", row);
        std::vector<double> grid_map(static_cast<std::size_t>(part.window_grid.x) * part.window_grid.y);
        for (int x = 0; x < part.window_grid.x; ++x)
            for (int y = 0; y < part.window_grid.y; ++y)
                grid_map[static_cast<std::size_t>(x) * part.window_grid.y + y] =
                    row[static_cast<std::size_t>(((x * part.window_grid.y + y) * part.window_grid.z + win.z) * n_v)];
        write_pgm(out_prefix + "_gmsa.pgm", grid_map, part.window_grid.y, part.window_grid.x);
    }
    // global: the query cell's volume-token row over the whole bank
    if (capture.global_msa.seq_len > 0) {
        const VolumeGrid& grid = model.grid();
        const int cell = grid.cell_of_voxel(q.x, q.y);
        const int n_w = cfg.tokens_per_cell;
        const std::vector<double> row = capture_row(capture.global_msa, cell * n_w);
        write_weight_csv(out_prefix + "_global.csv", row);
        std::vector<double> cell_map(static_cast<std::size_t>(grid.cells_x) * grid.cells_y);
        for (int cx = 0; cx < grid.cells_x; ++cx)
            for (int cy = 0; cy < grid.cells_y; ++cy)
                cell_map[static_cast<std::size_t>(cx) * grid.cells_y + cy] =
                    row[static_cast<std::size_t>(grid.cell_index(cx, cy) * n_w)];
        write_pgm(out_prefix + "_global.pgm", cell_map, grid.cells_y, grid.cells_x);
    }
    std::cout << "attention maps written with prefix " << out_prefix << "\n";
    return 0;
}

int run_flops(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& csv_path) {
    const RunConfig cfg = load_config(config_path, overrides);
    const SegModel model(cfg);
    const int enc_index =
        model.memory_stage_indices().empty() ? 0 : model.memory_stage_indices()[0];
    const WindowPartition& part = model.stage_partition(enc_index);

    // worst-case crop placement: straddle a cell corner when the grid allows
    const VolumeGrid& grid = model.grid();
    CropSpec crop;
    crop.size = cfg.crop_size;
    crop.origin.x = std::min(std::max(grid.cell_size_x - cfg.crop_size.x / 2, 0),
                             cfg.volume_dims.x - cfg.crop_size.x);
    crop.origin.y = std::min(std::max(grid.cell_size_y - cfg.crop_size.y / 2, 0),
                             cfg.volume_dims.y - cfg.crop_size.y);
    crop.origin.z = 0;
    const IntersectionSet inter = intersect(grid, crop);

    FlopParams p;
    p.n_windows = part.window_count;
    p.n_u = part.window_voxels;
    p.n_v = cfg.tokens_per_window;
    p.n_w = cfg.tokens_per_cell;
    p.n_wcap = inter.count();
    p.m_cells = grid.cell_count();
    p.channels = cfg.stage_dims[static_cast<std::size_t>(enc_index)];

    const FlopReport report = measured_cost(p, cfg.heads, cfg.seed);
    std::cout << report.to_text();
    if (!csv_path.empty()) {
        std::ofstream os(csv_path);
        if (!os) throw DataError("cannot write '" + csv_path + "'");
        os << report.to_csv();
        std::cout << "csv written to " << csv_path << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-level memory-token attention for 3D volumes"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, out_path, resume_path, ckpt_path, report_path;
    std::string volume_path, query_str, out_prefix, csv_path, ablate;
    std::vector<std::string> overrides;
    int count = 1;

    CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic volume/label pairs");
    gen->add_option("--config", config_path, "config file");
    gen->add_option("--set", overrides, "override: key=value");
    gen->add_option("--out-dir", out_dir, "output directory")->required();
    gen->add_option("--count", count, "number of volumes");

    CLI::App* train = app.add_subcommand("train", "train on a data directory");
    train->add_option("--config", config_path, "config file");
    train->add_option("--set", overrides, "override: key=value");
    train->add_option("--data-dir", data_dir, "directory of vol_/lab_ pairs")->required();
    train->add_option("--out", out_path, "checkpoint output path")->required();
    train->add_option("--resume", resume_path, "checkpoint to resume from");
    train->add_option("--ablate", ablate, "none | no-volume-tokens | no-memory");

    CLI::App* eval = app.add_subcommand("eval", "sliding-window evaluation with metrics");
    eval->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    eval->add_option("--data-dir", data_dir, "directory of vol_/lab_ pairs")->required();
    eval->add_option("--report", report_path, "metrics CSV output path")->required();

    CLI::App* attn = app.add_subcommand("attn", "export attention maps for a query voxel");
    attn->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    attn->add_option("--volume", volume_path, "intensity .fvol file")->required();
    attn->add_option("--query", query_str, "voxel x,y,z")->required();
    attn->add_option("--out", out_prefix, "output file prefix")->required();

    CLI::App* flops = app.add_subcommand("flops", "attention cost report (analytic vs measured)");
    flops->add_option("--config", config_path, "config file");
    flops->add_option("--set", overrides, "override: key=value");
    flops->add_option("--csv", csv_path, "also write the report as CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) return run_gen_data(config_path, overrides, out_dir, count);
        if (train->parsed()) {
            if (!ablate.empty()) overrides.push_back("model.ablate=" + ablate);
            return run_train(config_path, overrides, data_dir, out_path, resume_path);
        }
        if (eval->parsed()) return run_eval(ckpt_path, data_dir, report_path);
        if (attn->parsed()) return run_attn(ckpt_path, volume_path, query_str, out_prefix);
        if (flops->parsed()) return run_flops(config_path, overrides, csv_path);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
