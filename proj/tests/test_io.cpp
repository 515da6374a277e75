#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fine/config.hpp"
#include "fine/model.hpp"
#include "test_support.hpp"

using namespace fine;
using namespace fine::test;

namespace {

RunConfig io_config() {
    RunConfig cfg;
    cfg.seed = 11;
    cfg.volume_dims = Dims3{24, 24, 8};
    cfg.grid_cells_x = 3;
    cfg.grid_cells_y = 3;
    cfg.crop_size = Dims3{8, 8, 4};
    cfg.window_size = Dims3{2, 2, 2};
    cfg.stage_dims = {4, 8};
    cfg.stage_blocks = {1, 2};
    cfg.stage_downsample = {1, 2};
    cfg.fine_stages = {1};
    cfg.heads = 2;
    cfg.classes = 4;
    cfg.epochs = 2;
    cfg.iters_per_epoch = 6;
    cfg.blob_radius_min = 2;
    cfg.blob_radius_max = 3;
    cfg.validate();
    return cfg;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("config parsing") {
    SUBCASE("unknown keys are rejected") {
        CHECK_THROWS_AS(RunConfig::from_text("typo.key = 3\n"), ConfigError);
    }
    SUBCASE("comments and blank lines are fine") {
        const RunConfig cfg = RunConfig::from_text("# comment\n\nseed = 9 # trailing\n");
        CHECK(cfg.seed == 9);
    }
    SUBCASE("overrides beat the file") {
        const RunConfig cfg = RunConfig::from_text("seed = 9\n", {"seed=10"});
        CHECK(cfg.seed == 10);
    }
    SUBCASE("loss weights must sum to one") {
        CHECK_THROWS_AS(RunConfig::from_text("train.dice_weight = 0.5\ntrain.ce_weight = 0.6\n"),
                        ConfigError);
    }
    SUBCASE("window divisibility is enforced through the stages") {
        CHECK_THROWS_AS(RunConfig::from_text("crop.size = 12,12,12\nwindow.size = 4,4,4\n"),
                        ConfigError);
    }
    SUBCASE("resolved text round-trips") {
        const RunConfig a = RunConfig::from_text("seed = 123\nmodel.heads = 4\nmodel.stage.dims = 8,16,32\n");
        const RunConfig b = RunConfig::from_text(a.resolved_text());
        CHECK(a.resolved_text() == b.resolved_text());
        CHECK(a.digest() == b.digest());
    }
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const std::string dir = "/tmp/fine_test_ckpt";
    std::filesystem::create_directories(dir);
    const RunConfig cfg = io_config();
    SegModel model(cfg);
    const std::vector<Volume> vols{generate(SyntheticSpec::from_config(cfg), 7)};
    const std::vector<std::string> ids{"0000"};
    BankMap banks;
    Trainer trainer(model, cfg);
    for (int i = 0; i < 5; ++i) trainer.step(vols, ids, banks);

    TrainerState state;
    state.global_iter = trainer.global_iter();
    state.rng_state = trainer.rng_state();
    const std::string p1 = dir + "/a.ckpt";
    save_checkpoint(p1, model, banks, state);

    LoadedCheckpoint loaded = load_checkpoint(p1);
    CHECK(loaded.config.resolved_text() == cfg.resolved_text());
    CHECK(loaded.state.global_iter == 5);
    for (int i = 0; i < model.store().count(); ++i) {
        CHECK(bit_equal(loaded.model->store().value(i), model.store().value(i)));
        CHECK(bit_equal(loaded.model->store().momentum(i), model.store().momentum(i)));
    }
    CHECK(bit_equal(loaded.banks.at("0000").per_stage[0].tokens(),
                    banks.at("0000").per_stage[0].tokens()));
    CHECK(loaded.banks.at("0000").per_stage[0].seen_flags() ==
          banks.at("0000").per_stage[0].seen_flags());

    // save(load(x)) is byte-identical to x
    const std::string p2 = dir + "/b.ckpt";
    save_checkpoint(p2, *loaded.model, loaded.banks, loaded.state);
    CHECK(read_file(p1) == read_file(p2));

    SUBCASE("truncation is detected") {
        const std::string bytes = read_file(p1);
        std::ofstream cut(dir + "/cut.ckpt", std::ios::binary);
        cut.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 8));
        cut.close();
        CHECK_THROWS_AS(load_checkpoint(dir + "/cut.ckpt"), FormatError);
    }
    SUBCASE("corruption is detected via the digest") {
        std::string bytes = read_file(p1);
        bytes[30] ^= 0x5a; // inside the embedded config text
        std::ofstream bad(dir + "/bad.ckpt", std::ios::binary);
        bad.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        bad.close();
        CHECK_THROWS_AS(load_checkpoint(dir + "/bad.ckpt"), FormatError);
    }
}

TEST_CASE("resuming continues the exact uninterrupted trajectory") {
    const std::string dir = "/tmp/fine_test_resume";
    std::filesystem::create_directories(dir);
    const RunConfig cfg = io_config(); // 2 epochs of 6 iterations
    const std::vector<Volume> vols{generate(SyntheticSpec::from_config(cfg), 3),
                                   generate(SyntheticSpec::from_config(cfg), 4)};
    const std::vector<std::string> ids{"0000", "0001"};

    // uninterrupted run
    SegModel full_model(cfg);
    BankMap full_banks;
    Trainer full_trainer(full_model, cfg);
    full_trainer.run(vols, ids, full_banks, nullptr);
    TrainerState full_state{full_trainer.global_iter(), full_trainer.rng_state()};
    save_checkpoint(dir + "/full.ckpt", full_model, full_banks, full_state);

    // first half: same schedule, stopped after epoch 1
    SegModel m1(cfg);
    BankMap b1;
    Trainer t1(m1, cfg);
    t1.run(vols, ids, b1, nullptr, 1);
    save_checkpoint(dir + "/half.ckpt", m1, b1, TrainerState{t1.global_iter(), t1.rng_state()});

    // resume second half
    LoadedCheckpoint ck = load_checkpoint(dir + "/half.ckpt");
    SegModel m2(cfg);
    for (int i = 0; i < m2.store().count(); ++i) {
        m2.store().value(i) = ck.model->store().value(i);
        m2.store().momentum(i) = ck.model->store().momentum(i);
    }
    Trainer t2(m2, cfg);
    t2.restore(ck.state.global_iter, ck.state.rng_state);
    t2.run(vols, ids, ck.banks, nullptr);
    save_checkpoint(dir + "/resumed.ckpt", m2, ck.banks, TrainerState{t2.global_iter(), t2.rng_state()});

    CHECK(read_file(dir + "/full.ckpt") == read_file(dir + "/resumed.ckpt"));
}
