#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>
#include <vector>

#include "floodseg/trainer.hpp"
#include "test_util.hpp"

using namespace floodseg;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
    ModelConfig c;
    c.height = 16;
    c.width = 16;
    c.patch = 8;
    c.depth = 1;
    c.heads = 2;
    c.embed_dim = 8;
    c.cnn_channels = {8, 6, 4};
    c.fusion_channels = {8, 6, 4};
    c.seed = seed;
    return c;
}

std::vector<Sample> tiny_dataset(std::int64_t n, std::uint64_t seed) {
    std::vector<Sample> samples;
    for (std::int64_t i = 0; i < n; ++i) {
        samples.push_back(synthesize_scene(seed + static_cast<std::uint64_t>(i), 16, 16, 2,
                                           "s" + std::to_string(i)));
    }
    return samples;
}

BinaryMask balanced_mask_4x4() {
    BinaryMask m(4, 4);
    for (std::int64_t i = 0; i < 16; ++i) m.pixels[static_cast<std::size_t>(i)] = i % 2;
    return m;
}

std::vector<double> param_snapshot(const Model& model) {
    std::vector<double> values;
    for (const NamedParam& p : model.parameters())
        values.insert(values.end(), p.tensor.values().begin(), p.tensor.values().end());
    return values;
}

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.beta1 = 1.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidParam);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), InvalidParam);
    cfg = TrainConfig{};
    cfg.w_iou = 0.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidParam);
}

TEST_CASE("loss: vanishes in the perfect-prediction limit") {
    TrainConfig cfg;
    BinaryMask truth = balanced_mask_4x4();
    Tensor logits = Tensor::zeros({1, 4, 4});
    for (std::int64_t i = 0; i < 16; ++i) logits.data()[i] = truth.pixels[static_cast<std::size_t>(i)] ? 60.0 : -60.0;
    const double value = segmentation_loss(logits, {}, truth, cfg).item();
    CHECK(value < 1e-9);
}

TEST_CASE("loss: zero logits on a balanced mask decompose into ln2 + soft IoU") {
    TrainConfig cfg;
    BinaryMask truth = balanced_mask_4x4();
    Tensor logits = Tensor::zeros({1, 4, 4});
    // p = 0.5 everywhere: BCE = ln 2; soft IoU = 1 - (4+1)/(16-4+1)
    const double expected = std::log(2.0) + (1.0 - 5.0 / 13.0);
    CHECK(segmentation_loss(logits, {}, truth, cfg).item() ==
          doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("loss: aux heads are upsampled and weighted") {
    TrainConfig cfg;
    BinaryMask truth = balanced_mask_4x4();
    Tensor logits = Tensor::zeros({1, 4, 4});
    Tensor aux_full = Tensor::zeros({1, 4, 4});
    const double base = segmentation_loss(logits, {}, truth, cfg).item();
    const double with_aux =
        segmentation_loss(logits, std::array<Tensor, 1>{aux_full}, truth, cfg).item();
    CHECK(with_aux == doctest::Approx(base * (1.0 + cfg.deep_supervision[0])).epsilon(1e-9));

    Tensor aux_bad = Tensor::zeros({1, 3, 3});
    CHECK_THROWS_AS(segmentation_loss(logits, std::array<Tensor, 1>{aux_bad}, truth, cfg),
                    ShapeMismatch);
    CHECK_THROWS_AS(segmentation_loss(Tensor::zeros({1, 3, 3}), {}, truth, cfg), ShapeMismatch);
}

TEST_CASE("loss: non-negative on random inputs, zero only at perfection") {
    TrainConfig cfg;
    std::mt19937_64 rng(97);
    for (int round = 0; round < 50; ++round) {
        BinaryMask truth(4, 4);
        for (auto& p : truth.pixels) p = static_cast<std::uint8_t>(rng() & 1);
        Tensor logits = random_tensor({1, 4, 4}, rng, -5.0, 5.0);
        Tensor aux = random_tensor({1, 2, 2}, rng, -5.0, 5.0);
        const double value =
            segmentation_loss(logits, std::array<Tensor, 1>{aux}, truth, cfg).item();
        CHECK(value >= 0.0);
        CHECK(value > 1e-12);  // imperfect predictions never reach zero
    }
}

TEST_CASE("loss: gradient matches finite differences on a 4x4 case with aux heads") {
    TrainConfig cfg;
    BinaryMask truth = balanced_mask_4x4();
    std::mt19937_64 rng(61);
    Tensor logits = random_tensor({1, 4, 4}, rng, -2.0, 2.0, true);
    Tensor aux = random_tensor({1, 2, 2}, rng, -2.0, 2.0, true);
    auto r = grad_check(
        [&] { return segmentation_loss(logits, std::array<Tensor, 1>{aux}, truth, cfg); },
        {logits, aux});
    CHECK(r.failed == 0);
    CHECK(r.checked == 20);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
    Model model(tiny_config());
    TrainConfig cfg;
    TrainState state = init_state(model, cfg);
    const std::vector<double> before = param_snapshot(model);
    std::vector<std::vector<double>> grads;
    for (const Tensor& p : state.params) grads.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    adam_step(state, grads, cfg);
    CHECK(state.step == 1);
    CHECK(param_snapshot(model) == before);
}

TEST_CASE("adam: first step from zeroed moments is -lr*sign(g)") {
    Model model(tiny_config());
    TrainConfig cfg;
    cfg.learning_rate = 0.05;
    TrainState state = init_state(model, cfg);
    const std::vector<double> before = param_snapshot(model);

    std::mt19937_64 rng(67);
    std::vector<std::vector<double>> grads;
    for (const Tensor& p : state.params) {
        std::vector<double> g(static_cast<std::size_t>(p.size()));
        std::uniform_real_distribution<double> dist(0.5, 2.0);
        for (double& v : g) v = dist(rng) * (rng() & 1 ? 1.0 : -1.0);
        grads.push_back(std::move(g));
    }
    adam_step(state, grads, cfg);

    std::size_t offset = 0;
    for (std::size_t i = 0; i < state.params.size(); ++i) {
        const Tensor& p = state.params[i];
        for (std::int64_t j = 0; j < p.size(); ++j, ++offset) {
            const double update = p.data()[j] - before[offset];
            const double expected = -cfg.learning_rate *
                                    (grads[i][static_cast<std::size_t>(j)] > 0 ? 1.0 : -1.0);
            CHECK(update == doctest::Approx(expected).epsilon(1e-6));
        }
    }
}

TEST_CASE("adam: gradient shape mismatch is rejected") {
    Model model(tiny_config());
    TrainConfig cfg;
    TrainState state = init_state(model, cfg);
    std::vector<std::vector<double>> grads(state.params.size());
    CHECK_THROWS_AS(adam_step(state, grads, cfg), ShapeMismatch);
}

TEST_CASE("evaluate_with: an oracle that copies ground truth scores mIoU 1") {
    const std::vector<Sample> samples = tiny_dataset(3, 5);
    FloodReport report = evaluate_with([](const Sample& s) { return s.mask; }, samples);
    CHECK(report.aggregate.miou_mean == 1.0);
    CHECK(report.aggregate.miou_std == 0.0);
    CHECK(report.aggregate.pa_mean == 1.0);
}

TEST_CASE("evaluate_with: a constant-0.5 model predicts all ones at threshold 0.5") {
    const std::vector<Sample> samples = tiny_dataset(2, 9);
    FloodReport report = evaluate_with(
        [](const Sample& s) {
            return binarize(Tensor::full({1, s.mask.height, s.mask.width}, 0.5), 0.5);
        },
        samples);
    REQUIRE(report.per_image.size() == 2);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        BinaryMask all1(16, 16);
        for (auto& p : all1.pixels) p = 1;
        const IouResult want = miou(all1, samples[i].mask);
        CHECK(report.per_image[i].miou == want.miou);
        CHECK(report.per_image[i].fc == 1.0);
        CHECK(report.per_image[i].pa == pixel_accuracy(all1, samples[i].mask));
    }
}

TEST_CASE("evaluate: pure and repeatable, parameters untouched") {
    Model model(tiny_config(3));
    const std::vector<Sample> samples = tiny_dataset(2, 11);
    const std::vector<double> before = param_snapshot(model);
    FloodReport a = evaluate(model, samples, 0.5);
    FloodReport b = evaluate(model, samples, 0.5);
    CHECK(param_snapshot(model) == before);
    REQUIRE(a.per_image.size() == b.per_image.size());
    for (std::size_t i = 0; i < a.per_image.size(); ++i) {
        CHECK(a.per_image[i].miou == b.per_image[i].miou);
        CHECK(a.per_image[i].fc == b.per_image[i].fc);
    }
    const std::vector<Sample> empty;
    CHECK_THROWS_AS(evaluate(model, empty, 0.5), EmptySplit);
}

TEST_CASE("fit: zero epochs is a no-op") {
    Model model(tiny_config(5));
    TrainConfig cfg;
    cfg.epochs = 0;
    const std::vector<Sample> train = tiny_dataset(2, 13);
    const std::vector<double> before = param_snapshot(model);
    FitResult result = fit(model, train, train, cfg);
    CHECK(result.history.empty());
    CHECK(result.state.step == 0);
    CHECK(param_snapshot(model) == before);
}

TEST_CASE("fit: empty train split is rejected") {
    Model model(tiny_config(5));
    TrainConfig cfg;
    const std::vector<Sample> empty;
    CHECK_THROWS_AS(fit(model, empty, empty, cfg), EmptySplit);
}

TEST_CASE("fit: deterministic given the seed") {
    const std::vector<Sample> train = tiny_dataset(3, 17);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.eval_every = 2;
    cfg.seed = 21;

    Model a(tiny_config(7));
    FitResult ra = fit(a, train, train, cfg);
    Model b(tiny_config(7));
    FitResult rb = fit(b, train, train, cfg);

    CHECK(param_snapshot(a) == param_snapshot(b));
    REQUIRE(ra.history.size() == rb.history.size());
    for (std::size_t i = 0; i < ra.history.size(); ++i) {
        CHECK(ra.history[i].step == rb.history[i].step);
        CHECK(ra.history[i].loss == rb.history[i].loss);
        CHECK(ra.history[i].miou == rb.history[i].miou);
    }
}

TEST_CASE("fit: resume continues with strictly increasing steps") {
    const std::vector<Sample> train = tiny_dataset(2, 23);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    cfg.eval_every = 1;

    Model model(tiny_config(9));
    FitResult first = fit(model, train, train, cfg);
    CHECK(first.state.step == 2);

    FitResult second = fit(model, train, train, cfg, std::move(first.state));
    CHECK(second.state.step == 4);
    std::int64_t prev = 2;
    for (const HistoryEntry& h : second.history) {
        CHECK(h.step > prev);
        prev = h.step;
    }
}

TEST_CASE("fit: max_steps caps the run and a checkpoint lands on disk") {
    namespace fs = std::filesystem;
    const std::string path = "/tmp/floodseg_fit_ckpt.bin";
    std::error_code ec;
    fs::remove(path, ec);

    const std::vector<Sample> train = tiny_dataset(2, 29);
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.max_steps = 3;
    cfg.batch_size = 1;
    cfg.eval_every = 100;  // final evaluation still runs
    cfg.checkpoint_path = path;

    Model model(tiny_config(11));
    FitResult result = fit(model, train, train, cfg);
    CHECK(result.state.step == 3);
    REQUIRE(!result.history.empty());
    CHECK(result.history.back().step == 3);
    CHECK(fs::exists(path));
    fs::remove(path, ec);
}

TEST_CASE("fit: loss decreases on a small overfit run") {
    const std::vector<Sample> train = tiny_dataset(2, 31);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch_size = 2;
    cfg.eval_every = 5;
    cfg.learning_rate = 3e-3;

    Model model(tiny_config(13));
    FitResult result = fit(model, train, train, cfg);
    REQUIRE(result.history.size() >= 2);
    CHECK(result.history.back().loss < result.history.front().loss);
}

TEST_CASE("history file format") {
    std::vector<HistoryEntry> history{{10, 0.5, 0.8, 0.9}, {20, 0.25, 0.9, 0.95}};
    std::ostringstream out;
    write_history(out, history);
    CHECK(out.str() == "10\t0.500000\t0.800000\t0.900000\n20\t0.250000\t0.900000\t0.950000\n");
}
