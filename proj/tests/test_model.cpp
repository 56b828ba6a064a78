#include "support.hpp"

#include <tts/metrics.hpp>
#include <tts/model.hpp>

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <random>

using namespace tts;

namespace {

nn::Architecture tiny_arch(int side = 8) {
    nn::Architecture a;
    a.name = "tiny";
    a.input_height = a.input_width = side;
    a.blocks = {{4, true}, {6, false}};
    return a;
}

Image noise_image(int side, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(3, side, side);
    for (float& v : img.data()) v = u(rng);
    return img;
}

// Label = red brightness above green brightness; two scalar features per image.
std::vector<LabeledImage> separable_set(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.1f, 0.9f);
    std::vector<LabeledImage> out;
    while (static_cast<int>(out.size()) < n) {
        const float r = u(rng), g = u(rng);
        if (std::abs(r - g) < 0.15f) continue;
        Image img(3, 8, 8);
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                img.at(0, y, x) = r;
                img.at(1, y, x) = g;
                img.at(2, y, x) = u(rng);
            }
        out.push_back({img, r > g ? Label::melanoma : Label::benign});
    }
    return out;
}

std::shared_ptr<const nn::ConvNet> random_net(std::uint64_t seed, int side = 8) {
    return std::make_shared<const nn::ConvNet>(nn::ConvNet::initialize(tiny_arch(side), nn::ChannelStats::neutral(3), seed));
}

} // namespace

TEST_CASE("architecture shapes") {
    const auto a = nn::Architecture::desk_scale();
    CHECK(a.feature_channels() == 64);
    CHECK(a.feature_size() == ImageSize{8, 8});
    nn::Architecture bad = a;
    bad.blocks.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("network outputs are probability vectors") {
    const auto model = SplitModel::from_network(random_net(1));
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto p = model.predict(noise_image(8, s));
        REQUIRE(p.size() == 2);
        CHECK(p[0] >= 0.0);
        CHECK(p[1] >= 0.0);
        CHECK(p[0] + p[1] == Catch::Approx(1.0).margin(1e-6));
    }
    CHECK_THROWS_AS(model.predict(noise_image(9, 0)), ShapeError);
}

TEST_CASE("backpropagation matches finite differences") {
    auto arch = tiny_arch(6);
    nn::ConvNet net = nn::ConvNet::initialize(arch, nn::ChannelStats::neutral(3), 3);
    for (auto& conv : net.convs)
        for (float& b : conv.bias) b = 0.05f;  // keep units away from the ReLU kink
    const Image img = noise_image(6, 4);
    auto g = net.zero_gradients();
    net.accumulate_gradient(img, 1, g);
    auto loss_at = [&](const nn::ConvNet& n) {
        auto tmp = n.zero_gradients();
        return n.accumulate_gradient(img, 1, tmp);
    };

    std::mt19937_64 rng(5);
    int checked = 0, agree = 0;
    auto probe = [&](std::vector<float>& param, float analytic, std::size_t i) {
        const float keep = param[i];
        const float h = 1e-2f;
        param[i] = keep + h;
        const double up = loss_at(net);
        param[i] = keep - h;
        const double down = loss_at(net);
        param[i] = keep;
        const double numeric = (up - down) / (2.0 * h);
        ++checked;
        if (std::abs(numeric - analytic) <= 2e-3 + 5e-2 * std::abs(numeric)) ++agree;
    };
    for (std::size_t l = 0; l < net.convs.size(); ++l)
        for (int t = 0; t < 15; ++t) {
            const std::size_t i = std::uniform_int_distribution<std::size_t>(0, net.convs[l].weight.size() - 1)(rng);
            probe(net.convs[l].weight, g.conv_w[l][i], i);
            const std::size_t j = std::uniform_int_distribution<std::size_t>(0, net.convs[l].bias.size() - 1)(rng);
            probe(net.convs[l].bias, g.conv_b[l][j], j);
        }
    for (std::size_t i = 0; i < net.head.weight.size(); ++i) probe(net.head.weight, g.head_w[i], i);
    for (std::size_t i = 0; i < net.head.bias.size(); ++i) probe(net.head.bias, g.head_b[i], i);
    // Max-pool switches can flip under a finite step; allow a few misses.
    CHECK(agree >= checked - 3);
}

TEST_CASE("training separates a linearly separable set") {
    const auto train = separable_set(160, 1);
    const auto val = separable_set(40, 2);
    TrainConfig cfg;
    cfg.architecture = tiny_arch();
    cfg.max_epochs = 40;
    cfg.patience = 40;
    cfg.augmentation = AugmentationPolicy::identity();
    cfg.seed = 3;
    const auto result = train_erm(train, val, cfg);
    const auto model = result.model();
    int correct = 0;
    for (const auto& s : train) correct += (model.predict(s.image)[1] > 0.5) == (s.label == Label::melanoma);
    CHECK(correct >= 0.95 * static_cast<double>(train.size()));
    REQUIRE(result.best_val_auc);
    CHECK(*result.best_val_auc > 0.95);
    CHECK(result.best_epoch >= 1);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto train = separable_set(48, 7);
    const auto val = separable_set(16, 8);
    TrainConfig cfg;
    cfg.architecture = tiny_arch();
    cfg.max_epochs = 6;
    cfg.seed = 11;
    const auto a = train_erm(train, val, cfg);
    const auto b = train_erm(train, val, cfg);
    REQUIRE(a.best_val_auc);
    CHECK(std::abs(*a.best_val_auc - *b.best_val_auc) <= 1e-3);
    CHECK(a.network->head.weight == b.network->head.weight);
}

TEST_CASE("training errors") {
    TrainConfig cfg;
    cfg.architecture = tiny_arch();
    CHECK_THROWS_AS(train_erm({}, {}, cfg), PreconditionError);

    const auto train = separable_set(32, 1);
    cfg.learning_rate = 1e30;
    cfg.max_epochs = 5;
    try {
        train_erm(train, {}, cfg);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        CHECK(e.epoch() >= 1);
        CHECK(e.epoch() <= 5);
    }
}

TEST_CASE("TTA with the identity policy is a single pass") {
    const auto model = SplitModel::from_network(random_net(2));
    const Image img = noise_image(8, 9);
    const auto single = model.predict(img);
    CHECK(predict_tta(model, img, AugmentationPolicy::identity(1)).probabilities == single);
    for (int n : {2, 5, 50}) {
        const auto p = predict_tta(model, img, AugmentationPolicy::identity(n)).probabilities;
        for (std::size_t k = 0; k < p.size(); ++k) CHECK(p[k] == Catch::Approx(single[k]).margin(1e-12));
    }
}

TEST_CASE("TTA with keep_fraction 1 equals plain TTA") {
    const auto model = SplitModel::from_network(random_net(4));
    AugmentationPolicy policy;
    policy.replica_count = 50;
    const Image img = noise_image(8, 21);
    KeypointSet keys{{{1, 1}, {2, 2}}, {{6, 6}, {7, 7}}, {}};
    const auto plain = predict_tta(model, img, policy);
    const auto sel = predict_tta(model, img, policy, Selection{keys, {0.4, 1.0}});
    CHECK(sel.probabilities == plain.probabilities);
    REQUIRE(sel.mask);
    CHECK(sel.mask->selected.size() == 6);
    CHECK(sel.probabilities[0] + sel.probabilities[1] == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("TTA replicas are reproducible and differ from each other") {
    AugmentationPolicy policy;
    const Image img = noise_image(8, 1);
    CHECK(make_replica(img, policy, 3) == make_replica(img, policy, 3));
    int distinct = 0;
    for (int i = 1; i < 10; ++i) distinct += !(make_replica(img, policy, i) == make_replica(img, policy, 0));
    CHECK(distinct >= 8);
    AugmentationPolicy bad;
    bad.replica_count = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("TTA propagates coordinate errors") {
    const auto model = SplitModel::from_network(random_net(2));
    KeypointSet keys{{{0, 0}}, {{8, 0}}, {}};
    CHECK_THROWS_AS(predict_tta(model, noise_image(8, 0), AugmentationPolicy::identity(1), Selection{keys, {}}),
                    CoordinateError);
}

TEST_CASE("toy model: a negative keypoint on the artifact flips the prediction") {
    const auto model = toy::model();
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto t = toy::make_instance(s);
        const auto before = predict_tta(model, t.image, AugmentationPolicy::identity(1));
        const auto after = predict_tta(model, t.image, AugmentationPolicy::identity(1), Selection{t.keys, {0.4, 0.5}});
        CHECK(before.probabilities[1] > before.probabilities[0]);
        CHECK(after.probabilities[0] > after.probabilities[1]);
        REQUIRE(after.mask);
        CHECK(after.mask->selected == std::vector<int>{0});
    }
}

TEST_CASE("noisecrop") {
    const Image img = noise_image(16, 3);
    const nn::ChannelStats stats{{0.2f, 0.5f, 0.8f}, {0.1f, 0.2f, 0.05f}};
    SECTION("all foreground leaves the image unchanged") {
        CHECK(noisecrop(img, SegmentationMask::filled(16, 16, 1), 1, stats) == img);
    }
    SECTION("all background is noise with the configured statistics") {
        const Image out = noisecrop(img, SegmentationMask::filled(16, 16, 0), 1, stats);
        const double n = 256;
        for (int c = 0; c < 3; ++c) {
            double sum = 0;
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x) sum += out.at(c, y, x);
            CHECK(std::abs(sum / n - stats.mean[c]) <= 3.0 * stats.stddev[c] / std::sqrt(n));
        }
    }
    SECTION("checkerboard keeps foreground pixels bitwise") {
        std::vector<std::uint8_t> v(256);
        for (int i = 0; i < 256; ++i) v[i] = ((i / 16) + (i % 16)) % 2;
        const SegmentationMask m(16, 16, v);
        const Image out = noisecrop(img, m, 5, stats);
        int changed = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                for (int c = 0; c < 3; ++c) {
                    if (m.at(y, x))
                        CHECK(out.at(c, y, x) == img.at(c, y, x));
                    else
                        changed += out.at(c, y, x) != img.at(c, y, x);
                }
        CHECK(changed > 300);
        CHECK(noisecrop(img, m, 5, stats) == out);
    }
    SECTION("size mismatch") { CHECK_THROWS_AS(noisecrop(img, SegmentationMask::filled(8, 8, 1), 1, stats), ShapeError); }
    SECTION("model overload uses the training statistics") {
        const auto model = SplitModel::from_network(random_net(1, 16));
        CHECK(noisecrop(img, SegmentationMask::filled(16, 16, 0), 2, model) ==
              noisecrop(img, SegmentationMask::filled(16, 16, 0), 2, model.network()->stats));
        CHECK_THROWS_AS(noisecrop(img, SegmentationMask::filled(16, 16, 0), 2, toy::model()),
                        UnsupportedArchitectureError);
    }
}

TEST_CASE("attention maps") {
    SECTION("all-ones mask equals no mask") {
        const auto model = SplitModel::from_network(random_net(6));
        const Image img = noise_image(8, 2);
        const auto a = attention_map(model, img);
        const auto b = attention_map(model, img, nullptr);
        const auto m = SelectionMask::all(model.metadata().channels);
        const auto c = attention_map(model, img, &m);
        CHECK(a.heat == c.heat);
        CHECK(a.heat == b.heat);
        CHECK(*std::max_element(a.heat.begin(), a.heat.end()) == 1.0);
        CHECK(*std::min_element(a.heat.begin(), a.heat.end()) == 0.0);
    }
    SECTION("single-channel extractor: attention follows the activation") {
        nn::LinearHead head(2, 1);
        head.weight = {-1.0f, 2.0f};
        auto extractor = [](const Image& img) {
            std::vector<float> v(16);
            for (int i = 0; i < 16; ++i) v[i] = img.at(0, (i / 4) * 2, (i % 4) * 2);
            return FeatureMap(1, 4, 4, img.size(), std::move(v));
        };
        const SplitModel model(extractor, head, {"single", 1, {4, 4}, {8, 8}});
        const Image img = noise_image(8, 12);
        const auto att = attention_map(model, img);
        CHECK(att.predicted_class == 1);
        const auto up = upsample_to_image(extractor(img));
        const auto [lo, hi] = std::minmax_element(up.values().begin(), up.values().end());
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                CHECK(att.at(y, x) == Catch::Approx((up.at(0, y, x) - *lo) / (*hi - *lo)).margin(1e-5));
    }
    SECTION("constant map is flagged") {
        nn::LinearHead head(2, 1);
        head.weight = {0.0f, 1.0f};
        const SplitModel model([](const Image& img) { return FeatureMap(1, 2, 2, img.size(), {1, 1, 1, 1}); }, head,
                               {"flat", 1, {2, 2}, {8, 8}});
        const auto att = attention_map(model, noise_image(8, 0));
        CHECK(att.constant);
        for (double v : att.heat) CHECK(v == 0.0);
    }
    SECTION("opaque head is rejected") {
        const SplitModel model(toy::extract, SplitModel::OpaqueHead([](const FeatureMap&) { return std::vector<double>{0.5, 0.5}; }),
                               {"opaque", 2, {4, 4}, {16, 16}});
        CHECK_THROWS_AS(attention_map(model, toy::make_instance(0).image), UnsupportedArchitectureError);
    }
    SECTION("toy model: masking the artifact channel moves the argmax to the lesion") {
        const auto model = toy::model();
        for (std::uint64_t s = 0; s < 50; ++s) {
            const auto t = toy::make_instance(s);
            const auto sel = tts_select(model.extract(t.image), t.keys, {0.4, 0.5});
            CHECK(t.in(t.artifact, attention_map(model, t.image).argmax()));
            CHECK(t.in(t.lesion, attention_map(model, t.image, &sel.mask).argmax()));
        }
    }
}

TEST_CASE("checkpoint round trip") {
    const auto net = random_net(8);
    const auto dir = std::filesystem::temp_directory_path() / "tts_model_ckpt";
    std::filesystem::create_directories(dir);
    save_checkpoint(*net, dir / "m.json");
    const auto back = load_checkpoint(dir / "m.json");
    CHECK(back.arch == net->arch);
    CHECK(back.stats == net->stats);
    CHECK(back.head.weight == net->head.weight);
    const Image img = noise_image(8, 1);
    CHECK(SplitModel::from_network(std::make_shared<const nn::ConvNet>(back)).predict(img) ==
          SplitModel::from_network(net).predict(img));

    CHECK_THROWS_AS(network_from_checkpoint(nlohmann::json{{"format", "other"}}), ParseError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.json"), ParseError);
}
