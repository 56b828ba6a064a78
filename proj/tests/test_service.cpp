#include "support.hpp"

#include <tts/service.hpp>

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <thread>

using namespace tts;
using nlohmann::json;

namespace {

std::vector<SyntheticSample> toy_corpus(int n) {
    std::vector<SyntheticSample> out;
    for (int i = n - 1; i >= 0; --i) {
        const auto t = toy::make_instance(static_cast<std::uint64_t>(i));
        out.push_back(toy::as_sample(t, "toy_" + std::to_string(i), i % 2 ? Label::melanoma : Label::benign));
    }
    return out;
}

ServiceConfig plain_config() {
    ServiceConfig cfg;
    cfg.tta = AugmentationPolicy::identity(1);
    return cfg;
}

Service toy_service(int n = 3, ServiceConfig cfg = plain_config()) {
    return Service(std::make_shared<const SplitModel>(toy::model()), toy_corpus(n), std::move(cfg));
}

json predict_body(const toy::Instance& t, const std::string& id, double keep, double alpha = 0.4) {
    return {{"image_id", id},
            {"keypoints",
             {{"positive", {{t.keys.positive[0].row, t.keys.positive[0].col}}},
              {"negative", {{t.keys.negative[0].row, t.keys.negative[0].col}}}}},
            {"alpha", alpha},
            {"keep_fraction", keep},
            {"use_tta", false}};
}

std::filesystem::path fresh_dir(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("tts_service_" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

} // namespace

TEST_CASE("image listing") {
    SECTION("empty corpus") {
        auto svc = toy_service(0);
        const auto r = svc.handle("GET", "/api/images");
        CHECK(r.status == 200);
        CHECK(r.body == "[]");
    }
    SECTION("ordered by id, labels hidden outside study mode") {
        auto svc = toy_service(3);
        const auto j = json::parse(svc.handle("GET", "/api/images").body);
        REQUIRE(j.size() == 3);
        CHECK(j[0]["image_id"] == "toy_0");
        CHECK(j[1]["image_id"] == "toy_1");
        CHECK(j[2]["image_id"] == "toy_2");
        CHECK(j[0]["artifact_flags"]["patch"] == true);
        CHECK(j[0]["artifact_flags"]["ruler"] == false);
        CHECK_FALSE(j[0].contains("label"));
    }
    SECTION("study mode exposes labels") {
        auto cfg = plain_config();
        cfg.study_mode = true;
        auto svc = toy_service(3, cfg);
        const auto j = json::parse(svc.handle("GET", "/api/images").body);
        CHECK(j[0]["label"] == "benign");
        CHECK(j[1]["label"] == "melanoma");
    }
}

TEST_CASE("image detail") {
    auto svc = toy_service(2);
    const auto j = json::parse(svc.handle("GET", "/api/images/toy_1").body);
    CHECK(j["height"] == toy::kSide);
    CHECK(j["rgb"].size() == toy::kSide);
    CHECK(j["rgb"][0][0].size() == 3);
    CHECK(j["attention"].size() == toy::kSide);
    CHECK(svc.handle("GET", "/api/images/nope").status == 404);
}

TEST_CASE("predict errors") {
    auto svc = toy_service(2);
    const auto t = toy::make_instance(0);
    CHECK(svc.handle("POST", "/api/predict", predict_body(t, "missing", 0.1).dump()).status == 404);
    CHECK(svc.handle("POST", "/api/predict", "{not json").status == 400);
    CHECK(svc.handle("POST", "/api/predict", "[1,2]").status == 400);
    CHECK(svc.handle("POST", "/api/predict", R"({"keypoints": {}})").status == 400);

    auto body = predict_body(t, "toy_0", 0.1);
    body["keypoints"]["negative"] = {{toy::kSide, 0}};
    const auto oob = svc.handle("POST", "/api/predict", body.dump());
    CHECK(oob.status == 422);
    CHECK_THAT(json::parse(oob.body)["error"].get<std::string>(), Catch::Matchers::ContainsSubstring("outside"));

    body = predict_body(t, "toy_0", 0.1);
    body["keypoints"]["positive"] = {{1.5, 2}};
    CHECK(svc.handle("POST", "/api/predict", body.dump()).status == 422);
    body = predict_body(t, "toy_0", 0.0);
    CHECK(svc.handle("POST", "/api/predict", body.dump()).status == 422);
    body = predict_body(t, "toy_0", 0.1, 2.0);
    CHECK(svc.handle("POST", "/api/predict", body.dump()).status == 422);
    body = predict_body(t, "toy_0", 0.1);
    body["keypoints"]["positive"] = json::array();
    body["keypoints"]["negative"] = json::array();
    CHECK(svc.handle("POST", "/api/predict", body.dump()).status == 422);
    body = predict_body(t, "toy_0", 0.1);
    body["use_tta"] = "yes";
    CHECK(svc.handle("POST", "/api/predict", body.dump()).status == 422);
    CHECK(svc.handle("DELETE", "/api/images").status == 404);
}

TEST_CASE("predict on the toy model") {
    auto svc = toy_service(5);
    for (int i = 0; i < 5; ++i) {
        const auto t = toy::make_instance(static_cast<std::uint64_t>(i));
        const std::string id = "toy_" + std::to_string(i);
        const auto full = svc.handle("POST", "/api/predict", predict_body(t, id, 1.0).dump());
        REQUIRE(full.status == 200);
        const auto jf = json::parse(full.body);
        CHECK(jf["attention_before"] == jf["attention_after"]);
        CHECK(jf["predicted_class"] == "melanoma");
        CHECK(jf["selected_channels"] == json::array({0, 1}));

        const auto masked = svc.handle("POST", "/api/predict", predict_body(t, id, 0.5).dump());
        const auto jm = json::parse(masked.body);
        CHECK(jm["predicted_class"] == "benign");
        CHECK(jm["selected_channels"] == json::array({0}));
        const double p0 = jm["probabilities"][0], p1 = jm["probabilities"][1];
        CHECK(p0 + p1 == Catch::Approx(1.0).margin(1e-9));
        CHECK(jm["scores_summary"]["selected_min"] == jm["scores_summary"]["max"]);

        // Repeating the request is byte-identical.
        CHECK(svc.handle("POST", "/api/predict", predict_body(t, id, 0.5).dump()).body == masked.body);
    }
    CHECK(svc.cached_images() == 5);
}

TEST_CASE("feature cache does not change responses") {
    auto cached = toy_service(4);
    auto cfg = plain_config();
    cfg.cache_features = false;
    auto uncached = toy_service(4, cfg);
    for (int i = 0; i < 4; ++i) {
        const auto t = toy::make_instance(static_cast<std::uint64_t>(i));
        for (double keep : {0.5, 1.0}) {
            const auto body = predict_body(t, "toy_" + std::to_string(i), keep).dump();
            CHECK(cached.handle("POST", "/api/predict", body).body == uncached.handle("POST", "/api/predict", body).body);
        }
    }
    CHECK(uncached.cached_images() == 0);
}

TEST_CASE("use_tta averages the configured replicas") {
    auto cfg = plain_config();
    cfg.tta = AugmentationPolicy{};
    cfg.tta.replica_count = 4;
    auto svc = toy_service(1, cfg);
    const auto t = toy::make_instance(0);
    auto body = predict_body(t, "toy_0", 1.0);
    body["use_tta"] = true;
    const auto j = json::parse(svc.handle("POST", "/api/predict", body.dump()).body);
    const auto model = toy::model();
    const auto want = predict_tta(model, t.image, cfg.tta).probabilities;
    CHECK(j["probabilities"][1].get<double>() == Catch::Approx(want[1]).margin(1e-12));
}

TEST_CASE("annotations") {
    SECTION("round trip, last write wins") {
        auto svc = toy_service(2);
        const auto seeded = json::parse(svc.handle("GET", "/api/annotations/toy_1").body);
        CHECK(seeded["points"].size() == 1);

        const json a{{"image_id", "toy_1"}, {"points", {{{"row", 1}, {"col", 2}, {"type", "ruler"}}}}};
        REQUIRE(svc.handle("POST", "/api/annotations", a.dump()).status == 200);
        const json b{{"image_id", "toy_1"},
                     {"points", {{{"row", 3}, {"col", 4}, {"type", "ink_marking"}}, {{"row", 0}, {"col", 0}, {"type", "patch"}}}}};
        REQUIRE(svc.handle("POST", "/api/annotations", b.dump()).status == 200);
        const auto got = json::parse(svc.handle("GET", "/api/annotations/toy_1").body);
        CHECK(got == json::parse(dump_annotations({annotation_from_json(b, 0)}))[0]);
    }
    SECTION("validation") {
        auto svc = toy_service(2);
        CHECK(svc.handle("POST", "/api/annotations", R"({"image_id":"toy_0","points":[{"row":1,"col":1,"type":"smudge"}]})")
                  .status == 422);
        CHECK(svc.handle("POST", "/api/annotations", R"({"image_id":"toy_0","points":[{"row":99,"col":1,"type":"ruler"}]})")
                  .status == 422);
        CHECK(svc.handle("POST", "/api/annotations", R"({"image_id":"ghost","points":[]})").status == 404);
        CHECK(svc.handle("GET", "/api/annotations/ghost").status == 404);
    }
    SECTION("persisted across restarts") {
        const auto dir = fresh_dir("store");
        auto cfg = plain_config();
        cfg.annotation_store = dir / "annotations.json";
        const json a{{"image_id", "toy_0"}, {"points", {{{"row", 5}, {"col", 6}, {"type", "dark_corner"}}}}};
        {
            auto svc = toy_service(2, cfg);
            REQUIRE(svc.handle("POST", "/api/annotations", a.dump()).status == 200);
        }
        CHECK_FALSE(std::filesystem::exists(dir / "annotations.json.tmp"));
        auto restarted = toy_service(2, cfg);
        const auto got = json::parse(restarted.handle("GET", "/api/annotations/toy_0").body);
        REQUIRE(got["points"].size() == 1);
        CHECK(got["points"][0]["type"] == "dark_corner");
        CHECK(got["points"][0]["row"] == 5);
    }
}

TEST_CASE("service over a real socket") {
    auto svc = toy_service(2);
    httplib::Server server;
    svc.bind(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    const auto list = client.Get("/api/images");
    REQUIRE(list);
    CHECK(list->status == 200);
    CHECK(list->get_header_value("Content-Type") == "application/json");
    CHECK(json::parse(list->body).size() == 2);

    const auto t = toy::make_instance(1);
    const auto body = predict_body(t, "toy_1", 0.5).dump();
    const auto pred = client.Post("/api/predict", body, "application/json");
    REQUIRE(pred);
    CHECK(pred->status == 200);
    CHECK(pred->body == svc.handle("POST", "/api/predict", body).body);

    const auto missing = client.Get("/api/images/none");
    REQUIRE(missing);
    CHECK(missing->status == 404);

    server.stop();
    th.join();
}

TEST_CASE("service needs a model") {
    CHECK_THROWS_AS(Service(nullptr, {}), PreconditionError);
}
