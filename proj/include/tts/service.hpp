#pragma once
// HTTP/JSON front end for interactive selection. All request handling goes
// through Service::handle so it can be exercised without a socket; bind()
// mounts the same handler on an httplib server.
//
//   GET  /api/images                  [{image_id, artifact_flags, label?}]
//   GET  /api/images/{id}             {image_id, height, width, rgb, attention}
//   POST /api/predict                 see predict()
//   POST /api/annotations             {image_id, points:[{row, col, type}]}
//   GET  /api/annotations/{id}

#include "error.hpp"
#include "keypoints.hpp"
#include "model.hpp"
#include "selection.hpp"
#include "synthetic.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

namespace tts {

struct ServiceConfig {
    bool study_mode = false;
    bool cache_features = true;
    AugmentationPolicy tta;                   // used when a request sets use_tta
    std::filesystem::path annotation_store;  // empty: keep annotations in memory only
};

struct ApiResponse {
    int status = 200;
    std::string body;
};

struct CachedFeatures {
    FeatureMap native;
    FeatureMap upsampled;
};

struct Session {
    std::string session_id = "default";
    std::shared_ptr<const SplitModel> model;
    std::unordered_map<std::string, std::shared_ptr<const CachedFeatures>> cache;
    std::optional<KeypointSet> last_keypoints;
    std::optional<SelectionConfig> last_config;
};

namespace detail {

// Thrown inside handlers, mapped to an HTTP status.
struct HttpError : Error {
    int status;
    HttpError(int s, const std::string& what) : Error(what), status(s) {}
};

inline double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

inline nlohmann::json attention_json(const AttentionMap& a) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < a.size.height; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < a.size.width; ++c) row.push_back(round3(a.at(r, c)));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<Pixel> parse_points(const nlohmann::json& arr, const char* side) {
    if (!arr.is_array()) throw HttpError(422, std::string("keypoints.") + side + " must be an array of [row, col] pairs");
    std::vector<Pixel> out;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto& p = arr[i];
        if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer())
            throw HttpError(422, std::string(side) + " keypoint " + std::to_string(i) + " is not a [row, col] integer pair: " +
                                     p.dump());
        out.push_back({p[0].get<int>(), p[1].get<int>()});
    }
    return out;
}

inline double number_field(const nlohmann::json& req, const char* name, double fallback) {
    if (!req.contains(name)) return fallback;
    if (!req[name].is_number()) throw HttpError(422, std::string(name) + " must be a number");
    return req[name].get<double>();
}

} // namespace detail

class Service {
  public:
    Service(std::shared_ptr<const SplitModel> model, std::vector<SyntheticSample> corpus, ServiceConfig cfg = {})
        : cfg_(std::move(cfg)), corpus_(std::move(corpus)) {
        if (!model) throw PreconditionError("service needs a model");
        session_.model = std::move(model);
        std::sort(corpus_.begin(), corpus_.end(),
                  [](const SyntheticSample& a, const SyntheticSample& b) { return a.record.image_id < b.record.image_id; });
        for (std::size_t i = 0; i < corpus_.size(); ++i) index_[corpus_[i].record.image_id] = i;
        for (const auto& s : corpus_)
            if (!s.annotation.points.empty()) annotations_[s.record.image_id] = s.annotation;
        if (!cfg_.annotation_store.empty() && std::filesystem::exists(cfg_.annotation_store)) {
            annotations_.clear();
            for (auto& a : read_annotations(cfg_.annotation_store)) annotations_[a.image_id] = std::move(a);
        }
    }

    const ServiceConfig& config() const noexcept { return cfg_; }
    std::size_t cached_images() const {
        std::shared_lock lock(cache_mutex_);
        return session_.cache.size();
    }

    ApiResponse handle(const std::string& method, const std::string& path, const std::string& body = "") {
        try {
            if (method == "GET" && path == "/api/images") return ok(list_images());
            if (method == "GET" && path.starts_with("/api/images/")) return ok(image_detail(path.substr(12)));
            if (method == "POST" && path == "/api/predict") return ok(predict(parse_body(body)));
            if (method == "POST" && path == "/api/annotations") return ok(store_annotation(parse_body(body)));
            if (method == "GET" && path.starts_with("/api/annotations/")) return ok(get_annotation(path.substr(17)));
            return error(404, "no route for " + method + " " + path);
        } catch (const detail::HttpError& e) {
            return error(e.status, e.what());
        } catch (const std::exception& e) {
            return error(500, e.what());
        }
    }

    void bind(httplib::Server& server) {
        auto route = [this](const httplib::Request& req, httplib::Response& res) {
            const ApiResponse r = handle(req.method, req.path, req.body);
            res.status = r.status;
            res.set_content(r.body, "application/json");
        };
        server.Get(R"(/api/.*)", route);
        server.Post(R"(/api/.*)", route);
    }

  private:
    static ApiResponse ok(const nlohmann::json& j) { return {200, j.dump()}; }
    static ApiResponse error(int status, const std::string& msg) {
        return {status, nlohmann::json{{"error", msg}}.dump()};
    }

    static nlohmann::json parse_body(const std::string& body) {
        nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded()) throw detail::HttpError(400, "request body is not valid JSON");
        if (!j.is_object()) throw detail::HttpError(400, "request body must be a JSON object");
        return j;
    }

    const SyntheticSample& sample(const std::string& id) const {
        const auto it = index_.find(id);
        if (it == index_.end()) throw detail::HttpError(404, "unknown image '" + id + "'");
        return corpus_[it->second];
    }

    static std::string image_id_field(const nlohmann::json& req) {
        if (!req.contains("image_id") || !req["image_id"].is_string())
            throw detail::HttpError(400, "missing string field image_id");
        return req["image_id"].get<std::string>();
    }

    std::shared_ptr<const CachedFeatures> features(const SyntheticSample& s) {
        const auto& id = s.record.image_id;
        if (cfg_.cache_features) {
            std::shared_lock lock(cache_mutex_);
            if (auto it = session_.cache.find(id); it != session_.cache.end()) return it->second;
        }
        FeatureMap native = session_.model->extract(s.image);
        FeatureMap up = upsample_to_image(native);
        auto entry = std::make_shared<const CachedFeatures>(CachedFeatures{std::move(native), std::move(up)});
        if (cfg_.cache_features) {
            std::unique_lock lock(cache_mutex_);
            session_.cache.try_emplace(id, entry);
        }
        return entry;
    }

    nlohmann::json list_images() const {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& s : corpus_) {
            nlohmann::json flags = nlohmann::json::object();
            for (Artifact a : kAllArtifacts) flags[std::string(artifact_name(a))] = s.record.has(a);
            nlohmann::json e{{"image_id", s.record.image_id}, {"artifact_flags", std::move(flags)}};
            if (cfg_.study_mode) e["label"] = label_name(s.record.label);
            out.push_back(std::move(e));
        }
        return out;
    }

    nlohmann::json image_detail(const std::string& id) {
        const auto& s = sample(id);
        nlohmann::json rgb = nlohmann::json::array();
        for (int r = 0; r < s.image.height(); ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (int c = 0; c < s.image.width(); ++c) {
                nlohmann::json px = nlohmann::json::array();
                for (int k = 0; k < s.image.channels(); ++k) px.push_back(detail::to_byte(s.image.at(k, r, c)));
                row.push_back(std::move(px));
            }
            rgb.push_back(std::move(row));
        }
        return {{"image_id", id},
                {"height", s.image.height()},
                {"width", s.image.width()},
                {"rgb", std::move(rgb)},
                {"attention", detail::attention_json(attention_map(*session_.model, s.image))}};
    }

    // {image_id, keypoints:{positive:[[r,c]..], negative:[[r,c]..]}, alpha,
    //  keep_fraction, use_tta} -> {probabilities, predicted_class,
    //  selected_channels, attention_before, attention_after, scores_summary}
    nlohmann::json predict(const nlohmann::json& req) {
        const auto& s = sample(image_id_field(req));
        if (!req.contains("keypoints") || !req["keypoints"].is_object())
            throw detail::HttpError(422, "keypoints must be an object with positive and negative lists");
        const auto& kp = req["keypoints"];
        KeypointSet keys;
        keys.positive = detail::parse_points(kp.value("positive", nlohmann::json::array()), "positive");
        keys.negative = detail::parse_points(kp.value("negative", nlohmann::json::array()), "negative");
        SelectionConfig cfg{detail::number_field(req, "alpha", 0.4), detail::number_field(req, "keep_fraction", 0.10)};
        bool use_tta = true;
        if (req.contains("use_tta")) {
            if (!req["use_tta"].is_boolean()) throw detail::HttpError(422, "use_tta must be a boolean");
            use_tta = req["use_tta"].get<bool>();
        }
        try {
            cfg.validate();
            keys.validate(s.image.size());
        } catch (const Error& e) {
            throw detail::HttpError(422, e.what());
        }

        const auto feats = features(s);
        const auto scores = score_channels(feats->upsampled, keys, cfg);
        const auto mask = select_channels(scores, cfg);
        const SplitModel& model = *session_.model;
        std::vector<double> probs;
        if (use_tta) {
            const auto replicas = replica_features(model, s.image, cfg_.tta);
            probs = classify_replicas(model, replicas, &mask);
        } else {
            probs = model.classify(apply_mask(feats->native, mask));
        }
        {
            std::unique_lock lock(cache_mutex_);
            session_.last_keypoints = keys;
            session_.last_config = cfg;
        }

        const int k = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        double selected_min = std::numeric_limits<double>::infinity();
        for (int c : mask.selected) selected_min = std::min<double>(selected_min, scores.scores[c]);
        const auto [lo, hi] = std::minmax_element(scores.scores.begin(), scores.scores.end());
        return {{"probabilities", probs},
                {"predicted_class", k < 2 ? std::string(label_name(static_cast<Label>(k))) : std::to_string(k)},
                {"selected_channels", mask.selected},
                {"attention_before", detail::attention_json(attention_map(model, s.image))},
                {"attention_after", detail::attention_json(attention_map(model, s.image, &mask))},
                {"scores_summary", {{"min", *lo}, {"max", *hi}, {"selected_min", selected_min}}}};
    }

    nlohmann::json store_annotation(const nlohmann::json& req) {
        const auto& s = sample(image_id_field(req));
        ArtifactAnnotation ann;
        try {
            ann = annotation_from_json(req, 0);
            ann.validate(s.image.size());
        } catch (const Error& e) {
            throw detail::HttpError(422, e.what());
        }
        std::lock_guard lock(store_mutex_);
        annotations_[ann.image_id] = ann;
        persist();
        return to_json(ann);
    }

    nlohmann::json get_annotation(const std::string& id) const {
        sample(id);
        std::lock_guard lock(store_mutex_);
        const auto it = annotations_.find(id);
        return to_json(it != annotations_.end() ? it->second : ArtifactAnnotation{id, {}});
    }

    // Caller holds store_mutex_. Write to a sibling file, then rename over the store.
    void persist() const {
        if (cfg_.annotation_store.empty()) return;
        std::vector<ArtifactAnnotation> all;
        for (const auto& [id, a] : annotations_) all.push_back(a);
        auto tmp = cfg_.annotation_store;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            if (!out) throw Error("cannot write annotation store " + tmp.string());
            out << dump_annotations(all);
            out.flush();
            if (!out) throw Error("short write to " + tmp.string());
        }
        std::filesystem::rename(tmp, cfg_.annotation_store);
    }

    ServiceConfig cfg_;
    std::vector<SyntheticSample> corpus_;
    std::map<std::string, std::size_t> index_;
    Session session_;
    mutable std::shared_mutex cache_mutex_;
    std::map<std::string, ArtifactAnnotation> annotations_;
    mutable std::mutex store_mutex_;
};

} // namespace tts
