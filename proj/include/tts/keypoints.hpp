#pragma once
// Keypoint sources: sampling from segmentation masks or artifact
// annotations, plus the artifact-annotation JSON format.
//
// Annotation file: one JSON array per split,
//   [{"image_id": "...", "points": [{"row": r, "col": c, "type": "ruler"}, ...]}, ...]
// with type restricted to dark_corner, ruler, ink_marking, patch.

#include "artifacts.hpp"
#include "error.hpp"
#include "geometry.hpp"
#include "image.hpp"
#include "selection.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace tts {

// Binary lesion mask, 1 = foreground.
class SegmentationMask {
  public:
    SegmentationMask() = default;
    SegmentationMask(int height, int width, std::vector<std::uint8_t> values)
        : height_(height), width_(width), values_(std::move(values)) {
        if (height < 1 || width < 1) throw ShapeError("mask dimensions must be >= 1");
        if (values_.size() != static_cast<std::size_t>(height) * width)
            throw ShapeError("mask holds " + std::to_string(values_.size()) + " values, expected " +
                             std::to_string(static_cast<std::size_t>(height) * width));
        for (auto& v : values_)
            if (v > 1) throw ShapeError("mask values must be 0 or 1");
    }

    static SegmentationMask filled(int height, int width, std::uint8_t value) {
        return {height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, value)};
    }

    // 8-bit single-channel image thresholded at 128.
    static SegmentationMask from_gray(const Image& gray) {
        if (gray.channels() != 1) throw ShapeError("mask image must have a single channel");
        std::vector<std::uint8_t> v(gray.data().size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::to_byte(gray.data()[i]) >= 128 ? 1 : 0;
        return {gray.height(), gray.width(), std::move(v)};
    }

    Image to_gray() const {
        Image img(1, height_, width_);
        for (std::size_t i = 0; i < values_.size(); ++i) img.data()[i] = values_[i] ? 1.0f : 0.0f;
        return img;
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    ImageSize size() const noexcept { return {height_, width_}; }
    bool at(int row, int col) const { return values_[static_cast<std::size_t>(row) * width_ + col] != 0; }
    bool at(Pixel p) const { return at(p.row, p.col); }
    std::uint8_t& operator()(int row, int col) { return values_[static_cast<std::size_t>(row) * width_ + col]; }

    std::vector<Pixel> pixels_with(bool foreground) const {
        std::vector<Pixel> out;
        for (int r = 0; r < height_; ++r)
            for (int c = 0; c < width_; ++c)
                if (at(r, c) == foreground) out.push_back({r, c});
        return out;
    }

    friend bool operator==(const SegmentationMask&, const SegmentationMask&) = default;

  private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> values_;
};

inline SegmentationMask read_mask(const std::filesystem::path& path) {
    return SegmentationMask::from_gray(read_pnm(path));
}

inline void write_mask(const SegmentationMask& mask, const std::filesystem::path& path) {
    write_pnm(mask.to_gray(), path);
}

struct ArtifactPoint {
    Pixel pixel;
    Artifact type = Artifact::dark_corner;
    friend bool operator==(const ArtifactPoint&, const ArtifactPoint&) = default;
};

struct ArtifactAnnotation {
    std::string image_id;
    std::vector<ArtifactPoint> points;

    void validate(ImageSize image) const {
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (!is_keypoint_annotatable(points[i].type))
                throw PreconditionError("image " + image_id + ": artifact type '" +
                                        std::string(artifact_name(points[i].type)) +
                                        "' is not keypoint-annotatable");
            if (!image.contains(points[i].pixel.row, points[i].pixel.col))
                throw CoordinateError("image " + image_id + ": artifact point " + std::to_string(i) +
                                      " " + to_string(points[i].pixel) + " lies outside the " +
                                      to_string(image) + " image");
        }
    }

    friend bool operator==(const ArtifactAnnotation&, const ArtifactAnnotation&) = default;
};

namespace detail {

// First `n` elements of a seeded partial Fisher-Yates shuffle.
inline std::vector<Pixel> draw_without_replacement(std::vector<Pixel> pool, int n, std::mt19937_64& rng) {
    for (int i = 0; i < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), pool.size() - 1);
        std::swap(pool[static_cast<std::size_t>(i)], pool[pick(rng)]);
    }
    pool.resize(static_cast<std::size_t>(n));
    return pool;
}

} // namespace detail

// n positives uniformly from the lesion, n negatives uniformly from the
// background, both without replacement.
inline KeypointSet sample_from_mask(const SegmentationMask& mask, int n_per_side, std::uint64_t seed) {
    if (n_per_side < 1) throw PreconditionError("n_per_side must be >= 1");
    auto fg = mask.pixels_with(true);
    auto bg = mask.pixels_with(false);
    if (fg.size() < static_cast<std::size_t>(n_per_side) || bg.size() < static_cast<std::size_t>(n_per_side))
        throw SamplingError("cannot draw " + std::to_string(n_per_side) +
                            " keypoints per side: mask has " + std::to_string(fg.size()) +
                            " foreground and " + std::to_string(bg.size()) + " background pixels");
    std::mt19937_64 rng(seed);
    KeypointSet keys;
    keys.positive = detail::draw_without_replacement(std::move(fg), n_per_side, rng);
    keys.negative = detail::draw_without_replacement(std::move(bg), n_per_side, rng);
    keys.artifact_tags.assign(keys.negative.size(), KeypointTag::background);
    return keys;
}

// Negatives come from the annotated artifact points (with replacement only
// when the request exceeds the pool); positives from the lesion, skipping any
// pixel already used as a negative.
inline KeypointSet sample_from_artifacts(const SegmentationMask& mask, const ArtifactAnnotation& ann,
                                         int n_per_side, std::uint64_t seed) {
    if (n_per_side < 1) throw PreconditionError("n_per_side must be >= 1");
    if (ann.points.empty())
        throw SamplingError("image " + ann.image_id +
                            " has no artifact points; use sample_from_mask for background negatives");
    ann.validate(mask.size());

    std::mt19937_64 rng(seed);
    std::vector<ArtifactPoint> chosen;
    if (static_cast<std::size_t>(n_per_side) <= ann.points.size()) {
        std::vector<std::size_t> idx(ann.points.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (int i = 0; i < n_per_side; ++i) {
            std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), idx.size() - 1);
            std::swap(idx[static_cast<std::size_t>(i)], idx[pick(rng)]);
            chosen.push_back(ann.points[idx[static_cast<std::size_t>(i)]]);
        }
    } else {
        std::uniform_int_distribution<std::size_t> pick(0, ann.points.size() - 1);
        for (int i = 0; i < n_per_side; ++i) chosen.push_back(ann.points[pick(rng)]);
    }

    std::set<Pixel> taken;
    KeypointSet keys;
    for (const auto& p : chosen) {
        keys.negative.push_back(p.pixel);
        keys.artifact_tags.push_back(*to_keypoint_tag(p.type));
        taken.insert(p.pixel);
    }
    std::vector<Pixel> fg;
    for (const Pixel& p : mask.pixels_with(true))
        if (!taken.contains(p)) fg.push_back(p);
    if (fg.size() < static_cast<std::size_t>(n_per_side))
        throw SamplingError("cannot draw " + std::to_string(n_per_side) + " positive keypoints: only " +
                            std::to_string(fg.size()) + " eligible foreground pixels");
    keys.positive = detail::draw_without_replacement(std::move(fg), n_per_side, rng);
    return keys;
}

inline nlohmann::json to_json(const ArtifactAnnotation& ann) {
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : ann.points)
        points.push_back({{"row", p.pixel.row}, {"col", p.pixel.col}, {"type", artifact_name(p.type)}});
    return {{"image_id", ann.image_id}, {"points", std::move(points)}};
}

// `record` is the position in the enclosing array, used in error messages.
inline ArtifactAnnotation annotation_from_json(const nlohmann::json& j, std::size_t record) {
    const std::string where = "record " + std::to_string(record);
    if (!j.is_object()) throw ParseError(where + ": expected an object");
    if (!j.contains("image_id") || !j["image_id"].is_string())
        throw ParseError(where + ": missing string field image_id");
    ArtifactAnnotation ann;
    ann.image_id = j["image_id"].get<std::string>();
    const std::string id_where = where + " (image " + ann.image_id + ")";
    if (!j.contains("points") || !j["points"].is_array())
        throw ParseError(id_where + ": missing array field points");
    std::size_t i = 0;
    for (const auto& p : j["points"]) {
        const std::string pw = id_where + ", point " + std::to_string(i++);
        if (!p.is_object() || !p.contains("row") || !p.contains("col") || !p.contains("type"))
            throw ParseError(pw + ": expected {row, col, type}");
        if (!p["row"].is_number_integer() || !p["col"].is_number_integer())
            throw ParseError(pw + ": row and col must be integers");
        if (!p["type"].is_string()) throw ParseError(pw + ": type must be a string");
        const auto type_name = p["type"].get<std::string>();
        const auto type = parse_artifact(type_name);
        if (!type || !is_keypoint_annotatable(*type))
            throw ParseError(pw + ": unsupported artifact type '" + type_name +
                             "' (expected dark_corner, ruler, ink_marking or patch)");
        const int row = p["row"].get<int>();
        const int col = p["col"].get<int>();
        if (row < 0 || col < 0) throw ParseError(pw + ": negative coordinate");
        ann.points.push_back({{row, col}, *type});
    }
    return ann;
}

inline std::vector<ArtifactAnnotation> parse_annotations(const std::string& text) {
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return {};
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("annotation file is not valid JSON: ") + e.what());
    }
    if (!doc.is_array()) throw ParseError("annotation file must hold a JSON array");
    std::vector<ArtifactAnnotation> out;
    out.reserve(doc.size());
    for (std::size_t i = 0; i < doc.size(); ++i) out.push_back(annotation_from_json(doc[i], i));
    return out;
}

inline std::string dump_annotations(const std::vector<ArtifactAnnotation>& anns) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& a : anns) doc.push_back(to_json(a));
    return doc.dump(2) + "\n";
}

inline std::vector<ArtifactAnnotation> read_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open annotation file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return parse_annotations(buf.str());
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

inline void write_annotations(const std::vector<ArtifactAnnotation>& anns,
                              const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write annotation file " + path.string());
    out << dump_annotations(anns);
}

} // namespace tts
