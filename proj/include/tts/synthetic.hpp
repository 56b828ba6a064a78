#pragma once
// Planted-artifact dermoscopy stand-in.
//
// Each image is skin with one lesion whose darkness and speckle texture are
// driven by a latent malignancy score (higher for melanoma, overlapping
// between classes). Acquisition artifacts are planted independently of the
// label: dark corners, a ruler strip, an ink stroke and a colour patch. Trap
// splits then correlate them with the label. Every sample ships with its
// lesion mask and artifact keypoint annotations.
//
// On disk: metadata.csv, images/<id>.ppm, masks/<id>.pgm, annotations.json.

#include "artifacts.hpp"
#include "image.hpp"
#include "keypoints.hpp"
#include "trapset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace tts {

struct CorpusConfig {
    int count = 500;
    int image_size = 32;
    double melanoma_fraction = 0.5;
    double artifact_rate = 0.35;  // per artifact type
    double malignancy_melanoma = 0.64;
    double malignancy_benign = 0.36;
    double malignancy_spread = 0.17;
    double halo_melanoma = 0.65;
    double halo_benign = 0.30;
    double halo_spread = 0.25;
    double halo_width = 4.0;  // pixels at 32 px resolution
    int points_per_artifact = 6;
    std::uint64_t seed = 1;
};

struct SyntheticSample {
    SampleRecord record;
    Image image;
    SegmentationMask mask;
    ArtifactAnnotation annotation;
};

namespace detail {

inline std::string sample_id(int i) {
    std::string s = std::to_string(i);
    return "img_" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

inline void add_points(ArtifactAnnotation& ann, std::vector<Pixel> pool, Artifact type, int n, std::mt19937_64& rng) {
    if (pool.empty()) return;
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int i = 0; i < n && i < static_cast<int>(pool.size()); ++i) ann.points.push_back({pool[static_cast<std::size_t>(i)], type});
}

} // namespace detail

inline SyntheticSample render_sample(int index, Label label, const std::array<bool, kArtifactCount>& artifacts,
                                     const CorpusConfig& cfg, std::mt19937_64& rng) {
    const int S = cfg.image_size;
    const double scale = S / 32.0;
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    SyntheticSample out;
    out.record.image_id = detail::sample_id(index);
    out.record.label = label;
    out.record.artifacts = artifacts;
    out.annotation.image_id = out.record.image_id;

    Image& img = out.image = Image(3, S, S);
    const std::array<double, 3> skin = {0.82 + 0.04 * gauss(rng), 0.62 + 0.04 * gauss(rng), 0.52 + 0.04 * gauss(rng)};
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) img.at(c, y, x) = static_cast<float>(skin[c] + 0.015 * gauss(rng));

    // Lesion: irregular ellipse, colour and speckle set by malignancy.
    const double mu = label == Label::melanoma ? cfg.malignancy_melanoma : cfg.malignancy_benign;
    const double m = std::clamp(mu + cfg.malignancy_spread * gauss(rng), 0.0, 1.0);
    const double cy = S / 2.0 - 0.5 + (uni(rng) * 4 - 2) * scale;
    const double cx = S / 2.0 - 0.5 + (uni(rng) * 4 - 2) * scale;
    const double ry = (5.5 + 2.5 * uni(rng)) * scale;
    const double rx = (5.5 + 2.5 * uni(rng)) * scale;
    const double wobble = 0.05 + 0.15 * m;
    const double phase = uni(rng) * 6.283185307179586;
    const std::array<double, 3> benign_col = {0.62, 0.42, 0.30};
    const std::array<double, 3> mel_col = {0.28, 0.17, 0.15};
    const double speckle = 0.03 + 0.20 * m;

    out.mask = SegmentationMask::filled(S, S, 0);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const double dy = (y - cy) / ry, dx = (x - cx) / rx;
            const double theta = std::atan2(dy, dx);
            const double r = std::sqrt(dy * dy + dx * dx);
            if (r > 1.0 + wobble * std::sin(3.0 * theta + phase)) continue;
            out.mask(y, x) = 1;
            const double dot = uni(rng) < 0.25 * m ? -0.15 : 0.0;
            const double n = speckle * gauss(rng);
            for (int c = 0; c < 3; ++c) {
                const double base = benign_col[static_cast<std::size_t>(c)] +
                                    m * (mel_col[static_cast<std::size_t>(c)] - benign_col[static_cast<std::size_t>(c)]);
                img.at(c, y, x) = static_cast<float>(base + n + dot + (c == 2 ? -0.5 * dot : 0.0));
            }
        }

    // Perilesional erythema: a reddish rim whose strength is an independent,
    // label-correlated cue living in healthy skin rather than the lesion.
    const double halo_mu = label == Label::melanoma ? cfg.halo_melanoma : cfg.halo_benign;
    const double halo = std::clamp(halo_mu + cfg.halo_spread * gauss(rng), 0.0, 1.0);
    const double rim = cfg.halo_width * scale;
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            if (out.mask.at(y, x)) continue;
            const double dy = (y - cy) / ry, dx = (x - cx) / rx;
            const double outside = (std::sqrt(dy * dy + dx * dx) - 1.0 - wobble) * std::min(rx, ry);
            if (outside > rim) continue;
            const double k = halo * (1.0 - std::max(outside, 0.0) / rim);
            img.at(0, y, x) += static_cast<float>(0.10 * k);
            img.at(1, y, x) -= static_cast<float>(0.12 * k);
            img.at(2, y, x) -= static_cast<float>(0.06 * k);
        }

    auto background = [&](int y, int x) { return !out.mask.at(y, x); };

    if (artifacts[static_cast<std::size_t>(index_of(Artifact::dark_corner))]) {
        const double R = 0.53 * S;
        std::vector<Pixel> pool;
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) {
                const double d = std::hypot(y - (S - 1) / 2.0, x - (S - 1) / 2.0);
                if (d <= R) continue;
                const double k = std::clamp((d - R) / (1.5 * scale), 0.0, 1.0);
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(img.at(c, y, x) * (1.0 - 0.85 * k));
                if (k >= 1.0 && background(y, x)) pool.push_back({y, x});
            }
        detail::add_points(out.annotation, std::move(pool), Artifact::dark_corner, cfg.points_per_artifact, rng);
    }
    if (artifacts[static_cast<std::size_t>(index_of(Artifact::ruler))]) {
        const int band = std::max(2, static_cast<int>(std::lround(3 * scale)));
        const bool top = uni(rng) < 0.5;
        const int offset = static_cast<int>(uni(rng) * 3);
        std::vector<Pixel> pool;
        for (int k = 0; k < band; ++k) {
            const int y = top ? k : S - 1 - k;
            for (int x = 0; x < S; ++x) {
                const bool tick = (x + offset) % 3 == 0 && k < band - 1;
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = tick ? 0.08f : 0.93f;
                if (background(y, x)) pool.push_back({y, x});
            }
        }
        detail::add_points(out.annotation, std::move(pool), Artifact::ruler, cfg.points_per_artifact, rng);
    }
    if (artifacts[static_cast<std::size_t>(index_of(Artifact::ink_marking))]) {
        const bool left = uni(rng) < 0.5;
        const int len = static_cast<int>(std::lround((9 + 4 * uni(rng)) * scale));
        const int y0 = static_cast<int>(uni(rng) * (S - len));
        const int x0 = left ? static_cast<int>(1 * scale) : S - 1 - static_cast<int>(3 * scale);
        const int slant = uni(rng) < 0.5 ? 1 : -1;
        std::vector<Pixel> pool;
        for (int t = 0; t < len; ++t) {
            const int y = y0 + t;
            const int xc = x0 + slant * (t / std::max(1, len / 2));
            for (int w = 0; w < std::max(2, static_cast<int>(2 * scale)); ++w) {
                const int x = std::clamp(xc + w, 0, S - 1);
                img.at(0, y, x) = 0.42f;
                img.at(1, y, x) = 0.18f;
                img.at(2, y, x) = 0.62f;
                if (background(y, x)) pool.push_back({y, x});
            }
        }
        detail::add_points(out.annotation, std::move(pool), Artifact::ink_marking, cfg.points_per_artifact, rng);
    }
    if (artifacts[static_cast<std::size_t>(index_of(Artifact::patch))]) {
        const int side = std::max(3, static_cast<int>(std::lround(5 * scale)));
        const int corner = static_cast<int>(uni(rng) * 4);
        const int y0 = corner < 2 ? 1 : S - 1 - side;
        const int x0 = corner % 2 == 0 ? 1 : S - 1 - side;
        const std::array<float, 3> col = uni(rng) < 0.5 ? std::array<float, 3>{0.20f, 0.72f, 0.36f}
                                                         : std::array<float, 3>{0.22f, 0.40f, 0.88f};
        std::vector<Pixel> pool;
        for (int y = y0; y < y0 + side; ++y)
            for (int x = x0; x < x0 + side; ++x) {
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[static_cast<std::size_t>(c)];
                if (background(y, x)) pool.push_back({y, x});
            }
        detail::add_points(out.annotation, std::move(pool), Artifact::patch, cfg.points_per_artifact, rng);
    }

    for (float& v : img.data()) v = std::clamp(v, 0.0f, 1.0f);
    out.image = quantize_8bit(std::move(out.image));
    return out;
}

inline std::vector<SyntheticSample> generate_corpus(const CorpusConfig& cfg) {
    if (cfg.count < 4) throw ConfigError("corpus needs at least 4 samples");
    if (cfg.image_size < 16) throw ConfigError("corpus images must be at least 16 pixels wide");
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<SyntheticSample> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    const int n_mel = static_cast<int>(std::lround(cfg.melanoma_fraction * cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        const Label label = i < n_mel ? Label::melanoma : Label::benign;
        std::array<bool, kArtifactCount> arts{};
        for (Artifact a : kAllArtifacts)
            if (is_keypoint_annotatable(a)) arts[static_cast<std::size_t>(index_of(a))] = uni(rng) < cfg.artifact_rate;
        out.push_back(render_sample(i, label, arts, cfg, rng));
    }
    return out;
}

inline std::vector<SampleRecord> records_of(const std::vector<SyntheticSample>& samples) {
    std::vector<SampleRecord> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.record);
    return out;
}

inline void write_corpus(const std::vector<SyntheticSample>& samples, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    std::vector<ArtifactAnnotation> anns;
    for (const auto& s : samples) {
        write_pnm(s.image, dir / "images" / (s.record.image_id + ".ppm"));
        write_mask(s.mask, dir / "masks" / (s.record.image_id + ".pgm"));
        if (!s.annotation.points.empty()) anns.push_back(s.annotation);
    }
    write_metadata_csv(records_of(samples), dir / "metadata.csv");
    write_annotations(anns, dir / "annotations.json");
}

// Missing masks load as empty masks; missing annotations as empty point lists.
inline std::vector<SyntheticSample> read_corpus(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::vector<SyntheticSample> out;
    std::map<std::string, ArtifactAnnotation> anns;
    if (fs::exists(dir / "annotations.json"))
        for (auto& a : read_annotations(dir / "annotations.json")) anns[a.image_id] = a;
    for (auto& r : read_metadata_csv(dir / "metadata.csv")) {
        SyntheticSample s;
        s.image = read_pnm(dir / "images" / (r.image_id + ".ppm"));
        const auto mask_path = dir / "masks" / (r.image_id + ".pgm");
        if (fs::exists(mask_path)) s.mask = read_mask(mask_path);
        auto it = anns.find(r.image_id);
        s.annotation = it != anns.end() ? it->second : ArtifactAnnotation{r.image_id, {}};
        s.record = std::move(r);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace tts
