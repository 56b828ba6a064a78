#pragma once
// Shared by the unit tests and the acceptance binary: brute-force oracles
// written with explicit loops, and a hand-built two-channel model.

#include <tts/model.hpp>
#include <tts/selection.hpp>
#include <tts/synthetic.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <set>
#include <vector>

namespace oracle {

// ceil(num/den * C) for the rational keep fractions used in fuzzing.
inline int keep_count(int num, int den, int channels) { return (num * channels + den - 1) / den; }

// Bilinear, corner-aligned value of channel c at image pixel (y, x), evaluated
// from the four surrounding feature cells.
inline float bilinear_at(const tts::FeatureMap& f, int c, int y, int x) {
    const int H = f.source_size().height, W = f.source_size().width;
    const int h = f.height(), w = f.width();
    double sy = 0.0, sx = 0.0;
    if (H > 1 && h > 1) sy = static_cast<double>(y) * (h - 1) / (H - 1);
    if (W > 1 && w > 1) sx = static_cast<double>(x) * (w - 1) / (W - 1);
    int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
    if (y0 > h - 1) y0 = h - 1;
    if (x0 > w - 1) x0 = w - 1;
    const int y1 = y0 + 1 < h ? y0 + 1 : h - 1;
    const int x1 = x0 + 1 < w ? x0 + 1 : w - 1;
    const double ty = sy - y0, tx = sx - x0;
    const double v00 = f.at(c, y0, x0), v01 = f.at(c, y0, x1), v10 = f.at(c, y1, x0), v11 = f.at(c, y1, x1);
    const double top = v00 + tx * (v01 - v00);
    const double bottom = v10 + tx * (v11 - v10);
    return static_cast<float>(top + ty * (bottom - top));
}

struct Selection {
    std::vector<float> pos, neg, score;
    std::vector<int> selected;  // ascending
    tts::FeatureMap masked = tts::FeatureMap::zeros(1, 1, 1, {1, 1});
};

// Full pipeline with explicit loops and a full sort. Float accumulation left to
// right, as the score definition prescribes.
inline Selection select(const tts::FeatureMap& f, const tts::KeypointSet& keys, double alpha, int keep) {
    Selection out;
    const int C = f.channels();
    const float a = static_cast<float>(alpha);
    const float b = 1.0f - a;
    for (int c = 0; c < C; ++c) {
        float sp = 0.0f, sn = 0.0f;
        for (std::size_t i = 0; i < keys.positive.size(); ++i)
            sp += bilinear_at(f, c, keys.positive[i].row, keys.positive[i].col);
        for (std::size_t i = 0; i < keys.negative.size(); ++i)
            sn += bilinear_at(f, c, keys.negative[i].row, keys.negative[i].col);
        out.pos.push_back(sp);
        out.neg.push_back(sn);
        out.score.push_back(a * sp - b * sn);
    }
    std::vector<int> order;
    for (int c = 0; c < C; ++c) order.push_back(c);
    std::sort(order.begin(), order.end(), [&](int i, int j) {
        if (out.score[i] != out.score[j]) return out.score[i] > out.score[j];
        return i < j;
    });
    out.selected.assign(order.begin(), order.begin() + keep);
    std::sort(out.selected.begin(), out.selected.end());

    std::vector<float> v(f.values().begin(), f.values().end());
    for (int c = 0; c < C; ++c) {
        bool keep_c = false;
        for (int s : out.selected) keep_c = keep_c || s == c;
        if (keep_c) continue;
        for (int y = 0; y < f.height(); ++y)
            for (int x = 0; x < f.width(); ++x) v[(static_cast<std::size_t>(c) * f.height() + y) * f.width() + x] = 0.0f;
    }
    out.masked = tts::FeatureMap(C, f.height(), f.width(), f.source_size(), std::move(v));
    return out;
}

// O(n^2) pairwise AUC: fraction of (positive, negative) pairs ranked correctly,
// ties worth one half. Returned as the exact rational wins2 / (2 * P * N).
inline double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
    long long wins2 = 0, pairs = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] != 0) continue;
            ++pairs;
            if (s[i] > s[j])
                wins2 += 2;
            else if (s[i] == s[j])
                wins2 += 1;
        }
    }
    return static_cast<double>(wins2) / (2.0 * static_cast<double>(pairs));
}

// Phi from the 2x2 table, no shortcuts.
inline double phi(const std::vector<int>& x, const std::vector<int>& y) {
    double n11 = 0, n10 = 0, n01 = 0, n00 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] && y[i]) ++n11;
        if (x[i] && !y[i]) ++n10;
        if (!x[i] && y[i]) ++n01;
        if (!x[i] && !y[i]) ++n00;
    }
    const double den = std::sqrt((n11 + n10) * (n01 + n00) * (n11 + n01) * (n10 + n00));
    return den == 0.0 ? 0.0 : (n11 * n00 - n10 * n01) / den;
}

// Random selection instance within the fuzzing envelope.
struct Instance {
    tts::FeatureMap fmap = tts::FeatureMap::zeros(1, 1, 1, {1, 1});
    tts::KeypointSet keys;
};

inline Instance random_instance(std::mt19937_64& rng, int max_c = 32, int max_hw = 8, int max_keys = 8) {
    auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    const int C = uni(1, max_c), h = uni(1, max_hw), w = uni(1, max_hw);
    const tts::ImageSize img{uni(2, 4 * max_hw), uni(2, 4 * max_hw)};
    std::normal_distribution<float> g(0.0f, 1.0f);
    std::vector<float> v(static_cast<std::size_t>(C) * h * w);
    for (auto& x : v) x = g(rng);
    // Occasional exact ties between channels.
    if (C > 1 && uni(0, 3) == 0) {
        const int src = uni(0, C - 1), dst = uni(0, C - 1);
        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(src) * h * w, h * w,
                    v.begin() + static_cast<std::ptrdiff_t>(dst) * h * w);
    }
    Instance inst{tts::FeatureMap(C, h, w, img, std::move(v)), {}};
    const int n = std::min(uni(1, max_keys), static_cast<int>(img.area() / 2));
    std::set<tts::Pixel> used;
    auto fresh = [&] {
        for (;;) {
            tts::Pixel p{uni(0, img.height - 1), uni(0, img.width - 1)};
            if (used.insert(p).second) return p;
        }
    };
    for (int i = 0; i < n; ++i) inst.keys.positive.push_back(fresh());
    for (int i = 0; i < n; ++i) inst.keys.negative.push_back(fresh());
    return inst;
}

} // namespace oracle

namespace toy {

// 16x16 images on a 4x4 grid of 4-pixel cells. Red marks the lesion, green the
// planted artifact. Channel 0 is the mean red of a cell, channel 1 four times
// its mean green. Class 1 leans on the artifact channel, class 0 on the lesion.
constexpr int kSide = 16;
constexpr int kCell = 4;
constexpr int kGrid = kSide / kCell;

struct Cell {
    int row, col;
    friend bool operator==(const Cell&, const Cell&) = default;
};

struct Instance {
    tts::Image image{3, kSide, kSide};
    std::vector<Cell> lesion, artifact;
    tts::KeypointSet keys;  // one positive on the lesion, one negative on the artifact
    tts::SegmentationMask mask = tts::SegmentationMask::filled(kSide, kSide, 0);
    tts::ArtifactAnnotation annotation;

    bool in(const std::vector<Cell>& cells, tts::Pixel p) const {
        return std::any_of(cells.begin(), cells.end(),
                           [&](const Cell& c) { return p.row / kCell == c.row && p.col / kCell == c.col; });
    }
};

// Feature-grid cell i lands exactly on pixel 5i after corner-aligned upsampling.
inline tts::Pixel sample_pixel(const Cell& c) { return {c.row * (kSide - 1) / (kGrid - 1), c.col * (kSide - 1) / (kGrid - 1)}; }

inline tts::FeatureMap extract(const tts::Image& img) {
    std::vector<float> v(2 * kGrid * kGrid, 0.0f);
    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x) {
            const std::size_t cell = static_cast<std::size_t>(y / kCell) * kGrid + x / kCell;
            v[cell] += img.at(0, y, x) / (kCell * kCell);
            v[kGrid * kGrid + cell] += 4.0f * img.at(1, y, x) / (kCell * kCell);
        }
    return tts::FeatureMap(2, kGrid, kGrid, {kSide, kSide}, std::move(v));
}

inline tts::SplitModel model() {
    tts::nn::LinearHead head;
    head.classes = 2;
    head.channels = 2;
    head.weight = {1.0f, 0.0f, 0.2f, 1.0f};
    head.bias = {0.0f, 0.0f};
    return tts::SplitModel(extract, std::move(head), {"toy-two-channel", 2, {kGrid, kGrid}, {kSide, kSide}});
}

// Lesion: a 1x1..2x2 block; artifact: a 1x1 or 1x2 block elsewhere.
inline Instance make_instance(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    Instance t;
    for (;;) {
        t.lesion.clear();
        t.artifact.clear();
        const int lh = uni(1, 2), lw = uni(1, 2), lr = uni(0, kGrid - lh), lc = uni(0, kGrid - lw);
        for (int r = lr; r < lr + lh; ++r)
            for (int c = lc; c < lc + lw; ++c) t.lesion.push_back({r, c});
        const int aw = uni(1, 2), ar = uni(0, kGrid - 1), ac = uni(0, kGrid - aw);
        for (int c = ac; c < ac + aw; ++c) t.artifact.push_back({ar, c});
        bool overlap = false;
        for (const auto& a : t.artifact)
            overlap = overlap || std::find(t.lesion.begin(), t.lesion.end(), a) != t.lesion.end();
        if (!overlap) break;
    }
    std::vector<bool> fg(kSide * kSide, false);
    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x) {
            const tts::Pixel p{y, x};
            if (t.in(t.lesion, p)) {
                t.image.at(0, y, x) = 1.0f;
                fg[static_cast<std::size_t>(y) * kSide + x] = true;
            }
            if (t.in(t.artifact, p)) t.image.at(1, y, x) = 1.0f;
        }
    std::vector<std::uint8_t> m(fg.begin(), fg.end());
    t.mask = tts::SegmentationMask(kSide, kSide, std::move(m));
    t.keys.positive = {sample_pixel(t.lesion[static_cast<std::size_t>(uni(0, static_cast<int>(t.lesion.size()) - 1))])};
    const Cell a = t.artifact[static_cast<std::size_t>(uni(0, static_cast<int>(t.artifact.size()) - 1))];
    t.keys.negative = {sample_pixel(a)};
    t.keys.artifact_tags = {tts::KeypointTag::patch};
    t.annotation.image_id = "toy_" + std::to_string(seed);
    t.annotation.points = {{sample_pixel(a), tts::Artifact::patch}};
    return t;
}

inline tts::SyntheticSample as_sample(const Instance& t, const std::string& id, tts::Label label) {
    tts::SyntheticSample s;
    s.record.image_id = id;
    s.record.label = label;
    s.record.artifacts[static_cast<std::size_t>(tts::index_of(tts::Artifact::patch))] = true;
    s.image = t.image;
    s.mask = t.mask;
    s.annotation = t.annotation;
    s.annotation.image_id = id;
    return s;
}

} // namespace toy
