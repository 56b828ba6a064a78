#pragma once
// Test-time channel selection.
//
// A frozen feature extractor produces a C x H x W activation map. Given a
// handful of positive (lesion) and negative (background / artifact) pixel
// keypoints on the original image, every channel is scored by how strongly it
// fires on the positives versus the negatives:
//
//     score[c] = alpha * sum_{k in positive} up[c][k] - (1 - alpha) * sum_{k in negative} up[c][k]
//
// where `up` is the map bilinearly upsampled to image resolution. The top
// ceil(keep_fraction * C) channels survive, the rest are zeroed at native
// resolution before the classifier head sees them.
//
// Everything here is a pure function of its arguments.

#include "artifacts.hpp"
#include "error.hpp"
#include "geometry.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tts {

template <std::floating_point Real>
class BasicFeatureMap {
  public:
    using value_type = Real;

    // Throws ShapeError on non-positive dimensions or a size mismatch and
    // NonFiniteError on NaN/inf activations.
    BasicFeatureMap(int channels, int height, int width, ImageSize source_size,
                    std::vector<Real> values)
        : channels_(channels), height_(height), width_(width), source_(source_size),
          values_(std::move(values)) {
        if (channels < 1 || height < 1 || width < 1)
            throw ShapeError("feature map dimensions must be >= 1, got " + std::to_string(channels) +
                             "x" + std::to_string(height) + "x" + std::to_string(width));
        if (source_size.height < 1 || source_size.width < 1)
            throw ShapeError("source image size must be >= 1, got " + to_string(source_size));
        const auto expected = static_cast<std::size_t>(channels) * height * width;
        if (values_.size() != expected)
            throw ShapeError("feature map holds " + std::to_string(values_.size()) +
                             " values, expected " + std::to_string(expected));
        for (std::size_t i = 0; i < values_.size(); ++i)
            if (!std::isfinite(values_[i]))
                throw NonFiniteError("non-finite activation at flat index " + std::to_string(i));
    }

    static BasicFeatureMap zeros(int channels, int height, int width, ImageSize source_size) {
        return BasicFeatureMap(channels, height, width, source_size,
                               std::vector<Real>(static_cast<std::size_t>(std::max(channels, 0)) *
                                                 std::max(height, 0) * std::max(width, 0)));
    }

    int channels() const noexcept { return channels_; }
    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    ImageSize spatial_size() const noexcept { return {height_, width_}; }
    ImageSize source_size() const noexcept { return source_; }
    std::size_t plane_size() const noexcept { return static_cast<std::size_t>(height_) * width_; }

    Real at(int c, int row, int col) const {
        return values_[(static_cast<std::size_t>(c) * height_ + row) * width_ + col];
    }
    std::span<const Real> channel(int c) const {
        return {values_.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
    }
    std::span<const Real> values() const noexcept { return values_; }

    friend bool operator==(const BasicFeatureMap&, const BasicFeatureMap&) = default;

  private:
    int channels_;
    int height_;
    int width_;
    ImageSize source_;
    std::vector<Real> values_;
};

using FeatureMap = BasicFeatureMap<float>;

// Equal-sized positive / negative keypoint lists in original-image space.
// artifact_tags is either empty or parallel to `negative`.
struct KeypointSet {
    std::vector<Pixel> positive;
    std::vector<Pixel> negative;
    std::vector<KeypointTag> artifact_tags;

    // Throws PreconditionError (empty, unequal, overlapping, bad tag count) or
    // CoordinateError (point outside `image`).
    void validate(ImageSize image) const {
        if (positive.empty() || negative.empty())
            throw PreconditionError("keypoint set needs at least one positive and one negative point");
        if (positive.size() != negative.size())
            throw PreconditionError("positive and negative keypoint counts differ (" +
                                    std::to_string(positive.size()) + " vs " +
                                    std::to_string(negative.size()) + ")");
        if (!artifact_tags.empty() && artifact_tags.size() != negative.size())
            throw PreconditionError("artifact_tags must be empty or match the negative keypoints");
        auto check = [&](const std::vector<Pixel>& pts, const char* side) {
            for (std::size_t i = 0; i < pts.size(); ++i)
                if (!image.contains(pts[i].row, pts[i].col))
                    throw CoordinateError(std::string(side) + " keypoint " + std::to_string(i) + " " +
                                          to_string(pts[i]) + " lies outside the " +
                                          to_string(image) + " image");
        };
        check(positive, "positive");
        check(negative, "negative");
        const std::set<Pixel> pos(positive.begin(), positive.end());
        for (const Pixel& p : negative)
            if (pos.contains(p))
                throw PreconditionError("pixel " + to_string(p) +
                                        " is both a positive and a negative keypoint");
    }

    friend bool operator==(const KeypointSet&, const KeypointSet&) = default;
};

struct SelectionConfig {
    double alpha = 0.4;
    double keep_fraction = 0.10;

    // Artifact-located negatives are trusted more.
    static SelectionConfig for_artifact_keypoints() { return {0.2, 0.10}; }

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0))
            throw ConfigError("alpha must lie in [0, 1], got " + std::to_string(alpha));
        if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
            throw ConfigError("keep_fraction must lie in (0, 1], got " + std::to_string(keep_fraction));
    }
};

template <std::floating_point Real>
struct BasicChannelScores {
    std::vector<Real> positive_sums;
    std::vector<Real> negative_sums;
    std::vector<Real> scores;

    int channels() const noexcept { return static_cast<int>(scores.size()); }
    friend bool operator==(const BasicChannelScores&, const BasicChannelScores&) = default;
};

using ChannelScores = BasicChannelScores<float>;

struct SelectionMask {
    std::vector<int> selected;       // ascending channel indices
    std::vector<std::uint8_t> mask;  // 1 iff channel selected

    int channels() const noexcept { return static_cast<int>(mask.size()); }
    static SelectionMask all(int channels) {
        SelectionMask m;
        m.selected.resize(static_cast<std::size_t>(channels));
        std::iota(m.selected.begin(), m.selected.end(), 0);
        m.mask.assign(static_cast<std::size_t>(channels), 1);
        return m;
    }
    friend bool operator==(const SelectionMask&, const SelectionMask&) = default;
};

// Number of channels kept: ceil(keep_fraction * channels), at least one.
// The small slack absorbs products such as 0.1 * 30 landing one ulp above 3.
inline int selection_size(double keep_fraction, int channels) {
    const double raw = keep_fraction * static_cast<double>(channels);
    const double slack = 1e-9 * std::max(1.0, raw);
    const int k = static_cast<int>(std::ceil(raw - slack));
    return std::clamp(k, 1, std::max(channels, 1));
}

namespace detail {

// Corner-aligned source coordinate of output index `i`.
inline void source_coord(int i, int out_len, int in_len, int& lo, int& hi, double& t) {
    if (out_len <= 1 || in_len <= 1) {
        lo = hi = 0;
        t = 0.0;
        return;
    }
    const double s = static_cast<double>(i) * (in_len - 1) / (out_len - 1);
    lo = std::min(static_cast<int>(std::floor(s)), in_len - 1);
    hi = std::min(lo + 1, in_len - 1);
    t = s - lo;
}

inline double lerp(double a, double b, double t) { return a + t * (b - a); }

} // namespace detail

// Bilinear, corner-aligned resize of every channel to source_size().
template <std::floating_point Real>
BasicFeatureMap<Real> upsample_to_image(const BasicFeatureMap<Real>& fmap) {
    const ImageSize out = fmap.source_size();
    const int h = fmap.height();
    const int w = fmap.width();
    std::vector<Real> values(static_cast<std::size_t>(fmap.channels()) * out.area());

    std::vector<int> x_lo(out.width), x_hi(out.width);
    std::vector<double> x_t(out.width);
    for (int x = 0; x < out.width; ++x) detail::source_coord(x, out.width, w, x_lo[x], x_hi[x], x_t[x]);

    Real* dst = values.data();
    for (int c = 0; c < fmap.channels(); ++c) {
        const auto plane = fmap.channel(c);
        for (int y = 0; y < out.height; ++y) {
            int y0, y1;
            double ty;
            detail::source_coord(y, out.height, h, y0, y1, ty);
            const Real* r0 = plane.data() + static_cast<std::size_t>(y0) * w;
            const Real* r1 = plane.data() + static_cast<std::size_t>(y1) * w;
            for (int x = 0; x < out.width; ++x) {
                const double top = detail::lerp(r0[x_lo[x]], r0[x_hi[x]], x_t[x]);
                const double bottom = detail::lerp(r1[x_lo[x]], r1[x_hi[x]], x_t[x]);
                *dst++ = static_cast<Real>(detail::lerp(top, bottom, ty));
            }
        }
    }
    return BasicFeatureMap<Real>(fmap.channels(), out.height, out.width, out, std::move(values));
}

// Per-channel keypoint sums and scores. Sums run left to right in keypoint
// order. `fmap_upsampled` must already be at image resolution.
template <std::floating_point Real>
BasicChannelScores<Real> score_channels(const BasicFeatureMap<Real>& fmap_upsampled,
                                        const KeypointSet& keys, const SelectionConfig& cfg) {
    cfg.validate();
    const ImageSize image = fmap_upsampled.source_size();
    if (fmap_upsampled.spatial_size() != image)
        throw ShapeError("scoring expects a map at image resolution " + to_string(image) + ", got " +
                         to_string(fmap_upsampled.spatial_size()));
    keys.validate(image);

    const int channels = fmap_upsampled.channels();
    const Real a = static_cast<Real>(cfg.alpha);
    const Real b = Real(1) - a;

    BasicChannelScores<Real> out;
    out.positive_sums.assign(channels, Real(0));
    out.negative_sums.assign(channels, Real(0));
    out.scores.resize(channels);
    for (int c = 0; c < channels; ++c) {
        Real sp = 0;
        for (const Pixel& k : keys.positive) sp += fmap_upsampled.at(c, k.row, k.col);
        Real sn = 0;
        for (const Pixel& k : keys.negative) sn += fmap_upsampled.at(c, k.row, k.col);
        const Real s = a * sp - b * sn;
        if (!std::isfinite(s))
            throw NonFiniteError("channel " + std::to_string(c) + " score overflowed");
        out.positive_sums[c] = sp;
        out.negative_sums[c] = sn;
        out.scores[c] = s;
    }
    return out;
}

// Top ceil(keep_fraction * C) channels by score; equal scores resolve to the
// lower channel index.
template <std::floating_point Real>
SelectionMask select_channels(const BasicChannelScores<Real>& scores, const SelectionConfig& cfg) {
    cfg.validate();
    const int channels = scores.channels();
    if (channels < 1) throw PreconditionError("cannot select from zero channels");
    for (int c = 0; c < channels; ++c)
        if (!std::isfinite(scores.scores[c]))
            throw NonFiniteError("score of channel " + std::to_string(c) + " is not finite");

    const int keep = selection_size(cfg.keep_fraction, channels);
    std::vector<int> order(channels);
    std::iota(order.begin(), order.end(), 0);
    const auto& s = scores.scores;
    std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&](int lhs, int rhs) {
        if (s[lhs] != s[rhs]) return s[lhs] > s[rhs];
        return lhs < rhs;
    });

    SelectionMask out;
    out.selected.assign(order.begin(), order.begin() + keep);
    std::sort(out.selected.begin(), out.selected.end());
    out.mask.assign(channels, 0);
    for (int c : out.selected) out.mask[c] = 1;
    return out;
}

// Zeroes every channel whose mask entry is 0; the mask broadcasts over space.
template <std::floating_point Real>
BasicFeatureMap<Real> apply_mask(const BasicFeatureMap<Real>& fmap, const SelectionMask& mask) {
    if (mask.channels() != fmap.channels())
        throw ShapeError("mask covers " + std::to_string(mask.channels()) + " channels, map has " +
                         std::to_string(fmap.channels()));
    std::vector<Real> values(fmap.values().begin(), fmap.values().end());
    const std::size_t plane = fmap.plane_size();
    for (int c = 0; c < fmap.channels(); ++c)
        if (mask.mask[c] == 0)
            std::fill_n(values.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, Real(0));
    return BasicFeatureMap<Real>(fmap.channels(), fmap.height(), fmap.width(), fmap.source_size(),
                                 std::move(values));
}

template <std::floating_point Real>
struct BasicSelectionResult {
    BasicFeatureMap<Real> masked;  // native resolution
    SelectionMask mask;
    BasicChannelScores<Real> scores;
};

using SelectionResult = BasicSelectionResult<float>;

// Full pipeline: score on the upsampled copy, mask the native-resolution map.
template <std::floating_point Real>
BasicSelectionResult<Real> tts_select(const BasicFeatureMap<Real>& fmap, const KeypointSet& keys,
                                      const SelectionConfig& cfg) {
    cfg.validate();
    keys.validate(fmap.source_size());
    auto scores = score_channels(upsample_to_image(fmap), keys, cfg);
    auto mask = select_channels(scores, cfg);
    auto masked = apply_mask(fmap, mask);
    return {std::move(masked), std::move(mask), std::move(scores)};
}

} // namespace tts
