#pragma once
// Planar float images and binary netpbm I/O (P5 gray, P6 RGB, 8-bit).

#include "error.hpp"
#include "geometry.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace tts {

// Channel-major (CHW) image with values nominally in [0, 1].
class Image {
  public:
    Image() = default;
    Image(int channels, int height, int width, float fill = 0.0f)
        : channels_(channels), height_(height), width_(width),
          data_(static_cast<std::size_t>(channels) * height * width, fill) {
        if (channels < 1 || height < 1 || width < 1)
            throw ShapeError("image dimensions must be >= 1");
    }

    int channels() const noexcept { return channels_; }
    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    ImageSize size() const noexcept { return {height_, width_}; }
    bool empty() const noexcept { return data_.empty(); }

    float& at(int c, int y, int x) {
        return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
    }
    float at(int c, int y, int x) const {
        return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
    }
    std::vector<float>& data() noexcept { return data_; }
    const std::vector<float>& data() const noexcept { return data_; }

    friend bool operator==(const Image&, const Image&) = default;

  private:
    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<float> data_;
};

namespace detail {

inline int read_pnm_int(std::istream& in, const std::string& path) {
    int c = in.peek();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            std::string comment;
            std::getline(in, comment);
        } else {
            in.get();
        }
        c = in.peek();
    }
    int value = 0;
    if (!(in >> value)) throw ParseError(path + ": malformed netpbm header");
    return value;
}

inline std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0f), 0L, 255L));
}

} // namespace detail

// Reads P5 (gray) or P6 (RGB) with maxval 255.
inline Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open image " + path.string());
    std::string magic;
    in >> magic;
    int channels = 0;
    if (magic == "P5")
        channels = 1;
    else if (magic == "P6")
        channels = 3;
    else
        throw ParseError(path.string() + ": unsupported image format '" + magic + "'");
    const int width = detail::read_pnm_int(in, path.string());
    const int height = detail::read_pnm_int(in, path.string());
    const int maxval = detail::read_pnm_int(in, path.string());
    if (maxval != 255) throw ParseError(path.string() + ": only 8-bit images are supported");
    in.get();

    std::vector<std::uint8_t> raw(static_cast<std::size_t>(width) * height * channels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw ParseError(path.string() + ": truncated pixel data");

    Image img(channels, height, width);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(c, y, x) = raw[(static_cast<std::size_t>(y) * width + x) * channels + c] / 255.0f;
    return img;
}

inline void write_pnm(const Image& img, const std::filesystem::path& path) {
    if (img.channels() != 1 && img.channels() != 3)
        throw ShapeError("netpbm output needs 1 or 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write image " + path.string());
    out << (img.channels() == 1 ? "P5" : "P6") << "\n" << img.width() << " " << img.height() << "\n255\n";
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(img.width()) * img.height() * img.channels());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c)
                raw[(static_cast<std::size_t>(y) * img.width() + x) * img.channels() + c] =
                    detail::to_byte(img.at(c, y, x));
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// Rounds every value through the 8-bit representation used on disk.
inline Image quantize_8bit(Image img) {
    for (float& v : img.data()) v = detail::to_byte(v) / 255.0f;
    return img;
}

} // namespace tts
