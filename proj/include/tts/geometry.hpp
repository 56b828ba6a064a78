#pragma once

#include <compare>
#include <string>

namespace tts {

struct ImageSize {
    int height = 0;
    int width = 0;

    bool contains(int row, int col) const noexcept {
        return row >= 0 && col >= 0 && row < height && col < width;
    }
    long long area() const noexcept { return static_cast<long long>(height) * width; }
    friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

// Integer pixel coordinate in original-image space.
struct Pixel {
    int row = 0;
    int col = 0;
    friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

inline std::string to_string(Pixel p) {
    return "(" + std::to_string(p.row) + ", " + std::to_string(p.col) + ")";
}

inline std::string to_string(ImageSize s) {
    return std::to_string(s.height) + "x" + std::to_string(s.width);
}

} // namespace tts
