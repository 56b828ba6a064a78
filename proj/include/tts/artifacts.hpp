#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace tts {

// Acquisition artifacts tracked for trap-set construction.
enum class Artifact { dark_corner, ruler, ink_marking, patch, hair, gel_bubble, gel_border };

inline constexpr int kArtifactCount = 7;

inline constexpr std::array<Artifact, kArtifactCount> kAllArtifacts = {
    Artifact::dark_corner, Artifact::ruler,      Artifact::ink_marking, Artifact::patch,
    Artifact::hair,        Artifact::gel_bubble, Artifact::gel_border};

inline constexpr std::string_view artifact_name(Artifact a) {
    switch (a) {
    case Artifact::dark_corner: return "dark_corner";
    case Artifact::ruler: return "ruler";
    case Artifact::ink_marking: return "ink_marking";
    case Artifact::patch: return "patch";
    case Artifact::hair: return "hair";
    case Artifact::gel_bubble: return "gel_bubble";
    case Artifact::gel_border: return "gel_border";
    }
    return "unknown";
}

inline std::optional<Artifact> parse_artifact(std::string_view name) {
    for (Artifact a : kAllArtifacts)
        if (artifact_name(a) == name) return a;
    return std::nullopt;
}

// Hair and gel artifacts are too diffuse to mark with a few clicks; they only
// participate in trap separation.
inline constexpr bool is_keypoint_annotatable(Artifact a) {
    return a == Artifact::dark_corner || a == Artifact::ruler || a == Artifact::ink_marking ||
           a == Artifact::patch;
}

inline constexpr int index_of(Artifact a) { return static_cast<int>(a); }

// Tag carried by a negative keypoint.
enum class KeypointTag { dark_corner, ruler, ink_marking, patch, background };

inline constexpr std::string_view tag_name(KeypointTag t) {
    switch (t) {
    case KeypointTag::dark_corner: return "dark_corner";
    case KeypointTag::ruler: return "ruler";
    case KeypointTag::ink_marking: return "ink_marking";
    case KeypointTag::patch: return "patch";
    case KeypointTag::background: return "background";
    }
    return "unknown";
}

inline constexpr std::optional<KeypointTag> to_keypoint_tag(Artifact a) {
    switch (a) {
    case Artifact::dark_corner: return KeypointTag::dark_corner;
    case Artifact::ruler: return KeypointTag::ruler;
    case Artifact::ink_marking: return KeypointTag::ink_marking;
    case Artifact::patch: return KeypointTag::patch;
    default: return std::nullopt;
    }
}

} // namespace tts
