#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "sdg/image.hpp"
#include "sdg/rng.hpp"

namespace sdg::synth {

constexpr int kImageSize = 32;
constexpr int kNumShapes = 6;
constexpr int kNumSubjectColors = 8;
constexpr int kNumBackgrounds = 8;
constexpr int kNumPositions = 3;
constexpr int kMinSubjectArea = 50; // pixels; below this the checkers degrade to "none"

// Orientation-bearing glyphs; none has a nontrivial rotational symmetry, so a
// single in-plane angle is uniquely recoverable from the silhouette.
enum class Shape { wedge = 0, arrow, key, flag, hook, comet };
enum class SubjectColor { red = 0, orange, green, cyan, blue, indigo, purple, magenta };
enum class BgColor { white = 0, yellow, lime, mint, sky, lavender, pink, gray };
enum class Position { left = 0, center, right };

const char* to_string(Shape s);
const char* to_string(SubjectColor c);
const char* to_string(BgColor c);
const char* to_string(Position p);
Shape shape_from_string(const std::string& s);
SubjectColor subject_color_from_string(const std::string& s);
BgColor bg_color_from_string(const std::string& s);
Position position_from_string(const std::string& s);

std::array<double, 3> subject_rgb(SubjectColor c);
std::array<double, 3> background_rgb(BgColor c);

struct SubjectSpec {
    Shape shape;
    SubjectColor color;
    bool operator==(const SubjectSpec&) const = default;
};

struct PromptSpec {
    BgColor background;
    Position position;
    bool operator==(const PromptSpec&) const = default;
};

struct SubjectSample {
    std::string id;
    SubjectSpec subject{};
    PromptSpec prompt{};
    BgColor ref_background{};
    double ref_orientation_deg = 0;
    double target_orientation_deg = 0;
    uint64_t seed = 0;
    Raster reference;
    Raster target;
};

// Anchor x for each position (y is always the image center); terciles of the
// x axis decide the position label.
double position_anchor_x(Position p);

// Deterministic anti-aliased render: glyph at the prompted position on the
// prompted background, rotated about its area centroid. 4x4 subsamples on
// boundary pixels.
Raster render(const SubjectSpec& subject, const PromptSpec& prompt, double orientation_deg, uint64_t seed);

// Single-channel coverage mask of a glyph centered at the image center;
// also used for the orientation template bank.
std::vector<double> render_coverage(Shape shape, double orientation_deg);

// Glyph geometry probes (exposed for tests).
double glyph_area(Shape s);
double glyph_max_radius(Shape s);

std::vector<SubjectSample> generate_dataset(int64_t n_pairs, uint64_t seed);
void write_dataset(const std::string& dir, const std::vector<SubjectSample>& samples);
std::vector<SubjectSample> load_dataset(const std::string& dir);

struct OrientationEstimate {
    bool found = false;
    double angle_deg = 0;
    double peak_correlation = 0;
};

// Nearest-template-by-correlation pose estimate at 1 degree resolution.
OrientationEstimate estimate_orientation(const Raster& image, const SubjectSpec& subject);

struct Attributes {
    std::optional<Shape> shape;
    std::optional<SubjectColor> color;
    BgColor background{};
    std::optional<Position> position;
};

Attributes check_attributes(const Raster& image);

inline double wrap_delta_deg(double a, double b) {
    double d = std::fmod(std::abs(a - b), 360.0);
    return std::min(d, 360.0 - d);
}

} // namespace sdg::synth
