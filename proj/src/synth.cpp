#include "sdg/synth.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "sdg/common.hpp"

namespace fs = std::filesystem;

namespace sdg::synth {

// ---------------------------------------------------------------------------
// Palettes
// ---------------------------------------------------------------------------

namespace {

const char* kShapeNames[kNumShapes] = {"wedge", "arrow", "key", "flag", "hook", "comet"};
const char* kSubjectColorNames[kNumSubjectColors] = {"red",  "orange", "green",  "cyan",
                                                     "blue", "indigo", "purple", "magenta"};
const char* kBgColorNames[kNumBackgrounds] = {"white", "yellow", "lime", "mint",
                                              "sky",   "lavender", "pink", "gray"};
const char* kPositionNames[kNumPositions] = {"left", "center", "right"};

// Saturated subject hues vs pale background hues; the two sets are disjoint
// in hue so nearest-palette classification is exact on clean renders.
const std::array<double, 3> kSubjectHsv[kNumSubjectColors] = {
    {0, 1.00, 1.00}, {30, 1.00, 1.00}, {120, 0.85, 0.85}, {180, 0.90, 0.95},
    {225, 1.00, 0.95}, {255, 1.00, 0.80}, {285, 0.90, 0.90}, {315, 0.95, 0.95}};
const std::array<double, 3> kBgHsv[kNumBackgrounds] = {
    {0, 0.00, 1.00}, {60, 0.55, 1.00}, {90, 0.42, 1.00}, {150, 0.40, 1.00},
    {207, 0.40, 1.00}, {262, 0.28, 1.00}, {335, 0.32, 1.00}, {0, 0.00, 0.72}};

double sq_dist(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

} // namespace

const char* to_string(Shape s) { return kShapeNames[(int)s]; }
const char* to_string(SubjectColor c) { return kSubjectColorNames[(int)c]; }
const char* to_string(BgColor c) { return kBgColorNames[(int)c]; }
const char* to_string(Position p) { return kPositionNames[(int)p]; }

template <class E, int N>
static E enum_from(const char* const (&names)[N], const std::string& s, const char* what) {
    for (int i = 0; i < N; ++i)
        if (s == names[i]) return (E)i;
    throw ValidationError(std::string("unknown ") + what + ": " + s);
}

Shape shape_from_string(const std::string& s) { return enum_from<Shape>(kShapeNames, s, "shape"); }
SubjectColor subject_color_from_string(const std::string& s) {
    return enum_from<SubjectColor>(kSubjectColorNames, s, "subject color");
}
BgColor bg_color_from_string(const std::string& s) { return enum_from<BgColor>(kBgColorNames, s, "background color"); }
Position position_from_string(const std::string& s) { return enum_from<Position>(kPositionNames, s, "position"); }

std::array<double, 3> subject_rgb(SubjectColor c) {
    const auto& h = kSubjectHsv[(int)c];
    return hsv_to_rgb(h[0], h[1], h[2]);
}
std::array<double, 3> background_rgb(BgColor c) {
    const auto& h = kBgHsv[(int)c];
    return hsv_to_rgb(h[0], h[1], h[2]);
}

double position_anchor_x(Position p) {
    switch (p) {
        case Position::left: return 8.0;
        case Position::center: return 16.0;
        default: return 24.0;
    }
}

// ---------------------------------------------------------------------------
// Glyph geometry: CSG of circles, convex polygons and ring sectors.
// Coordinates are in pixels, later shifted so the area centroid is at origin.
// ---------------------------------------------------------------------------

namespace {

struct Prim {
    enum Kind { circle, poly, ring_sector } kind;
    // circle / ring sector
    double cx = 0, cy = 0, r0 = 0, r1 = 0; // circle uses r1
    double a0 = 0, a1 = 0;                 // radians, a0 < a1, span < 2*pi
    // polygon (convex, CCW)
    std::vector<std::array<double, 2>> verts;

    static Prim make_circle(double cx, double cy, double r) {
        Prim p;
        p.kind = circle;
        p.cx = cx;
        p.cy = cy;
        p.r1 = r;
        return p;
    }
    static Prim make_box(double x0, double y0, double x1, double y1) {
        Prim p;
        p.kind = poly;
        p.verts = {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
        return p;
    }
    static Prim make_tri(std::array<double, 2> a, std::array<double, 2> b, std::array<double, 2> c) {
        // ensure CCW
        double cr = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        Prim p;
        p.kind = poly;
        p.verts = cr >= 0 ? std::vector<std::array<double, 2>>{a, b, c}
                          : std::vector<std::array<double, 2>>{a, c, b};
        return p;
    }
    static Prim make_ring(double cx, double cy, double r_in, double r_out, double a0_deg, double a1_deg) {
        Prim p;
        p.kind = ring_sector;
        p.cx = cx;
        p.cy = cy;
        p.r0 = r_in;
        p.r1 = r_out;
        p.a0 = a0_deg * M_PI / 180.0;
        p.a1 = a1_deg * M_PI / 180.0;
        return p;
    }

    bool inside(double x, double y) const {
        switch (kind) {
            case circle: {
                double dx = x - cx, dy = y - cy;
                return dx * dx + dy * dy <= r1 * r1;
            }
            case poly: {
                size_t n = verts.size();
                for (size_t i = 0; i < n; ++i) {
                    const auto& a = verts[i];
                    const auto& b = verts[(i + 1) % n];
                    double cr = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                    if (cr < 0) return false;
                }
                return true;
            }
            case ring_sector: {
                double dx = x - cx, dy = y - cy;
                double rho = std::sqrt(dx * dx + dy * dy);
                if (rho < r0 || rho > r1) return false;
                double phi = std::atan2(dy, dx);
                // normalize into [a0, a0+2pi)
                while (phi < a0) phi += 2 * M_PI;
                return phi <= a1;
            }
        }
        return false;
    }

    // approximate signed distance (exact for circle/poly, near-exact for ring)
    double sdist(double x, double y) const {
        switch (kind) {
            case circle: {
                double dx = x - cx, dy = y - cy;
                return std::sqrt(dx * dx + dy * dy) - r1;
            }
            case poly: {
                size_t n = verts.size();
                double d = 1e30;
                bool in = true;
                for (size_t i = 0; i < n; ++i) {
                    const auto& a = verts[i];
                    const auto& b = verts[(i + 1) % n];
                    double ex = b[0] - a[0], ey = b[1] - a[1];
                    double px = x - a[0], py = y - a[1];
                    double t = std::clamp((px * ex + py * ey) / (ex * ex + ey * ey), 0.0, 1.0);
                    double qx = px - t * ex, qy = py - t * ey;
                    d = std::min(d, std::sqrt(qx * qx + qy * qy));
                    if (ex * py - ey * px < 0) in = false;
                }
                return in ? -d : d;
            }
            case ring_sector: {
                double dx = x - cx, dy = y - cy;
                double rho = std::sqrt(dx * dx + dy * dy);
                double phi = std::atan2(dy, dx);
                while (phi < a0) phi += 2 * M_PI;
                if (phi <= a1) {
                    double d = std::max(rho - r1, r0 - rho);
                    return d;
                }
                // outside angular span: distance to the nearest radial edge
                auto edge_dist = [&](double ang) {
                    double ux = std::cos(ang), uy = std::sin(ang);
                    double t = std::clamp(dx * ux + dy * uy, r0, r1);
                    double qx = dx - t * ux, qy = dy - t * uy;
                    return std::sqrt(qx * qx + qy * qy);
                };
                return std::min(edge_dist(a0), edge_dist(a1));
            }
        }
        return 1e30;
    }
};

struct Glyph {
    std::vector<Prim> parts;
    std::vector<Prim> holes;
    double cx = 0, cy = 0;     // area centroid
    double max_radius = 0;     // from centroid
    double area = 0;

    bool inside_raw(double x, double y) const {
        bool in = false;
        for (const auto& p : parts)
            if (p.inside(x, y)) {
                in = true;
                break;
            }
        if (!in) return false;
        for (const auto& h : holes)
            if (h.inside(x, y)) return false;
        return true;
    }

    // centroid-relative query
    bool inside(double x, double y) const { return inside_raw(x + cx, y + cy); }

    double sdist(double x, double y) const {
        double gx = x + cx, gy = y + cy;
        double d = 1e30;
        for (const auto& p : parts) d = std::min(d, p.sdist(gx, gy));
        for (const auto& h : holes) d = std::max(d, -h.sdist(gx, gy));
        return d;
    }

    void finalize() {
        // numeric area centroid over a fine grid
        double step = 0.05;
        double sx = 0, sy = 0, n = 0;
        for (double y = -10; y <= 10; y += step) {
            for (double x = -10; x <= 10; x += step) {
                if (inside_raw(x, y)) {
                    sx += x;
                    sy += y;
                    n += 1;
                }
            }
        }
        require(n > 0, "glyph: empty geometry");
        cx = sx / n;
        cy = sy / n;
        area = n * step * step;
        max_radius = 0;
        for (double y = -10; y <= 10; y += step) {
            for (double x = -10; x <= 10; x += step) {
                if (inside_raw(x, y)) {
                    double dx = x - cx, dy = y - cy;
                    max_radius = std::max(max_radius, std::sqrt(dx * dx + dy * dy));
                }
            }
        }
    }
};

Glyph make_glyph(Shape s) {
    Glyph g;
    switch (s) {
        case Shape::wedge:
            // skewed triangle pointing +x (asymmetry sharpens the
            // orientation correlation peak)
            g.parts.push_back(Prim::make_tri({6.8, 0.3}, {-4.4, 6.0}, {-4.4, -4.6}));
            break;
        case Shape::arrow:
            g.parts.push_back(Prim::make_box(-7.0, -1.9, 0.8, 1.9));
            g.parts.push_back(Prim::make_tri({7.4, 0}, {0.8, 4.6}, {0.8, -4.6}));
            break;
        case Shape::key:
            g.parts.push_back(Prim::make_circle(-3.3, 0, 3.8));
            g.holes.push_back(Prim::make_circle(-3.3, 0, 1.6));
            g.parts.push_back(Prim::make_box(-0.8, -1.4, 6.0, 1.4));
            g.parts.push_back(Prim::make_box(2.6, -3.5, 3.8, -1.2));
            g.parts.push_back(Prim::make_box(4.6, -3.5, 5.8, -1.2));
            break;
        case Shape::flag:
            g.parts.push_back(Prim::make_box(-2.4, -4.0, 0.0, 5.8));
            g.parts.push_back(Prim::make_box(0.0, 0.6, 6.8, 5.8));
            break;
        case Shape::hook:
            // J: lower partial ring plus a right bar and a short bridge nub
            g.parts.push_back(Prim::make_ring(0.0, 0.0, 2.0, 5.1, 140.0, 360.0));
            g.parts.push_back(Prim::make_box(2.6, 0.0, 5.1, 5.5));
            g.parts.push_back(Prim::make_box(1.0, 3.9, 2.6, 5.5));
            break;
        case Shape::comet:
            g.parts.push_back(Prim::make_circle(2.9, 0, 4.0));
            g.parts.push_back(Prim::make_tri({2.9, 3.2}, {2.9, -3.2}, {-5.3, 0}));
            break;
    }
    g.finalize();
    return g;
}

const Glyph& glyph(Shape s) {
    static std::array<Glyph, kNumShapes> cache = [] {
        std::array<Glyph, kNumShapes> a;
        for (int i = 0; i < kNumShapes; ++i) a[(size_t)i] = make_glyph((Shape)i);
        return a;
    }();
    return cache[(size_t)s];
}

// coverage of one pixel whose center is (px, py) in image coordinates, for a
// glyph placed at `center` with rotation theta (radians, CCW)
double pixel_coverage(const Glyph& g, double px, double py, double cx_img, double cy_img, double cos_t,
                      double sin_t) {
    auto to_glyph = [&](double x, double y, double& gx, double& gy) {
        double dx = x - cx_img, dy = y - cy_img;
        // inverse rotation
        gx = cos_t * dx + sin_t * dy;
        gy = -sin_t * dx + cos_t * dy;
    };
    double gx, gy;
    to_glyph(px, py, gx, gy);
    double d = g.sdist(gx, gy);
    if (d > 1.2) return 0.0;
    if (d < -1.2) return 1.0;
    int hit = 0;
    for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
            double ox = (sx + 0.5) / 4.0 - 0.5;
            double oy = (sy + 0.5) / 4.0 - 0.5;
            to_glyph(px + ox, py + oy, gx, gy);
            if (g.inside(gx, gy)) ++hit;
        }
    }
    return hit / 16.0;
}

} // namespace

double glyph_area(Shape s) { return glyph(s).area; }
double glyph_max_radius(Shape s) { return glyph(s).max_radius; }

Raster render(const SubjectSpec& subject, const PromptSpec& prompt, double orientation_deg, uint64_t /*seed*/) {
    validate(orientation_deg >= 0.0 && orientation_deg < 360.0, "render: orientation must be in [0,360)");
    const Glyph& g = glyph(subject.shape);
    auto sc = subject_rgb(subject.color);
    auto bc = background_rgb(prompt.background);
    double cx = position_anchor_x(prompt.position);
    double cy = kImageSize / 2.0;
    double theta = orientation_deg * M_PI / 180.0;
    double cos_t = std::cos(theta), sin_t = std::sin(theta);

    Raster img(kImageSize, kImageSize);
    for (int y = 0; y < kImageSize; ++y) {
        for (int x = 0; x < kImageSize; ++x) {
            double cov = pixel_coverage(g, x + 0.5, y + 0.5, cx, cy, cos_t, sin_t);
            double* p = img.px(x, y);
            for (int c = 0; c < 3; ++c) p[c] = cov * sc[(size_t)c] + (1.0 - cov) * bc[(size_t)c];
        }
    }
    return img;
}

std::vector<double> render_coverage(Shape shape, double orientation_deg) {
    const Glyph& g = glyph(shape);
    double theta = orientation_deg * M_PI / 180.0;
    double cos_t = std::cos(theta), sin_t = std::sin(theta);
    double c = kImageSize / 2.0;
    std::vector<double> mask((size_t)kImageSize * kImageSize, 0.0);
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            mask[(size_t)y * kImageSize + x] = pixel_coverage(g, x + 0.5, y + 0.5, c, c, cos_t, sin_t);
    return mask;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

namespace {
std::string pad_id(int64_t i) {
    std::string s = std::to_string(i);
    while (s.size() < 5) s = "0" + s;
    return s;
}

double draw_angle_2dp(Rng& rng) {
    double a = std::round(rng.uniform() * 36000.0) / 100.0;
    return a >= 360.0 ? 0.0 : a;
}
} // namespace

std::vector<SubjectSample> generate_dataset(int64_t n_pairs, uint64_t seed) {
    validate(n_pairs >= 1, "generate_dataset: n_pairs must be >= 1");
    std::vector<SubjectSample> out;
    out.reserve((size_t)n_pairs);
    for (int64_t i = 0; i < n_pairs; ++i) {
        // per-index streams: shard outputs are order independent
        Rng rng(derive_seed(seed, "sample", (uint64_t)i));
        SubjectSample s;
        s.id = pad_id(i);
        s.subject.shape = (Shape)rng.uniform_int(kNumShapes);
        s.subject.color = (SubjectColor)rng.uniform_int(kNumSubjectColors);
        s.prompt.background = (BgColor)rng.uniform_int(kNumBackgrounds);
        s.prompt.position = (Position)rng.uniform_int(kNumPositions);
        s.ref_background = (BgColor)rng.uniform_int(kNumBackgrounds);
        s.ref_orientation_deg = draw_angle_2dp(rng);
        s.target_orientation_deg = draw_angle_2dp(rng);
        s.seed = derive_seed(seed, "sample-render", (uint64_t)i);
        s.reference = render(s.subject, PromptSpec{s.ref_background, Position::center}, s.ref_orientation_deg, s.seed);
        s.target = render(s.subject, s.prompt, s.target_orientation_deg, s.seed);
        out.push_back(std::move(s));
    }
    return out;
}

void write_dataset(const std::string& dir, const std::vector<SubjectSample>& samples) {
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream mf(fs::path(dir) / "manifest.jsonl");
    require(mf.good(), "write_dataset: cannot write manifest in " + dir);
    for (const auto& s : samples) {
        write_png((fs::path(dir) / "images" / (s.id + "_ref.png")).string(), s.reference);
        write_png((fs::path(dir) / "images" / (s.id + "_tgt.png")).string(), s.target);
        nlohmann::json j;
        j["id"] = s.id;
        j["shape"] = to_string(s.subject.shape);
        j["color"] = to_string(s.subject.color);
        j["background"] = to_string(s.prompt.background);
        j["position"] = to_string(s.prompt.position);
        j["ref_background"] = to_string(s.ref_background);
        j["ref_orientation_deg"] = s.ref_orientation_deg;
        j["target_orientation_deg"] = s.target_orientation_deg;
        j["seed"] = s.seed;
        mf << j.dump() << "\n";
    }
}

std::vector<SubjectSample> load_dataset(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.jsonl");
    require(mf.good(), "load_dataset: cannot open manifest in " + dir);
    std::vector<SubjectSample> out;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        SubjectSample s;
        s.id = j.at("id").get<std::string>();
        s.subject.shape = shape_from_string(j.at("shape").get<std::string>());
        s.subject.color = subject_color_from_string(j.at("color").get<std::string>());
        s.prompt.background = bg_color_from_string(j.at("background").get<std::string>());
        s.prompt.position = position_from_string(j.at("position").get<std::string>());
        s.ref_background = bg_color_from_string(j.at("ref_background").get<std::string>());
        s.ref_orientation_deg = j.at("ref_orientation_deg").get<double>();
        s.target_orientation_deg = j.at("target_orientation_deg").get<double>();
        s.seed = j.at("seed").get<uint64_t>();
        s.reference = read_png((fs::path(dir) / "images" / (s.id + "_ref.png")).string());
        s.target = read_png((fs::path(dir) / "images" / (s.id + "_tgt.png")).string());
        out.push_back(std::move(s));
    }
    require(!out.empty(), "load_dataset: empty manifest in " + dir);
    return out;
}

// ---------------------------------------------------------------------------
// Oracle analyzers
// ---------------------------------------------------------------------------

namespace {

// Most frequent background palette color among the 1px border ring.
BgColor detect_background(const Raster& img) {
    std::array<int, kNumBackgrounds> votes{};
    auto vote = [&](int x, int y) {
        auto p = img.get(x, y);
        int best = 0;
        double bd = 1e30;
        for (int c = 0; c < kNumBackgrounds; ++c) {
            double d = sq_dist(p, background_rgb((BgColor)c));
            if (d < bd) {
                bd = d;
                best = c;
            }
        }
        votes[(size_t)best]++;
    };
    for (int x = 0; x < img.w; ++x) {
        vote(x, 0);
        vote(x, img.h - 1);
    }
    for (int y = 1; y < img.h - 1; ++y) {
        vote(0, y);
        vote(img.w - 1, y);
    }
    int best = 0;
    for (int c = 1; c < kNumBackgrounds; ++c)
        if (votes[(size_t)c] > votes[(size_t)best]) best = c;
    return (BgColor)best;
}

// Soft subject mask: projection of (pixel - bg) onto (subject - bg), clamped.
// Equals the anti-aliasing coverage exactly on clean renders.
std::vector<double> soft_mask(const Raster& img, const std::array<double, 3>& bg,
                              const std::array<double, 3>& subj) {
    std::array<double, 3> axis{subj[0] - bg[0], subj[1] - bg[1], subj[2] - bg[2]};
    double norm2 = axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2];
    std::vector<double> m((size_t)img.w * img.h, 0.0);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            const double* p = img.px(x, y);
            double t = ((p[0] - bg[0]) * axis[0] + (p[1] - bg[1]) * axis[1] + (p[2] - bg[2]) * axis[2]) / norm2;
            m[(size_t)y * img.w + x] = std::clamp(t, 0.0, 1.0);
        }
    }
    return m;
}

struct MaskStats {
    int count = 0;
    double cx = 0, cy = 0;
};

MaskStats mask_stats(const std::vector<double>& m, int w, int h) {
    MaskStats st;
    double sw = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v = m[(size_t)y * w + x];
            if (v > 0.5) st.count++;
            sw += v;
            st.cx += v * (x + 0.5);
            st.cy += v * (y + 0.5);
        }
    }
    if (sw > 0) {
        st.cx /= sw;
        st.cy /= sw;
    }
    return st;
}

// Recenter the mask so its centroid lands on the image center (bilinear).
std::vector<double> recenter(const std::vector<double>& m, int w, int h, double cx, double cy) {
    std::vector<double> out((size_t)w * h, 0.0);
    double ox = cx - w / 2.0, oy = cy - h / 2.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double sx = x + 0.5 + ox - 0.5, sy = y + 0.5 + oy - 0.5;
            int x0 = (int)std::floor(sx), y0 = (int)std::floor(sy);
            double fx = sx - x0, fy = sy - y0;
            double acc = 0;
            for (int dy = 0; dy <= 1; ++dy) {
                for (int dx = 0; dx <= 1; ++dx) {
                    int xi = x0 + dx, yi = y0 + dy;
                    if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
                    double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
                    acc += wgt * m[(size_t)yi * w + xi];
                }
            }
            out[(size_t)y * w + x] = acc;
        }
    }
    return out;
}

struct TemplateBank {
    // 360 zero-mean unit-norm masks per shape
    std::vector<std::vector<double>> t;
};

void normalize_inplace(std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= (double)v.size();
    double nrm = 0;
    for (double& x : v) {
        x -= mean;
        nrm += x * x;
    }
    nrm = std::sqrt(nrm);
    if (nrm > 1e-12)
        for (double& x : v) x /= nrm;
}

const TemplateBank& template_bank(Shape s) {
    static std::array<TemplateBank, kNumShapes> cache;
    static std::array<bool, kNumShapes> built{};
    int idx = (int)s;
    if (!built[(size_t)idx]) {
        TemplateBank bank;
        bank.t.resize(360);
        for (int a = 0; a < 360; ++a) {
            auto m = render_coverage(s, (double)a);
            // templates are recentered to their own centroid like queries
            auto st = mask_stats(m, kImageSize, kImageSize);
            bank.t[(size_t)a] = recenter(m, kImageSize, kImageSize, st.cx, st.cy);
            normalize_inplace(bank.t[(size_t)a]);
        }
        cache[(size_t)idx] = std::move(bank);
        built[(size_t)idx] = true;
    }
    return cache[(size_t)idx];
}

// correlation of a centered+normalized query against the bank
std::pair<int, double> best_angle(const std::vector<double>& query, Shape s) {
    const auto& bank = template_bank(s);
    int best = 0;
    double bc = -2;
    for (int a = 0; a < 360; ++a) {
        const auto& t = bank.t[(size_t)a];
        double c = 0;
        for (size_t i = 0; i < t.size(); ++i) c += t[i] * query[i];
        if (c > bc) {
            bc = c;
            best = a;
        }
    }
    return {best, bc};
}

std::optional<SubjectColor> detect_subject_color(const Raster& img, const std::array<double, 3>& bg) {
    std::array<int, kNumSubjectColors> votes{};
    int total = 0;
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            auto p = img.get(x, y);
            if (sq_dist(p, bg) < 0.25 * 0.25) continue;
            int best = 0;
            double bd = 1e30;
            for (int c = 0; c < kNumSubjectColors; ++c) {
                double d = sq_dist(p, subject_rgb((SubjectColor)c));
                if (d < bd) {
                    bd = d;
                    best = c;
                }
            }
            votes[(size_t)best]++;
            total++;
        }
    }
    if (total < kMinSubjectArea) return std::nullopt;
    int best = 0;
    for (int c = 1; c < kNumSubjectColors; ++c)
        if (votes[(size_t)c] > votes[(size_t)best]) best = c;
    return (SubjectColor)best;
}

} // namespace

OrientationEstimate estimate_orientation(const Raster& image, const SubjectSpec& subject) {
    OrientationEstimate est;
    BgColor bg = detect_background(image);
    auto bgc = background_rgb(bg);
    auto mask = soft_mask(image, bgc, subject_rgb(subject.color));
    auto st = mask_stats(mask, image.w, image.h);
    if (st.count < kMinSubjectArea) return est;

    auto query = recenter(mask, image.w, image.h, st.cx, st.cy);
    normalize_inplace(query);
    auto [angle, corr] = best_angle(query, subject.shape);
    est.peak_correlation = corr;
    if (corr < 0.5) return est;
    est.found = true;
    est.angle_deg = (double)angle;
    return est;
}

Attributes check_attributes(const Raster& image) {
    Attributes attrs;
    attrs.background = detect_background(image);
    auto bgc = background_rgb(attrs.background);

    auto color = detect_subject_color(image, bgc);
    if (!color) return attrs; // degenerate: background only
    auto mask = soft_mask(image, bgc, subject_rgb(*color));
    auto st = mask_stats(mask, image.w, image.h);
    if (st.count < kMinSubjectArea) return attrs;

    attrs.color = color;
    double third = image.w / 3.0;
    attrs.position = st.cx < third ? Position::left : (st.cx < 2 * third ? Position::center : Position::right);

    auto query = recenter(mask, image.w, image.h, st.cx, st.cy);
    normalize_inplace(query);
    double best_corr = -2;
    Shape best_shape = Shape::wedge;
    for (int s = 0; s < kNumShapes; ++s) {
        auto [angle, corr] = best_angle(query, (Shape)s);
        (void)angle;
        if (corr > best_corr) {
            best_corr = corr;
            best_shape = (Shape)s;
        }
    }
    if (best_corr >= 0.5) attrs.shape = best_shape;
    return attrs;
}

} // namespace sdg::synth
