#include <doctest.h>

#include <filesystem>
#include <set>

#include "sdg/serialize.hpp"
#include "sdg/synth.hpp"

using namespace sdg;
using namespace sdg::synth;
namespace fs = std::filesystem;

namespace {
double lanczos3(double x) {
    if (x == 0) return 1.0;
    if (std::abs(x) >= 3) return 0.0;
    double px = M_PI * x;
    return 3 * std::sin(px) * std::sin(px / 3) / (px * px);
}

// Lanczos-3 resampled rotation about the image center; border replicated
// (the 1px ring is pure background on these renders). Exact pixel remap at
// multiples of 90 degrees.
Raster rotate_about_center(const Raster& img, double deg) {
    double c = img.w / 2.0;
    double th = deg * M_PI / 180.0;
    double ct = std::cos(th), st = std::sin(th);
    Raster out(img.w, img.h);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            double dx = x + 0.5 - c, dy = y + 0.5 - c;
            double sx = ct * dx + st * dy + c - 0.5;
            double sy = -st * dx + ct * dy + c - 0.5;
            int x0 = (int)std::floor(sx), y0 = (int)std::floor(sy);
            for (int ch = 0; ch < 3; ++ch) {
                double acc = 0, wsum = 0;
                for (int j = -2; j <= 3; ++j)
                    for (int i = -2; i <= 3; ++i) {
                        int xi = std::clamp(x0 + i, 0, img.w - 1);
                        int yi = std::clamp(y0 + j, 0, img.h - 1);
                        double w = lanczos3(sx - (x0 + i)) * lanczos3(sy - (y0 + j));
                        acc += w * img.px(xi, yi)[ch];
                        wsum += w;
                    }
                out.px(x, y)[ch] = std::clamp(acc / wsum, 0.0, 1.0);
            }
        }
    }
    return out;
}

std::string hash_dir(const fs::path& dir) {
    std::vector<std::string> files;
    for (auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).string());
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const auto& f : files) acc += f + ":" + sha256_file((dir / f).string()) + "\n";
    return sha256_hex(acc);
}
} // namespace

TEST_SUITE("synth.geometry") {
    TEST_CASE("glyphs are big enough and fit the position budget") {
        for (int s = 0; s < kNumShapes; ++s) {
            CAPTURE(std::string(to_string((Shape)s)));
            // area comfortably above the 50px degradation threshold, and the
            // glyph stays inside the frame at the left/right anchors
            CHECK(glyph_area((Shape)s) >= 55.0);
            CHECK(glyph_max_radius((Shape)s) <= 7.5);
        }
    }

    TEST_CASE("no glyph has a rotational near-symmetry") {
        // the orientation oracle needs a unique global correlation peak:
        // away from the true angle the self-correlation must drop
        for (int s = 0; s < kNumShapes; ++s) {
            auto base = render_coverage((Shape)s, 0.0);
            auto norm = [](std::vector<double> v) {
                double mean = 0;
                for (double x : v) mean += x;
                mean /= (double)v.size();
                double n = 0;
                for (double& x : v) {
                    x -= mean;
                    n += x * x;
                }
                n = std::sqrt(n);
                for (double& x : v) x /= n;
                return v;
            };
            auto b = norm(base);
            double worst = -2;
            for (int a = 20; a <= 340; a += 5) {
                auto t = norm(render_coverage((Shape)s, (double)a));
                double corr = 0;
                for (size_t i = 0; i < t.size(); ++i) corr += t[i] * b[i];
                worst = std::max(worst, corr);
            }
            CAPTURE(std::string(to_string((Shape)s)));
            CHECK(worst < 0.95);
        }
    }

    TEST_CASE("subject and background palettes are well separated") {
        double min_d = 1e30;
        for (int s = 0; s < kNumSubjectColors; ++s)
            for (int b = 0; b < kNumBackgrounds; ++b) {
                auto sc = subject_rgb((SubjectColor)s);
                auto bc = background_rgb((BgColor)b);
                double d = 0;
                for (int i = 0; i < 3; ++i) d += (sc[i] - bc[i]) * (sc[i] - bc[i]);
                min_d = std::min(min_d, std::sqrt(d));
            }
        CHECK(min_d > 0.45);
    }
}

TEST_SUITE("synth.render") {
    TEST_CASE("deterministic given identical inputs") {
        SubjectSpec s{Shape::wedge, SubjectColor::red};
        PromptSpec p{BgColor::white, Position::center};
        Raster a = render(s, p, 123.45, 7);
        Raster b = render(s, p, 123.45, 7);
        CHECK(max_abs_diff(a, b) == 0.0);
    }

    TEST_CASE("orientation oracle on clean render at 0 degrees") {
        SubjectSpec s{Shape::wedge, SubjectColor::red};
        PromptSpec p{BgColor::white, Position::center};
        Raster img = render(s, p, 0.0, 7);
        auto est = estimate_orientation(img, s);
        REQUIRE(est.found);
        CHECK(wrap_delta_deg(est.angle_deg, 0.0) <= 2.0);
    }

    TEST_CASE("rotation equivariance of the renderer at 90 degrees") {
        SubjectSpec s{Shape::wedge, SubjectColor::red};
        PromptSpec p{BgColor::white, Position::center};
        Raster r0 = render(s, p, 0.0, 7);
        Raster r90 = render(s, p, 90.0, 7);
        // rotating the 0-degree raster by 90 about the image center maps
        // pixel centers onto pixel centers exactly
        Raster rot = rotate_about_center(r0, 90.0);
        CHECK(max_abs_diff(rot, r90) <= 0.1);
    }

    TEST_CASE("all shapes at several angles stay orientable within 2 degrees") {
        for (int s = 0; s < kNumShapes; ++s) {
            for (double ang : {0.0, 37.0, 123.5, 222.25, 359.0}) {
                SubjectSpec spec{(Shape)s, SubjectColor::blue};
                PromptSpec p{BgColor::yellow, Position::center};
                Raster img = render(spec, p, ang, 1);
                auto est = estimate_orientation(img, spec);
                CAPTURE(to_string((Shape)s));
                CAPTURE(ang);
                REQUIRE(est.found);
                CHECK(wrap_delta_deg(est.angle_deg, ang) <= 2.0);
            }
        }
    }

    TEST_CASE("wrap-aware error near 359 degrees") {
        SubjectSpec s{Shape::arrow, SubjectColor::cyan};
        PromptSpec p{BgColor::mint, Position::center};
        Raster img = render(s, p, 359.0, 3);
        auto est = estimate_orientation(img, s);
        REQUIRE(est.found);
        CHECK(wrap_delta_deg(est.angle_deg, 359.0) <= 2.0);
    }

    TEST_CASE("estimator equivariance under raster rotation") {
        for (int sh = 0; sh < kNumShapes; ++sh) {
            SubjectSpec s{(Shape)sh, SubjectColor::magenta};
            PromptSpec p{BgColor::sky, Position::center};
            Raster img = render(s, p, 20.0, 5);
            auto base = estimate_orientation(img, s);
            REQUIRE(base.found);
            for (double delta : {0.0, 45.0, 90.0, 180.0}) {
                Raster rot = rotate_about_center(img, delta);
                auto est = estimate_orientation(rot, s);
                CAPTURE(std::string(to_string((Shape)sh)));
                CAPTURE(delta);
                REQUIRE(est.found);
                CHECK(wrap_delta_deg(est.angle_deg, base.angle_deg + delta) <= 2.0);
            }
        }
    }

    TEST_CASE("blank image yields no-subject-found") {
        Raster img(kImageSize, kImageSize);
        auto yc = background_rgb(BgColor::yellow);
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) img.set(x, y, yc);
        auto est = estimate_orientation(img, SubjectSpec{Shape::key, SubjectColor::green});
        CHECK(!est.found);
        auto attrs = check_attributes(img);
        CHECK(attrs.background == BgColor::yellow);
        CHECK(!attrs.shape.has_value());
        CHECK(!attrs.color.has_value());
        CHECK(!attrs.position.has_value());
    }

    TEST_CASE("attribute checker recovers a known render") {
        Raster img = render(SubjectSpec{Shape::arrow, SubjectColor::blue}, PromptSpec{BgColor::yellow, Position::left},
                            120.0, 11);
        auto attrs = check_attributes(img);
        REQUIRE(attrs.shape.has_value());
        REQUIRE(attrs.color.has_value());
        REQUIRE(attrs.position.has_value());
        CHECK(*attrs.shape == Shape::arrow);
        CHECK(*attrs.color == SubjectColor::blue);
        CHECK(attrs.background == BgColor::yellow);
        CHECK(*attrs.position == Position::left);
    }

    TEST_CASE("200 random clean renders agree with ground truth") {
        auto samples = generate_dataset(100, 77);
        int n = 0;
        for (const auto& s : samples) {
            // target image carries the prompt; reference is centered
            auto attrs = check_attributes(s.target);
            REQUIRE(attrs.shape.has_value());
            CHECK(*attrs.shape == s.subject.shape);
            CHECK(*attrs.color == s.subject.color);
            CHECK(attrs.background == s.prompt.background);
            CHECK(*attrs.position == s.prompt.position);
            auto rattrs = check_attributes(s.reference);
            REQUIRE(rattrs.shape.has_value());
            CHECK(*rattrs.shape == s.subject.shape);
            CHECK(*rattrs.color == s.subject.color);
            CHECK(rattrs.background == s.ref_background);
            CHECK(*rattrs.position == Position::center);
            n += 2;
        }
        CHECK(n == 200);
    }

    TEST_CASE("oracle closure: orientation recovered on both images") {
        auto samples = generate_dataset(40, 99);
        for (const auto& s : samples) {
            auto er = estimate_orientation(s.reference, s.subject);
            auto et = estimate_orientation(s.target, s.subject);
            REQUIRE(er.found);
            REQUIRE(et.found);
            CHECK(wrap_delta_deg(er.angle_deg, s.ref_orientation_deg) <= 2.0);
            CHECK(wrap_delta_deg(et.angle_deg, s.target_orientation_deg) <= 2.0);
        }
    }
}

TEST_SUITE("synth.dataset") {
    TEST_CASE("construction invariants") {
        auto samples = generate_dataset(4, 0);
        REQUIRE(samples.size() == 4);
        for (const auto& s : samples) {
            CHECK(s.reference.w == kImageSize);
            CHECK(s.target.w == kImageSize);
            CHECK(s.ref_orientation_deg >= 0.0);
            CHECK(s.ref_orientation_deg < 360.0);
        }
    }

    TEST_CASE("rejects non-positive n_pairs") {
        CHECK_THROWS_AS(generate_dataset(0, 0), ValidationError);
        CHECK_THROWS_AS(generate_dataset(-3, 0), ValidationError);
    }

    TEST_CASE("attribute frequencies are near uniform") {
        auto samples = generate_dataset(1000, 0);
        std::array<int, kNumShapes> shape_counts{};
        for (const auto& s : samples) shape_counts[(size_t)s.subject.shape]++;
        for (int c : shape_counts) {
            // within +-5% absolute of 1/6
            CHECK(std::abs(c / 1000.0 - 1.0 / 6) <= 0.05);
        }
    }

    TEST_CASE("orientation delta is uniform on [0,180] wrap-aware") {
        auto samples = generate_dataset(2000, 5);
        // mean of U[0,180] is 90, sd of mean ~ 52/sqrt(2000) ~ 1.16
        double mean = 0;
        int below90 = 0;
        for (const auto& s : samples) {
            double d = wrap_delta_deg(s.ref_orientation_deg, s.target_orientation_deg);
            CHECK(d >= 0.0);
            CHECK(d <= 180.0);
            mean += d;
            if (d < 90) below90++;
        }
        mean /= (double)samples.size();
        CHECK(std::abs(mean - 90.0) < 5.0);
        CHECK(std::abs(below90 / 2000.0 - 0.5) < 0.05);
    }

    TEST_CASE("manifest roundtrip preserves all fields") {
        fs::path dir = fs::temp_directory_path() / "sdg_ds_roundtrip";
        fs::remove_all(dir);
        auto samples = generate_dataset(6, 123);
        write_dataset(dir.string(), samples);
        auto loaded = load_dataset(dir.string());
        REQUIRE(loaded.size() == samples.size());
        for (size_t i = 0; i < samples.size(); ++i) {
            CHECK(loaded[i].id == samples[i].id);
            CHECK(loaded[i].subject == samples[i].subject);
            CHECK(loaded[i].prompt == samples[i].prompt);
            CHECK(loaded[i].ref_background == samples[i].ref_background);
            CHECK(loaded[i].ref_orientation_deg == samples[i].ref_orientation_deg);
            CHECK(loaded[i].target_orientation_deg == samples[i].target_orientation_deg);
            CHECK(loaded[i].seed == samples[i].seed);
            CHECK(max_abs_diff(loaded[i].reference, samples[i].reference) < 1.0 / 255.0 + 1e-9);
        }
        fs::remove_all(dir);
    }

    TEST_CASE("full 5000-pair dataset regenerates byte-identically") {
        fs::path d1 = fs::temp_directory_path() / "sdg_ds_regen1";
        fs::path d2 = fs::temp_directory_path() / "sdg_ds_regen2";
        fs::remove_all(d1);
        fs::remove_all(d2);
        write_dataset(d1.string(), generate_dataset(5000, 0));
        write_dataset(d2.string(), generate_dataset(5000, 0));
        CHECK(hash_dir(d1) == hash_dir(d2));
        fs::remove_all(d1);
        fs::remove_all(d2);
    }
}
