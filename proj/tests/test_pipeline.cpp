#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sdg/ablation.hpp"
#include "sdg/evaluation.hpp"
#include "sdg/pipeline.hpp"

using namespace sdg;
namespace fs = std::filesystem;

namespace {

// tiny but complete world on disk: dataset + encoder + codec checkpoints
struct TinyWorldDirs {
    fs::path root;
    std::string data, encoder, ae;

    explicit TinyWorldDirs(const std::string& tag) {
        root = fs::temp_directory_path() / ("sdg_pipe_" + tag);
        fs::remove_all(root);
        fs::create_directories(root);
        data = (root / "ds").string();
        synth::write_dataset(data, synth::generate_dataset(8, 42));

        enc::EncoderConfig ec;
        ec.n_layers = 2;
        ec.width = 32;
        ec.n_heads = 2;
        enc::Encoder<real> e(ec, 7);
        encoder = (root / "encoder.bin").string();
        e.save(encoder);

        vae::Vae<real> v(8);
        ae = (root / "ae.bin").string();
        v.save(ae);
    }
    ~TinyWorldDirs() { fs::remove_all(root); }

    pipeline::TrainConfig train_cfg(const std::string& out_tag) const {
        pipeline::TrainConfig cfg;
        cfg.stage1_steps = 3;
        cfg.stage2_steps = 2;
        cfg.batch_size = 2;
        cfg.dataset_dir = data;
        cfg.out_dir = (root / out_tag).string();
        cfg.encoder_ckpt = encoder;
        cfg.ae_ckpt = ae;
        cfg.denoiser.n_blocks = 1;
        cfg.denoiser.width = 32;
        cfg.denoiser.n_heads = 2;
        cfg.seed = 5;
        return cfg;
    }
};

} // namespace

TEST_SUITE("pipeline.layers") {
    TEST_CASE("layer range parsing") {
        auto k = pipeline::parse_layer_ranges("0-2,5", 7);
        CHECK(k == std::vector<bool>({true, true, true, false, false, true, false}));
        CHECK(pipeline::parse_layer_ranges("all", 3) == std::vector<bool>({true, true, true}));
        CHECK(pipeline::layer_ranges_to_string(k) == "0-2,5");
        CHECK_THROWS_AS(pipeline::parse_layer_ranges("0-9", 7), ValidationError);
        CHECK_THROWS_AS(pipeline::parse_layer_ranges("x", 7), ValidationError);
        CHECK_THROWS_AS(pipeline::parse_layer_ranges("3-1", 7), ValidationError);
    }
}

TEST_SUITE("pipeline.training") {
    TEST_CASE("stage1 smoke: artifacts written, identity projection untouched") {
        TinyWorldDirs w("s1");
        auto cfg = w.train_cfg("run1");
        auto r = pipeline::train_stage1(cfg);
        CHECK(fs::exists(r.ckpt_path));
        CHECK(fs::exists(fs::path(cfg.out_dir) / "manifest.json"));
        CHECK(fs::exists(fs::path(cfg.out_dir) / "loss.csv"));
        CHECK(fs::exists(fs::path(cfg.out_dir) / "config"));
        CHECK((int64_t)r.loss_curve.size() == cfg.stage1_steps);

        // stage-1 purity: idproj params equal the seeded init, bitwise
        flow::Model<real> fresh;
        fresh.init(cfg.denoiser, 3, cfg.residual_dla, derive_seed(cfg.seed, "model"));
        auto trained = flow::Model<real>::load(r.ckpt_path);
        nn::ParamList<real> a, b;
        fresh.idproj.params(a);
        trained.idproj.params(b);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i)
            for (int64_t j = 0; j < a[i]->value.numel(); ++j) CHECK(a[i]->value[j] == b[i]->value[j]);

        // ... while the denoiser did move
        nn::ParamList<real> da, db;
        fresh.denoiser.params(da);
        trained.denoiser.params(db);
        double moved = 0;
        for (size_t i = 0; i < da.size(); ++i)
            for (int64_t j = 0; j < da[i]->value.numel(); ++j)
                moved = std::max(moved, std::abs((double)da[i]->value[j] - (double)db[i]->value[j]));
        CHECK(moved > 0.0);

        // write-once run directory
        CHECK_THROWS_AS(pipeline::train_stage1(cfg), ValidationError);
    }

    TEST_CASE("same seed gives byte-identical checkpoints and loss curves") {
        TinyWorldDirs w("det");
        auto c1 = w.train_cfg("runA");
        auto c2 = w.train_cfg("runB");
        auto r1 = pipeline::train_stage1(c1);
        auto r2 = pipeline::train_stage1(c2);
        CHECK(sha256_file(r1.ckpt_path) == sha256_file(r2.ckpt_path));
        CHECK(sha256_file((fs::path(c1.out_dir) / "loss.csv").string()) ==
              sha256_file((fs::path(c2.out_dir) / "loss.csv").string()));
    }

    TEST_CASE("stage2 resume with zero steps is a no-op plus the stage1 weights") {
        TinyWorldDirs w("resume");
        auto cfg = w.train_cfg("run1");
        auto s1 = pipeline::train_stage1(cfg);
        auto cfg2 = w.train_cfg("run2");
        cfg2.stage2_steps = 0;
        auto s2 = pipeline::train_stage2(cfg2, s1.ckpt_path);
        auto m1 = flow::Model<real>::load(s1.ckpt_path);
        auto m2 = flow::Model<real>::load(s2.ckpt_path);
        CHECK(m1.weight_hash() == m2.weight_hash());
    }

    TEST_CASE("stage2 trains the identity projection; from-scratch path works") {
        TinyWorldDirs w("s2");
        auto cfg = w.train_cfg("run1");
        auto s1 = pipeline::train_stage1(cfg);
        auto cfg2 = w.train_cfg("run2");
        cfg2.stage2_steps = 4;
        // remove dropout and force the vae-active regime so idproj must move
        cfg2.dropout = {0.0, 0.0, 0.0};
        cfg2.train_schedule = flow::StageSchedule(1.0, 1.0); // vae branch active for all t < 1
        auto s2 = pipeline::train_stage2(cfg2, s1.ckpt_path);
        auto m1 = flow::Model<real>::load(s1.ckpt_path);
        auto m2 = flow::Model<real>::load(s2.ckpt_path);
        nn::ParamList<real> a, b;
        m1.idproj.params(a);
        m2.idproj.params(b);
        double moved = 0;
        for (size_t i = 0; i < a.size(); ++i)
            for (int64_t j = 0; j < a[i]->value.numel(); ++j)
                moved = std::max(moved, std::abs((double)a[i]->value[j] - (double)b[i]->value[j]));
        CHECK(moved > 0.0);

        auto cfg3 = w.train_cfg("run3");
        cfg3.from_scratch = true;
        cfg3.stage2_steps = 2;
        auto ss = pipeline::train_stage2(cfg3, "");
        CHECK(fs::exists(ss.ckpt_path));
    }

    TEST_CASE("stage2 rejects missing stage1 checkpoint and config mismatch") {
        TinyWorldDirs w("rej");
        auto cfg = w.train_cfg("run1");
        CHECK_THROWS_AS(pipeline::train_stage2(cfg, (w.root / "nope.bin").string()), RuntimeFailure);

        auto s1 = pipeline::train_stage1(cfg);
        auto cfg2 = w.train_cfg("run2");
        cfg2.denoiser.n_blocks = 2; // disagrees with the checkpoint
        CHECK_THROWS_AS(pipeline::train_stage2(cfg2, s1.ckpt_path), ValidationError);
    }

    TEST_CASE("missing upstream checkpoints are rejected") {
        TinyWorldDirs w("upstream");
        auto cfg = w.train_cfg("run1");
        cfg.encoder_ckpt = (w.root / "missing.bin").string();
        CHECK_THROWS_AS(pipeline::train_stage1(cfg), RuntimeFailure);
    }
}

TEST_SUITE("evaluation") {
    TEST_CASE("recall thresholds: hand-enumerated case") {
        // deltas {3,7,12,22}: recall@5=.25 @10=.5 @15=.75 @20=.75, avg .5625
        synth::SubjectSpec spec{synth::Shape::arrow, synth::SubjectColor::red};
        synth::PromptSpec p{synth::BgColor::white, synth::Position::center};
        Raster ref = synth::render(spec, p, 40.0, 1);
        std::vector<Raster> gens;
        for (double d : {3.0, 7.0, 12.0, 22.0}) gens.push_back(synth::render(spec, p, 40.0 + d, 1));
        std::vector<eval::CopyPastePair> pairs;
        for (const auto& g : gens) pairs.push_back({&ref, &g, spec});
        auto st = eval::copy_paste_metrics(pairs);
        CHECK(st.n_failures == 0);
        CHECK(st.recall_at_k[5] == doctest::Approx(0.25));
        CHECK(st.recall_at_k[10] == doctest::Approx(0.5));
        CHECK(st.recall_at_k[15] == doctest::Approx(0.75));
        CHECK(st.recall_at_k[20] == doctest::Approx(0.75));
        CHECK(st.average_recall_rate == doctest::Approx(0.5625));
    }

    TEST_CASE("all identical pairs give maximal recall; far pairs give zero") {
        synth::SubjectSpec spec{synth::Shape::key, synth::SubjectColor::green};
        synth::PromptSpec p{synth::BgColor::mint, synth::Position::center};
        Raster a = synth::render(spec, p, 10.0, 1);
        std::vector<eval::CopyPastePair> same(3, {&a, &a, spec});
        auto st = eval::copy_paste_metrics(same);
        for (int k : {5, 10, 15, 20}) CHECK(st.recall_at_k[k] == doctest::Approx(1.0));
        CHECK(st.average_recall_rate == doctest::Approx(1.0));

        Raster far1 = synth::render(spec, p, 40.0, 1);
        Raster far2 = synth::render(spec, p, 300.0, 1);
        std::vector<eval::CopyPastePair> fars{{&a, &far1, spec}, {&a, &far2, spec}};
        auto st2 = eval::copy_paste_metrics(fars);
        CHECK(st2.average_recall_rate == doctest::Approx(0.0));
    }

    TEST_CASE("all-failed estimation is an error; partial failures are counted") {
        Raster blank(32, 32);
        synth::SubjectSpec spec{synth::Shape::comet, synth::SubjectColor::blue};
        std::vector<eval::CopyPastePair> pairs{{&blank, &blank, spec}};
        CHECK_THROWS_AS(eval::copy_paste_metrics(pairs), RuntimeFailure);

        synth::PromptSpec p{synth::BgColor::sky, synth::Position::center};
        Raster good = synth::render(spec, p, 90.0, 1);
        std::vector<eval::CopyPastePair> mixed{{&good, &good, spec}, {&good, &blank, spec}};
        auto st = eval::copy_paste_metrics(mixed);
        CHECK(st.n_failures == 1);
        CHECK((int64_t)st.deltas_deg.size() == 1);
    }

    TEST_CASE("recall is monotone in k and the average identity holds") {
        Rng rng(9);
        for (int trial = 0; trial < 20; ++trial) {
            synth::SubjectSpec spec{synth::Shape::flag, synth::SubjectColor::magenta};
            synth::PromptSpec p{synth::BgColor::lime, synth::Position::center};
            Raster ref = synth::render(spec, p, 0.0, 1);
            std::vector<Raster> gens;
            for (int i = 0; i < 6; ++i)
                gens.push_back(synth::render(spec, p, std::floor(rng.uniform(0.0, 360.0)), 1));
            std::vector<eval::CopyPastePair> pairs;
            for (const auto& g : gens) pairs.push_back({&ref, &g, spec});
            auto st = eval::copy_paste_metrics(pairs);
            CHECK(st.recall_at_k[5] <= st.recall_at_k[10]);
            CHECK(st.recall_at_k[10] <= st.recall_at_k[15]);
            CHECK(st.recall_at_k[15] <= st.recall_at_k[20]);
            double avg = (st.recall_at_k[5] + st.recall_at_k[10] + st.recall_at_k[15] + st.recall_at_k[20]) / 4;
            CHECK(st.average_recall_rate == doctest::Approx(avg).epsilon(1e-12));
        }
    }

    TEST_CASE("identity oracle: self-copy true, blank false, rotation-invariant") {
        vae::Vae<real> codec(3);
        auto s = synth::generate_dataset(1, 11)[0];
        auto [ok, cosine] = eval::eval_identity(s.reference, s, codec);
        CHECK(ok);
        CHECK(cosine == doctest::Approx(1.0).epsilon(1e-6));

        Raster blank(32, 32);
        auto bgc = synth::background_rgb(synth::BgColor::sky);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) blank.set(x, y, bgc);
        auto [ok2, cos2] = eval::eval_identity(blank, s, codec);
        CHECK(!ok2);

        // same subject rotated 90 degrees: attributes are orientation-free
        double rot = std::fmod(s.ref_orientation_deg + 90.0, 360.0);
        Raster rotated = synth::render(s.subject, synth::PromptSpec{s.ref_background, synth::Position::center},
                                       rot, 1);
        auto [ok3, cos3] = eval::eval_identity(rotated, s, codec);
        CHECK(ok3);
    }

    TEST_CASE("prompt oracle") {
        auto s = synth::generate_dataset(1, 13)[0];
        CHECK(eval::eval_prompt(s.target, s));
        // wrong background
        synth::BgColor other =
            (synth::BgColor)(((int)s.prompt.background + 1) % synth::kNumBackgrounds);
        Raster wrong = synth::render(s.subject, synth::PromptSpec{other, s.prompt.position},
                                     s.target_orientation_deg, 1);
        CHECK(!eval::eval_prompt(wrong, s));
    }

    TEST_CASE("200-sample oracle sweep agrees with the manifests") {
        auto data = synth::generate_dataset(100, 15);
        vae::Vae<real> codec(4);
        int id_ok = 0, prompt_ok = 0;
        for (const auto& s : data) {
            synth::SubjectSample self = s;
            if (eval::eval_identity(s.target, self, codec).first) id_ok++;
            if (eval::eval_prompt(s.target, s)) prompt_ok++;
            if (eval::eval_identity(s.reference, self, codec).first) id_ok++;
        }
        CHECK(id_ok == 200);
        CHECK(prompt_ok == 100);
    }
}

TEST_SUITE("ablation") {
    TEST_CASE("default configuration sets have the documented shapes") {
        auto zero = ablate::default_zero_configs(7);
        REQUIRE(zero.size() >= 6);
        CHECK(zero[0].label == "baseline(all)");
        auto sched = ablate::default_schedule_grid();
        CHECK(sched.size() == 9);
        int defaults = 0;
        for (const auto& s : sched) defaults += s.is_default ? 1 : 0;
        CHECK(defaults == 1);
        auto sel = ablate::default_selection_grid(7);
        CHECK(sel.size() == 16);
    }

    TEST_CASE("layer thirds follow the proportional rescaling") {
        // early/middle/late for a 7-entry axis = {0-2, 3-4, 5-6}
        auto zero = ablate::default_zero_configs(7);
        const agg::LayerMask* keep_early = nullptr;
        const agg::LayerMask* keep_late = nullptr;
        for (const auto& z : zero) {
            if (z.label == "image:keep-early") keep_early = &z.image;
            if (z.label == "image:keep-late") keep_late = &z.image;
        }
        REQUIRE(keep_early != nullptr);
        REQUIRE(keep_late != nullptr);
        CHECK(keep_early->keep == std::vector<bool>({true, true, true, false, false, false, false}));
        CHECK(keep_late->keep == std::vector<bool>({false, false, false, false, false, true, true}));
    }

    TEST_CASE("table rendering and csv output") {
        ablate::SweepTable table;
        table.title = "test";
        eval::MetricsReport r;
        r.identity_accuracy = 0.5;
        r.prompt_accuracy = 0.75;
        r.recall_at_k = {{5, 0.1}, {10, 0.2}, {15, 0.3}, {20, 0.4}};
        r.average_recall_rate = 0.25;
        table.rows.push_back({"base", r, true});
        r.identity_accuracy = 0.6;
        table.rows.push_back({"variant", r, false});
        std::string txt = ablate::render_text_table(table);
        CHECK(txt.find("base *") != std::string::npos);
        CHECK(txt.find("(id +0.1000") != std::string::npos);

        fs::path dir = fs::temp_directory_path() / "sdg_sweep_test";
        fs::create_directories(dir);
        std::string csv = (dir / "sweep.csv").string();
        ablate::write_sweep_csv(csv, table);
        std::ifstream f(csv);
        std::string line;
        int lines = 0;
        while (std::getline(f, line)) lines++;
        CHECK(lines == 3);
        fs::remove_all(dir);
    }

    TEST_CASE("selection sweep rejects overlapping run directories") {
        TinyWorldDirs w("selrej");
        auto cfg = w.train_cfg("sweeps");
        fs::create_directories(fs::path(cfg.out_dir) / "rowA");
        std::vector<ablate::SelectionConfig> configs{{"rowA", agg::LayerMask::all(), agg::LayerMask::all()}};
        auto eval_set = synth::generate_dataset(2, 1);
        eval::EvalConfig ecfg;
        ecfg.n_samples = 1;
        CHECK_THROWS_AS(ablate::selection_sweep(cfg, configs, eval_set, ecfg), ValidationError);
    }

    TEST_CASE("zero sweep rejects selection-mode masks") {
        TinyWorldDirs w("zerorej");
        enc::EncoderConfig ec;
        ec.n_layers = 2;
        ec.width = 32;
        ec.n_heads = 2;
        enc::Encoder<real> e(ec, 7);
        vae::Vae<real> v(8);
        flow::Model<real> m;
        m.init({1, 32, 2, 4, 8}, 3, false, 9);
        flow::Pipeline<real> pipe{&e, &v, &m};
        std::vector<ablate::ZeroConfig> configs{
            {"bad", agg::LayerMask::selection({true, false, true}), agg::LayerMask::all()}};
        auto eval_set = synth::generate_dataset(2, 1);
        eval::EvalConfig ecfg;
        ecfg.n_samples = 1;
        CHECK_THROWS_AS(ablate::zero_sweep(pipe, configs, eval_set, ecfg), ValidationError);
    }

    TEST_CASE("attention chart and csv render") {
        agg::LayerAttentionProfile prof;
        prof.text = {0.5, 0.3, 0.2};
        prof.image = {0.1, 0.2, 0.7};
        Raster img = ablate::render_attention_chart(prof);
        CHECK(img.w == 320);
        fs::path dir = fs::temp_directory_path() / "sdg_att_test";
        fs::create_directories(dir);
        ablate::write_attention_csv((dir / "a.csv").string(), prof);
        CHECK(fs::exists(dir / "a.csv"));
        fs::remove_all(dir);
    }
}
