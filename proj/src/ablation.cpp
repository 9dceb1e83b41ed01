#include "sdg/ablation.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace sdg::ablate {

void write_sweep_csv(const std::string& path, const SweepTable& table) {
    std::ofstream f(path);
    require(f.good(), "sweep: cannot write " + path);
    f << "label,baseline,identity_accuracy,prompt_accuracy,latent_cosine,average_recall_rate,"
         "mean_abs_orientation_delta_deg,n_orientation_failures\n";
    char buf[384];
    for (const auto& r : table.rows) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%lld\n", r.label.c_str(),
                      r.is_baseline ? 1 : 0, r.report.identity_accuracy, r.report.prompt_accuracy,
                      r.report.latent_cosine, r.report.average_recall_rate,
                      r.report.mean_abs_orientation_delta_deg, (long long)r.report.n_orientation_failures);
        f << buf;
    }
}

std::string render_text_table(const SweepTable& table) {
    std::ostringstream os;
    os << table.title << "\n";
    for (const auto& n : table.notes) os << "# " << n << "\n";
    const SweepRow* base = nullptr;
    for (const auto& r : table.rows)
        if (r.is_baseline) {
            base = &r;
            break;
        }
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-28s %10s %10s %10s %10s\n", "config", "identity", "prompt", "cosine",
                  "avg_recall");
    os << buf;
    for (const auto& r : table.rows) {
        std::string label = r.label + (r.is_baseline ? " *" : "");
        std::snprintf(buf, sizeof(buf), "%-28s %10.4f %10.4f %10.4f %10.4f", label.c_str(),
                      r.report.identity_accuracy, r.report.prompt_accuracy, r.report.latent_cosine,
                      r.report.average_recall_rate);
        os << buf;
        if (base && !r.is_baseline) {
            std::snprintf(buf, sizeof(buf), "  (id %+0.4f, prompt %+0.4f)",
                          r.report.identity_accuracy - base->report.identity_accuracy,
                          r.report.prompt_accuracy - base->report.prompt_accuracy);
            os << buf;
        }
        os << "\n";
    }
    if (base) os << "* baseline row\n";
    return os.str();
}

SweepTable zero_sweep(const flow::Pipeline<real>& base, const std::vector<ZeroConfig>& configs,
                      const std::vector<synth::SubjectSample>& eval_set, const eval::EvalConfig& ecfg) {
    validate(!configs.empty(), "zero_sweep: no configurations");
    SweepTable table;
    table.title = "inference-time layer zeroing sweep";
    table.notes.push_back("metric deltas are vs the all-layers baseline row");
    bool first = true;
    for (const auto& zc : configs) {
        validate(zc.text.mode != agg::MaskMode::training_select &&
                     zc.image.mode != agg::MaskMode::training_select,
                 "zero_sweep: selection masks are a training-time concept");
        flow::Pipeline<real> pipe = base;
        pipe.zero_text = zc.text;
        pipe.zero_image = zc.image;
        SweepRow row;
        row.label = zc.label;
        row.is_baseline = first;
        row.report = eval::run_eval(eval_set, pipe, ecfg);
        table.rows.push_back(std::move(row));
        first = false;
    }
    return table;
}

namespace {
// Early/middle/late groups rescaled proportionally from the 29-entry axis
// split 0-9 / 10-19 / 20-28; a 7-entry axis maps to {0-2, 3-4, 5-6}.
std::vector<bool> layer_third(int64_t stack_layers, int which) {
    int64_t top = stack_layers - 1;
    int64_t early_end = (int64_t)std::lround((double)top * 9.0 / 28.0);
    int64_t mid_end = (int64_t)std::lround((double)top * 19.0 / 28.0);
    int64_t lo = which == 0 ? 0 : (which == 1 ? early_end + 1 : mid_end + 1);
    int64_t hi = which == 0 ? early_end : (which == 1 ? mid_end : top);
    std::vector<bool> keep((size_t)stack_layers, false);
    for (int64_t i = lo; i <= hi; ++i) keep[(size_t)i] = true;
    return keep;
}
} // namespace

std::vector<ZeroConfig> default_zero_configs(int64_t stack_layers) {
    auto third = [&](int which) { return layer_third(stack_layers, which); };
    auto inv = [&](const std::vector<bool>& k) {
        std::vector<bool> out = k;
        out.flip();
        return out;
    };
    std::vector<ZeroConfig> configs;
    configs.push_back({"baseline(all)", agg::LayerMask::all(), agg::LayerMask::all()});
    configs.push_back({"image:keep-early", agg::LayerMask::all(), agg::LayerMask::zeroing(third(0))});
    configs.push_back({"image:keep-middle", agg::LayerMask::all(), agg::LayerMask::zeroing(third(1))});
    configs.push_back({"image:keep-late", agg::LayerMask::all(), agg::LayerMask::zeroing(third(2))});
    configs.push_back({"image:drop-early", agg::LayerMask::all(), agg::LayerMask::zeroing(inv(third(0)))});
    configs.push_back({"text:keep-early", agg::LayerMask::zeroing(third(0)), agg::LayerMask::all()});
    configs.push_back({"text:keep-late", agg::LayerMask::zeroing(third(2)), agg::LayerMask::all()});
    configs.push_back({"text:drop-late", agg::LayerMask::zeroing(inv(third(2))), agg::LayerMask::all()});
    return configs;
}

SweepTable schedule_sweep(const flow::Pipeline<real>& pipe, const std::vector<ScheduleConfig>& configs,
                          const std::vector<synth::SubjectSample>& eval_set, const eval::EvalConfig& ecfg) {
    validate(!configs.empty(), "schedule_sweep: no configurations");
    SweepTable table;
    table.title = "stage-threshold / cfg sweep";
    table.notes.push_back("pure inference sweep; no retraining");
    for (const auto& sc : configs) {
        eval::EvalConfig cfg = ecfg;
        cfg.sampler.stage = flow::StageSchedule(sc.tau1, sc.tau2); // validates the thresholds
        cfg.sampler.cfg_scale = sc.cfg_scale;
        char label[96];
        std::snprintf(label, sizeof(label), "tau1=%.2f tau2=%.2f cfg=%.1f", sc.tau1, sc.tau2, sc.cfg_scale);
        SweepRow row;
        row.label = label;
        row.is_baseline = sc.is_default;
        row.report = eval::run_eval(eval_set, pipe, cfg);
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::vector<ScheduleConfig> default_schedule_grid() {
    return {
        {0.00, 0.00, 2.5, false}, {1.00, 1.00, 2.5, false}, {0.97, 0.90, 2.5, false},
        {0.85, 0.70, 2.5, false}, {0.95, 0.85, 1.5, false}, {0.95, 0.85, 2.0, false},
        {0.95, 0.85, 2.5, true},  {0.95, 0.85, 3.0, false}, {0.95, 0.85, 4.0, false},
    };
}

SweepTable selection_sweep(const pipeline::TrainConfig& base_cfg, const std::vector<SelectionConfig>& configs,
                           const std::vector<synth::SubjectSample>& eval_set, const eval::EvalConfig& ecfg) {
    validate(!configs.empty(), "selection_sweep: no configurations");
    // distinct run directories, rejected when they already exist
    for (const auto& sc : configs) {
        fs::path dir = fs::path(base_cfg.out_dir) / sc.label;
        validate(!fs::exists(dir), "selection_sweep: run directory already exists: " + dir.string());
    }
    SweepTable table;
    table.title = "training-time layer selection sweep";
    table.notes.push_back("each row is a full two-stage retrain with layers removed from the axis");
    for (const auto& sc : configs) {
        pipeline::TrainConfig cfg = base_cfg;
        cfg.sel_text = sc.text;
        cfg.sel_image = sc.image;
        cfg.out_dir = (fs::path(base_cfg.out_dir) / sc.label).string();
        auto s1 = pipeline::train_stage1(cfg);
        auto s2 = pipeline::train_stage2(cfg, s1.ckpt_path);

        auto encoder = enc::Encoder<real>::load(cfg.encoder_ckpt);
        auto codec = vae::Vae<real>::load(cfg.ae_ckpt);
        auto model = flow::Model<real>::load(s2.ckpt_path);
        flow::Pipeline<real> pipe{&encoder, &codec, &model};
        SweepRow row;
        row.label = sc.label;
        row.is_baseline = sc.text.mode == agg::MaskMode::keep_all && sc.image.mode == agg::MaskMode::keep_all;
        row.report = eval::run_eval(eval_set, pipe, ecfg);
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::vector<SelectionConfig> default_selection_grid(int64_t stack_layers) {
    auto third = [&](int which) { return layer_third(stack_layers, which); };
    std::vector<std::pair<std::string, agg::LayerMask>> groups = {
        {"early", agg::LayerMask::selection(third(0))},
        {"middle", agg::LayerMask::selection(third(1))},
        {"late", agg::LayerMask::selection(third(2))},
        {"all", agg::LayerMask::all()},
    };
    std::vector<SelectionConfig> configs;
    for (const auto& [il, im] : groups)
        for (const auto& [tl, tm] : groups)
            configs.push_back({"img-" + il + "_txt-" + tl, tm, im});
    return configs;
}

Raster render_attention_chart(const agg::LayerAttentionProfile& profile) {
    int64_t n = (int64_t)profile.text.size();
    int w = 320, h = 240;
    Raster img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.set(x, y, {1.0, 1.0, 1.0});

    auto draw_group = [&](const std::vector<double>& vals, int y_base, std::array<double, 3> color) {
        if (vals.empty()) return;
        double vmax = 0;
        for (double v : vals) vmax = std::max(vmax, v);
        if (vmax <= 0) vmax = 1;
        int group_h = 96;
        int bar_w = std::max(2, (int)((w - 40) / (int64_t)vals.size()) - 6);
        for (size_t i = 0; i < vals.size(); ++i) {
            int x0 = 20 + (int)i * ((w - 40) / (int)vals.size());
            int bh = (int)(vals[i] / vmax * group_h);
            for (int y = 0; y < bh; ++y)
                for (int x = 0; x < bar_w; ++x)
                    if (x0 + x < w && y_base - y >= 0) img.set(x0 + x, y_base - y, color);
            // axis tick
            for (int x = 0; x < bar_w; ++x)
                if (x0 + x < w) img.set(x0 + x, y_base + 2, {0.2, 0.2, 0.2});
        }
    };
    draw_group(profile.text, 110, {0.85, 0.35, 0.2});
    draw_group(profile.image, 225, {0.2, 0.45, 0.85});
    return img;
}

void write_attention_csv(const std::string& path, const agg::LayerAttentionProfile& profile) {
    std::ofstream f(path);
    require(f.good(), "attention csv: cannot write " + path);
    f << "layer,text_mean,image_mean\n";
    char buf[96];
    for (size_t i = 0; i < profile.text.size(); ++i) {
        double img = i < profile.image.size() ? profile.image[i] : 0.0;
        std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", i, profile.text[i], img);
        f << buf;
    }
}

} // namespace sdg::ablate
