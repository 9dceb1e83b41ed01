#include "sdg/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace sdg::pipeline {

namespace {
std::string mask_str(const agg::LayerMask& m) {
    if (m.mode == agg::MaskMode::keep_all) return "all";
    return layer_ranges_to_string(m.keep);
}
} // namespace

Config TrainConfig::snapshot(const std::string& command) const {
    Config c;
    c.set("command", command);
    c.set("stage1_steps", std::to_string(stage1_steps));
    c.set("stage2_steps", std::to_string(stage2_steps));
    c.set("batch_size", std::to_string(batch_size));
    c.set("lr", std::to_string(lr));
    c.set("p_drop_all", std::to_string(dropout.p_drop_all));
    c.set("p_drop_mllm_reference", std::to_string(dropout.p_drop_mllm_reference));
    c.set("p_drop_vae", std::to_string(dropout.p_drop_vae));
    c.set("train_tau1", std::to_string(train_schedule.tau1));
    c.set("train_tau2", std::to_string(train_schedule.tau2));
    c.set("seed", std::to_string(seed));
    c.set("dataset", dataset_dir);
    c.set("out", out_dir);
    c.set("encoder_ckpt", encoder_ckpt);
    c.set("ae_ckpt", ae_ckpt);
    c.set("n_blocks", std::to_string(denoiser.n_blocks));
    c.set("width", std::to_string(denoiser.width));
    c.set("n_heads", std::to_string(denoiser.n_heads));
    c.set("residual_dla", residual_dla ? "true" : "false");
    c.set("sel_text", mask_str(sel_text));
    c.set("sel_image", mask_str(sel_image));
    c.set("from_scratch", from_scratch ? "true" : "false");
    return c;
}

RunManifest::RunManifest(std::string command, const Config& resolved) {
    j_["command"] = std::move(command);
    j_["config"] = resolved.entries();
    j_["inputs"] = nlohmann::json::object();
    j_["outputs"] = nlohmann::json::object();
}

void RunManifest::add_input(const std::string& name, const std::string& path) {
    j_["inputs"][name] = {{"path", path}, {"sha256", sha256_file(path)}};
}

void RunManifest::add_output(const std::string& name, const std::string& path) {
    j_["outputs"][name] = {{"path", path}, {"sha256", sha256_file(path)}};
}

void RunManifest::add_note(const std::string& key, const nlohmann::json& value) { j_["notes"][key] = value; }

void RunManifest::write(const std::string& path, double wall_clock_ms) const {
    nlohmann::json out = j_;
    out["content_id"] = sha256_hex(j_.dump());
    out["wall_clock_ms"] = wall_clock_ms;
    std::ofstream f(path);
    require(f.good(), "manifest: cannot write " + path);
    f << out.dump(2) << "\n";
}

void write_loss_csv(const std::string& path, const std::vector<double>& curve) {
    std::ofstream f(path);
    require(f.good(), "loss.csv: cannot write " + path);
    f << "step,loss\n";
    char buf[64];
    for (size_t i = 0; i < curve.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i, curve[i]);
        f << buf;
    }
}

std::vector<bool> parse_layer_ranges(const std::string& spec, int64_t n_layers) {
    std::vector<bool> keep((size_t)n_layers, false);
    if (spec == "all" || spec.empty()) {
        std::fill(keep.begin(), keep.end(), true);
        return keep;
    }
    size_t pos = 0;
    while (pos < spec.size()) {
        size_t comma = spec.find(',', pos);
        std::string part = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        size_t dash = part.find('-');
        try {
            int64_t lo, hi;
            if (dash == std::string::npos) {
                lo = hi = std::stoll(part);
            } else {
                lo = std::stoll(part.substr(0, dash));
                hi = std::stoll(part.substr(dash + 1));
            }
            validate(lo >= 0 && hi >= lo && hi < n_layers,
                     "layer range '" + part + "' out of bounds for " + std::to_string(n_layers) + " layers");
            for (int64_t i = lo; i <= hi; ++i) keep[(size_t)i] = true;
        } catch (const std::invalid_argument&) {
            throw ValidationError("bad layer range: '" + part + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return keep;
}

std::string layer_ranges_to_string(const std::vector<bool>& keep) {
    std::string out;
    int64_t n = (int64_t)keep.size();
    int64_t i = 0;
    while (i < n) {
        if (!keep[(size_t)i]) {
            ++i;
            continue;
        }
        int64_t j = i;
        while (j + 1 < n && keep[(size_t)j + 1]) ++j;
        if (!out.empty()) out += ",";
        out += std::to_string(i);
        if (j > i) out += "-" + std::to_string(j);
        i = j + 1;
    }
    return out.empty() ? "none" : out;
}

namespace {

struct LoadedWorld {
    enc::Encoder<real> encoder;
    vae::Vae<real> codec;
};

LoadedWorld load_world(const TrainConfig& cfg) {
    require(!cfg.encoder_ckpt.empty() && fs::exists(cfg.encoder_ckpt),
            "training: encoder checkpoint missing: " + cfg.encoder_ckpt);
    require(!cfg.ae_ckpt.empty() && fs::exists(cfg.ae_ckpt), "training: ae checkpoint missing: " + cfg.ae_ckpt);
    LoadedWorld w{enc::Encoder<real>::load(cfg.encoder_ckpt), vae::Vae<real>::load(cfg.ae_ckpt)};
    validate(w.encoder.config().width == cfg.denoiser.width,
             "training: encoder width and denoiser width disagree");
    return w;
}

StageResult run_stage(int stage, const TrainConfig& cfg, flow::Model<real>& model, const LoadedWorld& w,
                      int64_t steps) {
    validate(steps >= 0, "training: negative step count");
    validate(cfg.batch_size >= 1, "training: batch_size must be >= 1");
    auto dataset = synth::load_dataset(cfg.dataset_dir);
    validate((int64_t)dataset.size() >= cfg.batch_size, "training: dataset smaller than one batch");

    flow::Pipeline<real> pipe{&w.encoder, &w.codec, &model};
    nn::ParamList<real> ps;
    model.params(ps, /*include_idproj=*/stage == 2);
    nn::Adam<real> opt;
    opt.lr = cfg.lr;
    opt.init(ps);
    nn::GradBuffer<real> gb(ps);

    Rng rng(derive_seed(cfg.seed, stage == 1 ? "train-stage1" : "train-stage2"));
    StageResult result;
    result.loss_curve.reserve((size_t)steps);
    for (int64_t step = 0; step < steps; ++step) {
        std::vector<const synth::SubjectSample*> batch;
        batch.reserve((size_t)cfg.batch_size);
        for (int64_t b = 0; b < cfg.batch_size; ++b)
            batch.push_back(&dataset[(size_t)rng.uniform_int((int64_t)dataset.size())]);
        gb.zero();
        auto stats = flow::rf_train_step<real>(batch, pipe, cfg.train_schedule, cfg.dropout,
                                               /*vae_branch_enabled=*/stage == 2, rng, gb, ps);
        require(std::isfinite(stats.loss),
                "training: non-finite loss at step " + std::to_string(step) + " (seed " +
                    std::to_string(cfg.seed) + ")");
        opt.step(ps, gb);
        result.loss_curve.push_back(stats.loss);
    }
    return result;
}

double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

} // namespace

StageResult train_stage1(const TrainConfig& cfg) {
    auto start = std::chrono::steady_clock::now();
    fs::create_directories(cfg.out_dir);
    std::string ckpt_path = (fs::path(cfg.out_dir) / "ckpt_stage1.bin").string();
    validate(!fs::exists(ckpt_path), "train_stage1: checkpoint already exists in " + cfg.out_dir +
                                         " (run directories are write-once)");

    LoadedWorld w = load_world(cfg);
    flow::Model<real> model;
    model.init(cfg.denoiser, w.encoder.config().n_layers + 1, cfg.residual_dla, derive_seed(cfg.seed, "model"));
    model.sel_text = cfg.sel_text;
    model.sel_image = cfg.sel_image;

    StageResult result = run_stage(1, cfg, model, w, cfg.stage1_steps);
    result.ckpt_path = ckpt_path;

    nlohmann::json extra = {{"stage", 1},
                            {"encoder_sha256", sha256_file(cfg.encoder_ckpt)},
                            {"ae_sha256", sha256_file(cfg.ae_ckpt)}};
    model.save(ckpt_path, extra);

    Config snap = cfg.snapshot("train-stage1");
    snap.save((fs::path(cfg.out_dir) / "config").string());
    write_loss_csv((fs::path(cfg.out_dir) / "loss.csv").string(), result.loss_curve);

    RunManifest mf("train-stage1", snap);
    mf.add_input("encoder", cfg.encoder_ckpt);
    mf.add_input("ae", cfg.ae_ckpt);
    mf.add_input("manifest.jsonl", (fs::path(cfg.dataset_dir) / "manifest.jsonl").string());
    mf.add_output("ckpt_stage1", ckpt_path);
    mf.add_output("loss.csv", (fs::path(cfg.out_dir) / "loss.csv").string());
    mf.write((fs::path(cfg.out_dir) / "manifest.json").string(), elapsed_ms(start));
    return result;
}

StageResult train_stage2(const TrainConfig& cfg, const std::string& stage1_ckpt) {
    auto start = std::chrono::steady_clock::now();
    fs::create_directories(cfg.out_dir);
    std::string ckpt_path = (fs::path(cfg.out_dir) / "ckpt_stage2.bin").string();
    validate(!fs::exists(ckpt_path), "train_stage2: checkpoint already exists in " + cfg.out_dir +
                                         " (run directories are write-once)");

    LoadedWorld w = load_world(cfg);
    flow::Model<real> model;
    if (cfg.from_scratch) {
        model.init(cfg.denoiser, w.encoder.config().n_layers + 1, cfg.residual_dla, derive_seed(cfg.seed, "model"));
        model.sel_text = cfg.sel_text;
        model.sel_image = cfg.sel_image;
    } else {
        require(!stage1_ckpt.empty() && fs::exists(stage1_ckpt),
                "train_stage2: stage1 checkpoint missing: " + stage1_ckpt);
        model = flow::Model<real>::load(stage1_ckpt);
        validate(model.denoiser.config() == cfg.denoiser,
                 "train_stage2: stage1 checkpoint and config disagree on the denoiser");
    }

    StageResult result = run_stage(2, cfg, model, w, cfg.stage2_steps);
    result.ckpt_path = ckpt_path;

    nlohmann::json extra = {{"stage", 2},
                            {"encoder_sha256", sha256_file(cfg.encoder_ckpt)},
                            {"ae_sha256", sha256_file(cfg.ae_ckpt)},
                            {"from_scratch", cfg.from_scratch}};
    if (!cfg.from_scratch) extra["stage1_sha256"] = sha256_file(stage1_ckpt);
    model.save(ckpt_path, extra);

    Config snap = cfg.snapshot("train-stage2");
    snap.save((fs::path(cfg.out_dir) / "config").string());
    write_loss_csv((fs::path(cfg.out_dir) / "loss.csv").string(), result.loss_curve);

    RunManifest mf("train-stage2", snap);
    mf.add_input("encoder", cfg.encoder_ckpt);
    mf.add_input("ae", cfg.ae_ckpt);
    mf.add_input("manifest.jsonl", (fs::path(cfg.dataset_dir) / "manifest.jsonl").string());
    if (!cfg.from_scratch) mf.add_input("ckpt_stage1", stage1_ckpt);
    mf.add_output("ckpt_stage2", ckpt_path);
    mf.add_output("loss.csv", (fs::path(cfg.out_dir) / "loss.csv").string());
    mf.write((fs::path(cfg.out_dir) / "manifest.json").string(), elapsed_ms(start));
    return result;
}

} // namespace sdg::pipeline
