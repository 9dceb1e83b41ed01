// sdg: subject-driven generation workbench
//
// Subcommands cover the whole workflow: dataset synthesis, encoder/codec
// pretraining, two-stage diffusion training, sampling, evaluation, ablation
// sweeps, and layer-attention probes. Flags override --config values, which
// override built-in defaults; unknown config keys are hard errors.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "sdg/ablation.hpp"
#include "sdg/evaluation.hpp"
#include "sdg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sdg;

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

// flag > config > default resolution
struct ConfigLayer {
    Config cfg;
    std::set<std::string> known;

    void load(const std::string& path) {
        if (!path.empty()) cfg = Config::from_file(path);
    }
    void finish() const { cfg.check_known_keys(known); }

    void apply_int(CLI::Option* opt, const std::string& key, int64_t& var) {
        known.insert(key);
        if (opt->count() == 0 && cfg.has(key)) var = cfg.get_int(key, var);
    }
    void apply_uint(CLI::Option* opt, const std::string& key, uint64_t& var) {
        known.insert(key);
        if (opt->count() == 0 && cfg.has(key)) var = (uint64_t)cfg.get_int(key, (int64_t)var);
    }
    void apply_double(CLI::Option* opt, const std::string& key, double& var) {
        known.insert(key);
        if (opt->count() == 0 && cfg.has(key)) var = cfg.get_double(key, var);
    }
    void apply_str(CLI::Option* opt, const std::string& key, std::string& var) {
        known.insert(key);
        if (opt->count() == 0 && cfg.has(key)) var = cfg.get_str(key, var);
    }
    void apply_bool(CLI::Option* opt, const std::string& key, bool& var) {
        known.insert(key);
        if (opt->count() == 0 && cfg.has(key)) var = cfg.get_bool(key, var);
    }
};

synth::PromptSpec parse_prompt(const std::string& s) {
    synth::PromptSpec p{synth::BgColor::white, synth::Position::center};
    size_t pos = 0;
    while (pos < s.size()) {
        size_t comma = s.find(',', pos);
        std::string part = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        size_t eq = part.find('=');
        validate(eq != std::string::npos, "prompt: expected key=value, got '" + part + "'");
        std::string key = part.substr(0, eq), val = part.substr(eq + 1);
        if (key == "bg")
            p.background = synth::bg_color_from_string(val);
        else if (key == "pos")
            p.position = synth::position_from_string(val);
        else
            throw ValidationError("prompt: unknown key '" + key + "' (use bg=, pos=)");
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return p;
}

std::string hash_dataset(const std::string& dir) {
    std::vector<std::string> files;
    for (auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).string());
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const auto& f : files) acc += f + ":" + sha256_file((fs::path(dir) / f).string()) + "\n";
    return sha256_hex(acc);
}

struct WorldPaths {
    std::string encoder, ae, ckpt;
};

struct World {
    enc::Encoder<real> encoder;
    vae::Vae<real> codec;
    flow::Model<real> model;

    flow::Pipeline<real> pipe() const { return {&encoder, &codec, &model}; }
};

World load_world(const WorldPaths& p) {
    return {enc::Encoder<real>::load(p.encoder), vae::Vae<real>::load(p.ae), flow::Model<real>::load(p.ckpt)};
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int64_t n, uint64_t seed, const Config& snap) {
    auto start = std::chrono::steady_clock::now();
    validate(!out.empty(), "gen-data: --out is required");
    auto samples = synth::generate_dataset(n, seed);
    synth::write_dataset(out, samples);
    pipeline::RunManifest mf("gen-data", snap);
    mf.add_output("manifest.jsonl", (fs::path(out) / "manifest.jsonl").string());
    mf.add_note("dataset_sha256", hash_dataset((fs::path(out) / "images").string()));
    mf.add_note("n_pairs", n);
    mf.write((fs::path(out) / "manifest.json").string(), elapsed_ms(start));
    std::cout << "wrote " << n << " pairs to " << out << "\n";
    return 0;
}

int cmd_pretrain_encoder(const std::string& data, const std::string& out, const enc::PretrainConfig& pc,
                         const enc::EncoderConfig& ec, const Config& snap) {
    auto start = std::chrono::steady_clock::now();
    validate(!out.empty(), "pretrain-encoder: --out is required");
    fs::create_directories(out);
    auto dataset = synth::load_dataset(data);
    enc::Encoder<real> encoder(ec, derive_seed(pc.seed, "encoder"));
    auto result = enc::pretrain_encoder(encoder, dataset, pc);
    std::string ckpt = (fs::path(out) / "encoder.bin").string();
    encoder.save(ckpt);
    pipeline::write_loss_csv((fs::path(out) / "loss.csv").string(), result.loss_curve);

    pipeline::RunManifest mf("pretrain-encoder", snap);
    mf.add_input("manifest.jsonl", (fs::path(data) / "manifest.jsonl").string());
    mf.add_output("encoder.bin", ckpt);
    mf.add_output("loss.csv", (fs::path(out) / "loss.csv").string());
    mf.add_note("holdout_identity_accuracy", result.holdout_identity_accuracy);
    mf.add_note("holdout_prompt_accuracy", result.holdout_prompt_accuracy);
    mf.add_note("random_init_warning", result.random_init_warning);
    mf.write((fs::path(out) / "manifest.json").string(), elapsed_ms(start));
    if (result.random_init_warning)
        std::cout << "warning: zero training steps, encoder weights are random-init\n";
    std::cout << "holdout identity accuracy " << result.holdout_identity_accuracy << ", prompt accuracy "
              << result.holdout_prompt_accuracy << "\n";
    return 0;
}

int cmd_train_ae(const std::string& data, const std::string& out, const vae::TrainAeConfig& tc,
                 const Config& snap) {
    auto start = std::chrono::steady_clock::now();
    validate(!out.empty(), "train-ae: --out is required");
    fs::create_directories(out);
    auto dataset = synth::load_dataset(data);
    vae::Vae<real> codec(derive_seed(tc.seed, "vae"));
    auto result = codec.train(dataset, tc);
    std::string ckpt = (fs::path(out) / "ae.bin").string();
    codec.save(ckpt);
    pipeline::write_loss_csv((fs::path(out) / "loss.csv").string(), result.loss_curve);

    pipeline::RunManifest mf("train-ae", snap);
    mf.add_input("manifest.jsonl", (fs::path(data) / "manifest.jsonl").string());
    mf.add_output("ae.bin", ckpt);
    mf.add_output("loss.csv", (fs::path(out) / "loss.csv").string());
    mf.add_note("holdout_psnr_db", result.holdout_psnr_db);
    mf.add_note("random_init_warning", result.random_init_warning);
    mf.write((fs::path(out) / "manifest.json").string(), elapsed_ms(start));
    if (result.random_init_warning) std::cout << "warning: zero training steps, codec weights are random-init\n";
    std::cout << "holdout reconstruction psnr " << result.holdout_psnr_db << " dB\n";
    return 0;
}

int cmd_sample(const WorldPaths& wp, const std::string& out, const synth::PromptSpec& prompt,
               const std::string& reference_path, const flow::SamplerConfig& scfg, bool trace, uint64_t seed,
               const Config& snap) {
    auto start = std::chrono::steady_clock::now();
    validate(!out.empty(), "sample: --out is required");
    fs::create_directories(out);
    World w = load_world(wp);

    Raster reference;
    bool has_ref = !reference_path.empty();
    if (has_ref) reference = read_png(reference_path);

    auto result = flow::sample<real>(prompt, has_ref ? &reference : nullptr, w.pipe(), scfg, seed);
    std::string img_path = (fs::path(out) / "sample.png").string();
    write_png(img_path, result.image);

    pipeline::RunManifest mf("sample", snap);
    mf.add_input("encoder", wp.encoder);
    mf.add_input("ae", wp.ae);
    mf.add_input("ckpt", wp.ckpt);
    if (has_ref) mf.add_input("reference", reference_path);
    mf.add_output("sample.png", img_path);
    if (trace) {
        std::string trace_path = (fs::path(out) / "trace.csv").string();
        std::ofstream tf(trace_path);
        require(tf.good(), "sample: cannot write " + trace_path);
        tf << "step,t,m_mllm,m_vae\n";
        char buf[96];
        for (const auto& row : result.trace) {
            std::snprintf(buf, sizeof(buf), "%lld,%.17g,%d,%d\n", (long long)row.step, row.t, row.m_mllm,
                          row.m_vae);
            tf << buf;
        }
        tf.close();
        mf.add_output("trace.csv", trace_path);
    }
    mf.write((fs::path(out) / "manifest.json").string(), elapsed_ms(start));
    std::cout << "wrote " << img_path << "\n";
    return 0;
}

int cmd_eval(const WorldPaths& wp, const std::string& data, const std::string& out, const eval::EvalConfig& ecfg,
             const Config& snap) {
    auto start = std::chrono::steady_clock::now();
    validate(!out.empty(), "eval: --out is required");
    fs::create_directories(out);
    World w = load_world(wp);
    auto eval_set = synth::load_dataset(data);

    std::vector<eval::PerSampleRow> rows;
    auto report = eval::run_eval(eval_set, w.pipe(), ecfg, &rows);
    std::string json_path = (fs::path(out) / "metrics.json").string();
    std::string csv_path = (fs::path(out) / "metrics.csv").string();
    eval::write_metrics_json(json_path, report);
    eval::write_metrics_csv(csv_path, rows);

    pipeline::RunManifest mf("eval", snap);
    mf.add_input("encoder", wp.encoder);
    mf.add_input("ae", wp.ae);
    mf.add_input("ckpt", wp.ckpt);
    mf.add_input("manifest.jsonl", (fs::path(data) / "manifest.jsonl").string());
    mf.add_output("metrics.json", json_path);
    mf.add_output("metrics.csv", csv_path);
    mf.write((fs::path(out) / "manifest.json").string(), elapsed_ms(start));
    std::cout << report.to_json().dump(2) << "\n";
    return 0;
}

void write_sweep_outputs(const std::string& out, const ablate::SweepTable& table, const Config& snap,
                         const std::string& command, std::chrono::steady_clock::time_point start) {
    fs::create_directories(out);
    std::string csv = (fs::path(out) / "sweep.csv").string();
    std::string txt = (fs::path(out) / "sweep.txt").string();
    ablate::write_sweep_csv(csv, table);
    {
        std::ofstream f(txt);
        require(f.good(), "sweep: cannot write " + txt);
        f << ablate::render_text_table(table);
    }
    pipeline::RunManifest mf(command, snap);
    mf.add_output("sweep.csv", csv);
    mf.add_output("sweep.txt", txt);
    mf.write((fs::path(out) / "manifest.json").string(), elapsed_ms(start));
    std::cout << ablate::render_text_table(table);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"subject-driven generation workbench", "sdg"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "print help for every subcommand");

    // shared state bound into subcommands
    std::string config_path, out_dir, data_dir;
    uint64_t seed = 0;

    try {
        // ------------------------------------------------------------------
        // gen-data
        // ------------------------------------------------------------------
        auto* gen = app.add_subcommand("gen-data", "generate the synthetic subject dataset");
        int64_t gen_n = 2000;
        auto* gen_cfg = gen->add_option("--config", config_path, "flat key=value config file");
        auto* gen_seed = gen->add_option("--seed", seed, "rng seed")->capture_default_str();
        auto* gen_out = gen->add_option("--out", out_dir, "output dataset directory");
        auto* gen_nopt = gen->add_option("--n", gen_n, "number of reference/target pairs")->capture_default_str();

        // ------------------------------------------------------------------
        // pretrain-encoder
        // ------------------------------------------------------------------
        auto* pre = app.add_subcommand("pretrain-encoder", "proxy-pretrain the frozen multimodal encoder");
        enc::PretrainConfig pc;
        enc::EncoderConfig ec;
        auto* pre_cfg = pre->add_option("--config", config_path, "flat key=value config file");
        auto* pre_seed = pre->add_option("--seed", pc.seed, "rng seed")->capture_default_str();
        auto* pre_out = pre->add_option("--out", out_dir, "output directory");
        auto* pre_data = pre->add_option("--data", data_dir, "dataset directory");
        auto* pre_steps = pre->add_option("--steps", pc.steps, "training steps")->capture_default_str();
        auto* pre_batch = pre->add_option("--batch", pc.batch_size, "batch size")->capture_default_str();
        auto* pre_lr = pre->add_option("--lr", pc.lr, "learning rate")->capture_default_str();
        auto* pre_layers = pre->add_option("--layers", ec.n_layers, "transformer blocks")->capture_default_str();
        auto* pre_width = pre->add_option("--width", ec.width, "feature width")->capture_default_str();
        auto* pre_heads = pre->add_option("--heads", ec.n_heads, "attention heads")->capture_default_str();

        // ------------------------------------------------------------------
        // train-ae
        // ------------------------------------------------------------------
        auto* tae = app.add_subcommand("train-ae", "train the convolutional autoencoder codec");
        vae::TrainAeConfig tc;
        auto* tae_cfg = tae->add_option("--config", config_path, "flat key=value config file");
        auto* tae_seed = tae->add_option("--seed", tc.seed, "rng seed")->capture_default_str();
        auto* tae_out = tae->add_option("--out", out_dir, "output directory");
        auto* tae_data = tae->add_option("--data", data_dir, "dataset directory");
        auto* tae_steps = tae->add_option("--steps", tc.steps, "training steps")->capture_default_str();
        auto* tae_batch = tae->add_option("--batch", tc.batch_size, "batch size")->capture_default_str();
        auto* tae_lr = tae->add_option("--lr", tc.lr, "learning rate")->capture_default_str();

        // ------------------------------------------------------------------
        // train-stage1 / train-stage2
        // ------------------------------------------------------------------
        pipeline::TrainConfig trc;
        std::string stage1_ckpt;
        std::string sel_text_str = "all", sel_image_str = "all";

        auto add_train_opts = [&](CLI::App* cmd, bool stage2) {
            struct Opts {
                CLI::Option *cfg, *seed, *out, *data, *encoder, *ae, *steps, *batch, *lr, *blocks, *width, *heads,
                    *residual, *sel_text, *sel_image, *p_all, *p_ref, *p_vae, *t1, *t2, *stage1 = nullptr,
                    *scratch = nullptr;
            } o;
            o.cfg = cmd->add_option("--config", config_path, "flat key=value config file");
            o.seed = cmd->add_option("--seed", trc.seed, "rng seed")->capture_default_str();
            o.out = cmd->add_option("--out", trc.out_dir, "run directory");
            o.data = cmd->add_option("--data", trc.dataset_dir, "dataset directory");
            o.encoder = cmd->add_option("--encoder", trc.encoder_ckpt, "encoder checkpoint");
            o.ae = cmd->add_option("--ae", trc.ae_ckpt, "codec checkpoint");
            o.steps = cmd->add_option("--steps", stage2 ? trc.stage2_steps : trc.stage1_steps, "training steps")
                          ->capture_default_str();
            o.batch = cmd->add_option("--batch", trc.batch_size, "batch size")->capture_default_str();
            o.lr = cmd->add_option("--lr", trc.lr, "learning rate")->capture_default_str();
            o.blocks = cmd->add_option("--blocks", trc.denoiser.n_blocks, "denoiser blocks")->capture_default_str();
            o.width = cmd->add_option("--width", trc.denoiser.width, "model width")->capture_default_str();
            o.heads = cmd->add_option("--heads", trc.denoiser.n_heads, "attention heads")->capture_default_str();
            o.residual = cmd->add_flag("--residual-dla", trc.residual_dla, "add layer-M residual in the aggregator");
            o.sel_text = cmd->add_option("--sel-text", sel_text_str, "text LAP training layer selection, e.g. 0-2")
                             ->capture_default_str();
            o.sel_image = cmd->add_option("--sel-image", sel_image_str, "image LAP training layer selection")
                              ->capture_default_str();
            o.p_all = cmd->add_option("--p-drop-all", trc.dropout.p_drop_all, "probability of empty conditioning")
                          ->capture_default_str();
            o.p_ref = cmd->add_option("--p-drop-ref", trc.dropout.p_drop_mllm_reference,
                                      "probability the encoder sees the prompt only")
                          ->capture_default_str();
            o.p_vae = cmd->add_option("--p-drop-vae", trc.dropout.p_drop_vae,
                                      "probability the identity tokens are dropped")
                          ->capture_default_str();
            o.t1 = cmd->add_option("--train-tau1", trc.train_schedule.tau1, "training stage threshold tau1")
                       ->capture_default_str();
            o.t2 = cmd->add_option("--train-tau2", trc.train_schedule.tau2, "training stage threshold tau2")
                       ->capture_default_str();
            if (stage2) {
                o.stage1 = cmd->add_option("--stage1", stage1_ckpt, "stage-1 checkpoint to resume from");
                o.scratch = cmd->add_flag("--from-scratch", trc.from_scratch,
                                          "single-stage baseline: random init instead of a stage-1 checkpoint");
            }
            return o;
        };

        auto* ts1 = app.add_subcommand("train-stage1", "stage 1: train with only encoder-derived conditioning");
        auto ts1_opts = add_train_opts(ts1, false);
        auto* ts2 = app.add_subcommand("train-stage2", "stage 2: joint training with the identity branch");
        auto ts2_opts = add_train_opts(ts2, true);

        // ------------------------------------------------------------------
        // sample
        // ------------------------------------------------------------------
        auto* smp = app.add_subcommand("sample", "generate one image from a prompt and optional reference");
        WorldPaths wp;
        std::string prompt_str = "bg=white,pos=center", reference_path;
        flow::SamplerConfig scfg;
        double tau1 = 0.95, tau2 = 0.85;
        bool trace = false;
        auto* smp_cfg = smp->add_option("--config", config_path, "flat key=value config file");
        auto* smp_seed = smp->add_option("--seed", seed, "rng seed")->capture_default_str();
        auto* smp_out = smp->add_option("--out", out_dir, "output directory");
        auto* smp_enc = smp->add_option("--encoder", wp.encoder, "encoder checkpoint");
        auto* smp_ae = smp->add_option("--ae", wp.ae, "codec checkpoint");
        auto* smp_ckpt = smp->add_option("--ckpt", wp.ckpt, "model checkpoint");
        auto* smp_prompt =
            smp->add_option("--prompt", prompt_str, "prompt, e.g. bg=yellow,pos=left")->capture_default_str();
        auto* smp_ref = smp->add_option("--reference", reference_path, "reference image (png)");
        auto* smp_t1 = smp->add_option("--tau1", tau1, "stage threshold tau1")->capture_default_str();
        auto* smp_t2 = smp->add_option("--tau2", tau2, "stage threshold tau2")->capture_default_str();
        auto* smp_cfgscale = smp->add_option("--cfg", scfg.cfg_scale, "classifier-free guidance scale")
                                 ->capture_default_str();
        auto* smp_steps = smp->add_option("--steps", scfg.n_steps, "denoising steps")->capture_default_str();
        auto* smp_trace = smp->add_flag("--trace", trace, "write the per-step stage trace");

        // ------------------------------------------------------------------
        // eval
        // ------------------------------------------------------------------
        auto* evl = app.add_subcommand("eval", "run the metric suite on an eval dataset");
        eval::EvalConfig ecfg;
        double e_tau1 = 0.95, e_tau2 = 0.85;
        auto* evl_cfg = evl->add_option("--config", config_path, "flat key=value config file");
        auto* evl_seed = evl->add_option("--seed", ecfg.seed, "rng seed")->capture_default_str();
        auto* evl_out = evl->add_option("--out", out_dir, "output directory");
        auto* evl_data = evl->add_option("--data", data_dir, "eval dataset directory");
        auto* evl_enc = evl->add_option("--encoder", wp.encoder, "encoder checkpoint");
        auto* evl_ae = evl->add_option("--ae", wp.ae, "codec checkpoint");
        auto* evl_ckpt = evl->add_option("--ckpt", wp.ckpt, "model checkpoint");
        auto* evl_n = evl->add_option("--n", ecfg.n_samples, "samples to evaluate")->capture_default_str();
        auto* evl_t1 = evl->add_option("--tau1", e_tau1, "stage threshold tau1")->capture_default_str();
        auto* evl_t2 = evl->add_option("--tau2", e_tau2, "stage threshold tau2")->capture_default_str();
        auto* evl_cfgscale =
            evl->add_option("--cfg", ecfg.sampler.cfg_scale, "classifier-free guidance scale")->capture_default_str();
        auto* evl_steps = evl->add_option("--steps", ecfg.sampler.n_steps, "denoising steps")->capture_default_str();

        // ------------------------------------------------------------------
        // ablate {zero|select|schedule}
        // ------------------------------------------------------------------
        auto* abl = app.add_subcommand("ablate", "ablation sweeps");
        abl->require_subcommand(1);

        auto* abz = abl->add_subcommand("zero", "inference-time layer zeroing sweep");
        std::string z_text_keep, z_image_keep;
        auto* abz_cfg = abz->add_option("--config", config_path, "flat key=value config file");
        auto* abz_seed = abz->add_option("--seed", ecfg.seed, "rng seed")->capture_default_str();
        auto* abz_out = abz->add_option("--out", out_dir, "output directory");
        auto* abz_data = abz->add_option("--data", data_dir, "eval dataset directory");
        auto* abz_enc = abz->add_option("--encoder", wp.encoder, "encoder checkpoint");
        auto* abz_ae = abz->add_option("--ae", wp.ae, "codec checkpoint");
        auto* abz_ckpt = abz->add_option("--ckpt", wp.ckpt, "model checkpoint");
        auto* abz_n = abz->add_option("--n", ecfg.n_samples, "samples per configuration")->capture_default_str();
        auto* abz_tk = abz->add_option("--text-keep", z_text_keep, "text layers to keep (others zeroed)");
        auto* abz_ik = abz->add_option("--image-keep", z_image_keep, "image layers to keep (others zeroed)");

        auto* abs_ = abl->add_subcommand("schedule", "threshold/cfg sweep (pure inference)");
        std::vector<std::string> sched_rows;
        auto* abs_cfg = abs_->add_option("--config", config_path, "flat key=value config file");
        auto* abs_seed = abs_->add_option("--seed", ecfg.seed, "rng seed")->capture_default_str();
        auto* abs_out = abs_->add_option("--out", out_dir, "output directory");
        auto* abs_data = abs_->add_option("--data", data_dir, "eval dataset directory");
        auto* abs_enc = abs_->add_option("--encoder", wp.encoder, "encoder checkpoint");
        auto* abs_ae = abs_->add_option("--ae", wp.ae, "codec checkpoint");
        auto* abs_ckpt = abs_->add_option("--ckpt", wp.ckpt, "model checkpoint");
        auto* abs_n = abs_->add_option("--n", ecfg.n_samples, "samples per row")->capture_default_str();
        auto* abs_rows = abs_->add_option("--row", sched_rows, "extra row tau1:tau2:cfg (repeatable)");

        auto* absel = abl->add_subcommand("select", "training-time layer selection sweep (retrains)");
        std::vector<std::string> sel_rows;
        bool sel_grid = false;
        auto* absel_cfg = absel->add_option("--config", config_path, "flat key=value config file");
        auto* absel_seed = absel->add_option("--seed", trc.seed, "rng seed")->capture_default_str();
        auto* absel_out = absel->add_option("--out", out_dir, "output directory (one run dir per row)");
        auto* absel_data = absel->add_option("--data", trc.dataset_dir, "training dataset directory");
        auto* absel_eval = absel->add_option("--eval-data", data_dir, "eval dataset directory");
        auto* absel_enc = absel->add_option("--encoder", trc.encoder_ckpt, "encoder checkpoint");
        auto* absel_ae = absel->add_option("--ae", trc.ae_ckpt, "codec checkpoint");
        auto* absel_s1 = absel->add_option("--stage1-steps", trc.stage1_steps, "stage-1 steps per row")
                             ->capture_default_str();
        auto* absel_s2 = absel->add_option("--stage2-steps", trc.stage2_steps, "stage-2 steps per row")
                             ->capture_default_str();
        auto* absel_batch = absel->add_option("--batch", trc.batch_size, "batch size")->capture_default_str();
        auto* absel_lr = absel->add_option("--lr", trc.lr, "learning rate")->capture_default_str();
        auto* absel_n = absel->add_option("--n", ecfg.n_samples, "eval samples per row")->capture_default_str();
        auto* absel_rows =
            absel->add_option("--row", sel_rows, "row as image-layers:text-layers, e.g. 0-2:all (repeatable)");
        auto* absel_gridf = absel->add_flag("--grid", sel_grid, "run the full thirds-by-thirds grid");
        auto* absel_blocks =
            absel->add_option("--blocks", trc.denoiser.n_blocks, "denoiser blocks")->capture_default_str();
        auto* absel_width = absel->add_option("--width", trc.denoiser.width, "model width")->capture_default_str();
        auto* absel_heads =
            absel->add_option("--heads", trc.denoiser.n_heads, "attention heads")->capture_default_str();

        // ------------------------------------------------------------------
        // probe-layers
        // ------------------------------------------------------------------
        auto* prb = app.add_subcommand("probe-layers", "dump per-layer attention means and a bar chart");
        int64_t prb_n = 16;
        auto* prb_cfg = prb->add_option("--config", config_path, "flat key=value config file");
        auto* prb_seed = prb->add_option("--seed", seed, "rng seed")->capture_default_str();
        auto* prb_out = prb->add_option("--out", out_dir, "output directory");
        auto* prb_data = prb->add_option("--data", data_dir, "dataset directory");
        auto* prb_enc = prb->add_option("--encoder", wp.encoder, "encoder checkpoint");
        auto* prb_ckpt = prb->add_option("--ckpt", wp.ckpt, "model checkpoint");
        auto* prb_nopt = prb->add_option("--n", prb_n, "samples to average over")->capture_default_str();

        app.parse(argc, argv);

        // ------------------------------------------------------------------
        // dispatch
        // ------------------------------------------------------------------
        if (gen->parsed()) {
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(gen_seed, "seed", seed);
            cl.apply_str(gen_out, "out", out_dir);
            cl.apply_int(gen_nopt, "n", gen_n);
            cl.known.insert("config");
            (void)gen_cfg;
            cl.finish();
            Config snap;
            snap.set("seed", std::to_string(seed));
            snap.set("out", out_dir);
            snap.set("n", std::to_string(gen_n));
            return cmd_gen_data(out_dir, gen_n, seed, snap);
        }

        if (pre->parsed()) {
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(pre_seed, "seed", pc.seed);
            cl.apply_str(pre_out, "out", out_dir);
            cl.apply_str(pre_data, "data", data_dir);
            cl.apply_int(pre_steps, "steps", pc.steps);
            cl.apply_int(pre_batch, "batch", pc.batch_size);
            cl.apply_double(pre_lr, "lr", pc.lr);
            cl.apply_int(pre_layers, "layers", ec.n_layers);
            cl.apply_int(pre_width, "width", ec.width);
            cl.apply_int(pre_heads, "heads", ec.n_heads);
            cl.known.insert("config");
            (void)pre_cfg;
            cl.finish();
            Config snap;
            snap.set("seed", std::to_string(pc.seed));
            snap.set("out", out_dir);
            snap.set("data", data_dir);
            snap.set("steps", std::to_string(pc.steps));
            snap.set("batch", std::to_string(pc.batch_size));
            snap.set("lr", std::to_string(pc.lr));
            snap.set("layers", std::to_string(ec.n_layers));
            snap.set("width", std::to_string(ec.width));
            snap.set("heads", std::to_string(ec.n_heads));
            return cmd_pretrain_encoder(data_dir, out_dir, pc, ec, snap);
        }

        if (tae->parsed()) {
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(tae_seed, "seed", tc.seed);
            cl.apply_str(tae_out, "out", out_dir);
            cl.apply_str(tae_data, "data", data_dir);
            cl.apply_int(tae_steps, "steps", tc.steps);
            cl.apply_int(tae_batch, "batch", tc.batch_size);
            cl.apply_double(tae_lr, "lr", tc.lr);
            cl.known.insert("config");
            (void)tae_cfg;
            cl.finish();
            Config snap;
            snap.set("seed", std::to_string(tc.seed));
            snap.set("out", out_dir);
            snap.set("data", data_dir);
            snap.set("steps", std::to_string(tc.steps));
            snap.set("batch", std::to_string(tc.batch_size));
            snap.set("lr", std::to_string(tc.lr));
            return cmd_train_ae(data_dir, out_dir, tc, snap);
        }

        auto finish_train_cfg = [&](auto& opts, bool stage2) {
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(opts.seed, "seed", trc.seed);
            cl.apply_str(opts.out, "out", trc.out_dir);
            cl.apply_str(opts.data, "dataset", trc.dataset_dir);
            cl.apply_str(opts.encoder, "encoder_ckpt", trc.encoder_ckpt);
            cl.apply_str(opts.ae, "ae_ckpt", trc.ae_ckpt);
            cl.apply_int(opts.steps, stage2 ? "stage2_steps" : "stage1_steps",
                         stage2 ? trc.stage2_steps : trc.stage1_steps);
            cl.apply_int(opts.batch, "batch_size", trc.batch_size);
            cl.apply_double(opts.lr, "lr", trc.lr);
            cl.apply_int(opts.blocks, "n_blocks", trc.denoiser.n_blocks);
            cl.apply_int(opts.width, "width", trc.denoiser.width);
            cl.apply_int(opts.heads, "n_heads", trc.denoiser.n_heads);
            cl.apply_bool(opts.residual, "residual_dla", trc.residual_dla);
            cl.apply_str(opts.sel_text, "sel_text", sel_text_str);
            cl.apply_str(opts.sel_image, "sel_image", sel_image_str);
            cl.apply_double(opts.p_all, "p_drop_all", trc.dropout.p_drop_all);
            cl.apply_double(opts.p_ref, "p_drop_mllm_reference", trc.dropout.p_drop_mllm_reference);
            cl.apply_double(opts.p_vae, "p_drop_vae", trc.dropout.p_drop_vae);
            cl.apply_double(opts.t1, "train_tau1", trc.train_schedule.tau1);
            cl.apply_double(opts.t2, "train_tau2", trc.train_schedule.tau2);
            if (stage2) {
                cl.apply_str(opts.stage1, "stage1_ckpt", stage1_ckpt);
                cl.apply_bool(opts.scratch, "from_scratch", trc.from_scratch);
            }
            cl.known.insert("config");
            cl.finish();
            trc.train_schedule = flow::StageSchedule(trc.train_schedule.tau1, trc.train_schedule.tau2);
            int64_t stack = 0;
            {
                // the layer axis length comes from the encoder checkpoint
                auto e = enc::Encoder<real>::load(trc.encoder_ckpt);
                stack = e.config().n_layers + 1;
            }
            if (sel_text_str != "all")
                trc.sel_text = agg::LayerMask::selection(pipeline::parse_layer_ranges(sel_text_str, stack));
            if (sel_image_str != "all")
                trc.sel_image = agg::LayerMask::selection(pipeline::parse_layer_ranges(sel_image_str, stack));
        };

        if (ts1->parsed()) {
            finish_train_cfg(ts1_opts, false);
            auto r = pipeline::train_stage1(trc);
            std::cout << "wrote " << r.ckpt_path << "\n";
            return 0;
        }
        if (ts2->parsed()) {
            finish_train_cfg(ts2_opts, true);
            auto r = pipeline::train_stage2(trc, stage1_ckpt);
            std::cout << "wrote " << r.ckpt_path << "\n";
            return 0;
        }

        if (smp->parsed()) {
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(smp_seed, "seed", seed);
            cl.apply_str(smp_out, "out", out_dir);
            cl.apply_str(smp_enc, "encoder_ckpt", wp.encoder);
            cl.apply_str(smp_ae, "ae_ckpt", wp.ae);
            cl.apply_str(smp_ckpt, "ckpt", wp.ckpt);
            cl.apply_str(smp_prompt, "prompt", prompt_str);
            cl.apply_str(smp_ref, "reference", reference_path);
            cl.apply_double(smp_t1, "tau1", tau1);
            cl.apply_double(smp_t2, "tau2", tau2);
            cl.apply_double(smp_cfgscale, "cfg", scfg.cfg_scale);
            cl.apply_int(smp_steps, "steps", scfg.n_steps);
            cl.apply_bool(smp_trace, "trace", trace);
            cl.known.insert("config");
            cl.finish();
            scfg.stage = flow::StageSchedule(tau1, tau2);
            Config snap;
            snap.set("seed", std::to_string(seed));
            snap.set("out", out_dir);
            snap.set("prompt", prompt_str);
            snap.set("reference", reference_path);
            snap.set("tau1", std::to_string(tau1));
            snap.set("tau2", std::to_string(tau2));
            snap.set("cfg", std::to_string(scfg.cfg_scale));
            snap.set("steps", std::to_string(scfg.n_steps));
            snap.set("trace", trace ? "true" : "false");
            return cmd_sample(wp, out_dir, parse_prompt(prompt_str), reference_path, scfg, trace, seed, snap);
        }

        if (evl->parsed()) {
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(evl_seed, "seed", ecfg.seed);
            cl.apply_str(evl_out, "out", out_dir);
            cl.apply_str(evl_data, "data", data_dir);
            cl.apply_str(evl_enc, "encoder_ckpt", wp.encoder);
            cl.apply_str(evl_ae, "ae_ckpt", wp.ae);
            cl.apply_str(evl_ckpt, "ckpt", wp.ckpt);
            cl.apply_int(evl_n, "n", ecfg.n_samples);
            cl.apply_double(evl_t1, "tau1", e_tau1);
            cl.apply_double(evl_t2, "tau2", e_tau2);
            cl.apply_double(evl_cfgscale, "cfg", ecfg.sampler.cfg_scale);
            cl.apply_int(evl_steps, "steps", ecfg.sampler.n_steps);
            cl.known.insert("config");
            cl.finish();
            ecfg.sampler.stage = flow::StageSchedule(e_tau1, e_tau2);
            Config snap;
            snap.set("seed", std::to_string(ecfg.seed));
            snap.set("out", out_dir);
            snap.set("data", data_dir);
            snap.set("n", std::to_string(ecfg.n_samples));
            snap.set("tau1", std::to_string(e_tau1));
            snap.set("tau2", std::to_string(e_tau2));
            snap.set("cfg", std::to_string(ecfg.sampler.cfg_scale));
            snap.set("steps", std::to_string(ecfg.sampler.n_steps));
            return cmd_eval(wp, data_dir, out_dir, ecfg, snap);
        }

        if (abz->parsed()) {
            auto start = std::chrono::steady_clock::now();
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(abz_seed, "seed", ecfg.seed);
            cl.apply_str(abz_out, "out", out_dir);
            cl.apply_str(abz_data, "data", data_dir);
            cl.apply_str(abz_enc, "encoder_ckpt", wp.encoder);
            cl.apply_str(abz_ae, "ae_ckpt", wp.ae);
            cl.apply_str(abz_ckpt, "ckpt", wp.ckpt);
            cl.apply_int(abz_n, "n", ecfg.n_samples);
            cl.apply_str(abz_tk, "text_keep", z_text_keep);
            cl.apply_str(abz_ik, "image_keep", z_image_keep);
            cl.known.insert("config");
            cl.finish();
            World w = load_world(wp);
            auto eval_set = synth::load_dataset(data_dir);
            int64_t stack = w.encoder.config().n_layers + 1;
            std::vector<ablate::ZeroConfig> configs;
            if (z_text_keep.empty() && z_image_keep.empty()) {
                configs = ablate::default_zero_configs(stack);
            } else {
                configs.push_back({"baseline(all)", agg::LayerMask::all(), agg::LayerMask::all()});
                ablate::ZeroConfig custom;
                custom.label = "custom";
                if (!z_text_keep.empty())
                    custom.text = agg::LayerMask::zeroing(pipeline::parse_layer_ranges(z_text_keep, stack));
                if (!z_image_keep.empty())
                    custom.image = agg::LayerMask::zeroing(pipeline::parse_layer_ranges(z_image_keep, stack));
                configs.push_back(custom);
            }
            auto table = ablate::zero_sweep(w.pipe(), configs, eval_set, ecfg);
            Config snap;
            snap.set("seed", std::to_string(ecfg.seed));
            snap.set("out", out_dir);
            snap.set("data", data_dir);
            snap.set("n", std::to_string(ecfg.n_samples));
            snap.set("text_keep", z_text_keep);
            snap.set("image_keep", z_image_keep);
            write_sweep_outputs(out_dir, table, snap, "ablate-zero", start);
            return 0;
        }

        if (abs_->parsed()) {
            auto start = std::chrono::steady_clock::now();
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(abs_seed, "seed", ecfg.seed);
            cl.apply_str(abs_out, "out", out_dir);
            cl.apply_str(abs_data, "data", data_dir);
            cl.apply_str(abs_enc, "encoder_ckpt", wp.encoder);
            cl.apply_str(abs_ae, "ae_ckpt", wp.ae);
            cl.apply_str(abs_ckpt, "ckpt", wp.ckpt);
            cl.apply_int(abs_n, "n", ecfg.n_samples);
            cl.known.insert("config");
            (void)abs_rows;
            cl.finish();
            World w = load_world(wp);
            auto eval_set = synth::load_dataset(data_dir);
            std::vector<ablate::ScheduleConfig> grid;
            if (sched_rows.empty()) {
                grid = ablate::default_schedule_grid();
            } else {
                for (const auto& row : sched_rows) {
                    double t1, t2, cg;
                    validate(std::sscanf(row.c_str(), "%lf:%lf:%lf", &t1, &t2, &cg) == 3,
                             "ablate schedule: bad --row '" + row + "', want tau1:tau2:cfg");
                    grid.push_back({t1, t2, cg, false});
                }
                grid.front().is_default = true;
            }
            auto table = ablate::schedule_sweep(w.pipe(), grid, eval_set, ecfg);
            Config snap;
            snap.set("seed", std::to_string(ecfg.seed));
            snap.set("out", out_dir);
            snap.set("data", data_dir);
            snap.set("n", std::to_string(ecfg.n_samples));
            write_sweep_outputs(out_dir, table, snap, "ablate-schedule", start);
            return 0;
        }

        if (absel->parsed()) {
            auto start = std::chrono::steady_clock::now();
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(absel_seed, "seed", trc.seed);
            cl.apply_str(absel_out, "out", out_dir);
            cl.apply_str(absel_data, "dataset", trc.dataset_dir);
            cl.apply_str(absel_eval, "eval_data", data_dir);
            cl.apply_str(absel_enc, "encoder_ckpt", trc.encoder_ckpt);
            cl.apply_str(absel_ae, "ae_ckpt", trc.ae_ckpt);
            cl.apply_int(absel_s1, "stage1_steps", trc.stage1_steps);
            cl.apply_int(absel_s2, "stage2_steps", trc.stage2_steps);
            cl.apply_int(absel_batch, "batch_size", trc.batch_size);
            cl.apply_double(absel_lr, "lr", trc.lr);
            cl.apply_int(absel_n, "n", ecfg.n_samples);
            cl.apply_int(absel_blocks, "n_blocks", trc.denoiser.n_blocks);
            cl.apply_int(absel_width, "width", trc.denoiser.width);
            cl.apply_int(absel_heads, "n_heads", trc.denoiser.n_heads);
            cl.known.insert("config");
            (void)absel_rows;
            (void)absel_gridf;
            cl.finish();
            trc.out_dir = out_dir;
            int64_t stack = 0;
            {
                auto e = enc::Encoder<real>::load(trc.encoder_ckpt);
                stack = e.config().n_layers + 1;
            }
            std::vector<ablate::SelectionConfig> configs;
            if (sel_grid) {
                configs = ablate::default_selection_grid(stack);
            } else if (!sel_rows.empty()) {
                configs.push_back({"baseline-all", agg::LayerMask::all(), agg::LayerMask::all()});
                for (const auto& row : sel_rows) {
                    size_t colon = row.find(':');
                    validate(colon != std::string::npos,
                             "ablate select: bad --row '" + row + "', want image-layers:text-layers");
                    std::string img = row.substr(0, colon), txt = row.substr(colon + 1);
                    ablate::SelectionConfig sc;
                    sc.label = "img-" + img + "_txt-" + txt;
                    if (img != "all") sc.image = agg::LayerMask::selection(pipeline::parse_layer_ranges(img, stack));
                    if (txt != "all") sc.text = agg::LayerMask::selection(pipeline::parse_layer_ranges(txt, stack));
                    configs.push_back(sc);
                }
            } else {
                throw ValidationError("ablate select: pass --grid or at least one --row");
            }
            auto eval_set = synth::load_dataset(data_dir);
            auto table = ablate::selection_sweep(trc, configs, eval_set, ecfg);
            Config snap = trc.snapshot("ablate-select");
            snap.set("n", std::to_string(ecfg.n_samples));
            write_sweep_outputs(out_dir, table, snap, "ablate-select", start);
            return 0;
        }

        if (prb->parsed()) {
            auto start = std::chrono::steady_clock::now();
            ConfigLayer cl;
            cl.load(config_path);
            cl.apply_uint(prb_seed, "seed", seed);
            cl.apply_str(prb_out, "out", out_dir);
            cl.apply_str(prb_data, "data", data_dir);
            cl.apply_str(prb_enc, "encoder_ckpt", wp.encoder);
            cl.apply_str(prb_ckpt, "ckpt", wp.ckpt);
            cl.apply_int(prb_nopt, "n", prb_n);
            cl.known.insert("config");
            cl.finish();
            validate(!out_dir.empty(), "probe-layers: --out is required");
            fs::create_directories(out_dir);
            auto encoder = enc::Encoder<real>::load(wp.encoder);
            auto model = flow::Model<real>::load(wp.ckpt);
            auto dataset = synth::load_dataset(data_dir);
            validate((int64_t)dataset.size() >= prb_n, "probe-layers: dataset smaller than --n");
            agg::LayerAttentionProfile acc;
            for (int64_t i = 0; i < prb_n; ++i) {
                auto toks = enc::tokenize(dataset[(size_t)i].prompt, &dataset[(size_t)i].reference,
                                          encoder.config());
                auto prof = agg::extract_layer_attention(encoder.encode(toks), model.dla);
                if (acc.text.empty()) {
                    acc = prof;
                } else {
                    for (size_t l = 0; l < prof.text.size(); ++l) acc.text[l] += prof.text[l];
                    for (size_t l = 0; l < prof.image.size(); ++l) acc.image[l] += prof.image[l];
                }
            }
            for (auto& v : acc.text) v /= (double)prb_n;
            for (auto& v : acc.image) v /= (double)prb_n;

            std::string csv = (fs::path(out_dir) / "layer_attention.csv").string();
            std::string png = (fs::path(out_dir) / "layer_attention.png").string();
            ablate::write_attention_csv(csv, acc);
            write_png(png, ablate::render_attention_chart(acc));
            Config snap;
            snap.set("seed", std::to_string(seed));
            snap.set("out", out_dir);
            snap.set("data", data_dir);
            snap.set("n", std::to_string(prb_n));
            pipeline::RunManifest mf("probe-layers", snap);
            mf.add_input("encoder", wp.encoder);
            mf.add_input("ckpt", wp.ckpt);
            mf.add_output("layer_attention.csv", csv);
            mf.add_output("layer_attention.png", png);
            mf.write((fs::path(out_dir) / "manifest.json").string(), elapsed_ms(start));
            std::cout << "wrote " << csv << "\n";
            return 0;
        }

        return 0;
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 2;
    }
}
