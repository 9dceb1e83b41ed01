#pragma once

#include <string>
#include <vector>

#include "sdg/config.hpp"
#include "sdg/flow.hpp"

namespace sdg::pipeline {

struct TrainConfig {
    int64_t stage1_steps = 3000;
    int64_t stage2_steps = 1500;
    int64_t batch_size = 8;
    double lr = 3e-4;
    flow::DropoutPolicy dropout{};
    // stage masks during training; the default (1,0) keeps both branches
    // eligible at every t and leaves robustness to the random dropout
    flow::StageSchedule train_schedule{1.0, 0.0};
    uint64_t seed = 0;
    std::string dataset_dir;
    std::string out_dir;
    std::string encoder_ckpt;
    std::string ae_ckpt;
    dit::DenoiserConfig denoiser{};
    bool residual_dla = false;
    agg::LayerMask sel_text = agg::LayerMask::all();
    agg::LayerMask sel_image = agg::LayerMask::all();
    bool from_scratch = false; // stage 2 only: single-stage baseline

    Config snapshot(const std::string& command) const;
};

struct StageResult {
    std::string ckpt_path;
    std::vector<double> loss_curve;
};

// Run-directory layout: config, ckpt_stage{1,2}.bin, manifest.json, loss.csv.
StageResult train_stage1(const TrainConfig& cfg);
StageResult train_stage2(const TrainConfig& cfg, const std::string& stage1_ckpt);

// Manifest shared by every subcommand: resolved config, input/output hashes,
// and a content id derived from them. Wall clock is recorded for humans and
// excluded from the content id (it is the one nondeterministic field).
class RunManifest {
public:
    RunManifest(std::string command, const Config& resolved);
    void add_input(const std::string& name, const std::string& path);
    void add_output(const std::string& name, const std::string& path);
    void add_note(const std::string& key, const nlohmann::json& value);
    void write(const std::string& path, double wall_clock_ms) const;

private:
    nlohmann::json j_;
};

void write_loss_csv(const std::string& path, const std::vector<double>& curve);

// "0-2", "0-2,5", "all" -> keep vector of length n_layers
std::vector<bool> parse_layer_ranges(const std::string& spec, int64_t n_layers);
std::string layer_ranges_to_string(const std::vector<bool>& keep);

} // namespace sdg::pipeline
