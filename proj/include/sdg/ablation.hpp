#pragma once

#include <string>
#include <vector>

#include "sdg/evaluation.hpp"
#include "sdg/pipeline.hpp"

namespace sdg::ablate {

struct SweepRow {
    std::string label;
    eval::MetricsReport report;
    bool is_baseline = false;
};

struct SweepTable {
    std::string title;
    std::vector<std::string> notes;
    std::vector<SweepRow> rows;
};

void write_sweep_csv(const std::string& path, const SweepTable& table);
std::string render_text_table(const SweepTable& table);

// Inference-time zeroing (Appendix-A-style): the trained model is fixed and
// layer groups are zeroed per modality; metric deltas are vs. the first
// (all-layers) row.
struct ZeroConfig {
    std::string label;
    agg::LayerMask text = agg::LayerMask::all();
    agg::LayerMask image = agg::LayerMask::all();
};

SweepTable zero_sweep(const flow::Pipeline<real>& base, const std::vector<ZeroConfig>& configs,
                      const std::vector<synth::SubjectSample>& eval_set, const eval::EvalConfig& ecfg);

// Paper layer groups rescaled to this encoder depth: thirds of [0, M].
std::vector<ZeroConfig> default_zero_configs(int64_t stack_layers);

// Pure-inference threshold/CFG sweep; the default grid mirrors the
// sensitivity table with the production row flagged as baseline.
struct ScheduleConfig {
    double tau1, tau2, cfg_scale;
    bool is_default = false;
};

SweepTable schedule_sweep(const flow::Pipeline<real>& pipe, const std::vector<ScheduleConfig>& configs,
                          const std::vector<synth::SubjectSample>& eval_set, const eval::EvalConfig& ecfg);

std::vector<ScheduleConfig> default_schedule_grid();

// Training-time layer selection (Appendix-B-style): retrains the full
// two-stage pipeline per configuration with layers removed from the axis.
struct SelectionConfig {
    std::string label;
    agg::LayerMask text = agg::LayerMask::all();
    agg::LayerMask image = agg::LayerMask::all();
};

SweepTable selection_sweep(const pipeline::TrainConfig& base_cfg, const std::vector<SelectionConfig>& configs,
                           const std::vector<synth::SubjectSample>& eval_set, const eval::EvalConfig& ecfg);

// thirds of the layer axis plus "all", per modality -> 16 combinations
std::vector<SelectionConfig> default_selection_grid(int64_t stack_layers);

// Bar chart of per-layer attention means (text above, image below).
Raster render_attention_chart(const agg::LayerAttentionProfile& profile);
void write_attention_csv(const std::string& path, const agg::LayerAttentionProfile& profile);

} // namespace sdg::ablate
