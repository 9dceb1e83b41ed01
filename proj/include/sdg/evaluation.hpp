#pragma once

#include <map>
#include <string>
#include <vector>

#include "sdg/flow.hpp"

namespace sdg::eval {

struct MetricsReport {
    double identity_accuracy = 0;
    double prompt_accuracy = 0;
    double latent_cosine = 0;
    double mean_abs_orientation_delta_deg = 0;
    std::map<int, double> recall_at_k; // k in {5, 10, 15, 20}
    double average_recall_rate = 0;
    int64_t n_samples = 0;
    int64_t n_orientation_failures = 0;
    uint64_t seed = 0;

    nlohmann::json to_json() const;
};

// identity: attribute checker recovers the reference's shape and color;
// cosine: normalized dot product of flattened codec latents
std::pair<bool, double> eval_identity(const Raster& generated, const synth::SubjectSample& sample,
                                      const vae::Vae<real>& codec);

// background and position both match the prompt
bool eval_prompt(const Raster& generated, const synth::SubjectSample& sample);

struct CopyPastePair {
    const Raster* reference;
    const Raster* generated;
    synth::SubjectSpec subject;
};

struct CopyPasteStats {
    std::vector<double> deltas_deg; // wrap-aware, estimator successes only
    int64_t n_failures = 0;
    std::map<int, double> recall_at_k;
    double average_recall_rate = 0;
    double mean_abs_delta_deg = 0;
};

CopyPasteStats copy_paste_metrics(const std::vector<CopyPastePair>& pairs);

struct EvalConfig {
    flow::SamplerConfig sampler{};
    int64_t n_samples = 200;
    uint64_t seed = 0;
};

struct PerSampleRow {
    std::string id;
    bool identity_ok = false;
    bool prompt_ok = false;
    double latent_cosine = 0;
    bool orientation_ok = false;
    double orientation_delta_deg = 0;
};

// Full evaluation: generate one image per sample with a per-sample seed,
// score it against the oracles, aggregate.
MetricsReport run_eval(const std::vector<synth::SubjectSample>& eval_set, const flow::Pipeline<real>& pipe,
                       const EvalConfig& cfg, std::vector<PerSampleRow>* rows = nullptr);

void write_metrics_json(const std::string& path, const MetricsReport& report);
void write_metrics_csv(const std::string& path, const std::vector<PerSampleRow>& rows);

} // namespace sdg::eval
