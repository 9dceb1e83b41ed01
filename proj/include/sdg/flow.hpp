#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sdg/aggregation.hpp"
#include "sdg/denoiser.hpp"
#include "sdg/encoder.hpp"
#include "sdg/vae.hpp"

namespace sdg::flow {

// Three denoising stages: (1,0) for t >= tau1, (1,1) for tau2 <= t < tau1,
// (0,1) for t < tau2.
struct StageSchedule {
    double tau1 = 0.95;
    double tau2 = 0.85;

    StageSchedule() = default;
    StageSchedule(double t1, double t2) : tau1(t1), tau2(t2) {
        validate(t1 >= 0.0 && t1 <= 1.0 && t2 >= 0.0 && t2 <= 1.0, "stage schedule: thresholds must be in [0,1]");
        validate(t2 <= t1, "stage schedule: tau2 must be <= tau1");
    }
};

struct StageMasks {
    bool mllm = false;
    bool vae = false;
};

inline StageMasks stage_masks(double t, const StageSchedule& s) {
    validate(std::isfinite(t) && t >= 0.0 && t <= 1.0, "stage_masks: t must be in [0,1]");
    if (t >= s.tau1) return {true, false};
    if (t >= s.tau2) return {true, true};
    return {false, true};
}

struct SamplerConfig {
    int64_t n_steps = 32;
    double cfg_scale = 2.5;
    StageSchedule stage{};

    void check() const {
        validate(n_steps >= 1, "sampler: n_steps must be >= 1");
        validate(cfg_scale >= 0.0, "sampler: cfg scale must be >= 0");
    }
};

// t_i = cos((i/T) * pi/2) for i = 0..T: strictly decreasing, t_0 = 1, t_T = 0.
std::vector<double> cosine_timesteps(int64_t n_steps);

template <class T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t);
template <class T>
Tensor<T> velocity_target(const Tensor<T>& x0, const Tensor<T>& x1);

// ---------------------------------------------------------------------------
// Trainable ensemble: aggregator + denoiser + identity projection. The
// encoder and codec trunks stay frozen in both training stages.
// ---------------------------------------------------------------------------

template <class T>
struct Model {
    agg::Dla<T> dla;
    dit::Denoiser<T> denoiser;
    vae::IdentityProjection<T> idproj;
    // training-time layer selection (Appendix-B-style sweeps); keep_all by default
    agg::LayerMask sel_text = agg::LayerMask::all();
    agg::LayerMask sel_image = agg::LayerMask::all();

    void init(const dit::DenoiserConfig& cfg, int64_t stack_layers, bool residual, uint64_t seed);
    // stage 1 excludes the identity projection so no gradient can reach it
    void params(nn::ParamList<T>& ps, bool include_idproj);

    void save(const std::string& path, const nlohmann::json& extra_meta = {}) const;
    static Model<T> load(const std::string& path);
    std::string weight_hash() const;
};

struct DropoutPolicy {
    double p_drop_all = 0.1;            // empty conditioning: the CFG unconditional state
    double p_drop_mllm_reference = 0.1; // encoder sees the prompt only
    double p_drop_vae = 0.1;            // identity tokens removed
};

// Frozen components + the model, wired together for loss/sampling.
template <class T>
struct Pipeline {
    const enc::Encoder<T>* encoder = nullptr;
    const vae::Vae<T>* vae_codec = nullptr;
    const Model<T>* model = nullptr;
    // inference-time zeroing masks (Appendix-A-style sweeps); keep_all normally
    agg::LayerMask zero_text = agg::LayerMask::all();
    agg::LayerMask zero_image = agg::LayerMask::all();

    // effective DLA masks: zeroing may only be applied to a model trained on
    // the full layer axis (the two modes never mix in one call)
    agg::LayerMask effective_text_mask() const;
    agg::LayerMask effective_image_mask() const;
};

// Velocity MSE for one path element; fills parameter grads when gb != null
// and returns velocity-prediction loss. Exposed for oracle tests.
template <class T>
double rf_element_loss(const dit::Denoiser<T>& denoiser, const Tensor<T>& x0, const Tensor<T>& x1, double t,
                       const dit::ConditioningBundle<T>& cond, typename dit::Denoiser<T>::Cache* cache,
                       Tensor<T>* dvel_out);

struct RfStepStats {
    double loss = 0;
    int64_t n_mllm_active = 0;
    int64_t n_vae_active = 0;
    int64_t n_uncond = 0;
};

// One training step over a batch: per element draw t ~ U[0,1] and noise,
// build conditioning under stage masks and dropout, accumulate grads.
template <class T>
RfStepStats rf_train_step(const std::vector<const synth::SubjectSample*>& batch, const Pipeline<T>& pipe,
                          const StageSchedule& schedule, const DropoutPolicy& dropout, bool vae_branch_enabled,
                          Rng& rng, nn::GradBuffer<T>& gb, const nn::ParamList<T>& ps);

struct TraceRow {
    int64_t step = 0;
    double t = 0;
    int m_mllm = 0;
    int m_vae = 0;
};

// Euler integration of an abstract guided velocity field from t=1 noise down
// to t=0. The field sees the stage masks for each step's t.
template <class T>
Tensor<T> sample_ode(const std::function<Tensor<T>(const Tensor<T>&, double, StageMasks)>& guided_velocity,
                     const Tensor<T>& x1, const SamplerConfig& cfg, std::vector<TraceRow>* trace);

struct SampleResult {
    Raster image;
    std::vector<TraceRow> trace;
};

// Full generation: encode prompt/reference once, run the staged CFG sampler,
// decode the final latent.
template <class T>
SampleResult sample(const synth::PromptSpec& prompt, const Raster* reference, const Pipeline<T>& pipe,
                    const SamplerConfig& cfg, uint64_t seed);

} // namespace sdg::flow
