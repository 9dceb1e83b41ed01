#include "sdg/flow.hpp"

namespace sdg::flow {

std::vector<double> cosine_timesteps(int64_t n_steps) {
    validate(n_steps >= 1, "cosine_timesteps: n_steps must be >= 1");
    std::vector<double> ts((size_t)n_steps + 1);
    for (int64_t i = 0; i <= n_steps; ++i) ts[(size_t)i] = std::cos((double)i / (double)n_steps * M_PI / 2.0);
    ts[0] = 1.0;
    ts[(size_t)n_steps] = 0.0;
    return ts;
}

template <class T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t) {
    validate(x0.shape == x1.shape, "interpolate: shape mismatch");
    validate(std::isfinite(t) && t >= 0.0 && t <= 1.0, "interpolate: t must be in [0,1]");
    Tensor<T> out(x0.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = (T)((1.0 - t) * (double)x0[i] + t * (double)x1[i]);
    return out;
}

template <class T>
Tensor<T> velocity_target(const Tensor<T>& x0, const Tensor<T>& x1) {
    validate(x0.shape == x1.shape, "velocity_target: shape mismatch");
    Tensor<T> out(x0.shape);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x0[i] - x1[i];
    return out;
}

template <class T>
void Model<T>::init(const dit::DenoiserConfig& cfg, int64_t stack_layers, bool residual, uint64_t seed) {
    dla.init(cfg.width, cfg.n_heads, stack_layers, residual, derive_seed(seed, "model-dla"));
    denoiser = dit::Denoiser<T>(cfg, derive_seed(seed, "model-dit"));
    idproj.init(cfg.width, derive_seed(seed, "model-idproj"));
}

template <class T>
void Model<T>::params(nn::ParamList<T>& ps, bool include_idproj) {
    dla.params(ps);
    denoiser.params(ps);
    if (include_idproj) idproj.params(ps);
}

namespace {
nlohmann::json mask_to_json(const agg::LayerMask& m) {
    return {{"mode", m.mode == agg::MaskMode::keep_all          ? "keep_all"
                     : m.mode == agg::MaskMode::inference_zero ? "inference_zero"
                                                               : "training_select"},
            {"keep", m.keep}};
}
agg::LayerMask mask_from_json(const nlohmann::json& j) {
    agg::LayerMask m;
    std::string mode = j.at("mode").get<std::string>();
    m.mode = mode == "keep_all"         ? agg::MaskMode::keep_all
             : mode == "inference_zero" ? agg::MaskMode::inference_zero
                                        : agg::MaskMode::training_select;
    m.keep = j.at("keep").get<std::vector<bool>>();
    return m;
}
} // namespace

template <class T>
void Model<T>::save(const std::string& path, const nlohmann::json& extra_meta) const {
    Checkpoint ck;
    ck.kind = "model";
    ck.dtype = sizeof(T) == 4 ? "f32" : "f64";
    ck.meta = extra_meta;
    dla.save_into(ck);
    denoiser.save_into(ck);
    {
        nn::ParamList<T> ps;
        const_cast<Model<T>*>(this)->idproj.params(ps);
        for (auto* p : ps) ck.put(p->name, p->value);
    }
    ck.meta["sel_text"] = mask_to_json(sel_text);
    ck.meta["sel_image"] = mask_to_json(sel_image);
    save_checkpoint(path, ck);
}

template <class T>
Model<T> Model<T>::load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path, "model");
    const auto& dm = ck.meta.at("denoiser");
    dit::DenoiserConfig cfg;
    cfg.n_blocks = dm.at("n_blocks").get<int64_t>();
    cfg.width = dm.at("width").get<int64_t>();
    cfg.n_heads = dm.at("n_heads").get<int64_t>();
    cfg.latent_channels = dm.at("latent_channels").get<int64_t>();
    cfg.latent_hw = dm.at("latent_hw").get<int64_t>();
    int64_t stack_layers = ck.meta.at("dla").at("stack_layers").get<int64_t>();
    bool residual = ck.meta.at("dla").at("residual_to_last_layer").get<bool>();
    Model<T> m;
    m.init(cfg, stack_layers, residual, 0);
    m.dla.load_from(ck);
    m.denoiser.load_from(ck);
    {
        nn::ParamList<T> ps;
        m.idproj.params(ps);
        for (auto* p : ps) ck.get(p->name, p->value);
    }
    m.sel_text = mask_from_json(ck.meta.at("sel_text"));
    m.sel_image = mask_from_json(ck.meta.at("sel_image"));
    return m;
}

template <class T>
std::string Model<T>::weight_hash() const {
    nn::ParamList<T> ps;
    const_cast<Model<T>*>(this)->params(ps, true);
    std::string acc;
    for (auto* p : ps) acc += sha256_hex(p->value.data(), (size_t)p->value.numel() * sizeof(T));
    return sha256_hex(acc);
}

template <class T>
agg::LayerMask Pipeline<T>::effective_text_mask() const {
    if (zero_text.mode != agg::MaskMode::keep_all) {
        validate(model->sel_text.mode == agg::MaskMode::keep_all,
                 "layer masks: zeroing cannot be combined with a selection-trained model");
        return zero_text;
    }
    return model->sel_text;
}

template <class T>
agg::LayerMask Pipeline<T>::effective_image_mask() const {
    if (zero_image.mode != agg::MaskMode::keep_all) {
        validate(model->sel_image.mode == agg::MaskMode::keep_all,
                 "layer masks: zeroing cannot be combined with a selection-trained model");
        return zero_image;
    }
    return model->sel_image;
}

template <class T>
double rf_element_loss(const dit::Denoiser<T>& denoiser, const Tensor<T>& x0, const Tensor<T>& x1, double t,
                       const dit::ConditioningBundle<T>& cond, typename dit::Denoiser<T>::Cache* cache,
                       Tensor<T>* dvel_out) {
    Tensor<T> x_t = interpolate(x0, x1, t);
    Tensor<T> vstar = velocity_target(x0, x1);
    Tensor<T> vel = denoiser.predict_velocity(x_t, t, cond, cache);
    int64_t n = vel.numel();
    double loss = 0;
    if (dvel_out) *dvel_out = Tensor<T>(vel.shape);
    for (int64_t i = 0; i < n; ++i) {
        double d = (double)vel[i] - (double)vstar[i];
        loss += d * d;
        if (dvel_out) (*dvel_out)[i] = (T)(2.0 * d / (double)n);
    }
    return loss / (double)n;
}

template <class T>
RfStepStats rf_train_step(const std::vector<const synth::SubjectSample*>& batch, const Pipeline<T>& pipe,
                          const StageSchedule& schedule, const DropoutPolicy& dropout, bool vae_branch_enabled,
                          Rng& rng, nn::GradBuffer<T>& gb, const nn::ParamList<T>& ps) {
    validate(!batch.empty(), "rf_train_step: empty batch");
    RfStepStats stats;
    const auto& dcfg = pipe.model->denoiser.config();
    int64_t latent_numel = dcfg.latent_channels * dcfg.latent_hw * dcfg.latent_hw;

    agg::LayerMask text_mask = pipe.effective_text_mask();
    agg::LayerMask image_mask = pipe.effective_image_mask();

    for (const synth::SubjectSample* sample : batch) {
        double t = rng.uniform();
        bool drop_all = rng.bernoulli(dropout.p_drop_all);
        bool drop_ref = rng.bernoulli(dropout.p_drop_mllm_reference);
        bool drop_vae = rng.bernoulli(dropout.p_drop_vae);

        StageMasks masks = stage_masks(t, schedule);
        bool mllm_active = masks.mllm && !drop_all;
        bool vae_active = masks.vae && !drop_all && !drop_vae && vae_branch_enabled;

        Tensor<T> x0 = pipe.vae_codec->encode_latent(sample->target);
        Tensor<T> x1({dcfg.latent_channels, dcfg.latent_hw, dcfg.latent_hw});
        for (int64_t i = 0; i < latent_numel; ++i) x1[i] = (T)rng.normal();

        dit::ConditioningBundle<T> cond;
        enc::LayerFeatureStack<T> stack;
        agg::DlaCache<T> dla_cache;
        Tensor<T> ref_latent;
        if (mllm_active) {
            enc::TokenSeq toks =
                enc::tokenize(sample->prompt, drop_ref ? nullptr : &sample->reference, pipe.encoder->config());
            stack = pipe.encoder->encode(toks);
            cond.mllm_tokens = pipe.model->dla.forward(stack, text_mask, image_mask, &dla_cache);
            cond.mllm_active = true;
            stats.n_mllm_active++;
        }
        if (vae_active) {
            ref_latent = pipe.vae_codec->encode_latent(sample->reference);
            cond.vae_tokens = pipe.model->idproj.forward(ref_latent);
            cond.vae_active = true;
            stats.n_vae_active++;
        }
        if (!mllm_active && !vae_active) stats.n_uncond++;

        typename dit::Denoiser<T>::Cache cache;
        Tensor<T> dvel;
        double loss = rf_element_loss(pipe.model->denoiser, x0, x1, t, cond, &cache, &dvel);
        require(std::isfinite(loss), "rf_loss: non-finite loss (sample id " + sample->id + ", t=" +
                                         std::to_string(t) + ")");
        stats.loss += loss;

        dvel.scale(T(1.0 / (double)batch.size()));
        auto ig = pipe.model->denoiser.backward(dvel, cache, gb, ps);
        if (mllm_active) pipe.model->dla.backward(ig.d_mllm, dla_cache, gb, ps);
        if (vae_active) pipe.model->idproj.backward(ref_latent, ig.d_vae, gb, ps);
    }
    stats.loss /= (double)batch.size();
    return stats;
}

template <class T>
Tensor<T> sample_ode(const std::function<Tensor<T>(const Tensor<T>&, double, StageMasks)>& guided_velocity,
                     const Tensor<T>& x1, const SamplerConfig& cfg, std::vector<TraceRow>* trace) {
    cfg.check();
    std::vector<double> ts = cosine_timesteps(cfg.n_steps);
    Tensor<T> x = x1;
    for (int64_t i = 0; i < cfg.n_steps; ++i) {
        double t = ts[(size_t)i];
        StageMasks masks = stage_masks(t, cfg.stage);
        if (trace) trace->push_back({i, t, masks.mllm ? 1 : 0, masks.vae ? 1 : 0});
        Tensor<T> v = guided_velocity(x, t, masks);
        require(v.shape == x.shape, "sample_ode: velocity shape mismatch");
        double dt = t - ts[(size_t)i + 1];
        for (int64_t j = 0; j < x.numel(); ++j) x[j] += (T)dt * v[j];
    }
    return x;
}

template <class T>
SampleResult sample(const synth::PromptSpec& prompt, const Raster* reference, const Pipeline<T>& pipe,
                    const SamplerConfig& cfg, uint64_t seed) {
    cfg.check();
    const auto& dcfg = pipe.model->denoiser.config();
    validate(pipe.encoder->config().width == dcfg.width, "sample: encoder/denoiser width mismatch");

    agg::LayerMask text_mask = pipe.effective_text_mask();
    agg::LayerMask image_mask = pipe.effective_image_mask();

    // conditioning sources do not depend on t; build once
    enc::TokenSeq toks = enc::tokenize(prompt, reference, pipe.encoder->config());
    enc::LayerFeatureStack<T> stack = pipe.encoder->encode(toks);
    // a text-only stack must not be aggregated under an image-layer mask
    agg::LayerMask img_mask_used = reference ? image_mask : agg::LayerMask::all();
    Tensor<T> mllm_tokens = pipe.model->dla.forward(stack, text_mask, img_mask_used, nullptr);
    Tensor<T> vae_tokens;
    if (reference) {
        Tensor<T> ref_latent = pipe.vae_codec->encode_latent(*reference);
        vae_tokens = pipe.model->idproj.forward(ref_latent);
    }

    Rng rng(derive_seed(seed, "sample-noise"));
    Tensor<T> x1({dcfg.latent_channels, dcfg.latent_hw, dcfg.latent_hw});
    for (int64_t i = 0; i < x1.numel(); ++i) x1[i] = (T)rng.normal();

    auto guided = [&](const Tensor<T>& x, double t, StageMasks masks) {
        dit::ConditioningBundle<T> cond;
        cond.mllm_active = masks.mllm;
        if (masks.mllm) cond.mllm_tokens = mllm_tokens;
        cond.vae_active = masks.vae && reference != nullptr;
        if (cond.vae_active) cond.vae_tokens = vae_tokens;

        if (cfg.cfg_scale == 0.0) return pipe.model->denoiser.predict_velocity(x, t, {}, nullptr);
        Tensor<T> v_cond = pipe.model->denoiser.predict_velocity(x, t, cond, nullptr);
        if (cfg.cfg_scale == 1.0) return v_cond;
        Tensor<T> v_uncond = pipe.model->denoiser.predict_velocity(x, t, {}, nullptr);
        Tensor<T> v(v_cond.shape);
        for (int64_t i = 0; i < v.numel(); ++i)
            v[i] = (T)((double)v_uncond[i] + cfg.cfg_scale * ((double)v_cond[i] - (double)v_uncond[i]));
        return v;
    };

    SampleResult result;
    Tensor<T> x0 = sample_ode<T>(guided, x1, cfg, &result.trace);
    result.image = pipe.vae_codec->decode_latent(x0);
    return result;
}

template struct Model<float>;
template struct Model<double>;
template struct Pipeline<float>;
template struct Pipeline<double>;
template Tensor<float> interpolate<float>(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> interpolate<double>(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> velocity_target<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> velocity_target<double>(const Tensor<double>&, const Tensor<double>&);
template double rf_element_loss<float>(const dit::Denoiser<float>&, const Tensor<float>&, const Tensor<float>&,
                                       double, const dit::ConditioningBundle<float>&,
                                       dit::Denoiser<float>::Cache*, Tensor<float>*);
template double rf_element_loss<double>(const dit::Denoiser<double>&, const Tensor<double>&, const Tensor<double>&,
                                        double, const dit::ConditioningBundle<double>&,
                                        dit::Denoiser<double>::Cache*, Tensor<double>*);
template RfStepStats rf_train_step<float>(const std::vector<const synth::SubjectSample*>&, const Pipeline<float>&,
                                          const StageSchedule&, const DropoutPolicy&, bool, Rng&,
                                          nn::GradBuffer<float>&, const nn::ParamList<float>&);
template RfStepStats rf_train_step<double>(const std::vector<const synth::SubjectSample*>&,
                                           const Pipeline<double>&, const StageSchedule&, const DropoutPolicy&,
                                           bool, Rng&, nn::GradBuffer<double>&, const nn::ParamList<double>&);
template Tensor<float> sample_ode<float>(const std::function<Tensor<float>(const Tensor<float>&, double, StageMasks)>&,
                                         const Tensor<float>&, const SamplerConfig&, std::vector<TraceRow>*);
template Tensor<double> sample_ode<double>(
    const std::function<Tensor<double>(const Tensor<double>&, double, StageMasks)>&, const Tensor<double>&,
    const SamplerConfig&, std::vector<TraceRow>*);
template SampleResult sample<float>(const synth::PromptSpec&, const Raster*, const Pipeline<float>&,
                                    const SamplerConfig&, uint64_t);
template SampleResult sample<double>(const synth::PromptSpec&, const Raster*, const Pipeline<double>&,
                                     const SamplerConfig&, uint64_t);

} // namespace sdg::flow
