#include "sdg/denoiser.hpp"

namespace sdg::dit {

template <class T>
Denoiser<T>::Denoiser(const DenoiserConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    validate(cfg.width % cfg.n_heads == 0, "denoiser: width must divide heads");
    validate(cfg.width % 2 == 0, "denoiser: width must be even for sinusoidal features");
    Rng rng(derive_seed(init_seed, "denoiser-init"));
    patch_in_.init("dit.patch_in", cfg.latent_channels, cfg.width, rng);
    latent_pos_.name = "dit.latent_pos";
    latent_pos_.value = Tensor<T>({cfg.latent_tokens(), cfg.width});
    latent_pos_.value.fill_normal(rng, T(0.02));
    vae_pos_.name = "dit.vae_pos";
    vae_pos_.value = Tensor<T>({cfg.latent_tokens(), cfg.width});
    vae_pos_.value.fill_normal(rng, T(0.02));
    type_emb_.name = "dit.type_emb";
    type_emb_.value = Tensor<T>({4, cfg.width});
    type_emb_.value.fill_normal(rng, T(0.02));
    t_fc1_.init("dit.t_fc1", cfg.width, cfg.width, rng);
    t_fc2_.init("dit.t_fc2", cfg.width, cfg.width, rng);
    blocks_.resize((size_t)cfg.n_blocks);
    for (int64_t i = 0; i < cfg.n_blocks; ++i)
        blocks_[(size_t)i].init("dit.block" + std::to_string(i), cfg.width, cfg.n_heads, rng);
    final_ln_.init("dit.final_ln", cfg.width);
    head_.init("dit.head", cfg.width, cfg.latent_channels, rng);
}

template <class T>
void Denoiser<T>::params(nn::ParamList<T>& ps) {
    patch_in_.params(ps);
    ps.push_back(&latent_pos_);
    ps.push_back(&vae_pos_);
    ps.push_back(&type_emb_);
    t_fc1_.params(ps);
    t_fc2_.params(ps);
    for (auto& b : blocks_) b.params(ps);
    final_ln_.params(ps);
    head_.params(ps);
}

template <class T>
Tensor<T> Denoiser<T>::timestep_embed_cached(double t, Cache* cache) const {
    validate(std::isfinite(t) && t >= 0.0 && t <= 1.0, "timestep_embed: t must be finite in [0,1]");
    int64_t C = cfg_.width;
    int64_t half = C / 2;
    Tensor<T> feats({1, C});
    for (int64_t k = 0; k < half; ++k) {
        double freq = std::exp(-std::log(10000.0) * (double)k / (double)std::max<int64_t>(half - 1, 1));
        double arg = t * 1000.0 * freq;
        feats[k] = (T)std::sin(arg);
        feats[half + k] = (T)std::cos(arg);
    }
    Tensor<T> h1;
    t_fc1_.forward(feats, h1);
    Tensor<T> h1pre = h1;
    for (int64_t i = 0; i < h1.numel(); ++i) h1[i] = nn::gelu(h1[i]);
    Tensor<T> out;
    t_fc2_.forward(h1, out);
    if (cache) {
        cache->sin_feats = std::move(feats);
        cache->t_h1 = std::move(h1);
        cache->t_h1pre = std::move(h1pre);
    }
    out.shape = {C};
    return out;
}

template <class T>
Tensor<T> Denoiser<T>::timestep_embed(double t) const {
    return timestep_embed_cached(t, nullptr);
}

template <class T>
Tensor<T> Denoiser<T>::predict_velocity(const Tensor<T>& x_t, double t, const ConditioningBundle<T>& cond,
                                        Cache* cache) const {
    int64_t hw = cfg_.latent_tokens(), C = cfg_.width, c_lat = cfg_.latent_channels;
    require(x_t.shape == std::vector<int64_t>({c_lat, cfg_.latent_hw, cfg_.latent_hw}),
            "predict_velocity: latent shape mismatch");
    validate(!cond.mllm_active || cond.mllm_tokens.numel() > 0,
             "predict_velocity: mllm branch active without tokens");
    validate(!cond.vae_active || cond.vae_tokens.numel() > 0,
             "predict_velocity: vae branch active without tokens");
    int64_t n_mllm = cond.mllm_active ? cond.mllm_tokens.dim(0) : 0;
    int64_t n_vae = cond.vae_active ? cond.vae_tokens.dim(0) : 0;
    if (n_mllm) validate(cond.mllm_tokens.dim(1) == C, "predict_velocity: mllm token width mismatch");
    if (n_vae)
        validate(cond.vae_tokens.dim(1) == C && n_vae == hw, "predict_velocity: vae token shape mismatch");

    // latent cells: (hw, c_lat)
    Tensor<T> cells({hw, c_lat});
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t c = 0; c < c_lat; ++c) cells[i * c_lat + c] = x_t[c * hw + i];
    Tensor<T> lat_emb;
    patch_in_.forward(cells, lat_emb);

    Tensor<T> t_emb = timestep_embed_cached(t, cache);

    int64_t L = hw + 1 + n_mllm + n_vae;
    Tensor<T> seq({L, C});
    const T* type = type_emb_.value.data();
    for (int64_t i = 0; i < hw; ++i) {
        T* row = seq.data() + i * C;
        const T* e = lat_emb.data() + i * C;
        const T* pos = latent_pos_.value.data() + i * C;
        for (int64_t c = 0; c < C; ++c) row[c] = e[c] + pos[c] + type[c];
    }
    {
        T* row = seq.data() + hw * C;
        for (int64_t c = 0; c < C; ++c) row[c] = t_emb[c] + type[C + c];
    }
    for (int64_t i = 0; i < n_mllm; ++i) {
        T* row = seq.data() + (hw + 1 + i) * C;
        const T* src = cond.mllm_tokens.data() + i * C;
        for (int64_t c = 0; c < C; ++c) row[c] = src[c] + type[2 * C + c];
    }
    for (int64_t i = 0; i < n_vae; ++i) {
        T* row = seq.data() + (hw + 1 + n_mllm + i) * C;
        const T* src = cond.vae_tokens.data() + i * C;
        const T* pos = vae_pos_.value.data() + i * C;
        for (int64_t c = 0; c < C; ++c) row[c] = src[c] + pos[c] + type[3 * C + c];
    }

    if (cache) {
        cache->seq_in = seq;
        cache->latent_cells = cells;
        cache->blocks.resize(blocks_.size());
        cache->n_latent = hw;
        cache->n_mllm = n_mllm;
        cache->n_vae = n_vae;
    }

    Tensor<T> x = std::move(seq);
    for (size_t b = 0; b < blocks_.size(); ++b) {
        Tensor<T> y;
        typename nn::TransformerBlock<T>::Cache local;
        blocks_[b].forward(x, y, cache ? cache->blocks[b] : local);
        x = std::move(y);
    }

    // un-patchify: only the latent-token outputs feed the velocity
    Tensor<T> lat_out({hw, C});
    for (int64_t i = 0; i < hw; ++i) {
        const T* src = x.data() + i * C;
        T* dst = lat_out.data() + i * C;
        for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
    }
    Tensor<T> normed;
    typename nn::LayerNorm<T>::Cache ln_local;
    final_ln_.forward(lat_out, normed, cache ? cache->final_ln : ln_local);
    Tensor<T> cells_out;
    head_.forward(normed, cells_out);
    if (cache) cache->normed = normed;

    Tensor<T> vel({c_lat, cfg_.latent_hw, cfg_.latent_hw});
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t c = 0; c < c_lat; ++c) vel[c * hw + i] = cells_out[i * c_lat + c];
    return vel;
}

template <class T>
typename Denoiser<T>::InputGrads Denoiser<T>::backward(const Tensor<T>& dvel, const Cache& cache,
                                                       nn::GradBuffer<T>& gb, const nn::ParamList<T>& ps) const {
    int64_t hw = cfg_.latent_tokens(), C = cfg_.width, c_lat = cfg_.latent_channels;
    Tensor<T> dcells_out({hw, c_lat});
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t c = 0; c < c_lat; ++c) dcells_out[i * c_lat + c] = dvel[c * hw + i];

    Tensor<T> dnormed;
    head_.backward(cache.normed, dcells_out, dnormed, gb.of(ps, &head_.W), gb.of(ps, &head_.b));
    Tensor<T> dlat_out;
    final_ln_.backward(dnormed, cache.final_ln, dlat_out, gb.of(ps, &final_ln_.gamma), gb.of(ps, &final_ln_.beta));

    int64_t L = cache.seq_in.dim(0);
    Tensor<T> dseq({L, C});
    for (int64_t i = 0; i < hw; ++i) {
        const T* src = dlat_out.data() + i * C;
        T* dst = dseq.data() + i * C;
        for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
    }

    for (int64_t b = (int64_t)blocks_.size() - 1; b >= 0; --b) {
        Tensor<T> dx;
        blocks_[(size_t)b].backward(dseq, cache.blocks[(size_t)b], dx, gb, ps);
        dseq = std::move(dx);
    }

    Tensor<T>& g_type = gb.of(ps, &type_emb_);
    Tensor<T>& g_lpos = gb.of(ps, &latent_pos_);
    Tensor<T>& g_vpos = gb.of(ps, &vae_pos_);

    // latent tokens
    Tensor<T> dlat_emb({hw, C});
    for (int64_t i = 0; i < hw; ++i) {
        const T* d = dseq.data() + i * C;
        T* de = dlat_emb.data() + i * C;
        T* gp = g_lpos.data() + i * C;
        for (int64_t c = 0; c < C; ++c) {
            de[c] = d[c];
            gp[c] += d[c];
            g_type[c] += d[c];
        }
    }
    Tensor<T> dcells;
    patch_in_.backward(cache.latent_cells, dlat_emb, dcells, gb.of(ps, &patch_in_.W), gb.of(ps, &patch_in_.b));

    // timestep token -> mlp
    {
        const T* d = dseq.data() + hw * C;
        Tensor<T> dt({1, C});
        for (int64_t c = 0; c < C; ++c) {
            dt[c] = d[c];
            g_type[C + c] += d[c];
        }
        Tensor<T> dh1;
        t_fc2_.backward(cache.t_h1, dt, dh1, gb.of(ps, &t_fc2_.W), gb.of(ps, &t_fc2_.b));
        for (int64_t i = 0; i < dh1.numel(); ++i) dh1[i] *= nn::gelu_grad(cache.t_h1pre[i]);
        Tensor<T> dfeats;
        t_fc1_.backward(cache.sin_feats, dh1, dfeats, gb.of(ps, &t_fc1_.W), gb.of(ps, &t_fc1_.b));
    }

    InputGrads ig;
    if (cache.n_mllm > 0) {
        ig.d_mllm = Tensor<T>({cache.n_mllm, C});
        for (int64_t i = 0; i < cache.n_mllm; ++i) {
            const T* d = dseq.data() + (hw + 1 + i) * C;
            T* dst = ig.d_mllm.data() + i * C;
            for (int64_t c = 0; c < C; ++c) {
                dst[c] = d[c];
                g_type[2 * C + c] += d[c];
            }
        }
    }
    if (cache.n_vae > 0) {
        ig.d_vae = Tensor<T>({cache.n_vae, C});
        for (int64_t i = 0; i < cache.n_vae; ++i) {
            const T* d = dseq.data() + (hw + 1 + cache.n_mllm + i) * C;
            T* dst = ig.d_vae.data() + i * C;
            T* gp = g_vpos.data() + i * C;
            for (int64_t c = 0; c < C; ++c) {
                dst[c] = d[c];
                gp[c] += d[c];
                g_type[3 * C + c] += d[c];
            }
        }
    }
    return ig;
}

template <class T>
void Denoiser<T>::save_into(Checkpoint& ck) const {
    nn::ParamList<T> ps;
    const_cast<Denoiser<T>*>(this)->params(ps);
    for (auto* p : ps) ck.put(p->name, p->value);
    ck.meta["denoiser"] = {{"n_blocks", cfg_.n_blocks},
                           {"width", cfg_.width},
                           {"n_heads", cfg_.n_heads},
                           {"latent_channels", cfg_.latent_channels},
                           {"latent_hw", cfg_.latent_hw}};
}

template <class T>
void Denoiser<T>::load_from(const Checkpoint& ck) {
    const auto& m = ck.meta.at("denoiser");
    DenoiserConfig stored;
    stored.n_blocks = m.at("n_blocks").get<int64_t>();
    stored.width = m.at("width").get<int64_t>();
    stored.n_heads = m.at("n_heads").get<int64_t>();
    stored.latent_channels = m.at("latent_channels").get<int64_t>();
    stored.latent_hw = m.at("latent_hw").get<int64_t>();
    require(stored == cfg_, "denoiser: checkpoint config mismatch");
    nn::ParamList<T> ps;
    params(ps);
    for (auto* p : ps) ck.get(p->name, p->value);
}

template class Denoiser<float>;
template class Denoiser<double>;

} // namespace sdg::dit
