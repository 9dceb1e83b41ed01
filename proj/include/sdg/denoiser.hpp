#pragma once

#include <string>
#include <vector>

#include "sdg/nn.hpp"
#include "sdg/serialize.hpp"

namespace sdg::dit {

struct DenoiserConfig {
    int64_t n_blocks = 4;
    int64_t width = 128;
    int64_t n_heads = 4;
    int64_t latent_channels = 4;
    int64_t latent_hw = 8;

    int64_t latent_tokens() const { return latent_hw * latent_hw; }
    bool operator==(const DenoiserConfig&) const = default;
};

// The two conditioning streams. An inactive branch contributes no tokens to
// the sequence; an active branch must carry tokens.
template <class T>
struct ConditioningBundle {
    Tensor<T> mllm_tokens; // (L_mllm, width) or empty
    Tensor<T> vae_tokens;  // (latent_tokens, width) or empty
    bool mllm_active = false;
    bool vae_active = false;
};

// DiT-style velocity predictor: latent cell tokens + timestep token + active
// conditioning tokens under full self-attention; only latent-token outputs
// are un-patchified into the velocity.
template <class T>
class Denoiser {
public:
    Denoiser() : Denoiser(DenoiserConfig{}, 0) {}
    Denoiser(const DenoiserConfig& cfg, uint64_t init_seed);

    const DenoiserConfig& config() const { return cfg_; }
    void params(nn::ParamList<T>& ps);

    Tensor<T> timestep_embed(double t) const; // (width)

    struct Cache {
        Tensor<T> seq_in;                // (L_total, C)
        std::vector<typename nn::TransformerBlock<T>::Cache> blocks;
        typename nn::LayerNorm<T>::Cache final_ln;
        Tensor<T> latent_cells;          // (hw, c_lat) input cells
        Tensor<T> normed;                // (n_latent, C)
        Tensor<T> sin_feats, t_h1, t_h1pre; // timestep mlp intermediates
        int64_t n_latent = 0, n_mllm = 0, n_vae = 0;
    };

    // x_t: (c_lat, h, w), t in [0,1]
    Tensor<T> predict_velocity(const Tensor<T>& x_t, double t, const ConditioningBundle<T>& cond,
                               Cache* cache = nullptr) const;

    struct InputGrads {
        Tensor<T> d_mllm; // (L_mllm, C), empty if branch inactive
        Tensor<T> d_vae;  // (latent_tokens, C), empty if branch inactive
    };

    // dvel: (c_lat, h, w); accumulates parameter grads, returns grads w.r.t.
    // the conditioning token inputs for chaining into the aggregator and the
    // identity projection
    InputGrads backward(const Tensor<T>& dvel, const Cache& cache, nn::GradBuffer<T>& gb,
                        const nn::ParamList<T>& ps) const;

    void save_into(Checkpoint& ck) const;
    void load_from(const Checkpoint& ck);

private:
    DenoiserConfig cfg_;
    nn::Linear<T> patch_in_;   // c_lat -> C
    nn::Param<T> latent_pos_;  // (hw, C)
    nn::Param<T> vae_pos_;     // (hw, C)
    nn::Param<T> type_emb_;    // (4, C): latent / time / mllm / vae
    nn::Linear<T> t_fc1_, t_fc2_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> final_ln_;
    nn::Linear<T> head_;       // C -> c_lat

    Tensor<T> timestep_embed_cached(double t, Cache* cache) const;
};

} // namespace sdg::dit
