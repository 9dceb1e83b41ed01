#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sdg/encoder.hpp"
#include "sdg/nn.hpp"
#include "sdg/serialize.hpp"

namespace sdg::agg {

// Two distinct masking semantics, never mixed in one call:
//  - inference_zero: masked layers' features are replaced by zeros but stay
//    on the attention axis (and in the mean feeding the query/adaptive head)
//  - training_select: masked layers are removed from the axis entirely
enum class MaskMode { keep_all, inference_zero, training_select };

struct LayerMask {
    MaskMode mode = MaskMode::keep_all;
    std::vector<bool> keep;

    static LayerMask all() { return {}; }
    static LayerMask zeroing(std::vector<bool> k) { return {MaskMode::inference_zero, std::move(k)}; }
    static LayerMask selection(std::vector<bool> k) { return {MaskMode::training_select, std::move(k)}; }

    int64_t kept_count(int64_t n_layers) const {
        if (mode == MaskMode::keep_all) return n_layers;
        int64_t n = 0;
        for (bool b : keep) n += b ? 1 : 0;
        return n;
    }
    bool kept(int64_t i) const { return mode == MaskMode::keep_all || keep[(size_t)i]; }
};

// Per-token attention over the layer axis. Query: per-token mean across
// layers through the query projection. Keys/values: the token's per-layer
// features through their projections. An adaptive head adds one logit per
// layer (shared across heads) to the attention logits. The pooled context
// passes through the output projection.
template <class T>
struct Lap {
    nn::Linear<T> wq, wk, wv, wo;
    nn::Linear<T> ada; // width -> n_layers+1 additive logits, zero-initialized
    int64_t width = 0, heads = 0, hd = 0, stack_layers = 0; // stack_layers = M+1

    void init(const std::string& name, int64_t c, int64_t n_heads, int64_t n_stack_layers, Rng& rng);
    void params(nn::ParamList<T>& ps);

    struct Cache {
        Tensor<T> q_in;                 // (L, C)
        Tensor<T> q;                    // (L, C)
        std::vector<Tensor<T>> f_eff;   // per axis layer (L, C), after zeroing
        std::vector<Tensor<T>> k, v;    // per axis layer (L, C)
        Tensor<T> att;                  // (L, heads, M+1); excluded layers zero
        Tensor<T> ctx;                  // (L, C)
        std::vector<int64_t> axis;      // original layer index per axis slot
    };

    // layers: M+1 tensors (L, C) for one modality. Output (L, C); attention
    // map (L, heads, M+1).
    void forward(const std::vector<const Tensor<T>*>& layers, const LayerMask& mask, Tensor<T>& out,
                 Cache* cache) const;

    // parameter gradients only; upstream features are frozen
    void backward(const Tensor<T>& dout, const Cache& cache, nn::GradBuffer<T>& gb,
                  const nn::ParamList<T>& ps) const;
};

template <class T>
struct DlaCache {
    typename Lap<T>::Cache text, image;
    std::vector<int64_t> text_rows, image_rows;
    bool has_image = false;
    int64_t seq_len = 0;
};

// Dual aggregator: parameter-disjoint LAPs for the text and image token
// positions; original token order is preserved in the output.
template <class T>
struct Dla {
    Lap<T> text_lap, image_lap;
    bool residual_to_last_layer = false;

    void init(int64_t width, int64_t n_heads, int64_t n_stack_layers, bool residual, uint64_t seed);
    void params(nn::ParamList<T>& ps);

    Tensor<T> forward(const enc::LayerFeatureStack<T>& stack, const LayerMask& text_mask,
                      const LayerMask& image_mask, DlaCache<T>* cache) const;
    void backward(const Tensor<T>& dtokens, const DlaCache<T>& cache, nn::GradBuffer<T>& gb,
                  const nn::ParamList<T>& ps) const;

    void save_into(Checkpoint& ck) const;
    void load_from(const Checkpoint& ck);
};

struct LayerAttentionProfile {
    std::vector<double> text;  // (M+1), sums to 1
    std::vector<double> image; // (M+1), sums to 1; empty when no image tokens
};

// Mean attention over tokens and heads per modality (Fig-style probe).
template <class T>
LayerAttentionProfile extract_layer_attention(const enc::LayerFeatureStack<T>& stack, const Dla<T>& dla);

// Helper shared with tests: gather one modality's rows out of a stack.
template <class T>
std::vector<Tensor<T>> gather_modality(const enc::LayerFeatureStack<T>& stack, bool text,
                                       std::vector<int64_t>& rows);

} // namespace sdg::agg
