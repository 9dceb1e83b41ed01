#pragma once

#include <string>
#include <vector>

#include "sdg/nn.hpp"
#include "sdg/synth.hpp"

namespace sdg::enc {

// Text vocabulary: BOS, SUBJECT slot, 8 backgrounds, 3 positions.
constexpr int64_t kBosId = 0;
constexpr int64_t kSubjectSlotId = 1;
constexpr int64_t kBgBaseId = 2;
constexpr int64_t kPosBaseId = kBgBaseId + synth::kNumBackgrounds;
constexpr int64_t kTextVocab = kPosBaseId + synth::kNumPositions;
constexpr int64_t kTextLen = 4;

struct EncoderConfig {
    int64_t n_layers = 6; // transformer blocks; the stack also includes the embedding output
    int64_t width = 128;
    int64_t n_heads = 4;
    int64_t patch_size = 4;

    int64_t image_tokens() const {
        int64_t g = synth::kImageSize / patch_size;
        return g * g;
    }
    int64_t patch_dim() const { return patch_size * patch_size * 3; }
    bool operator==(const EncoderConfig&) const = default;
};

struct TokenSeq {
    std::vector<int64_t> text_ids;    // length kTextLen
    std::vector<double> image_patches; // (image_tokens, patch_dim) row-major; empty when no reference
    std::vector<bool> modality_mask;  // true = text token
    int64_t length() const { return (int64_t)modality_mask.size(); }
    bool has_image() const { return !image_patches.empty(); }
};

TokenSeq tokenize(const synth::PromptSpec& prompt, const Raster* reference, const EncoderConfig& cfg = {});

// Hidden states from every depth: entry 0 is the embedding output, entries
// 1..n_layers are block outputs. All entries share (L, width).
template <class T>
struct LayerFeatureStack {
    std::vector<Tensor<T>> features;
    std::vector<bool> modality_mask;
    int64_t layer_count = 0; // == features.size() - 1

    int64_t seq_len() const { return features.empty() ? 0 : features[0].dim(0); }
    int64_t width() const { return features.empty() ? 0 : features[0].dim(1); }
};

template <class T>
class Encoder {
public:
    explicit Encoder(const EncoderConfig& cfg, uint64_t init_seed);

    const EncoderConfig& config() const { return cfg_; }

    void params(nn::ParamList<T>& ps);

    // Embed tokens: (L, width). Exposed so tests can probe the seam between
    // embedding and trunk (e.g. zeroing one modality at the input).
    Tensor<T> embed(const TokenSeq& tokens) const;
    void embed_backward(const TokenSeq& tokens, const Tensor<T>& demb, nn::GradBuffer<T>& gb,
                        const nn::ParamList<T>& ps) const;

    LayerFeatureStack<T> encode(const TokenSeq& tokens) const;
    LayerFeatureStack<T> encode_embedded(Tensor<T> embedded, const std::vector<bool>& modality_mask) const;

    void save(const std::string& path) const;
    static Encoder<T> load(const std::string& path);

    // weight digest; the frozen contract is "this never changes under encode"
    std::string weight_hash() const;

    // trunk internals used by the pretrainer
    std::vector<nn::TransformerBlock<T>>& blocks() { return blocks_; }
    const std::vector<nn::TransformerBlock<T>>& blocks() const { return blocks_; }

private:
    EncoderConfig cfg_;
    nn::Embedding<T> tok_emb_;
    nn::Linear<T> patch_emb_;
    nn::Param<T> text_pos_;  // (kTextLen, width)
    nn::Param<T> image_pos_; // (image_tokens, width)
    std::vector<nn::TransformerBlock<T>> blocks_;

    Tensor<T> patches_tensor(const TokenSeq& tokens) const;
};

struct PretrainConfig {
    int64_t steps = 2000;
    int64_t batch_size = 8;
    double lr = 3e-4;
    double holdout_fraction = 0.1;
    uint64_t seed = 0;
};

struct PretrainResult {
    std::vector<double> loss_curve;
    double holdout_identity_accuracy = 0; // shape and color both correct
    double holdout_prompt_accuracy = 0;   // background and position both correct
    bool random_init_warning = false;     // steps == 0: trunk is untrained
};

// Proxy pretraining: classification heads on pooled features (subject
// identity from image tokens, prompt attributes from text tokens); the heads
// are discarded and the trunk is frozen afterwards.
template <class T>
PretrainResult pretrain_encoder(Encoder<T>& encoder, const std::vector<synth::SubjectSample>& dataset,
                                const PretrainConfig& cfg);

} // namespace sdg::enc
