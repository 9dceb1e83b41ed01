#pragma once

#include <array>
#include <string>
#include <vector>

#include "sdg/image.hpp"
#include "sdg/nn.hpp"
#include "sdg/synth.hpp"

namespace sdg::vae {

constexpr int64_t kLatentChannels = 4;
constexpr int64_t kLatentHw = synth::kImageSize / 4; // two stride-2 stages

struct TrainAeConfig {
    int64_t steps = 1500;
    int64_t batch_size = 8;
    double lr = 1e-3;
    double holdout_fraction = 0.1;
    uint64_t seed = 0;
};

struct TrainAeResult {
    std::vector<double> loss_curve;
    double holdout_psnr_db = 0;
    bool random_init_warning = false;
};

// Convolutional autoencoder. Diffusion runs in its normalized latent space;
// the same latent supplies the identity tokens for the reference image.
template <class T>
class Vae {
public:
    explicit Vae(uint64_t init_seed);

    void params(nn::ParamList<T>& ps);

    // (kLatentChannels, kLatentHw, kLatentHw), before normalization
    Tensor<T> encode_raw(const Raster& image) const;
    // normalized by the recorded per-channel scale
    Tensor<T> encode_latent(const Raster& image) const;
    Raster decode_latent(const Tensor<T>& latent_normalized) const;

    TrainAeResult train(const std::vector<synth::SubjectSample>& dataset, const TrainAeConfig& cfg);

    const std::array<double, kLatentChannels>& latent_mean() const { return mean_; }
    const std::array<double, kLatentChannels>& latent_std() const { return std_; }

    void save(const std::string& path) const;
    static Vae<T> load(const std::string& path);
    std::string weight_hash() const;

private:
    nn::Conv2d<T> e1_, e2_, e3_, e4_;
    nn::Conv2d<T> d1_, d2_, d3_, d4_;
    std::array<double, kLatentChannels> mean_{};
    std::array<double, kLatentChannels> std_{};

    struct FwdCache;
    Tensor<T> decode_raw(const Tensor<T>& latent_raw) const;
    void compute_scale(const std::vector<const Raster*>& images);
};

// The only VAE-side trainable in the diffusion pipeline: per-cell linear map
// from the normalized reference latent to denoiser-width identity tokens.
template <class T>
struct IdentityProjection {
    nn::Linear<T> proj; // kLatentChannels -> width

    void init(int64_t width, uint64_t seed) {
        Rng rng(derive_seed(seed, "identity-proj"));
        proj.init("idproj", kLatentChannels, width, rng);
    }
    void params(nn::ParamList<T>& ps) { proj.params(ps); }

    // latent (c, h, w) -> tokens (h*w, width)
    Tensor<T> forward(const Tensor<T>& latent) const;
    void backward(const Tensor<T>& latent, const Tensor<T>& dtokens, nn::GradBuffer<T>& gb,
                  const nn::ParamList<T>& ps) const;
};

template <class T>
Tensor<T> raster_to_chw(const Raster& img);
template <class T>
Raster chw_to_raster(const Tensor<T>& chw);

} // namespace sdg::vae
