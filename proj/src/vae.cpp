#include "sdg/vae.hpp"

#include <json.hpp>

#include "sdg/serialize.hpp"

namespace sdg::vae {

namespace {
constexpr int64_t kImg = synth::kImageSize;

template <class T>
void gelu_forward(Tensor<T>& x, Tensor<T>& pre) {
    pre = x;
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = nn::gelu(x[i]);
}

template <class T>
void gelu_backward(Tensor<T>& grad, const Tensor<T>& pre) {
    for (int64_t i = 0; i < grad.numel(); ++i) grad[i] *= nn::gelu_grad(pre[i]);
}

// nearest-neighbor 2x upsample, CHW
template <class T>
Tensor<T> upsample2(const Tensor<T>& x, int64_t c, int64_t h, int64_t w) {
    Tensor<T> y({c, h * 2, w * 2});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < h * 2; ++i)
            for (int64_t j = 0; j < w * 2; ++j)
                y[(ch * h * 2 + i) * w * 2 + j] = x[(ch * h + i / 2) * w + j / 2];
    return y;
}

template <class T>
Tensor<T> upsample2_backward(const Tensor<T>& dy, int64_t c, int64_t h, int64_t w) {
    Tensor<T> dx({c, h, w});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < h * 2; ++i)
            for (int64_t j = 0; j < w * 2; ++j)
                dx[(ch * h + i / 2) * w + j / 2] += dy[(ch * h * 2 + i) * w * 2 + j];
    return dx;
}

template <class T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}
} // namespace

template <class T>
Tensor<T> raster_to_chw(const Raster& img) {
    Tensor<T> t({3, (int64_t)img.h, (int64_t)img.w});
    for (int64_t y = 0; y < img.h; ++y)
        for (int64_t x = 0; x < img.w; ++x) {
            const double* p = img.px((int)x, (int)y);
            for (int64_t c = 0; c < 3; ++c) t[(c * img.h + y) * img.w + x] = (T)p[c];
        }
    return t;
}

template <class T>
Raster chw_to_raster(const Tensor<T>& chw) {
    int64_t h = chw.dim(1), w = chw.dim(2);
    Raster img((int)w, (int)h);
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double* p = img.px((int)x, (int)y);
            for (int64_t c = 0; c < 3; ++c) p[c] = (double)chw[(c * h + y) * w + x];
        }
    return img;
}

template <class T>
Vae<T>::Vae(uint64_t init_seed) {
    Rng rng(derive_seed(init_seed, "vae-init"));
    e1_.init("vae.e1", 3, 32, 3, 1, 1, rng);
    e2_.init("vae.e2", 32, 64, 4, 2, 1, rng);
    e3_.init("vae.e3", 64, 64, 4, 2, 1, rng);
    e4_.init("vae.e4", 64, kLatentChannels, 3, 1, 1, rng);
    d1_.init("vae.d1", kLatentChannels, 64, 3, 1, 1, rng);
    d2_.init("vae.d2", 64, 64, 3, 1, 1, rng);
    d3_.init("vae.d3", 64, 32, 3, 1, 1, rng);
    d4_.init("vae.d4", 32, 3, 3, 1, 1, rng);
    std_.fill(1.0);
}

template <class T>
void Vae<T>::params(nn::ParamList<T>& ps) {
    e1_.params(ps);
    e2_.params(ps);
    e3_.params(ps);
    e4_.params(ps);
    d1_.params(ps);
    d2_.params(ps);
    d3_.params(ps);
    d4_.params(ps);
}

template <class T>
struct Vae<T>::FwdCache {
    Tensor<T> x0, c1, a1pre, h1, c2, a2pre, h2, c3, a3pre, h3, c4, lat;
    Tensor<T> dc1, da1pre, dh1, dc2, da2pre, dh2, dc3, da3pre, dh3, dc4, out_pre;
    Tensor<T> recon; // post-sigmoid
};

template <class T>
Tensor<T> Vae<T>::encode_raw(const Raster& image) const {
    require(image.w == kImg && image.h == kImg, "vae: image must be 32x32");
    Tensor<T> x = raster_to_chw<T>(image);
    Tensor<T> h1, c1;
    e1_.forward(x, kImg, kImg, h1, c1);
    Tensor<T> pre;
    gelu_forward(h1, pre);
    Tensor<T> h2, c2;
    e2_.forward(h1, kImg, kImg, h2, c2);
    gelu_forward(h2, pre);
    Tensor<T> h3, c3;
    e3_.forward(h2, kImg / 2, kImg / 2, h3, c3);
    gelu_forward(h3, pre);
    Tensor<T> lat, c4;
    e4_.forward(h3, kLatentHw, kLatentHw, lat, c4);
    return lat;
}

template <class T>
Tensor<T> Vae<T>::encode_latent(const Raster& image) const {
    Tensor<T> lat = encode_raw(image);
    for (int64_t c = 0; c < kLatentChannels; ++c) {
        T m = (T)mean_[(size_t)c], s = (T)std_[(size_t)c];
        T* p = lat.data() + c * kLatentHw * kLatentHw;
        for (int64_t i = 0; i < kLatentHw * kLatentHw; ++i) p[i] = (p[i] - m) / s;
    }
    return lat;
}

template <class T>
Tensor<T> Vae<T>::decode_raw(const Tensor<T>& latent_raw) const {
    Tensor<T> h1, c1;
    d1_.forward(latent_raw, kLatentHw, kLatentHw, h1, c1);
    Tensor<T> pre;
    gelu_forward(h1, pre);
    Tensor<T> u1 = upsample2(h1, 64, kLatentHw, kLatentHw);
    Tensor<T> h2, c2;
    d2_.forward(u1, kImg / 2, kImg / 2, h2, c2);
    gelu_forward(h2, pre);
    Tensor<T> u2 = upsample2(h2, 64, kImg / 2, kImg / 2);
    Tensor<T> h3, c3;
    d3_.forward(u2, kImg, kImg, h3, c3);
    gelu_forward(h3, pre);
    Tensor<T> out, c4;
    d4_.forward(h3, kImg, kImg, out, c4);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = sigmoid(out[i]);
    return out;
}

template <class T>
Raster Vae<T>::decode_latent(const Tensor<T>& latent_normalized) const {
    require(latent_normalized.shape == std::vector<int64_t>({kLatentChannels, kLatentHw, kLatentHw}),
            "vae: latent shape mismatch");
    Tensor<T> raw = latent_normalized;
    for (int64_t c = 0; c < kLatentChannels; ++c) {
        T m = (T)mean_[(size_t)c], s = (T)std_[(size_t)c];
        T* p = raw.data() + c * kLatentHw * kLatentHw;
        for (int64_t i = 0; i < kLatentHw * kLatentHw; ++i) p[i] = p[i] * s + m;
    }
    return chw_to_raster(decode_raw(raw));
}

template <class T>
void Vae<T>::compute_scale(const std::vector<const Raster*>& images) {
    std::array<double, kLatentChannels> sum{}, sum2{};
    int64_t n = 0;
    for (const Raster* img : images) {
        Tensor<T> lat = encode_raw(*img);
        for (int64_t c = 0; c < kLatentChannels; ++c) {
            const T* p = lat.data() + c * kLatentHw * kLatentHw;
            for (int64_t i = 0; i < kLatentHw * kLatentHw; ++i) {
                sum[(size_t)c] += (double)p[i];
                sum2[(size_t)c] += (double)p[i] * (double)p[i];
            }
        }
        n += kLatentHw * kLatentHw;
    }
    for (int64_t c = 0; c < kLatentChannels; ++c) {
        double m = sum[(size_t)c] / (double)n;
        double var = sum2[(size_t)c] / (double)n - m * m;
        mean_[(size_t)c] = m;
        std_[(size_t)c] = std::sqrt(std::max(var, 1e-12));
    }
}

template <class T>
TrainAeResult Vae<T>::train(const std::vector<synth::SubjectSample>& dataset, const TrainAeConfig& cfg) {
    validate(!dataset.empty(), "train_ae: empty dataset");
    validate(cfg.steps >= 0 && cfg.batch_size >= 1, "train_ae: bad budget");
    int64_t n_hold = std::max<int64_t>(1, (int64_t)((double)dataset.size() * cfg.holdout_fraction));
    int64_t n_train = (int64_t)dataset.size() - n_hold;
    validate(n_train >= 1, "train_ae: dataset too small for holdout split");

    nn::ParamList<T> ps;
    params(ps);
    nn::Adam<T> opt;
    opt.lr = cfg.lr;
    opt.init(ps);
    Rng rng(derive_seed(cfg.seed, "vae-train"));

    TrainAeResult result;
    result.random_init_warning = cfg.steps == 0;

    // full forward with caches; returns mse and fills cache
    auto forward_full = [&](const Raster& img, FwdCache& f) -> double {
        f.x0 = raster_to_chw<T>(img);
        e1_.forward(f.x0, kImg, kImg, f.h1, f.c1);
        gelu_forward(f.h1, f.a1pre);
        e2_.forward(f.h1, kImg, kImg, f.h2, f.c2);
        gelu_forward(f.h2, f.a2pre);
        e3_.forward(f.h2, kImg / 2, kImg / 2, f.h3, f.c3);
        gelu_forward(f.h3, f.a3pre);
        e4_.forward(f.h3, kLatentHw, kLatentHw, f.lat, f.c4);

        d1_.forward(f.lat, kLatentHw, kLatentHw, f.dh1, f.dc1);
        gelu_forward(f.dh1, f.da1pre);
        Tensor<T> u1 = upsample2(f.dh1, 64, kLatentHw, kLatentHw);
        d2_.forward(u1, kImg / 2, kImg / 2, f.dh2, f.dc2);
        gelu_forward(f.dh2, f.da2pre);
        Tensor<T> u2 = upsample2(f.dh2, 64, kImg / 2, kImg / 2);
        d3_.forward(u2, kImg, kImg, f.dh3, f.dc3);
        gelu_forward(f.dh3, f.da3pre);
        d4_.forward(f.dh3, kImg, kImg, f.out_pre, f.dc4);
        f.recon = f.out_pre;
        for (int64_t i = 0; i < f.recon.numel(); ++i) f.recon[i] = sigmoid(f.recon[i]);
        double mse = 0;
        for (int64_t i = 0; i < f.recon.numel(); ++i) {
            double d = (double)f.recon[i] - (double)f.x0[i];
            mse += d * d;
        }
        return mse / (double)f.recon.numel();
    };

    auto backward_full = [&](FwdCache& f, nn::GradBuffer<T>& gb) {
        int64_t n = f.recon.numel();
        Tensor<T> dout({3, kImg, kImg});
        for (int64_t i = 0; i < n; ++i) {
            T r = f.recon[i];
            dout[i] = T(2.0 / (double)n) * (r - f.x0[i]) * r * (T(1) - r); // mse + sigmoid
        }
        Tensor<T> dh3;
        d4_.backward(dout, f.dc4, kImg, kImg, dh3, gb.of(ps, &d4_.W), gb.of(ps, &d4_.b));
        gelu_backward(dh3, f.da3pre);
        Tensor<T> du2;
        d3_.backward(dh3, f.dc3, kImg, kImg, du2, gb.of(ps, &d3_.W), gb.of(ps, &d3_.b));
        Tensor<T> dh2 = upsample2_backward(du2, 64, kImg / 2, kImg / 2);
        gelu_backward(dh2, f.da2pre);
        Tensor<T> du1;
        d2_.backward(dh2, f.dc2, kImg / 2, kImg / 2, du1, gb.of(ps, &d2_.W), gb.of(ps, &d2_.b));
        Tensor<T> ddh1 = upsample2_backward(du1, 64, kLatentHw, kLatentHw);
        gelu_backward(ddh1, f.da1pre);
        Tensor<T> dlat;
        d1_.backward(ddh1, f.dc1, kLatentHw, kLatentHw, dlat, gb.of(ps, &d1_.W), gb.of(ps, &d1_.b));

        Tensor<T> dh3e;
        e4_.backward(dlat, f.c4, kLatentHw, kLatentHw, dh3e, gb.of(ps, &e4_.W), gb.of(ps, &e4_.b));
        gelu_backward(dh3e, f.a3pre);
        Tensor<T> dh2e;
        e3_.backward(dh3e, f.c3, kImg / 2, kImg / 2, dh2e, gb.of(ps, &e3_.W), gb.of(ps, &e3_.b));
        gelu_backward(dh2e, f.a2pre);
        Tensor<T> dh1e;
        e2_.backward(dh2e, f.c2, kImg, kImg, dh1e, gb.of(ps, &e2_.W), gb.of(ps, &e2_.b));
        gelu_backward(dh1e, f.a1pre);
        Tensor<T> dx;
        e1_.backward(dh1e, f.c1, kImg, kImg, dx, gb.of(ps, &e1_.W), gb.of(ps, &e1_.b));
    };

    nn::GradBuffer<T> gb(ps);
    for (int64_t step = 0; step < cfg.steps; ++step) {
        gb.zero();
        double loss = 0;
        for (int64_t b = 0; b < cfg.batch_size; ++b) {
            int64_t idx = rng.uniform_int(n_train);
            const auto& s = dataset[(size_t)idx];
            const Raster& img = rng.bernoulli(0.5) ? s.reference : s.target;
            FwdCache f;
            loss += forward_full(img, f);
            backward_full(f, gb);
        }
        loss /= (double)cfg.batch_size;
        require(std::isfinite(loss), "train_ae: non-finite loss at step " + std::to_string(step));
        for (auto& g : gb.g) g.scale(T(1.0 / (double)cfg.batch_size));
        opt.step(ps, gb);
        result.loss_curve.push_back(loss);
    }

    // latent scale statistics over the training split
    std::vector<const Raster*> train_imgs;
    for (int64_t i = 0; i < n_train; ++i) {
        train_imgs.push_back(&dataset[(size_t)i].reference);
        train_imgs.push_back(&dataset[(size_t)i].target);
    }
    compute_scale(train_imgs);

    // holdout PSNR
    double mse_sum = 0;
    int64_t n_eval = 0;
    for (int64_t i = n_train; i < (int64_t)dataset.size(); ++i) {
        for (const Raster* img : {&dataset[(size_t)i].reference, &dataset[(size_t)i].target}) {
            FwdCache f;
            mse_sum += forward_full(*img, f);
            ++n_eval;
        }
    }
    double mse = mse_sum / (double)n_eval;
    result.holdout_psnr_db = 10.0 * std::log10(1.0 / std::max(mse, 1e-12));
    return result;
}

template <class T>
void Vae<T>::save(const std::string& path) const {
    Checkpoint ck;
    ck.kind = "vae";
    ck.dtype = sizeof(T) == 4 ? "f32" : "f64";
    ck.meta = {{"latent_channels", kLatentChannels},
               {"latent_hw", kLatentHw},
               {"mean", mean_},
               {"std", std_}};
    nn::ParamList<T> ps;
    const_cast<Vae<T>*>(this)->params(ps);
    for (auto* p : ps) ck.put(p->name, p->value);
    save_checkpoint(path, ck);
}

template <class T>
Vae<T> Vae<T>::load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path, "vae");
    require(ck.meta.at("latent_channels").get<int64_t>() == kLatentChannels &&
                ck.meta.at("latent_hw").get<int64_t>() == kLatentHw,
            "vae: checkpoint latent geometry mismatch");
    Vae<T> v(0);
    v.mean_ = ck.meta.at("mean").get<std::array<double, kLatentChannels>>();
    v.std_ = ck.meta.at("std").get<std::array<double, kLatentChannels>>();
    nn::ParamList<T> ps;
    v.params(ps);
    for (auto* p : ps) ck.get(p->name, p->value);
    return v;
}

template <class T>
std::string Vae<T>::weight_hash() const {
    nn::ParamList<T> ps;
    const_cast<Vae<T>*>(this)->params(ps);
    std::string acc;
    for (auto* p : ps) acc += sha256_hex(p->value.data(), (size_t)p->value.numel() * sizeof(T));
    return sha256_hex(acc);
}

template <class T>
Tensor<T> IdentityProjection<T>::forward(const Tensor<T>& latent) const {
    require(latent.shape == std::vector<int64_t>({kLatentChannels, kLatentHw, kLatentHw}),
            "identity_tokens: latent shape mismatch");
    int64_t hw = kLatentHw * kLatentHw;
    Tensor<T> cells({hw, kLatentChannels});
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t c = 0; c < kLatentChannels; ++c) cells[i * kLatentChannels + c] = latent[c * hw + i];
    Tensor<T> tokens;
    proj.forward(cells, tokens);
    return tokens;
}

template <class T>
void IdentityProjection<T>::backward(const Tensor<T>& latent, const Tensor<T>& dtokens, nn::GradBuffer<T>& gb,
                                     const nn::ParamList<T>& ps) const {
    int64_t hw = kLatentHw * kLatentHw;
    Tensor<T> cells({hw, kLatentChannels});
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t c = 0; c < kLatentChannels; ++c) cells[i * kLatentChannels + c] = latent[c * hw + i];
    Tensor<T> dcells;
    proj.backward(cells, dtokens, dcells, gb.of(ps, &proj.W), gb.of(ps, &proj.b));
}

template class Vae<float>;
template class Vae<double>;
template struct IdentityProjection<float>;
template struct IdentityProjection<double>;
template Tensor<float> raster_to_chw<float>(const Raster&);
template Tensor<double> raster_to_chw<double>(const Raster&);
template Raster chw_to_raster<float>(const Tensor<float>&);
template Raster chw_to_raster<double>(const Tensor<double>&);

} // namespace sdg::vae
