#include "sdg/encoder.hpp"

#include <json.hpp>

#include "sdg/serialize.hpp"

namespace sdg::enc {

TokenSeq tokenize(const synth::PromptSpec& prompt, const Raster* reference, const EncoderConfig& cfg) {
    TokenSeq seq;
    seq.text_ids = {kBosId, kBgBaseId + (int64_t)prompt.background, kPosBaseId + (int64_t)prompt.position,
                    kSubjectSlotId};
    seq.modality_mask.assign((size_t)kTextLen, true);
    if (reference) {
        validate(reference->w == synth::kImageSize && reference->h == synth::kImageSize,
                 "tokenize: reference must be " + std::to_string(synth::kImageSize) + "x" +
                     std::to_string(synth::kImageSize));
        int64_t g = synth::kImageSize / cfg.patch_size;
        seq.image_patches.resize((size_t)(g * g * cfg.patch_dim()));
        for (int64_t py = 0; py < g; ++py) {
            for (int64_t px = 0; px < g; ++px) {
                double* dst = seq.image_patches.data() + (py * g + px) * cfg.patch_dim();
                int64_t k = 0;
                for (int64_t y = 0; y < cfg.patch_size; ++y) {
                    for (int64_t x = 0; x < cfg.patch_size; ++x) {
                        const double* p =
                            reference->px((int)(px * cfg.patch_size + x), (int)(py * cfg.patch_size + y));
                        dst[k++] = p[0];
                        dst[k++] = p[1];
                        dst[k++] = p[2];
                    }
                }
            }
        }
        seq.modality_mask.insert(seq.modality_mask.end(), (size_t)(g * g), false);
    }
    return seq;
}

template <class T>
Encoder<T>::Encoder(const EncoderConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    validate(cfg.width % cfg.n_heads == 0, "encoder: width must divide n_heads");
    validate(synth::kImageSize % cfg.patch_size == 0, "encoder: patch size must divide image size");
    Rng rng(derive_seed(init_seed, "encoder-init"));
    tok_emb_.init("enc.tok", kTextVocab, cfg.width, rng);
    patch_emb_.init("enc.patch", cfg.patch_dim(), cfg.width, rng);
    text_pos_.name = "enc.text_pos";
    text_pos_.value = Tensor<T>({kTextLen, cfg.width});
    text_pos_.value.fill_normal(rng, T(0.02));
    image_pos_.name = "enc.image_pos";
    image_pos_.value = Tensor<T>({cfg.image_tokens(), cfg.width});
    image_pos_.value.fill_normal(rng, T(0.02));
    blocks_.resize((size_t)cfg.n_layers);
    for (int64_t i = 0; i < cfg.n_layers; ++i)
        blocks_[(size_t)i].init("enc.block" + std::to_string(i), cfg.width, cfg.n_heads, rng);
}

template <class T>
void Encoder<T>::params(nn::ParamList<T>& ps) {
    tok_emb_.params(ps);
    patch_emb_.params(ps);
    ps.push_back(&text_pos_);
    ps.push_back(&image_pos_);
    for (auto& b : blocks_) b.params(ps);
}

template <class T>
Tensor<T> Encoder<T>::patches_tensor(const TokenSeq& tokens) const {
    int64_t n_img = cfg_.image_tokens();
    validate((int64_t)tokens.image_patches.size() == n_img * cfg_.patch_dim(), "encode: malformed patches");
    Tensor<T> patches({n_img, cfg_.patch_dim()});
    for (int64_t i = 0; i < patches.numel(); ++i) patches[i] = (T)tokens.image_patches[(size_t)i];
    return patches;
}

template <class T>
Tensor<T> Encoder<T>::embed(const TokenSeq& tokens) const {
    validate(tokens.length() > 0, "encode: empty token sequence");
    validate((int64_t)tokens.text_ids.size() == kTextLen, "encode: malformed text ids");
    int64_t L = tokens.length();
    Tensor<T> x({L, cfg_.width});
    for (int64_t i = 0; i < kTextLen; ++i) {
        tok_emb_.lookup(tokens.text_ids[(size_t)i], x.data() + i * cfg_.width);
        const T* pos = text_pos_.value.data() + i * cfg_.width;
        T* row = x.data() + i * cfg_.width;
        for (int64_t c = 0; c < cfg_.width; ++c) row[c] += pos[c];
    }
    if (tokens.has_image()) {
        int64_t n_img = cfg_.image_tokens();
        Tensor<T> patches = patches_tensor(tokens);
        Tensor<T> emb;
        patch_emb_.forward(patches, emb);
        for (int64_t i = 0; i < n_img; ++i) {
            T* row = x.data() + (kTextLen + i) * cfg_.width;
            const T* e = emb.data() + i * cfg_.width;
            const T* pos = image_pos_.value.data() + i * cfg_.width;
            for (int64_t c = 0; c < cfg_.width; ++c) row[c] = e[c] + pos[c];
        }
    }
    return x;
}

template <class T>
void Encoder<T>::embed_backward(const TokenSeq& tokens, const Tensor<T>& demb, nn::GradBuffer<T>& gb,
                                const nn::ParamList<T>& ps) const {
    int64_t C = cfg_.width;
    Tensor<T>& g_tok = gb.of(ps, &tok_emb_.table);
    Tensor<T>& g_tpos = gb.of(ps, &text_pos_);
    for (int64_t i = 0; i < kTextLen; ++i) {
        const T* d = demb.data() + i * C;
        tok_emb_.accumulate_grad(tokens.text_ids[(size_t)i], d, g_tok);
        T* gp = g_tpos.data() + i * C;
        for (int64_t c = 0; c < C; ++c) gp[c] += d[c];
    }
    if (tokens.has_image()) {
        int64_t n_img = cfg_.image_tokens();
        Tensor<T>& g_ipos = gb.of(ps, &image_pos_);
        Tensor<T> d_img({n_img, C});
        for (int64_t i = 0; i < n_img; ++i) {
            const T* d = demb.data() + (kTextLen + i) * C;
            T* gp = g_ipos.data() + i * C;
            T* di = d_img.data() + i * C;
            for (int64_t c = 0; c < C; ++c) {
                gp[c] += d[c];
                di[c] = d[c];
            }
        }
        Tensor<T> patches = patches_tensor(tokens);
        Tensor<T> dpatches;
        patch_emb_.backward(patches, d_img, dpatches, gb.of(ps, &patch_emb_.W), gb.of(ps, &patch_emb_.b));
    }
}

template <class T>
LayerFeatureStack<T> Encoder<T>::encode(const TokenSeq& tokens) const {
    return encode_embedded(embed(tokens), tokens.modality_mask);
}

template <class T>
LayerFeatureStack<T> Encoder<T>::encode_embedded(Tensor<T> embedded, const std::vector<bool>& modality_mask) const {
    validate(embedded.numel() > 0, "encode: empty token sequence");
    validate(embedded.dim(0) == (int64_t)modality_mask.size(), "encode: mask/sequence length mismatch");
    LayerFeatureStack<T> stack;
    stack.modality_mask = modality_mask;
    stack.layer_count = cfg_.n_layers;
    stack.features.reserve((size_t)cfg_.n_layers + 1);
    stack.features.push_back(std::move(embedded));
    for (const auto& b : blocks_) {
        Tensor<T> y;
        typename nn::TransformerBlock<T>::Cache c;
        b.forward(stack.features.back(), y, c);
        stack.features.push_back(std::move(y));
    }
    return stack;
}

template <class T>
void Encoder<T>::save(const std::string& path) const {
    Checkpoint ck;
    ck.kind = "encoder";
    ck.dtype = sizeof(T) == 4 ? "f32" : "f64";
    ck.meta = {{"n_layers", cfg_.n_layers},
               {"width", cfg_.width},
               {"n_heads", cfg_.n_heads},
               {"patch_size", cfg_.patch_size}};
    nn::ParamList<T> ps;
    const_cast<Encoder<T>*>(this)->params(ps);
    for (auto* p : ps) ck.put(p->name, p->value);
    save_checkpoint(path, ck);
}

template <class T>
Encoder<T> Encoder<T>::load(const std::string& path) {
    Checkpoint ck = load_checkpoint(path, "encoder");
    EncoderConfig cfg;
    cfg.n_layers = ck.meta.at("n_layers").get<int64_t>();
    cfg.width = ck.meta.at("width").get<int64_t>();
    cfg.n_heads = ck.meta.at("n_heads").get<int64_t>();
    cfg.patch_size = ck.meta.at("patch_size").get<int64_t>();
    Encoder<T> enc(cfg, 0);
    nn::ParamList<T> ps;
    enc.params(ps);
    for (auto* p : ps) ck.get(p->name, p->value);
    return enc;
}

template <class T>
std::string Encoder<T>::weight_hash() const {
    nn::ParamList<T> ps;
    const_cast<Encoder<T>*>(this)->params(ps);
    std::string acc;
    for (auto* p : ps) acc += sha256_hex(p->value.data(), (size_t)p->value.numel() * sizeof(T));
    return sha256_hex(acc);
}

// ---------------------------------------------------------------------------
// Proxy pretraining
// ---------------------------------------------------------------------------

namespace {

template <class T>
void mean_pool(const Tensor<T>& feats, const std::vector<bool>& mask, bool text, Tensor<T>& pooled,
               std::vector<int64_t>& members) {
    int64_t C = feats.dim(1);
    pooled = Tensor<T>({C});
    members.clear();
    for (int64_t i = 0; i < (int64_t)mask.size(); ++i)
        if (mask[(size_t)i] == text) members.push_back(i);
    for (int64_t i : members) {
        const T* row = feats.data() + i * C;
        for (int64_t c = 0; c < C; ++c) pooled[c] += row[c];
    }
    for (int64_t c = 0; c < C; ++c) pooled[c] /= (T)members.size();
}

// per-channel max over one modality's tokens; the subject occupies only a
// few image tokens, so a mean would dilute its signal
template <class T>
void max_pool(const Tensor<T>& feats, const std::vector<bool>& mask, bool text, Tensor<T>& pooled,
              Tensor<int64_t>& argmax) {
    int64_t C = feats.dim(1);
    pooled = Tensor<T>({C});
    argmax = Tensor<int64_t>({C});
    bool first = true;
    for (int64_t i = 0; i < (int64_t)mask.size(); ++i) {
        if (mask[(size_t)i] != text) continue;
        const T* row = feats.data() + i * C;
        for (int64_t c = 0; c < C; ++c) {
            if (first || row[c] > pooled[c]) {
                pooled[c] = row[c];
                argmax[c] = i;
            }
        }
        first = false;
    }
}

} // namespace

template <class T>
PretrainResult pretrain_encoder(Encoder<T>& encoder, const std::vector<synth::SubjectSample>& dataset,
                                const PretrainConfig& cfg) {
    validate(!dataset.empty(), "pretrain_encoder: empty dataset");
    validate(cfg.steps >= 0 && cfg.batch_size >= 1, "pretrain_encoder: bad budget");
    const EncoderConfig& ec = encoder.config();
    int64_t n_hold = std::max<int64_t>(1, (int64_t)((double)dataset.size() * cfg.holdout_fraction));
    int64_t n_train = (int64_t)dataset.size() - n_hold;
    validate(n_train >= 1, "pretrain_encoder: dataset too small for holdout split");

    Rng rng(derive_seed(cfg.seed, "encoder-pretrain"));

    nn::Linear<T> head_shape, head_color, head_bg, head_pos;
    head_shape.init("head.shape", ec.width, synth::kNumShapes, rng);
    head_color.init("head.color", ec.width, synth::kNumSubjectColors, rng);
    head_bg.init("head.bg", ec.width, synth::kNumBackgrounds, rng);
    head_pos.init("head.pos", ec.width, synth::kNumPositions, rng);

    nn::ParamList<T> ps;
    encoder.params(ps);
    head_shape.params(ps);
    head_color.params(ps);
    head_bg.params(ps);
    head_pos.params(ps);

    nn::Adam<T> opt;
    opt.lr = cfg.lr;
    opt.init(ps);

    PretrainResult result;
    result.random_init_warning = cfg.steps == 0;

    struct HeadArgmax {
        int64_t shape, color, bg, pos;
    };

    auto run_sample = [&](const synth::SubjectSample& sample, nn::GradBuffer<T>* gb,
                          HeadArgmax* pred) -> double {
        TokenSeq toks = tokenize(sample.prompt, &sample.reference, ec);
        Tensor<T> x = encoder.embed(toks);
        int64_t L = x.dim(0), C = x.dim(1);
        std::vector<Tensor<T>> acts;
        std::vector<typename nn::TransformerBlock<T>::Cache> caches(encoder.blocks().size());
        acts.push_back(std::move(x));
        for (size_t b = 0; b < encoder.blocks().size(); ++b) {
            Tensor<T> y;
            encoder.blocks()[b].forward(acts.back(), y, caches[b]);
            acts.push_back(std::move(y));
        }
        const Tensor<T>& top = acts.back();

        Tensor<T> img_pool, txt_pool;
        Tensor<int64_t> img_argmax;
        std::vector<int64_t> txt_members;
        max_pool(top, toks.modality_mask, false, img_pool, img_argmax);
        mean_pool(top, toks.modality_mask, true, txt_pool, txt_members);

        Tensor<T> lg_shape, lg_color, lg_bg, lg_pos;
        head_shape.forward(img_pool, lg_shape);
        head_color.forward(img_pool, lg_color);
        head_bg.forward(txt_pool, lg_bg);
        head_pos.forward(txt_pool, lg_pos);

        if (pred) {
            auto argmax = [](const Tensor<T>& t) {
                int64_t a = 0;
                for (int64_t i = 1; i < t.numel(); ++i)
                    if (t[i] > t[a]) a = i;
                return a;
            };
            *pred = {argmax(lg_shape), argmax(lg_color), argmax(lg_bg), argmax(lg_pos)};
        }

        Tensor<T> d_shape({(int64_t)synth::kNumShapes}), d_color({(int64_t)synth::kNumSubjectColors}),
            d_bg({(int64_t)synth::kNumBackgrounds}), d_pos({(int64_t)synth::kNumPositions});
        double loss = 0;
        loss += (double)nn::cross_entropy(lg_shape.data(), synth::kNumShapes, (int64_t)sample.subject.shape,
                                          d_shape.data());
        loss += (double)nn::cross_entropy(lg_color.data(), synth::kNumSubjectColors,
                                          (int64_t)sample.subject.color, d_color.data());
        loss += (double)nn::cross_entropy(lg_bg.data(), synth::kNumBackgrounds,
                                          (int64_t)sample.prompt.background, d_bg.data());
        loss += (double)nn::cross_entropy(lg_pos.data(), synth::kNumPositions, (int64_t)sample.prompt.position,
                                          d_pos.data());
        if (!gb) return loss;

        Tensor<T> d_img_pool({C}), d_txt_pool({C});
        Tensor<T> tmp;
        head_shape.backward(img_pool, d_shape, tmp, gb->of(ps, &head_shape.W), gb->of(ps, &head_shape.b));
        d_img_pool.add(tmp);
        head_color.backward(img_pool, d_color, tmp, gb->of(ps, &head_color.W), gb->of(ps, &head_color.b));
        d_img_pool.add(tmp);
        head_bg.backward(txt_pool, d_bg, tmp, gb->of(ps, &head_bg.W), gb->of(ps, &head_bg.b));
        d_txt_pool.add(tmp);
        head_pos.backward(txt_pool, d_pos, tmp, gb->of(ps, &head_pos.W), gb->of(ps, &head_pos.b));
        d_txt_pool.add(tmp);

        Tensor<T> grad({L, C});
        for (int64_t c = 0; c < C; ++c) grad[img_argmax[c] * C + c] += d_img_pool[c];
        for (int64_t i : txt_members) {
            T* row = grad.data() + i * C;
            for (int64_t c = 0; c < C; ++c) row[c] += d_txt_pool[c] / (T)txt_members.size();
        }

        for (int64_t b = (int64_t)encoder.blocks().size() - 1; b >= 0; --b) {
            Tensor<T> dx;
            encoder.blocks()[(size_t)b].backward(grad, caches[(size_t)b], dx, *gb, ps);
            grad = std::move(dx);
        }
        encoder.embed_backward(toks, grad, *gb, ps);
        return loss;
    };

    nn::GradBuffer<T> gb(ps);
    for (int64_t step = 0; step < cfg.steps; ++step) {
        gb.zero();
        double loss = 0;
        for (int64_t b = 0; b < cfg.batch_size; ++b) {
            int64_t idx = rng.uniform_int(n_train);
            loss += run_sample(dataset[(size_t)idx], &gb, nullptr);
        }
        loss /= (double)cfg.batch_size;
        require(std::isfinite(loss), "pretrain_encoder: non-finite loss at step " + std::to_string(step));
        for (auto& g : gb.g) g.scale(T(1.0 / (double)cfg.batch_size));
        opt.step(ps, gb);
        result.loss_curve.push_back(loss);
    }

    // holdout evaluation
    int64_t id_ok = 0, prompt_ok = 0;
    for (int64_t i = n_train; i < (int64_t)dataset.size(); ++i) {
        HeadArgmax pred{};
        run_sample(dataset[(size_t)i], nullptr, &pred);
        const auto& s = dataset[(size_t)i];
        if (pred.shape == (int64_t)s.subject.shape && pred.color == (int64_t)s.subject.color) id_ok++;
        if (pred.bg == (int64_t)s.prompt.background && pred.pos == (int64_t)s.prompt.position) prompt_ok++;
    }
    result.holdout_identity_accuracy = (double)id_ok / (double)n_hold;
    result.holdout_prompt_accuracy = (double)prompt_ok / (double)n_hold;
    return result;
}

template class Encoder<float>;
template class Encoder<double>;
template PretrainResult pretrain_encoder<float>(Encoder<float>&, const std::vector<synth::SubjectSample>&,
                                                const PretrainConfig&);
template PretrainResult pretrain_encoder<double>(Encoder<double>&, const std::vector<synth::SubjectSample>&,
                                                 const PretrainConfig&);

} // namespace sdg::enc
