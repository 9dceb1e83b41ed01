#include "sdg/aggregation.hpp"

namespace sdg::agg {

template <class T>
void Lap<T>::init(const std::string& name, int64_t c, int64_t n_heads, int64_t n_stack_layers, Rng& rng) {
    validate(c % n_heads == 0, "lap: width must divide heads");
    width = c;
    heads = n_heads;
    hd = c / n_heads;
    stack_layers = n_stack_layers;
    wq.init(name + ".q", c, c, rng);
    wk.init(name + ".k", c, c, rng);
    wv.init(name + ".v", c, c, rng);
    wo.init(name + ".o", c, c, rng);
    ada.init(name + ".ada", c, n_stack_layers, rng);
    // zero start: with identical layers the initial attention is uniform
    ada.W.value.zero();
    ada.b.value.zero();
}

template <class T>
void Lap<T>::params(nn::ParamList<T>& ps) {
    wq.params(ps);
    wk.params(ps);
    wv.params(ps);
    wo.params(ps);
    ada.params(ps);
}

template <class T>
void Lap<T>::forward(const std::vector<const Tensor<T>*>& layers, const LayerMask& mask, Tensor<T>& out,
                     Cache* cache) const {
    validate((int64_t)layers.size() == stack_layers, "lap_pool: stack layer count mismatch");
    validate(mask.mode == MaskMode::keep_all || (int64_t)mask.keep.size() == stack_layers,
             "lap_pool: layer mask length mismatch");
    validate(mask.kept_count(stack_layers) >= 1, "lap_pool: all layers masked");

    int64_t L = layers[0]->dim(0);
    for (auto* f : layers)
        validate(f->dim(0) == L && f->dim(1) == width, "lap_pool: inconsistent layer shapes");

    // axis layers and effective features
    std::vector<int64_t> axis;
    std::vector<Tensor<T>> f_eff;
    if (mask.mode == MaskMode::training_select) {
        for (int64_t i = 0; i < stack_layers; ++i)
            if (mask.kept(i)) {
                axis.push_back(i);
                f_eff.push_back(*layers[(size_t)i]);
            }
    } else {
        for (int64_t i = 0; i < stack_layers; ++i) {
            axis.push_back(i);
            if (mask.mode == MaskMode::inference_zero && !mask.kept(i))
                f_eff.emplace_back(std::vector<int64_t>{L, width}); // zeros
            else
                f_eff.push_back(*layers[(size_t)i]);
        }
    }
    int64_t n_axis = (int64_t)axis.size();

    // query input: per-token mean over the axis
    Tensor<T> q_in({L, width});
    for (const auto& f : f_eff) q_in.add(f);
    q_in.scale(T(1) / (T)n_axis);

    Tensor<T> q;
    wq.forward(q_in, q);
    Tensor<T> ada_logits; // (L, stack_layers)
    ada.forward(q_in, ada_logits);

    std::vector<Tensor<T>> k(f_eff.size()), v(f_eff.size());
    for (size_t i = 0; i < f_eff.size(); ++i) {
        wk.forward(f_eff[i], k[i]);
        wv.forward(f_eff[i], v[i]);
    }

    Tensor<T> att({L, heads, stack_layers});
    Tensor<T> ctx({L, width});
    T scale = T(1) / std::sqrt((T)hd);
    std::vector<T> logits((size_t)n_axis);
    for (int64_t t = 0; t < L; ++t) {
        for (int64_t h = 0; h < heads; ++h) {
            const T* qt = q.data() + t * width + h * hd;
            for (int64_t i = 0; i < n_axis; ++i) {
                const T* kt = k[(size_t)i].data() + t * width + h * hd;
                T s = 0;
                for (int64_t d = 0; d < hd; ++d) s += qt[d] * kt[d];
                logits[(size_t)i] = s * scale + ada_logits[t * stack_layers + axis[(size_t)i]];
            }
            nn::softmax_row(logits.data(), n_axis);
            T* ctx_t = ctx.data() + t * width + h * hd;
            for (int64_t i = 0; i < n_axis; ++i) {
                att[(t * heads + h) * stack_layers + axis[(size_t)i]] = logits[(size_t)i];
                const T* vt = v[(size_t)i].data() + t * width + h * hd;
                T a = logits[(size_t)i];
                for (int64_t d = 0; d < hd; ++d) ctx_t[d] += a * vt[d];
            }
        }
    }
    wo.forward(ctx, out);

    if (cache) {
        cache->q_in = std::move(q_in);
        cache->q = std::move(q);
        cache->f_eff = std::move(f_eff);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->att = std::move(att);
        cache->ctx = std::move(ctx);
        cache->axis = std::move(axis);
    }
}

template <class T>
void Lap<T>::backward(const Tensor<T>& dout, const Cache& c, nn::GradBuffer<T>& gb,
                      const nn::ParamList<T>& ps) const {
    int64_t L = dout.dim(0);
    int64_t n_axis = (int64_t)c.axis.size();
    T scale = T(1) / std::sqrt((T)hd);

    Tensor<T> dctx;
    wo.backward(c.ctx, dout, dctx, gb.of(ps, &wo.W), gb.of(ps, &wo.b));

    Tensor<T> dq({L, width});
    std::vector<Tensor<T>> dk(c.k.size()), dv(c.v.size());
    for (size_t i = 0; i < c.k.size(); ++i) {
        dk[i] = Tensor<T>({L, width});
        dv[i] = Tensor<T>({L, width});
    }
    Tensor<T> dada({L, stack_layers});

    std::vector<T> p((size_t)n_axis), dp((size_t)n_axis), dlogit((size_t)n_axis);
    for (int64_t t = 0; t < L; ++t) {
        for (int64_t h = 0; h < heads; ++h) {
            const T* dctx_t = dctx.data() + t * width + h * hd;
            for (int64_t i = 0; i < n_axis; ++i) {
                p[(size_t)i] = c.att[(t * heads + h) * stack_layers + c.axis[(size_t)i]];
                const T* vt = c.v[(size_t)i].data() + t * width + h * hd;
                T s = 0;
                for (int64_t d = 0; d < hd; ++d) s += dctx_t[d] * vt[d];
                dp[(size_t)i] = s;
                T* dvt = dv[(size_t)i].data() + t * width + h * hd;
                for (int64_t d = 0; d < hd; ++d) dvt[d] += p[(size_t)i] * dctx_t[d];
            }
            nn::softmax_backward_row(p.data(), dp.data(), dlogit.data(), n_axis);
            const T* qt = c.q.data() + t * width + h * hd;
            T* dqt = dq.data() + t * width + h * hd;
            for (int64_t i = 0; i < n_axis; ++i) {
                T dl = dlogit[(size_t)i];
                dada[t * stack_layers + c.axis[(size_t)i]] += dl;
                const T* kt = c.k[(size_t)i].data() + t * width + h * hd;
                T* dkt = dk[(size_t)i].data() + t * width + h * hd;
                for (int64_t d = 0; d < hd; ++d) {
                    dqt[d] += dl * scale * kt[d];
                    dkt[d] += dl * scale * qt[d];
                }
            }
        }
    }

    Tensor<T> scratch;
    wq.backward(c.q_in, dq, scratch, gb.of(ps, &wq.W), gb.of(ps, &wq.b));
    ada.backward(c.q_in, dada, scratch, gb.of(ps, &ada.W), gb.of(ps, &ada.b));
    for (size_t i = 0; i < c.k.size(); ++i) {
        wk.backward(c.f_eff[i], dk[i], scratch, gb.of(ps, &wk.W), gb.of(ps, &wk.b));
        wv.backward(c.f_eff[i], dv[i], scratch, gb.of(ps, &wv.W), gb.of(ps, &wv.b));
    }
}

template <class T>
std::vector<Tensor<T>> gather_modality(const enc::LayerFeatureStack<T>& stack, bool text,
                                       std::vector<int64_t>& rows) {
    rows.clear();
    for (int64_t i = 0; i < (int64_t)stack.modality_mask.size(); ++i)
        if (stack.modality_mask[(size_t)i] == text) rows.push_back(i);
    int64_t C = stack.width();
    std::vector<Tensor<T>> out;
    out.reserve(stack.features.size());
    for (const auto& f : stack.features) {
        Tensor<T> slice({(int64_t)rows.size(), C});
        for (size_t r = 0; r < rows.size(); ++r) {
            const T* src = f.data() + rows[r] * C;
            T* dst = slice.data() + (int64_t)r * C;
            for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
        }
        out.push_back(std::move(slice));
    }
    return out;
}

template <class T>
void Dla<T>::init(int64_t width, int64_t n_heads, int64_t n_stack_layers, bool residual, uint64_t seed) {
    Rng rng(derive_seed(seed, "dla-init"));
    text_lap.init("dla.text", width, n_heads, n_stack_layers, rng);
    image_lap.init("dla.image", width, n_heads, n_stack_layers, rng);
    residual_to_last_layer = residual;
}

template <class T>
void Dla<T>::params(nn::ParamList<T>& ps) {
    text_lap.params(ps);
    image_lap.params(ps);
}

template <class T>
Tensor<T> Dla<T>::forward(const enc::LayerFeatureStack<T>& stack, const LayerMask& text_mask,
                          const LayerMask& image_mask, DlaCache<T>* cache) const {
    validate((int64_t)stack.features.size() == text_lap.stack_layers, "dla_aggregate: stack depth mismatch");
    std::vector<int64_t> text_rows, image_rows;
    auto text_slices = gather_modality(stack, true, text_rows);
    auto image_slices = gather_modality(stack, false, image_rows);
    validate(!text_rows.empty(), "dla_aggregate: stack has no text tokens");
    validate(image_mask.mode == MaskMode::keep_all || !image_rows.empty(),
             "dla_aggregate: image layer mask given but stack has no image tokens");

    int64_t L = stack.seq_len(), C = stack.width();
    Tensor<T> out({L, C});

    auto run = [&](const Lap<T>& lap, const std::vector<Tensor<T>>& slices, const std::vector<int64_t>& rows,
                   const LayerMask& mask, typename Lap<T>::Cache* c) {
        std::vector<const Tensor<T>*> ptrs;
        ptrs.reserve(slices.size());
        for (const auto& s : slices) ptrs.push_back(&s);
        Tensor<T> pooled;
        lap.forward(ptrs, mask, pooled, c);
        for (size_t r = 0; r < rows.size(); ++r) {
            const T* src = pooled.data() + (int64_t)r * C;
            T* dst = out.data() + rows[r] * C;
            for (int64_t ch = 0; ch < C; ++ch) dst[ch] = src[ch];
        }
    };

    run(text_lap, text_slices, text_rows, text_mask, cache ? &cache->text : nullptr);
    if (!image_rows.empty()) run(image_lap, image_slices, image_rows, image_mask, cache ? &cache->image : nullptr);

    if (residual_to_last_layer) out.add(stack.features.back());

    if (cache) {
        cache->text_rows = std::move(text_rows);
        cache->image_rows = std::move(image_rows);
        cache->has_image = !cache->image_rows.empty();
        cache->seq_len = L;
    }
    return out;
}

template <class T>
void Dla<T>::backward(const Tensor<T>& dtokens, const DlaCache<T>& cache, nn::GradBuffer<T>& gb,
                      const nn::ParamList<T>& ps) const {
    int64_t C = dtokens.dim(1);
    // residual path has no parameters; gather per-modality output grads
    Tensor<T> dtext({(int64_t)cache.text_rows.size(), C});
    for (size_t r = 0; r < cache.text_rows.size(); ++r) {
        const T* src = dtokens.data() + cache.text_rows[r] * C;
        T* dst = dtext.data() + (int64_t)r * C;
        for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
    }
    text_lap.backward(dtext, cache.text, gb, ps);
    if (cache.has_image) {
        Tensor<T> dimage({(int64_t)cache.image_rows.size(), C});
        for (size_t r = 0; r < cache.image_rows.size(); ++r) {
            const T* src = dtokens.data() + cache.image_rows[r] * C;
            T* dst = dimage.data() + (int64_t)r * C;
            for (int64_t c = 0; c < C; ++c) dst[c] = src[c];
        }
        image_lap.backward(dimage, cache.image, gb, ps);
    }
}

template <class T>
void Dla<T>::save_into(Checkpoint& ck) const {
    nn::ParamList<T> ps;
    const_cast<Dla<T>*>(this)->params(ps);
    for (auto* p : ps) ck.put(p->name, p->value);
    ck.meta["dla"] = {{"width", text_lap.width},
                      {"heads", text_lap.heads},
                      {"stack_layers", text_lap.stack_layers},
                      {"residual_to_last_layer", residual_to_last_layer}};
}

template <class T>
void Dla<T>::load_from(const Checkpoint& ck) {
    nn::ParamList<T> ps;
    params(ps);
    for (auto* p : ps) ck.get(p->name, p->value);
    residual_to_last_layer = ck.meta.at("dla").at("residual_to_last_layer").get<bool>();
}

template <class T>
LayerAttentionProfile extract_layer_attention(const enc::LayerFeatureStack<T>& stack, const Dla<T>& dla) {
    DlaCache<T> cache;
    dla.forward(stack, LayerMask::all(), LayerMask::all(), &cache);
    LayerAttentionProfile prof;
    int64_t M1 = dla.text_lap.stack_layers;
    auto reduce = [&](const typename Lap<T>::Cache& c, int64_t n_tokens) {
        std::vector<double> mean((size_t)M1, 0.0);
        int64_t heads = dla.text_lap.heads;
        for (int64_t t = 0; t < n_tokens; ++t)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t l = 0; l < M1; ++l)
                    mean[(size_t)l] += (double)c.att[(t * heads + h) * M1 + l];
        for (auto& m : mean) m /= (double)(n_tokens * heads);
        return mean;
    };
    prof.text = reduce(cache.text, (int64_t)cache.text_rows.size());
    if (cache.has_image) prof.image = reduce(cache.image, (int64_t)cache.image_rows.size());
    return prof;
}

template struct Lap<float>;
template struct Lap<double>;
template struct Dla<float>;
template struct Dla<double>;
template std::vector<Tensor<float>> gather_modality<float>(const enc::LayerFeatureStack<float>&, bool,
                                                           std::vector<int64_t>&);
template std::vector<Tensor<double>> gather_modality<double>(const enc::LayerFeatureStack<double>&, bool,
                                                             std::vector<int64_t>&);
template LayerAttentionProfile extract_layer_attention<float>(const enc::LayerFeatureStack<float>&,
                                                              const Dla<float>&);
template LayerAttentionProfile extract_layer_attention<double>(const enc::LayerFeatureStack<double>&,
                                                               const Dla<double>&);

} // namespace sdg::agg
