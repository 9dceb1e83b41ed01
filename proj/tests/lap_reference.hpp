#pragma once

// Independent straightforward re-implementation of the layer-axis attention
// arithmetic. Plain loops, no Eigen, no code shared with Lap::forward; used
// as the oracle for equivalence checks.

#include <cmath>
#include <vector>

#include "sdg/aggregation.hpp"

namespace sdg_test {

inline std::vector<double> naive_lap_pool(const std::vector<sdg::Tensor<double>>& layers,
                                          const sdg::agg::LayerMask& mask, const sdg::agg::Lap<double>& w) {
    using namespace sdg;
    int64_t M1 = (int64_t)layers.size();
    int64_t L = layers[0].dim(0), C = layers[0].dim(1);
    int64_t H = w.heads, D = C / H;

    auto matvec = [&](const nn::Linear<double>& lin, const std::vector<double>& x) {
        std::vector<double> y((size_t)lin.out, 0.0);
        for (int64_t o = 0; o < lin.out; ++o) {
            double s = lin.b.value[o];
            for (int64_t i = 0; i < lin.in; ++i) s += lin.W.value[o * lin.in + i] * x[(size_t)i];
            y[(size_t)o] = s;
        }
        return y;
    };

    std::vector<double> out((size_t)(L * C), 0.0);
    for (int64_t t = 0; t < L; ++t) {
        std::vector<std::vector<double>> feats;
        std::vector<int64_t> axis;
        for (int64_t l = 0; l < M1; ++l) {
            bool kept = mask.mode == agg::MaskMode::keep_all || mask.keep[(size_t)l];
            if (mask.mode == agg::MaskMode::training_select && !kept) continue;
            std::vector<double> f((size_t)C, 0.0);
            if (!(mask.mode == agg::MaskMode::inference_zero && !kept))
                for (int64_t c = 0; c < C; ++c) f[(size_t)c] = layers[(size_t)l][t * C + c];
            feats.push_back(std::move(f));
            axis.push_back(l);
        }
        std::vector<double> qin((size_t)C, 0.0);
        for (const auto& f : feats)
            for (int64_t c = 0; c < C; ++c) qin[(size_t)c] += f[(size_t)c];
        for (int64_t c = 0; c < C; ++c) qin[(size_t)c] /= (double)feats.size();

        auto q = matvec(w.wq, qin);
        auto ada = matvec(w.ada, qin);
        std::vector<std::vector<double>> ks, vs;
        for (const auto& f : feats) {
            ks.push_back(matvec(w.wk, f));
            vs.push_back(matvec(w.wv, f));
        }
        std::vector<double> ctx((size_t)C, 0.0);
        for (int64_t h = 0; h < H; ++h) {
            std::vector<double> logits(feats.size());
            for (size_t i = 0; i < feats.size(); ++i) {
                double s = 0;
                for (int64_t d = 0; d < D; ++d) s += q[(size_t)(h * D + d)] * ks[i][(size_t)(h * D + d)];
                logits[i] = s / std::sqrt((double)D) + ada[(size_t)axis[i]];
            }
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            double Z = 0;
            for (double& v : logits) {
                v = std::exp(v - mx);
                Z += v;
            }
            for (double& v : logits) v /= Z;
            for (size_t i = 0; i < feats.size(); ++i)
                for (int64_t d = 0; d < D; ++d) ctx[(size_t)(h * D + d)] += logits[i] * vs[i][(size_t)(h * D + d)];
        }
        auto o = matvec(w.wo, ctx);
        for (int64_t c = 0; c < C; ++c) out[(size_t)(t * C + c)] = o[(size_t)c];
    }
    return out;
}

} // namespace sdg_test
