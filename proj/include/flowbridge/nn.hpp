#pragma once

#include <string>

#include "flowbridge/autograd.hpp"
#include "flowbridge/params.hpp"
#include "flowbridge/rng.hpp"

namespace flowbridge {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

// Binds store entries onto a tape under a qualified-name prefix, so gradient
// maps stay unambiguous when several components join one loss.
template <typename T>
struct Params {
    Tape<T>* tape;
    ParameterStore<T>* store;
    std::string prefix;  // qualified-name prefix, e.g. "connector."

    Var<T> operator()(const std::string& name) const {
        return tape->param(*store, name, prefix + name);
    }
};

// ---------------------------------------------------------------------------
// initialization: weights ~ N(0, 0.02), biases 0, residual output projections
// scaled by 1/sqrt(2 * num_layers)
// ---------------------------------------------------------------------------

template <typename T>
void init_linear(ParameterStore<T>& store, const std::string& prefix, int din, int dout, Rng& rng,
                 double std_scale = 1.0) {
    store.add(prefix + ".w", rng.template normal_tensor<T>({din, dout}, kInitStd * std_scale));
    store.add(prefix + ".b", Tensor<T>({dout}));
}

template <typename T>
void init_layer_norm(ParameterStore<T>& store, const std::string& prefix, int d) {
    store.add(prefix + ".gain", Tensor<T>::full({d}, T(1)));
    store.add(prefix + ".bias", Tensor<T>({d}));
}

// Attention + 4x GELU MLP block parameters. d_kv is the width of the
// cross-attention source (equals d_model for self-attention blocks).
template <typename T>
void init_transformer_block(ParameterStore<T>& store, const std::string& prefix, int d_model,
                            int d_kv, int num_layers, Rng& rng) {
    const double res = 1.0 / std::sqrt(2.0 * num_layers);
    init_layer_norm(store, prefix + ".ln1", d_model);
    init_linear(store, prefix + ".attn.q", d_model, d_model, rng);
    init_linear(store, prefix + ".attn.k", d_kv, d_model, rng);
    init_linear(store, prefix + ".attn.v", d_kv, d_model, rng);
    init_linear(store, prefix + ".attn.o", d_model, d_model, rng, res);
    init_layer_norm(store, prefix + ".ln2", d_model);
    init_linear(store, prefix + ".mlp.fc1", d_model, 4 * d_model, rng);
    init_linear(store, prefix + ".mlp.fc2", 4 * d_model, d_model, rng, res);
}

// ---------------------------------------------------------------------------
// forward builders
// ---------------------------------------------------------------------------

template <typename T>
Var<T> linear_p(const Params<T>& p, const std::string& prefix, Var<T> x) {
    return linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

template <typename T>
Var<T> layer_norm_p(const Params<T>& p, const std::string& prefix, Var<T> x,
                    T eps = static_cast<T>(kLayerNormEps)) {
    return layer_norm(x, p(prefix + ".gain"), p(prefix + ".bias"), eps);
}

// Full multi-head attention: projections around the sdpa core. Serves
// self-attention when q_src == kv_src and cross-attention otherwise.
template <typename T>
Var<T> attention(Var<T> q_src, Var<T> kv_src, int heads, bool causal, const Params<T>& p,
                 const std::string& prefix, Tensor<T>* probs_out = nullptr) {
    Var<T> q = linear_p(p, prefix + ".q", q_src);
    Var<T> k = linear_p(p, prefix + ".k", kv_src);
    Var<T> v = linear_p(p, prefix + ".v", kv_src);
    Var<T> o = sdpa(q, k, v, heads, causal ? AttnMask::causal : AttnMask::none, 0, probs_out);
    return linear_p(p, prefix + ".o", o);
}

template <typename T>
Var<T> mlp_gelu(const Params<T>& p, const std::string& prefix, Var<T> x) {
    return linear_p(p, prefix + ".fc2", gelu(linear_p(p, prefix + ".fc1", x)));
}

// Pre-LN residual block: x += Attn(LN(x), kv or LN(x)); x += MLP(LN(x)).
// has_kv selects cross-attention over the provided source.
template <typename T>
Var<T> transformer_block(Var<T> x, Var<T>* kv, bool causal, int heads, const Params<T>& p,
                         const std::string& prefix) {
    Var<T> h = layer_norm_p(p, prefix + ".ln1", x);
    Var<T> a = attention(h, kv ? *kv : h, heads, causal, p, prefix + ".attn");
    x = add(x, a);
    x = add(x, mlp_gelu(p, prefix + ".mlp", layer_norm_p(p, prefix + ".ln2", x)));
    return x;
}

}  // namespace flowbridge
