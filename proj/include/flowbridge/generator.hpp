#pragma once

#include <functional>
#include <map>

#include "flowbridge/bridge.hpp"
#include "flowbridge/mllm.hpp"
#include "flowbridge/patches.hpp"

namespace flowbridge {

struct DiTConfig {
    int image_size = 32;
    int channels = 3;
    int patch_size = 8;
    int d_model = 96;
    int layers = 4;
    int heads = 4;
    int d_cond = 96;

    int patch_tokens() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    void validate() const {
        if (image_size % patch_size != 0)
            throw ContractViolation("dit: image_size must be divisible by patch_size");
        if (d_model % heads != 0)
            throw ContractViolation("dit: d_model must be divisible by heads");
        if (d_model % 2 != 0) throw ContractViolation("dit: d_model must be even");
    }
};

struct GuidanceConfig {
    double scale = 4.0;
    int steps = 50;
    uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw ContractViolation("guidance: steps must be >= 1");
        if (scale < 0) throw ContractViolation("guidance: scale must be >= 0");
    }
};

// Sinusoidal features of t*1000 over dim/2 geometrically spaced frequencies,
// sin half first then cos half (t=0 -> zeros then ones).
template <typename T>
Tensor<T> timestep_sinusoid(double t, int dim) {
    if (dim % 2 != 0) throw ContractViolation("timestep embedding dim must be even");
    if (t < 0.0 || t > 1.0) throw ContractViolation("timestep t must lie in [0,1]");
    const int half = dim / 2;
    Tensor<T> out({dim});
    const double x = t * 1000.0;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out.at(i) = static_cast<T>(std::sin(x * freq));
        out.at(half + i) = static_cast<T>(std::cos(x * freq));
    }
    return out;
}

// v_uncond + scale * (v_cond - v_uncond); exact endpoints at scale 0 and 1.
template <typename T>
Tensor<T> cfg_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, double scale) {
    if (v_cond.shape != v_uncond.shape)
        throw DimensionError("cfg_velocity: " + shape_str(v_cond.shape) + " vs " +
                             shape_str(v_uncond.shape));
    if (scale == 1.0) return v_cond;
    if (scale == 0.0) return v_uncond;
    Tensor<T> out(v_cond.shape);
    for (int64_t i = 0; i < out.size(); ++i)
        out.at(i) = v_uncond.at(i) + static_cast<T>(scale) * (v_cond.at(i) - v_uncond.at(i));
    return out;
}

// Velocity-prediction diffusion transformer in pixel space. Parameter names:
//   patch.proj.{w,b}, patch.pos, t_mlp.fc1/.fc2, final_ln, out_proj,
//   blocks.i.{ln1, attn.*, lnx, xattn.*, ln2, mlp.*}
template <typename T>
struct Dit {
    DiTConfig cfg;
    ParameterStore<T> store;

    static Dit init(const DiTConfig& cfg, uint64_t seed) {
        cfg.validate();
        Dit m;
        m.cfg = cfg;
        Rng rng(seed);
        const int d = cfg.d_model;
        const double res = 1.0 / std::sqrt(2.0 * cfg.layers);
        init_linear(m.store, "patch.proj", cfg.channels * cfg.patch_size * cfg.patch_size, d, rng);
        m.store.add("patch.pos", rng.template normal_tensor<T>({cfg.patch_tokens(), d}, kInitStd));
        init_linear(m.store, "t_mlp.fc1", d, d, rng);
        init_linear(m.store, "t_mlp.fc2", d, d, rng);
        for (int i = 0; i < cfg.layers; ++i) {
            std::string pre = "blocks." + std::to_string(i);
            init_layer_norm(m.store, pre + ".ln1", d);
            init_linear(m.store, pre + ".attn.q", d, d, rng);
            init_linear(m.store, pre + ".attn.k", d, d, rng);
            init_linear(m.store, pre + ".attn.v", d, d, rng);
            init_linear(m.store, pre + ".attn.o", d, d, rng, res);
            init_layer_norm(m.store, pre + ".lnx", d);
            init_linear(m.store, pre + ".xattn.q", d, d, rng);
            init_linear(m.store, pre + ".xattn.k", cfg.d_cond, d, rng);
            init_linear(m.store, pre + ".xattn.v", cfg.d_cond, d, rng);
            init_linear(m.store, pre + ".xattn.o", d, d, rng, res);
            init_layer_norm(m.store, pre + ".ln2", d);
            init_linear(m.store, pre + ".mlp.fc1", d, 4 * d, rng);
            init_linear(m.store, pre + ".mlp.fc2", 4 * d, d, rng, res);
        }
        init_layer_norm(m.store, "final_ln", d);
        const int pd = cfg.channels * cfg.patch_size * cfg.patch_size;
        init_linear(m.store, "out_proj", d, pd, rng);
        // time-gated linear skip from raw input patches to the velocity
        // output: lets the network pass noise components through directly
        // instead of squeezing them through d_model tokens; zero-initialized
        // so it starts as a pure token-path model
        m.store.add("skip.gate.w", Tensor<T>({d, pd}));
        m.store.add("skip.gate.b", Tensor<T>({pd}));
        return m;
    }

    // [B] timesteps -> [B, d_model] embeddings (sinusoid + 2-layer gelu MLP).
    Var<T> timestep_embedding(Tape<T>& tape, const std::vector<double>& ts,
                              const std::string& prefix = "") {
        Params<T> p{&tape, &store, prefix};
        Tensor<T> sin({static_cast<int>(ts.size()), cfg.d_model});
        for (size_t b = 0; b < ts.size(); ++b) {
            Tensor<T> row = timestep_sinusoid<T>(ts[b], cfg.d_model);
            std::copy(row.data.begin(), row.data.end(),
                      sin.data.begin() + static_cast<int64_t>(b) * cfg.d_model);
        }
        Var<T> h = gelu(linear_p(p, "t_mlp.fc1", constant(tape, sin)));
        return linear_p(p, "t_mlp.fc2", h);
    }

    // x_t [B,C,H,W] (or [C,H,W]), per-sample t, cond [B,N,d_cond] (or
    // [N,d_cond]) -> predicted velocity with the input's shape.
    Var<T> velocity(Tape<T>& tape, Var<T> x_t, const std::vector<double>& ts, Var<T> cond,
                    const std::string& prefix = "") {
        const std::vector<int> in_shape = x_t.value().shape;
        const std::vector<int> cond_shape = cond.value().shape;
        bool flat = in_shape.size() == 3;
        if (flat) {
            x_t = reshape(x_t, {1, in_shape[0], in_shape[1], in_shape[2]});
            cond = reshape(cond, {1, cond_shape[0], cond_shape[1]});
        }
        const int B = x_t.value().dim(0);
        if (static_cast<int>(ts.size()) != B)
            throw ContractViolation("dit velocity: need one timestep per sample");
        if (cond.value().cols() != cfg.d_cond)
            throw DimensionError("dit velocity: cond width " +
                                 std::to_string(cond.value().cols()) + " != d_cond " +
                                 std::to_string(cfg.d_cond));
        if (cond.value().dim(0) != B)
            throw DimensionError("dit velocity: cond batch mismatch");
        Params<T> p{&tape, &store, prefix};
        Var<T> raw = patchify(x_t, cfg.patch_size);
        Var<T> x = linear_p(p, "patch.proj", raw);
        x = add_pos(x, p("patch.pos"));
        Var<T> temb = timestep_embedding(tape, ts, prefix);
        x = add_per_sample(x, temb);
        for (int i = 0; i < cfg.layers; ++i) {
            std::string pre = "blocks." + std::to_string(i);
            // self-attention, cross-attention over cond, MLP; each pre-LN
            Var<T> h = layer_norm_p(p, pre + ".ln1", x);
            x = add(x, attention(h, h, cfg.heads, /*causal=*/false, p, pre + ".attn"));
            Var<T> hx = layer_norm_p(p, pre + ".lnx", x);
            x = add(x, attention(hx, cond, cfg.heads, /*causal=*/false, p, pre + ".xattn"));
            x = add(x, mlp_gelu(p, pre + ".mlp", layer_norm_p(p, pre + ".ln2", x)));
        }
        x = layer_norm_p(p, "final_ln", x);
        x = linear_p(p, "out_proj", x);
        x = add(x, mul_per_sample(raw, linear_p(p, "skip.gate", temb)));
        x = unpatchify(x, cfg.patch_size, cfg.channels, cfg.image_size, cfg.image_size);
        if (flat) x = reshape(x, in_shape);
        return x;
    }
};

using PromptKvCache = std::map<std::string, PromptKv<float>>;

// One flow-matching optimizer step over (image, caption) pairs. Per-sample
// randomness (caption dropout, t, noise) is drawn up front in sample order so
// the step is a pure function of the rng state. Gradients flow to the bridge
// always and to the DiT unless its parameters are frozen; the LLM is constant.
// Returns the mean loss; dropped_out, when given, receives the number of
// captions replaced by "".
template <typename T>
double fm_training_step(const std::vector<std::pair<Tensor<T>, std::string>>& batch,
                        double dropout_p, Mllm<T>& lm, Bridge<T>& bridge, Dit<T>& dit,
                        OptimizerState<T>& opt_bridge, OptimizerState<T>& opt_dit,
                        const TrainHyperparams& hp, double lr_t, Rng& rng,
                        PromptKvCache* kv_cache = nullptr, int* dropped_out = nullptr) {
    if (batch.empty()) throw ContractViolation("fm_training_step: empty batch");
    if (dropout_p < 0.0 || dropout_p > 1.0)
        throw ContractViolation("fm_training_step: dropout_p must lie in [0,1]");
    const int B = static_cast<int>(batch.size());
    const DiTConfig& dc = dit.cfg;
    const int64_t npix = static_cast<int64_t>(dc.channels) * dc.image_size * dc.image_size;

    struct Sample {
        std::string prompt;
        double t;
        Tensor<T> x_t;      // (1-t) x0 + t eps
        Tensor<T> v_star;   // eps - x0
    };
    std::vector<Sample> samples(static_cast<size_t>(B));
    int dropped = 0;
    for (int i = 0; i < B; ++i) {
        const auto& [img, caption] = batch[static_cast<size_t>(i)];
        if (img.size() != npix)
            throw DimensionError("fm_training_step: image shape " + shape_str(img.shape) +
                                 " does not match DiT config");
        Sample& s = samples[static_cast<size_t>(i)];
        bool drop = rng.uniform() < dropout_p;
        dropped += drop ? 1 : 0;
        s.prompt = format_generation_prompt(drop ? "" : caption);
        s.t = rng.uniform();
        Tensor<T> eps = rng.template normal_tensor<T>(img.shape);
        s.x_t = Tensor<T>(img.shape);
        s.v_star = Tensor<T>(img.shape);
        for (int64_t j = 0; j < npix; ++j) {
            s.x_t.at(j) = static_cast<T>((1.0 - s.t) * img.at(j) + s.t * eps.at(j));
            s.v_star.at(j) = eps.at(j) - img.at(j);
        }
    }
    if (dropped_out) *dropped_out = dropped;

    // prompt KV (cached across steps when a cache is supplied), bucketed by
    // prompt token length for batched query extraction
    PromptKvCache local_cache;
    PromptKvCache& cache = kv_cache ? *kv_cache : local_cache;
    std::map<int, std::vector<int>> buckets;
    for (int i = 0; i < B; ++i) {
        const std::string& pr = samples[static_cast<size_t>(i)].prompt;
        auto it = cache.find(pr);
        if (it == cache.end()) it = cache.emplace(pr, lm.compute_prompt_kv(pr)).first;
        buckets[it->second.len].push_back(i);
    }

    Tape<T> tape;
    Var<T> total;
    bool first = true;
    for (auto& [len, idxs] : buckets) {
        const int b = static_cast<int>(idxs.size());
        std::vector<const PromptKv<T>*> kvs;
        for (int i : idxs) kvs.push_back(&cache.at(samples[static_cast<size_t>(i)].prompt));
        Var<T> states = lm.queries_forward(tape, kvs, bridge.query_bank_var(tape, "bridge."));
        Var<T> cond = bridge.connector_forward(tape, states, "bridge.");
        Tensor<T> x_t({b, dc.channels, dc.image_size, dc.image_size});
        Tensor<T> v_star(x_t.shape);
        std::vector<double> ts;
        for (int j = 0; j < b; ++j) {
            const Sample& s = samples[static_cast<size_t>(idxs[static_cast<size_t>(j)])];
            std::copy(s.x_t.data.begin(), s.x_t.data.end(), x_t.data.begin() + j * npix);
            std::copy(s.v_star.data.begin(), s.v_star.data.end(),
                      v_star.data.begin() + j * npix);
            ts.push_back(s.t);
        }
        Var<T> v_hat = dit.velocity(tape, constant(tape, x_t), ts, cond, "dit.");
        Var<T> part = scale(mse_loss(v_hat, v_star), static_cast<T>(b));
        total = first ? part : add(total, part);
        first = false;
    }
    Var<T> loss = scale(total, static_cast<T>(1.0 / B));
    auto grads = tape.compute_gradients(loss);
    clip_global_norm(grads, hp.grad_clip);
    GradMap<T> g_bridge, g_dit;
    for (auto& [name, g] : grads) {
        if (name.rfind("bridge.", 0) == 0) g_bridge.emplace(name.substr(7), std::move(g));
        else if (name.rfind("dit.", 0) == 0) g_dit.emplace(name.substr(4), std::move(g));
    }
    adamw_step(bridge.store, g_bridge, opt_bridge, hp, lr_t);
    adamw_step(dit.store, g_dit, opt_dit, hp, lr_t);
    return static_cast<double>(loss.value().at(0));
}

// Explicit-Euler integration of dx/dt = v(x, t) from t=1 down to t=0 on a
// uniform grid with `steps` left-endpoint updates; result clamped to [-1,1].
template <typename T>
Tensor<T> euler_integrate(const std::function<Tensor<T>(const Tensor<T>&, double)>& velocity,
                          Tensor<T> x, int steps) {
    if (steps < 1) throw ContractViolation("euler_integrate: steps must be >= 1");
    const double dt = 1.0 / steps;
    for (int s = 0; s < steps; ++s) {
        double t = 1.0 - s * dt;
        Tensor<T> v = velocity(x, t);
        if (v.shape != x.shape)
            throw DimensionError("euler_integrate: velocity shape " + shape_str(v.shape) +
                                 " != state shape " + shape_str(x.shape));
        for (int64_t i = 0; i < x.size(); ++i) x.at(i) -= static_cast<T>(dt) * v.at(i);
    }
    for (int64_t i = 0; i < x.size(); ++i)
        x.at(i) = std::min(T(1), std::max(T(-1), x.at(i)));
    return x;
}

// CFG Euler sampling: noise seeded by g.seed, conditioning computed once for
// the caption and the empty caption; the unconditional branch is skipped at
// scale 1 (and the conditional one at scale 0), which is exact because
// cfg_velocity short-circuits those scales.
template <typename T>
Tensor<T> euler_sampler(const std::string& caption, const GuidanceConfig& g, Mllm<T>& lm,
                        Bridge<T>& bridge, Dit<T>& dit) {
    g.validate();
    const DiTConfig& dc = dit.cfg;
    auto cond_tokens = [&](const std::string& cap) {
        Tape<T> tape(/*inference=*/true);
        return condition_from_prompt(tape, cap, lm, bridge).value();
    };
    Tensor<T> cond = cond_tokens(caption);
    Tensor<T> uncond;
    if (g.scale != 1.0) uncond = cond_tokens("");

    auto vel = [&](const Tensor<T>& x, const Tensor<T>& c, double t) {
        Tape<T> tape(/*inference=*/true);
        return dit.velocity(tape, constant(tape, x), {t}, constant(tape, c)).value();
    };
    std::function<Tensor<T>(const Tensor<T>&, double)> guided =
        [&](const Tensor<T>& x, double t) {
            if (g.scale == 1.0) return vel(x, cond, t);
            if (g.scale == 0.0) return vel(x, uncond, t);
            return cfg_velocity(vel(x, cond, t), vel(x, uncond, t), g.scale);
        };
    Rng rng(g.seed);
    Tensor<T> x = rng.template normal_tensor<T>({dc.channels, dc.image_size, dc.image_size});
    return euler_integrate(guided, std::move(x), g.steps);
}

}  // namespace flowbridge
