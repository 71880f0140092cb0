#pragma once

#include "flowbridge/mllm.hpp"
#include "flowbridge/nn.hpp"

namespace flowbridge {

struct ConnectorConfig {
    int layers = 6;
    int d_model = 128;  // connector width; input projection maps LLM width here
    int heads = 4;
    int d_cond = 96;

    void validate() const {
        if (layers < 1) throw ContractViolation("connector: layers must be >= 1");
        if (d_model % heads != 0)
            throw ContractViolation("connector: d_model must be divisible by heads");
    }
};

// Learnable query bank plus the six-layer bidirectional connector mapping LLM
// query states to diffusion conditioning tokens. Parameter names:
//   query_bank, in_proj.{w,b}, blocks.i.*, final_ln.{gain,bias}, out_proj.{w,b}
template <typename T>
struct Bridge {
    ConnectorConfig cfg;
    int num_queries = 0;
    int d_llm = 0;
    ParameterStore<T> store;

    static Bridge init(int num_queries, int d_llm, const ConnectorConfig& cfg, uint64_t seed) {
        cfg.validate();
        if (num_queries < 1) throw ContractViolation("query bank: N must be >= 1");
        Bridge b;
        b.cfg = cfg;
        b.num_queries = num_queries;
        b.d_llm = d_llm;
        Rng rng(seed);
        b.store.add("query_bank", rng.template normal_tensor<T>({num_queries, d_llm}, kInitStd));
        init_linear(b.store, "in_proj", d_llm, cfg.d_model, rng);
        for (int i = 0; i < cfg.layers; ++i)
            init_transformer_block(b.store, "blocks." + std::to_string(i), cfg.d_model,
                                   cfg.d_model, cfg.layers, rng);
        init_layer_norm(b.store, "final_ln", cfg.d_model);
        init_linear(b.store, "out_proj", cfg.d_model, cfg.d_cond, rng);
        return b;
    }

    Var<T> query_bank_var(Tape<T>& tape, const std::string& prefix = "") {
        return Params<T>{&tape, &store, prefix}("query_bank");
    }

    // [*, N, d_llm] query states -> [*, N, d_cond] conditioning tokens.
    // Bidirectional self-attention, no positional embedding: the body is
    // permutation-equivariant over the N rows.
    Var<T> connector_forward(Tape<T>& tape, Var<T> states, const std::string& prefix = "") {
        const std::vector<int> in_shape = states.value().shape;  // tape may reallocate below
        const int width = in_shape.back();
        if (width != d_llm)
            throw DimensionError("connector_forward: input width " + std::to_string(width) +
                                 " != expected " + std::to_string(d_llm));
        Params<T> p{&tape, &store, prefix};
        bool flat = in_shape.size() == 2;
        Var<T> x = flat ? reshape(states, {1, in_shape[0], in_shape[1]}) : states;
        x = linear_p(p, "in_proj", x);
        for (int i = 0; i < cfg.layers; ++i)
            x = transformer_block(x, static_cast<Var<T>*>(nullptr), /*causal=*/false, cfg.heads,
                                  p, "blocks." + std::to_string(i));
        x = layer_norm_p(p, "final_ln", x);
        x = linear_p(p, "out_proj", x);
        if (flat) x = reshape(x, {in_shape[0], cfg.d_cond});
        return x;
    }
};

// Full text-to-condition path: prompt -> frozen LLM query states -> connector.
// The CFG unconditional branch is condition_from_prompt with caption = "".
template <typename T>
Var<T> condition_from_prompt(Tape<T>& tape, const std::string& caption, Mllm<T>& lm,
                             Bridge<T>& bridge, const PromptKv<T>* kv = nullptr) {
    Var<T> states = forward_with_queries(tape, lm, format_generation_prompt(caption),
                                         bridge.query_bank_var(tape), kv);
    return bridge.connector_forward(tape, states);
}

}  // namespace flowbridge
