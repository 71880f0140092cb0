#pragma once

#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowbridge/autograd.hpp"
#include "flowbridge/nn.hpp"
#include "flowbridge/patches.hpp"
#include "flowbridge/rng.hpp"

namespace flowbridge {

using TokenSequence = std::vector<int>;

// Word-level vocabulary over the ShapesWorld caption grammar plus the prompt
// template words. Ids are dense in [0, |V|); order is fixed so checkpoints
// and serialized vocabularies agree across runs.
class Vocabulary {
public:
    static constexpr const char* kPad = "<pad>";
    static constexpr const char* kBos = "<bos>";
    static constexpr const char* kEos = "<eos>";
    static constexpr const char* kImg = "<img>";

    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        for (size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
    }

    static Vocabulary shapes_world() {
        return Vocabulary({
            kPad, kBos, kEos, kImg,
            "a", "photo", "of", "and", "two", "three",
            "red", "green", "blue", "yellow",
            "circle", "square", "triangle",
            "circles", "squares", "triangles",
            "left", "right", "above", "below",
            "User:", "Generate", "an", "image", "Assistant:",
        });
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    const std::string& word(int id) const { return tokens_[static_cast<size_t>(id)]; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int id(const std::string& w) const {
        auto it = ids_.find(w);
        if (it == ids_.end()) throw OovError("out-of-vocabulary word: '" + w + "'");
        return it->second;
    }

    int pad_id() const { return id(kPad); }
    int bos_id() const { return id(kBos); }
    int eos_id() const { return id(kEos); }
    int img_id() const { return id(kImg); }

    // Whitespace-split word ids with <bos> prepended.
    TokenSequence tokenize(const std::string& text) const {
        TokenSequence out{bos_id()};
        std::string w;
        for (char c : text + " ") {
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!w.empty()) out.push_back(id(w));
                w.clear();
            } else {
                w += c;
            }
        }
        return out;
    }

    std::string detokenize(const TokenSequence& ids) const {
        std::string out;
        for (int t : ids) {
            const std::string& w = word(t);
            if (w == kPad || w == kBos || w == kEos || w == kImg) continue;
            if (!out.empty()) out += ' ';
            out += w;
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write vocabulary to " + path);
        for (const auto& t : tokens_) f << t << '\n';
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot read vocabulary from " + path);
        std::vector<std::string> toks;
        std::string line;
        while (std::getline(f, line))
            if (!line.empty()) toks.push_back(line);
        return Vocabulary(std::move(toks));
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

// "User: Generate an image <caption>\n Assistant:"; byte-exact, including the
// empty-caption case used for classifier-free guidance.
struct PromptTemplate {
    static constexpr const char* kPrefix = "User: Generate an image ";
    static constexpr const char* kSuffix = "\n Assistant:";
};

inline std::string format_generation_prompt(const std::string& caption) {
    return std::string(PromptTemplate::kPrefix) + caption + PromptTemplate::kSuffix;
}

struct MllmConfig {
    int d_model = 128;
    int layers = 4;
    int heads = 4;
    int vocab_size = 0;  // filled from the vocabulary at init
    int max_seq_len = 96;
    int patch_size = 8;
    int image_channels = 3;
    int image_size = 32;

    int patch_tokens() const {
        return (image_size / patch_size) * (image_size / patch_size);
    }
    void validate() const {
        if (d_model % heads != 0) throw ContractViolation("d_model must be divisible by heads");
    }
};

// Per-layer key/value tensors of a processed prompt, shape [1, Lp, d_model]
// each. The LLM is frozen whenever queries are used, so these are pure
// functions of the prompt string and can be cached by the caller.
template <typename T>
struct PromptKv {
    int len = 0;
    std::vector<Tensor<T>> k;
    std::vector<Tensor<T>> v;
};

template <typename T>
struct Mllm {
    MllmConfig cfg;
    Vocabulary vocab;
    ParameterStore<T> store;

    static Mllm init(MllmConfig cfg, const Vocabulary& vocab, uint64_t seed) {
        cfg.vocab_size = vocab.size();
        cfg.validate();
        Mllm m;
        m.cfg = cfg;
        m.vocab = vocab;
        Rng rng(seed);
        const int d = cfg.d_model;
        m.store.add("tok_embed", rng.template normal_tensor<T>({cfg.vocab_size, d}, kInitStd));
        m.store.add("text_pos", rng.template normal_tensor<T>({cfg.max_seq_len, d}, kInitStd));
        init_linear(m.store, "patch.proj", cfg.image_channels * cfg.patch_size * cfg.patch_size, d,
                    rng);
        m.store.add("patch.pos", rng.template normal_tensor<T>({cfg.patch_tokens(), d}, kInitStd));
        for (int i = 0; i < cfg.layers; ++i)
            init_transformer_block(m.store, "blocks." + std::to_string(i), d, d, cfg.layers, rng);
        init_layer_norm(m.store, "final_ln", d);
        init_linear(m.store, "head", d, cfg.vocab_size, rng);
        return m;
    }

    Params<T> bind(Tape<T>& tape, const std::string& prefix = "") {
        return Params<T>{&tape, &store, prefix};
    }

    // [B, C, H, W] images -> [B, Lp, d] patch tokens (flatten, project, add
    // learned positional embedding).
    Var<T> patch_embed_var(Tape<T>& tape, const Tensor<T>& images, const std::string& prefix = "") {
        Params<T> p = bind(tape, prefix);
        Var<T> img = constant(tape, images.ndim() == 3
                                        ? images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)})
                                        : images);
        Var<T> toks = patchify(img, cfg.patch_size);
        Var<T> proj = linear_p(p, "patch.proj", toks);
        return add_pos(proj, p("patch.pos"));
    }

    // Core pre-LN causal block stack over x [B, L, d], ending in the final
    // layer norm. With a prefix, attention keys/values are the cached prompt
    // rows concatenated before the freshly projected ones and the causal mask
    // is offset by the prefix length. collect_k/v harvest the per-layer
    // key/value tensors (used to build prompt caches).
    Var<T> blocks_forward(Tape<T>& tape, Var<T> x, const std::vector<Tensor<T>>* prefix_k,
                          const std::vector<Tensor<T>>* prefix_v,
                          std::vector<Tensor<T>>* collect_k = nullptr,
                          std::vector<Tensor<T>>* collect_v = nullptr,
                          const std::string& prefix = "") {
        Params<T> p = bind(tape, prefix);
        const int offset = prefix_k ? (*prefix_k)[0].dim(1) : 0;
        for (int i = 0; i < cfg.layers; ++i) {
            std::string pre = "blocks." + std::to_string(i);
            Var<T> h = layer_norm_p(p, pre + ".ln1", x);
            Var<T> q = linear_p(p, pre + ".attn.q", h);
            Var<T> k = linear_p(p, pre + ".attn.k", h);
            Var<T> v = linear_p(p, pre + ".attn.v", h);
            if (collect_k) {
                collect_k->push_back(k.value());
                collect_v->push_back(v.value());
            }
            Var<T> o;
            if (prefix_k) {
                Var<T> kc = concat_seq(constant(tape, (*prefix_k)[static_cast<size_t>(i)]), k);
                Var<T> vc = concat_seq(constant(tape, (*prefix_v)[static_cast<size_t>(i)]), v);
                o = sdpa(q, kc, vc, cfg.heads, AttnMask::causal_offset, offset);
            } else {
                o = sdpa(q, k, v, cfg.heads, AttnMask::causal);
            }
            x = add(x, linear_p(p, pre + ".attn.o", o));
            x = add(x, mlp_gelu(p, pre + ".mlp", layer_norm_p(p, pre + ".ln2", x)));
        }
        return layer_norm_p(p, "final_ln", x);
    }

    // Embeds equal-length text sequences (positions 0-based within the text
    // segment), optionally prefixed by image patch tokens, and returns logits
    // at the text positions: [B, Lt, vocab].
    Var<T> lm_logits(Tape<T>& tape, const std::vector<TokenSequence>& texts,
                     const Tensor<T>* images, const std::string& prefix = "") {
        if (texts.empty()) throw ContractViolation("lm_logits: empty batch");
        const int B = static_cast<int>(texts.size());
        const int Lt = static_cast<int>(texts[0].size());
        for (const auto& t : texts)
            if (static_cast<int>(t.size()) != Lt)
                throw ContractViolation("lm_logits: ragged batch (bucket by length first)");
        const int Lp = images ? cfg.patch_tokens() : 0;
        if (Lp + Lt > cfg.max_seq_len)
            throw SequenceLengthError("sequence length " + std::to_string(Lp + Lt) +
                                      " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
        Params<T> p = bind(tape, prefix);
        std::vector<int> flat;
        flat.reserve(static_cast<size_t>(B) * Lt);
        for (const auto& t : texts) flat.insert(flat.end(), t.begin(), t.end());
        Var<T> emb = embedding(p("tok_embed"), flat, {B, Lt, cfg.d_model});
        std::vector<int> pos_ids(static_cast<size_t>(Lt));
        for (int i = 0; i < Lt; ++i) pos_ids[static_cast<size_t>(i)] = i;
        Var<T> pos = embedding(p("text_pos"), pos_ids, {Lt, cfg.d_model});
        Var<T> x = add_pos(emb, pos);
        if (images) x = concat_seq(patch_embed_var(tape, *images, prefix), x);
        x = blocks_forward(tape, x, nullptr, nullptr, nullptr, nullptr, prefix);
        if (images) x = slice_seq(x, Lp, Lt);
        return linear_p(p, "head", x);
    }

    // Runs the frozen prompt side once and harvests per-layer keys/values.
    PromptKv<T> compute_prompt_kv(const std::string& prompt) {
        TokenSequence ids = vocab.tokenize(prompt);
        const int Lt = static_cast<int>(ids.size());
        Tape<T> tape(/*inference=*/true);
        Params<T> p = bind(tape);
        Var<T> emb = embedding(p("tok_embed"), ids, {1, Lt, cfg.d_model});
        std::vector<int> pos_ids(static_cast<size_t>(Lt));
        for (int i = 0; i < Lt; ++i) pos_ids[static_cast<size_t>(i)] = i;
        Var<T> x = add_pos(emb, embedding(p("text_pos"), pos_ids, {Lt, cfg.d_model}));
        PromptKv<T> out;
        out.len = Lt;
        blocks_forward(tape, x, nullptr, nullptr, &out.k, &out.v);
        return out;
    }

    // Query extraction for a bucket of prompts with identical token length.
    // Queries get positional embeddings continuing the text index, attend
    // causally to the full prompt and to earlier queries, and are read at the
    // final layer. Gradients reach the query bank only; the prompt side is
    // cached constants.
    Var<T> queries_forward(Tape<T>& tape, const std::vector<const PromptKv<T>*>& prompts,
                           Var<T> query_bank) {
        if (prompts.empty()) throw ContractViolation("queries_forward: empty bucket");
        const int B = static_cast<int>(prompts.size());
        const int Lp = prompts[0]->len;
        const int N = query_bank.value().dim(0);
        const int d = cfg.d_model;
        if (Lp + N > cfg.max_seq_len)
            throw SequenceLengthError("prompt length " + std::to_string(Lp) + " + " +
                                      std::to_string(N) + " queries exceeds max_seq_len " +
                                      std::to_string(cfg.max_seq_len));
        std::vector<Tensor<T>> pk, pv;
        for (int l = 0; l < cfg.layers; ++l) {
            Tensor<T> ks({B, Lp, d}), vs({B, Lp, d});
            for (int b = 0; b < B; ++b) {
                if (prompts[static_cast<size_t>(b)]->len != Lp)
                    throw ContractViolation("queries_forward: ragged prompt bucket");
                const auto& kb = prompts[static_cast<size_t>(b)]->k[static_cast<size_t>(l)];
                const auto& vb = prompts[static_cast<size_t>(b)]->v[static_cast<size_t>(l)];
                std::copy(kb.data.begin(), kb.data.end(),
                          ks.data.begin() + static_cast<int64_t>(b) * Lp * d);
                std::copy(vb.data.begin(), vb.data.end(),
                          vs.data.begin() + static_cast<int64_t>(b) * Lp * d);
            }
            pk.push_back(std::move(ks));
            pv.push_back(std::move(vs));
        }
        Params<T> p = bind(tape);
        Var<T> x = constant(tape, Tensor<T>({B, N, d}));
        x = add_pos(x, query_bank);
        if (N > 0) {
            std::vector<int> pos_ids(static_cast<size_t>(N));
            for (int i = 0; i < N; ++i) pos_ids[static_cast<size_t>(i)] = Lp + i;
            x = add_pos(x, embedding(p("text_pos"), pos_ids, {N, d}));
        }
        return blocks_forward(tape, x, &pk, &pv);
    }

    // Mean next-token cross-entropy over caption tokens (plus the closing
    // <eos>), conditioned on the patch-token prefix; one optimizer step.
    double train_lm_step(const std::vector<std::pair<Tensor<T>, std::string>>& batch,
                         OptimizerState<T>& opt, const TrainHyperparams& hp, double lr_t) {
        if (batch.empty()) throw ContractViolation("train_lm_step: empty batch");
        // bucket sample indices by caption token length
        std::map<int, std::vector<size_t>> buckets;
        std::vector<TokenSequence> texts(batch.size());
        for (size_t i = 0; i < batch.size(); ++i) {
            TokenSequence t{vocab.img_id()};
            TokenSequence cap = vocab.tokenize(batch[i].second);  // <bos> + words
            t.insert(t.end(), cap.begin(), cap.end());
            t.push_back(vocab.eos_id());
            texts[i] = std::move(t);
            buckets[static_cast<int>(texts[i].size())].push_back(i);
        }
        Tape<T> tape;
        Var<T> total;
        int total_n = 0;
        bool first = true;
        for (auto& [len, idxs] : buckets) {
            const int b = static_cast<int>(idxs.size());
            std::vector<TokenSequence> bucket_texts;
            Tensor<T> images({b, cfg.image_channels, cfg.image_size, cfg.image_size});
            const int64_t npix = images.size() / b;
            for (int j = 0; j < b; ++j) {
                const auto& img = batch[idxs[static_cast<size_t>(j)]].first;
                std::copy(img.data.begin(), img.data.end(), images.data.begin() + j * npix);
                bucket_texts.push_back(texts[idxs[static_cast<size_t>(j)]]);
            }
            Var<T> logits = lm_logits(tape, bucket_texts, &images);
            // position of <bos> predicts w1, ..., w_k predicts <eos>
            std::vector<int> targets;
            targets.reserve(static_cast<size_t>(b) * len);
            for (int j = 0; j < b; ++j)
                for (int i = 0; i < len; ++i)
                    targets.push_back(i >= 1 && i + 1 < len ? bucket_texts[static_cast<size_t>(j)][static_cast<size_t>(i + 1)]
                                                            : -1);
            auto [loss, n] = cross_entropy(logits, targets);
            Var<T> weighted = scale(loss, static_cast<T>(n));
            total = first ? weighted : add(total, weighted);
            total_n += n;
            first = false;
        }
        Var<T> mean_loss = scale(total, static_cast<T>(1.0 / total_n));
        auto grads = tape.compute_gradients(mean_loss);
        clip_global_norm(grads, hp.grad_clip);
        adamw_step(store, grads, opt, hp, lr_t);
        return static_cast<double>(mean_loss.value().at(0));
    }

    // Greedy argmax decode from <bos> until <eos> or max_len words.
    std::string greedy_caption(const Tensor<T>& image, int max_len) {
        TokenSequence text{vocab.img_id(), vocab.bos_id()};
        Tensor<T> img = image.ndim() == 3
                            ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                            : image;
        for (int step = 0; step < max_len; ++step) {
            Tape<T> tape(/*inference=*/true);
            Var<T> logits = lm_logits(tape, {text}, &img);
            const Tensor<T>& lv = logits.value();
            const int V = lv.cols();
            const int64_t last = (lv.rows() - 1) * V;
            int best = 0;
            for (int j = 1; j < V; ++j)
                if (lv.at(last + j) > lv.at(last + best)) best = j;
            if (best == vocab.eos_id()) break;
            text.push_back(best);
        }
        return vocab.detokenize(text);
    }
};

// Single-prompt query extraction: returns the [N, d_model] hidden states at
// the query positions. kv, when given, is reused across calls with the same
// frozen LLM (compute_prompt_kv output for this prompt).
template <typename T>
Var<T> forward_with_queries(Tape<T>& tape, Mllm<T>& lm, const std::string& prompt,
                            Var<T> query_bank, const PromptKv<T>* kv = nullptr) {
    PromptKv<T> local;
    if (!kv) {
        local = lm.compute_prompt_kv(prompt);
        kv = &local;
    }
    Var<T> out = lm.queries_forward(tape, {kv}, query_bank);
    const int N = query_bank.value().dim(0);
    return reshape(out, {N, lm.cfg.d_model});
}

}  // namespace flowbridge
