#pragma once

#include <chrono>
#include <cstring>
#include <filesystem>
#include <set>

#include "flowbridge/generator.hpp"
#include "flowbridge/shapesworld.hpp"

namespace flowbridge {

// ---------------------------------------------------------------------------
// parameter checksums

// Order-sensitive FNV-1a over (name, shape, raw float bytes); independent of
// frozen flags. pred, when given, selects entries by name.
template <typename T>
std::string param_checksum(const ParameterStore<T>& store,
                           const std::function<bool(const std::string&)>& pred = nullptr) {
    Fnv1a h;
    for (const auto& e : store.entries()) {
        if (pred && !pred(e.name)) continue;
        h.update(e.name);
        for (int d : e.tensor.shape) h.update_value(d);
        for (const T& v : e.tensor.data) {
            float f = static_cast<float>(v);
            h.update_value(f);
        }
    }
    return h.hex();
}

// ---------------------------------------------------------------------------
// model bundle

struct ModelDims {
    MllmConfig llm;
    int queries = 16;
    ConnectorConfig connector;
    DiTConfig dit;
};

struct Model {
    ModelDims dims;
    Mllm<float> lm;
    Bridge<float> bridge;
    Dit<float> dit;

    static Model init(const ModelDims& dims, uint64_t seed) {
        if (dims.connector.d_cond != dims.dit.d_cond)
            throw ConfigError("connector d_cond must match dit d_cond");
        Model m;
        m.dims = dims;
        m.lm = Mllm<float>::init(dims.llm, Vocabulary::shapes_world(), seed);
        m.dims.llm = m.lm.cfg;  // vocab_size filled in
        m.bridge = Bridge<float>::init(dims.queries, dims.llm.d_model, dims.connector, seed + 1);
        m.dit = Dit<float>::init(dims.dit, seed + 2);
        return m;
    }

    std::map<std::string, std::string> component_checksums() {
        return {{"llm", param_checksum(lm.store)},
                {"query_bank", param_checksum(bridge.store, [](const std::string& n) {
                     return n == "query_bank";
                 })},
                {"connector", param_checksum(bridge.store, [](const std::string& n) {
                     return n != "query_bank";
                 })},
                {"dit", param_checksum(dit.store)}};
    }
};

// ---------------------------------------------------------------------------
// checkpoint: [magic][u64 manifest length][manifest JSON][payload f32 LE]

inline constexpr char kCheckpointMagic[8] = {'F', 'B', 'C', 'P', '0', '0', '0', '1'};

namespace detail {

inline nlohmann::json mllm_cfg_json(const MllmConfig& c) {
    return {{"d_model", c.d_model},       {"layers", c.layers},
            {"heads", c.heads},           {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len}, {"patch_size", c.patch_size},
            {"image_channels", c.image_channels}, {"image_size", c.image_size}};
}
inline MllmConfig mllm_cfg_from(const nlohmann::json& j) {
    MllmConfig c;
    c.d_model = j.at("d_model");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.vocab_size = j.at("vocab_size");
    c.max_seq_len = j.at("max_seq_len");
    c.patch_size = j.at("patch_size");
    c.image_channels = j.at("image_channels");
    c.image_size = j.at("image_size");
    return c;
}
inline nlohmann::json conn_cfg_json(const ConnectorConfig& c) {
    return {{"layers", c.layers}, {"d_model", c.d_model}, {"heads", c.heads}, {"d_cond", c.d_cond}};
}
inline ConnectorConfig conn_cfg_from(const nlohmann::json& j) {
    ConnectorConfig c;
    c.layers = j.at("layers");
    c.d_model = j.at("d_model");
    c.heads = j.at("heads");
    c.d_cond = j.at("d_cond");
    return c;
}
inline nlohmann::json dit_cfg_json(const DiTConfig& c) {
    return {{"image_size", c.image_size}, {"channels", c.channels},
            {"patch_size", c.patch_size}, {"d_model", c.d_model},
            {"layers", c.layers},         {"heads", c.heads},
            {"d_cond", c.d_cond}};
}
inline DiTConfig dit_cfg_from(const nlohmann::json& j) {
    DiTConfig c;
    c.image_size = j.at("image_size");
    c.channels = j.at("channels");
    c.patch_size = j.at("patch_size");
    c.d_model = j.at("d_model");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.d_cond = j.at("d_cond");
    return c;
}

}  // namespace detail

// Writes all four components; returns the payload digest.
inline std::string save_checkpoint(Model& m, const std::string& path) {
    struct Comp {
        const char* name;
        ParameterStore<float>* store;
    };
    Comp comps[] = {{"llm", &m.lm.store}, {"bridge", &m.bridge.store}, {"dit", &m.dit.store}};
    nlohmann::json index = nlohmann::json::array();
    int64_t offset = 0;
    Fnv1a payload_digest;
    for (auto& comp : comps)
        for (auto& e : comp.store->entries()) {
            index.push_back({{"component", comp.name},
                             {"name", e.name},
                             {"shape", e.tensor.shape},
                             {"offset", offset},
                             {"frozen", e.frozen}});
            offset += e.tensor.size();
            payload_digest.update(e.tensor.data.data(), e.tensor.data.size() * sizeof(float));
        }
    nlohmann::json manifest = {
        {"format_version", 1},
        {"dims",
         {{"llm", detail::mllm_cfg_json(m.dims.llm)},
          {"queries", m.dims.queries},
          {"connector", detail::conn_cfg_json(m.dims.connector)},
          {"dit", detail::dit_cfg_json(m.dims.dit)}}},
        {"index", index},
        {"total_floats", offset},
        {"payload_digest", payload_digest.hex()}};
    std::string ms = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint to " + path);
    f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    uint64_t len = ms.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(ms.data(), static_cast<std::streamsize>(ms.size()));
    for (auto& comp : comps)
        for (auto& e : comp.store->entries())
            f.write(reinterpret_cast<const char*>(e.tensor.data.data()),
                    static_cast<std::streamsize>(e.tensor.data.size() * sizeof(float)));
    if (!f) throw IoError("short write to " + path);
    return payload_digest.hex();
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint from " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (f.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IntegrityError("bad checkpoint magic in " + path);
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string ms(len, '\0');
    f.read(ms.data(), static_cast<std::streamsize>(len));
    if (f.gcount() != static_cast<std::streamsize>(len))
        throw IntegrityError("truncated checkpoint manifest in " + path);
    nlohmann::json manifest = nlohmann::json::parse(ms, nullptr, false);
    if (manifest.is_discarded()) throw IntegrityError("malformed checkpoint manifest in " + path);
    if (manifest.at("format_version").get<int>() != 1)
        throw IntegrityError("unsupported checkpoint format version");

    ModelDims dims;
    dims.llm = detail::mllm_cfg_from(manifest.at("dims").at("llm"));
    dims.queries = manifest.at("dims").at("queries");
    dims.connector = detail::conn_cfg_from(manifest.at("dims").at("connector"));
    dims.dit = detail::dit_cfg_from(manifest.at("dims").at("dit"));
    Model m = Model::init(dims, 0);

    Fnv1a payload_digest;
    for (const auto& entry : manifest.at("index")) {
        const std::string comp = entry.at("component");
        const std::string name = entry.at("name");
        ParameterStore<float>& store = comp == "llm"      ? m.lm.store
                                       : comp == "bridge" ? m.bridge.store
                                       : comp == "dit"    ? m.dit.store
                                                          : throw IntegrityError(
                                                                "unknown component " + comp);
        if (!store.has(name)) throw IntegrityError("unexpected parameter " + comp + "." + name);
        auto& e = store.entry(name);
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        if (shape != e.tensor.shape)
            throw IntegrityError("shape mismatch for " + comp + "." + name + ": manifest " +
                                 shape_str(shape) + " vs model " + shape_str(e.tensor.shape));
        f.read(reinterpret_cast<char*>(e.tensor.data.data()),
               static_cast<std::streamsize>(e.tensor.data.size() * sizeof(float)));
        if (f.gcount() != static_cast<std::streamsize>(e.tensor.data.size() * sizeof(float)))
            throw IntegrityError("truncated payload at parameter " + comp + "." + name);
        e.frozen = entry.at("frozen").get<bool>();
        payload_digest.update(e.tensor.data.data(), e.tensor.data.size() * sizeof(float));
    }
    if (payload_digest.hex() != manifest.at("payload_digest").get<std::string>())
        throw IntegrityError("payload digest mismatch in " + path);
    return m;
}

// ---------------------------------------------------------------------------
// stages & configuration

enum class Stage { lm_pretrain, stage1, stage2 };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::lm_pretrain: return "lm_pretrain";
        case Stage::stage1: return "stage1";
        default: return "stage2";
    }
}
inline Stage stage_from_name(const std::string& s) {
    if (s == "lm_pretrain") return Stage::lm_pretrain;
    if (s == "stage1") return Stage::stage1;
    if (s == "stage2") return Stage::stage2;
    throw ConfigError("unknown stage: " + s);
}

// stage1 trains queries + connector; stage2 additionally the DiT; the LLM
// never appears. The LM-pretraining loop has its own path.
inline std::set<std::string> trainable_mask(Stage stage) {
    switch (stage) {
        case Stage::stage1: return {"query_bank", "connector"};
        case Stage::stage2: return {"query_bank", "connector", "dit"};
        default:
            throw ContractViolation("trainable_mask: lm_pretrain has its own training loop");
    }
}

struct RunConfig {
    Stage stage = Stage::stage1;
    TrainHyperparams hyperparams;
    int batch_size = 64;
    double dropout_p = 0.10;
    std::string data_dir;
    Tier tier = Tier::standard;
    ModelDims dims;
    uint64_t seed = 0;
    std::string checkpoint_in;
    std::string checkpoint_out;
    int log_every = 100;
    int eval_every = 0;  // 0 = only on request via eval snapshot at end
    // Generative pretraining of the DiT during the backbone-pretrain stage.
    // The paper's diffusion backbone arrives pretrained; the desk-scale DiT
    // earns its prior here, conditioned through a throwaway frozen encoder
    // (dit_encoder_seed != 0) or the model's own initial bridge (== 0).
    int dit_steps = 4000;
    double dit_learning_rate = 3e-4;
    uint64_t dit_encoder_seed = 0;
    bool eval_at_end = false;
    int eval_per_category = 20;
    int eval_samples = 4;
    uint64_t eval_suite_seed = 1234;
    double cfg_scale = 4.0;
    int sample_steps = 50;
};

// Table-2-derived defaults at desk scale: 10:1 step ratio, 10x lr ratio,
// 2:1 batch ratio, warmup = 1% of steps, cosine schedule, betas (0.9, 0.95),
// weight decay 0.05, grad clip 1.0.
inline RunConfig make_default_config(Stage stage) {
    RunConfig c;
    c.stage = stage;
    TrainHyperparams& hp = c.hyperparams;
    hp.beta1 = 0.9;
    hp.beta2 = 0.95;
    hp.weight_decay = 0.05;
    hp.grad_clip = 1.0;
    switch (stage) {
        case Stage::lm_pretrain:
            hp.learning_rate = 3e-4;
            hp.total_steps = 1000;
            c.batch_size = 64;
            c.tier = Tier::standard;
            break;
        case Stage::stage1:
            hp.learning_rate = 1e-4;
            hp.total_steps = 5000;
            c.batch_size = 64;
            c.tier = Tier::standard;
            break;
        default:  // stage2
            hp.learning_rate = 1e-5;
            hp.total_steps = 500;
            c.batch_size = 32;
            c.tier = Tier::high;
            break;
    }
    hp.warmup_steps = std::max(1, hp.total_steps / 100);
    hp.batch_size = c.batch_size;
    return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    return {{"stage", stage_name(c.stage)},
            {"learning_rate", c.hyperparams.learning_rate},
            {"total_steps", c.hyperparams.total_steps},
            {"warmup_steps", c.hyperparams.warmup_steps},
            {"beta1", c.hyperparams.beta1},
            {"beta2", c.hyperparams.beta2},
            {"weight_decay", c.hyperparams.weight_decay},
            {"grad_clip", c.hyperparams.grad_clip},
            {"batch_size", c.batch_size},
            {"dropout_p", c.dropout_p},
            {"data_dir", c.data_dir},
            {"tier", tier_name(c.tier)},
            {"seed", c.seed},
            {"checkpoint_in", c.checkpoint_in},
            {"checkpoint_out", c.checkpoint_out},
            {"log_every", c.log_every},
            {"eval_every", c.eval_every},
            {"dit_steps", c.dit_steps},
            {"dit_learning_rate", c.dit_learning_rate},
            {"dit_encoder_seed", c.dit_encoder_seed},
            {"eval_at_end", c.eval_at_end},
            {"eval_per_category", c.eval_per_category},
            {"eval_samples", c.eval_samples},
            {"eval_suite_seed", c.eval_suite_seed},
            {"cfg_scale", c.cfg_scale},
            {"sample_steps", c.sample_steps},
            {"dims",
             {{"llm", detail::mllm_cfg_json(c.dims.llm)},
              {"queries", c.dims.queries},
              {"connector", detail::conn_cfg_json(c.dims.connector)},
              {"dit", detail::dit_cfg_json(c.dims.dit)}}}};
}

// Stage defaults overridden by whatever keys the JSON provides.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.contains("stage")) throw ConfigError("run config: missing 'stage'");
    RunConfig c = make_default_config(stage_from_name(j.at("stage")));
    TrainHyperparams& hp = c.hyperparams;
    auto opt = [&](const char* key, auto& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    opt("learning_rate", hp.learning_rate);
    if (j.contains("total_steps")) {
        hp.total_steps = j.at("total_steps");
        hp.warmup_steps = std::max(1, hp.total_steps / 100);
    }
    opt("warmup_steps", hp.warmup_steps);
    opt("beta1", hp.beta1);
    opt("beta2", hp.beta2);
    opt("weight_decay", hp.weight_decay);
    opt("grad_clip", hp.grad_clip);
    opt("batch_size", c.batch_size);
    hp.batch_size = c.batch_size;
    opt("dropout_p", c.dropout_p);
    opt("data_dir", c.data_dir);
    if (j.contains("tier")) c.tier = tier_from_name(j.at("tier"));
    opt("seed", c.seed);
    opt("checkpoint_in", c.checkpoint_in);
    opt("checkpoint_out", c.checkpoint_out);
    opt("log_every", c.log_every);
    opt("eval_every", c.eval_every);
    opt("dit_steps", c.dit_steps);
    opt("dit_learning_rate", c.dit_learning_rate);
    opt("dit_encoder_seed", c.dit_encoder_seed);
    opt("eval_at_end", c.eval_at_end);
    opt("eval_per_category", c.eval_per_category);
    opt("eval_samples", c.eval_samples);
    opt("eval_suite_seed", c.eval_suite_seed);
    opt("cfg_scale", c.cfg_scale);
    opt("sample_steps", c.sample_steps);
    if (j.contains("dims")) {
        const auto& d = j.at("dims");
        if (d.contains("llm")) c.dims.llm = detail::mllm_cfg_from(d.at("llm"));
        if (d.contains("queries")) c.dims.queries = d.at("queries");
        if (d.contains("connector")) c.dims.connector = detail::conn_cfg_from(d.at("connector"));
        if (d.contains("dit")) c.dims.dit = detail::dit_cfg_from(d.at("dit"));
    }
    return c;
}

struct StageReport {
    Stage stage;
    int steps = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double wall_seconds = 0.0;
    std::map<std::string, std::string> checksums_before;
    std::map<std::string, std::string> checksums_after;
    std::string checkpoint_digest;
    std::optional<EvalReport> eval;
    std::vector<double> loss_log;  // every log_every steps
};

inline nlohmann::json stage_report_to_json(const StageReport& r) {
    nlohmann::json j = {{"stage", stage_name(r.stage)},
                        {"steps", r.steps},
                        {"initial_loss", r.initial_loss},
                        {"final_loss", r.final_loss},
                        {"wall_seconds", r.wall_seconds},
                        {"checksums_before", r.checksums_before},
                        {"checksums_after", r.checksums_after},
                        {"checkpoint_digest", r.checkpoint_digest},
                        {"loss_log", r.loss_log}};
    if (r.eval) j["eval"] = report_to_json(*r.eval);
    return j;
}

// ---------------------------------------------------------------------------
// dataset access for training

struct TrainingData {
    std::vector<std::string> captions;
    std::vector<std::vector<uint8_t>> pixels;  // quantized, channel-major
    int image_size = 0;
    int channels = 3;

    Tensor<float> image(size_t i) const {
        Tensor<float> t({channels, image_size, image_size});
        const auto& p = pixels[i];
        for (int64_t j = 0; j < t.size(); ++j) t.at(j) = from_byte(p[static_cast<size_t>(j)]);
        return t;
    }
};

inline TrainingData load_training_data(const std::string& dir) {
    TrainingData d;
    for (const auto& r : load_dataset_records(dir)) {
        Tensor<float> img = read_ppm(r.image_path);
        if (d.image_size == 0) d.image_size = img.dim(1);
        else if (d.image_size != img.dim(1))
            throw IntegrityError("inconsistent image sizes in dataset " + dir);
        std::vector<uint8_t> p(static_cast<size_t>(img.size()));
        for (int64_t j = 0; j < img.size(); ++j) p[static_cast<size_t>(j)] = to_byte(img.at(j));
        d.captions.push_back(r.caption);
        d.pixels.push_back(std::move(p));
    }
    return d;
}

// ---------------------------------------------------------------------------
// training loops

using StepLogger = std::function<void(int step, double loss, double lr)>;

inline void check_run_inputs(const RunConfig& cfg, bool needs_checkpoint) {
    if (cfg.data_dir.empty() || !std::filesystem::exists(cfg.data_dir))
        throw ConfigError("dataset not found: '" + cfg.data_dir + "'");
    if (needs_checkpoint &&
        (cfg.checkpoint_in.empty() || !std::filesystem::exists(cfg.checkpoint_in)))
        throw ConfigError("input checkpoint not found: '" + cfg.checkpoint_in + "'");
}

// Next-token pretraining of the multimodal LM on (image, caption) pairs; the
// saved checkpoint carries a frozen LLM plus freshly initialized bridge/DiT.
inline StageReport run_lm_pretrain(const RunConfig& cfg, const StepLogger& log = nullptr) {
    if (cfg.stage != Stage::lm_pretrain) throw ContractViolation("config stage mismatch");
    check_run_inputs(cfg, false);
    auto t0 = std::chrono::steady_clock::now();
    TrainingData data = load_training_data(cfg.data_dir);
    Model m = Model::init(cfg.dims, cfg.seed);
    StageReport rep;
    rep.stage = cfg.stage;
    rep.checksums_before = m.component_checksums();

    OptimizerState<float> opt;
    opt.init(m.lm.store);
    Rng rng(cfg.seed ^ 0x5A17u);
    const int n = static_cast<int>(data.captions.size());
    for (int step = 0; step < cfg.hyperparams.total_steps; ++step) {
        std::vector<std::pair<Tensor<float>, std::string>> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            int i = rng.uniform_int(n);
            batch.emplace_back(data.image(static_cast<size_t>(i)),
                               data.captions[static_cast<size_t>(i)]);
        }
        double lr = cosine_warmup_lr(step, cfg.hyperparams);
        double loss = m.lm.train_lm_step(batch, opt, cfg.hyperparams, lr);
        if (step == 0) rep.initial_loss = loss;
        rep.final_loss = loss;
        if (cfg.log_every > 0 && step % cfg.log_every == 0) {
            rep.loss_log.push_back(loss);
            if (log) log(step, loss, lr);
        }
        ++rep.steps;
    }
    m.lm.store.set_all_frozen(true);  // downstream stages never touch the LLM

    // Phase 2: generative pretraining of the DiT (the published recipe's
    // diffusion backbone arrives pretrained; this is its desk-scale stand-in).
    // Conditioning comes from the frozen LM through a frozen encoder bridge --
    // deterministic per caption, so embeddings are cached as plain tensors.
    if (cfg.dit_steps > 0) {
        Bridge<float> enc =
            cfg.dit_encoder_seed
                ? Bridge<float>::init(m.dims.queries, m.dims.llm.d_model, m.dims.connector,
                                      cfg.dit_encoder_seed)
                : m.bridge;
        enc.store.set_all_frozen(true);
        std::map<std::string, Tensor<float>> cond_cache;
        auto cond_of = [&](const std::string& caption) -> const Tensor<float>& {
            auto it = cond_cache.find(caption);
            if (it == cond_cache.end()) {
                Tape<float> tape(/*inference=*/true);
                it = cond_cache
                         .emplace(caption, condition_from_prompt(tape, caption, m.lm, enc).value())
                         .first;
            }
            return it->second;
        };
        TrainHyperparams hp2 = cfg.hyperparams;
        hp2.learning_rate = cfg.dit_learning_rate;
        hp2.total_steps = cfg.dit_steps;
        hp2.warmup_steps = std::max(1, cfg.dit_steps / 100);
        OptimizerState<float> opt_dit;
        opt_dit.init(m.dit.store);
        Rng rng2(cfg.seed ^ 0xD17D17u);
        const DiTConfig& dc = m.dit.cfg;
        const int64_t npix = static_cast<int64_t>(dc.channels) * dc.image_size * dc.image_size;
        const int nq = m.dims.queries, dcond = m.dims.connector.d_cond;
        for (int step = 0; step < cfg.dit_steps; ++step) {
            const int B = cfg.batch_size;
            Tensor<float> x_t({B, dc.channels, dc.image_size, dc.image_size});
            Tensor<float> v_star(x_t.shape);
            Tensor<float> cond({B, nq, dcond});
            std::vector<double> ts;
            for (int i = 0; i < B; ++i) {
                int idx = rng2.uniform_int(n);
                Tensor<float> img = data.image(static_cast<size_t>(idx));
                bool drop = rng2.uniform() < cfg.dropout_p;
                double t = rng2.uniform();
                Tensor<float> eps = rng2.normal_tensor<float>(img.shape);
                for (int64_t j = 0; j < npix; ++j) {
                    x_t.at(i * npix + j) =
                        static_cast<float>((1.0 - t) * img.at(j) + t * eps.at(j));
                    v_star.at(i * npix + j) = eps.at(j) - img.at(j);
                }
                const Tensor<float>& c =
                    cond_of(drop ? "" : data.captions[static_cast<size_t>(idx)]);
                std::copy(c.data.begin(), c.data.end(),
                          cond.data.begin() + static_cast<int64_t>(i) * nq * dcond);
                ts.push_back(t);
            }
            Tape<float> tape;
            Var<float> v_hat =
                m.dit.velocity(tape, constant(tape, x_t), ts, constant(tape, cond));
            Var<float> loss = mse_loss(v_hat, v_star);
            auto grads = tape.compute_gradients(loss);
            clip_global_norm(grads, hp2.grad_clip);
            adamw_step(m.dit.store, grads, opt_dit, hp2, cosine_warmup_lr(step, hp2));
            rep.final_loss = static_cast<double>(loss.value().at(0));
            if (cfg.log_every > 0 && step % cfg.log_every == 0) {
                rep.loss_log.push_back(rep.final_loss);
                if (log) log(cfg.hyperparams.total_steps + step, rep.final_loss,
                             cosine_warmup_lr(step, hp2));
            }
            ++rep.steps;
        }
    }
    rep.checksums_after = m.component_checksums();
    if (!cfg.checkpoint_out.empty()) rep.checkpoint_digest = save_checkpoint(m, cfg.checkpoint_out);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

inline EvalReport run_eval(Model& m, uint64_t suite_seed, int per_category, int samples,
                           double cfg_scale, int sample_steps,
                           const std::function<void(size_t, size_t)>& progress = nullptr) {
    auto suite = geneval_suite(suite_seed, per_category);
    auto sampler = [&](const std::string& prompt, uint64_t seed) {
        GuidanceConfig g;
        g.scale = cfg_scale;
        g.steps = sample_steps;
        g.seed = seed;
        return euler_sampler(prompt, g, m.lm, m.bridge, m.dit);
    };
    return evaluate(sampler, suite, samples, 9973, progress);
}

// Shared bridge/DiT flow-matching loop for stages 1 and 2.
inline StageReport run_bridge_stage(const RunConfig& cfg, const StepLogger& log = nullptr) {
    if (cfg.stage != Stage::stage1 && cfg.stage != Stage::stage2)
        throw ContractViolation("run_bridge_stage: expected stage1 or stage2 config");
    check_run_inputs(cfg, true);
    auto t0 = std::chrono::steady_clock::now();
    TrainingData data = load_training_data(cfg.data_dir);
    Model m = load_checkpoint(cfg.checkpoint_in);

    std::set<std::string> mask = trainable_mask(cfg.stage);
    m.lm.store.set_all_frozen(true);
    for (auto& e : m.bridge.store.entries())
        e.frozen = !mask.count(e.name == "query_bank" ? "query_bank" : "connector");
    m.dit.store.set_all_frozen(!mask.count("dit"));

    StageReport rep;
    rep.stage = cfg.stage;
    rep.checksums_before = m.component_checksums();

    // stage 2 resets optimizer state and re-warms its own schedule
    OptimizerState<float> opt_bridge, opt_dit;
    opt_bridge.init(m.bridge.store);
    opt_dit.init(m.dit.store);
    Rng rng(cfg.seed ^ (cfg.stage == Stage::stage1 ? 0x51A6E1u : 0x51A6E2u));
    PromptKvCache kv_cache;
    const int n = static_cast<int>(data.captions.size());
    for (int step = 0; step < cfg.hyperparams.total_steps; ++step) {
        std::vector<std::pair<Tensor<float>, std::string>> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            int i = rng.uniform_int(n);
            batch.emplace_back(data.image(static_cast<size_t>(i)),
                               data.captions[static_cast<size_t>(i)]);
        }
        double lr = cosine_warmup_lr(step, cfg.hyperparams);
        double loss = fm_training_step(batch, cfg.dropout_p, m.lm, m.bridge, m.dit, opt_bridge,
                                       opt_dit, cfg.hyperparams, lr, rng, &kv_cache);
        if (step == 0) rep.initial_loss = loss;
        rep.final_loss = loss;
        if (cfg.log_every > 0 && step % cfg.log_every == 0) {
            rep.loss_log.push_back(loss);
            if (log) log(step, loss, lr);
        }
        ++rep.steps;
    }
    rep.checksums_after = m.component_checksums();
    // freeze ledger: components outside the mask must be bit-identical
    for (const char* comp : {"llm", "query_bank", "connector", "dit"}) {
        if (mask.count(comp)) continue;
        if (rep.checksums_before.at(comp) != rep.checksums_after.at(comp))
            throw IntegrityError(std::string("frozen component changed during ") +
                                 stage_name(cfg.stage) + ": " + comp);
    }
    if (!cfg.checkpoint_out.empty()) rep.checkpoint_digest = save_checkpoint(m, cfg.checkpoint_out);
    if (cfg.eval_at_end)
        rep.eval = run_eval(m, cfg.eval_suite_seed, cfg.eval_per_category, cfg.eval_samples,
                            cfg.cfg_scale, cfg.sample_steps);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

inline StageReport run_stage1(const RunConfig& cfg, const StepLogger& log = nullptr) {
    if (cfg.stage != Stage::stage1) throw ContractViolation("config stage mismatch");
    return run_bridge_stage(cfg, log);
}
inline StageReport run_stage2(const RunConfig& cfg, const StepLogger& log = nullptr) {
    if (cfg.stage != Stage::stage2) throw ContractViolation("config stage mismatch");
    return run_bridge_stage(cfg, log);
}

}  // namespace flowbridge
