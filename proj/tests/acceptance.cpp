// Acceptance gate, fast half: property-based criteria 1-7 and 10. Prints one
// pass/fail line per criterion and exits nonzero if any fail. The end-to-end
// training criteria 8-9 live in acceptance_e2e.cpp.
#include <chrono>
#include <cstdio>
#include <filesystem>

#include "flowbridge/fdcheck.hpp"
#include "flowbridge/pipeline.hpp"

using namespace flowbridge;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void criterion(int n, const std::string& desc, const std::function<bool()>& fn) {
    auto t0 = std::chrono::steady_clock::now();
    bool ok = false;
    std::string err;
    try {
        ok = fn();
    } catch (const std::exception& e) {
        err = std::string(" (") + e.what() + ")";
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d: %s - %s [%.1fs]%s\n", n, ok ? "PASS" : "FAIL", desc.c_str(), secs,
                err.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

void perturb(ParameterStore<double>& store, uint64_t seed) {
    Rng noise(seed);
    for (auto& e : store.entries())
        for (auto& v : e.tensor.data) v += noise.normal() * 0.3;
}

// --- criterion 1: finite-difference gradient suite (64-bit) -----------------

double fd_linear() {
    Rng rng(1);
    ParameterStore<double> store;
    init_linear(store, "lin", 6, 5, rng);
    Tensor<double> xin = rng.normal_tensor<double>({4, 6});
    auto build = [&](Tape<double>& tape) {
        Params<double> p{&tape, &store, ""};
        return scale(sum_all(gelu(linear_p(p, "lin", constant(tape, xin)))), 3e-4);
    };
    return finite_diff_check(build, store, 1e-5);
}

double fd_layer_norm() {
    Rng rng(2);
    ParameterStore<double> store;
    init_layer_norm(store, "ln", 7);
    perturb(store, 90);
    Tensor<double> xin = rng.normal_tensor<double>({3, 7});
    Tensor<double> tgt = rng.normal_tensor<double>({3, 7});
    auto build = [&](Tape<double>& tape) {
        Params<double> p{&tape, &store, ""};
        return scale(mse_loss(layer_norm_p(p, "ln", constant(tape, xin)), tgt), 3e-4);
    };
    return finite_diff_check(build, store, 1e-5);
}

double fd_attention() {
    Rng rng(3);
    ParameterStore<double> store;
    const int d = 8;
    for (const char* n : {"at.q", "at.k", "at.v", "at.o"}) init_linear(store, n, d, d, rng);
    perturb(store, 91);
    Tensor<double> xin = rng.normal_tensor<double>({1, 3, d});
    auto build = [&](Tape<double>& tape) {
        Params<double> p{&tape, &store, ""};
        auto x = constant(tape, xin);
        return scale(sum_all(attention(x, x, 2, true, p, "at")), 3e-4);
    };
    return finite_diff_check(build, store, 1e-5);
}

double fd_transformer_block() {
    Rng rng(4);
    ParameterStore<double> store;
    init_transformer_block(store, "blk", 8, 8, 1, rng);
    perturb(store, 92);
    Tensor<double> xin = rng.normal_tensor<double>({1, 3, 8});
    auto build = [&](Tape<double>& tape) {
        Params<double> p{&tape, &store, ""};
        auto x = constant(tape, xin);
        auto y = transformer_block(x, static_cast<Var<double>*>(nullptr), true, 2, p, "blk");
        return scale(sum_all(y), 3e-4);
    };
    return finite_diff_check(build, store, 1e-5);
}

double fd_connector() {
    ConnectorConfig c;
    c.layers = 6;
    c.d_model = 8;
    c.heads = 2;
    c.d_cond = 8;
    auto b = Bridge<double>::init(4, 8, c, 21);
    perturb(b.store, 93);
    Rng rng(5);
    Tensor<double> in = rng.normal_tensor<double>({4, 8});
    Tensor<double> tgt = rng.normal_tensor<double>({4, 8});
    auto build = [&](Tape<double>& tape) {
        return scale(mse_loss(b.connector_forward(tape, constant(tape, in)), tgt), 3e-4);
    };
    return finite_diff_check(build, b.store, 1e-5);
}

double fd_dit_velocity() {
    DiTConfig c;
    c.image_size = 8;
    c.channels = 3;
    c.patch_size = 4;
    c.d_model = 16;
    c.layers = 2;
    c.heads = 2;
    c.d_cond = 16;
    auto dit = Dit<double>::init(c, 9);
    perturb(dit.store, 94);
    Rng rng(6);
    dit.store.add("test.cond", rng.normal_tensor<double>({2, 16}));
    Tensor<double> x = rng.normal_tensor<double>({3, 8, 8});
    Tensor<double> tgt = rng.normal_tensor<double>({3, 8, 8});
    auto build = [&](Tape<double>& tape) {
        Params<double> p{&tape, &dit.store, ""};
        Var<double> v = dit.velocity(tape, constant(tape, x), {0.37}, p("test.cond"));
        return scale(mse_loss(v, tgt), 3e-4);
    };
    return finite_diff_check(build, dit.store, 1e-5);
}

// --- criteria 2/3 shared smoke run ------------------------------------------

struct SmokeArtifacts {
    fs::path dir;
    StageReport lm, s1, s2;
    std::vector<std::string> captions_pre, captions_post1, captions_post2;
};

std::vector<std::string> caption_probe(const std::string& ckpt, const TrainingData& data) {
    Model m = load_checkpoint(ckpt);
    std::vector<std::string> out;
    for (size_t i = 0; i < 64 && i < data.captions.size(); ++i)
        out.push_back(m.lm.greedy_caption(data.image(i), 24));
    return out;
}

SmokeArtifacts& smoke() {
    static SmokeArtifacts a = [] {
        SmokeArtifacts s;
        s.dir = fs::temp_directory_path() / "fb_acceptance_smoke";
        fs::remove_all(s.dir);
        generate_dataset((s.dir / "data").string(), 512, 41, Tier::standard, 32);
        TrainingData data = load_training_data((s.dir / "data").string());

        RunConfig lm = make_default_config(Stage::lm_pretrain);
        lm.data_dir = (s.dir / "data").string();
        lm.hyperparams.total_steps = 20;
        lm.hyperparams.warmup_steps = 2;
        lm.seed = 50;
        lm.checkpoint_out = (s.dir / "lm.ckpt").string();
        s.lm = run_lm_pretrain(lm);
        s.captions_pre = caption_probe(lm.checkpoint_out, data);

        RunConfig s1 = make_default_config(Stage::stage1);
        s1.data_dir = lm.data_dir;
        s1.hyperparams.total_steps = 50;
        s1.hyperparams.warmup_steps = 5;
        s1.seed = 51;
        s1.checkpoint_in = lm.checkpoint_out;
        s1.checkpoint_out = (s.dir / "s1.ckpt").string();
        s.s1 = run_stage1(s1);
        s.captions_post1 = caption_probe(s1.checkpoint_out, data);

        RunConfig s2 = make_default_config(Stage::stage2);
        s2.data_dir = lm.data_dir;
        s2.hyperparams.total_steps = 50;
        s2.hyperparams.warmup_steps = 5;
        s2.seed = 52;
        s2.checkpoint_in = s1.checkpoint_out;
        s2.checkpoint_out = (s.dir / "s2.ckpt").string();
        s.s2 = run_stage2(s2);
        s.captions_post2 = caption_probe(s2.checkpoint_out, data);
        return s;
    }();
    return a;
}

// --- criterion 4: CFG identities --------------------------------------------

bool cfg_identity() {
    Model m = load_checkpoint((smoke().dir / "s2.ckpt").string());
    for (const std::string prompt : {"a photo of a red circle", "a photo of two squares"}) {
        GuidanceConfig g;
        g.steps = 8;
        g.seed = 77;

        auto branch = [&](const std::string& cap) {
            Tape<float> tape(/*inference=*/true);
            Tensor<float> cond = condition_from_prompt(tape, cap, m.lm, m.bridge).value();
            std::function<Tensor<float>(const Tensor<float>&, double)> vel =
                [&](const Tensor<float>& x, double t) {
                    Tape<float> t2(/*inference=*/true);
                    return m.dit.velocity(t2, constant(t2, x), {t}, constant(t2, cond)).value();
                };
            Rng rng(g.seed);
            Tensor<float> x = rng.normal_tensor<float>({3, 32, 32});
            return euler_integrate(vel, std::move(x), g.steps);
        };

        g.scale = 1.0;
        if (euler_sampler(prompt, g, m.lm, m.bridge, m.dit).data != branch(prompt).data)
            return false;
        g.scale = 0.0;
        if (euler_sampler(prompt, g, m.lm, m.bridge, m.dit).data != branch("").data)
            return false;
    }
    return true;
}

// --- criterion 5: caption-dropout rate --------------------------------------

bool dropout_rate() {
    MllmConfig mc;
    mc.d_model = 16;
    mc.layers = 1;
    mc.heads = 2;
    mc.max_seq_len = 48;
    mc.patch_size = 8;
    mc.image_size = 16;
    auto lm = Mllm<float>::init(mc, Vocabulary::shapes_world(), 60);
    lm.store.set_all_frozen(true);
    ConnectorConfig cc;
    cc.layers = 1;
    cc.d_model = 16;
    cc.heads = 2;
    cc.d_cond = 16;
    auto bridge = Bridge<float>::init(2, 16, cc, 61);
    DiTConfig dc;
    dc.image_size = 16;
    dc.patch_size = 4;
    dc.d_model = 16;
    dc.layers = 1;
    dc.heads = 2;
    dc.d_cond = 16;
    auto dit = Dit<float>::init(dc, 62);
    OptimizerState<float> ob, od;
    ob.init(bridge.store);
    od.init(dit.store);
    TrainHyperparams hp;
    hp.total_steps = 200;
    hp.warmup_steps = 1;
    Rng scene_rng(63), rng(64);
    PromptKvCache cache;
    int total = 0, dropped_total = 0;
    std::vector<std::pair<Tensor<float>, std::string>> batch;
    for (int i = 0; i < 100; ++i) batch.emplace_back(
        render_scene(sample_scene(scene_rng, 2), 16), caption_of(sample_scene(scene_rng, 2)));
    for (int step = 0; step < 100; ++step) {
        int dropped = 0;
        fm_training_step(batch, 0.10, lm, bridge, dit, ob, od, hp, 1e-4, rng, &cache, &dropped);
        total += static_cast<int>(batch.size());
        dropped_total += dropped;
    }
    double rate = static_cast<double>(dropped_total) / total;
    std::printf("    dropout: %d/%d = %.4f\n", dropped_total, total, rate);
    return total == 10000 && rate >= 0.09 && rate <= 0.11;
}

// --- criterion 6: flow and sampler oracles ----------------------------------

bool flow_oracles() {
    // one-step recovery: velocity oracle eps - x0 on an exact binary grid
    Rng rng(14);
    Tensor<float> x0({3, 4, 4}), eps(x0.shape);
    for (int64_t i = 0; i < x0.size(); ++i) {
        x0.at(i) = static_cast<float>(rng.uniform_int(2049) - 1024) / 1024.0f;
        eps.at(i) = static_cast<float>(rng.uniform_int(2049) - 1024) / 1024.0f;
    }
    std::function<Tensor<float>(const Tensor<float>&, double)> oracle =
        [&](const Tensor<float>&, double) {
            Tensor<float> v(x0.shape);
            for (int64_t i = 0; i < v.size(); ++i) v.at(i) = eps.at(i) - x0.at(i);
            return v;
        };
    if (euler_integrate(oracle, eps, 1).data != x0.data) return false;

    // 1-D Gaussian analytic flow: N(0,1) noise must transport to N(mu, sigma^2)
    const double mu = 0.3, sigma = 0.15;
    std::function<Tensor<double>(const Tensor<double>&, double)> v =
        [&](const Tensor<double>& x, double t) {
            double m_t = (1.0 - t) * mu;
            double var_t = (1.0 - t) * (1.0 - t) * sigma * sigma + t * t;
            Tensor<double> out({1});
            out.at(0) = (t - (1.0 - t) * sigma * sigma) * (x.at(0) - m_t) / var_t - mu;
            return out;
        };
    Rng grng(15);
    const int n = 100000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        Tensor<double> x({1});
        x.at(0) = grng.normal();
        double y = euler_integrate(v, std::move(x), 100).at(0);
        sum += y;
        sumsq += y * y;
    }
    double mean = sum / n;
    double sd = std::sqrt(sumsq / n - mean * mean);
    std::printf("    gaussian flow: mean %.4f (target %.2f), sd %.4f (target %.2f)\n", mean, mu,
                sd, sigma);
    return std::abs(mean - mu) < 0.05 * mu && std::abs(sd - sigma) < 0.05 * sigma;
}

// --- criterion 7: renderer-detector oracle ----------------------------------

bool detections_match(const std::vector<Detection>& det, const SceneSpec& sc) {
    if (det.size() != sc.objects.size()) return false;
    for (const auto& o : sc.objects) {
        bool found = false;
        for (const auto& d : det)
            if (matches_object(d, o)) found = true;
        if (!found) return false;
    }
    return true;
}

bool detector_roundtrip() {
    for (Tier tier : {Tier::standard, Tier::high}) {
        // all one-object scenes
        for (int s = 0; s < 3; ++s)
            for (int c = 0; c < 4; ++c)
                for (int cell = 0; cell < 4; ++cell) {
                    SceneSpec sc;
                    sc.tier = tier;
                    sc.objects.push_back({static_cast<Shape>(s), static_cast<Color>(c), cell / 2,
                                          cell % 2});
                    if (!detections_match(detect_objects(render_scene(sc, 32)), sc)) return false;
                }
        // all two-object scenes over distinct cell pairs
        for (int s1 = 0; s1 < 3; ++s1)
            for (int c1 = 0; c1 < 4; ++c1)
                for (int s2 = 0; s2 < 3; ++s2)
                    for (int c2 = 0; c2 < 4; ++c2)
                        for (int cell1 = 0; cell1 < 4; ++cell1)
                            for (int cell2 = cell1 + 1; cell2 < 4; ++cell2) {
                                SceneSpec sc;
                                sc.tier = tier;
                                sc.objects.push_back({static_cast<Shape>(s1),
                                                      static_cast<Color>(c1), cell1 / 2,
                                                      cell1 % 2});
                                sc.objects.push_back({static_cast<Shape>(s2),
                                                      static_cast<Color>(c2), cell2 / 2,
                                                      cell2 % 2});
                                if (!detections_match(detect_objects(render_scene(sc, 32)), sc))
                                    return false;
                            }
        // 1000 random 3-object scenes, plus sigma=0.05 noise robustness
        Rng rng(11);
        for (int i = 0; i < 1000; ++i) {
            SceneSpec sc = sample_scene(rng, 3);
            sc.tier = tier;
            Tensor<float> img = render_scene(sc, 32);
            if (!detections_match(detect_objects(img), sc)) return false;
            for (auto& v : img.data) v += 0.05f * static_cast<float>(rng.normal());
            if (!detections_match(detect_objects(img), sc)) return false;
        }
    }
    return true;
}

// --- criterion 10: default config introspection -----------------------------

bool table2_conformance() {
    RunConfig c1 = make_default_config(Stage::stage1);
    RunConfig c2 = make_default_config(Stage::stage2);
    return c1.hyperparams.learning_rate == 1e-4 && c2.hyperparams.learning_rate == 1e-5 &&
           c1.hyperparams.beta1 == 0.9 && c1.hyperparams.beta2 == 0.95 &&
           c2.hyperparams.beta1 == 0.9 && c2.hyperparams.beta2 == 0.95 &&
           c1.hyperparams.weight_decay == 0.05 && c2.hyperparams.weight_decay == 0.05 &&
           c1.hyperparams.grad_clip == 1.0 && c2.hyperparams.grad_clip == 1.0 &&
           c1.hyperparams.schedule == LrSchedule::cosine &&
           c2.hyperparams.schedule == LrSchedule::cosine &&
           c1.hyperparams.warmup_steps * 100 == c1.hyperparams.total_steps &&
           c2.hyperparams.warmup_steps * 100 == c2.hyperparams.total_steps;
}

}  // namespace

int main() {
    criterion(1, "finite-difference gradient suite (64-bit, max rel err < 1e-5)", [] {
        struct Check {
            const char* name;
            double (*fn)();
        };
        Check checks[] = {{"linear", fd_linear},
                          {"layer_norm", fd_layer_norm},
                          {"attention", fd_attention},
                          {"transformer_block", fd_transformer_block},
                          {"connector_forward", fd_connector},
                          {"dit_velocity", fd_dit_velocity}};
        auto t0 = std::chrono::steady_clock::now();
        bool ok = true;
        for (const auto& c : checks) {
            double err = c.fn();
            std::printf("    %-18s max rel err %.3e\n", c.name, err);
            ok = ok && err < 1e-5;
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return ok && secs < 120.0;
    });

    criterion(2, "freeze invariants over 50-step stage-1/stage-2 smoke runs", [] {
        const auto& a = smoke();
        bool s1_ok = a.s1.checksums_before.at("llm") == a.s1.checksums_after.at("llm") &&
                     a.s1.checksums_before.at("dit") == a.s1.checksums_after.at("dit") &&
                     a.s1.checksums_before.at("query_bank") !=
                         a.s1.checksums_after.at("query_bank") &&
                     a.s1.checksums_before.at("connector") != a.s1.checksums_after.at("connector");
        bool s2_ok = a.s2.checksums_before.at("llm") == a.s2.checksums_after.at("llm") &&
                     a.s2.checksums_before.at("dit") != a.s2.checksums_after.at("dit");
        bool chain_ok = a.lm.checksums_after.at("llm") == a.s2.checksums_after.at("llm");
        return s1_ok && s2_ok && chain_ok && a.s1.wall_seconds + a.s2.wall_seconds < 300.0;
    });

    criterion(3, "greedy captions bit-identical across stage boundaries (64-image probe)", [] {
        const auto& a = smoke();
        return a.captions_pre.size() == 64 && a.captions_pre == a.captions_post1 &&
               a.captions_pre == a.captions_post2;
    });

    criterion(4, "CFG scale 1.0 == conditional path, 0.0 == unconditional path (bit-exact)",
              cfg_identity);
    criterion(5, "caption-dropout rate over 10,000 samples at p=0.10 within [0.09, 0.11]",
              dropout_rate);
    criterion(6, "flow oracles: one-step recovery exact; 1-D Gaussian within 5%", flow_oracles);
    criterion(7, "renderer-detector roundtrip 100% (exhaustive 1-2 obj + 1000 random 3-obj)",
              detector_roundtrip);
    criterion(10, "default stage configs expose the published hyperparameters",
              table2_conformance);

    if (g_failures) std::printf("%d criteria FAILED\n", g_failures);
    else std::printf("all fast criteria passed\n");
    return g_failures ? 1 : 0;
}
