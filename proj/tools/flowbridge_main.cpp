// Command-line front end: dataset generation, the three training stages,
// sampling, evaluation, and captioning. Every run writes a manifest with the
// resolved configuration and output digests next to its primary output.
#include <CLI11.hpp>

#include <iostream>

#include "flowbridge/pipeline.hpp"

using namespace flowbridge;
namespace fs = std::filesystem;

namespace {

nlohmann::json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError("malformed JSON in " + path);
    return j;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << j.dump(2) << "\n";
}

// Manifest lives next to the named output (or in cwd when there is none).
void write_run_manifest(const std::string& anchor, const std::string& command,
                        const nlohmann::json& resolved, const nlohmann::json& outputs) {
    fs::path p = anchor.empty() ? fs::path("run_manifest.json")
                                : fs::path(anchor).parent_path() / "run_manifest.json";
    if (p.parent_path().empty()) p = fs::path(".") / p;
    write_json_file(p.string(), {{"command", command}, {"config", resolved}, {"outputs", outputs}});
}

void log_step(int step, double loss, double lr) {
    std::cout << "step " << step << " loss " << loss << " lr " << lr << "\n" << std::flush;
}

int run_train(const std::string& command, const std::string& config_path, Stage expect) {
    RunConfig cfg = run_config_from_json(load_json_file(config_path));
    if (cfg.stage != expect)
        throw ConfigError("config stage '" + std::string(stage_name(cfg.stage)) +
                          "' does not match command " + command);
    StageReport rep = expect == Stage::lm_pretrain ? run_lm_pretrain(cfg, log_step)
                      : expect == Stage::stage1    ? run_stage1(cfg, log_step)
                                                   : run_stage2(cfg, log_step);
    nlohmann::json rj = stage_report_to_json(rep);
    std::cout << "final loss " << rep.final_loss << " wall " << rep.wall_seconds << "s\n";
    if (!cfg.checkpoint_out.empty()) {
        write_json_file(cfg.checkpoint_out + ".report.json", rj);
        std::cout << "checkpoint " << cfg.checkpoint_out << " digest " << rep.checkpoint_digest
                  << "\n";
    }
    write_run_manifest(cfg.checkpoint_out, command, run_config_to_json(cfg), rj);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bridged text-to-image model over the ShapesWorld corpus"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "render a (caption, image) dataset");
    int gd_n = 1000;
    uint64_t gd_seed = 0;
    std::string gd_tier = "standard", gd_out;
    int gd_size = 32;
    gen->add_option("--n", gd_n, "number of pairs")->required();
    gen->add_option("--seed", gd_seed, "dataset seed")->required();
    gen->add_option("--tier", gd_tier, "standard|high");
    gen->add_option("--out", gd_out, "output directory")->required();
    gen->add_option("--image-size", gd_size, "square image size");

    // train-*
    std::string cfg_lm, cfg_s1, cfg_s2;
    auto* tlm = app.add_subcommand("train-lm", "pretrain the multimodal LM");
    tlm->add_option("--config", cfg_lm, "JSON run config")->required();
    auto* ts1 = app.add_subcommand("train-stage1", "train query bank + connector");
    ts1->add_option("--config", cfg_s1, "JSON run config")->required();
    auto* ts2 = app.add_subcommand("train-stage2", "joint bridge + DiT finetune");
    ts2->add_option("--config", cfg_s2, "JSON run config")->required();

    // sample
    auto* smp = app.add_subcommand("sample", "generate one image from a prompt");
    std::string sm_ckpt, sm_prompt, sm_out;
    double sm_scale = 4.0;
    int sm_steps = 50;
    uint64_t sm_seed = 0;
    smp->add_option("--checkpoint", sm_ckpt)->required();
    smp->add_option("--prompt", sm_prompt)->required();
    smp->add_option("--cfg-scale", sm_scale, "guidance scale");
    smp->add_option("--steps", sm_steps, "Euler steps");
    smp->add_option("--seed", sm_seed, "noise seed");
    smp->add_option("--out", sm_out, "output PPM path")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "run the GenEval-mini suite");
    std::string ev_ckpt, ev_out;
    uint64_t ev_seed = 1234;
    int ev_per = 20, ev_samples = 4, ev_steps = 50;
    double ev_scale = 4.0;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--suite-seed", ev_seed);
    ev->add_option("--per-category", ev_per);
    ev->add_option("--samples", ev_samples, "samples per prompt (best-of-k)");
    ev->add_option("--cfg-scale", ev_scale);
    ev->add_option("--steps", ev_steps);
    ev->add_option("--out", ev_out, "report JSON path")->required();

    // caption
    auto* cap = app.add_subcommand("caption", "greedy-decode a caption for an image");
    std::string cp_ckpt, cp_image;
    cap->add_option("--checkpoint", cp_ckpt)->required();
    cap->add_option("--image", cp_image, "PPM image path")->required();

    try {
        app.parse(argc, argv);

        if (*gen) {
            std::string digest = generate_dataset(gd_out, gd_n, gd_seed, tier_from_name(gd_tier),
                                                  gd_size);
            std::cout << "dataset " << gd_out << " digest " << digest << "\n";
            write_run_manifest(gd_out + "/manifest.json", "gen-data",
                               {{"n", gd_n},
                                {"seed", gd_seed},
                                {"tier", gd_tier},
                                {"out", gd_out},
                                {"image_size", gd_size}},
                               {{"digest", digest}});
        } else if (*tlm) {
            return run_train("train-lm", cfg_lm, Stage::lm_pretrain);
        } else if (*ts1) {
            return run_train("train-stage1", cfg_s1, Stage::stage1);
        } else if (*ts2) {
            return run_train("train-stage2", cfg_s2, Stage::stage2);
        } else if (*smp) {
            Model m = load_checkpoint(sm_ckpt);
            GuidanceConfig g;
            g.scale = sm_scale;
            g.steps = sm_steps;
            g.seed = sm_seed;
            Tensor<float> img = euler_sampler(sm_prompt, g, m.lm, m.bridge, m.dit);
            write_ppm(sm_out, img);
            std::cout << "wrote " << sm_out << "\n";
            write_run_manifest(sm_out, "sample",
                               {{"checkpoint", sm_ckpt},
                                {"prompt", sm_prompt},
                                {"cfg_scale", sm_scale},
                                {"steps", sm_steps},
                                {"seed", sm_seed}},
                               {{"image", sm_out}});
        } else if (*ev) {
            Model m = load_checkpoint(ev_ckpt);
            auto progress = [](size_t done, size_t total) {
                if (done % 10 == 0 || done == total)
                    std::cout << "eval " << done << "/" << total << "\n" << std::flush;
            };
            EvalReport rep = run_eval(m, ev_seed, ev_per, ev_samples, ev_scale, ev_steps, progress);
            nlohmann::json rj = report_to_json(rep);
            write_json_file(ev_out, rj);
            std::cout << "overall " << rep.overall << "\n";
            write_run_manifest(ev_out, "eval",
                               {{"checkpoint", ev_ckpt},
                                {"suite_seed", ev_seed},
                                {"per_category", ev_per},
                                {"samples", ev_samples},
                                {"cfg_scale", ev_scale},
                                {"steps", ev_steps}},
                               rj);
        } else if (*cap) {
            Model m = load_checkpoint(cp_ckpt);
            Tensor<float> img = read_ppm(cp_image);
            std::cout << m.lm.greedy_caption(img, 24) << "\n";
        }
        return 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "error:cli_error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error:" << e.error_class() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error:internal_error: " << e.what() << "\n";
        return 1;
    }
}
