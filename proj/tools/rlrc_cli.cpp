#include "rlrc/bench.hpp"
#include "rlrc/checkpoint.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace rlrc;
using nlohmann::json;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string output_dir;
};

void add_common(CLI::App * cmd, Common & c) {
    cmd->add_option("--config", c.config_path, "Pipeline config (JSON)");
    cmd->add_option("--seed", c.seed, "Override the config seed");
    cmd->add_option("--output-dir", c.output_dir, "Override the config output directory");
}

PipelineConfig resolve(const Common & c) {
    PipelineConfig cfg = c.config_path.empty() ? PipelineConfig{} : load_pipeline_config(c.config_path);
    if (c.seed) {
        cfg.seed = *c.seed;
    }
    if (!c.output_dir.empty()) {
        cfg.output_dir = c.output_dir;
    }
    cfg.resolve();
    return cfg;
}

std::string require_artifact(const RunDir & dir, const std::string & explicit_path, const std::string & key,
                             const std::string & flag) {
    if (!explicit_path.empty()) {
        return explicit_path;
    }
    if (auto p = dir.lookup(key)) {
        return *p;
    }
    throw Error("no " + key + " artifact in " + dir.path() + "/manifest.json; pass " + flag);
}

std::vector<std::string> split_csv(const std::string & s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

void print_report(const BenchReport & r) {
    std::cout << report_to_csv(r);
}

}  // namespace

int main(int argc, char ** argv) {
    CLI::App app{"Prune, recover and quantize a toy transformer policy"};
    app.require_subcommand(1);

    Common common;
    std::string demos_path, checkpoint, quant_modes = "none,4", ratios = "0,0.5,0.9";
    std::optional<double> ratio;
    std::optional<int> bits;
    bool expert = false;
    std::vector<std::string> bench_inputs;

    auto * gen = app.add_subcommand("gen-demos", "Generate expert demonstrations for the IND tasks");
    auto * dense = app.add_subcommand("train-dense", "Train the dense policy on demonstrations");
    dense->add_option("--demos", demos_path, "Demo file (defaults to the run directory's)");
    auto * prune = app.add_subcommand("prune", "Structured Taylor pruning of a dense checkpoint");
    prune->add_option("--checkpoint", checkpoint, "Dense checkpoint");
    prune->add_option("--demos", demos_path, "Calibration demos");
    prune->add_option("--ratio", ratio, "Override prune.ratio");
    auto * sft = app.add_subcommand("sft", "Supervised recovery of a pruned checkpoint");
    sft->add_option("--checkpoint", checkpoint, "Pruned (or dense) checkpoint");
    sft->add_option("--demos", demos_path, "Demo file");
    auto * rl = app.add_subcommand("rl", "PPO fine-tuning on the IND tasks");
    rl->add_option("--checkpoint", checkpoint, "SFT (or pruned) checkpoint");
    auto * quant = app.add_subcommand("quantize", "Blockwise weight quantization");
    quant->add_option("--checkpoint", checkpoint, "Checkpoint to quantize");
    quant->add_option("--bits", bits, "4 or 8")->check(CLI::IsMember({4, 8}));
    auto * eval = app.add_subcommand("eval", "Greedy IND/OOD success rates");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate");
    eval->add_flag("--expert", expert, "Evaluate the scripted expert instead");
    auto * bench = app.add_subcommand("bench", "Memory, latency, throughput and success table");
    bench->add_option("--checkpoint", bench_inputs, "name=path pairs (defaults to every checkpoint in the manifest)");
    auto * pipeline = app.add_subcommand("pipeline", "Full run: demos, dense, prune, sft, rl, quantize, bench");
    auto * sweep = app.add_subcommand("sweep", "Sparsity x quantization report");
    sweep->add_option("--ratios", ratios, "Comma-separated prune ratios");
    sweep->add_option("--quant", quant_modes, "Comma-separated quant modes among none,4,8");

    for (auto * cmd : {gen, dense, prune, sft, rl, quant, eval, bench, pipeline, sweep}) {
        add_common(cmd, common);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        PipelineConfig cfg = resolve(common);
        if (ratio) {
            cfg.prune.ratio = *ratio;
        }
        if (bits) {
            cfg.quant.bits = *bits;
        }
        cfg.resolve();
        RunDir dir(cfg.output_dir);
        dir.write_config(cfg);

        if (gen->parsed()) {
            std::cout << stage_gen_demos(cfg, dir) << '\n';
        } else if (dense->parsed()) {
            const std::string demos = require_artifact(dir, demos_path, "demos", "--demos");
            std::cout << stage_train_dense(cfg, dir, demos).summary.dump() << '\n';
        } else if (prune->parsed()) {
            const std::string ck = require_artifact(dir, checkpoint, "dense", "--checkpoint");
            const std::string demos = require_artifact(dir, demos_path, "demos", "--demos");
            std::cout << stage_prune(cfg, dir, ck, demos).summary.dump() << '\n';
        } else if (sft->parsed()) {
            const std::string ck = require_artifact(dir, checkpoint, "pruned", "--checkpoint");
            const std::string demos = require_artifact(dir, demos_path, "demos", "--demos");
            std::cout << stage_sft(cfg, dir, ck, demos).summary.dump() << '\n';
        } else if (rl->parsed()) {
            const std::string ck = require_artifact(dir, checkpoint, "sft", "--checkpoint");
            std::cout << stage_rl(cfg, dir, ck).summary.dump() << '\n';
        } else if (quant->parsed()) {
            const std::string ck = require_artifact(dir, checkpoint, "rl", "--checkpoint");
            std::cout << stage_quantize(cfg, dir, ck).summary.dump() << '\n';
        } else if (eval->parsed()) {
            SuccessRates sr;
            std::string what = "expert";
            if (expert) {
                sr = evaluate_expert(cfg);
            } else {
                if (checkpoint.empty()) {
                    throw Error("eval needs --checkpoint or --expert");
                }
                sr = evaluate_checkpoint(cfg, checkpoint);
                what = checkpoint;
            }
            const json out{{"policy", what}, {"ind_sr", sr.ind}, {"ood_sr", sr.ood},
                           {"episodes_per_task", cfg.eval.episodes_per_task}};
            std::ofstream(dir.file("eval.json")) << out.dump(2) << '\n';
            std::cout << out.dump() << '\n';
        } else if (bench->parsed()) {
            std::vector<std::pair<std::string, std::string>> variants;
            for (const auto & item : bench_inputs) {
                const auto eq = item.find('=');
                if (eq == std::string::npos) {
                    variants.emplace_back(std::filesystem::path(item).stem().string(), item);
                } else {
                    variants.emplace_back(item.substr(0, eq), item.substr(eq + 1));
                }
            }
            if (variants.empty()) {
                for (const char * key : {"dense", "pruned", "sft", "rl", "quantized"}) {
                    if (auto p = dir.lookup(key)) {
                        variants.emplace_back(key, *p);
                    }
                }
            }
            if (variants.empty()) {
                throw Error("bench found no checkpoints; pass --checkpoint name=path");
            }
            const BenchReport r = run_bench(cfg, variants);
            write_report(r, dir.file("bench_report"));
            dir.record("bench_report", "bench_report.json");
            print_report(r);
        } else if (pipeline->parsed()) {
            print_report(run_pipeline(cfg));
        } else if (sweep->parsed()) {
            SweepOptions opt;
            opt.ratios.clear();
            for (const auto & r : split_csv(ratios)) {
                opt.ratios.push_back(std::stod(r));
            }
            opt.quant_bits.clear();
            for (const auto & q : split_csv(quant_modes)) {
                if (q == "none" || q == "fp32") {
                    opt.quant_bits.push_back(0);
                } else if (q == "4" || q == "8") {
                    opt.quant_bits.push_back(std::stoi(q));
                } else {
                    throw Error("unknown quant mode '" + q + "' (expected none, 4 or 8)");
                }
            }
            print_report(run_sweep(cfg, opt));
        }
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
