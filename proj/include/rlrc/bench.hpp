#pragma once

#include "rlrc/pruning.hpp"
#include "rlrc/quant.hpp"
#include "rlrc/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rlrc {

struct DemoConfig {
    int episodes_per_task = 50;
};

struct PruneConfig {
    double ratio = 0.9;
    // Unset means the first and last decoder layers.
    std::optional<std::vector<std::size_t>> exempt_layers;
    std::size_t calibration_steps = 512;
};

struct QuantConfig {
    int bits = 4;
    std::size_t block_size = 64;
    bool enabled = true;
};

struct EvalConfig {
    int episodes_per_task = 16;
};

struct BenchConfig {
    std::vector<std::size_t> batch_sizes{1, 16};
    std::size_t warmup_iters = 10;
    std::size_t timed_iters = 50;
};

struct PipelineConfig {
    ModelConfig model;
    EnvConfig env;
    DemoConfig demos;
    PruneConfig prune;
    SftConfig sft;
    PpoConfig ppo;
    QuantConfig quant;
    EvalConfig eval;
    BenchConfig bench;
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";

    // Propagates the top-level seed and env-derived vocab sizes, then checks
    // every section.
    void resolve();
};

nlohmann::json pipeline_to_json(const PipelineConfig & c);
// Unknown keys anywhere are rejected. Missing keys keep their defaults.
PipelineConfig pipeline_from_json(const nlohmann::json & j);
PipelineConfig load_pipeline_config(const std::string & path);

// ---- timing -----------------------------------------------------------------

struct TimingRow {
    std::size_t batch = 0;
    double median_ms = 0.0;
    double mean_ms = 0.0;
    double cv = 0.0;            // stddev / mean over timed iterations
    double throughput = 0.0;    // batch * iters / total seconds
    bool unstable = false;      // cv >= 0.15
};

struct TimingResult {
    std::vector<TimingRow> rows;
    double latency_ms = 0.0;    // median at batch 1 (or the smallest batch)
    double throughput = 0.0;    // at the largest batch
    bool unstable = false;
};

// step(batch) performs one greedy action decode for `batch` observations.
using DecodeFn = std::function<void(const std::vector<Observation> &)>;
DecodeFn decode_fn(const PolicyModel & model);
DecodeFn decode_fn(const QuantizedModel & model);

TimingResult measure_latency_throughput(const DecodeFn & step, const BenchConfig & config, const EnvConfig & env,
                                        std::uint64_t seed);

// Worker-thread cap from RLRC_THREADS (default 1; kernels are sequential).
std::size_t configured_threads();
std::string cpu_model();

// ---- reports --------------------------------------------------------------

struct BenchRow {
    std::string variant;
    std::size_t total_params = 0;
    std::size_t prunable_params = 0;
    std::size_t memory_bytes = 0;
    std::size_t weights_bytes = 0;
    std::size_t scales_bytes = 0;
    double latency_ms = 0.0;
    double throughput = 0.0;
    double ind_sr = 0.0;
    double ood_sr = 0.0;
    double ratio = 0.0;
    std::string quant = "none";
    bool unstable = false;
};

struct BenchReport {
    nlohmann::json header = nlohmann::json::object();
    std::vector<BenchRow> rows;
};

nlohmann::json report_to_json(const BenchReport & r);
std::string report_to_csv(const BenchReport & r);
void write_report(const BenchReport & r, const std::string & path_stem);  // writes .csv and .json
nlohmann::json report_header(const BenchConfig & config);

// ---- pipeline stages ----------------------------------------------------

// Artifacts of a run directory, recorded in manifest.json.
class RunDir {
public:
    explicit RunDir(std::string path);
    const std::string & path() const { return path_; }
    std::string file(const std::string & name) const;
    void record(const std::string & key, const std::string & file_name);
    std::optional<std::string> lookup(const std::string & key) const;
    void write_config(const PipelineConfig & config) const;
    nlohmann::json manifest() const;

private:
    std::string path_;
};

// JSON-lines metric sink with a wallclock field.
MetricSink jsonl_sink(const std::string & path);

struct StageResult {
    std::string checkpoint;
    nlohmann::json summary = nlohmann::json::object();
};

std::string stage_gen_demos(const PipelineConfig & c, RunDir & dir);
StageResult stage_train_dense(const PipelineConfig & c, RunDir & dir, const std::string & demos_path);
// `name` is the artifact stem inside the run directory.
StageResult stage_prune(const PipelineConfig & c, RunDir & dir, const std::string & checkpoint,
                        const std::string & demos_path, const std::string & name = "pruned");
StageResult stage_sft(const PipelineConfig & c, RunDir & dir, const std::string & checkpoint,
                      const std::string & demos_path, const std::string & name = "sft");
StageResult stage_rl(const PipelineConfig & c, RunDir & dir, const std::string & checkpoint,
                     const std::string & name = "rl");
StageResult stage_quantize(const PipelineConfig & c, RunDir & dir, const std::string & checkpoint,
                           const std::string & name = "quantized");

struct SuccessRates {
    double ind = 0.0;
    double ood = 0.0;
};
SuccessRates evaluate_checkpoint(const PipelineConfig & c, const std::string & checkpoint);
SuccessRates evaluate_expert(const PipelineConfig & c);

BenchRow bench_checkpoint(const PipelineConfig & c, const std::string & variant, const std::string & checkpoint,
                          bool with_success = true);
BenchReport run_bench(const PipelineConfig & c, const std::vector<std::pair<std::string, std::string>> & variants);
BenchReport run_pipeline(const PipelineConfig & c);

struct SweepOptions {
    std::vector<double> ratios{0.0, 0.5, 0.9};
    std::vector<int> quant_bits{0, 4};  // 0 = full precision
};
BenchReport run_sweep(const PipelineConfig & c, const SweepOptions & options);

// Throws unless `stage` is an accepted input for the named command.
void check_stage_order(const std::string & command, const std::string & stage);

}  // namespace rlrc
