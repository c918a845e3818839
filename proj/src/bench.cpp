#include "rlrc/bench.hpp"

#include "rlrc/checkpoint.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace rlrc {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void expect_keys(const json & j, std::initializer_list<const char *> known, const std::string & section) {
    if (!j.is_object()) {
        throw Error("config section '" + section + "' must be an object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::none_of(known.begin(), known.end(), [&](const char * k) { return it.key() == k; })) {
            throw Error("unknown config key '" + (section.empty() ? "" : section + ".") + it.key() + "'");
        }
    }
}

template <typename T>
void get(const json & j, const char * key, T & field) {
    if (j.contains(key)) {
        j.at(key).get_to(field);
    }
}

json sft_to_json(const SftConfig & s) {
    return json{{"learning_rate", s.learning_rate}, {"batch_size", s.batch_size},
                {"max_steps", s.max_steps},         {"eval_interval", s.eval_interval},
                {"eval_episodes_per_task", s.eval_episodes_per_task},
                {"patience", s.patience},           {"target_success", s.target_success},
                {"max_grad_norm", s.max_grad_norm}};
}

SftConfig sft_from_json(const json & j) {
    expect_keys(j, {"learning_rate", "batch_size", "max_steps", "eval_interval", "eval_episodes_per_task", "patience",
                    "target_success", "max_grad_norm"},
                "sft");
    SftConfig s;
    get(j, "learning_rate", s.learning_rate);
    get(j, "batch_size", s.batch_size);
    get(j, "max_steps", s.max_steps);
    get(j, "eval_interval", s.eval_interval);
    get(j, "eval_episodes_per_task", s.eval_episodes_per_task);
    get(j, "patience", s.patience);
    get(j, "target_success", s.target_success);
    get(j, "max_grad_norm", s.max_grad_norm);
    return s;
}

json ppo_to_json(const PpoConfig & p) {
    return json{{"gamma", p.gamma},
                {"gae_lambda", p.gae_lambda},
                {"clip_eps", p.clip_eps},
                {"epochs", p.epochs},
                {"minibatches", p.minibatches},
                {"value_coef", p.value_coef},
                {"entropy_coef", p.entropy_coef},
                {"num_envs", p.num_envs},
                {"horizon", p.horizon},
                {"total_env_steps", p.total_env_steps},
                {"learning_rate", p.learning_rate},
                {"max_grad_norm", p.max_grad_norm},
                {"stop_critic_gradient", p.stop_critic_gradient},
                {"eval_interval", p.eval_interval},
                {"eval_episodes_per_task", p.eval_episodes_per_task}};
}

PpoConfig ppo_from_json(const json & j) {
    expect_keys(j, {"gamma", "gae_lambda", "clip_eps", "epochs", "minibatches", "value_coef", "entropy_coef",
                    "num_envs", "horizon", "total_env_steps", "learning_rate", "max_grad_norm",
                    "stop_critic_gradient", "eval_interval", "eval_episodes_per_task"},
                "ppo");
    PpoConfig p;
    get(j, "gamma", p.gamma);
    get(j, "gae_lambda", p.gae_lambda);
    get(j, "clip_eps", p.clip_eps);
    get(j, "epochs", p.epochs);
    get(j, "minibatches", p.minibatches);
    get(j, "value_coef", p.value_coef);
    get(j, "entropy_coef", p.entropy_coef);
    get(j, "num_envs", p.num_envs);
    get(j, "horizon", p.horizon);
    get(j, "total_env_steps", p.total_env_steps);
    get(j, "learning_rate", p.learning_rate);
    get(j, "max_grad_norm", p.max_grad_norm);
    get(j, "stop_critic_gradient", p.stop_critic_gradient);
    get(j, "eval_interval", p.eval_interval);
    get(j, "eval_episodes_per_task", p.eval_episodes_per_task);
    return p;
}

std::uint64_t eval_seed(const PipelineConfig & c) {
    return mix_seed(c.seed, 0xf1a1);
}

std::vector<std::size_t> exempt_of(const PipelineConfig & c, const ModelConfig & model) {
    return c.prune.exempt_layers ? *c.prune.exempt_layers : default_exempt_layers(model);
}

LoadedCheckpoint load_stage(const std::string & command, const std::string & path) {
    if (!fs::exists(path)) {
        throw Error(command + ": checkpoint '" + path + "' does not exist");
    }
    LoadedCheckpoint ck = load_checkpoint(path);
    check_stage_order(command, ck.info.stage);
    return ck;
}

json with_parent(const PipelineConfig & c, const std::string & parent) {
    return json{{"seed", c.seed}, {"parent", parent}};
}

}  // namespace

// ---- config -------------------------------------------------------------------

void PipelineConfig::resolve() {
    model.observation_vocab = static_cast<std::size_t>(env.width + env.height + 3);
    model.seed = seed;
    sft.seed = seed;
    ppo.seed = seed;
    model.normalize();
    ppo.validate();
    if (env.width < 2 || env.height < 2 || env.max_steps < 1 || env.distractors < 0 || env.distractors > 2) {
        throw Error("invalid env config: need width,height >= 2, max_steps >= 1 and 0..2 distractors");
    }
    if (demos.episodes_per_task < 1) {
        throw Error("demos.episodes_per_task must be >= 1");
    }
    if (!(prune.ratio >= 0.0) || prune.ratio >= 1.0) {
        throw Error("prune.ratio must be in [0, 1)");
    }
    if (prune.exempt_layers) {
        for (std::size_t l : *prune.exempt_layers) {
            if (l >= model.n_layers) {
                throw Error("prune.exempt_layers lists layer " + std::to_string(l) + " of a " +
                            std::to_string(model.n_layers) + "-layer model");
            }
        }
    }
    if (quant.bits != 4 && quant.bits != 8) {
        throw Error("quant.bits must be 4 or 8");
    }
    if (quant.block_size == 0) {
        throw Error("quant.block_size must be positive");
    }
    if (eval.episodes_per_task < 1) {
        throw Error("eval.episodes_per_task must be >= 1");
    }
    if (bench.batch_sizes.empty() || bench.warmup_iters < 10 || bench.timed_iters < 50) {
        throw Error("bench needs at least one batch size, >= 10 warmup and >= 50 timed iterations");
    }
    if (std::find(bench.batch_sizes.begin(), bench.batch_sizes.end(), 0u) != bench.batch_sizes.end()) {
        throw Error("bench batch sizes must be positive");
    }
    if (sft.batch_size == 0 || sft.eval_interval == 0) {
        throw Error("sft.batch_size and sft.eval_interval must be positive");
    }
}

json pipeline_to_json(const PipelineConfig & c) {
    json prune{{"ratio", c.prune.ratio}, {"calibration_steps", c.prune.calibration_steps}};
    prune["exempt_layers"] = c.prune.exempt_layers ? json(*c.prune.exempt_layers) : json(nullptr);
    return json{{"model", config_to_json(c.model)},
                {"env",
                 {{"width", c.env.width},
                  {"height", c.env.height},
                  {"max_steps", c.env.max_steps},
                  {"distractors", c.env.distractors}}},
                {"demos", {{"episodes_per_task", c.demos.episodes_per_task}}},
                {"prune", prune},
                {"sft", sft_to_json(c.sft)},
                {"ppo", ppo_to_json(c.ppo)},
                {"quant", {{"bits", c.quant.bits}, {"block_size", c.quant.block_size}, {"enabled", c.quant.enabled}}},
                {"eval", {{"episodes_per_task", c.eval.episodes_per_task}}},
                {"bench",
                 {{"batch_sizes", c.bench.batch_sizes},
                  {"warmup_iters", c.bench.warmup_iters},
                  {"timed_iters", c.bench.timed_iters}}},
                {"seed", c.seed},
                {"output_dir", c.output_dir}};
}

PipelineConfig pipeline_from_json(const json & j) {
    expect_keys(j, {"model", "env", "demos", "prune", "sft", "ppo", "quant", "eval", "bench", "seed", "output_dir"}, "");
    PipelineConfig c;
    get(j, "seed", c.seed);
    get(j, "output_dir", c.output_dir);
    if (j.contains("model")) {
        c.model = config_from_json(j.at("model"));
    }
    if (j.contains("env")) {
        const json & e = j.at("env");
        expect_keys(e, {"width", "height", "max_steps", "distractors"}, "env");
        get(e, "width", c.env.width);
        get(e, "height", c.env.height);
        get(e, "max_steps", c.env.max_steps);
        get(e, "distractors", c.env.distractors);
    }
    if (j.contains("demos")) {
        expect_keys(j.at("demos"), {"episodes_per_task"}, "demos");
        get(j.at("demos"), "episodes_per_task", c.demos.episodes_per_task);
    }
    if (j.contains("prune")) {
        const json & p = j.at("prune");
        expect_keys(p, {"ratio", "exempt_layers", "calibration_steps"}, "prune");
        get(p, "ratio", c.prune.ratio);
        get(p, "calibration_steps", c.prune.calibration_steps);
        if (p.contains("exempt_layers") && !p.at("exempt_layers").is_null()) {
            c.prune.exempt_layers = p.at("exempt_layers").get<std::vector<std::size_t>>();
        }
    }
    if (j.contains("sft")) {
        c.sft = sft_from_json(j.at("sft"));
    }
    if (j.contains("ppo")) {
        c.ppo = ppo_from_json(j.at("ppo"));
    }
    if (j.contains("quant")) {
        const json & q = j.at("quant");
        expect_keys(q, {"bits", "block_size", "enabled"}, "quant");
        get(q, "bits", c.quant.bits);
        get(q, "block_size", c.quant.block_size);
        get(q, "enabled", c.quant.enabled);
    }
    if (j.contains("eval")) {
        expect_keys(j.at("eval"), {"episodes_per_task"}, "eval");
        get(j.at("eval"), "episodes_per_task", c.eval.episodes_per_task);
    }
    if (j.contains("bench")) {
        const json & b = j.at("bench");
        expect_keys(b, {"batch_sizes", "warmup_iters", "timed_iters"}, "bench");
        get(b, "batch_sizes", c.bench.batch_sizes);
        get(b, "warmup_iters", c.bench.warmup_iters);
        get(b, "timed_iters", c.bench.timed_iters);
    }
    c.resolve();
    return c;
}

PipelineConfig load_pipeline_config(const std::string & path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open config '" + path + "'");
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception & e) {
        throw Error("config '" + path + "' is not valid JSON: " + e.what());
    }
    return pipeline_from_json(j);
}

// ---- timing -------------------------------------------------------------------

DecodeFn decode_fn(const PolicyModel & model) {
    return [&model](const std::vector<Observation> & obs) {
        std::uint64_t rng = 0;
        sample_actions(model, obs, SampleMode::Greedy(), rng);
    };
}

DecodeFn decode_fn(const QuantizedModel & model) {
    return [&model](const std::vector<Observation> & obs) {
        std::uint64_t rng = 0;
        sample_actions(model, obs, SampleMode::Greedy(), rng);
    };
}

TimingResult measure_latency_throughput(const DecodeFn & step, const BenchConfig & config, const EnvConfig & env,
                                        std::uint64_t seed) {
    if (config.batch_sizes.empty() || config.timed_iters == 0) {
        throw Error("timing needs at least one batch size and one timed iteration");
    }
    const TaskSuite suite = make_task_suite(seed);
    std::vector<TaskSpec> tasks = suite.ind;
    tasks.insert(tasks.end(), suite.ood.begin(), suite.ood.end());
    const std::size_t max_batch = *std::max_element(config.batch_sizes.begin(), config.batch_sizes.end());
    std::vector<Observation> pool;
    for (std::size_t i = 0; i < max_batch; ++i) {
        pool.push_back(observe(reset(tasks[i % tasks.size()], mix_seed(seed, i), env)));
    }
    using clock = std::chrono::steady_clock;
    TimingResult out;
    std::vector<std::size_t> sizes = config.batch_sizes;
    std::sort(sizes.begin(), sizes.end());
    for (std::size_t b : sizes) {
        const std::vector<Observation> obs(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(b));
        for (std::size_t i = 0; i < config.warmup_iters; ++i) {
            step(obs);
        }
        std::vector<double> ms(config.timed_iters);
        double total = 0.0;
        for (std::size_t i = 0; i < config.timed_iters; ++i) {
            const auto t0 = clock::now();
            step(obs);
            ms[i] = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            total += ms[i];
        }
        TimingRow row;
        row.batch = b;
        row.mean_ms = total / static_cast<double>(ms.size());
        double var = 0.0;
        for (double v : ms) {
            var += (v - row.mean_ms) * (v - row.mean_ms);
        }
        row.cv = row.mean_ms > 0.0 ? std::sqrt(var / static_cast<double>(ms.size())) / row.mean_ms : 0.0;
        std::vector<double> sorted = ms;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t n = sorted.size();
        row.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        row.throughput = static_cast<double>(b * config.timed_iters) / (total / 1000.0);
        row.unstable = row.cv >= 0.15;
        out.unstable = out.unstable || row.unstable;
        out.rows.push_back(row);
    }
    out.latency_ms = out.rows.front().median_ms;
    out.throughput = out.rows.back().throughput;
    return out;
}

std::size_t configured_threads() {
    if (const char * v = std::getenv("RLRC_THREADS")) {
        char * end = nullptr;
        const long n = std::strtol(v, &end, 10);
        if (end != v && *end == '\0' && n >= 1) {
            return static_cast<std::size_t>(n);
        }
        throw Error(std::string("RLRC_THREADS must be a positive integer, got '") + v + "'");
    }
    return 1;
}

std::string cpu_model() {
    std::ifstream in("/proc/cpuinfo");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                return line.substr(line.find_first_not_of(' ', colon + 1));
            }
        }
    }
    return "unknown";
}

// ---- reports --------------------------------------------------------------

json report_header(const BenchConfig & config) {
    return json{{"cpu", cpu_model()},
                {"threads", configured_threads()},
                {"kernel_threads_used", 1},
                {"batch_sizes", config.batch_sizes},
                {"warmup_iters", config.warmup_iters},
                {"timed_iters", config.timed_iters},
                {"latency", "median wall time of one greedy action decode at the smallest batch size"},
                {"throughput", "greedy env-action decodes per second at the largest batch size"},
                {"memory", "serialized weight payload bytes (weights + block scales), value head excluded"}};
}

json report_to_json(const BenchReport & r) {
    json rows = json::array();
    for (const auto & b : r.rows) {
        rows.push_back({{"variant", b.variant},
                        {"ratio", b.ratio},
                        {"quant", b.quant},
                        {"total_params", b.total_params},
                        {"prunable_params", b.prunable_params},
                        {"memory_bytes", b.memory_bytes},
                        {"weights_bytes", b.weights_bytes},
                        {"scales_bytes", b.scales_bytes},
                        {"latency_ms", b.latency_ms},
                        {"throughput", b.throughput},
                        {"ind_sr", b.ind_sr},
                        {"ood_sr", b.ood_sr},
                        {"timing_unstable", b.unstable}});
    }
    return json{{"header", r.header}, {"rows", rows}};
}

std::string report_to_csv(const BenchReport & r) {
    std::ostringstream os;
    os << "# cpu=" << r.header.value("cpu", std::string("unknown")) << " threads=" << r.header.value("threads", 1)
       << " throughput=greedy env-action decodes/s\n";
    os << "variant,ratio,quant,total_params,prunable_params,memory_bytes,weights_bytes,scales_bytes,latency_ms,"
          "throughput,ind_sr,ood_sr,timing_unstable\n";
    os << std::setprecision(6);
    for (const auto & b : r.rows) {
        os << b.variant << ',' << b.ratio << ',' << b.quant << ',' << b.total_params << ',' << b.prunable_params << ','
           << b.memory_bytes << ',' << b.weights_bytes << ',' << b.scales_bytes << ',' << b.latency_ms << ','
           << b.throughput << ',' << b.ind_sr << ',' << b.ood_sr << ',' << (b.unstable ? 1 : 0) << '\n';
    }
    return os.str();
}

void write_report(const BenchReport & r, const std::string & path_stem) {
    std::ofstream csv(path_stem + ".csv");
    std::ofstream js(path_stem + ".json");
    if (!csv || !js) {
        throw Error("cannot write report '" + path_stem + "'");
    }
    csv << report_to_csv(r);
    js << report_to_json(r).dump(2) << '\n';
}

// ---- run directory ----------------------------------------------------------------

RunDir::RunDir(std::string path) : path_(std::move(path)) {
    fs::create_directories(path_);
}

std::string RunDir::file(const std::string & name) const {
    return (fs::path(path_) / name).string();
}

json RunDir::manifest() const {
    std::ifstream in(file("manifest.json"));
    if (!in) {
        return json{{"artifacts", json::object()}};
    }
    return json::parse(in);
}

void RunDir::record(const std::string & key, const std::string & file_name) {
    json m = manifest();
    m["artifacts"][key] = file_name;
    std::ofstream out(file("manifest.json"));
    out << m.dump(2) << '\n';
}

std::optional<std::string> RunDir::lookup(const std::string & key) const {
    const json m = manifest();
    if (m.contains("artifacts") && m["artifacts"].contains(key)) {
        return file(m["artifacts"][key].get<std::string>());
    }
    return std::nullopt;
}

void RunDir::write_config(const PipelineConfig & config) const {
    std::ofstream out(file("config.resolved.json"));
    out << pipeline_to_json(config).dump(2) << '\n';
}

MetricSink jsonl_sink(const std::string & path) {
    auto out = std::make_shared<std::ofstream>(path, std::ios::app);
    if (!*out) {
        throw Error("cannot open metrics log '" + path + "'");
    }
    const auto start = std::chrono::steady_clock::now();
    return [out, start](const json & j) {
        json row = j;
        row["wallclock"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        *out << row.dump() << '\n';
        out->flush();
    };
}

// ---- stages -------------------------------------------------------------------

void check_stage_order(const std::string & command, const std::string & stage) {
    auto allow = [&](std::initializer_list<const char *> ok) {
        if (std::none_of(ok.begin(), ok.end(), [&](const char * s) { return stage == s; })) {
            std::string list;
            for (const char * s : ok) {
                list += (list.empty() ? "" : ", ") + std::string(s);
            }
            throw Error(command + " expects a checkpoint from stage {" + list + "}, got stage '" + stage + "'");
        }
    };
    if (command == "prune") {
        allow({"dense"});
    } else if (command == "sft") {
        allow({"pruned", "dense"});
    } else if (command == "rl") {
        allow({"sft", "pruned"});
    } else if (command == "quantize") {
        allow({"dense", "pruned", "sft", "rl"});
    } else if (command != "eval" && command != "bench") {
        throw Error("unknown pipeline command '" + command + "'");
    }
}

std::string stage_gen_demos(const PipelineConfig & c, RunDir & dir) {
    const TaskSuite suite = make_task_suite(c.seed);
    write_suite(suite, dir.file("suite.json"));
    dir.record("suite", "suite.json");
    generate_demos(suite.ind, c.demos.episodes_per_task, c.seed, dir.file("demos.jsonl"), c.env);
    dir.record("demos", "demos.jsonl");
    return dir.file("demos.jsonl");
}

namespace {

StageResult run_sft_stage(const PipelineConfig & c, RunDir & dir, PolicyModel model, const std::string & parent,
                          const std::string & demos_path, const std::string & out_stage, const std::string & name) {
    const std::vector<Demonstration> demos = read_demos(demos_path);
    const TaskSuite suite = make_task_suite(c.seed);
    const SftResult r = train_sft(model, demos, c.sft, suite.ind, c.env, jsonl_sink(dir.file(name + "_metrics.jsonl")));
    json meta = with_parent(c, parent);
    meta["best_step"] = r.best_step;
    meta["best_success"] = r.best_success;
    meta["steps_run"] = r.steps_run;
    save_checkpoint(dir.file(name + ".rlrc"), model, {out_stage, meta});
    dir.record(name, name + ".rlrc");
    return {dir.file(name + ".rlrc"), meta};
}

}  // namespace

StageResult stage_train_dense(const PipelineConfig & c, RunDir & dir, const std::string & demos_path) {
    PolicyModel model = init_model(c.model, c.seed);
    return run_sft_stage(c, dir, std::move(model), "init", demos_path, "dense", "dense");
}

StageResult stage_prune(const PipelineConfig & c, RunDir & dir, const std::string & checkpoint,
                        const std::string & demos_path, const std::string & name) {
    LoadedCheckpoint ck = load_stage("prune", checkpoint);
    PolicyModel model = std::move(*ck.model);
    const std::vector<std::size_t> exempt = exempt_of(c, model.config);
    const std::vector<Demonstration> demos = read_demos(demos_path);
    const std::vector<SftSample> calib = calibration_samples(demos, c.prune.calibration_steps, c.seed);
    const ImportanceTable table = taylor_importance(model, calib, exempt, c.seed);
    const PrunePlan plan = select_prune_groups(table, model.config, c.prune.ratio, exempt);
    const PolicyModel pruned = apply_prune(model, plan);
    {
        std::ofstream out(dir.file(name + "_plan.json"));
        out << plan_to_json(plan).dump(2) << '\n';
    }
    json meta = with_parent(c, checkpoint);
    meta["target_ratio"] = plan.target_ratio;
    meta["achieved_ratio"] = plan.achieved_ratio;
    meta["whole_model_ratio"] = plan.whole_model_ratio;
    meta["exempt_layers"] = plan.exempt_layers;
    meta["calibration_loss"] = table.loss;
    save_checkpoint(dir.file(name + ".rlrc"), pruned, {"pruned", meta});
    dir.record(name, name + ".rlrc");
    dir.record(name + "_plan", name + "_plan.json");
    return {dir.file(name + ".rlrc"), meta};
}

StageResult stage_sft(const PipelineConfig & c, RunDir & dir, const std::string & checkpoint,
                      const std::string & demos_path, const std::string & name) {
    LoadedCheckpoint ck = load_stage("sft", checkpoint);
    return run_sft_stage(c, dir, std::move(*ck.model), checkpoint, demos_path, "sft", name);
}

StageResult stage_rl(const PipelineConfig & c, RunDir & dir, const std::string & checkpoint, const std::string & name) {
    LoadedCheckpoint ck = load_stage("rl", checkpoint);
    PolicyModel model = std::move(*ck.model);
    ValueHead head = ck.value_head ? std::move(*ck.value_head) : init_value_head(model.config.d_model, mix_seed(c.seed, 0x7a1));
    const TaskSuite suite = make_task_suite(c.seed);
    const PpoResult r = train_ppo(model, head, suite.ind, suite.ood, c.ppo, c.env, jsonl_sink(dir.file(name + "_metrics.jsonl")));
    json meta = with_parent(c, checkpoint);
    meta["warm_start"] = ck.info.stage == "sft";
    meta["env_steps"] = r.env_steps;
    meta["updates"] = r.updates;
    save_checkpoint(dir.file(name + ".rlrc"), model, {"rl", meta}, &head);
    dir.record(name, name + ".rlrc");
    return {dir.file(name + ".rlrc"), meta};
}

StageResult stage_quantize(const PipelineConfig & c, RunDir & dir, const std::string & checkpoint,
                           const std::string & name) {
    LoadedCheckpoint ck = load_stage("quantize", checkpoint);
    const QuantizedModel q = quantize_model(*ck.model, c.quant.bits, c.quant.block_size);
    json meta = with_parent(c, checkpoint);
    meta["bits"] = c.quant.bits;
    meta["block_size"] = c.quant.block_size;
    meta["source_stage"] = ck.info.stage;
    save_checkpoint(dir.file(name + ".rlrc"), q, {"quantized", meta});
    dir.record(name, name + ".rlrc");
    return {dir.file(name + ".rlrc"), meta};
}

SuccessRates evaluate_checkpoint(const PipelineConfig & c, const std::string & checkpoint) {
    const LoadedCheckpoint ck = load_stage("eval", checkpoint);
    const TaskSuite suite = make_task_suite(c.seed);
    const PolicyFn policy = ck.quantized ? greedy_policy(*ck.quantized) : greedy_policy(*ck.model);
    return {evaluate(policy, suite.ind, c.eval.episodes_per_task, eval_seed(c), c.env).success_rate,
            evaluate(policy, suite.ood, c.eval.episodes_per_task, eval_seed(c), c.env).success_rate};
}

SuccessRates evaluate_expert(const PipelineConfig & c) {
    const TaskSuite suite = make_task_suite(c.seed);
    const PolicyFn policy = expert_observation_policy(c.env);
    return {evaluate(policy, suite.ind, c.eval.episodes_per_task, eval_seed(c), c.env).success_rate,
            evaluate(policy, suite.ood, c.eval.episodes_per_task, eval_seed(c), c.env).success_rate};
}

BenchRow bench_checkpoint(const PipelineConfig & c, const std::string & variant, const std::string & checkpoint,
                          bool with_success) {
    const LoadedCheckpoint ck = load_stage("bench", checkpoint);
    BenchRow row;
    row.variant = variant;
    const ModelConfig & mc = ck.quantized ? ck.quantized->config() : ck.model->config;
    const std::vector<std::size_t> exempt = exempt_of(c, mc);
    MemoryBytes mem;
    TimingResult timing;
    if (ck.quantized) {
        mem = memory_bytes(*ck.quantized);
        row.total_params = param_counts(mc, exempt).total;
        row.quant = "int" + std::to_string(ck.quantized->bits);
        timing = measure_latency_throughput(decode_fn(*ck.quantized), c.bench, c.env, c.seed);
    } else {
        mem = memory_bytes(*ck.model);
        row.total_params = ck.model->parameter_count();
        timing = measure_latency_throughput(decode_fn(*ck.model), c.bench, c.env, c.seed);
    }
    if (mem.total != ck.model_payload_bytes) {
        throw Error("memory accounting mismatch for '" + checkpoint + "': computed " + std::to_string(mem.total) +
                    " bytes, serialized " + std::to_string(ck.model_payload_bytes));
    }
    row.prunable_params = param_counts(mc, exempt).prunable;
    row.memory_bytes = mem.total;
    row.weights_bytes = mem.weights_bytes;
    row.scales_bytes = mem.scales_bytes;
    row.latency_ms = timing.latency_ms;
    row.throughput = timing.throughput;
    row.unstable = timing.unstable;
    if (ck.info.meta.contains("achieved_ratio")) {
        row.ratio = ck.info.meta["achieved_ratio"].get<double>();
    }
    if (with_success) {
        const SuccessRates sr = evaluate_checkpoint(c, checkpoint);
        row.ind_sr = sr.ind;
        row.ood_sr = sr.ood;
    }
    return row;
}

BenchReport run_bench(const PipelineConfig & c, const std::vector<std::pair<std::string, std::string>> & variants) {
    BenchReport report;
    report.header = report_header(c.bench);
    for (const auto & [name, path] : variants) {
        report.rows.push_back(bench_checkpoint(c, name, path));
    }
    return report;
}

BenchReport run_pipeline(const PipelineConfig & c) {
    RunDir dir(c.output_dir);
    dir.write_config(c);
    const std::string demos = stage_gen_demos(c, dir);
    const StageResult dense = stage_train_dense(c, dir, demos);
    const StageResult pruned = stage_prune(c, dir, dense.checkpoint, demos);
    const StageResult sft = stage_sft(c, dir, pruned.checkpoint, demos);
    const StageResult rl = stage_rl(c, dir, sft.checkpoint);
    std::vector<std::pair<std::string, std::string>> variants{
        {"dense", dense.checkpoint}, {"pruned", pruned.checkpoint}, {"pruned+sft", sft.checkpoint}, {"rlrc", rl.checkpoint}};
    if (c.quant.enabled) {
        const StageResult q = stage_quantize(c, dir, rl.checkpoint);
        variants.emplace_back("rlrc-" + std::to_string(c.quant.bits) + "bit", q.checkpoint);
    }
    BenchReport report = run_bench(c, variants);
    for (auto & row : report.rows) {
        if (row.variant == "pruned+sft" || row.variant == "rlrc" || row.variant.rfind("rlrc-", 0) == 0) {
            row.ratio = pruned.summary["achieved_ratio"].get<double>();
        }
    }
    write_report(report, dir.file("bench_report"));
    dir.record("bench_report", "bench_report.json");
    return report;
}

BenchReport run_sweep(const PipelineConfig & c, const SweepOptions & options) {
    RunDir dir(c.output_dir);
    dir.write_config(c);
    std::string demos = dir.lookup("demos").value_or("");
    if (demos.empty() || !fs::exists(demos)) {
        demos = stage_gen_demos(c, dir);
    }
    std::string dense = dir.lookup("dense").value_or("");
    if (dense.empty() || !fs::exists(dense)) {
        dense = stage_train_dense(c, dir, demos).checkpoint;
    }
    BenchReport report;
    report.header = report_header(c.bench);
    report.header["sweep_ratios"] = options.ratios;
    report.header["sweep_quant_bits"] = options.quant_bits;
    for (double ratio : options.ratios) {
        if (!(ratio >= 0.0) || ratio >= 1.0) {
            throw Error("sweep ratio " + std::to_string(ratio) + " outside [0, 1)");
        }
        std::ostringstream tag;
        tag << "r" << std::fixed << std::setprecision(2) << ratio;
        std::string model_ck = dense;
        double achieved = 0.0;
        if (ratio > 0.0) {
            PipelineConfig cr = c;
            cr.prune.ratio = ratio;
            const StageResult p = stage_prune(cr, dir, dense, demos, "sweep_pruned_" + tag.str());
            achieved = p.summary["achieved_ratio"].get<double>();
            model_ck = stage_sft(cr, dir, p.checkpoint, demos, "sweep_sft_" + tag.str()).checkpoint;
        }
        for (int bits : options.quant_bits) {
            std::string ck = model_ck;
            std::string label = "fp32";
            if (bits != 0) {
                PipelineConfig cq = c;
                cq.quant.bits = bits;
                ck = stage_quantize(cq, dir, model_ck, "sweep_q" + std::to_string(bits) + "_" + tag.str()).checkpoint;
                label = "int" + std::to_string(bits);
            }
            BenchRow row = bench_checkpoint(c, tag.str() + "-" + label, ck);
            row.ratio = achieved;
            row.quant = bits == 0 ? "none" : label;
            report.rows.push_back(row);
        }
    }
    write_report(report, dir.file("sweep_report"));
    dir.record("sweep_report", "sweep_report.json");
    return report;
}

}  // namespace rlrc
