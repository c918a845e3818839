#pragma once

#include "rlrc/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rlrc {

enum class GroupKind : std::uint8_t { MlpChannel = 0, AttnHead = 1 };
const char * group_kind_name(GroupKind k);
GroupKind parse_group_kind(const std::string & s);

struct Slice {
    std::string param;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
};

// One coupled unit of a decoder layer: an MLP intermediate channel (a column
// of gate and up plus a row of down) or an attention head (its column block
// of q/k/v plus its row block of o).
struct DependencyGroup {
    GroupKind kind = GroupKind::MlpChannel;
    std::size_t layer = 0;
    std::size_t index = 0;
    std::vector<Slice> members;
};

// Elements removed with one group of the given kind.
std::size_t group_param_count(const ModelConfig & config, GroupKind kind);

std::vector<DependencyGroup> build_dependency_groups(const PolicyModel & model);

// Σ |w * g| over the elements of w and g.
double taylor_score(std::span<const float> weights, std::span<const float> grads);

struct ImportanceEntry {
    GroupKind kind = GroupKind::MlpChannel;
    std::size_t layer = 0;
    std::size_t index = 0;
    std::size_t params = 0;
    double score = 0.0;
};

struct ImportanceTable {
    std::vector<ImportanceEntry> entries;  // one per non-exempt group
    std::size_t calibration_size = 0;
    std::uint64_t seed = 0;
    double loss = 0.0;
};

// Default exemption: the first and last decoder layers.
std::vector<std::size_t> default_exempt_layers(const ModelConfig & config);

// Scores every non-exempt group with the first-order Taylor criterion on the
// mean SFT loss of the calibration steps (one backward pass). The model's
// gradients are left cleared.
ImportanceTable taylor_importance(PolicyModel & model, std::span<const SftSample> calibration,
                                  std::span<const std::size_t> exempt_layers, std::uint64_t seed = 0);

// Up to max_steps demonstration steps drawn without replacement from seed
// (all steps when there are fewer).
std::vector<SftSample> calibration_samples(std::span<const Demonstration> demos, std::size_t max_steps,
                                           std::uint64_t seed);

struct PrunePlan {
    std::vector<ImportanceEntry> groups;  // removal order
    double target_ratio = 0.0;
    double achieved_ratio = 0.0;          // removed / prunable
    double whole_model_ratio = 0.0;       // removed / total parameters
    std::size_t prunable_params = 0;
    std::size_t removed_params = 0;
    std::size_t total_params = 0;
    std::vector<std::size_t> exempt_layers;
};

nlohmann::json plan_to_json(const PrunePlan & plan);
PrunePlan plan_from_json(const nlohmann::json & j);

// Greedy lowest-score selection until removed/prunable first reaches
// target_ratio. Groups that would remove a layer's last head or last channel
// are skipped. config provides the widths the table was built against.
PrunePlan select_prune_groups(const ImportanceTable & table, const ModelConfig & config, double target_ratio,
                              std::span<const std::size_t> exempt_layers);

PolicyModel apply_prune(const PolicyModel & model, const PrunePlan & plan);

struct MagnitudeMask {
    double sparsity = 0.0;
    // Per decoder projection (layer-major, Proj order): flat indices zeroed.
    std::vector<std::vector<std::size_t>> zeroed;
};

MagnitudeMask magnitude_mask(PolicyModel & model, double sparsity);

struct LayerParams {
    std::size_t layer = 0;
    std::size_t heads = 0;
    std::size_t d_ff = 0;
    std::size_t attention = 0;  // q, k, v, o
    std::size_t mlp = 0;        // gate, up, down
    std::size_t norms = 0;
    bool exempt = false;
};

struct ParamCounts {
    std::size_t total = 0;
    std::size_t prunable = 0;
    std::vector<LayerParams> layers;
};

ParamCounts param_counts(const ModelConfig & config, std::span<const std::size_t> exempt_layers);
ParamCounts param_counts(const PolicyModel & model, std::span<const std::size_t> exempt_layers);

}  // namespace rlrc
