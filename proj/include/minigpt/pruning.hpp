#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minigpt/calibration.hpp"
#include "minigpt/model.hpp"

namespace minigpt {

// Why a hidden unit was dropped. The linear criterion reads the pre-
// activation site and removes the unit's column in mlp_in (linear_in view)
// together with its row in mlp_out (linear_out view); the activation
// criterion reads the post-activation site.
struct DroppedUnit {
    int64_t unit = 0;
    bool linear_in = false;
    bool linear_out = false;
    bool activation = false;
};

struct LayerPlan {
    std::vector<int64_t> keep_hidden;  // sorted, never empty
    std::vector<DroppedUnit> dropped;  // sorted by unit
};

struct PrunePlan {
    std::string fingerprint;  // checkpoint the stats were computed on
    float eps_linear = 0.0f;
    float eps_act = 0.0f;
    int64_t min_token_count = 0;
    bool prune_embeddings = true;
    std::vector<LayerPlan> layers;
    std::vector<int32_t> keep_tokens;  // sorted, includes specials, merge-closed
    int64_t predicted_param_count = 0;

    std::string to_json_string() const;
    static PrunePlan from_json_string(const std::string& text);
    void save(const std::string& path) const;
    static PrunePlan load(const std::string& path);
};

// Per-layer droppable masks from a single criterion.
struct CriterionPlan {
    std::vector<std::vector<uint8_t>> droppable;  // [layer][unit]
};

// Hidden unit j is droppable when its statistic falls strictly below eps.
// plan_linear reads sites layers.L.mlp_in.output, plan_activation reads
// layers.L.act.output.
CriterionPlan plan_linear(const StatsReport& stats, float eps);
CriterionPlan plan_activation(const StatsReport& stats, float eps);

// Token kept iff its count exceeds min_count or the token is special.
// Returns sorted old ids; merge closure is applied by build_plan.
std::vector<int32_t> plan_embedding(const std::vector<int64_t>& freq, int64_t min_count);

struct PlanOptions {
    float eps_linear = 1e-3f;
    float eps_act = 1e-3f;
    int64_t min_token_count = 0;
    bool prune_embeddings = true;
};

// Union of both hidden-unit criteria plus embedding pruning, clamped to keep
// at least one unit per layer, with exact predicted parameter accounting.
PrunePlan build_plan(const ModelBundle& m, const StatsReport& stats, const PlanOptions& options);

struct PruneResult {
    ModelBundle model;
    TokenRemap remap;
};

// Physically removes dropped rows/columns and rebuilds the tokenizer.
PruneResult merge_and_apply(const ModelBundle& m, const PrunePlan& plan);

// 100 * param_count(pruned) / param_count(base).
double relative_size(const ModelBundle& base, const ModelBundle& pruned);

}  // namespace minigpt
