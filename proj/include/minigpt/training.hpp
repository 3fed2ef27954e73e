#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "minigpt/model.hpp"

namespace minigpt {

// ---------------------------------------------------------------------------
// Next-token training with the recovery stopping rule: after every epoch the
// model is evaluated on a held-out set, and training stops at the first epoch
// whose perplexity reaches the target (when one is set). Fully deterministic
// for a fixed seed: seeded epoch shuffle, sequential gradient accumulation,
// fixed parameter visitation order.
// ---------------------------------------------------------------------------

enum class OptimizerKind : uint8_t { sgd, adam };

OptimizerKind optimizer_from_name(const std::string& name);
const char* optimizer_name(OptimizerKind k);

struct TrainConfig {
    float learning_rate = 3e-4f;
    int64_t batch_size = 8;
    int64_t seq_len = 32;
    int64_t max_epochs = 200;
    uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::adam;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float adam_eps = 1e-8f;
    std::optional<float> target_perplexity;
    // When set, the model is saved here every checkpoint_every epochs and at
    // recovery. checkpoint_every = 0 writes only at recovery.
    std::string checkpoint_path;
    int64_t checkpoint_every = 0;

    void validate() const;
};

struct EpochStats {
    double loss = 0.0;       // position-weighted mean NLL over the epoch
    float perplexity = 0.0;  // held-out perplexity after the epoch's updates
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    std::optional<int64_t> recovery_epochs;  // 1-based first epoch at target

    std::string to_csv() const;  // epoch,loss,perplexity
    std::string to_json_string() const;
    void save_csv(const std::string& path) const;
};

TrainHistory train(ModelBundle& m, const std::vector<std::string>& dataset,
                   const TrainConfig& cfg, const std::vector<std::string>& eval_set);

// Perplexity of the given model on eval_set, for use as the fine-tuning
// target after pruning: recovery means matching the unpruned baseline.
float recovery_target(const ModelBundle& base, const std::vector<std::string>& eval_set,
                      int64_t seq_len);

}  // namespace minigpt
