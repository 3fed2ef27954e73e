#include "minigpt/training.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "minigpt/checkpoint.hpp"
#include "minigpt/eval.hpp"
#include "minigpt/tape.hpp"

namespace minigpt {

namespace {

struct AdamSlot {
    Tensor m;
    Tensor v;
};

class Optimizer {
public:
    explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(ModelBundle& model, const std::unordered_map<std::string, Tensor>& grads) {
        ++t_;
        for_each_tensor(model, [&](const std::string& name, Tensor& theta) {
            const auto it = grads.find(name);
            if (it == grads.end()) return;
            if (cfg_.optimizer == OptimizerKind::sgd) {
                sgd(theta, it->second);
            } else {
                adam(name, theta, it->second);
            }
        });
    }

private:
    void sgd(Tensor& theta, const Tensor& g) {
        const double lr = static_cast<double>(cfg_.learning_rate);
        std::span<float> w = theta.mut();
        std::span<const float> gd = g.data();
        for (size_t i = 0; i < w.size(); ++i) {
            w[i] = static_cast<float>(static_cast<double>(w[i]) - lr * static_cast<double>(gd[i]));
        }
    }

    void adam(const std::string& name, Tensor& theta, const Tensor& g) {
        AdamSlot& slot = state_[name];
        if (slot.m.numel() == 0) {
            slot.m = Tensor::zeros(theta.shape());
            slot.v = Tensor::zeros(theta.shape());
        }
        const double lr = static_cast<double>(cfg_.learning_rate);
        const double b1 = static_cast<double>(cfg_.beta1);
        const double b2 = static_cast<double>(cfg_.beta2);
        const double eps = static_cast<double>(cfg_.adam_eps);
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        std::span<float> w = theta.mut();
        std::span<float> ms = slot.m.mut();
        std::span<float> vs = slot.v.mut();
        std::span<const float> gd = g.data();
        for (size_t i = 0; i < w.size(); ++i) {
            const double gi = static_cast<double>(gd[i]);
            const double mi = b1 * static_cast<double>(ms[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(vs[i]) + (1.0 - b2) * gi * gi;
            ms[i] = static_cast<float>(mi);
            vs[i] = static_cast<float>(vi);
            const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
            w[i] = static_cast<float>(static_cast<double>(w[i]) - update);
        }
    }

    const TrainConfig& cfg_;
    int64_t t_ = 0;
    std::unordered_map<std::string, AdamSlot> state_;
};

// One epoch's training blocks: entries in shuffled order, joined by eos, cut
// into chunks of seq_len+1 tokens. A chunk shorter than 2 tokens cannot form
// an (input, target) pair and is dropped; only the final chunk can be short.
std::vector<std::vector<int32_t>> make_blocks(const std::vector<std::vector<int32_t>>& tokenized,
                                              std::span<const int64_t> order, int64_t seq_len,
                                              int32_t eos_id) {
    std::vector<int32_t> stream;
    for (int64_t i : order) {
        const std::vector<int32_t>& t = tokenized[static_cast<size_t>(i)];
        stream.insert(stream.end(), t.begin(), t.end());
        stream.push_back(eos_id);
    }
    std::vector<std::vector<int32_t>> blocks;
    const int64_t chunk = seq_len + 1;
    for (size_t off = 0; off < stream.size(); off += static_cast<size_t>(chunk)) {
        const size_t len = std::min(static_cast<size_t>(chunk), stream.size() - off);
        if (len < 2) continue;
        blocks.emplace_back(stream.begin() + static_cast<int64_t>(off),
                            stream.begin() + static_cast<int64_t>(off + len));
    }
    return blocks;
}

void axpy(Tensor& acc, double w, const Tensor& g) {
    if (acc.numel() == 0) acc = Tensor::zeros(g.shape());
    std::span<float> a = acc.mut();
    std::span<const float> b = g.data();
    for (size_t i = 0; i < a.size(); ++i) {
        a[i] = static_cast<float>(static_cast<double>(a[i]) + w * static_cast<double>(b[i]));
    }
}

}  // namespace

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "adam") return OptimizerKind::adam;
    fail(ErrorClass::config, "unknown optimizer '" + name + "' (expected sgd or adam)");
}

const char* optimizer_name(OptimizerKind k) {
    return k == OptimizerKind::sgd ? "sgd" : "adam";
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0f) || !std::isfinite(learning_rate)) {
        fail(ErrorClass::config, "learning rate must be finite and >= 0");
    }
    if (batch_size < 1) fail(ErrorClass::config, "batch size must be at least 1");
    if (seq_len < 2) fail(ErrorClass::config, "training seq_len must be at least 2");
    if (max_epochs < 1) fail(ErrorClass::config, "max epochs must be at least 1");
    if (checkpoint_every < 0) fail(ErrorClass::config, "checkpoint interval must be >= 0");
    if (target_perplexity && !(*target_perplexity > 0.0f)) {
        fail(ErrorClass::config, "target perplexity must be positive");
    }
}

TrainHistory train(ModelBundle& m, const std::vector<std::string>& dataset,
                   const TrainConfig& cfg, const std::vector<std::string>& eval_set) {
    cfg.validate();
    if (dataset.empty()) fail(ErrorClass::config, "training dataset is empty");
    if (eval_set.empty()) fail(ErrorClass::config, "evaluation set is empty");
    if (cfg.seq_len > m.config.max_seq) {
        fail(ErrorClass::config, "training seq_len " + std::to_string(cfg.seq_len) +
                                     " exceeds max_seq " + std::to_string(m.config.max_seq));
    }

    std::vector<std::vector<int32_t>> tokenized;
    tokenized.reserve(dataset.size());
    for (const std::string& entry : dataset) tokenized.push_back(m.tokenizer.encode(entry));

    std::vector<int64_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);

    Rng rng(cfg.seed);
    Optimizer optimizer(cfg);
    TrainHistory history;

    for (int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(std::span<int64_t>(order));
        const std::vector<std::vector<int32_t>> blocks =
            make_blocks(tokenized, order, cfg.seq_len, BpeTokenizer::eos_id);
        if (blocks.empty()) {
            fail(ErrorClass::config, "dataset too short to form a single training block");
        }

        double epoch_nll = 0.0;
        int64_t epoch_positions = 0;
        for (size_t batch_start = 0, batch_no = 1; batch_start < blocks.size();
             batch_start += static_cast<size_t>(cfg.batch_size), ++batch_no) {
            const size_t batch_end =
                std::min(blocks.size(), batch_start + static_cast<size_t>(cfg.batch_size));
            int64_t batch_positions = 0;
            for (size_t b = batch_start; b < batch_end; ++b) {
                batch_positions += static_cast<int64_t>(blocks[b].size()) - 1;
            }

            std::unordered_map<std::string, Tensor> grads;
            try {
                for (size_t b = batch_start; b < batch_end; ++b) {
                    const std::vector<int32_t>& block = blocks[b];
                    const int64_t positions = static_cast<int64_t>(block.size()) - 1;
                    Tape tape;
                    const TapeRun run = forward_on_tape(
                        tape, m, std::span<const int32_t>(block.data(), block.size() - 1));
                    const Tape::Id loss = tape.softmax_cross_entropy(
                        run.logits, std::vector<int32_t>(block.begin() + 1, block.end()));
                    const float block_loss = tape.value(loss).data()[0];
                    if (!std::isfinite(block_loss)) {
                        fail(ErrorClass::numeric, "non-finite training loss");
                    }
                    tape.backward(loss);
                    const double w =
                        static_cast<double>(positions) / static_cast<double>(batch_positions);
                    for (const auto& [name, id] : run.params) {
                        if (tape.has_grad(id)) axpy(grads[name], w, tape.grad(id));
                    }
                    epoch_nll += static_cast<double>(block_loss) * static_cast<double>(positions);
                    epoch_positions += positions;
                }
            } catch (const Error& e) {
                if (e.cls() == ErrorClass::numeric) {
                    fail(ErrorClass::numeric, "training aborted at epoch " + std::to_string(epoch) +
                                                  ", batch " + std::to_string(batch_no) + ": " +
                                                  e.what());
                }
                throw;
            }
            optimizer.step(m, grads);
        }

        EpochStats stats;
        stats.loss = epoch_nll / static_cast<double>(epoch_positions);
        stats.perplexity = perplexity(m, eval_set, cfg.seq_len).value;
        history.epochs.push_back(stats);

        const bool recovered = cfg.target_perplexity && stats.perplexity <= *cfg.target_perplexity;
        if (!cfg.checkpoint_path.empty() &&
            (recovered || (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0))) {
            save_model(m, cfg.checkpoint_path);
        }
        if (recovered) {
            history.recovery_epochs = epoch;
            break;
        }
    }
    return history;
}

float recovery_target(const ModelBundle& base, const std::vector<std::string>& eval_set,
                      int64_t seq_len) {
    return perplexity(base, eval_set, seq_len).value;
}

std::string TrainHistory::to_csv() const {
    std::ostringstream s;
    s << "epoch,loss,perplexity\n";
    s.precision(9);
    for (size_t i = 0; i < epochs.size(); ++i) {
        s << (i + 1) << "," << epochs[i].loss << "," << epochs[i].perplexity << "\n";
    }
    return s.str();
}

std::string TrainHistory::to_json_string() const {
    nlohmann::json j;
    j["version"] = 1;
    nlohmann::json rows = nlohmann::json::array();
    for (size_t i = 0; i < epochs.size(); ++i) {
        rows.push_back({{"epoch", i + 1}, {"loss", epochs[i].loss}, {"perplexity", epochs[i].perplexity}});
    }
    j["epochs"] = std::move(rows);
    if (recovery_epochs) {
        j["recovery_epochs"] = *recovery_epochs;
    } else {
        j["recovery_epochs"] = nullptr;
    }
    return j.dump(2);
}

void TrainHistory::save_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) fail(ErrorClass::io, "cannot write history " + path);
    f << to_csv();
    if (!f) fail(ErrorClass::io, "failed writing history " + path);
}

}  // namespace minigpt
