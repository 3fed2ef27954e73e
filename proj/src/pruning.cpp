#include "minigpt/pruning.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "minigpt/checkpoint.hpp"
#include "json.hpp"

namespace minigpt {

namespace {

using ordered_json = nlohmann::ordered_json;

const SiteStats* find_site(const StatsReport& stats, const std::string& name) {
    for (const SiteStats& s : stats.sites) {
        if (s.site == name) return &s;
    }
    return nullptr;
}

// Layer sites must exist for consecutive indices 0..n-1.
CriterionPlan plan_by_site(const StatsReport& stats, float eps, const std::string& site_suffix) {
    if (!(eps >= 0.0f)) fail(ErrorClass::config, "pruning threshold must be non-negative");
    CriterionPlan plan;
    for (int64_t layer = 0;; ++layer) {
        const std::string name = "layers." + std::to_string(layer) + "." + site_suffix;
        const SiteStats* s = find_site(stats, name);
        if (s == nullptr) {
            if (layer == 0) fail(ErrorClass::format, "stats report has no site " + name);
            break;
        }
        std::vector<uint8_t> droppable(static_cast<size_t>(s->width), 0);
        for (int64_t j = 0; j < s->width; ++j) {
            if (s->m[static_cast<size_t>(j)] < eps) droppable[static_cast<size_t>(j)] = 1;
        }
        plan.droppable.push_back(std::move(droppable));
    }
    return plan;
}

int64_t predict_params(const ModelConfig& cfg, const std::vector<LayerPlan>& layers, int64_t kept_tokens) {
    const int64_t d = cfg.d_model;
    int64_t count = kept_tokens * d;  // token_embedding
    count += cfg.max_seq * d;         // pos_embedding
    for (const LayerPlan& l : layers) {
        const auto k = static_cast<int64_t>(l.keep_hidden.size());
        count += 2 * d;                // ln1
        count += 4 * (d * d + d);      // attention projections
        count += 2 * d;                // ln2
        count += d * k + k;            // mlp_in
        count += k * d + d;            // mlp_out
    }
    count += 2 * d;  // final norm
    if (!cfg.tie_lm_head) count += d * kept_tokens + kept_tokens;
    return count;
}

Tensor keep_rows(const Tensor& t, const std::vector<int64_t>& keep) {
    const int64_t cols = t.dim(1);
    Tensor out = Tensor::zeros({static_cast<int64_t>(keep.size()), cols});
    for (size_t r = 0; r < keep.size(); ++r) {
        for (int64_t c = 0; c < cols; ++c) out.at(static_cast<int64_t>(r), c) = t.at(keep[r], c);
    }
    return out;
}

Tensor keep_cols(const Tensor& t, const std::vector<int64_t>& keep) {
    const int64_t rows = t.dim(0);
    Tensor out = Tensor::zeros({rows, static_cast<int64_t>(keep.size())});
    for (int64_t r = 0; r < rows; ++r) {
        for (size_t c = 0; c < keep.size(); ++c) out.at(r, static_cast<int64_t>(c)) = t.at(r, keep[c]);
    }
    return out;
}

Tensor keep_entries(const Tensor& t, const std::vector<int64_t>& keep) {
    Tensor out = Tensor::zeros({static_cast<int64_t>(keep.size())});
    for (size_t i = 0; i < keep.size(); ++i) {
        out.mut()[i] = t.data()[static_cast<size_t>(keep[i])];
    }
    return out;
}

void check_sorted_unique(const std::vector<int64_t>& v, int64_t limit, const std::string& what) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (v[i] < 0 || v[i] >= limit) {
            fail(ErrorClass::config, what + " index " + std::to_string(v[i]) + " out of range [0, " +
                                         std::to_string(limit) + ")");
        }
        if (i > 0 && v[i] <= v[i - 1]) fail(ErrorClass::config, what + " must be sorted and unique");
    }
}

}  // namespace

CriterionPlan plan_linear(const StatsReport& stats, float eps) {
    return plan_by_site(stats, eps, "mlp_in.output");
}

CriterionPlan plan_activation(const StatsReport& stats, float eps) {
    return plan_by_site(stats, eps, "act.output");
}

std::vector<int32_t> plan_embedding(const std::vector<int64_t>& freq, int64_t min_count) {
    if (min_count < 0) fail(ErrorClass::config, "min_token_count must be non-negative");
    std::vector<int32_t> keep;
    for (size_t id = 0; id < freq.size(); ++id) {
        const bool special = id < static_cast<size_t>(BpeTokenizer::num_specials);
        if (special || freq[id] > min_count) keep.push_back(static_cast<int32_t>(id));
    }
    return keep;
}

PrunePlan build_plan(const ModelBundle& m, const StatsReport& stats, const PlanOptions& options) {
    const std::string fingerprint = model_fingerprint(m);
    if (stats.fingerprint != fingerprint) {
        fail(ErrorClass::fingerprint,
             "stats were computed on checkpoint " + stats.fingerprint + ", not on " + fingerprint);
    }
    if (static_cast<int64_t>(stats.token_freq.size()) != m.config.vocab_size) {
        fail(ErrorClass::dimension, "stats token_freq covers " + std::to_string(stats.token_freq.size()) +
                                        " ids, model vocab is " + std::to_string(m.config.vocab_size));
    }

    CriterionPlan linear;
    CriterionPlan act;
    if (m.config.n_layers > 0) {
        linear = plan_linear(stats, options.eps_linear);
        act = plan_activation(stats, options.eps_act);
    }
    if (static_cast<int64_t>(linear.droppable.size()) != m.config.n_layers ||
        static_cast<int64_t>(act.droppable.size()) != m.config.n_layers) {
        fail(ErrorClass::dimension, "stats report does not cover every model layer");
    }

    PrunePlan plan;
    plan.fingerprint = fingerprint;
    plan.eps_linear = options.eps_linear;
    plan.eps_act = options.eps_act;
    plan.min_token_count = options.min_token_count;
    plan.prune_embeddings = options.prune_embeddings;

    for (int64_t layer = 0; layer < m.config.n_layers; ++layer) {
        const auto& lin_mask = linear.droppable[static_cast<size_t>(layer)];
        const auto& act_mask = act.droppable[static_cast<size_t>(layer)];
        const int64_t width = m.config.d_ff[static_cast<size_t>(layer)];
        if (static_cast<int64_t>(lin_mask.size()) != width || static_cast<int64_t>(act_mask.size()) != width) {
            fail(ErrorClass::dimension, "stats width does not match d_ff of layer " + std::to_string(layer));
        }

        LayerPlan lp;
        for (int64_t j = 0; j < width; ++j) {
            const bool by_linear = lin_mask[static_cast<size_t>(j)] != 0;
            const bool by_act = act_mask[static_cast<size_t>(j)] != 0;
            if (by_linear || by_act) {
                lp.dropped.push_back(DroppedUnit{j, by_linear, by_linear, by_act});
            } else {
                lp.keep_hidden.push_back(j);
            }
        }
        if (lp.keep_hidden.empty()) {
            // keep the unit with the strongest post-activation signal
            const SiteStats* s = find_site(stats, "layers." + std::to_string(layer) + ".act.output");
            int64_t best = 0;
            for (int64_t j = 1; j < width; ++j) {
                if (s->m[static_cast<size_t>(j)] > s->m[static_cast<size_t>(best)]) best = j;
            }
            lp.keep_hidden.push_back(best);
            lp.dropped.erase(std::find_if(lp.dropped.begin(), lp.dropped.end(),
                                          [best](const DroppedUnit& u) { return u.unit == best; }));
        }
        plan.layers.push_back(std::move(lp));
    }

    if (options.prune_embeddings) {
        plan.keep_tokens = plan_embedding(stats.token_freq, options.min_token_count);
        std::vector<uint8_t> mask(static_cast<size_t>(m.config.vocab_size), 0);
        for (int32_t id : plan.keep_tokens) mask[static_cast<size_t>(id)] = 1;
        m.tokenizer.close_under_merges(mask);
        plan.keep_tokens.clear();
        for (size_t id = 0; id < mask.size(); ++id) {
            if (mask[id]) plan.keep_tokens.push_back(static_cast<int32_t>(id));
        }
    } else {
        plan.keep_tokens.resize(static_cast<size_t>(m.config.vocab_size));
        for (size_t id = 0; id < plan.keep_tokens.size(); ++id) plan.keep_tokens[id] = static_cast<int32_t>(id);
    }

    plan.predicted_param_count =
        predict_params(m.config, plan.layers, static_cast<int64_t>(plan.keep_tokens.size()));
    return plan;
}

PruneResult merge_and_apply(const ModelBundle& m, const PrunePlan& plan) {
    const std::string fingerprint = model_fingerprint(m);
    if (plan.fingerprint != fingerprint) {
        fail(ErrorClass::fingerprint,
             "plan was built for checkpoint " + plan.fingerprint + ", not for " + fingerprint);
    }
    if (static_cast<int64_t>(plan.layers.size()) != m.config.n_layers) {
        fail(ErrorClass::dimension, "plan covers " + std::to_string(plan.layers.size()) + " layers, model has " +
                                        std::to_string(m.config.n_layers));
    }
    for (int64_t layer = 0; layer < m.config.n_layers; ++layer) {
        const LayerPlan& lp = plan.layers[static_cast<size_t>(layer)];
        if (lp.keep_hidden.empty()) {
            fail(ErrorClass::config, "plan keeps no hidden units in layer " + std::to_string(layer));
        }
        check_sorted_unique(lp.keep_hidden, m.config.d_ff[static_cast<size_t>(layer)],
                            "plan keep_hidden of layer " + std::to_string(layer));
    }
    std::vector<int64_t> keep_tokens64(plan.keep_tokens.begin(), plan.keep_tokens.end());
    check_sorted_unique(keep_tokens64, m.config.vocab_size, "plan keep_tokens");
    for (int32_t s = 0; s < BpeTokenizer::num_specials; ++s) {
        if (!std::binary_search(plan.keep_tokens.begin(), plan.keep_tokens.end(), s)) {
            fail(ErrorClass::config, "plan keep_tokens must retain the special tokens");
        }
    }

    std::vector<uint8_t> mask(static_cast<size_t>(m.config.vocab_size), 0);
    for (int32_t id : plan.keep_tokens) mask[static_cast<size_t>(id)] = 1;
    auto [tokenizer, remap] = m.tokenizer.prune_vocab(mask);
    if (remap.new_to_old.size() != plan.keep_tokens.size()) {
        fail(ErrorClass::config, "plan keep_tokens is not closed under tokenizer merges");
    }

    ModelConfig cfg = m.config;
    cfg.vocab_size = static_cast<int64_t>(plan.keep_tokens.size());
    for (size_t layer = 0; layer < plan.layers.size(); ++layer) {
        cfg.d_ff[layer] = static_cast<int64_t>(plan.layers[layer].keep_hidden.size());
    }

    ModelBundle out = allocate_bundle(cfg, std::move(tokenizer));
    out.pos_embedding = m.pos_embedding;
    out.final_ln_gain = m.final_ln_gain;
    out.final_ln_bias = m.final_ln_bias;
    out.token_embedding = keep_rows(m.token_embedding, keep_tokens64);
    if (!cfg.tie_lm_head) {
        out.lm_head_w = keep_cols(m.lm_head_w, keep_tokens64);
        out.lm_head_b = keep_entries(m.lm_head_b, keep_tokens64);
    }
    for (size_t layer = 0; layer < plan.layers.size(); ++layer) {
        const LayerWeights& src = m.layers[layer];
        LayerWeights& dst = out.layers[layer];
        const std::vector<int64_t>& keep = plan.layers[layer].keep_hidden;
        dst = src;
        dst.mlp_in_w = keep_cols(src.mlp_in_w, keep);
        dst.mlp_in_b = keep_entries(src.mlp_in_b, keep);
        dst.mlp_out_w = keep_rows(src.mlp_out_w, keep);
    }
    out.validate();

    if (param_count(out) != plan.predicted_param_count) {
        fail(ErrorClass::config, "plan predicts " + std::to_string(plan.predicted_param_count) +
                                     " parameters, pruned model has " + std::to_string(param_count(out)));
    }
    return PruneResult{std::move(out), std::move(remap)};
}

double relative_size(const ModelBundle& base, const ModelBundle& pruned) {
    return 100.0 * static_cast<double>(param_count(pruned)) / static_cast<double>(param_count(base));
}

std::string PrunePlan::to_json_string() const {
    ordered_json j;
    j["version"] = 1;
    j["fingerprint"] = fingerprint;
    j["thresholds"] =
        ordered_json{{"eps_linear", eps_linear}, {"eps_act", eps_act}, {"min_token_count", min_token_count}};
    j["prune_embeddings"] = prune_embeddings;
    ordered_json layers_json = ordered_json::array();
    for (const LayerPlan& l : layers) {
        ordered_json lj;
        lj["keep_hidden"] = l.keep_hidden;
        ordered_json dropped = ordered_json::array();
        for (const DroppedUnit& u : l.dropped) {
            ordered_json criteria = ordered_json::array();
            if (u.linear_in) criteria.push_back("linear_in");
            if (u.linear_out) criteria.push_back("linear_out");
            if (u.activation) criteria.push_back("activation");
            dropped.push_back(ordered_json{{"unit", u.unit}, {"criteria", std::move(criteria)}});
        }
        lj["dropped"] = std::move(dropped);
        layers_json.push_back(std::move(lj));
    }
    j["layers"] = std::move(layers_json);
    j["keep_tokens"] = keep_tokens;
    j["predicted_param_count"] = predicted_param_count;
    return j.dump();
}

PrunePlan PrunePlan::from_json_string(const std::string& text) {
    ordered_json j = ordered_json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail(ErrorClass::format, "prune plan is not valid JSON");
    if (j.value("version", -1) != 1) fail(ErrorClass::format, "unsupported prune plan version");
    for (const char* key : {"fingerprint", "thresholds", "prune_embeddings", "layers", "keep_tokens",
                            "predicted_param_count"}) {
        if (!j.contains(key)) fail(ErrorClass::format, std::string("prune plan is missing ") + key);
    }

    PrunePlan p;
    p.fingerprint = j["fingerprint"].get<std::string>();
    const auto& th = j["thresholds"];
    if (!th.is_object() || !th.contains("eps_linear") || !th.contains("eps_act") ||
        !th.contains("min_token_count")) {
        fail(ErrorClass::format, "prune plan thresholds are incomplete");
    }
    p.eps_linear = th["eps_linear"].get<float>();
    p.eps_act = th["eps_act"].get<float>();
    p.min_token_count = th["min_token_count"].get<int64_t>();
    if (!(p.eps_linear >= 0.0f) || !(p.eps_act >= 0.0f) || p.min_token_count < 0) {
        fail(ErrorClass::format, "prune plan thresholds must be non-negative");
    }
    p.prune_embeddings = j["prune_embeddings"].get<bool>();

    if (!j["layers"].is_array()) fail(ErrorClass::format, "prune plan layers must be an array");
    for (const auto& lj : j["layers"]) {
        LayerPlan l;
        if (!lj.is_object() || !lj.contains("keep_hidden") || !lj.contains("dropped")) {
            fail(ErrorClass::format, "prune plan layer entry is incomplete");
        }
        l.keep_hidden = lj["keep_hidden"].get<std::vector<int64_t>>();
        if (l.keep_hidden.empty()) fail(ErrorClass::format, "prune plan keeps no hidden units in a layer");
        for (const auto& uj : lj["dropped"]) {
            DroppedUnit u;
            u.unit = uj.value("unit", int64_t(-1));
            if (u.unit < 0 || !uj.contains("criteria") || !uj["criteria"].is_array()) {
                fail(ErrorClass::format, "prune plan dropped entry is malformed");
            }
            for (const auto& c : uj["criteria"]) {
                const std::string name = c.get<std::string>();
                if (name == "linear_in") {
                    u.linear_in = true;
                } else if (name == "linear_out") {
                    u.linear_out = true;
                } else if (name == "activation") {
                    u.activation = true;
                } else {
                    fail(ErrorClass::format, "prune plan has unknown criterion " + name);
                }
            }
            l.dropped.push_back(u);
        }
        p.layers.push_back(std::move(l));
    }
    p.keep_tokens = j["keep_tokens"].get<std::vector<int32_t>>();
    p.predicted_param_count = j["predicted_param_count"].get<int64_t>();
    return p;
}

void PrunePlan::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f.good()) fail(ErrorClass::io, "cannot open " + path + " for writing");
    f << to_json_string();
    f.flush();
    if (!f.good()) fail(ErrorClass::io, "failed writing " + path);
}

PrunePlan PrunePlan::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) fail(ErrorClass::io, "cannot open " + path + " for reading");
    std::ostringstream buf;
    buf << f.rdbuf();
    return from_json_string(buf.str());
}

}  // namespace minigpt
