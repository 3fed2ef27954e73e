#include "minigpt/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace minigpt {

namespace {

using ordered_json = nlohmann::ordered_json;

struct PairHash {
    size_t operator()(const std::pair<int32_t, int32_t>& p) const {
        return std::hash<uint64_t>()((static_cast<uint64_t>(static_cast<uint32_t>(p.first)) << 32) |
                                     static_cast<uint32_t>(p.second));
    }
};

// Left-to-right, non-overlapping rewrite of (left, right) -> result.
void apply_rule(std::vector<int32_t>& seq, const MergeRule& rule) {
    size_t w = 0;
    size_t r = 0;
    while (r < seq.size()) {
        if (r + 1 < seq.size() && seq[r] == rule.left && seq[r + 1] == rule.right) {
            seq[w++] = rule.result;
            r += 2;
        } else {
            seq[w++] = seq[r++];
        }
    }
    seq.resize(w);
}

ordered_json vocab_entry_json(const std::string& bytes) {
    if (is_valid_utf8(bytes)) {
        return ordered_json{{"s", bytes}};
    }
    return ordered_json{{"b", base64_encode(bytes)}};
}

std::string vocab_entry_bytes(const ordered_json& entry) {
    if (!entry.is_object() || entry.size() != 1) {
        fail(ErrorClass::format, "tokenizer vocab entry must be an object with one of \"s\" or \"b\"");
    }
    if (entry.contains("s")) {
        if (!entry["s"].is_string()) fail(ErrorClass::format, "tokenizer vocab entry \"s\" must be a string");
        return entry["s"].get<std::string>();
    }
    if (entry.contains("b")) {
        if (!entry["b"].is_string()) fail(ErrorClass::format, "tokenizer vocab entry \"b\" must be a string");
        return base64_decode(entry["b"].get<std::string>());
    }
    fail(ErrorClass::format, "tokenizer vocab entry must carry \"s\" or \"b\"");
}

}  // namespace

BpeTokenizer BpeTokenizer::byte_level() {
    BpeTokenizer t;
    t.vocab_.reserve(base_vocab_size);
    t.vocab_.push_back("<pad>");
    t.vocab_.push_back("<unk>");
    t.vocab_.push_back("<eos>");
    for (int b = 0; b < 256; ++b) {
        t.vocab_.push_back(std::string(1, static_cast<char>(static_cast<unsigned char>(b))));
    }
    t.rebuild_byte_table();
    return t;
}

void BpeTokenizer::rebuild_byte_table() {
    byte_to_id_.fill(-1);
    for (int32_t id = num_specials; id < vocab_size(); ++id) {
        const std::string& s = vocab_[static_cast<size_t>(id)];
        if (s.size() == 1) {
            const auto b = static_cast<unsigned char>(s[0]);
            if (byte_to_id_[b] != -1) {
                fail(ErrorClass::format, "tokenizer has duplicate single-byte tokens");
            }
            byte_to_id_[b] = id;
        }
    }
}

BpeTokenizer BpeTokenizer::train(const std::vector<std::string>& corpus, int32_t vocab_size) {
    if (vocab_size < base_vocab_size) {
        fail(ErrorClass::config, "tokenizer vocab_size must be at least " + std::to_string(base_vocab_size) +
                                     ", got " + std::to_string(vocab_size));
    }
    size_t total_bytes = 0;
    for (const std::string& entry : corpus) total_bytes += entry.size();
    if (total_bytes == 0) {
        fail(ErrorClass::config, "tokenizer training corpus is empty");
    }

    BpeTokenizer t = byte_level();
    std::vector<std::vector<int32_t>> seqs;
    seqs.reserve(corpus.size());
    for (const std::string& entry : corpus) {
        std::vector<int32_t> ids;
        ids.reserve(entry.size());
        for (char c : entry) ids.push_back(t.byte_to_id_[static_cast<unsigned char>(c)]);
        seqs.push_back(std::move(ids));
    }

    while (t.vocab_size() < vocab_size) {
        std::unordered_map<std::pair<int32_t, int32_t>, int64_t, PairHash> counts;
        for (const auto& seq : seqs) {
            for (size_t i = 0; i + 1 < seq.size(); ++i) {
                ++counts[{seq[i], seq[i + 1]}];
            }
        }

        bool found = false;
        std::pair<int32_t, int32_t> best{};
        int64_t best_count = 1;  // a pair must repeat to be worth a rule
        for (const auto& [pair, count] : counts) {
            if (count < best_count) continue;
            if (count == best_count) {
                if (!found) continue;
                const std::string& bl = t.vocab_[static_cast<size_t>(best.first)];
                const std::string& br = t.vocab_[static_cast<size_t>(best.second)];
                const std::string& cl = t.vocab_[static_cast<size_t>(pair.first)];
                const std::string& cr = t.vocab_[static_cast<size_t>(pair.second)];
                if (std::tie(cl, cr) >= std::tie(bl, br)) continue;
            }
            best = pair;
            best_count = count;
            found = true;
        }
        if (!found) break;

        MergeRule rule{best.first, best.second, t.vocab_size()};
        t.vocab_.push_back(t.vocab_[static_cast<size_t>(rule.left)] + t.vocab_[static_cast<size_t>(rule.right)]);
        t.merges_.push_back(rule);
        for (auto& seq : seqs) apply_rule(seq, rule);
    }
    return t;
}

const std::string& BpeTokenizer::token_bytes(int32_t id) const {
    if (id < 0 || id >= vocab_size()) {
        fail(ErrorClass::index, "token id " + std::to_string(id) + " out of range for vocab of " +
                                    std::to_string(vocab_size()));
    }
    return vocab_[static_cast<size_t>(id)];
}

std::vector<int32_t> BpeTokenizer::encode(std::string_view text) const {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (char c : text) {
        const int32_t id = byte_to_id_[static_cast<unsigned char>(c)];
        ids.push_back(id == -1 ? unk_id : id);
    }
    for (const MergeRule& rule : merges_) apply_rule(ids, rule);
    return ids;
}

std::string BpeTokenizer::decode(const std::vector<int32_t>& ids) const {
    std::string out;
    for (int32_t id : ids) out += token_bytes(id);
    return out;
}

std::vector<int64_t> BpeTokenizer::token_frequency(const std::vector<std::string>& dataset) const {
    std::vector<int64_t> counts(static_cast<size_t>(vocab_size()), 0);
    for (const std::string& entry : dataset) {
        for (int32_t id : encode(entry)) ++counts[static_cast<size_t>(id)];
    }
    return counts;
}

void BpeTokenizer::close_under_merges(std::vector<uint8_t>& keep) const {
    if (keep.size() != static_cast<size_t>(vocab_size())) {
        fail(ErrorClass::dimension, "keep mask size " + std::to_string(keep.size()) +
                                        " does not match vocab of " + std::to_string(vocab_size()));
    }
    // Constituents always have smaller ids than the result, so one reverse
    // pass settles transitive requirements.
    for (auto it = merges_.rbegin(); it != merges_.rend(); ++it) {
        if (keep[static_cast<size_t>(it->result)]) {
            keep[static_cast<size_t>(it->left)] = 1;
            keep[static_cast<size_t>(it->right)] = 1;
        }
    }
}

std::pair<BpeTokenizer, TokenRemap> BpeTokenizer::prune_vocab(std::vector<uint8_t> keep) const {
    if (keep.size() != static_cast<size_t>(vocab_size())) {
        fail(ErrorClass::dimension, "keep mask size " + std::to_string(keep.size()) +
                                        " does not match vocab of " + std::to_string(vocab_size()));
    }
    for (int32_t s = 0; s < num_specials; ++s) keep[static_cast<size_t>(s)] = 1;
    close_under_merges(keep);

    TokenRemap remap;
    remap.old_to_new.assign(keep.size(), -1);
    for (size_t old = 0; old < keep.size(); ++old) {
        if (keep[old]) {
            remap.old_to_new[old] = static_cast<int32_t>(remap.new_to_old.size());
            remap.new_to_old.push_back(static_cast<int32_t>(old));
        }
    }

    BpeTokenizer pruned;
    pruned.vocab_.reserve(remap.new_to_old.size());
    for (int32_t old : remap.new_to_old) pruned.vocab_.push_back(vocab_[static_cast<size_t>(old)]);
    for (const MergeRule& rule : merges_) {
        if (!keep[static_cast<size_t>(rule.result)]) continue;
        pruned.merges_.push_back(MergeRule{remap.old_to_new[static_cast<size_t>(rule.left)],
                                           remap.old_to_new[static_cast<size_t>(rule.right)],
                                           remap.old_to_new[static_cast<size_t>(rule.result)]});
    }
    pruned.rebuild_byte_table();
    return {std::move(pruned), std::move(remap)};
}

std::string BpeTokenizer::to_json_string() const {
    ordered_json j;
    j["version"] = 1;
    j["specials"] = ordered_json{{"pad", pad_id}, {"unk", unk_id}, {"eos", eos_id}};
    ordered_json vocab = ordered_json::array();
    for (const std::string& s : vocab_) vocab.push_back(vocab_entry_json(s));
    j["vocab"] = std::move(vocab);
    ordered_json merges = ordered_json::array();
    for (const MergeRule& m : merges_) merges.push_back(ordered_json::array({m.left, m.right, m.result}));
    j["merges"] = std::move(merges);
    return j.dump();
}

BpeTokenizer BpeTokenizer::from_json_string(const std::string& text) {
    ordered_json j = ordered_json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        fail(ErrorClass::format, "tokenizer file is not valid JSON");
    }
    if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != 1) {
        fail(ErrorClass::format, "unsupported tokenizer version");
    }
    if (!j.contains("specials") || !j.contains("vocab") || !j.contains("merges")) {
        fail(ErrorClass::format, "tokenizer file is missing a required field");
    }
    const auto& specials = j["specials"];
    if (!specials.is_object() || specials.value("pad", -1) != pad_id || specials.value("unk", -1) != unk_id ||
        specials.value("eos", -1) != eos_id) {
        fail(ErrorClass::format, "tokenizer specials must be pad=0, unk=1, eos=2");
    }
    if (!j["vocab"].is_array() || j["vocab"].size() < static_cast<size_t>(num_specials)) {
        fail(ErrorClass::format, "tokenizer vocab must list at least the special tokens");
    }

    BpeTokenizer t;
    for (const auto& entry : j["vocab"]) t.vocab_.push_back(vocab_entry_bytes(entry));
    if (t.vocab_[0] != "<pad>" || t.vocab_[1] != "<unk>" || t.vocab_[2] != "<eos>") {
        fail(ErrorClass::format, "tokenizer vocab must start with <pad>, <unk>, <eos>");
    }

    if (!j["merges"].is_array()) fail(ErrorClass::format, "tokenizer merges must be an array");
    for (const auto& entry : j["merges"]) {
        if (!entry.is_array() || entry.size() != 3 || !entry[0].is_number_integer() ||
            !entry[1].is_number_integer() || !entry[2].is_number_integer()) {
            fail(ErrorClass::format, "tokenizer merge rule must be [left, right, result]");
        }
        MergeRule m{entry[0].get<int32_t>(), entry[1].get<int32_t>(), entry[2].get<int32_t>()};
        const int32_t v = t.vocab_size();
        if (m.left < 0 || m.left >= v || m.right < 0 || m.right >= v || m.result < 0 || m.result >= v) {
            fail(ErrorClass::format, "tokenizer merge rule references an id outside the vocab");
        }
        if (t.vocab_[static_cast<size_t>(m.result)] !=
            t.vocab_[static_cast<size_t>(m.left)] + t.vocab_[static_cast<size_t>(m.right)]) {
            fail(ErrorClass::format, "tokenizer merge result does not match its constituents");
        }
        t.merges_.push_back(m);
    }
    t.rebuild_byte_table();
    return t;
}

void BpeTokenizer::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f.good()) fail(ErrorClass::io, "cannot open " + path + " for writing");
    f << to_json_string();
    f.flush();
    if (!f.good()) fail(ErrorClass::io, "failed writing " + path);
}

BpeTokenizer BpeTokenizer::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) fail(ErrorClass::io, "cannot open " + path + " for reading");
    std::ostringstream buf;
    buf << f.rdbuf();
    return from_json_string(buf.str());
}

}  // namespace minigpt
