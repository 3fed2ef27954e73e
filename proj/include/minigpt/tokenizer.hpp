#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "minigpt/common.hpp"

namespace minigpt {

// Pair-merge rule: adjacent tokens (left, right) rewrite to token `result`.
struct MergeRule {
    int32_t left = -1;
    int32_t right = -1;
    int32_t result = -1;
};

// Dense re-numbering of a pruned vocabulary. Dropped ids map to -1.
struct TokenRemap {
    std::vector<int32_t> old_to_new;
    std::vector<int32_t> new_to_old;
};

// Byte-level BPE tokenizer. Ids 0..2 are the specials <pad>, <unk>, <eos>;
// the 256 single-byte tokens follow, then learned merges. After vocabulary
// pruning the single-byte coverage may be partial and encode falls back to
// <unk> for uncovered bytes.
class BpeTokenizer {
public:
    static constexpr int32_t pad_id = 0;
    static constexpr int32_t unk_id = 1;
    static constexpr int32_t eos_id = 2;
    static constexpr int32_t num_specials = 3;
    static constexpr int32_t base_vocab_size = num_specials + 256;

    // Specials plus the full byte alphabet, no merges.
    static BpeTokenizer byte_level();

    // Greedy pair-merge training until `vocab_size` tokens exist or no pair
    // occurs twice. Ties prefer the lexicographically smaller pair.
    static BpeTokenizer train(const std::vector<std::string>& corpus, int32_t vocab_size);

    int32_t vocab_size() const { return static_cast<int32_t>(vocab_.size()); }
    const std::string& token_bytes(int32_t id) const;
    const std::vector<MergeRule>& merges() const { return merges_; }

    std::vector<int32_t> encode(std::string_view text) const;
    std::string decode(const std::vector<int32_t>& ids) const;

    // Occurrences of each token id across encode() of every entry.
    std::vector<int64_t> token_frequency(const std::vector<std::string>& dataset) const;

    // Extends `keep` so that every kept merge result also keeps its
    // constituents; otherwise the rebuilt tokenizer could not reproduce the
    // kept token during encode.
    void close_under_merges(std::vector<uint8_t>& keep) const;

    // Rebuilds the tokenizer over the kept ids (specials forced, constituents
    // closed) with dense renumbering.
    std::pair<BpeTokenizer, TokenRemap> prune_vocab(std::vector<uint8_t> keep) const;

    std::string to_json_string() const;
    static BpeTokenizer from_json_string(const std::string& text);
    void save(const std::string& path) const;
    static BpeTokenizer load(const std::string& path);

private:
    void rebuild_byte_table();

    std::vector<std::string> vocab_;
    std::vector<MergeRule> merges_;
    std::array<int32_t, 256> byte_to_id_{};
};

}  // namespace minigpt
