#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace minigpt {

// UTF-8 text, one entry per line. Blank lines are dropped; a trailing
// carriage return is stripped so CRLF files behave like LF files.
std::vector<std::string> load_text_entries(const std::string& path);

struct SplitResult {
    std::vector<std::string> train;
    std::vector<std::string> held_out;
};

// Seeded random split. The held-out side gets round(n * fraction) entries,
// clamped so both sides stay non-empty; entries keep their original relative
// order within each side.
SplitResult split_dataset(const std::vector<std::string>& entries, double held_out_fraction,
                          uint64_t seed);

}  // namespace minigpt
