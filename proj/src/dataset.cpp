#include "minigpt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "minigpt/common.hpp"

namespace minigpt {

std::vector<std::string> load_text_entries(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorClass::io, "cannot open dataset " + path);
    std::vector<std::string> entries;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) entries.push_back(line);
    }
    return entries;
}

SplitResult split_dataset(const std::vector<std::string>& entries, double held_out_fraction,
                          uint64_t seed) {
    const int64_t n = static_cast<int64_t>(entries.size());
    if (n < 2) fail(ErrorClass::config, "dataset needs at least 2 entries to split");
    if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0)) {
        fail(ErrorClass::config, "held-out fraction must be inside (0, 1)");
    }
    int64_t k = std::llround(static_cast<double>(n) * held_out_fraction);
    k = std::clamp<int64_t>(k, 1, n - 1);

    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span<int64_t>(order));

    std::vector<int64_t> held(order.begin(), order.begin() + k);
    std::vector<int64_t> rest(order.begin() + k, order.end());
    std::sort(held.begin(), held.end());
    std::sort(rest.begin(), rest.end());

    SplitResult r;
    for (int64_t i : held) r.held_out.push_back(entries[static_cast<size_t>(i)]);
    for (int64_t i : rest) r.train.push_back(entries[static_cast<size_t>(i)]);
    return r;
}

}  // namespace minigpt
