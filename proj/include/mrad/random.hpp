#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace mrad {

using Rng = std::mt19937_64;

// Unbiased draw from [0, bound). Written out by hand so results do not depend
// on the standard library's distribution implementation.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t bound)
{
    const std::uint64_t limit = Rng::max() - (Rng::max() % bound + 1) % bound;
    std::uint64_t x;
    do {
        x = rng();
    } while (x > limit);
    return x % bound;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng)
{
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

} // namespace mrad
