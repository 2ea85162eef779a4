#include "mrad/error.hpp"
#include "mrad/scoring.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace mrad;

namespace {

AnomalyMap map_of(std::uint32_t h, std::uint32_t w, std::vector<float> v)
{
    AnomalyMap m(h, w);
    m.scores = std::move(v);
    return m;
}

} // namespace

TEST_CASE("upsample constant and single-cell grids")
{
    const std::vector<double> c(6, 0.4);
    const auto m = scoring::upsample_map(c, 2, 3, 7, 11);
    CHECK(m.height == 7);
    CHECK(m.width == 11);
    for (float v : m.scores)
        CHECK(v == 0.4f);

    const std::vector<double> one{0.73};
    for (float v : scoring::upsample_map(one, 1, 1, 5, 3).scores)
        CHECK(v == 0.73f);

    CHECK_THROWS_AS(scoring::upsample_map(one, 1, 1, 0, 3), Error);
    CHECK_THROWS_AS(scoring::upsample_map(c, 2, 2, 4, 4), Error);
}

TEST_CASE("upsample 2x2 to 4x4 uses cell-centre alignment")
{
    const std::vector<double> g{0, 1, 0, 1};
    const auto m = scoring::upsample_map(g, 2, 2, 4, 4);
    // column centres sit at grid coordinates -0.25, 0.25, 0.75, 1.25 (clamped)
    const std::vector<float> row{0.0f, 0.25f, 0.75f, 1.0f};
    for (std::uint32_t r = 0; r < 4; ++r)
        for (std::uint32_t c = 0; c < 4; ++c) {
            CHECK(m.at(r, c) == row[c]);
            CHECK(m.at(r, c) == static_cast<float>(oracle::bilinear(g, 2, 2, 4, 4, r, c)));
        }
}

TEST_CASE("upsample matches the bilinear oracle and keeps bounds")
{
    oracle::Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t gh = 1 + rng() % 6, gw = 1 + rng() % 6;
        const std::size_t h = gh + rng() % 30, w = gw + rng() % 30;
        std::vector<double> g(gh * gw);
        for (double& v : g)
            v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const auto m = scoring::upsample_map(g, static_cast<std::uint32_t>(gh), static_cast<std::uint32_t>(gw),
                                             static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w));
        const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const float v = m.scores[y * w + x];
                CHECK(std::abs(v - oracle::bilinear(g, gh, gw, h, w, y, x)) < 1e-6);
                CHECK(v >= static_cast<float>(*lo));
                CHECK(v <= static_cast<float>(*hi));
            }
    }
}

TEST_CASE("smoothing")
{
    const auto m = map_of(3, 3, {0, 0, 0, 0, 1, 0, 0, 0, 0});
    CHECK(scoring::smooth_map(m, 0.0) == m);
    const auto s = scoring::smooth_map(m, 1.0);
    CHECK(s.at(1, 1) < 1.0f);
    CHECK(s.at(0, 0) > 0.0f);
    CHECK(s.at(0, 0) == doctest::Approx(s.at(2, 2)));
    CHECK(s.at(0, 1) == doctest::Approx(s.at(1, 0)));
    const auto c = scoring::smooth_map(map_of(2, 4, std::vector<float>(8, 0.6f)), 2.0);
    for (float v : c.scores)
        CHECK(v == doctest::Approx(0.6f).epsilon(1e-6));
}

TEST_CASE("top-k mean")
{
    const auto m = map_of(2, 2, {0.9f, 0.5f, 0.1f, 0.3f});
    CHECK(scoring::topk_mean(m, 2) == doctest::Approx(0.7).epsilon(1e-7));
    CHECK(scoring::topk_mean(m, 1) == static_cast<double>(0.9f));
    CHECK(scoring::topk_mean(m, 4) == doctest::Approx((0.9 + 0.5 + 0.1 + 0.3) / 4).epsilon(1e-7));
    CHECK_THROWS_AS(scoring::topk_mean(m, 0), Error);
    CHECK_THROWS_AS(scoring::topk_mean(m, 5), Error);

    CHECK(scoring::topk_count(0.01, 518 * 518) == 2683);
    CHECK(scoring::topk_count(0.01, 10) == 1);
    CHECK(scoring::topk_count(1.0, 37) == 37);
    CHECK(scoring::topk_count(0.01, 250) == 3); // 2.5 rounds away from zero

    oracle::Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        AnomalyMap r(5, 7);
        for (float& v : r.scores)
            v = static_cast<float>(std::uniform_real_distribution<double>(0, 1)(rng));
        const std::size_t k = 1 + rng() % 35;
        auto sorted = r.scores;
        std::sort(sorted.rbegin(), sorted.rend());
        long double ref = 0;
        for (std::size_t i = 0; i < k; ++i)
            ref += sorted[i];
        const double got = scoring::topk_mean(r, k);
        CHECK(std::abs(got - static_cast<double>(ref / k)) < 1e-12);
        // raising a value never lowers the result
        AnomalyMap up = r;
        up.scores[rng() % 35] += 0.1f;
        CHECK(scoring::topk_mean(up, k) >= got);
    }
}

TEST_CASE("image scores")
{
    RetrievalParams p;
    const AnomalyMap zeros(10, 10, 0.0f), ones(10, 10, 1.0f);
    CHECK(scoring::image_score({1.0, 0.0}, zeros, p) == 0.0);
    CHECK(scoring::image_score({0.0, 1.0}, ones, p) == 2.0);

    // 10x10 map, k = 1: top-1 value 0.25
    AnomalyMap m(10, 10, 0.1f);
    m.at(3, 4) = 0.25f;
    CHECK(scoring::image_score({0.6, 0.4}, m, p) == doctest::Approx(0.65).epsilon(1e-7));
    CHECK(scoring::image_score({0.5, 0.5}, m, p) > scoring::image_score({0.6, 0.4}, m, p));

    CHECK(scoring::image_score_pixel_only(zeros, p) == 0.0);
    AnomalyMap spike(10, 10, 0.0f);
    spike.at(9, 9) = 1.0f;
    CHECK(scoring::image_score_pixel_only(spike, p) == 1.0);
    CHECK(scoring::image_score_pixel_only(AnomalyMap(10, 10, 0.3f), p) == static_cast<double>(0.3f));

    p.topk_fraction = 1.0;
    const auto mean = std::accumulate(m.scores.begin(), m.scores.end(), 0.0) / 100.0;
    CHECK(scoring::image_score_pixel_only(m, p) == doctest::Approx(mean).epsilon(1e-12));
}
