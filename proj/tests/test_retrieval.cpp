#include "mrad/error.hpp"
#include "mrad/membank.hpp"
#include "mrad/retrieval.hpp"
#include "mrad/synthetic.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace mrad;

namespace {

MatrixF to_f(const MatrixD& m)
{
    MatrixF out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows() * m.cols(); ++i)
        out.data()[i] = static_cast<float>(m.data()[i]);
    return out;
}

MatrixD to_d(const MatrixF& m)
{
    MatrixD out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows() * m.cols(); ++i)
        out.data()[i] = m.data()[i];
    return out;
}

MatrixD rows_of(std::initializer_list<std::vector<double>> rows)
{
    MatrixD m(rows.size(), rows.begin()->size());
    std::size_t r = 0;
    for (const auto& row : rows) {
        std::copy(row.begin(), row.end(), m.row(r).begin());
        ++r;
    }
    return m;
}

MatrixF values_of(std::initializer_list<int> anomalous)
{
    MatrixF v(anomalous.size(), 2);
    std::size_t r = 0;
    for (int a : anomalous) {
        v(r, a ? 1 : 0) = 1.0f;
        ++r;
    }
    return v;
}

// Bank with the given patch keys/values and a two-entry image level.
MemoryBank bank_with(const MatrixD& k_pat, const MatrixF& v_pat)
{
    MemoryBank b;
    b.d = k_pat.cols();
    b.k_pat = to_f(k_pat);
    b.v_pat = v_pat;
    b.k_cls = MatrixF(2, b.d);
    b.k_cls(0, 0) = 1.0f;
    b.k_cls(1, 1) = 1.0f;
    b.v_cls = values_of({0, 1});
    return b;
}

ImageRecord query_record(const MatrixD& patches, std::vector<float> cls)
{
    ImageRecord r;
    r.id = "q";
    r.cls_feature = std::move(cls);
    r.patch_features = to_f(patches);
    return r;
}

} // namespace

TEST_CASE("softmax retrieval closed forms")
{
    SUBCASE("single key")
    {
        oracle::Rng rng(1);
        const auto q = oracle::random_unit_rows(5, 3, rng);
        const auto k = oracle::random_unit_rows(1, 3, rng);
        const auto y = retrieval::masked_softmax_retrieve(q, k, values_of({1}), 1.0);
        for (std::size_t i = 0; i < 5; ++i) {
            CHECK(y(i, 0) == 0.0);
            CHECK(y(i, 1) == 1.0);
        }
    }
    SUBCASE("two orthogonal keys")
    {
        const auto y = retrieval::masked_softmax_retrieve(rows_of({{1, 0}}), rows_of({{1, 0}, {0, 1}}),
                                                          values_of({0, 1}), 1.0);
        const double expected = 1.0 / (1.0 + std::exp(1.0));
        CHECK(y(0, 1) == doctest::Approx(expected).epsilon(1e-15));
        CHECK(std::abs(y(0, 1) - 0.268941) < 1e-6);
        CHECK(y(0, 0) + y(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("uniform values")
    {
        oracle::Rng rng(2);
        const auto q = oracle::random_unit_rows(4, 5, rng);
        const auto k = oracle::random_unit_rows(7, 5, rng);
        const auto y = retrieval::masked_softmax_retrieve(q, k, values_of({0, 0, 0, 0, 0, 0, 0}), 0.3);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(y(i, 0) == doctest::Approx(1.0).epsilon(1e-15));
            CHECK(y(i, 1) == 0.0);
        }
    }
    SUBCASE("symmetric keys")
    {
        const double s = 1.0 / std::sqrt(2.0);
        const auto y = retrieval::masked_softmax_retrieve(rows_of({{1, 0}}), rows_of({{s, s}, {s, -s}}),
                                                          values_of({0, 1}), 1.0);
        CHECK(y(0, 0) == 0.5);
        CHECK(y(0, 1) == 0.5);
    }
}

TEST_CASE("softmax retrieval matches the long-double oracle")
{
    oracle::Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 1 + rng() % 12, n = 1 + rng() % 30, m = 1 + rng() % 10;
        const double tau = std::exp(std::uniform_real_distribution<double>(std::log(0.05), std::log(5.0))(rng));
        const auto q = oracle::random_unit_rows(m, d, rng);
        const auto k = oracle::random_unit_rows(n, d, rng);
        const auto v = oracle::random_onehots(n, rng);
        const double rho = std::uniform_real_distribution<double>(0.0, 0.9)(rng);
        const auto mask = retrieval::top_similarity_mask(q, k, rho);
        std::vector<std::set<std::size_t>> sets;
        for (const auto& row : mask.masked)
            sets.emplace_back(row.begin(), row.end());

        const auto y = retrieval::masked_softmax_retrieve(q, k, v, tau, &mask);
        const auto w = retrieval::softmax_weights(q, k, tau, &mask);
        const auto ref = oracle::softmax_retrieve(q, k, v, tau, sets);
        for (std::size_t i = 0; i < m; ++i) {
            CHECK(std::abs(y(i, 0) - ref[i][0]) < 1e-12);
            CHECK(std::abs(y(i, 1) - ref[i][1]) < 1e-12);
            CHECK(std::abs(y(i, 0) + y(i, 1) - 1.0) < 1e-12);
            double wsum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                CHECK(w(i, j) >= 0.0);
                if (sets[i].count(j))
                    CHECK(w(i, j) == 0.0);
                wsum += w(i, j);
            }
            CHECK(std::abs(wsum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("large logits stay finite")
{
    const auto k = rows_of({{1, 0}, {0.99, std::sqrt(1 - 0.99 * 0.99)}});
    const auto y = retrieval::masked_softmax_retrieve(rows_of({{1, 0}}), k, values_of({0, 1}), 1e-4);
    CHECK(std::isfinite(y(0, 0)));
    CHECK(y(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("similarity dropout")
{
    CHECK(retrieval::masked_count(0.20, 10) == 2);
    CHECK(retrieval::masked_count(0.05, 19) == 0);
    CHECK(retrieval::masked_count(0.05, 20) == 1);
    CHECK(retrieval::masked_count(0.0, 100) == 0);
    CHECK(retrieval::masked_count(0.29, 100) == 29); // 0.29 * 100 is 28.999999999999996 in binary

    SUBCASE("top-2 of 10 by raw similarity")
    {
        oracle::Rng rng(3);
        for (int trial = 0; trial < 50; ++trial) {
            const auto q = oracle::random_unit_rows(4, 6, rng);
            const auto k = oracle::random_unit_rows(10, 6, rng);
            const auto mask = retrieval::top_similarity_mask(q, k, 0.20);
            for (std::size_t i = 0; i < 4; ++i) {
                REQUIRE(mask.masked[i].size() == 2);
                const std::set<std::size_t> got(mask.masked[i].begin(), mask.masked[i].end());
                CHECK(got == oracle::top_keys(q.row(i), k, 2));
            }
        }
    }
    SUBCASE("ties go to the lower index")
    {
        const auto k = rows_of({{0, 1}, {1, 0}, {1, 0}, {1, 0}, {0, 1}});
        const auto mask = retrieval::top_similarity_mask(rows_of({{1, 0}}), k, 0.4);
        REQUIRE(mask.masked[0].size() == 2);
        CHECK(std::set<std::uint32_t>(mask.masked[0].begin(), mask.masked[0].end()) == std::set<std::uint32_t>{1, 2});
    }
    SUBCASE("rho = 0 masks nothing")
    {
        oracle::Rng rng(5);
        const auto q = oracle::random_unit_rows(3, 4, rng);
        const auto k = oracle::random_unit_rows(5, 4, rng);
        const auto mask = retrieval::top_similarity_mask(q, k, 0.0);
        for (const auto& m : mask.masked)
            CHECK(m.empty());
        const auto v = oracle::random_onehots(5, rng);
        CHECK(retrieval::masked_softmax_retrieve(q, k, v, 1.0, &mask) == retrieval::masked_softmax_retrieve(q, k, v, 1.0));
    }
    SUBCASE("mask covering every key is an error")
    {
        retrieval::DropoutMask all{{{0, 1}}};
        CHECK_THROWS_AS(retrieval::masked_softmax_retrieve(rows_of({{1, 0}}), rows_of({{1, 0}, {0, 1}}),
                                                          values_of({0, 1}), 1.0, &all),
                        Error);
        CHECK_THROWS_AS(retrieval::top_similarity_mask(rows_of({{1, 0}}), rows_of({{1, 0}}), 1.0 - 1e-12), Error);
    }
}

TEST_CASE("invalid retrieval input")
{
    CHECK_THROWS_AS(retrieval::masked_softmax_retrieve(rows_of({{1, 0}}), rows_of({{1, 0, 0}}), values_of({0}), 1.0),
                    Error);
    CHECK_THROWS_AS(retrieval::masked_softmax_retrieve(rows_of({{1, 0}}), rows_of({{1, 0}}), values_of({0}), 0.0),
                    Error);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    try {
        retrieval::masked_softmax_retrieve(rows_of({{nan, 0}}), rows_of({{1, 0}}), values_of({0}), 1.0);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Numerical);
    }
}

TEST_CASE("retrieve_tf on hand-built banks")
{
    const double s = 1.0 / std::sqrt(2.0);

    SUBCASE("symmetric bank")
    {
        const MemoryBank bank = bank_with(rows_of({{s, s}, {s, -s}}), values_of({0, 1}));
        const auto rec = query_record(rows_of({{1, 0}, {3, 0}}), {1.0f, 1.0f});
        const auto y = retrieval::retrieve_tf(rec, bank, RetrievalParams{});
        CHECK(y.y_seg(0, 1) == 0.5);
        CHECK(y.y_seg(1, 1) == 0.5); // queries are renormalized
        CHECK(y.y_cls[0] == 0.5);
        CHECK(y.y_cls[1] == 0.5);
    }
    SUBCASE("normal-only values")
    {
        oracle::Rng rng(8);
        const MemoryBank bank = bank_with(oracle::random_unit_rows(6, 3, rng), values_of({0, 0, 0, 0, 0, 0}));
        const auto rec = query_record(oracle::random_unit_rows(2, 3, rng), {0.3f, -1.0f, 2.0f});
        const auto a = retrieval::retrieve_tf(rec, bank, RetrievalParams{}).seg_anomaly();
        CHECK(a == std::vector<double>{0.0, 0.0});
    }
    SUBCASE("own prototypes at small tau")
    {
        // Normal patches near one direction, a cell-aligned defect near another.
        const PatchGrid g{4, 4, 8, 8};
        oracle::Rng rng(4);
        for (int trial = 0; trial < 20; ++trial) {
            const auto n_dir = oracle::random_unit(8, rng);
            const auto a_dir = oracle::random_unit(8, rng);
            ImageRecord rec;
            rec.id = "own";
            rec.label = 1;
            rec.cls_feature.assign(8, 1.0f);
            rec.patch_features = MatrixF(16, 8);
            Bitmap mask(8, 8);
            const membank::PatchLabels labels{0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0};
            for (std::uint32_t cell = 0; cell < 16; ++cell) {
                const auto& dir = labels[cell] ? a_dir : n_dir;
                for (std::size_t k = 0; k < 8; ++k)
                    rec.patch_features(cell, k) = static_cast<float>(dir[k] + 0.05 * oracle::gauss(rng));
                if (labels[cell])
                    for (std::uint32_t y = 0; y < 2; ++y)
                        for (std::uint32_t x = 0; x < 2; ++x)
                            mask.at(cell / 4 * 2 + y, cell % 4 * 2 + x) = 1;
            }
            rec.mask = mask;
            const auto built = membank::build_bank({rec}, g);
            REQUIRE(built.bank.patch_entries() == 2);
            RetrievalParams p;
            p.tau = 0.01;
            const auto y = retrieval::retrieve_tf(rec, built.bank, p).seg_anomaly();
            for (std::size_t i = 0; i < 16; ++i) {
                if (labels[i])
                    CHECK(y[i] > 0.999);
                else
                    CHECK(y[i] < 0.001);
            }
        }
    }
    SUBCASE("dimension mismatch")
    {
        const MemoryBank bank = bank_with(rows_of({{1, 0}, {0, 1}}), values_of({0, 1}));
        auto rec = query_record(rows_of({{1, 0, 0}, {0, 1, 0}}), {1, 0, 0});
        CHECK_THROWS_AS(retrieval::retrieve_tf(rec, bank, RetrievalParams{}), Error);
    }
}

TEST_CASE("retrieval properties on synthetic banks")
{
    synthetic::TaskConfig cfg;
    cfg.seed = 12;
    const synthetic::Task task(cfg);
    const auto aux = task.generate(0, 3, 20, 0.5, 1, "a");
    const auto test = task.generate(3, 2, 10, 0.5, 2, "t");
    const MemoryBank bank = membank::build_bank(aux.records, task.grid()).bank;
    const RetrievalParams params;

    SUBCASE("identity weights reproduce train-free output bitwise")
    {
        const auto w = MetricWeights::identity(cfg.d);
        for (const auto& rec : test.records) {
            const auto tf = retrieval::retrieve_tf(rec, bank, params);
            const auto ft = retrieval::retrieve_ft(rec, bank, w, params, false);
            CHECK(tf.y_cls == ft.y_cls);
            CHECK(tf.y_seg == ft.y_seg);
        }
    }
    SUBCASE("rho = 0 training equals inference")
    {
        RetrievalParams p0 = params;
        p0.rho_cls = 0.0;
        p0.rho_seg = 0.0;
        const auto w = MetricWeights::identity(cfg.d);
        for (const auto& rec : test.records) {
            const auto a = retrieval::retrieve_ft(rec, bank, w, p0, true);
            const auto b = retrieval::retrieve_ft(rec, bank, w, p0, false);
            CHECK(a.y_seg == b.y_seg);
            CHECK(a.y_cls == b.y_cls);
        }
    }
    SUBCASE("training mode masks the top raw similarities")
    {
        const auto w = MetricWeights::identity(cfg.d);
        const auto& rec = test.records.front();
        const auto y = retrieval::retrieve_ft(rec, bank, w, params, true);
        const auto q = retrieval::normalized_rows(rec.patch_features);
        const auto k = to_d(bank.k_pat);
        std::vector<std::set<std::size_t>> sets;
        for (std::size_t i = 0; i < q.rows(); ++i)
            sets.push_back(oracle::top_keys(q.row(i), k, retrieval::masked_count(params.rho_seg, k.rows())));
        const auto ref = oracle::softmax_retrieve(q, k, bank.v_pat, params.tau, sets);
        for (std::size_t i = 0; i < q.rows(); ++i)
            CHECK(std::abs(y.y_seg(i, 1) - ref[i][1]) < 1e-12);
    }
    SUBCASE("permuting memory rows")
    {
        oracle::Rng rng(6);
        std::vector<std::size_t> perm(bank.patch_entries());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        MemoryBank shuffled = bank;
        for (std::size_t r = 0; r < perm.size(); ++r) {
            std::copy(bank.k_pat.row(perm[r]).begin(), bank.k_pat.row(perm[r]).end(), shuffled.k_pat.row(r).begin());
            std::copy(bank.v_pat.row(perm[r]).begin(), bank.v_pat.row(perm[r]).end(), shuffled.v_pat.row(r).begin());
        }
        for (const auto& rec : test.records) {
            const auto a = retrieval::retrieve_tf(rec, bank, params).seg_anomaly();
            const auto b = retrieval::retrieve_tf(rec, shuffled, params).seg_anomaly();
            for (std::size_t i = 0; i < a.size(); ++i)
                CHECK(std::abs(a[i] - b[i]) < 1e-6);
        }
    }
    SUBCASE("training needs weights")
    {
        const retrieval::Retriever r(bank, params);
        CHECK_THROWS_AS(r.retrieve(test.records.front(), true), Error);
    }
}

TEST_CASE("small tau converges to the nearest key")
{
    oracle::Rng rng(21);
    int checked = 0;
    while (checked < 100) {
        const auto q = oracle::random_unit_rows(1, 5, rng);
        const auto k = oracle::random_unit_rows(8, 5, rng);
        const auto v = oracle::random_onehots(8, rng);
        std::vector<double> sims;
        for (std::size_t j = 0; j < 8; ++j)
            sims.push_back(retrieval::dot(q.row(0), k.row(j)));
        auto sorted = sims;
        std::sort(sorted.rbegin(), sorted.rend());
        if (sorted[0] - sorted[1] < 0.1)
            continue;
        const std::size_t best = static_cast<std::size_t>(std::max_element(sims.begin(), sims.end()) - sims.begin());
        const auto y = retrieval::masked_softmax_retrieve(q, k, v, 1e-3);
        CHECK(std::abs(y(0, 1) - v(best, 1)) < 1e-12);
        // tau -> tau/c scales the logits by c
        const auto a = retrieval::softmax_weights(q, k, 0.5);
        MatrixD k2 = k;
        for (std::size_t i = 0; i < k2.rows() * k2.cols(); ++i)
            k2.data()[i] *= 2.0;
        const auto b = retrieval::softmax_weights(q, k2, 1.0);
        for (std::size_t j = 0; j < 8; ++j)
            CHECK(std::abs(a(0, j) - b(0, j)) < 1e-14);
        ++checked;
    }
}

TEST_CASE("dataset statistics")
{
    const PatchGrid grid{1, 1, 1, 1};

    SUBCASE("single normal query")
    {
        // s_anom = e^c / (e^1 + e^c) = 0.3
        const double c = 1.0 + std::log(0.3 / 0.7);
        const MemoryBank bank = bank_with(rows_of({{1, 0}, {c, std::sqrt(1 - c * c)}}), values_of({0, 1}));
        ImageRecord q = query_record(rows_of({{1, 0}}), {1.0f, 0.0f});
        q.label = 0;
        const auto s = retrieval::dataset_statistics({q}, grid, bank, RetrievalParams{});
        CHECK_FALSE(s.aq_ak.has_value());
        CHECK_FALSE(s.aq_nk.has_value());
        CHECK_FALSE(s.margin_a.has_value());
        REQUIRE(s.nq_ak.has_value());
        CHECK(std::abs(*s.nq_ak - 0.3) < 1e-6);
        CHECK(*s.nq_nk == doctest::Approx(1.0 - *s.nq_ak).epsilon(1e-15));
        CHECK(s.normal_queries == 1);
        CHECK(s.anomalous_queries == 0);
    }
    SUBCASE("synthetic ordering and identities")
    {
        synthetic::TaskConfig cfg;
        cfg.seed = 31;
        const synthetic::Task task(cfg);
        const auto aux = task.generate(0, 4, 20, 0.5, 1, "a");
        const auto test = task.generate(4, 2, 20, 0.5, 2, "t");
        const MemoryBank bank = membank::build_bank(aux.records, task.grid()).bank;
        const auto s = retrieval::dataset_statistics(test.records, task.grid(), bank, RetrievalParams{});
        REQUIRE(s.aq_ak.has_value());
        REQUIRE(s.nq_ak.has_value());
        CHECK(*s.nq_nk > *s.aq_nk);
        CHECK(*s.aq_ak > *s.nq_ak);
        CHECK(std::abs(*s.aq_nk - (1.0 - *s.aq_ak)) < 1e-6);
        CHECK(std::abs(*s.nq_nk - (1.0 - *s.nq_ak)) < 1e-6);
        CHECK(*s.margin_a == doctest::Approx(*s.aq_ak - *s.nq_ak));
        CHECK(*s.margin_n == doctest::Approx(*s.nq_nk - *s.aq_nk));

        // identity weights reproduce the train-free statistics
        const auto w = MetricWeights::identity(cfg.d);
        const auto s2 = retrieval::dataset_statistics(test.records, task.grid(), bank, RetrievalParams{}, &w);
        CHECK(*s2.aq_ak == *s.aq_ak);
        CHECK(*s2.nq_ak == *s.nq_ak);
    }
}
