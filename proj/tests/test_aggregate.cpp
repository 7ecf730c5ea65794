#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mism/aggregate.hpp"
#include "mism/error.hpp"
#include "mism/rng.hpp"

using namespace mism;

namespace {

Tensor random_matrix(int64_t n, int64_t k, Rng& rng, bool requires_grad = false) {
    Tensor t = Tensor::zeros({n, k}, requires_grad);
    for (auto& v : t.values()) {
        v = rng.gaussian();
    }
    return t;
}

Tensor permuted_rows(const Tensor& e, const std::vector<int64_t>& perm) {
    const int64_t n = e.extent(0), k = e.extent(1);
    Tensor out = Tensor::zeros({n, k});
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < k; ++j) {
            out.values()[static_cast<size_t>(i * k + j)] =
                e.values()[static_cast<size_t>(perm[static_cast<size_t>(i)] * k + j)];
        }
    }
    return out;
}

std::vector<int64_t> random_permutation(int64_t n, Rng& rng) {
    std::vector<int64_t> perm(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        perm[static_cast<size_t>(i)] = i;
    }
    rng.shuffle(perm);
    return perm;
}

ImageGroup make_group(const Tensor& e) {
    ImageGroup g;
    g.group_id = "test";
    g.n = e.extent(0);
    g.k = e.extent(1);
    g.embeddings = e.values();
    g.image_meta.resize(static_cast<size_t>(g.n));
    g.caption = "caption";
    return g;
}

}  // namespace

TEST_CASE("std_dev_feature basic values") {
    Tensor identical = Tensor::from_values({3, 2}, {1, 2, 1, 2, 1, 2});
    Tensor sigma = std_dev_feature(identical);
    CHECK(sigma.values() == std::vector<double>{0, 0});

    // rows (0,2) and (2,0): mean (1,1), deviations +-1 in both coordinates
    Tensor e = Tensor::from_values({2, 2}, {0, 2, 2, 0});
    Tensor s = std_dev_feature(e);
    CHECK(s.values()[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.values()[1] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("std_dev_feature is zero iff rows are identical") {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 2 + rng.uniform_int(6);
        const int64_t k = 1 + rng.uniform_int(5);
        if (trial % 2 == 0) {
            Tensor base = random_matrix(1, k, rng);
            Tensor e = Tensor::zeros({n, k});
            for (int64_t i = 0; i < n; ++i) {
                std::copy(base.values().begin(), base.values().end(),
                          e.values().begin() + i * k);
            }
            Tensor sigma = std_dev_feature(e);
            for (double v : sigma.values()) {
                CHECK(v == 0.0);
            }
        } else {
            Tensor e = random_matrix(n, k, rng);
            Tensor sigma = std_dev_feature(e);
            bool any_positive = false;
            for (double v : sigma.values()) {
                any_positive = any_positive || v > 0.0;
            }
            CHECK(any_positive);
        }
    }
}

TEST_CASE("std_dev after padding stays within the original max deviation") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const int64_t n = 2 + rng.uniform_int(5);
        const int64_t k = 1 + rng.uniform_int(4);
        Tensor e = random_matrix(n, k, rng);
        ImageGroup g = make_group(e);
        ImageGroup padded = normalize_group_size(g, n + 1 + rng.uniform_int(4),
                                                 static_cast<uint64_t>(trial));
        Tensor sigma = std_dev_feature(padded.embedding_tensor());
        Tensor mean = fixed_avg(e);
        for (int64_t j = 0; j < k; ++j) {
            double max_dev = 0.0;
            for (int64_t i = 0; i < n; ++i) {
                max_dev = std::max(max_dev,
                                   std::abs(e.values()[static_cast<size_t>(i * k + j)] -
                                            mean.values()[static_cast<size_t>(j)]));
            }
            const double s = sigma.values()[static_cast<size_t>(j)];
            CHECK(s >= 0.0);
            CHECK(s <= max_dev + 1e-12);
        }
    }
}

TEST_CASE("fixed_avg basic values") {
    Tensor single = Tensor::from_values({1, 3}, {4, 5, 6});
    CHECK(fixed_avg(single).values() == std::vector<double>{4, 5, 6});

    Tensor e = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor a = fixed_avg(e);
    CHECK(a.values()[0] == 0.5);
    CHECK(a.values()[1] == 0.5);
}

TEST_CASE("fixed_avg and std_dev are exactly permutation invariant") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 2 + rng.uniform_int(7);
        const int64_t k = 1 + rng.uniform_int(6);
        Tensor e = random_matrix(n, k, rng);
        Tensor p = permuted_rows(e, random_permutation(n, rng));
        CHECK(fixed_avg(e).values() == fixed_avg(p).values());
        CHECK(std_dev_feature(e).values() == std_dev_feature(p).values());
    }
}

TEST_CASE("dense_avg with zero weights equals fixed_avg") {
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 1 + rng.uniform_int(6);
        const int64_t k = 1 + rng.uniform_int(5);
        Tensor e = random_matrix(n, k, rng);
        Tensor h = Tensor::zeros({n, k * n});
        Tensor dense = dense_avg(e, h);
        Tensor fixed = fixed_avg(e);
        for (int64_t j = 0; j < k; ++j) {
            CHECK(std::abs(dense.values()[static_cast<size_t>(j)] -
                           fixed.values()[static_cast<size_t>(j)]) < 1e-12);
        }
    }
}

TEST_CASE("dense_avg worked example: identity weights over rows [2],[4]") {
    Tensor e = Tensor::from_values({2, 1}, {2, 4});
    Tensor h = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor a = dense_avg(e, h);
    // w = softmax(2, 4) = (0.11920, 0.88080); a = 0.11920*2 + 0.88080*4
    const double w1 = std::exp(2.0) / (std::exp(2.0) + std::exp(4.0));
    const double w2 = std::exp(4.0) / (std::exp(2.0) + std::exp(4.0));
    CHECK(w2 == doctest::Approx(0.88080).epsilon(1e-4));
    CHECK(a.values()[0] == doctest::Approx(w1 * 2.0 + w2 * 4.0).epsilon(1e-12));
    CHECK(a.values()[0] == doctest::Approx(3.76159).epsilon(1e-5));
}

TEST_CASE("dense_avg of a single row returns the row") {
    Tensor e = Tensor::from_values({1, 3}, {7, 8, 9});
    Tensor h = Tensor::from_values({1, 3}, {0.3, -0.2, 0.5});
    Tensor a = dense_avg(e, h);
    CHECK(a.values() == std::vector<double>{7, 8, 9});
}

TEST_CASE("dense_avg rejects groups that were not size-normalized") {
    Tensor e = Tensor::zeros({3, 2});
    Tensor h = Tensor::zeros({8, 16});
    try {
        dense_avg(e, h);
        FAIL("expected ContractError");
    } catch (const ContractError& ex) {
        CHECK(std::string(ex.what()).find("normalize") != std::string::npos);
    }
}

TEST_CASE("dense_avg stays in the coordinate-wise bounding box") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 2 + rng.uniform_int(6);
        const int64_t k = 1 + rng.uniform_int(5);
        Tensor e = random_matrix(n, k, rng);
        Tensor h = random_matrix(n, k * n, rng);
        Tensor a = dense_avg(e, h);
        for (int64_t j = 0; j < k; ++j) {
            double lo = e.values()[static_cast<size_t>(j)], hi = lo;
            for (int64_t i = 1; i < n; ++i) {
                lo = std::min(lo, e.values()[static_cast<size_t>(i * k + j)]);
                hi = std::max(hi, e.values()[static_cast<size_t>(i * k + j)]);
            }
            CHECK(a.values()[static_cast<size_t>(j)] >= lo - 1e-12);
            CHECK(a.values()[static_cast<size_t>(j)] <= hi + 1e-12);
        }
    }
}

TEST_CASE("dense_avg is not permutation invariant for nonzero weights") {
    Rng rng(6);
    int differing = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const int64_t n = 3 + rng.uniform_int(4);
        const int64_t k = 2 + rng.uniform_int(3);
        Tensor e = random_matrix(n, k, rng);
        Tensor h = random_matrix(n, k * n, rng);
        Tensor a1 = dense_avg(e, h);
        Tensor a2 = dense_avg(permuted_rows(e, random_permutation(n, rng)), h);
        for (int64_t j = 0; j < k; ++j) {
            if (std::abs(a1.values()[static_cast<size_t>(j)] -
                         a2.values()[static_cast<size_t>(j)]) > 1e-9) {
                ++differing;
                break;
            }
        }
    }
    CHECK(differing > 0);
}

TEST_CASE("self_attn_avg with zero projections") {
    // Uniform attention makes every pooled row the column mean, so each output
    // coordinate is the squared column mean.
    Tensor e = Tensor::from_values({2, 1}, {2, 0});
    Tensor h1 = Tensor::zeros({1, 1});
    Tensor h2 = Tensor::zeros({1, 1});
    Tensor a = self_attn_avg(e, h1, h2);
    CHECK(a.values()[0] == doctest::Approx(1.0).epsilon(1e-12));

    Tensor single = Tensor::from_values({1, 2}, {3, -2});
    Tensor z = Tensor::zeros({2, 2});
    Tensor b = self_attn_avg(single, z, z);
    CHECK(b.values()[0] == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(b.values()[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("self_attn_avg is permutation invariant within 1e-9") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 2 + rng.uniform_int(6);
        const int64_t k = 2 + rng.uniform_int(4);
        const int64_t m = 1 + rng.uniform_int(4);
        Tensor e = random_matrix(n, k, rng);
        Tensor h1 = random_matrix(k, m, rng);
        Tensor h2 = random_matrix(k, m, rng);
        Tensor a1 = self_attn_avg(e, h1, h2);
        Tensor a2 = self_attn_avg(permuted_rows(e, random_permutation(n, rng)), h1, h2);
        for (int64_t j = 0; j < k; ++j) {
            CHECK(std::abs(a1.values()[static_cast<size_t>(j)] -
                           a2.values()[static_cast<size_t>(j)]) < 1e-9);
        }
    }
}

TEST_CASE("self_attn_avg matches direct evaluation under row permutations") {
    Rng rng(8);
    Tensor e = random_matrix(4, 3, rng);
    Tensor h1 = random_matrix(3, 3, rng);
    Tensor h2 = random_matrix(3, 3, rng);
    const Tensor base = self_attn_avg(e, h1, h2);
    for (int p = 0; p < 5; ++p) {
        Tensor permuted = permuted_rows(e, random_permutation(4, rng));
        Tensor out = self_attn_avg(permuted, h1, h2);
        for (size_t j = 0; j < 3; ++j) {
            CHECK(out.values()[j] == doctest::Approx(base.values()[j]).epsilon(1e-9));
        }
    }
}

TEST_CASE("aggregation ops are differentiable") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed + 40);
        const int64_t n = 3, k = 4, m = 3;
        Tensor e = random_matrix(n, k, rng, true);
        Tensor h = random_matrix(n, k * n, rng, true);
        Tensor h1 = random_matrix(k, m, rng, true);
        Tensor h2 = random_matrix(k, m, rng, true);
        Tensor weights = random_matrix(1, k, rng);
        Tensor w = reshape(weights, {k});

        CHECK(check_gradients([&]() { return sum_all(mul(std_dev_feature(e), w)); }, {e}) < 1e-4);
        CHECK(check_gradients([&]() { return sum_all(mul(fixed_avg(e), w)); }, {e}) < 1e-4);
        CHECK(check_gradients([&]() { return sum_all(mul(dense_avg(e, h), w)); }, {e, h}) < 1e-4);
        CHECK(check_gradients([&]() { return sum_all(mul(self_attn_avg(e, h1, h2), w)); },
                              {e, h1, h2}) < 1e-4);
    }
}

TEST_CASE("normalize_group_size") {
    Rng rng(9);
    Tensor e = random_matrix(3, 2, rng);
    ImageGroup g = make_group(e);

    ImageGroup same = normalize_group_size(g, 3, 1);
    CHECK(same.embeddings == g.embeddings);

    ImageGroup padded = normalize_group_size(g, 5, 1);
    CHECK(padded.n == 5);
    for (int64_t i = 0; i < 5; ++i) {
        bool found = false;
        for (int64_t orig = 0; orig < 3; ++orig) {
            bool equal = true;
            for (int64_t j = 0; j < 2; ++j) {
                equal = equal && padded.at(i, j) == g.at(orig, j);
            }
            found = found || equal;
        }
        CHECK(found);
    }
    // The first three rows are the originals in order.
    for (int64_t i = 0; i < 3; ++i) {
        for (int64_t j = 0; j < 2; ++j) {
            CHECK(padded.at(i, j) == g.at(i, j));
        }
    }

    Tensor big = random_matrix(8, 2, rng);
    ImageGroup big_group = make_group(big);
    ImageGroup sub = normalize_group_size(big_group, 4, 7);
    CHECK(sub.n == 4);
    // Order-preserving subsample: rows appear as an ascending subsequence.
    int64_t last = -1;
    for (int64_t i = 0; i < 4; ++i) {
        int64_t match = -1;
        for (int64_t orig = last + 1; orig < 8; ++orig) {
            bool equal = true;
            for (int64_t j = 0; j < 2; ++j) {
                equal = equal && sub.at(i, j) == big_group.at(orig, j);
            }
            if (equal) {
                match = orig;
                break;
            }
        }
        CHECK(match > last);
        last = match;
    }
}

TEST_CASE("build_encoder_features emits the canonical order") {
    Rng rng(10);
    const int64_t n = 16, k = 4;
    Tensor e = random_matrix(n, k, rng);
    ImageGroup g = make_group(e);
    AggregationParams params{Tensor::zeros({n, k * n}), Tensor::zeros({k, k}),
                             Tensor::zeros({k, k})};

    FeatureConfig indiv_only{true, Averaging::none, false};
    auto features = build_encoder_features(g, indiv_only, params);
    CHECK(features.size() == 16);
    for (const auto& f : features) {
        CHECK(f.kind == FeatureKind::individual);
    }

    FeatureConfig dense_sigma{false, Averaging::dense, true};
    features = build_encoder_features(g, dense_sigma, params);
    CHECK(features.size() == 2);
    CHECK(features[0].kind == FeatureKind::aggregate);
    CHECK(features[1].kind == FeatureKind::sigma);

    FeatureConfig forbidden{false, Averaging::none, true};
    CHECK_THROWS_AS(build_encoder_features(g, forbidden, params), ConfigError);
}
