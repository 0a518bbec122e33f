#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>
#include <vector>

#include "fusion_oracle.hpp"
#include "support.hpp"
#include "tmcir/errors.hpp"
#include "tmcir/token_fusion.hpp"

using namespace tmcir;
using tmcir::testing::max_abs_diff;
using tmcir::testing::random_array;

namespace {

using Pairs = std::vector<std::pair<std::size_t, std::size_t>>;

// Projection fixed to the identity so the fused query is normalize(mean Z).
ParameterStore identity_projection(std::size_t d) {
    ParameterStore ps;
    init_projection(ps, d, 0);
    ps.value(param::kProjectionWeight) = DenseArray::identity(d);
    return ps;
}

struct Instance {
    DenseArray v, t, pv, pt;
};

Instance random_instance(Rng& rng, std::size_t d = 4) {
    const std::size_t l = 1 + rng.uniform_index(6);
    const std::size_t m = 1 + rng.uniform_index(5);
    return {random_array(rng, l, d), random_array(rng, m, d), random_array(rng, l, d), random_array(rng, m, d)};
}

} // namespace

TEST_CASE("similarity_matrix examples") {
    const auto u = DenseArray::from_rows({{0.6, 0.8}});
    CHECK(max_abs_diff(similarity_matrix(u, u), DenseArray::from_rows({{1.0}})) < 1e-15);
    const auto s = similarity_matrix(DenseArray::from_rows({{1, 0}, {0, 1}}), DenseArray::from_rows({{1, 0}}));
    CHECK(s == DenseArray::from_rows({{1}, {0}}));

    Rng rng(3);
    const auto v = random_array(rng, 3, 5);
    const auto t = random_array(rng, 2, 5);
    const auto got = similarity_matrix(v, t);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            CHECK(std::abs(got(i, j) - cosine(v.row(i), t.row(j))) < 1e-15);
        }
    }
}

TEST_CASE("similarity_matrix errors name modality and row") {
    try {
        similarity_matrix(DenseArray::from_rows({{1, 0}}), DenseArray::from_rows({{1, 1}, {0, 0}}));
        FAIL("expected DegenerateInputError");
    } catch (const DegenerateInputError& e) {
        CHECK(std::string(e.what()).find("text token 1") != std::string::npos);
    }
    try {
        similarity_matrix(DenseArray::from_rows({{0, 0}}), DenseArray::from_rows({{1, 1}}));
        FAIL("expected DegenerateInputError");
    } catch (const DegenerateInputError& e) {
        CHECK(std::string(e.what()).find("visual token 0") != std::string::npos);
    }
    CHECK_THROWS_AS(similarity_matrix(DenseArray(1, 2, 1.0), DenseArray(1, 3, 1.0)), ShapeError);
}

TEST_CASE("match_pairs examples") {
    const auto m = match_pairs(DenseArray::from_rows({{0.9, 0.2}, {0.6, 0.75}}), 0.7);
    CHECK(m.pairs == Pairs{{0, 0}, {1, 1}});
    CHECK(m.matched_visual == std::vector<std::size_t>{0, 1});
    CHECK(m.matched_text == std::vector<std::size_t>{0, 1});
    CHECK(m.unmatched_visual.empty());

    const auto none = match_pairs(DenseArray::from_rows({{0.7, 0.1}, {-0.3, 0.5}}), 0.7);
    CHECK(none.pairs.empty());
    CHECK(none.unmatched_visual == std::vector<std::size_t>{0, 1});
    CHECK(none.unmatched_text == std::vector<std::size_t>{0, 1});
    CHECK(none.fused_length() == 4);

    const auto many = match_pairs(DenseArray::from_rows({{0.8, 0.8}}), 0.7);
    CHECK(many.pairs == Pairs{{0, 0}, {0, 1}});
    CHECK(many.fused_length() == 2);
}

TEST_CASE("fuse_pair and residual_token examples") {
    const FusionConfig cfg;
    const std::vector<double> zero{0, 0};
    auto f = fuse_pair(std::vector<double>{2, 0}, std::vector<double>{0, 2}, 1.0, zero, zero, cfg);
    CHECK(std::abs(f[0] - 0.999999995) < 1e-15);
    CHECK(std::abs(f[1] - 0.999999995) < 1e-15);

    const std::vector<double> u{0.3, -0.7};
    f = fuse_pair(u, u, 0.8, zero, zero, cfg);
    CHECK(std::abs(f[0] - 0.3) < 1e-8);
    CHECK(std::abs(f[1] + 0.7) < 1e-8);

    const std::vector<double> q{0.25, -1.5};
    f = fuse_pair(zero, zero, 0.9, q, q, cfg);
    CHECK(f == q);

    CHECK_THROWS_AS(fuse_pair(u, u, 0.0, zero, zero, cfg), ContractViolation);
    CHECK_THROWS_AS(fuse_pair(u, u, -0.2, zero, zero, cfg), ContractViolation);

    CHECK(residual_token(zero, q) == std::vector<double>{0.125, -0.75});
    CHECK(residual_token(u, zero) == u);
    CHECK(residual_token(std::vector<double>{1, 1}, std::vector<double>{2, 0}) == std::vector<double>{2, 1});
    CHECK_THROWS_AS(residual_token(u, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("assemble counts") {
    const FusionConfig cfg;
    Rng rng(4);
    const auto v = random_array(rng, 3, 2);
    const auto t = random_array(rng, 2, 2);
    const auto pv = random_array(rng, 3, 2);
    const auto pt = random_array(rng, 2, 2);

    const DenseArray low(3, 2, -1.0);
    const auto empty = match_pairs(low, 0.7);
    CHECK(assemble(v, t, pv, pt, low, empty, cfg).rows() == 5);

    // Diagonal matches with L = M.
    const auto sq = DenseArray::from_rows({{0.9, 0.1}, {0.2, 0.95}});
    const auto diag = match_pairs(sq, 0.7);
    CHECK(assemble(random_array(rng, 2, 2), t, random_array(rng, 2, 2), pt, sq, diag, cfg).rows() == 2);

    const auto one_two = DenseArray::from_rows({{0.8, 0.8}});
    CHECK(assemble(random_array(rng, 1, 2), t, random_array(rng, 1, 2), pt, one_two, match_pairs(one_two, 0.7), cfg)
              .rows() == 2);
}

TEST_CASE("compose_query examples") {
    const FusionConfig cfg{0.7, 1e-8, 2};
    ParameterStore ps = identity_projection(2);
    {
        Tape tape;
        TokenSequence v{tape.constant(DenseArray::from_rows({{1, 0}})), DenseArray(1, 2)};
        TokenSequence t{tape.constant(DenseArray::from_rows({{-1, 0}})), DenseArray(1, 2)};
        CHECK_THROWS_AS(compose_query(tape, ps, v, t, cfg), DegenerateInputError);
    }
    {
        Tape tape;
        TokenSequence v{tape.constant(DenseArray::from_rows({{2, 1}})), DenseArray::from_rows({{0.1, 0.3}})};
        TokenSequence t{tape.constant(DenseArray::from_rows({{1, 0.4}})), DenseArray::from_rows({{-0.2, 0.5}})};
        MatchSet m;
        const Var q = compose_query(tape, ps, v, t, cfg, &m);
        REQUIRE(m.pairs.size() == 1);
        const double s = cosine(v.tokens.value().row(0), t.tokens.value().row(0));
        const auto f = fuse_pair(v.tokens.value().row(0), t.tokens.value().row(0), s, v.positions.row(0),
                                 t.positions.row(0), cfg);
        const double n = std::hypot(f[0], f[1]);
        CHECK(std::abs(q.value()(0, 0) - f[0] / n) < 1e-12);
        CHECK(std::abs(q.value()(0, 1) - f[1] / n) < 1e-12);
    }
}

TEST_CASE("compose_query equals the straight-line oracle") {
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const auto in = random_instance(rng);
        const double tau = rng.uniform(0.05, 0.95);
        const FusionConfig cfg{tau, 1e-8, 4};
        ParameterStore ps = identity_projection(4);
        const auto want = tmcir::testing::oracle_compose(in.v, in.t, in.pv, in.pt, tau, cfg.epsilon);
        Tape tape;
        MatchSet m;
        TokenSequence v{tape.constant(in.v), in.pv};
        TokenSequence t{tape.constant(in.t), in.pt};
        if (want.degenerate) {
            CHECK_THROWS_AS(compose_query(tape, ps, v, t, cfg, &m), DegenerateInputError);
            continue;
        }
        const Var q = compose_query(tape, ps, v, t, cfg, &m);
        CHECK(m.pairs == want.pairs);
        for (std::size_t c = 0; c < 4; ++c) {
            CHECK(std::abs(q.value()(0, c) - want.query[c]) < 1e-10);
        }
    }
}

TEST_CASE("properties: scale invariance, counting identity, no-match path, Z permutation") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const auto in = random_instance(rng);
        const double tau = rng.uniform(0.05, 0.95);
        const FusionConfig cfg{tau, 1e-8, 4};

        DenseArray scaled = in.v;
        for (double& x : scaled.data()) {
            x *= 3.0;
        }
        const auto m = match_pairs(similarity_matrix(in.v, in.t), tau);
        CHECK(match_pairs(similarity_matrix(scaled, in.t), tau) == m);

        const auto s = similarity_matrix(in.v, in.t);
        for (auto [i, j] : m.pairs) {
            CHECK(2.0 * s(i, j) + cfg.epsilon >= 2.0 * tau);
        }
        CHECK(m.unmatched_visual.size() == in.v.rows() - m.matched_visual.size());
        CHECK(m.unmatched_text.size() == in.t.rows() - m.matched_text.size());
        const auto z = assemble(in.v, in.t, in.pv, in.pt, s, m, cfg);
        CHECK(z.rows() == m.fused_length());

        ParameterStore ps;
        init_projection(ps, 4, rng.next_u64());
        Tape tape;
        TokenSequence v{tape.constant(in.v), in.pv};
        TokenSequence t{tape.constant(in.t), in.pt};
        const Var zv = assemble(tape, v, t, cfg);
        std::vector<std::size_t> perm(zv.rows());
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        const Var a = pool_and_project(tape, ps, zv);
        const Var b = pool_and_project(tape, ps, ad::gather_rows(zv, perm));
        CHECK(max_abs_diff(a.value(), b.value()) < 1e-9);

        const FusionConfig never{1.0, 1e-8, 4};
        MatchSet none;
        const Var q = compose_query(tape, ps, v, t, never, &none);
        CHECK(none.pairs.empty());
        DenseArray all(in.v.rows() + in.t.rows(), 4);
        for (std::size_t i = 0; i < in.v.rows(); ++i) {
            const auto r = residual_token(in.v.row(i), in.pv.row(i));
            std::copy(r.begin(), r.end(), all.row(i).begin());
        }
        for (std::size_t j = 0; j < in.t.rows(); ++j) {
            const auto r = residual_token(in.t.row(j), in.pt.row(j));
            std::copy(r.begin(), r.end(), all.row(in.v.rows() + j).begin());
        }
        const Var direct = pool_and_project(tape, ps, tape.constant(all));
        CHECK(max_abs_diff(q.value(), direct.value()) < 1e-12);
    }
}

TEST_CASE("no-fusion baseline pools the concatenated raw tokens") {
    Rng rng(30);
    ParameterStore ps;
    init_projection(ps, 4, 1);
    const auto in = random_instance(rng);
    Tape tape;
    TokenSequence v{tape.constant(in.v), in.pv};
    TokenSequence t{tape.constant(in.t), in.pt};
    const Var q = compose_query_no_fusion(tape, ps, v, t);
    const Var parts[] = {v.tokens, t.tokens};
    const Var want = pool_and_project(tape, ps, ad::concat_rows(parts));
    CHECK(q.value() == want.value());
}

TEST_CASE("fusion gradients are smooth away from the threshold") {
    Rng rng(12);
    int checked = 0;
    while (checked < 20) {
        const auto in = random_instance(rng);
        const double tau = 0.3;
        const auto s = similarity_matrix(in.v, in.t);
        double margin = 1.0;
        for (double x : s.data()) {
            margin = std::min(margin, std::abs(x - tau));
        }
        if (margin < 0.05) {
            continue;
        }
        ++checked;
        ParameterStore ps;
        ps.add("v", in.v);
        ps.add("t", in.t);
        init_projection(ps, 4, rng.next_u64());
        const auto target = tmcir::testing::random_unit_rows(rng, 1, 4);
        auto loss = [&](Tape& tape, ParameterStore& store) {
            TokenSequence v{tape.parameter(store, "v"), in.pv};
            TokenSequence t{tape.parameter(store, "t"), in.pt};
            const Var q = compose_query(tape, store, v, t, FusionConfig{tau, 1e-8, 4});
            return ad::matmul_nt(q, tape.constant(target));
        };
        const FdReport r = fd_check(ps, loss, tmcir::testing::composite_fd_options());
        CHECK(r.max_rel_error <= 1e-4);
    }
}

TEST_CASE("FusionConfig validation") {
    CHECK_NOTHROW(FusionConfig{}.validate());
    CHECK_THROWS_AS((FusionConfig{0.0, 1e-8, 32}.validate()), ConfigError);
    CHECK_THROWS_AS((FusionConfig{0.7, 0.0, 32}.validate()), ConfigError);
    CHECK_THROWS_AS((FusionConfig{0.7, 1e-8, 7}.validate()), ConfigError);
    CHECK_NOTHROW((FusionConfig{1.5, 1e-8, 32}.validate()));
}
