#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <numeric>

#include "support.hpp"
#include "tmcir/diffcore.hpp"
#include "tmcir/errors.hpp"

using namespace tmcir;
using tmcir::testing::max_abs_diff;
using tmcir::testing::random_array;

TEST_CASE("matmul examples") {
    const auto id = DenseArray::identity(2);
    const auto b = DenseArray::from_rows({{5, 6}, {7, 8}});
    CHECK(matmul(id, b) == b);
    CHECK(matmul(DenseArray::from_rows({{1, 2}}), DenseArray::from_rows({{3}, {4}})) ==
          DenseArray::from_rows({{11}}));
    Rng rng(1);
    const auto any = random_array(rng, 3, 4);
    CHECK(matmul(DenseArray(2, 3), any) == DenseArray(2, 4));
}

TEST_CASE("matmul shape error names both shapes") {
    try {
        matmul(DenseArray(2, 3), DenseArray(2, 3));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
    }
}

TEST_CASE("DenseArray rejects data of the wrong length") {
    CHECK_THROWS_AS(DenseArray(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("l2_normalize_rows examples and errors") {
    const auto y = l2_normalize_rows(DenseArray::from_rows({{3, 4}, {1, 0}, {-2, 0}}));
    CHECK(y(0, 0) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(y(0, 1) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(y(1, 0) == 1.0);
    CHECK(y(1, 1) == 0.0);
    CHECK(y(2, 0) == -1.0);
    try {
        l2_normalize_rows(DenseArray::from_rows({{1, 0}, {0, 0}}));
        FAIL("expected DegenerateInputError");
    } catch (const DegenerateInputError& e) {
        CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }
}

TEST_CASE("cosine examples") {
    const std::vector<double> x{0.3, -1.2, 2.0};
    CHECK(cosine(x, x) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
    CHECK(std::abs(cosine(std::vector<double>{1, 1}, std::vector<double>{1, 0}) - 0.70710678) < 1e-8);
    CHECK_THROWS_AS(cosine(std::vector<double>{0, 0}, std::vector<double>{1, 0}), DegenerateInputError);
}

TEST_CASE("mean_rows examples and errors") {
    const auto r = DenseArray::from_rows({{0.5, -2}});
    CHECK(mean_rows(r) == r);
    CHECK(mean_rows(DenseArray::from_rows({{0, 0}, {2, 4}})) == DenseArray::from_rows({{1, 2}}));
    CHECK(max_abs_diff(mean_rows(DenseArray::from_rows({{0.1, 0.7}, {0.1, 0.7}, {0.1, 0.7}})),
                       DenseArray::from_rows({{0.1, 0.7}})) < 1e-15);
    CHECK_THROWS_AS(mean_rows(DenseArray(0, 3)), EmptyInputError);
}

TEST_CASE("properties: cosine scale, normalize idempotence, mean permutation") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const auto u = random_array(rng, 1, 5);
        const auto v = random_array(rng, 1, 5);
        const double c = cosine(u.row(0), v.row(0));
        CHECK(c >= -1.0);
        CHECK(c <= 1.0);
        for (double a : {0.5, 2.0, 10.0}) {
            DenseArray au = u;
            for (double& x : au.data()) {
                x *= a;
            }
            CHECK(std::abs(cosine(au.row(0), v.row(0)) - c) < 1e-12);
        }
        const auto x = random_array(rng, 4, 3);
        const auto y = l2_normalize_rows(x);
        CHECK(max_abs_diff(l2_normalize_rows(y), y) < 1e-12);

        std::vector<std::size_t> perm(x.rows());
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        DenseArray shuffled(x.rows(), x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            std::copy(x.row(perm[r]).begin(), x.row(perm[r]).end(), shuffled.row(r).begin());
        }
        CHECK(max_abs_diff(mean_rows(shuffled), mean_rows(x)) < 1e-12);
    }
}

TEST_CASE("backward on simple losses") {
    ParameterStore ps;
    ps.add("p", DenseArray::from_rows({{1, -2, 3}, {0.5, 4, -1}}));
    {
        Tape tape;
        tape.backward(ad::sum_all(tape.parameter(ps, "p")));
        CHECK(ps.grad("p") == DenseArray(2, 3, 1.0));
    }
    ps.zero_grad();
    {
        Tape tape;
        Var p = tape.parameter(ps, "p");
        Var sq = ad::sum_all(ad::add(ad::matmul_nt(ad::row(p, 0), ad::row(p, 0)), ad::matmul_nt(ad::row(p, 1), ad::row(p, 1))));
        tape.backward(ad::scale(sq, 0.5));
        CHECK(max_abs_diff(ps.grad("p"), ps.value("p")) < 1e-15);
    }
}

TEST_CASE("backward needs a scalar loss and runs once") {
    ParameterStore ps;
    ps.add("p", DenseArray(2, 2, 1.0));
    Tape tape;
    Var p = tape.parameter(ps, "p");
    CHECK_THROWS_AS(tape.backward(p), ShapeError);
    Var l = ad::sum_all(p);
    tape.backward(l);
    CHECK_THROWS_AS(tape.backward(l), ContractViolation);
}

TEST_CASE("constants receive no gradient") {
    ParameterStore ps;
    ps.add("p", DenseArray(1, 2, 1.0));
    Tape tape;
    Var c = tape.constant(DenseArray(1, 2, 3.0));
    Var l = ad::sum_all(ad::add(tape.parameter(ps, "p"), c));
    tape.backward(l);
    CHECK(tape.grad(c) == nullptr);
}

TEST_CASE("fd_check closed forms") {
    ParameterStore ps;
    ps.add("p", DenseArray(1, 1, 3.0));
    auto square = [](Tape& t, ParameterStore& s) {
        Var p = t.parameter(s, "p");
        return ad::matmul(p, p);
    };
    FdReport r = fd_check(ps, square);
    REQUIRE(r.entries.size() == 1);
    CHECK(r.entries[0].analytic == doctest::Approx(6.0).epsilon(1e-15));
    CHECK(r.entries[0].rel_error < 1e-6);
    CHECK(ps.value("p")[0] == 3.0);

    auto constant = [](Tape& t, ParameterStore& s) {
        t.parameter(s, "p");
        return t.constant(DenseArray(1, 1, 2.5));
    };
    r = fd_check(ps, constant);
    CHECK(r.entries[0].analytic == 0.0);
    CHECK(r.entries[0].numeric == 0.0);
    CHECK(r.passed);
}

TEST_CASE("fd_check rejects bad steps and non-finite losses") {
    ParameterStore ps;
    // exp(709.5) is finite, exp(710.5) overflows.
    ps.add("p", DenseArray(1, 1, 0.7095));
    auto logp = [](Tape& t, ParameterStore& s) { return ad::exp(ad::scale(t.parameter(s, "p"), 1000.0)); };
    FdOptions o;
    o.step = 0.1;
    CHECK_THROWS_AS(fd_check(ps, logp, o), ContractViolation);
    o.step = 1e-3;
    try {
        fd_check(ps, logp, o);
        FAIL("expected EvaluationError");
    } catch (const EvaluationError& e) {
        CHECK(std::string(e.what()).find("p[0]") != std::string::npos);
    }
}

namespace {

// Each builder maps parameters a (3x4), b (4x3), s (1x1, positive) to a scalar
// through one operation under test plus a fixed random weighting.
struct OpCase {
    const char* name;
    std::function<Var(Tape&, Var a, Var b, Var s)> op;
};

// Random linear read-out u^T x w, so every output entry reaches the loss.
Var weigh(Tape& t, Var x, std::uint64_t seed) {
    Rng rng(seed);
    Var u = t.constant(random_array(rng, 1, x.rows()));
    Var w = t.constant(random_array(rng, x.cols(), 1));
    return ad::matmul(ad::matmul(u, x), w);
}

} // namespace

TEST_CASE("every operation matches central differences") {
    const std::vector<OpCase> cases = {
        {"matmul", [](Tape&, Var a, Var b, Var) { return ad::matmul(a, b); }},
        {"matmul_nt", [](Tape&, Var a, Var b, Var) { return ad::matmul_nt(a, ad::transpose(b)); }},
        {"transpose", [](Tape&, Var a, Var, Var) { return ad::transpose(a); }},
        {"add_sub", [](Tape&, Var a, Var b, Var) { return ad::sub(ad::add(a, ad::transpose(b)), ad::scale(a, 0.3)); }},
        {"add_const", [](Tape&, Var a, Var, Var) { return ad::add_const(a, 0.7); }},
        {"add_row", [](Tape&, Var a, Var b, Var) { return ad::add_row(a, ad::row(ad::transpose(b), 1)); }},
        {"mul_scalar", [](Tape&, Var a, Var, Var s) { return ad::mul_scalar(a, s); }},
        {"div_scalar", [](Tape&, Var a, Var, Var s) { return ad::div_scalar(a, ad::add_const(s, 1.0)); }},
        {"gather_rows", [](Tape&, Var a, Var, Var) { return ad::gather_rows(a, std::vector<std::size_t>{2, 0, 2}); }},
        {"element", [](Tape&, Var a, Var, Var) { return ad::element(a, 1, 2); }},
        {"concat_rows", [](Tape&, Var a, Var b, Var) {
             const Var parts[] = {a, ad::transpose(b), ad::row(a, 1)};
             return ad::concat_rows(parts);
         }},
        {"l2_normalize_rows", [](Tape&, Var a, Var, Var) { return ad::l2_normalize_rows(a); }},
        {"mean_rows", [](Tape&, Var a, Var, Var) { return ad::mean_rows(a); }},
        {"cosine", [](Tape&, Var a, Var b, Var) { return ad::cosine(ad::row(a, 0), ad::row(ad::transpose(b), 2)); }},
        {"exp", [](Tape&, Var a, Var, Var) { return ad::exp(a); }},
        {"log", [](Tape&, Var, Var, Var s) { return ad::log(ad::add_const(s, 1.0)); }},
        {"logsumexp_rows", [](Tape&, Var a, Var, Var) { return ad::logsumexp_rows(ad::scale(a, 5.0)); }},
        {"diagonal", [](Tape&, Var a, Var b, Var) { return ad::diagonal(ad::matmul(a, b)); }},
        {"mean_all", [](Tape&, Var a, Var, Var) { return ad::mean_all(ad::exp(a)); }},
    };
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (const auto& c : cases) {
            CAPTURE(c.name);
            CAPTURE(seed);
            Rng rng(seed);
            ParameterStore ps;
            ps.add("a", random_array(rng, 3, 4));
            ps.add("b", random_array(rng, 4, 3));
            ps.add("s", DenseArray(1, 1, rng.uniform(0.2, 1.0)));
            auto loss = [&](Tape& t, ParameterStore& s) {
                Var out = c.op(t, t.parameter(s, "a"), t.parameter(s, "b"), t.parameter(s, "s"));
                return weigh(t, out, seed + 100);
            };
            const FdReport r = fd_check(ps, loss);
            CHECK(r.passed);
            CHECK(r.max_rel_error <= 1e-4);
        }
    }
}
