#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tvclip/gradcheck.hpp"
#include "tvclip/rng.hpp"
#include "tvclip/tape.hpp"

using namespace tvclip;

namespace {

Array<double> random_array(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Array<double> a(std::move(s));
    for (auto& v : a.data) v = rng.uniform(lo, hi);
    return a;
}

// random values in [-2, -0.5] u [0.5, 2]: inside the contract's magnitude
// range but clear of the |x| kink
Array<double> random_away_from_zero(Shape s, Rng& rng) {
    Array<double> a(std::move(s));
    for (auto& v : a.data) {
        double m = rng.uniform(0.5, 2.0);
        v = rng.uniform() < 0.5 ? -m : m;
    }
    return a;
}

double check_against_fd(const LossBuilder<double>& f, const ParamMap<double>& params) {
    auto g = grad(f, params);
    auto fd = fd_oracle(f, params, 1e-4);
    return max_rel_err(g, fd);
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
    Tape<double> t;
    auto x = t.leaf(Array<double>({1, 3}, {0, 0, 0}));
    auto y = t.softmax_rows(x);
    for (double v : t.val(y)) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(7);
    Tape<double> t;
    auto x = t.leaf(random_array({5, 9}, rng));
    auto y = t.softmax_rows(x);
    for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 9; ++j) s += t.val(y)[i * 9 + j];
        CHECK(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("layernorm of a constant vector is exactly zero") {
    Tape<double> t;
    auto x = t.leaf(full<double>({1, 8}, 3.25));
    auto y = t.layernorm_rows(x);
    for (double v : t.val(y)) CHECK(v == 0.0);
}

TEST_CASE("matmul by identity reproduces the input exactly") {
    Rng rng(11);
    Tape<double> t;
    Array<double> eye({3, 3});
    for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
    Array<double> a = random_array({3, 5}, rng);
    auto y = t.matmul(t.leaf(eye), t.leaf(a));
    for (size_t i = 0; i < a.data.size(); ++i) CHECK(t.val(y)[i] == a.data[i]);
}

TEST_CASE("shape mismatch is rejected naming both shapes") {
    Tape<double> t;
    auto a = t.leaf(Array<double>({2, 3}));
    auto b = t.leaf(Array<double>({3, 2}));
    CHECK_THROWS_WITH_AS(t.add(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(t.matmul(a, a), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("non-finite output is rejected") {
    Tape<double> t;
    auto x = t.leaf(Array<double>({1, 1}, {0.0}));
    CHECK_THROWS_AS(t.log(x), std::runtime_error);
    auto big = t.leaf(Array<double>({1, 1}, {1e308}));
    CHECK_THROWS_AS(t.square(big), std::runtime_error);
}

TEST_CASE("concatenate then slice round-trips exactly") {
    Rng rng(3);
    for (int axis = 0; axis < 2; ++axis) {
        Tape<double> t;
        Array<double> a = random_array({4, 3}, rng);
        Array<double> b = random_array({4, 3}, rng);
        auto cat = t.concat(t.leaf(a), t.leaf(b), axis);
        auto back_a = t.slice(cat, axis, 0, 3 + (axis == 0 ? 1 : 0));
        auto back_b = t.slice(cat, axis, axis == 0 ? 4 : 3, axis == 0 ? 4 : 3);
        CHECK(t.val(back_a) == (axis == 0 ? a.data : a.data));
        CHECK(t.val(back_b) == b.data);
    }
}

TEST_CASE("3d slice along axis 0") {
    Tape<double> t;
    Array<double> a({2, 2, 3});
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] = static_cast<double>(i);
    auto s = t.slice(t.leaf(a), 0, 1, 1);
    CHECK(t.shape(s) == Shape{1, 2, 3});
    for (int i = 0; i < 6; ++i) CHECK(t.val(s)[i] == 6.0 + i);
}

TEST_CASE("grad of sum of squares") {
    LossBuilder<double> f = [](Tape<double>& t, const VarMap<double>& p) {
        return t.sum_all(t.square(p.at("p")));
    };
    ParamMap<double> params{{"p", Array<double>({1, 2}, {1, 2})}};
    auto g = grad(f, params);
    CHECK(g.at("p").data[0] == doctest::Approx(2.0));
    CHECK(g.at("p").data[1] == doctest::Approx(4.0));
}

TEST_CASE("constant loss yields exactly zero gradients") {
    LossBuilder<double> f = [](Tape<double>& t, const VarMap<double>&) {
        return t.leaf(Array<double>({1, 1}, {5.0}));
    };
    ParamMap<double> params{{"p", Array<double>({3, 3}, std::vector<double>(9, 1.0))}};
    auto g = grad(f, params);
    for (double v : g.at("p").data) CHECK(v == 0.0);
}

TEST_CASE("parameter not reachable from the loss gets exact zeros") {
    LossBuilder<double> f = [](Tape<double>& t, const VarMap<double>& p) {
        return t.sum_all(t.square(p.at("used")));
    };
    ParamMap<double> params{{"used", Array<double>({2, 2}, {1, 2, 3, 4})},
                            {"unused", Array<double>({4, 1}, {9, 9, 9, 9})}};
    auto g = grad(f, params);
    for (double v : g.at("unused").data) CHECK(v == 0.0);
    CHECK(g.at("used").data[3] == doctest::Approx(8.0));
}

TEST_CASE("non-scalar loss is rejected") {
    LossBuilder<double> f = [](Tape<double>& t, const VarMap<double>& p) { return p.at("p"); };
    ParamMap<double> params{{"p", Array<double>({2, 2})}};
    CHECK_THROWS_AS(grad(f, params), std::invalid_argument);
}

TEST_CASE("fd oracle on x squared at 3") {
    LossBuilder<double> f = [](Tape<double>& t, const VarMap<double>& p) { return t.sum_all(t.square(p.at("x"))); };
    ParamMap<double> params{{"x", Array<double>({1, 1}, {3.0})}};
    auto fd = fd_oracle(f, params, 1e-4);
    CHECK(std::abs(fd.at("x").data[0] - 6.0) < 1e-7);
}

TEST_CASE("fd oracle flags the kink of |x| at zero") {
    LossBuilder<double> f = [](Tape<double>& t, const VarMap<double>& p) { return t.sum_all(t.abs(p.at("x"))); };
    ParamMap<double> params{{"x", Array<double>({1, 1}, {0.0})}};
    std::vector<FdFlag> flags;
    fd_oracle(f, params, 1e-4, &flags);
    REQUIRE(flags.size() == 1);
    CHECK(flags[0].param == "x");
    CHECK(flags[0].forward_est == doctest::Approx(1.0));
    CHECK(flags[0].backward_est == doctest::Approx(-1.0));
}

TEST_CASE("fd oracle rejects step sizes outside its range") {
    LossBuilder<double> f = [](Tape<double>& t, const VarMap<double>& p) { return t.sum_all(p.at("x")); };
    ParamMap<double> params{{"x", Array<double>({1, 1}, {1.0})}};
    CHECK_THROWS_AS(fd_oracle(f, params, 1e-2), std::invalid_argument);
    CHECK_THROWS_AS(fd_oracle(f, params, 1e-7), std::invalid_argument);
}

TEST_CASE("every primitive matches the fd oracle over 20 seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(derive_seed(17, seed));
        const Array<double> a = random_array({3, 4}, rng);
        const Array<double> b = random_array({3, 4}, rng);
        const Array<double> m = random_array({4, 5}, rng);
        const Array<double> pos = random_array({3, 4}, rng, 0.5, 2.0);
        const Array<double> nz = random_away_from_zero({3, 4}, rng);
        const Array<double> rv = random_array({1, 4}, rng);
        const Array<double> cv = random_array({3, 1}, rng);

        auto one = [&](const char* name, const LossBuilder<double>& f, const ParamMap<double>& params) {
            INFO("primitive: " << name << " seed " << seed);
            CHECK(check_against_fd(f, params) < 1e-4);
        };

        using T = Tape<double>;
        using V = VarMap<double>;
        auto red = [](T& t, Var<double> v) { return t.mean_all(t.square(v)); };

        one("add", [&](T& t, const V& p) { return red(t, t.add(p.at("a"), p.at("b"))); }, {{"a", a}, {"b", b}});
        one("sub", [&](T& t, const V& p) { return red(t, t.sub(p.at("a"), p.at("b"))); }, {{"a", a}, {"b", b}});
        one("mul", [&](T& t, const V& p) { return red(t, t.mul(p.at("a"), p.at("b"))); }, {{"a", a}, {"b", b}});
        one("scale", [&](T& t, const V& p) { return red(t, t.scale(p.at("a"), 1.7)); }, {{"a", a}});
        one("add_scalar", [&](T& t, const V& p) { return red(t, t.add_scalar(p.at("a"), 0.3)); }, {{"a", a}});
        one("exp", [&](T& t, const V& p) { return red(t, t.exp(p.at("a"))); }, {{"a", a}});
        one("log", [&](T& t, const V& p) { return red(t, t.log(p.at("a"))); }, {{"a", pos}});
        one("abs", [&](T& t, const V& p) { return red(t, t.abs(p.at("a"))); }, {{"a", nz}});
        one("square", [&](T& t, const V& p) { return red(t, t.square(p.at("a"))); }, {{"a", a}});
        one("sqrt", [&](T& t, const V& p) { return red(t, t.sqrt(p.at("a"))); }, {{"a", pos}});
        one("reciprocal", [&](T& t, const V& p) { return red(t, t.reciprocal(p.at("a"))); }, {{"a", nz}});
        one("gelu", [&](T& t, const V& p) { return red(t, t.gelu(p.at("a"))); }, {{"a", a}});
        one("matmul", [&](T& t, const V& p) { return red(t, t.matmul(p.at("a"), p.at("m"))); },
            {{"a", a}, {"m", m}});
        one("matmul_nt", [&](T& t, const V& p) { return red(t, t.matmul_nt(p.at("a"), p.at("b"))); },
            {{"a", a}, {"b", b}});
        one("softmax_rows", [&](T& t, const V& p) { return red(t, t.softmax_rows(p.at("a"))); }, {{"a", a}});
        one("log_softmax_rows", [&](T& t, const V& p) { return red(t, t.log_softmax_rows(p.at("a"))); }, {{"a", a}});
        one("layernorm_rows", [&](T& t, const V& p) { return red(t, t.layernorm_rows(p.at("a"))); }, {{"a", a}});
        one("add_rowvec", [&](T& t, const V& p) { return red(t, t.add_rowvec(p.at("a"), p.at("v"))); },
            {{"a", a}, {"v", rv}});
        one("mul_rowvec", [&](T& t, const V& p) { return red(t, t.mul_rowvec(p.at("a"), p.at("v"))); },
            {{"a", a}, {"v", rv}});
        one("mul_colvec", [&](T& t, const V& p) { return red(t, t.mul_colvec(p.at("a"), p.at("u"))); },
            {{"a", a}, {"u", cv}});
        one("sum_axis0", [&](T& t, const V& p) { return red(t, t.sum_axis0(p.at("a"))); }, {{"a", a}});
        one("mean_axis0", [&](T& t, const V& p) { return red(t, t.mean_axis0(p.at("a"))); }, {{"a", a}});
        one("sum_axis1", [&](T& t, const V& p) { return red(t, t.sum_axis1(p.at("a"))); }, {{"a", a}});
        one("mean_axis1", [&](T& t, const V& p) { return red(t, t.mean_axis1(p.at("a"))); }, {{"a", a}});
        one("sum_all", [&](T& t, const V& p) { return t.square(t.sum_all(p.at("a"))); }, {{"a", a}});
        one("mean_all", [&](T& t, const V& p) { return t.square(t.mean_all(p.at("a"))); }, {{"a", a}});
        one("concat0", [&](T& t, const V& p) { return red(t, t.concat(p.at("a"), p.at("b"), 0)); },
            {{"a", a}, {"b", b}});
        one("concat1", [&](T& t, const V& p) { return red(t, t.concat(p.at("a"), p.at("b"), 1)); },
            {{"a", a}, {"b", b}});
        one("slice", [&](T& t, const V& p) { return red(t, t.slice(p.at("a"), 1, 1, 2)); }, {{"a", a}});
        one("reshape", [&](T& t, const V& p) { return red(t, t.reshape(p.at("a"), {4, 3})); }, {{"a", a}});
        one("pick_per_row", [&](T& t, const V& p) { return red(t, t.pick_per_row(p.at("a"), {1, 0, 3})); },
            {{"a", a}});
    }
}

TEST_CASE("three layer toy network gradient matches the fd oracle") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(derive_seed(23, seed));
        ParamMap<double> params;
        params["w1"] = random_array({6, 8}, rng, -0.5, 0.5);
        params["b1"] = random_array({1, 8}, rng, -0.5, 0.5);
        params["w2"] = random_array({8, 8}, rng, -0.5, 0.5);
        params["b2"] = random_array({1, 8}, rng, -0.5, 0.5);
        params["w3"] = random_array({8, 3}, rng, -0.5, 0.5);
        const Array<double> x = random_array({4, 6}, rng);

        LossBuilder<double> f = [&x](Tape<double>& t, const VarMap<double>& p) {
            auto h = t.gelu(t.add_rowvec(t.matmul(t.constant(x), p.at("w1")), p.at("b1")));
            h = t.gelu(t.add_rowvec(t.matmul(h, p.at("w2")), p.at("b2")));
            auto logits = t.matmul(h, p.at("w3"));
            auto ls = t.log_softmax_rows(logits);
            return t.scale(t.mean_all(t.pick_per_row(ls, {0, 1, 2, 0})), -1.0);
        };
        CHECK(check_against_fd(f, params) < 1e-4);
    }
}
