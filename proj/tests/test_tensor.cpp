#include <doctest.h>

#include <vector>

#include "floodseg/ops.hpp"
#include "floodseg/tensor.hpp"

using namespace floodseg;

TEST_CASE("tensor shape and storage invariants") {
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.dim(0) == 2);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(t.dim(2), InvalidParam);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeMismatch);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), InvalidParam);

    Tensor copy = t;
    copy.data()[0] = 42.0;
    CHECK(t.data()[0] == 42.0);  // copies alias storage
    CHECK(t.same_storage(copy));
}

TEST_CASE("item() demands a scalar") {
    CHECK(Tensor::scalar(3.5).item() == 3.5);
    CHECK_THROWS_AS(Tensor::from({2}, {1, 2}).item(), NotScalar);
}

TEST_CASE("grad buffer matches data length and clears") {
    Tensor t = Tensor::zeros({3, 4}, true);
    CHECK(!t.has_grad());
    CHECK(t.grad().size() == 12);
    CHECK(t.has_grad());
    t.clear_grad();
    CHECK(!t.has_grad());
}

TEST_CASE("backward on sum gives all-ones gradient") {
    Tensor x = Tensor::from({2, 3}, {1, -2, 3, 0.5, 4, -1}, true);
    Tape tape;
    Tensor loss = sum_all(x);
    tape.backward(loss);
    REQUIRE(x.has_grad());
    for (double g : x.grad()) CHECK(g == 1.0);
    CHECK(tape.size() == 0);  // consumed
}

TEST_CASE("backward through x*x gives 2x") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    tape.backward(sum_all(mul(x, x)));
    REQUIRE(x.has_grad());
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar losses") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), NotScalar);
}

TEST_CASE("every requires-grad leaf reachable from the loss gets a gradient") {
    Tensor a = Tensor::from({2}, {1, 2}, true);
    Tensor b = Tensor::from({2}, {3, 4}, true);
    Tensor unused = Tensor::from({2}, {5, 6}, true);
    Tape tape;
    tape.backward(sum_all(mul(a, b)));
    CHECK(a.has_grad());
    CHECK(b.has_grad());
    CHECK(!unused.has_grad());
}

TEST_CASE("no recording happens without an active tape") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    CHECK(!y.requires_grad());
    CHECK(!x.has_grad());
}

TEST_CASE("a tensor used twice accumulates both contributions") {
    Tensor x = Tensor::from({1}, {3}, true);
    Tape tape;
    // loss = x*x + x  =>  d/dx = 2x + 1 = 7
    tape.backward(add(mul(x, x), x));
    CHECK(x.grad()[0] == doctest::Approx(7.0).epsilon(1e-12));
}
