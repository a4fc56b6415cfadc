#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "vkd/error.hpp"
#include "vkd/rng.hpp"
#include "vkd/tensor.hpp"

using namespace vkd;

using DTensor = TensorPtrT<double>;

namespace {

DTensor random_tensor(std::vector<int> dims, Rng& rng, double scale = 1.0) {
  auto t = tensor<double>(std::move(dims));
  for (auto& v : t->data) v = rng.normal() * scale;
  return t;
}

double check(const std::function<DTensor(const DTensor&)>& f, const DTensor& x,
             double step = 1e-5) {
  return gradient_check<double>(f, x, step);
}

}  // namespace

TEST_CASE("matmul values") {
  auto eye = tensor<double>({2, 2}, {1, 0, 0, 1});
  auto x = tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6});
  auto product = matmul(eye, x);
  CHECK(product->data == x->data);

  // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
  auto a = tensor<double>({2, 2}, {1, 2, 3, 4});
  auto b = tensor<double>({2, 1}, {1, 1});
  auto c = matmul(a, b);
  CHECK(c->data[0] == doctest::Approx(3.0));
  CHECK(c->data[1] == doctest::Approx(7.0));

  CHECK_THROWS_WITH_AS(matmul(a, tensor<double>({3, 1})), doctest::Contains("shape-mismatch"),
                       Error);
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(7);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  CHECK(check([&](const DTensor& t) { return sum_all(matmul(t, b)); }, a) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_all(matmul(a, t)); }, b) < 1e-4);
}

TEST_CASE("softmax rows") {
  auto uniform = tensor<double>({1, 4}, {2.5, 2.5, 2.5, 2.5});
  auto flat = softmax_rows(uniform);
  for (double v : flat->data) CHECK(v == doctest::Approx(0.25));

  auto row = tensor<double>({1, 2}, {0.0, std::log(3.0)});
  auto sm = softmax_rows(row);
  CHECK(sm->data[0] == doctest::Approx(0.25));
  CHECK(sm->data[1] == doctest::Approx(0.75));

  // shift invariance with a +1000 offset
  auto shifted = tensor<double>({1, 2}, {1000.0, 1000.0 + std::log(3.0)});
  auto sm2 = softmax_rows(shifted);
  CHECK(sm2->data[0] == doctest::Approx(sm->data[0]));
  CHECK(sm2->data[1] == doctest::Approx(sm->data[1]));

  // rows sum to one
  Rng rng(3);
  auto x = random_tensor({5, 7}, rng, 4.0);
  auto s = softmax_rows(x);
  for (int r = 0; r < 5; ++r) {
    double sum = 0;
    for (int c = 0; c < 7; ++c) sum += s->data[size_t(r) * 7 + c];
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("layer_norm values") {
  auto gain = full<double>({3}, 1.0);
  auto bias = tensor<double>({3});
  auto constant = full<double>({1, 3}, 5.0);
  auto zeroed = layer_norm(constant, gain, bias, 1e-12);
  for (double v : zeroed->data) CHECK(std::abs(v) < 1e-5);

  auto gain2 = full<double>({2}, 1.0);
  auto bias2 = tensor<double>({2});
  auto row = tensor<double>({1, 2}, {1.0, 3.0});
  auto normed = layer_norm(row, gain2, bias2, 1e-12);
  CHECK(normed->data[0] == doctest::Approx(-1.0));
  CHECK(normed->data[1] == doctest::Approx(1.0));

  // normalized rows have near-zero mean
  Rng rng(11);
  auto x = random_tensor({4, 6}, rng, 2.0);
  auto y = layer_norm(x, full<double>({6}, 1.0), tensor<double>({6}), 1e-12);
  for (int r = 0; r < 4; ++r) {
    double mean = 0;
    for (int c = 0; c < 6; ++c) mean += y->data[size_t(r) * 6 + c];
    CHECK(std::abs(mean / 6) < 1e-5);
  }
}

TEST_CASE("cross entropy values") {
  auto uniform = tensor<double>({2, 5});
  CHECK(cross_entropy(uniform, {0, 3})->data[0] == doctest::Approx(std::log(5.0)));

  auto confident = tensor<double>({1, 3}, {50.0, 0.0, 0.0});
  CHECK(cross_entropy(confident, {0})->data[0] == doctest::Approx(0.0).epsilon(1e-9));

  auto row = tensor<double>({1, 2}, {0.0, std::log(3.0)});
  CHECK(cross_entropy(row, {1})->data[0] == doctest::Approx(-std::log(0.75)));

  CHECK_THROWS_WITH_AS(cross_entropy(row, {2}), doctest::Contains("bad-label"), Error);
}

TEST_CASE("gradient_check on linear and composed functions") {
  Rng rng(5);
  auto x = random_tensor({3, 4}, rng);
  CHECK(check([](const DTensor& t) { return sum_all(t); }, x) < 1e-8);

  auto logits = random_tensor({3, 5}, rng);
  CHECK(check([](const DTensor& t) { return cross_entropy(t, {1, 0, 4}); }, logits) < 1e-4);

  auto bad = tensor<double>({1}, std::vector<double>{std::nan("")});
  CHECK_THROWS_WITH_AS(check([](const DTensor& t) { return sum_all(t); }, bad),
                       doctest::Contains("non-finite"), Error);
}

TEST_CASE("every differentiable op passes the finite-difference oracle") {
  Rng rng(17);
  auto x = random_tensor({2, 3}, rng);
  auto y = random_tensor({2, 3}, rng);
  auto b = random_tensor({3}, rng);

  CHECK(check([&](const DTensor& t) { return sum_squares(add(t, y)); }, x) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(sub(y, t)); }, x) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(add_bias(x, t)); }, b) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(add_bias(t, b)); }, x) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(scale(t, 3.5)); }, x) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(gelu(t)); }, x) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(tanh_op(t)); }, x) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(softmax_rows(t)); }, x) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(transpose2d(t)); }, x) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(reshape(t, {3, 2})); }, x) < 1e-4);

  auto gain = random_tensor({3}, rng);
  auto bias = random_tensor({3}, rng);
  CHECK(check([&](const DTensor& t) { return sum_squares(layer_norm(t, gain, bias, 1e-8)); }, x) <
        1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(layer_norm(x, t, bias, 1e-8)); }, gain) <
        1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(layer_norm(x, gain, t, 1e-8)); }, bias) <
        1e-4);

  auto a3 = random_tensor({2, 3, 4}, rng);
  auto b3 = random_tensor({2, 4, 2}, rng);
  CHECK(check([&](const DTensor& t) { return sum_squares(bmm(t, b3)); }, a3) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(bmm(a3, t)); }, b3) < 1e-4);
  auto c3 = random_tensor({2, 5, 4}, rng);
  CHECK(check([&](const DTensor& t) { return sum_squares(bmm_nt(t, c3)); }, a3) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(bmm_nt(a3, t)); }, c3) < 1e-4);

  auto table = random_tensor({6, 3}, rng);
  const std::vector<int> ids = {0, 5, 2, 5};
  CHECK(check([&](const DTensor& t) { return sum_squares(embedding_lookup(t, ids)); }, table) <
        1e-4);
  auto table2 = random_tensor({4, 3}, rng);
  const std::vector<Source> tags = {Source::Teacher, Source::Student, Source::Student,
                                    Source::Teacher};
  const std::vector<int> dual_ids = {0, 3, 2, 5};
  CHECK(check(
            [&](const DTensor& t) {
              return sum_squares(dual_embedding_lookup(t, table2, dual_ids, tags));
            },
            table) < 1e-4);
  CHECK(check(
            [&](const DTensor& t) {
              return sum_squares(dual_embedding_lookup(table, t, dual_ids, tags));
            },
            table2) < 1e-4);

  auto seq = random_tensor({2, 3, 4}, rng);
  CHECK(check([&](const DTensor& t) { return sum_squares(split_heads(t, 2)); }, seq) < 1e-4);
  auto heads = random_tensor({4, 3, 2}, rng);
  CHECK(check([&](const DTensor& t) { return sum_squares(merge_heads(t, 2)); }, heads) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(select_position(t, 1)); }, seq) < 1e-4);
  CHECK(check([&](const DTensor& t) { return sum_squares(gather_rows(t, {1, 0, 1})); }, x) < 1e-4);

  auto scores = random_tensor({4, 3, 3}, rng);
  auto attn_bias = tensor<double>({2, 3}, {0, 0, -10, 0, -10, -10});
  CHECK(check(
            [&](const DTensor& t) {
              return sum_squares(softmax_rows(add_attention_bias(t, attn_bias, 2)));
            },
            scores) < 1e-4);
}

TEST_CASE("backward accumulates over shared inputs") {
  auto x = tensor<double>({1}, {3.0}, true);
  auto twice = add(x, x);
  backward(sum_all(twice));
  CHECK(x->grad[0] == doctest::Approx(2.0));

  // diamond: (x+x) + (x+x) = 4x
  x->clear_grad();
  auto mid = add(x, x);
  backward(sum_all(add(mid, mid)));
  CHECK(x->grad[0] == doctest::Approx(4.0));
}

TEST_CASE("detach blocks gradient flow") {
  auto x = tensor<double>({2}, {1.0, 2.0}, true);
  auto loss = sum_squares(add(detach(x), x));
  backward(loss);
  // d/dx ||c + x||^2 with c frozen at x: 2(c+x) = 4x
  CHECK(x->grad[0] == doctest::Approx(4.0));
  CHECK(x->grad[1] == doctest::Approx(8.0));
}

TEST_CASE("deterministic kernels") {
  Rng rng(23);
  auto a = random_tensor({8, 8}, rng);
  auto b = random_tensor({8, 8}, rng);
  auto first = matmul(a, b);
  auto second = matmul(a, b);
  CHECK(first->data == second->data);  // bitwise
  auto s1 = softmax_rows(a);
  auto s2 = softmax_rows(a);
  CHECK(s1->data == s2->data);
}

TEST_CASE("float instantiation runs the same kernels") {
  auto a = tensor<float>({2, 2}, {1.f, 2.f, 3.f, 4.f}, true);
  auto b = tensor<float>({2, 1}, {1.f, 1.f});
  auto loss = sum_all(matmul(a, b));
  backward(loss);
  CHECK(loss->data[0] == doctest::Approx(10.f));
  CHECK(a->grad[0] == doctest::Approx(1.f));
  CHECK(all_finite(*a));
}
