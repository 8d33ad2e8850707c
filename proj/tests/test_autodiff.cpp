#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "focus/autodiff.hpp"
#include "focus/imaging.hpp"
#include "focus/rng.hpp"
#include "focus/tensor.hpp"
#include "testutil.hpp"

using focus::Tensor;
namespace ad = focus::ad;
using focus::test::check_grads;
using focus::test::random_tensor;
using focus::test::weighted_sum;

TEST_CASE("gradients accumulate across multiple uses of a node") {
  ad::Tape tape;
  ad::Node* x = tape.leaf(Tensor({2, 2}, {1, 2, 3, 4}), true);
  ad::Node* y = ad::add(x, x);
  ad::Node* s = ad::sum_all(y);
  CHECK(s->value[0] == 20.0);
  tape.backward(s);
  for (int i = 0; i < 4; ++i) CHECK(x->grad[i] == 2.0);
  // repeated sweeps start from clean gradients
  tape.backward(s);
  for (int i = 0; i < 4; ++i) CHECK(x->grad[i] == 2.0);
}

TEST_CASE("backward ignores nodes created after the root") {
  ad::Tape tape;
  ad::Node* x = tape.leaf(Tensor({2}, {1.0, 2.0}), true);
  ad::Node* s = ad::sum_all(x);
  ad::Node* later = ad::scale(x, 100.0);
  (void)later;
  tape.backward(s);
  CHECK(x->grad[0] == 1.0);
  CHECK(x->grad[1] == 1.0);
}

TEST_CASE("matmul value and gradients") {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3, 2}, {7, 8, 9, 10, 11, 12});
  {
    ad::Tape tape;
    ad::Node* n = ad::matmul(tape.leaf(a, false), tape.leaf(b, false));
    CHECK(n->value.at(0, 0) == 58.0);
    CHECK(n->value.at(0, 1) == 64.0);
    CHECK(n->value.at(1, 0) == 139.0);
    CHECK(n->value.at(1, 1) == 154.0);
  }
  check_grads({random_tensor({3, 4}, 1), random_tensor({4, 2}, 2)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::matmul(l[0], l[1]));
              });
}

TEST_CASE("elementwise op gradients") {
  auto x = random_tensor({3, 3}, 3);
  auto y = random_tensor({3, 3}, 4);
  check_grads({x, y}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::add(l[0], l[1]));
  });
  check_grads({x, y}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::sub(l[0], l[1]));
  });
  check_grads({x, y}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::hadamard(l[0], l[1]));
  });
  check_grads({x}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::scale(l[0], -2.5));
  });
}

TEST_CASE("scale_by scalar node gradients") {
  check_grads({random_tensor({2, 3}, 5), Tensor::scalar(0.7)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::scale_by(l[0], l[1]));
              });
}

TEST_CASE("row and channel broadcast gradients") {
  check_grads({random_tensor({4, 3}, 6), random_tensor({3}, 7)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::add_rowvec(l[0], l[1]));
              });
  check_grads({random_tensor({4, 3}, 8), random_tensor({3}, 9)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::mul_rowvec(l[0], l[1]));
              });
  check_grads({random_tensor({4, 3}, 10), random_tensor({4}, 11)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::scale_rows(l[0], l[1]));
              });
  check_grads({random_tensor({3, 4, 2}, 12), random_tensor({2}, 13)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::add_chanvec(l[0], l[1]));
              });
  check_grads({random_tensor({3, 4, 2}, 14), random_tensor({2}, 15)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::mul_chanvec(l[0], l[1]));
              });
}

TEST_CASE("shape op gradients") {
  check_grads({random_tensor({3, 5}, 16)}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::transpose(l[0]));
  });
  check_grads({random_tensor({3, 4}, 17)}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::reshape(l[0], {2, 6}));
  });
  check_grads({random_tensor({3, 6}, 18)}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::slice_cols(l[0], 1, 4));
  });
  check_grads({random_tensor({3, 2}, 19), random_tensor({3, 4}, 20)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::concat_cols(l[0], l[1]));
              });
}

TEST_CASE("row_softmax values and gradients") {
  {
    ad::Tape tape;
    ad::Node* x = tape.leaf(Tensor({2, 3}, {1000.0, 1000.0, 1000.0, 0.0, std::log(2.0), 0.0}),
                            false);
    ad::Node* y = ad::row_softmax(x);
    for (int j = 0; j < 3; ++j) CHECK(y->value.at(0, j) == Catch::Approx(1.0 / 3).margin(1e-12));
    CHECK(y->value.at(1, 1) == Catch::Approx(0.5).margin(1e-12));
    double row1 = y->value.at(1, 0) + y->value.at(1, 1) + y->value.at(1, 2);
    CHECK(row1 == Catch::Approx(1.0).margin(1e-12));
  }
  check_grads({random_tensor({4, 5}, 21, -2, 2)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::row_softmax(l[0]));
              });
}

TEST_CASE("layer_norm_rows normalizes and differentiates") {
  Tensor x = random_tensor({3, 8}, 22, -3, 3);
  {
    ad::Tape tape;
    ad::Node* y = ad::layer_norm_rows(tape.leaf(x, false));
    for (int i = 0; i < 3; ++i) {
      double mu = 0, var = 0;
      for (int j = 0; j < 8; ++j) mu += y->value.at(i, j);
      mu /= 8;
      for (int j = 0; j < 8; ++j) var += (y->value.at(i, j) - mu) * (y->value.at(i, j) - mu);
      var /= 8;
      CHECK(mu == Catch::Approx(0.0).margin(1e-12));
      CHECK(var == Catch::Approx(1.0).margin(1e-6));  // eps shifts variance slightly
    }
  }
  check_grads({x}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::layer_norm_rows(l[0]));
  });
}

TEST_CASE("norm_all normalizes the whole tensor") {
  Tensor x = random_tensor({2, 3, 4}, 23, -2, 2);
  {
    ad::Tape tape;
    ad::Node* y = ad::norm_all(tape.leaf(x, false));
    double mu = 0;
    for (std::int64_t i = 0; i < y->value.numel(); ++i) mu += y->value[i];
    mu /= static_cast<double>(y->value.numel());
    CHECK(mu == Catch::Approx(0.0).margin(1e-12));
  }
  check_grads({x}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::norm_all(l[0]));
  });
}

TEST_CASE("nonlinearities") {
  {
    ad::Tape tape;
    ad::Node* g = ad::gelu(tape.leaf(Tensor({3}, {0.0, 1.0, -10.0}), false));
    CHECK(g->value[0] == 0.0);
    CHECK(g->value[1] == Catch::Approx(0.8413447460685429).margin(1e-12));
    CHECK(g->value[2] == Catch::Approx(0.0).margin(1e-9));

    ad::Node* s = ad::sigmoid(tape.leaf(Tensor({3}, {0.0, -800.0, 800.0}), false));
    CHECK(s->value[0] == 0.5);
    CHECK(s->value[1] == Catch::Approx(0.0).margin(1e-12));
    CHECK(s->value[2] == Catch::Approx(1.0).margin(1e-12));
  }
  check_grads({random_tensor({3, 3}, 24, -2, 2)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::gelu(l[0]));
              });
  check_grads({random_tensor({3, 3}, 25, -3, 3)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::sigmoid(l[0]));
              });
}

TEST_CASE("log_clamped floors the argument and kills the gradient there") {
  ad::Tape tape;
  ad::Node* x = tape.leaf(Tensor({2}, {0.5, 1e-30}), true);
  ad::Node* y = ad::log_clamped(x, 1e-12);
  CHECK(y->value[0] == Catch::Approx(std::log(0.5)).margin(1e-15));
  CHECK(y->value[1] == Catch::Approx(std::log(1e-12)).margin(1e-15));
  tape.backward(ad::sum_all(y));
  CHECK(x->grad[0] == Catch::Approx(2.0).margin(1e-12));
  CHECK(x->grad[1] == 0.0);

  check_grads({random_tensor({4}, 26, 0.1, 2.0)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::log_clamped(l[0]));
              });
}

TEST_CASE("reductions") {
  check_grads({random_tensor({3, 4}, 27)}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    (void)t;
    return ad::mean_all(l[0]);
  });
  check_grads({random_tensor({3, 4}, 28)}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::mean_rows(l[0]));
  });
  check_grads({random_tensor({4, 6}, 29)}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::mean_cols_range(l[0], 2, 5));
  });
  check_grads({random_tensor({5, 3}, 30)}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::global_avg_pool(ad::reshape(l[0], {5, 3, 1})));
  });
}

TEST_CASE("colwise_max routes gradient to the first maximal row") {
  ad::Tape tape;
  ad::Node* x = tape.leaf(Tensor({2, 2}, {1.0, 5.0, 3.0, 5.0}), true);
  ad::Node* m = ad::colwise_max(x);
  CHECK(m->value[0] == 3.0);
  CHECK(m->value[1] == 5.0);
  tape.backward(ad::sum_all(m));
  CHECK(x->grad.at(0, 0) == 0.0);
  CHECK(x->grad.at(1, 0) == 1.0);
  CHECK(x->grad.at(0, 1) == 1.0);  // tie goes to the lowest row index
  CHECK(x->grad.at(1, 1) == 0.0);

  check_grads({random_tensor({6, 4}, 31)}, [](ad::Tape& t, const std::vector<ad::Node*>& l) {
    return weighted_sum(t, ad::colwise_max(l[0]));
  });
}

TEST_CASE("pick extracts one coordinate") {
  ad::Tape tape;
  ad::Node* x = tape.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), true);
  ad::Node* p = ad::pick(x, 1, 2);
  CHECK(p->value[0] == 6.0);
  tape.backward(p);
  for (int i = 0; i < 6; ++i) CHECK(x->grad[i] == (i == 5 ? 1.0 : 0.0));
}

TEST_CASE("conv2d values") {
  ad::Tape tape;
  Tensor img({3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor ker = Tensor::full({3, 3, 1, 1}, 1.0);
  ad::Node* out = ad::conv2d(tape.leaf(img, false), tape.leaf(ker, false), 1, 1);
  REQUIRE(out->value.shape() == std::vector<int>{3, 3, 1});
  CHECK(out->value.at3(1, 1, 0) == 45.0);
  CHECK(out->value.at3(0, 0, 0) == 12.0);  // zero padding outside

  Tensor img4 = random_tensor({4, 4, 2}, 32);
  Tensor ker4 = random_tensor({3, 3, 2, 3}, 33);
  ad::Node* s2 = ad::conv2d(tape.leaf(img4, false), tape.leaf(ker4, false), 2, 1);
  CHECK(s2->value.shape() == std::vector<int>{2, 2, 3});
}

TEST_CASE("conv2d gradients") {
  check_grads({random_tensor({5, 4, 2}, 34), random_tensor({3, 3, 2, 3}, 35)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::conv2d(l[0], l[1], 2, 1));
              });
}

TEST_CASE("upsample_bilinear matches the imaging resize and differentiates") {
  Tensor m = random_tensor({3, 4}, 36);
  Tensor m3({3, 4, 1});
  for (std::int64_t i = 0; i < m.numel(); ++i) m3[i] = m[i];
  ad::Tape tape;
  ad::Node* up = ad::upsample_bilinear(tape.leaf(m3, false), 6, 7);
  Tensor want = focus::imaging::resize_bilinear(m, 6, 7);
  for (std::int64_t i = 0; i < want.numel(); ++i)
    CHECK(up->value[i] == Catch::Approx(want[i]).margin(1e-12));

  check_grads({random_tensor({3, 3, 2}, 37)},
              [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                return weighted_sum(t, ad::upsample_bilinear(l[0], 6, 5));
              });
}

TEST_CASE("bce_with_logits value and gradient") {
  Tensor z({2, 2}, {0.3, -1.2, 2.0, 0.0});
  Tensor t({2, 2}, {1.0, 0.0, 0.5, 1.0});
  ad::Tape tape;
  ad::Node* loss = ad::bce_with_logits(tape.leaf(z, false), t);
  double want = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z[i]));
    want += -(t[i] * std::log(s) + (1.0 - t[i]) * std::log(1.0 - s));
  }
  want /= 4.0;
  CHECK(loss->value[0] == Catch::Approx(want).margin(1e-12));

  check_grads({random_tensor({3, 3}, 38, -2, 2)},
              [t = random_tensor({3, 3}, 39, 0, 1)](ad::Tape& tp, const std::vector<ad::Node*>& l) {
                (void)tp;
                return ad::bce_with_logits(l[0], t);
              });
}
