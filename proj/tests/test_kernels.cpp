#include <doctest.h>

#include <cmath>
#include <vector>

#include "rflx/kernels.hpp"
#include "rflx/model.hpp"
#include "rflx/util.hpp"

using namespace rflx;
namespace k = rflx::kernels;

namespace {

std::vector<double> randoms(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  // Mixed magnitudes so rounding differences would show.
  for (double& x : v) x = rng.normal() * std::pow(10.0, static_cast<int>(rng.next_u64() % 7) - 3);
  return v;
}

struct LevelGuard {
  k::Level saved = k::active_level();
  ~LevelGuard() { k::set_level(saved); }
};

}  // namespace

TEST_CASE("level names parse and unsupported levels are refused") {
  CHECK(k::parse_level("scalar") == k::Level::Scalar);
  CHECK(k::parse_level("avx2") == k::Level::Avx2);
  CHECK(k::level_name(k::Level::Scalar) == "scalar");
  CHECK(k::level_supported(k::Level::Scalar));
  CHECK_THROWS(k::parse_level("neon"));
  LevelGuard guard;
  if (!k::level_supported(k::Level::Avx2)) CHECK_THROWS(k::set_level(k::Level::Avx2));
}

TEST_CASE("scalar dot and sum match a long-double reference") {
  Rng rng(1);
  for (std::size_t n : {0u, 1u, 2u, 3u, 4u, 5u, 7u, 8u, 9u, 31u, 64u, 100u, 1001u}) {
    const auto a = randoms(rng, n), b = randoms(rng, n);
    long double dref = 0, sref = 0, mag = 0;
    for (std::size_t i = 0; i < n; ++i) {
      dref += static_cast<long double>(a[i]) * b[i];
      sref += a[i];
      mag += std::abs(static_cast<long double>(a[i]) * b[i]) + std::abs(a[i]);
    }
    const double tol = 1e-13 * static_cast<double>(mag) + 1e-300;
    CHECK(std::abs(k::scalar::dot(a.data(), b.data(), n) - static_cast<double>(dref)) <= tol);
    CHECK(std::abs(k::scalar::sum(a.data(), n) - static_cast<double>(sref)) <= tol);
  }
}

TEST_CASE("scalar vec_mat matches a naive product") {
  Rng rng(2);
  for (auto [in, out] : {std::pair<std::size_t, std::size_t>{1, 1}, {3, 5}, {8, 8}, {17, 9}, {64, 33}}) {
    const auto x = randoms(rng, in), w = randoms(rng, in * out);
    std::vector<double> y(out), scratch(k::vec_mat_scratch_size(in, out));
    k::scalar::vec_mat(x.data(), in, w.data(), out, out, y.data(), scratch.data());
    for (std::size_t j = 0; j < out; ++j) {
      long double ref = 0, mag = 0;
      for (std::size_t i = 0; i < in; ++i) {
        ref += static_cast<long double>(x[i]) * w[i * out + j];
        mag += std::abs(static_cast<long double>(x[i]) * w[i * out + j]);
      }
      CHECK(std::abs(y[j] - static_cast<double>(ref)) <= 1e-13 * static_cast<double>(mag) + 1e-300);
    }
  }
}

#if defined(RFLX_HAVE_AVX2)
TEST_CASE("avx2 kernels are bit-identical to scalar") {
  if (!k::level_supported(k::Level::Avx2)) {
    MESSAGE("CPU lacks AVX2; equivalence not exercised");
    return;
  }
  Rng rng(3);
  for (std::size_t n = 0; n < 140; ++n) {
    const auto a = randoms(rng, n), b = randoms(rng, n);
    CHECK(k::avx2::dot(a.data(), b.data(), n) == k::scalar::dot(a.data(), b.data(), n));
    CHECK(k::avx2::sum(a.data(), n) == k::scalar::sum(a.data(), n));
    auto y1 = randoms(rng, n);
    auto y2 = y1;
    k::avx2::axpy(0.37, a.data(), y1.data(), n);
    k::scalar::axpy(0.37, a.data(), y2.data(), n);
    CHECK(y1 == y2);
  }
  for (std::size_t in : {1u, 2u, 5u, 8u, 13u, 32u, 64u}) {
    for (std::size_t out : {1u, 3u, 4u, 7u, 16u, 33u}) {
      const std::size_t stride = out + in % 3;
      const auto x = randoms(rng, in), w = randoms(rng, in * stride);
      std::vector<double> ys(out), ya(out), scratch(k::vec_mat_scratch_size(in, out));
      k::scalar::vec_mat(x.data(), in, w.data(), stride, out, ys.data(), scratch.data());
      k::avx2::vec_mat(x.data(), in, w.data(), stride, out, ya.data(), scratch.data());
      CHECK(ys == ya);
    }
  }
}

TEST_CASE("model forward is bit-identical across kernel levels") {
  if (!k::level_supported(k::Level::Avx2)) return;
  LevelGuard guard;
  ModelConfig cfg;
  cfg.vocab_size = 40;
  cfg.hidden_dim = 24;
  cfg.n_heads = 3;
  cfg.mlp_hidden = 40;
  cfg.pos_dim = 8;
  const Model model(cfg, Weights::random(cfg, 5));
  const std::vector<TokenId> toks{1, 7, 3, 39, 0, 22, 5};
  k::set_level(k::Level::Scalar);
  const ForwardResult a = model.forward(toks);
  k::set_level(k::Level::Avx2);
  const ForwardResult b = model.forward(toks);
  CHECK(a.logits == b.logits);
}
#endif
