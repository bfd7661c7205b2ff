#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fpcnn/error.hpp"
#include "fpcnn/nn.hpp"
#include "fpcnn/rng.hpp"

using fpcnn::Error;
using fpcnn::ErrorCode;
using fpcnn::SplitMix64;
namespace nn = fpcnn::nn;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::pipeline_error;
}

// Reference convolution built on an explicitly zero-padded buffer, so the
// arithmetic route differs from the production kernel.
std::vector<double> conv_ref(const std::vector<double>& in, std::size_t cin,
                             std::size_t n, const std::vector<double>& w,
                             const std::vector<double>& b, std::size_t cout) {
  const std::size_t pn = n + 2;
  std::vector<double> padded(cin * pn * pn, 0.0);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        padded[(c * pn + y + 1) * pn + x + 1] = in[(c * n + y) * n + x];
      }
    }
  }
  std::vector<double> out(cout * n * n, 0.0);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        double acc = b[co];
        for (std::size_t ci = 0; ci < cin; ++ci) {
          for (std::size_t ky = 0; ky < 3; ++ky) {
            for (std::size_t kx = 0; kx < 3; ++kx) {
              acc += w[((co * cin + ci) * 3 + ky) * 3 + kx] *
                     padded[(ci * pn + y + ky) * pn + x + kx];
            }
          }
        }
        out[(co * n + y) * n + x] = acc;
      }
    }
  }
  return out;
}

std::vector<double> pool_ref(const std::vector<double>& in, std::size_t ch,
                             std::size_t n) {
  const std::size_t m = (n + 1) / 2;
  std::vector<double> out(ch * m * m);
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t y = 0; y < m; ++y) {
      for (std::size_t x = 0; x < m; ++x) {
        double best = -1e300;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            if (2 * y + dy >= n || 2 * x + dx >= n) continue;
            best = std::max(best, in[(c * n + 2 * y + dy) * n + 2 * x + dx]);
          }
        }
        out[(c * m + y) * m + x] = best;
      }
    }
  }
  return out;
}

double forward_ref(const nn::Model& model, const std::vector<double>& pixels,
                   const std::array<double, 3>& pos) {
  const nn::ModelConfig& cfg = model.config();
  const auto ts = model.tensors();
  const std::size_t p = cfg.patch_size;
  const std::size_t p1 = (p + 1) / 2, q = (p1 + 1) / 2;
  const std::size_t flat = cfg.conv2_channels * q * q;

  std::vector<double> a1 = conv_ref(pixels, 1, p, ts[0]->value, ts[1]->value,
                                    cfg.conv1_channels);
  for (double& v : a1) v = v > 0.0 ? v : 0.0;
  const std::vector<double> m1 = pool_ref(a1, cfg.conv1_channels, p);

  std::vector<double> a2 = conv_ref(m1, cfg.conv1_channels, p1, ts[2]->value,
                                    ts[3]->value, cfg.conv2_channels);
  for (double& v : a2) v = v > 0.0 ? v : 0.0;
  const std::vector<double> m2 = pool_ref(a2, cfg.conv2_channels, p1);

  std::vector<double> hid(cfg.hidden_units);
  for (std::size_t u = 0; u < cfg.hidden_units; ++u) {
    double acc = ts[5]->value[u];
    for (std::size_t f = 0; f < flat; ++f) {
      acc += ts[4]->value[u * flat + f] * m2[f];
    }
    hid[u] = acc > 0.0 ? acc : 0.0;
  }
  double z = ts[7]->value[0];
  for (std::size_t u = 0; u < cfg.hidden_units; ++u) {
    z += ts[6]->value[u] * hid[u];
  }
  for (std::size_t t = 0; t < 3; ++t) {
    z += ts[6]->value[cfg.hidden_units + t] * (cfg.use_position ? pos[t] : 0.0);
  }
  return 1.0 / (1.0 + std::exp(-z));
}

std::vector<double> random_pixels(std::size_t n, std::uint64_t seed) {
  std::vector<double> v(n);
  SplitMix64 rng(seed);
  for (double& x : v) x = rng.next_unit();
  return v;
}

}  // namespace

TEST_CASE("binary cross entropy is clamped and exact at known points") {
  CHECK(nn::bce_loss(0.5, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(nn::bce_loss(0.5, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(nn::bce_loss(0.9, 1.0) ==
        doctest::Approx(-std::log(0.9)).epsilon(1e-15));
  CHECK(std::isfinite(nn::bce_loss(0.0, 1.0)));
  CHECK(std::isfinite(nn::bce_loss(1.0, 0.0)));
  CHECK(nn::bce_loss(0.0, 1.0) == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
  CHECK(nn::bce_loss(1.0, 1.0) < 1e-11);
}

TEST_CASE("parameter inventory matches the architecture arithmetic") {
  const nn::ModelConfig cfg;  // 9 / 8 / 16 / 32, position on
  const nn::Model model(cfg, 1);
  // conv1 8*9+8, conv2 16*8*9+16, dense 32*144+32, out 35+1
  CHECK(model.parameter_count() == 72 + 8 + 1152 + 16 + 4608 + 32 + 35 + 1);

  nn::ModelConfig no_pos = cfg;
  no_pos.use_position = false;
  // the ablation keeps the parameter vector shape
  CHECK(nn::Model(no_pos, 1).parameter_count() == model.parameter_count());

  const auto ts = model.tensors();
  REQUIRE(ts.size() == 8);
  const char* names[] = {"conv1_w", "conv1_b", "conv2_w", "conv2_b",
                         "dense1_w", "dense1_b", "out_w", "out_b"};
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(ts[i]->name == names[i]);
    CHECK(ts[i]->grad.size() == ts[i]->value.size());
    CHECK(ts[i]->m.size() == ts[i]->value.size());
    CHECK(ts[i]->v.size() == ts[i]->value.size());
  }

  CHECK(code_of([] { nn::Model({4, 1, 1, 1, true}, 1); }) ==
        ErrorCode::invalid_argument);
  CHECK(code_of([] { nn::Model({9, 0, 1, 1, true}, 1); }) ==
        ErrorCode::invalid_argument);
}

TEST_CASE("initialization is seeded, bounded, and bias free") {
  const nn::ModelConfig cfg{9, 4, 6, 10, true};
  const nn::Model a(cfg, 42);
  const nn::Model b(cfg, 42);
  const nn::Model c(cfg, 43);
  const auto ta = a.tensors(), tb = b.tensors(), tc = c.tensors();
  bool differs = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i]->value == tb[i]->value);
    differs = differs || ta[i]->value != tc[i]->value;
  }
  CHECK(differs);

  for (double v : ta[1]->value) CHECK(v == 0.0);
  for (double v : ta[3]->value) CHECK(v == 0.0);
  for (double v : ta[5]->value) CHECK(v == 0.0);
  for (double v : ta[7]->value) CHECK(v == 0.0);
  const double lim1 = std::sqrt(6.0 / 9.0);
  for (double v : ta[0]->value) CHECK(std::abs(v) <= lim1);
  const double lim2 = std::sqrt(6.0 / (4.0 * 9.0));
  for (double v : ta[2]->value) CHECK(std::abs(v) <= lim2);
}

TEST_CASE("forward pass matches an independently padded reference") {
  const nn::ModelConfig shapes[] = {
      {3, 1, 1, 1, true},  {5, 2, 3, 4, true},   {7, 3, 2, 5, false},
      {9, 8, 16, 32, true}, {11, 2, 2, 3, true},
  };
  std::uint64_t seed = 900;
  for (const nn::ModelConfig& cfg : shapes) {
    const nn::Model model(cfg, ++seed);
    for (int rep = 0; rep < 4; ++rep) {
      const auto pixels =
          random_pixels(cfg.patch_size * cfg.patch_size, ++seed);
      SplitMix64 rng(++seed);
      const std::array<double, 3> pos{rng.next_gaussian(), rng.next_gaussian(),
                                      rng.next_unit()};
      const double got = model.predict(pixels, pos);
      const double want = forward_ref(model, pixels, pos);
      CHECK(got == doctest::Approx(want).epsilon(1e-12));
      CHECK(got > 0.0);
      CHECK(got < 1.0);
    }
  }
}

TEST_CASE("hand-traced forward on a pass-through network") {
  // all kernels are center taps, so the network reduces to
  // sigmoid(max(relu(pixels)) + w_pos . pos + bias)
  const nn::ModelConfig cfg{3, 1, 1, 1, true};
  nn::Model model(cfg, 0);
  auto ts = model.tensors();
  std::fill(ts[0]->value.begin(), ts[0]->value.end(), 0.0);
  ts[0]->value[4] = 1.0;  // conv1 center
  std::fill(ts[2]->value.begin(), ts[2]->value.end(), 0.0);
  ts[2]->value[4] = 1.0;  // conv2 center
  ts[4]->value = {1.0};   // dense pass-through
  ts[6]->value = {1.0, 0.5, 0.25, 0.125};
  ts[7]->value = {-0.1};

  const std::vector<double> pixels{-1.0, 2.0, 0.5, 3.0, -4.0, 1.0,
                                   0.25, -0.5, 7.0};
  const std::array<double, 3> pos{0.2, -0.4, 0.6};
  const double z = 7.0 + 0.5 * 0.2 + 0.25 * -0.4 + 0.125 * 0.6 - 0.1;
  CHECK(model.predict(pixels, pos) ==
        doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-14));

  // position off: the three extra inputs are zeroed, weights untouched
  nn::ModelConfig blind = cfg;
  blind.use_position = false;
  nn::Model deaf(blind, 0);
  auto td = deaf.tensors();
  for (std::size_t i = 0; i < td.size(); ++i) td[i]->value = ts[i]->value;
  const double z0 = 7.0 - 0.1;
  CHECK(deaf.predict(pixels, pos) ==
        doctest::Approx(1.0 / (1.0 + std::exp(-z0))).epsilon(1e-14));
  CHECK(deaf.predict(pixels, pos) == deaf.predict(pixels, {9.0, -9.0, 4.0}));
}

TEST_CASE("backpropagation agrees with central finite differences") {
  const nn::ModelConfig configs[] = {{5, 2, 2, 4, true}, {5, 2, 2, 4, false}};
  for (const nn::ModelConfig& cfg : configs) {
    nn::Model model(cfg, 321);
    const auto pixels = random_pixels(cfg.patch_size * cfg.patch_size, 5);
    const std::array<double, 3> pos{0.31, -0.57, 0.66};
    for (const double label : {1.0, 0.0}) {
      model.zero_gradients();
      const double prob = model.accumulate_gradient(pixels, pos, label);
      CHECK(prob > 0.0);
      CHECK(prob < 1.0);

      const double h = 1e-6;
      for (nn::Tensor* t : model.tensors()) {
        for (std::size_t i = 0; i < t->value.size(); ++i) {
          const double keep = t->value[i];
          t->value[i] = keep + h;
          const double up = nn::bce_loss(model.predict(pixels, pos), label);
          t->value[i] = keep - h;
          const double dn = nn::bce_loss(model.predict(pixels, pos), label);
          t->value[i] = keep;
          const double fd = (up - dn) / (2.0 * h);
          const double got = t->grad[i];
          CHECK(std::abs(fd - got) <=
                1e-6 + 1e-5 * std::max(std::abs(fd), std::abs(got)));
        }
      }
    }
  }
}

TEST_CASE("gradients accumulate, scale, and reset") {
  const nn::ModelConfig cfg{5, 2, 2, 3, true};
  nn::Model model(cfg, 7);
  const auto pixels = random_pixels(25, 6);
  const std::array<double, 3> pos{0.1, 0.2, 0.3};

  model.zero_gradients();
  model.accumulate_gradient(pixels, pos, 1.0);
  std::vector<std::vector<double>> once;
  for (nn::Tensor* t : model.tensors()) once.push_back(t->grad);

  model.accumulate_gradient(pixels, pos, 1.0);
  auto ts = model.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (std::size_t j = 0; j < once[i].size(); ++j) {
      CHECK(ts[i]->grad[j] == doctest::Approx(2.0 * once[i][j]).epsilon(1e-12));
    }
  }
  model.scale_gradients(0.5);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (std::size_t j = 0; j < once[i].size(); ++j) {
      CHECK(ts[i]->grad[j] == doctest::Approx(once[i][j]).epsilon(1e-12));
    }
  }
  model.zero_gradients();
  for (nn::Tensor* t : model.tensors()) {
    for (double g : t->grad) CHECK(g == 0.0);
  }

  CHECK(code_of([&] { model.accumulate_gradient(pixels, pos, 0.5); }) ==
        ErrorCode::invalid_argument);
  CHECK(code_of([&] {
          model.predict(std::vector<double>(24, 0.0), pos);
        }) == ErrorCode::invalid_argument);
}

TEST_CASE("adam follows the reference moment recursion") {
  const nn::ModelConfig cfg{3, 1, 1, 2, true};
  nn::Model model(cfg, 11);
  const nn::AdamConfig adam;
  CHECK(model.adam_step_count() == 0);

  // independent shadow state
  std::vector<std::vector<double>> value, m, v;
  for (const nn::Tensor* t : std::as_const(model).tensors()) {
    value.push_back(t->value);
    m.push_back(std::vector<double>(t->value.size(), 0.0));
    v.push_back(std::vector<double>(t->value.size(), 0.0));
  }

  const auto pixels = random_pixels(9, 3);
  SplitMix64 noise(99);
  for (int step = 1; step <= 3; ++step) {
    model.zero_gradients();
    model.accumulate_gradient(pixels, {0.4, 0.1, 0.9}, step % 2 ? 1.0 : 0.0);
    // capture this step's gradients into the shadow update
    auto ts = model.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) {
      for (std::size_t j = 0; j < value[i].size(); ++j) {
        const double g = ts[i]->grad[j];
        m[i][j] = adam.beta1 * m[i][j] + (1.0 - adam.beta1) * g;
        v[i][j] = adam.beta2 * v[i][j] + (1.0 - adam.beta2) * g * g;
        const double mh = m[i][j] / (1.0 - std::pow(adam.beta1, step));
        const double vh = v[i][j] / (1.0 - std::pow(adam.beta2, step));
        value[i][j] -= adam.lr * mh / (std::sqrt(vh) + adam.eps);
      }
    }
    model.adam_step(adam);
    CHECK(model.adam_step_count() == static_cast<std::uint64_t>(step));
    for (std::size_t i = 0; i < ts.size(); ++i) {
      for (std::size_t j = 0; j < value[i].size(); ++j) {
        CHECK(ts[i]->value[j] == doctest::Approx(value[i][j]).epsilon(1e-12));
      }
    }
  }

  // first-step closed form: the update is -lr * g / (|g| + eps)
  nn::Model fresh(cfg, 12);
  fresh.zero_gradients();
  fresh.accumulate_gradient(pixels, {0.4, 0.1, 0.9}, 1.0);
  std::vector<std::vector<double>> before, grads;
  for (nn::Tensor* t : fresh.tensors()) {
    before.push_back(t->value);
    grads.push_back(t->grad);
  }
  fresh.adam_step(adam);
  auto tf = fresh.tensors();
  for (std::size_t i = 0; i < tf.size(); ++i) {
    for (std::size_t j = 0; j < before[i].size(); ++j) {
      const double g = grads[i][j];
      const double want =
          before[i][j] - adam.lr * g / (std::abs(g) + adam.eps);
      CHECK(tf[i]->value[j] == doctest::Approx(want).epsilon(1e-9));
    }
  }
}

TEST_CASE("snapshots restore weights, moments, and the step counter") {
  const fs::path dir = fs::temp_directory_path() / "fpcnn_nn_io";
  fs::create_directories(dir);
  const std::string path = (dir / "model.bin").string();

  const nn::ModelConfig cfg{5, 3, 4, 6, false};
  nn::Model model(cfg, 2718);
  const nn::AdamConfig adam;
  const auto pixels = random_pixels(25, 1);
  for (int step = 0; step < 4; ++step) {
    model.zero_gradients();
    model.accumulate_gradient(pixels, {0.2, 0.2, 0.2}, step % 2 ? 1.0 : 0.0);
    model.adam_step(adam);
  }
  nn::save_model(model, path);
  nn::Model back = nn::load_model(path);
  CHECK(back.config() == cfg);
  CHECK(back.adam_step_count() == 4);
  const auto ta = std::as_const(model).tensors();
  const auto tb = std::as_const(back).tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i]->value == tb[i]->value);
    CHECK(ta[i]->m == tb[i]->m);
    CHECK(ta[i]->v == tb[i]->v);
  }
  const auto probe = random_pixels(25, 2);
  CHECK(model.predict(probe, {0, 0, 0}) == back.predict(probe, {0, 0, 0}));

  // training continues identically after a reload
  model.zero_gradients();
  back.zero_gradients();
  model.accumulate_gradient(probe, {0.1, 0.1, 0.1}, 1.0);
  back.accumulate_gradient(probe, {0.1, 0.1, 0.1}, 1.0);
  model.adam_step(adam);
  back.adam_step(adam);
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta[i]->value == tb[i]->value);

  // failure modes
  CHECK(code_of([&] { nn::load_model((dir / "nope.bin").string()); }) ==
        ErrorCode::file_not_found);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    bytes = ss.str();
  }
  const auto write_bytes = [&](const std::string& name, const std::string& b) {
    std::ofstream out(dir / name, std::ios::binary);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
    return (dir / name).string();
  };

  std::string magic = bytes;
  magic[5] = '9';
  CHECK(code_of([&] { nn::load_model(write_bytes("m.bin", magic)); }) ==
        ErrorCode::malformed_header);

  std::string renamed = bytes;
  renamed.replace(renamed.find("conv1_w"), 7, "convX_w");
  CHECK(code_of([&] { nn::load_model(write_bytes("r.bin", renamed)); }) ==
        ErrorCode::fingerprint_mismatch);

  std::string resized = bytes;
  resized.replace(resized.find("dense1_b 6"), 10, "dense1_b 7");
  CHECK(code_of([&] { nn::load_model(write_bytes("s.bin", resized)); }) ==
        ErrorCode::fingerprint_mismatch);

  CHECK(code_of([&] {
          nn::load_model(
              write_bytes("cut.bin", bytes.substr(0, bytes.size() - 4)));
        }) == ErrorCode::data_length_mismatch);
  CHECK(code_of([&] {
          nn::load_model(write_bytes("pad.bin", bytes + "!"));
        }) == ErrorCode::data_length_mismatch);

  std::string flag = bytes;
  flag.replace(flag.find("use_position 0"), 14, "use_position 2");
  CHECK(code_of([&] { nn::load_model(write_bytes("f.bin", flag)); }) ==
        ErrorCode::malformed_header);
}

TEST_CASE("a small model separates blob patches from noise") {
  const std::size_t p = 5;
  SplitMix64 rng(2025);
  std::vector<std::vector<double>> pix;
  std::vector<double> labels;
  std::vector<std::array<double, 3>> pos;
  for (int i = 0; i < 48; ++i) {
    const bool positive = i % 2 == 0;
    std::vector<double> x(p * p);
    for (double& v : x) v = 0.3 + 0.05 * rng.next_gaussian();
    if (positive) {
      for (std::size_t r = 1; r < 4; ++r) {
        for (std::size_t c = 1; c < 4; ++c) x[r * p + c] += 0.4;
      }
    }
    pix.push_back(std::move(x));
    labels.push_back(positive ? 1.0 : 0.0);
    pos.push_back({rng.next_gaussian() * 0.2, rng.next_gaussian() * 0.2, 0.5});
  }

  nn::Model model({p, 2, 4, 8, true}, 7);
  nn::AdamConfig adam;
  adam.lr = 5e-3;
  const auto mean_loss = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < pix.size(); ++i) {
      s += nn::bce_loss(model.predict(pix[i], pos[i]), labels[i]);
    }
    return s / static_cast<double>(pix.size());
  };
  const double initial = mean_loss();
  for (int epoch = 0; epoch < 80; ++epoch) {
    model.zero_gradients();
    for (std::size_t i = 0; i < pix.size(); ++i) {
      model.accumulate_gradient(pix[i], pos[i], labels[i]);
    }
    model.scale_gradients(1.0 / static_cast<double>(pix.size()));
    model.adam_step(adam);
  }
  const double final_loss = mean_loss();
  CHECK(final_loss < 0.5 * initial);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < pix.size(); ++i) {
    const double prob = model.predict(pix[i], pos[i]);
    correct += (prob >= 0.5) == (labels[i] == 1.0);
  }
  CHECK(correct >= 44);  // at least 90% on the training set
}
