#include "fpcnn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fpcnn/binio.hpp"
#include "fpcnn/error.hpp"
#include "fpcnn/rng.hpp"

namespace fpcnn::nn {

namespace {

// 3x3 kernel, stride 1, zero padding 1: output keeps the input side length.
void conv3x3_forward(const double* in, std::size_t cin, std::size_t n,
                     const double* w, const double* b, std::size_t cout,
                     double* out) {
  const auto sn = static_cast<std::ptrdiff_t>(n);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::ptrdiff_t y = 0; y < sn; ++y) {
      for (std::ptrdiff_t x = 0; x < sn; ++x) {
        double acc = b[co];
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double* plane = in + ci * n * n;
          const double* taps = w + ((co * cin + ci) * 9);
          for (int ky = 0; ky < 3; ++ky) {
            const std::ptrdiff_t iy = y + ky - 1;
            if (iy < 0 || iy >= sn) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const std::ptrdiff_t ix = x + kx - 1;
              if (ix < 0 || ix >= sn) continue;
              acc += taps[ky * 3 + kx] * plane[iy * sn + ix];
            }
          }
        }
        out[(co * n + static_cast<std::size_t>(y)) * n +
            static_cast<std::size_t>(x)] = acc;
      }
    }
  }
}

void conv3x3_backward(const double* in, std::size_t cin, std::size_t n,
                      const double* w, std::size_t cout, const double* dout,
                      double* gw, double* gb, double* din) {
  const auto sn = static_cast<std::ptrdiff_t>(n);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::ptrdiff_t y = 0; y < sn; ++y) {
      for (std::ptrdiff_t x = 0; x < sn; ++x) {
        const double g = dout[(co * n + static_cast<std::size_t>(y)) * n +
                              static_cast<std::size_t>(x)];
        if (g == 0.0) continue;
        gb[co] += g;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double* plane = in + ci * n * n;
          const std::size_t base = (co * cin + ci) * 9;
          for (int ky = 0; ky < 3; ++ky) {
            const std::ptrdiff_t iy = y + ky - 1;
            if (iy < 0 || iy >= sn) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const std::ptrdiff_t ix = x + kx - 1;
              if (ix < 0 || ix >= sn) continue;
              const std::size_t at =
                  static_cast<std::size_t>(iy * sn + ix);
              gw[base + static_cast<std::size_t>(ky * 3 + kx)] += g * plane[at];
              if (din != nullptr) {
                din[ci * n * n + at] +=
                    g * w[base + static_cast<std::size_t>(ky * 3 + kx)];
              }
            }
          }
        }
      }
    }
  }
}

// 2x2 pooling with ceil-mode output (n+1)/2; edge windows are clipped. The
// first maximum in scan order wins, recorded for the backward scatter.
void maxpool2(const double* in, std::size_t channels, std::size_t n,
              double* out, std::size_t* arg) {
  const std::size_t m = (n + 1) / 2;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < m; ++y) {
      for (std::size_t x = 0; x < m; ++x) {
        double best = 0.0;
        std::size_t best_at = 0;
        bool first = true;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          const std::size_t iy = 2 * y + dy;
          if (iy >= n) continue;
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t ix = 2 * x + dx;
            if (ix >= n) continue;
            const std::size_t at = (c * n + iy) * n + ix;
            if (first || in[at] > best) {
              best = in[at];
              best_at = at;
              first = false;
            }
          }
        }
        out[(c * m + y) * m + x] = best;
        arg[(c * m + y) * m + x] = best_at;
      }
    }
  }
}

Tensor make_tensor(const std::string& name, std::size_t size) {
  Tensor t;
  t.name = name;
  t.value.assign(size, 0.0);
  t.grad.assign(size, 0.0);
  t.m.assign(size, 0.0);
  t.v.assign(size, 0.0);
  return t;
}

void he_uniform(Tensor& t, std::size_t fan_in, SplitMix64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.value) v = rng.next_range(-limit, limit);
}

void validate_config(const ModelConfig& cfg, ErrorCode code) {
  if (cfg.patch_size < 3 || cfg.patch_size % 2 == 0 ||
      cfg.conv1_channels == 0 || cfg.conv2_channels == 0 ||
      cfg.hidden_units == 0) {
    fail(code, "bad model shape: patch size must be odd and >= 3, all widths positive");
  }
}

}  // namespace

double bce_loss(double prob, double label) {
  const double p = std::clamp(prob, 1e-12, 1.0 - 1e-12);
  return -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : cfg_(config) {
  validate_config(cfg_, ErrorCode::invalid_argument);
  p_ = cfg_.patch_size;
  p1_ = (p_ + 1) / 2;
  q_ = (p1_ + 1) / 2;
  flat_ = cfg_.conv2_channels * q_ * q_;

  const std::size_t c1 = cfg_.conv1_channels, c2 = cfg_.conv2_channels;
  const std::size_t hid = cfg_.hidden_units;
  w1_ = make_tensor("conv1_w", c1 * 1 * 9);
  b1_ = make_tensor("conv1_b", c1);
  w2_ = make_tensor("conv2_w", c2 * c1 * 9);
  b2_ = make_tensor("conv2_b", c2);
  w3_ = make_tensor("dense1_w", hid * flat_);
  b3_ = make_tensor("dense1_b", hid);
  w4_ = make_tensor("out_w", hid + 3);
  b4_ = make_tensor("out_b", 1);

  SplitMix64 rng(seed);
  he_uniform(w1_, 9, rng);
  he_uniform(w2_, c1 * 9, rng);
  he_uniform(w3_, flat_, rng);
  he_uniform(w4_, hid + 3, rng);

  ws_.a1.resize(c1 * p_ * p_);
  ws_.m1.resize(c1 * p1_ * p1_);
  ws_.arg1.resize(c1 * p1_ * p1_);
  ws_.a2.resize(c2 * p1_ * p1_);
  ws_.m2.resize(flat_);
  ws_.arg2.resize(flat_);
  ws_.flat_grad.resize(flat_);
  ws_.a3.resize(hid);
  ws_.cat.resize(hid + 3);
  ws_.d1.resize(c1 * p_ * p_);
  ws_.dm1.resize(c1 * p1_ * p1_);
  ws_.d2.resize(c2 * p1_ * p1_);
  ws_.d3.resize(hid);
}

std::vector<Tensor*> Model::tensors() {
  return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_, &w4_, &b4_};
}

std::vector<const Tensor*> Model::tensors() const {
  return {&w1_, &b1_, &w2_, &b2_, &w3_, &b3_, &w4_, &b4_};
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->value.size();
  return n;
}

double Model::forward(const double* pixels,
                      const std::array<double, 3>& pos) const {
  const std::size_t c1 = cfg_.conv1_channels, c2 = cfg_.conv2_channels;
  const std::size_t hid = cfg_.hidden_units;

  conv3x3_forward(pixels, 1, p_, w1_.value.data(), b1_.value.data(), c1,
                  ws_.a1.data());
  for (double& v : ws_.a1) v = std::max(0.0, v);
  maxpool2(ws_.a1.data(), c1, p_, ws_.m1.data(), ws_.arg1.data());

  conv3x3_forward(ws_.m1.data(), c1, p1_, w2_.value.data(), b2_.value.data(),
                  c2, ws_.a2.data());
  for (double& v : ws_.a2) v = std::max(0.0, v);
  maxpool2(ws_.a2.data(), c2, p1_, ws_.m2.data(), ws_.arg2.data());

  for (std::size_t u = 0; u < hid; ++u) {
    double acc = b3_.value[u];
    const double* row = w3_.value.data() + u * flat_;
    for (std::size_t f = 0; f < flat_; ++f) acc += row[f] * ws_.m2[f];
    ws_.a3[u] = std::max(0.0, acc);
    ws_.cat[u] = ws_.a3[u];
  }
  for (std::size_t t = 0; t < 3; ++t) {
    ws_.cat[hid + t] = cfg_.use_position ? pos[t] : 0.0;
  }
  double z = b4_.value[0];
  for (std::size_t j = 0; j < hid + 3; ++j) z += w4_.value[j] * ws_.cat[j];
  return 1.0 / (1.0 + std::exp(-z));
}

double Model::predict(const std::vector<double>& pixels,
                      const std::array<double, 3>& pos) const {
  if (pixels.size() != p_ * p_) {
    fail(ErrorCode::invalid_argument, "pixel window does not match patch size");
  }
  return forward(pixels.data(), pos);
}

double Model::accumulate_gradient(const std::vector<double>& pixels,
                                  const std::array<double, 3>& pos,
                                  double label) {
  if (pixels.size() != p_ * p_) {
    fail(ErrorCode::invalid_argument, "pixel window does not match patch size");
  }
  if (label != 0.0 && label != 1.0) {
    fail(ErrorCode::invalid_argument, "labels must be 0 or 1");
  }
  const double prob = forward(pixels.data(), pos);
  const std::size_t c1 = cfg_.conv1_channels, c2 = cfg_.conv2_channels;
  const std::size_t hid = cfg_.hidden_units;

  const double dz = prob - label;  // sigmoid and cross entropy fused
  b4_.grad[0] += dz;
  for (std::size_t j = 0; j < hid + 3; ++j) w4_.grad[j] += dz * ws_.cat[j];

  for (std::size_t u = 0; u < hid; ++u) {
    ws_.d3[u] = ws_.a3[u] > 0.0 ? dz * w4_.value[u] : 0.0;
    b3_.grad[u] += ws_.d3[u];
  }
  std::fill(ws_.flat_grad.begin(), ws_.flat_grad.end(), 0.0);
  for (std::size_t u = 0; u < hid; ++u) {
    const double g = ws_.d3[u];
    if (g == 0.0) continue;
    double* grow = w3_.grad.data() + u * flat_;
    const double* row = w3_.value.data() + u * flat_;
    for (std::size_t f = 0; f < flat_; ++f) {
      grow[f] += g * ws_.m2[f];
      ws_.flat_grad[f] += g * row[f];
    }
  }

  std::fill(ws_.d2.begin(), ws_.d2.end(), 0.0);
  for (std::size_t cell = 0; cell < flat_; ++cell) {
    ws_.d2[ws_.arg2[cell]] += ws_.flat_grad[cell];
  }
  for (std::size_t i = 0; i < ws_.d2.size(); ++i) {
    if (ws_.a2[i] <= 0.0) ws_.d2[i] = 0.0;
  }
  std::fill(ws_.dm1.begin(), ws_.dm1.end(), 0.0);
  conv3x3_backward(ws_.m1.data(), c1, p1_, w2_.value.data(), c2, ws_.d2.data(),
                   w2_.grad.data(), b2_.grad.data(), ws_.dm1.data());

  std::fill(ws_.d1.begin(), ws_.d1.end(), 0.0);
  for (std::size_t cell = 0; cell < ws_.m1.size(); ++cell) {
    ws_.d1[ws_.arg1[cell]] += ws_.dm1[cell];
  }
  for (std::size_t i = 0; i < ws_.d1.size(); ++i) {
    if (ws_.a1[i] <= 0.0) ws_.d1[i] = 0.0;
  }
  conv3x3_backward(pixels.data(), 1, p_, w1_.value.data(), c1, ws_.d1.data(),
                   w1_.grad.data(), b1_.grad.data(), nullptr);

  return prob;
}

void Model::zero_gradients() {
  for (Tensor* t : tensors()) std::fill(t->grad.begin(), t->grad.end(), 0.0);
}

void Model::scale_gradients(double factor) {
  for (Tensor* t : tensors()) {
    for (double& g : t->grad) g *= factor;
  }
}

void Model::adam_step(const AdamConfig& adam) {
  ++adam_t_;
  const double bc1 =
      1.0 - std::pow(adam.beta1, static_cast<double>(adam_t_));
  const double bc2 =
      1.0 - std::pow(adam.beta2, static_cast<double>(adam_t_));
  for (Tensor* t : tensors()) {
    for (std::size_t i = 0; i < t->value.size(); ++i) {
      const double g = t->grad[i];
      t->m[i] = adam.beta1 * t->m[i] + (1.0 - adam.beta1) * g;
      t->v[i] = adam.beta2 * t->v[i] + (1.0 - adam.beta2) * g * g;
      const double m_hat = t->m[i] / bc1;
      const double v_hat = t->v[i] / bc2;
      t->value[i] -= adam.lr * m_hat / (std::sqrt(v_hat) + adam.eps);
    }
  }
}

void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io_failure, "cannot open for write: " + path);
  const ModelConfig& c = model.cfg_;
  out << "FPCNN1\n";
  out << "patch_size " << c.patch_size << '\n';
  out << "conv1 " << c.conv1_channels << '\n';
  out << "conv2 " << c.conv2_channels << '\n';
  out << "hidden " << c.hidden_units << '\n';
  out << "use_position " << (c.use_position ? 1 : 0) << '\n';
  out << "adam_step " << model.adam_t_ << '\n';
  const auto tensors = model.tensors();
  out << "tensors " << tensors.size() << '\n';
  for (const Tensor* t : tensors) {
    out << t->name << ' ' << t->value.size() << '\n';
  }
  out << "end\n";
  for (const Tensor* t : tensors) {
    for (double v : t->value) binio::put_f64(out, v);
    for (double v : t->m) binio::put_f64(out, v);
    for (double v : t->v) binio::put_f64(out, v);
  }
  if (!out.flush()) fail(ErrorCode::io_failure, "write failed: " + path);
}

namespace {

std::string header_line(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) {
    fail(ErrorCode::malformed_header, "truncated header in " + path);
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::uint64_t keyed_u64(std::istream& in, const std::string& key,
                        const std::string& path) {
  const std::string line = header_line(in, path);
  std::istringstream ss(line);
  std::string word;
  std::uint64_t value = 0;
  if (!(ss >> word >> value) || word != key || (ss >> word)) {
    fail(ErrorCode::malformed_header,
         "expected '" + key + " <n>' in " + path + ", got: " + line);
  }
  return value;
}

}  // namespace

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::file_not_found, "cannot open: " + path);
  if (header_line(in, path) != "FPCNN1") {
    fail(ErrorCode::malformed_header, "bad magic in " + path);
  }
  ModelConfig cfg;
  cfg.patch_size = keyed_u64(in, "patch_size", path);
  cfg.conv1_channels = keyed_u64(in, "conv1", path);
  cfg.conv2_channels = keyed_u64(in, "conv2", path);
  cfg.hidden_units = keyed_u64(in, "hidden", path);
  const std::uint64_t pos_flag = keyed_u64(in, "use_position", path);
  if (pos_flag > 1) fail(ErrorCode::malformed_header, "bad flag in " + path);
  cfg.use_position = pos_flag == 1;
  validate_config(cfg, ErrorCode::malformed_header);
  const std::uint64_t adam_t = keyed_u64(in, "adam_step", path);

  Model model(cfg, 0);
  model.adam_t_ = adam_t;
  const auto tensors = model.tensors();
  if (keyed_u64(in, "tensors", path) != tensors.size()) {
    fail(ErrorCode::fingerprint_mismatch,
         "tensor inventory does not match the declared shape in " + path);
  }
  for (Tensor* t : tensors) {
    std::istringstream ss(header_line(in, path));
    std::string name, extra;
    std::uint64_t size = 0;
    if (!(ss >> name >> size) || (ss >> extra)) {
      fail(ErrorCode::malformed_header, "bad tensor line in " + path);
    }
    if (name != t->name || size != t->value.size()) {
      fail(ErrorCode::fingerprint_mismatch,
           "tensor " + name + " does not match the declared shape in " + path);
    }
  }
  if (header_line(in, path) != "end") {
    fail(ErrorCode::malformed_header, "missing header terminator in " + path);
  }
  for (Tensor* t : tensors) {
    bool ok = true;
    for (double& v : t->value) ok = ok && binio::get_f64(in, v);
    for (double& v : t->m) ok = ok && binio::get_f64(in, v);
    for (double& v : t->v) ok = ok && binio::get_f64(in, v);
    if (!ok) fail(ErrorCode::data_length_mismatch, "truncated payload in " + path);
  }
  if (in.get() != std::char_traits<char>::eof()) {
    fail(ErrorCode::data_length_mismatch, "trailing bytes in " + path);
  }
  return model;
}

}  // namespace fpcnn::nn
