#include "dbc/nnet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#if defined(__x86_64__) && defined(__AVX2__)
#include <immintrin.h>
#endif

#include "dbc/kernels.hpp"

namespace dbc::nnet {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

// erf and exp are evaluated in fixed-width groups so a value does not depend
// on where it sits in a batch. On glibc x86-64 the groups go to libmvec.
#if !defined(DBC_SCALAR_MATH) && defined(__x86_64__) && defined(__AVX2__) && defined(__GLIBC__) && \
    (__GLIBC__ > 2 || (__GLIBC__ == 2 && __GLIBC_MINOR__ >= 35))
constexpr std::size_t kLanes = 4;
extern "C" __m256d _ZGVdN4v_erf(__m256d);
extern "C" __m256d _ZGVdN4v_exp(__m256d);
void erf_group(const double* in, double* out) { _mm256_storeu_pd(out, _ZGVdN4v_erf(_mm256_loadu_pd(in))); }
void exp_group(const double* in, double* out) { _mm256_storeu_pd(out, _ZGVdN4v_exp(_mm256_loadu_pd(in))); }
#else
constexpr std::size_t kLanes = 1;
void erf_group(const double* in, double* out) { out[0] = std::erf(in[0]); }
void exp_group(const double* in, double* out) { out[0] = std::exp(in[0]); }
#endif

// out[i] = f(scale * in[i]); tail groups are zero-padded.
template <class F>
void map_groups(std::span<const double> in, double scale, std::span<double> out, F f) {
  const std::size_t n = in.size();
  double buf[kLanes], res[kLanes];
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    for (std::size_t l = 0; l < kLanes; ++l) buf[l] = scale * in[i + l];
    f(buf, out.data() + i);
  }
  if (i == n) return;
  for (std::size_t l = 0; l < kLanes; ++l) buf[l] = i + l < n ? scale * in[i + l] : 0.0;
  f(buf, res);
  for (std::size_t l = 0; i + l < n; ++l) out[i + l] = res[l];
}

constexpr double kInvSqrt2 = std::numbers::sqrt2 / 2.0;

}  // namespace

void activate_inplace(Activation a, std::span<double> v) {
  switch (a) {
    case Activation::identity:
      return;
    case Activation::gelu: {
      std::vector<double> e(v.size());
      map_groups(v, kInvSqrt2, e, erf_group);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 * v[i] * (1.0 + e[i]);
      return;
    }
    case Activation::leaky_relu:
      for (double& x : v) x = x > 0.0 ? x : kLeakySlope * x;
      return;
  }
}

void scale_by_activation_grad(Activation a, std::span<const double> pre, std::span<double> d) {
  switch (a) {
    case Activation::identity:
      return;
    case Activation::gelu: {
      std::vector<double> e(pre.size()), sq(pre.size()), g(pre.size());
      map_groups(pre, kInvSqrt2, e, erf_group);
      for (std::size_t i = 0; i < pre.size(); ++i) sq[i] = pre[i] * pre[i];
      map_groups(sq, -0.5, g, exp_group);
      for (std::size_t i = 0; i < pre.size(); ++i) {
        const double cdf = 0.5 * (1.0 + e[i]);
        const double pdf = g[i] * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        d[i] *= cdf + pre[i] * pdf;
      }
      return;
    }
    case Activation::leaky_relu:
      for (std::size_t i = 0; i < pre.size(); ++i) d[i] *= pre[i] > 0.0 ? 1.0 : kLeakySlope;
      return;
  }
}

double activate(Activation a, double x) {
  activate_inplace(a, std::span<double>(&x, 1));
  return x;
}

double activate_grad(Activation a, double x) {
  double d = 1.0;
  scale_by_activation_grad(a, std::span<const double>(&x, 1), std::span<double>(&d, 1));
  return d;
}

const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity:
      return "identity";
    case Activation::gelu:
      return "gelu";
    case Activation::leaky_relu:
      return "leaky_relu";
  }
  return "?";
}

DenseLayer::DenseLayer(std::size_t in_, std::size_t out_, Activation act)
    : in(in_),
      out(out_),
      activation(act),
      weight(in_ * out_, 0.0),
      bias(out_, 0.0),
      grad_weight(in_ * out_, 0.0),
      grad_bias(out_, 0.0) {
  if (in == 0 || out == 0) throw ShapeError("dense layer with zero width");
}

void DenseLayer::init_uniform(Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (double& w : weight) w = rng.uniform(-limit, limit);
  std::fill(bias.begin(), bias.end(), 0.0);
}

void DenseLayer::zero_grad() {
  std::fill(grad_weight.begin(), grad_weight.end(), 0.0);
  std::fill(grad_bias.begin(), grad_bias.end(), 0.0);
}

Matrix dense_forward(const DenseLayer& layer, const Matrix& x, DenseCache* cache) {
  require_cols(x, layer.in, "dense_forward input");
  Matrix pre(x.rows(), layer.out);
  kernels::parallel::dense_forward({x.rows(), layer.in, layer.out}, x.flat(), layer.weight, layer.bias, pre.flat());
  Matrix y = pre;
  activate_inplace(layer.activation, y.flat());
  if (cache != nullptr) {
    cache->data_.input = x;
    cache->data_.pre = std::move(pre);
    cache->valid_ = true;
  }
  return y;
}

Matrix dense_backward(DenseLayer& layer, const DenseCache& cache, const Matrix& dy) {
  if (!cache.valid_) throw StateError("dense_backward called without a cached forward pass");
  const Matrix& x = cache.data_.input;
  const Matrix& pre = cache.data_.pre;
  if (dy.rows() != pre.rows() || dy.cols() != layer.out) throw ShapeError("dense_backward upstream gradient shape");
  Matrix dpre = dy;
  scale_by_activation_grad(layer.activation, pre.flat(), dpre.flat());
  const kernels::DenseShape shape{x.rows(), layer.in, layer.out};
  kernels::parallel::dense_backward_params(shape, dpre.flat(), x.flat(), layer.grad_weight, layer.grad_bias);
  Matrix dx(x.rows(), layer.in);
  kernels::parallel::dense_backward_input(shape, dpre.flat(), layer.weight, dx.flat());
  return dx;
}

Mlp::Mlp(std::span<const std::size_t> widths, Activation hidden, Activation output, Rng& rng) {
  if (widths.size() < 2) throw ShapeError("an MLP needs at least input and output widths");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const bool last = l + 2 == widths.size();
    layers_.emplace_back(widths[l], widths[l + 1], last ? output : hidden);
    layers_.back().init_uniform(rng);
  }
}

Mlp::Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) { validate(); }

void Mlp::validate() const {
  if (layers_.empty()) throw ShapeError("empty MLP");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    if (L.weight.size() != L.in * L.out || L.bias.size() != L.out || L.grad_weight.size() != L.weight.size() ||
        L.grad_bias.size() != L.bias.size())
      throw ShapeError("layer " + std::to_string(l) + " buffers do not match its shape");
    if (l > 0 && layers_[l - 1].out != L.in)
      throw ShapeError("layer " + std::to_string(l) + " input width does not match previous output");
  }
}

std::size_t Mlp::input_size() const { return layers_.empty() ? 0 : layers_.front().in; }
std::size_t Mlp::output_size() const { return layers_.empty() ? 0 : layers_.back().out; }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& L : layers_) n += L.parameter_count();
  return n;
}

Matrix Mlp::forward(const Matrix& x) const {
  if (!x.all_finite()) throw DomainError("non-finite MLP input");
  Matrix h = x;
  for (const auto& L : layers_) h = dense_forward(L, h);
  return h;
}

Matrix Mlp::forward(const Matrix& x, MlpCache& cache) const {
  if (!x.all_finite()) throw DomainError("non-finite MLP input");
  cache.assign(layers_.size(), DenseCache{});
  Matrix h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) h = dense_forward(layers_[l], h, &cache[l]);
  return h;
}

std::vector<double> Mlp::forward(std::span<const double> x) const {
  const Matrix y = forward(Matrix::row_vector(x));
  return y.storage();
}

Matrix Mlp::backward(const MlpCache& cache, const Matrix& dy) {
  if (cache.size() != layers_.size()) throw StateError("MLP backward without a matching cached forward pass");
  Matrix g = dy;
  for (std::size_t l = layers_.size(); l-- > 0;) g = dense_backward(layers_[l], cache[l], g);
  return g;
}

void Mlp::zero_grad() {
  for (auto& L : layers_) L.zero_grad();
}

void Mlp::collect_params(std::vector<ParamRef>& out, int layer_offset) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& L = layers_[l];
    const int idx = layer_offset + static_cast<int>(l);
    out.push_back({L.weight, L.grad_weight, idx});
    out.push_back({L.bias, L.grad_bias, idx});
  }
}

void adam_step(std::span<const ParamRef> params, OptimizerState& state, double learning_rate) {
  for (const auto& p : params) {
    if (p.value.size() != p.grad.size()) throw ShapeError("parameter and gradient sizes differ");
    for (double g : p.grad)
      if (!std::isfinite(g))
        throw TrainingError("non-finite gradient in layer " + std::to_string(p.layer), p.layer);
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.value.size(), 0.0);
      state.second_moment.emplace_back(p.value.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) throw StateError("optimizer state does not match parameter set");

  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].value;
    auto grad = params[i].grad;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != value.size()) throw StateError("optimizer moment shape mismatch");
    for (std::size_t k = 0; k < value.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * grad[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * grad[k] * grad[k];
      const double m_hat = m[k] / correction1;
      const double v_hat = v[k] / correction2;
      value[k] -= learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

double cosine_learning_rate(double initial, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return initial;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * initial * (1.0 + std::cos(std::numbers::pi * frac));
}

void sinusoidal_embed_into(int tau, const TimeEmbedding& emb, std::span<double> out) {
  if (emb.dimension == 0 || emb.dimension % 2 != 0) throw ConfigError("time embedding dimension must be even and positive");
  if (!(emb.frequency_base > 0.0)) throw ConfigError("time embedding frequency base must be positive");
  if (out.size() != emb.dimension) throw ShapeError("time embedding output size");
  const std::size_t half = emb.dimension / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(emb.frequency_base, -static_cast<double>(2 * i) / static_cast<double>(emb.dimension));
    const double arg = static_cast<double>(tau) * freq;
    out[2 * i] = std::sin(arg);
    out[2 * i + 1] = std::cos(arg);
  }
}

std::vector<double> sinusoidal_embed(int tau, const TimeEmbedding& emb) {
  std::vector<double> out(emb.dimension);
  sinusoidal_embed_into(tau, emb, out);
  return out;
}

// --- binary IO --------------------------------------------------------------

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::f64s(std::span<const double> v) {
  for (double d : v) f64(d);
}

void ByteWriter::str(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) throw CorruptionError("truncated payload");
}

std::uint8_t ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::f64s(std::span<double> out) {
  need(out.size() * 8);
  for (double& d : out) d = f64();
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::uint64_t checksum64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {
std::string pad_magic(std::string_view magic) {
  std::string m(magic.substr(0, 8));
  m.resize(8, '\0');
  return m;
}
}  // namespace

void write_container(const std::string& path, std::string_view magic, std::uint32_t version,
                     std::span<const std::uint8_t> payload) {
  ByteWriter head;
  const std::string m = pad_magic(magic);
  head.raw({reinterpret_cast<const std::uint8_t*>(m.data()), 8});
  head.u32(version);
  head.u64(payload.size());
  ByteWriter tail;
  tail.u64(checksum64(payload));

  // Write to a sibling temp file then rename so readers never see a partial file.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(head.bytes().data()), static_cast<std::streamsize>(head.bytes().size()));
    f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    f.write(reinterpret_cast<const char*>(tail.bytes().data()), static_cast<std::streamsize>(tail.bytes().size()));
    if (!f) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

std::vector<std::uint8_t> read_container(const std::string& path, std::string_view magic, std::uint32_t version) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (all.size() < 28) throw CorruptionError(path + ": file too short");
  if (std::memcmp(all.data(), pad_magic(magic).data(), 8) != 0) throw CorruptionError(path + ": bad magic");
  ByteReader head(std::span<const std::uint8_t>(all).subspan(8, 12));
  const std::uint32_t ver = head.u32();
  if (ver != version)
    throw CorruptionError(path + ": unsupported version " + std::to_string(ver));
  const std::uint64_t len = head.u64();
  if (len > all.size() || all.size() != 20 + len + 8) throw CorruptionError(path + ": payload length mismatch");
  std::vector<std::uint8_t> payload(all.begin() + 20, all.begin() + 20 + static_cast<std::ptrdiff_t>(len));
  ByteReader tail(std::span<const std::uint8_t>(all).subspan(20 + len, 8));
  if (tail.u64() != checksum64(payload)) throw CorruptionError(path + ": checksum mismatch");
  return payload;
}

void write_layers(ByteWriter& w, std::span<const DenseLayer> layers) {
  w.u64(layers.size());
  for (const auto& L : layers) {
    w.u64(L.out);
    w.u64(L.in);
    w.u8(static_cast<std::uint8_t>(L.activation));
  }
  for (const auto& L : layers) {
    w.f64s(L.weight);
    w.f64s(L.bias);
  }
}

std::vector<DenseLayer> read_layers(ByteReader& r) {
  const std::uint64_t count = r.u64();
  if (count > (1u << 20)) throw CorruptionError("implausible layer count");
  std::vector<DenseLayer> layers;
  layers.reserve(count);
  for (std::uint64_t l = 0; l < count; ++l) {
    const std::uint64_t out = r.u64();
    const std::uint64_t in = r.u64();
    const std::uint8_t act = r.u8();
    if (act > 2) throw CorruptionError("unknown activation tag");
    if (in == 0 || out == 0 || in * out > r.remaining()) throw CorruptionError("implausible layer shape");
    layers.emplace_back(in, out, static_cast<Activation>(act));
  }
  for (auto& L : layers) {
    r.f64s(L.weight);
    r.f64s(L.bias);
  }
  return layers;
}

}  // namespace dbc::nnet
