#pragma once

// Dense MLP machinery: forward pass with optional activation cache, exact
// reverse-mode gradients, Adam, sinusoidal time features, and binary
// serialization of parameter blocks.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dbc/matrix.hpp"
#include "dbc/rng.hpp"

namespace dbc::nnet {

enum class Activation : std::uint8_t { identity = 0, gelu = 1, leaky_relu = 2 };

inline constexpr double kLeakySlope = 0.01;

double activate(Activation a, double x);
double activate_grad(Activation a, double x);
/// Elementwise forms used by the layers; the scalar ones agree with them exactly.
void activate_inplace(Activation a, std::span<double> v);
/// d[i] *= activation'(pre[i])
void scale_by_activation_grad(Activation a, std::span<const double> pre, std::span<double> d);
const char* to_string(Activation a);

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::identity;
  std::vector<double> weight;  // out x in, row-major
  std::vector<double> bias;    // out
  std::vector<double> grad_weight;
  std::vector<double> grad_bias;

  DenseLayer() = default;
  DenseLayer(std::size_t in, std::size_t out, Activation act);

  /// Uniform in +-sqrt(6/(in+out)), zero bias.
  void init_uniform(Rng& rng);
  void zero_grad();
  std::size_t parameter_count() const { return weight.size() + bias.size(); }
};

/// A view onto one parameter block and its gradient buffer.
struct ParamRef {
  std::span<double> value;
  std::span<double> grad;
  int layer = -1;
};

/// Pre- and post-activation values of each layer, kept by a training forward
/// pass for the matching backward pass.
struct LayerCache {
  Matrix input;
  Matrix pre;
};

class DenseCache {
 public:
  bool empty() const { return !valid_; }
  void clear() { valid_ = false; }

 private:
  friend Matrix dense_forward(const DenseLayer&, const Matrix&, DenseCache*);
  friend Matrix dense_backward(DenseLayer&, const DenseCache&, const Matrix&);
  LayerCache data_;
  bool valid_ = false;
};

/// y = act(x W^T + b). When cache is non-null, the input and pre-activation
/// are recorded for dense_backward.
Matrix dense_forward(const DenseLayer& layer, const Matrix& x, DenseCache* cache = nullptr);
/// Accumulates parameter gradients into the layer and returns dL/dx.
Matrix dense_backward(DenseLayer& layer, const DenseCache& cache, const Matrix& dy);

using MlpCache = std::vector<DenseCache>;

class Mlp {
 public:
  Mlp() = default;
  /// widths = {in, h1, ..., out}. Hidden layers use `hidden`, the last layer `output`.
  Mlp(std::span<const std::size_t> widths, Activation hidden, Activation output, Rng& rng);
  explicit Mlp(std::vector<DenseLayer> layers);

  std::size_t input_size() const;
  std::size_t output_size() const;
  std::size_t depth() const { return layers_.size(); }
  std::size_t parameter_count() const;

  Matrix forward(const Matrix& x) const;
  Matrix forward(const Matrix& x, MlpCache& cache) const;
  std::vector<double> forward(std::span<const double> x) const;

  /// Returns dL/dx and accumulates parameter gradients.
  Matrix backward(const MlpCache& cache, const Matrix& dy);

  void zero_grad();
  void collect_params(std::vector<ParamRef>& out, int layer_offset = 0);

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

 private:
  void validate() const;
  std::vector<DenseLayer> layers_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update over every parameter block. Throws
/// TrainingError naming the layer when a gradient is not finite; in that case
/// nothing is modified.
void adam_step(std::span<const ParamRef> params, OptimizerState& state, double learning_rate);

/// Cosine decay from `initial` at step 0 to zero at `total_steps`.
double cosine_learning_rate(double initial, std::int64_t step, std::int64_t total_steps);

struct TimeEmbedding {
  std::size_t dimension = 128;
  double frequency_base = 10000.0;
};

/// (sin(tau f_0), cos(tau f_0), sin(tau f_1), ...) with f_i = base^(-2i/dim).
std::vector<double> sinusoidal_embed(int tau, const TimeEmbedding& emb);
void sinusoidal_embed_into(int tau, const TimeEmbedding& emb, std::span<double> out);

// ---------------------------------------------------------------------------
// Little-endian binary containers.

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void f64s(std::span<const double> v);
  void str(const std::string& s);
  void raw(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  void f64s(std::span<double> out);
  std::string str();
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t checksum64(std::span<const std::uint8_t> bytes);

/// magic (8 bytes) | version u32 | payload length u64 | payload | checksum u64.
void write_container(const std::string& path, std::string_view magic, std::uint32_t version,
                     std::span<const std::uint8_t> payload);
/// Verifies magic, version and checksum; throws IoError / CorruptionError.
std::vector<std::uint8_t> read_container(const std::string& path, std::string_view magic, std::uint32_t version);

void write_layers(ByteWriter& w, std::span<const DenseLayer> layers);
std::vector<DenseLayer> read_layers(ByteReader& r);

}  // namespace dbc::nnet
