#include "dapp/workloads.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "dapp/bytes.hpp"

namespace dapp::workloads {
namespace {

class UniformInit {
 public:
  explicit UniformInit(std::uint64_t seed) : gen_(seed) {}

  void fill(std::vector<double>& out, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    out.resize(count);
    for (auto& w : out) {
      const double u = static_cast<double>(gen_() >> 11) * 0x1.0p-53;  // [0, 1)
      w = (2.0 * u - 1.0) * bound;
    }
  }

 private:
  std::mt19937_64 gen_;
};

DenseLayer make_dense(UniformInit& init, std::size_t inputs, std::size_t outputs) {
  DenseLayer layer{inputs, outputs, {}, {}};
  init.fill(layer.weights, inputs * outputs, inputs);
  init.fill(layer.bias, outputs, inputs);
  return layer;
}

void dense_forward(const DenseLayer& layer, std::span<const double> in, std::span<double> out,
                   bool apply_relu) {
  for (std::size_t o = 0; o < layer.outputs; ++o) {
    const double* row = layer.weights.data() + o * layer.inputs;
    // four partial sums break the add dependency chain
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t k = 0;
    for (; k + 4 <= layer.inputs; k += 4) {
      a0 += row[k] * in[k];
      a1 += row[k + 1] * in[k + 1];
      a2 += row[k + 2] * in[k + 2];
      a3 += row[k + 3] * in[k + 3];
    }
    for (; k < layer.inputs; ++k) a0 += row[k] * in[k];
    const double acc = (a0 + a1) + (a2 + a3) + layer.bias[o];
    out[o] = apply_relu ? std::max(acc, 0.0) : acc;
  }
}

void require_slot(std::span<const IQSample> buf) {
  if (buf.size() != kDefaultSlotSamples)
    throw ShapeMismatch("model input expects " + std::to_string(kDefaultSlotSamples) +
                        " samples, got " + std::to_string(buf.size()));
}

}  // namespace

// ---------------------------------------------------------------------------
// EBS

Detection ebs_detect(std::span<const IQSample> buf, const EbsConfig& cfg) {
  const double e = energy(buf);
  return {e >= cfg.threshold ? Verdict::Occupied : Verdict::Unoccupied, e};
}

ControlDecision ebs_decide(std::span<const IQSample> buf, const EbsConfig& cfg,
                           const ChannelContext& ctx) {
  const auto d = ebs_detect(buf, cfg);
  return make_decision(d.verdict, d.score, ctx);
}

// ---------------------------------------------------------------------------
// FFT

std::size_t fft_size_for(std::size_t n) { return std::bit_ceil(std::max<std::size_t>(n, 1)); }

Spectrum fft_transform(std::span<const IQSample> buf) {
  const std::size_t m = fft_size_for(buf.size());
  Spectrum x(m, {0.0, 0.0});
  std::copy(buf.begin(), buf.end(), x.begin());

  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < m; ++i) {
    std::size_t bit = m >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }

  std::vector<std::complex<double>> twiddle(m / 2);
  for (std::size_t k = 0; k < m / 2; ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(m);
    twiddle[k] = {std::cos(angle), std::sin(angle)};
  }

  for (std::size_t len = 2; len <= m; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = m / len;
    for (std::size_t start = 0; start < m; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        const auto u = x[start + k];
        const auto v = x[start + k + half] * twiddle[k * stride];
        x[start + k] = u + v;
        x[start + k + half] = u - v;
      }
    }
  }
  return x;
}

Detection fft_detect(std::span<const IQSample> buf, const FftConfig& cfg) {
  const Spectrum spec = fft_transform(buf);
  double peak = 0.0;
  for (const auto& bin : spec) peak = std::max(peak, std::abs(bin));
  const double score = peak / static_cast<double>(spec.size());
  return {score >= cfg.bin_threshold ? Verdict::Occupied : Verdict::Unoccupied, score};
}

ControlDecision fft_decide(std::span<const IQSample> buf, const FftConfig& cfg,
                           const ChannelContext& ctx) {
  const auto d = fft_detect(buf, cfg);
  return make_decision(d.verdict, d.score, ctx);
}

// ---------------------------------------------------------------------------
// Preprocessing

std::vector<double> preprocess(std::span<const IQSample> buf, FeatureLayout layout) {
  const std::size_t n = buf.size();
  std::vector<double> out(2 * n);
  if (n == 0) return out;

  double sum = 0.0;
  for (const auto& s : buf) sum += s.real() + s.imag();
  const double mean = sum / static_cast<double>(2 * n);
  double var = 0.0;
  for (const auto& s : buf) {
    const double di = s.real() - mean;
    const double dq = s.imag() - mean;
    var += di * di + dq * dq;
  }
  const double sigma = std::max(std::sqrt(var / static_cast<double>(2 * n)), 1e-12);

  for (std::size_t k = 0; k < n; ++k) {
    const double i = (buf[k].real() - mean) / sigma;
    const double q = (buf[k].imag() - mean) / sigma;
    if (layout == FeatureLayout::Interleaved) {
      out[2 * k] = i;
      out[2 * k + 1] = q;
    } else {
      out[k] = i;
      out[n + k] = q;
    }
  }
  return out;
}

Detection argmax_detection(const std::array<double, 2>& logits) {
  if (logits[1] > logits[0]) return {Verdict::Occupied, logits[1]};
  return {Verdict::Unoccupied, logits[0]};
}

// ---------------------------------------------------------------------------
// FCN

FcnModel FcnModel::from_seed(std::uint64_t seed) {
  UniformInit init(seed);
  FcnModel model;
  model.seed = seed;
  for (std::size_t l = 0; l + 1 < kWidths.size(); ++l)
    model.layers.push_back(make_dense(init, kWidths[l], kWidths[l + 1]));
  return model;
}

std::array<double, 2> FcnModel::logits(std::span<const double> features) const {
  if (features.size() != kInputFeatures) throw ShapeMismatch("FCN expects 3072 features");
  std::vector<double> current(features.begin(), features.end());
  std::vector<double> next;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    next.assign(layers[l].outputs, 0.0);
    dense_forward(layers[l], current, next, l + 1 < layers.size());
    current.swap(next);
  }
  return {current[0], current[1]};
}

std::uint64_t FcnModel::multiply_accumulates() const {
  std::uint64_t total = 0;
  for (const auto& l : layers) total += l.inputs * l.outputs;
  return total;
}

Detection fcn_detect(std::span<const IQSample> buf, const FcnModel& model) {
  require_slot(buf);
  return argmax_detection(model.logits(preprocess(buf, FeatureLayout::Interleaved)));
}

ControlDecision fcn_infer(std::span<const IQSample> buf, const FcnModel& model,
                          const ChannelContext& ctx) {
  const auto d = fcn_detect(buf, model);
  return make_decision(d.verdict, d.score, ctx);
}

// ---------------------------------------------------------------------------
// Xception-lite

Tensor conv1d_forward(const Conv1d& conv, const Tensor& input) {
  Tensor out(conv.out_channels, input.length);
  const auto n = static_cast<std::ptrdiff_t>(input.length);
  for (std::size_t o = 0; o < conv.out_channels; ++o) {
    for (std::ptrdiff_t t = 0; t < n; ++t) {
      double acc = conv.bias[o];
      for (std::size_t c = 0; c < conv.in_channels; ++c) {
        const double* w = conv.weights.data() + (o * conv.in_channels + c) * kConvKernel;
        for (std::size_t k = 0; k < kConvKernel; ++k) {
          const std::ptrdiff_t src = t + static_cast<std::ptrdiff_t>(k) - 1;
          if (src >= 0 && src < n) acc += w[k] * input.at(c, static_cast<std::size_t>(src));
        }
      }
      out.at(o, static_cast<std::size_t>(t)) = acc;
    }
  }
  return out;
}

Tensor separable_conv(const SeparableBlock& block, const Tensor& input) {
  const std::size_t n = input.length;
  Tensor depth(block.in_channels, n);
  for (std::size_t c = 0; c < block.in_channels; ++c) {
    const double* w = block.depthwise.data() + c * kConvKernel;
    const double* x = input.data.data() + c * n;
    double* y = depth.data.data() + c * n;
    for (std::size_t t = 0; t < n; ++t) {
      double acc = w[1] * x[t];
      if (t > 0) acc += w[0] * x[t - 1];
      if (t + 1 < n) acc += w[2] * x[t + 1];
      y[t] = acc;
    }
  }

  Tensor out(block.out_channels, n);
  for (std::size_t o = 0; o < block.out_channels; ++o) {
    double* y = out.data.data() + o * n;
    std::fill(y, y + n, block.bias[o]);
    for (std::size_t c = 0; c < block.in_channels; ++c) {
      const double w = block.pointwise[o * block.in_channels + c];
      const double* x = depth.data.data() + c * n;
      for (std::size_t t = 0; t < n; ++t) y[t] += w * x[t];
    }
  }
  return out;
}

Tensor relu(Tensor t) {
  for (auto& v : t.data) v = std::max(v, 0.0);
  return t;
}

Tensor max_pool2(const Tensor& t) {
  Tensor out(t.channels, t.length / 2);
  for (std::size_t c = 0; c < t.channels; ++c)
    for (std::size_t k = 0; k < out.length; ++k)
      out.at(c, k) = std::max(t.at(c, 2 * k), t.at(c, 2 * k + 1));
  return out;
}

XceptionLiteModel XceptionLiteModel::from_seed(std::uint64_t seed) {
  UniformInit init(seed);
  XceptionLiteModel model;
  model.seed = seed;
  model.entry.in_channels = 2;
  model.entry.out_channels = kEntryChannels;
  init.fill(model.entry.weights, kEntryChannels * 2 * kConvKernel, 2 * kConvKernel);
  init.fill(model.entry.bias, kEntryChannels, 2 * kConvKernel);
  for (std::size_t b = 0; b + 1 < kBlockChannels.size(); ++b) {
    SeparableBlock block;
    block.in_channels = kBlockChannels[b];
    block.out_channels = kBlockChannels[b + 1];
    init.fill(block.depthwise, block.in_channels * kConvKernel, kConvKernel);
    init.fill(block.pointwise, block.out_channels * block.in_channels, block.in_channels);
    init.fill(block.bias, block.out_channels, block.in_channels);
    model.blocks.push_back(std::move(block));
  }
  model.head = make_dense(init, kBlockChannels.back(), 2);
  return model;
}

std::array<double, 2> XceptionLiteModel::logits(std::span<const double> features) const {
  if (features.size() % 2 != 0 || features.empty())
    throw ShapeMismatch("Xception-lite expects 2 x N features");
  Tensor x(2, features.size() / 2);
  std::copy(features.begin(), features.end(), x.data.begin());

  x = relu(conv1d_forward(entry, x));
  for (const auto& block : blocks) x = max_pool2(relu(separable_conv(block, x)));

  std::vector<double> pooled(x.channels, 0.0);
  for (std::size_t c = 0; c < x.channels; ++c) {
    double acc = 0.0;
    for (std::size_t t = 0; t < x.length; ++t) acc += x.at(c, t);
    pooled[c] = x.length ? acc / static_cast<double>(x.length) : 0.0;
  }
  std::array<double, 2> out{};
  dense_forward(head, pooled, out, false);
  return out;
}

std::uint64_t XceptionLiteModel::multiply_accumulates(std::size_t samples) const {
  std::uint64_t total = static_cast<std::uint64_t>(samples) * entry.out_channels *
                        entry.in_channels * kConvKernel;
  std::size_t length = samples;
  for (const auto& b : blocks) {
    total += static_cast<std::uint64_t>(length) * b.in_channels * kConvKernel;
    total += static_cast<std::uint64_t>(length) * b.in_channels * b.out_channels;
    length /= 2;
  }
  total += head.inputs * head.outputs;
  return total;
}

Detection xception_lite_detect(std::span<const IQSample> buf, const XceptionLiteModel& model) {
  require_slot(buf);
  return argmax_detection(model.logits(preprocess(buf, FeatureLayout::ChannelMajor)));
}

ControlDecision xception_lite_infer(std::span<const IQSample> buf, const XceptionLiteModel& model,
                                    const ChannelContext& ctx) {
  const auto d = xception_lite_detect(buf, model);
  return make_decision(d.verdict, d.score, ctx);
}

// ---------------------------------------------------------------------------
// Dispatch

namespace {

class EbsWorkload final : public Workload {
 public:
  explicit EbsWorkload(EbsConfig cfg) : cfg_(cfg) {}
  DappKind kind() const override { return DappKind::Ebs; }
  Detection detect(std::span<const IQSample> buf) const override { return ebs_detect(buf, cfg_); }

 private:
  EbsConfig cfg_;
};

class FftWorkload final : public Workload {
 public:
  explicit FftWorkload(FftConfig cfg) : cfg_(cfg) {}
  DappKind kind() const override { return DappKind::Fft; }
  Detection detect(std::span<const IQSample> buf) const override { return fft_detect(buf, cfg_); }

 private:
  FftConfig cfg_;
};

class FcnWorkload final : public Workload {
 public:
  explicit FcnWorkload(std::uint64_t seed) : model_(FcnModel::from_seed(seed)) {}
  DappKind kind() const override { return DappKind::Fcn; }
  Detection detect(std::span<const IQSample> buf) const override { return fcn_detect(buf, model_); }

 private:
  FcnModel model_;
};

class XceptionWorkload final : public Workload {
 public:
  explicit XceptionWorkload(std::uint64_t seed) : model_(XceptionLiteModel::from_seed(seed)) {}
  DappKind kind() const override { return DappKind::XceptionLite; }
  Detection detect(std::span<const IQSample> buf) const override {
    return xception_lite_detect(buf, model_);
  }

 private:
  XceptionLiteModel model_;
};

}  // namespace

std::shared_ptr<const Workload> make_workload(DappKind kind, const WorkloadConfig& cfg) {
  if (!(cfg.ebs.threshold > 0.0)) throw std::invalid_argument("EBS threshold must be > 0");
  if (!(cfg.fft.bin_threshold > 0.0)) throw std::invalid_argument("FFT bin_threshold must be > 0");
  switch (kind) {
    case DappKind::Ebs: return std::make_shared<EbsWorkload>(cfg.ebs);
    case DappKind::Fft: return std::make_shared<FftWorkload>(cfg.fft);
    case DappKind::Fcn: return std::make_shared<FcnWorkload>(cfg.model_seed);
    case DappKind::XceptionLite: return std::make_shared<XceptionWorkload>(cfg.model_seed);
  }
  throw std::invalid_argument("unknown dApp kind");
}

// ---------------------------------------------------------------------------
// Model files

namespace {
constexpr std::array<std::uint8_t, 4> kModelMagic{'D', 'W', 'M', '1'};
constexpr std::size_t kModelFileSize = 4 + 1 + 8;
}  // namespace

std::vector<std::uint8_t> encode_model_file(const ModelFile& file) {
  std::vector<std::uint8_t> out(kModelMagic.begin(), kModelMagic.end());
  bytes::put_u8(out, static_cast<std::uint8_t>(file.kind));
  bytes::put_u64_le(out, file.seed);
  return out;
}

ModelFile decode_model_file(std::span<const std::uint8_t> data) {
  if (data.size() != kModelFileSize) throw std::runtime_error("model file: wrong size");
  if (!std::equal(kModelMagic.begin(), kModelMagic.end(), data.begin()))
    throw std::runtime_error("model file: bad magic");
  if (data[4] > static_cast<std::uint8_t>(DappKind::XceptionLite))
    throw std::runtime_error("model file: unknown kind");
  return {static_cast<DappKind>(data[4]), bytes::get_u64_le(data.data() + 5)};
}

void save_model_file(const std::filesystem::path& path, const ModelFile& file) {
  const auto data = encode_model_file(file);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("cannot write model file " + path.string());
}

ModelFile load_model_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_model_file(data);
}

}  // namespace dapp::workloads
