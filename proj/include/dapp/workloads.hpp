#pragma once

// The four reference dApps. Each maps one IQBuffer to a detection (verdict and
// score); the runtime turns detections into ControlDecisions.
//
//   EBS            mean-power threshold
//   FFT            zero-padded radix-2 FFT, peak-bin threshold
//   FCN            dense 3072-512-256-128-2, ReLU on hidden layers
//   XCEPTION_LITE  1-D entry conv + 4 depthwise-separable blocks + GAP + dense
//
// Model weights are regenerated from a seed: uniform in
// [-1/sqrt(fan_in), +1/sqrt(fan_in)] drawn from std::mt19937_64.

#include <array>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "dapp/control.hpp"
#include "dapp/e3.hpp"
#include "dapp/iq.hpp"

namespace dapp::workloads {

using e3::DappKind;

struct Detection {
  Verdict verdict = Verdict::Unoccupied;
  double score = 0.0;
};

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// EBS

struct EbsConfig {
  double threshold = 0.05;  // mean-power units, > 0
};

/// Occupied iff energy >= threshold.
Detection ebs_detect(std::span<const IQSample> buf, const EbsConfig& cfg);
ControlDecision ebs_decide(std::span<const IQSample> buf, const EbsConfig& cfg,
                           const ChannelContext& ctx = {});

// ---------------------------------------------------------------------------
// FFT

using Spectrum = std::vector<std::complex<double>>;

/// Smallest power of two >= n (1 for n == 0).
std::size_t fft_size_for(std::size_t n);

/// Unnormalized forward transform X[k] = sum x[n] e^{-2 pi i kn/M} of the
/// input zero-padded to M = fft_size_for(N).
Spectrum fft_transform(std::span<const IQSample> buf);

struct FftConfig {
  double bin_threshold = 0.1;  // on max_k |X[k]| / M, > 0
};

Detection fft_detect(std::span<const IQSample> buf, const FftConfig& cfg);
ControlDecision fft_decide(std::span<const IQSample> buf, const FftConfig& cfg,
                           const ChannelContext& ctx = {});

// ---------------------------------------------------------------------------
// Preprocessing

enum class FeatureLayout {
  Interleaved,   // i0, q0, i1, q1, ...
  ChannelMajor,  // i0..i(N-1), q0..q(N-1)
};

/// Zero-mean, unit-variance normalization over all 2N real components
/// (population std, floored at 1e-12), laid out for the target model.
std::vector<double> preprocess(std::span<const IQSample> buf, FeatureLayout layout);

/// Argmax over two logits; ties resolve to index 0 (Unoccupied).
Detection argmax_detection(const std::array<double, 2>& logits);

// ---------------------------------------------------------------------------
// FCN

struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<double> weights;  // outputs x inputs, row-major
  std::vector<double> bias;     // outputs
};

struct FcnModel {
  static constexpr std::size_t kInputFeatures = 2 * kDefaultSlotSamples;
  static constexpr std::array<std::size_t, 5> kWidths{kInputFeatures, 512, 256, 128, 2};

  std::uint64_t seed = 0;
  std::vector<DenseLayer> layers;  // ReLU after every layer except the last

  static FcnModel from_seed(std::uint64_t seed);

  /// Forward pass over already-preprocessed interleaved features.
  std::array<double, 2> logits(std::span<const double> features) const;
  std::uint64_t multiply_accumulates() const;
};

/// preprocess(Interleaved) + forward + argmax. Throws ShapeMismatch unless
/// the buffer holds exactly 1536 samples.
Detection fcn_detect(std::span<const IQSample> buf, const FcnModel& model);
ControlDecision fcn_infer(std::span<const IQSample> buf, const FcnModel& model,
                          const ChannelContext& ctx = {});

// ---------------------------------------------------------------------------
// Xception-lite

/// Channels x length activations, channel-major.
struct Tensor {
  std::size_t channels = 0;
  std::size_t length = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t c, std::size_t n) : channels(c), length(n), data(c * n, 0.0) {}
  double& at(std::size_t c, std::size_t t) { return data[c * length + t]; }
  double at(std::size_t c, std::size_t t) const { return data[c * length + t]; }
};

inline constexpr std::size_t kConvKernel = 3;

/// Entry convolution: kernel 3, "same" zero padding, stride 1, bias.
struct Conv1d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<double> weights;  // [out][in][k]
  std::vector<double> bias;     // [out]
};

/// Depthwise kernel-3 convolution ("same" padding, no bias) followed by a
/// pointwise 1x1 convolution with bias.
struct SeparableBlock {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::vector<double> depthwise;  // [in][k]
  std::vector<double> pointwise;  // [out][in]
  std::vector<double> bias;       // [out]
};

Tensor conv1d_forward(const Conv1d& conv, const Tensor& input);
/// Depthwise then pointwise, no activation.
Tensor separable_conv(const SeparableBlock& block, const Tensor& input);
Tensor relu(Tensor t);
/// Max pooling, window 2, stride 2 (a trailing odd sample is dropped).
Tensor max_pool2(const Tensor& t);

struct XceptionLiteModel {
  static constexpr std::size_t kEntryChannels = 8;
  static constexpr std::array<std::size_t, 5> kBlockChannels{8, 16, 32, 64, 64};

  std::uint64_t seed = 0;
  Conv1d entry;                       // 2 -> 8, followed by ReLU
  std::vector<SeparableBlock> blocks;  // each followed by ReLU and max_pool2
  DenseLayer head;                    // 64 -> 2 after global average pooling

  static XceptionLiteModel from_seed(std::uint64_t seed);

  /// Forward pass over preprocessed channel-major features (2 x N).
  std::array<double, 2> logits(std::span<const double> features) const;
  std::uint64_t multiply_accumulates(std::size_t samples = kDefaultSlotSamples) const;
};

Detection xception_lite_detect(std::span<const IQSample> buf, const XceptionLiteModel& model);
ControlDecision xception_lite_infer(std::span<const IQSample> buf, const XceptionLiteModel& model,
                                    const ChannelContext& ctx = {});

// ---------------------------------------------------------------------------
// Dispatch

struct WorkloadConfig {
  EbsConfig ebs;
  FftConfig fft;
  std::uint64_t model_seed = 1;
};

/// A constructed dApp. Immutable after creation and shareable across threads.
class Workload {
 public:
  virtual ~Workload() = default;
  virtual DappKind kind() const = 0;
  /// Processing phase: preprocess (where the model needs it) + decide.
  virtual Detection detect(std::span<const IQSample> buf) const = 0;
};

std::shared_ptr<const Workload> make_workload(DappKind kind, const WorkloadConfig& cfg);

// ---------------------------------------------------------------------------
// Model files: "DWM1" | kind u8 | seed u64 LE. Weights are regenerated.

struct ModelFile {
  DappKind kind = DappKind::Fcn;
  std::uint64_t seed = 0;
  friend bool operator==(const ModelFile&, const ModelFile&) = default;
};

std::vector<std::uint8_t> encode_model_file(const ModelFile& file);
/// Throws std::runtime_error on bad magic, unknown kind or wrong size.
ModelFile decode_model_file(std::span<const std::uint8_t> data);
void save_model_file(const std::filesystem::path& path, const ModelFile& file);
ModelFile load_model_file(const std::filesystem::path& path);

}  // namespace dapp::workloads
