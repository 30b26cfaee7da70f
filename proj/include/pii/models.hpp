#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pii/autodiff.hpp"
#include "pii/config.hpp"
#include "pii/regularizers.hpp"
#include "pii/rng.hpp"
#include "pii/tensor.hpp"

namespace pii::models {

enum class Arch { cnn_bn, tiny_attention, tiny_mixer };

std::string to_string(Arch a);
Arch arch_from_string(const std::string& s);

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stdd;
  bool operator==(const Normalization&) const = default;
};

// One batch-norm site: the pre-norm activations on the tape plus the stored
// running statistics they are normalized with.
struct BNTap {
  ad::Value features;
  const Tensor* mean = nullptr;
  const Tensor* var = nullptr;
};

struct ForwardResult {
  ad::Value logits;
  std::vector<BNTap> bn_taps;
};

using ParamBind = std::vector<std::pair<Tensor*, ad::Value>>;

// A differentiable classifier. Parameters live in the network object;
// forward() re-registers them on the given tape each call. With
// trainable=false the weights are frozen leaves, so backward reaches only
// the input.
class Network {
 public:
  virtual ~Network() = default;
  virtual Arch arch() const = 0;
  virtual int num_classes() const = 0;
  // -1 means any square input; otherwise the fixed input side length.
  virtual int input_resolution() const = 0;
  virtual bool has_bn_stats() const = 0;
  virtual ForwardResult forward(ad::Graph& g, ad::Value x, bool training, bool trainable,
                                ParamBind* bind) = 0;
  // All persisted tensors (parameters first, then running stats), with
  // stable names; ordering defines the serialization and hash.
  virtual std::vector<std::pair<std::string, Tensor*>> named_tensors() = 0;
  virtual std::vector<Tensor*> parameters() = 0;
  // Stored batch statistics for the feature regularizer, ordered like the
  // taps emitted by forward().
  virtual std::vector<regularizers::LayerStats> bn_stats() const = 0;
};

struct ClassifierHandle {
  std::shared_ptr<Network> net;
  std::string name;
  std::optional<Normalization> normalization;

  int num_classes() const { return net->num_classes(); }
  int input_resolution() const { return net->input_resolution(); }
  bool has_bn_stats() const { return net->has_bn_stats(); }
};

std::shared_ptr<Network> make_network(Arch arch, int num_classes, uint64_t seed);

// Two-layer MLP (flatten, linear, relu, linear); a minimal differentiable
// classifier for oracle comparisons and gradient checks.
std::shared_ptr<Network> make_two_layer(int input_resolution, int hidden, int num_classes,
                                        uint64_t seed);

// Plain inference. Fixed-size architectures get a bilinear resize adapter
// when the batch resolution differs; with allow_resize=false a mismatch is
// a capability error instead.
Tensor forward_scores(const ClassifierHandle& h, const Tensor& batch_nchw,
                      bool allow_resize = true);

// (x - mean) / std per channel; accepts CHW or NCHW.
Tensor apply_normalization(const Tensor& t, const Normalization& n);

struct Dataset {
  Tensor images;  // [N, 3, R, R], values in [0, 1]
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  int64_t size() const { return images.rank() == 4 ? images.shape[0] : 0; }
};

// Deterministic procedural 10-class shape/texture set, 32x32 RGB. Colors
// are randomized per sample; class identity is spatial structure only.
Dataset make_synthetic_dataset(int64_t count, uint64_t seed);

// CIFAR-10 binary archives under <data_dir>/cifar-10-batches-bin.
Dataset load_cifar10(const std::string& data_dir, bool train);

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// name: "synthetic" or "cifar10". data_dir may come from PII_DATA_DIR.
DatasetPair load_dataset(const std::string& name, const std::string& data_dir);

struct TrainReport {
  std::string arch;
  std::string dataset;
  uint64_t seed = 0;
  int epochs = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::string weight_hash;
};

ClassifierHandle train_toy(Arch arch, const DatasetPair& data, int epochs, uint64_t seed,
                           TrainReport* report = nullptr);

// Top-1 accuracy on raw [0,1] pixels (training runs on raw pixels; the
// stored normalization is an inversion-time option).
double dataset_accuracy(const ClassifierHandle& h, const Dataset& d);

// FNV-1a over the serialized bytes of all named tensors.
std::string weight_hash(Network& net);

// Binary weights at `path` plus a JSON manifest at `path` + ".json".
void save_model(const ClassifierHandle& h, const TrainReport& report, const std::string& path);
ClassifierHandle load_model(const std::string& path);

}  // namespace pii::models
