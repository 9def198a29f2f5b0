#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "edualign/rng.hpp"
#include "edualign/types.hpp"

namespace edualign::model {

enum class Variant { policy, reward };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);

// Decoder-only pre-norm transformer: learned positional embeddings, GELU MLP.
// The policy variant carries an LM head over the vocabulary; the reward
// variant carries three bounded scalar heads read from the final position of
// [prompt; separator; response] (the separator is eos_id).
struct ModelConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq_len = 64;
  Variant variant = Variant::policy;
  std::int32_t bos_id = 0;
  std::int32_t eos_id = 1;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named, shaped parameter array. Values are stored as float32 (the on-disk
// dtype); all arithmetic runs in double.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> v;

  std::size_t numel() const { return v.size(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

class ModelParameters {
 public:
  ModelParameters() = default;

  // Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains. Reward
  // heads start entirely at zero so fresh models predict the mid-scale 1.0.
  static ModelParameters init(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::vector<Tensor>& tensors() { return tensors_; }

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  int index_of(const std::string& name) const;

  std::size_t parameter_count() const;

  friend bool operator==(const ModelParameters&, const ModelParameters&) = default;

 private:
  ModelConfig cfg_;
  std::vector<Tensor> tensors_;
  std::map<std::string, int> index_;

  void rebuild_index();
  friend ModelParameters make_parameters(const ModelConfig&,
                                         std::vector<Tensor>);
};

// Gradient buffers, one per parameter tensor, in the same order.
struct Gradients {
  std::vector<std::vector<double>> by_tensor;

  static Gradients zeros_like(const ModelParameters& params);
  void add_scaled(const Gradients& other, double scale);
  double max_abs() const;
};

// Per-position next-token distributions; rows sum to 1 and position t only
// sees tokens at positions <= t.
std::vector<std::vector<double>> forward_policy(const ModelParameters& params,
                                                const TokenSequence& tokens);

// Three scores in (0, 2), each 2*sigmoid(head logit) at the final position of
// [prompt; eos; response].
HpcScores forward_reward(const ModelParameters& params,
                         const TokenSequence& prompt,
                         const TokenSequence& response);

// Log-probability of each realized response token given the prompt and the
// preceding response tokens. Sum equals log pi(response | prompt).
std::vector<double> log_prob(const ModelParameters& params,
                             const TokenSequence& prompt,
                             const TokenSequence& response);

// Autoregressive sampling until eos or max_new tokens; temperature 0 decodes
// greedily. The returned sequence excludes the prompt (a trailing eos is kept,
// so responses are never empty).
TokenSequence sample(const ModelParameters& params, const TokenSequence& prompt,
                     int max_new, double temperature, Rng& rng);

// ---------------------------------------------------------------------------
// Loss specifications for the reverse pass.

// Mean over the batch of the summed squared error of the three reward heads.
struct RmSquaredErrorLoss {
  struct Item {
    TokenSequence prompt;
    TokenSequence response;
    HpcScores target;
  };
  std::vector<Item> batch;
};

// Scalar sum_t coeff[t] * log pi(token[t]) over the predicted positions of
// each sequence. Policy objectives reduce to this form once their per-token
// coefficients (d loss / d logprob) are known, so the reverse pass through
// the network is shared.
struct WeightedLogProbLoss {
  struct Item {
    TokenSequence full;            // prompt followed by response
    int predict_from = 0;          // index of the first predicted token
    std::vector<double> coeffs;    // one per predicted token
  };
  std::vector<Item> items;
};

using LossSpec = std::variant<RmSquaredErrorLoss, WeightedLogProbLoss>;

struct BackwardResult {
  double loss = 0.0;  // the scalar the gradients differentiate
  Gradients grads;
};

// Exact reverse-mode gradients of the requested scalar.
BackwardResult backward(const ModelParameters& params, const LossSpec& spec);

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line (config, tensor names/shapes/offsets,
// dtype "f32") followed by concatenated little-endian float32 buffers.

void save_checkpoint(const ModelParameters& params,
                     const std::filesystem::path& path);
ModelParameters load_checkpoint(const std::filesystem::path& path);
ModelParameters load_checkpoint(const std::filesystem::path& path,
                                Variant expected);

}  // namespace edualign::model
