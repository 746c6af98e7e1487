#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ntpseg {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;

struct ModelConfig {
  int vocab_size = 0;
  int dim = 128;
  int n_layers = 4;
  int n_heads = 8;
  int n_kv_heads = 2;
  double ffn_mult = 8.0 / 3.0;
  int max_seq_len = 1024;
  int k_heads = 16;
  double dropout = 0.1;
  double rope_base = 10000.0;

  int head_dim() const { return dim / n_heads; }
  int kv_dim() const { return n_kv_heads * head_dim(); }
  // ffn_mult * dim rounded up to a multiple of 8.
  int hidden_dim() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
  bool decay = true;  // false for norm gains

  size_t size() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
};

// Flat parameter layout. Every tensor lives at a fixed offset inside one
// contiguous buffer, which the optimizer, clipping, checkpointing and
// gradient checks all treat uniformly.
class ParamLayout {
 public:
  struct Layer {
    size_t attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;
  };

  explicit ParamLayout(const ModelConfig& cfg);

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& operator[](size_t index) const { return tensors_[index]; }
  size_t find(std::string_view name) const;
  size_t total() const { return total_; }

  size_t embedding = 0;
  std::vector<Layer> layers;
  size_t final_norm = 0;
  // adapters[j - 2] is the adapter of prediction head j (head 1 has none).
  std::vector<size_t> adapters;

 private:
  size_t add(std::string name, int rows, int cols, bool decay);

  std::vector<TensorInfo> tensors_;
  size_t total_ = 0;
};

template <typename T>
struct ForwardOutput {
  Matrix<T> hidden;               // L x dim, after the final norm
  std::vector<Matrix<T>> logits;  // k_heads entries of L x vocab; logits[0] is the NTP head
};

struct ForwardOptions {
  bool training = false;  // enables dropout
  uint64_t dropout_seed = 0;
};

// Decoder-only causal transformer: RMSNorm, grouped-query attention with
// rotary positions, SwiGLU, tied input/output embedding and k parallel
// prediction heads (head j projects the shared hidden state through an
// adapter A_j before the tied vocabulary projection; A_1 is the identity).
template <typename T>
class Model {
 public:
  struct LayerCache {
    Matrix<T> x_in;
    std::vector<T> inv_rms_attn;
    Matrix<T> attn_in;
    Matrix<T> q, k, v;  // q and k after rotary embedding
    std::vector<Matrix<T>> probs;
    std::vector<std::vector<uint8_t>> attn_keep;
    Matrix<T> attn_out;
    Matrix<T> x_mid;
    std::vector<T> inv_rms_ffn;
    Matrix<T> ffn_in, gate, up, act;
    std::vector<uint8_t> ffn_keep;
  };

  struct Cache {
    std::vector<int32_t> ids;
    std::vector<int> positions;
    std::vector<LayerCache> layers;
    Matrix<T> x_final;
    std::vector<T> inv_rms_final;
    bool dropout_active = false;
  };

  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return *layout_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }

  // Normal(0, 0.02) weights, residual projections scaled by 1/sqrt(2 n_layers),
  // unit norm gains, identity head adapters.
  void init(uint64_t seed);

  ConstMatrixMap<T> tensor(size_t index) const;
  MatrixMap<T> tensor(size_t index);
  ConstMatrixMap<T> embedding() const { return tensor(layout_->embedding); }

  // Trunk forward. `positions` may be empty (then 0..L-1). When `cache` is
  // non-null everything needed by backward_hidden is retained.
  Matrix<T> forward_hidden(std::span<const int32_t> ids, std::span<const int> positions,
                           const ForwardOptions& opts, Cache* cache) const;

  // Accumulates parameter gradients of <d_hidden, hidden> into `grad`.
  void backward_hidden(const Cache& cache, const Matrix<T>& d_hidden, std::span<T> grad) const;

  // Head input for head j (1-based): rows of hidden times A_j.
  Matrix<T> head_input(const Matrix<T>& hidden_rows, int head) const;
  // d(head_input) -> d(hidden_rows); accumulates dA_j.
  Matrix<T> backward_head_input(const Matrix<T>& hidden_rows, const Matrix<T>& d_head_rows,
                                int head, std::span<T> grad) const;

  // Tied projection onto the vocabulary.
  Matrix<T> logits(const Matrix<T>& head_rows) const;
  // d(logits) -> d(head_rows); accumulates the output-side embedding gradient.
  Matrix<T> backward_logits(const Matrix<T>& head_rows, const Matrix<T>& d_logits,
                            std::span<T> grad) const;

  // Full inference forward for every position and head.
  ForwardOutput<T> forward(std::span<const int32_t> ids, std::span<const int> positions = {}) const;

  // Incremental decoding with a KV cache. Copying a Decoder forks the
  // hypothesis; the prompt part of the cache is shared between copies.
  class Decoder {
   public:
    explicit Decoder(const Model& model);
    // Feeds the prompt and returns the final hidden row of its last token.
    Eigen::Matrix<T, 1, Eigen::Dynamic> prefill(std::span<const int32_t> ids,
                                                std::span<const int> positions);
    Eigen::Matrix<T, 1, Eigen::Dynamic> step(int32_t id, int position);
    size_t length() const { return prefix_len_ + suffix_len_; }

   private:
    struct Kv {
      std::vector<Matrix<T>> k, v;
    };
    // Row-major rows appended per step, one vector per layer.
    struct SuffixKv {
      std::vector<std::vector<T>> k, v;
    };
    Eigen::Matrix<T, 1, Eigen::Dynamic> run(std::span<const int32_t> ids,
                                            std::span<const int> positions, bool into_prefix);

    const Model* model_;
    std::shared_ptr<const Kv> prefix_;
    size_t prefix_len_ = 0;
    SuffixKv suffix_;
    size_t suffix_len_ = 0;
  };

 private:
  ModelConfig cfg_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<T> params_;
};

extern template class Model<float>;
extern template class Model<double>;

// Copies parameters between precisions (f32 training weights into an f64
// model for gradient checks and back).
template <typename To, typename From>
Model<To> convert_model(const Model<From>& from) {
  Model<To> to(from.config());
  for (size_t i = 0; i < from.params().size(); ++i) to.params()[i] = static_cast<To>(from.params()[i]);
  return to;
}

template <typename T>
void rmsnorm(std::span<const T> x, std::span<const T> gain, std::span<T> out, T eps = T(1e-6));

}  // namespace ntpseg
