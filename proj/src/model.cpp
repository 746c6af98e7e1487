#include "ntpseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ntpseg/error.hpp"
#include "ntpseg/rng.hpp"

namespace ntpseg {

int ModelConfig::hidden_dim() const {
  const int raw = static_cast<int>(std::ceil(ffn_mult * dim - 1e-9));
  return (raw + 7) / 8 * 8;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw InvalidInput("model config: " + msg); };
  if (vocab_size <= 0) fail("vocab_size must be positive");
  if (dim <= 0 || n_layers <= 0 || n_heads <= 0 || n_kv_heads <= 0) fail("sizes must be positive");
  if (n_heads % n_kv_heads != 0) fail("n_heads must be divisible by n_kv_heads");
  if (dim % n_heads != 0) fail("dim must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head_dim must be even for rotary embeddings");
  if (k_heads < 1) fail("k_heads must be >= 1");
  if (max_seq_len < 1) fail("max_seq_len must be positive");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (ffn_mult <= 0.0) fail("ffn_mult must be positive");
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.dim;
  embedding = add("tok_embedding", cfg.vocab_size, d, true);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Layer layer{};
    layer.attn_norm = add(p + "attn_norm", 1, d, false);
    layer.wq = add(p + "wq", d, d, true);
    layer.wk = add(p + "wk", d, cfg.kv_dim(), true);
    layer.wv = add(p + "wv", d, cfg.kv_dim(), true);
    layer.wo = add(p + "wo", d, d, true);
    layer.ffn_norm = add(p + "ffn_norm", 1, d, false);
    layer.w_gate = add(p + "w_gate", d, cfg.hidden_dim(), true);
    layer.w_up = add(p + "w_up", d, cfg.hidden_dim(), true);
    layer.w_down = add(p + "w_down", cfg.hidden_dim(), d, true);
    layers.push_back(layer);
  }
  final_norm = add("final_norm", 1, d, false);
  for (int j = 2; j <= cfg.k_heads; ++j) {
    adapters.push_back(add("heads." + std::to_string(j) + ".adapter", d, d, true));
  }
}

size_t ParamLayout::add(std::string name, int rows, int cols, bool decay) {
  tensors_.push_back({std::move(name), rows, cols, total_, decay});
  total_ += tensors_.back().size();
  return tensors_.size() - 1;
}

size_t ParamLayout::find(std::string_view name) const {
  for (size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].name == name) return i;
  }
  throw InvalidInput("no tensor named '" + std::string(name) + "'");
}

namespace {

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
void rmsnorm_rows(const Matrix<T>& x, const ConstMatrixMap<T>& gain, Matrix<T>& out,
                  std::vector<T>* inv_rms, T eps = T(1e-6)) {
  const Eigen::Index d = x.cols();
  out.resize(x.rows(), d);
  if (inv_rms) inv_rms->resize(static_cast<size_t>(x.rows()));
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const T r = T(1) / std::sqrt(x.row(n).squaredNorm() / T(d) + eps);
    out.row(n) = x.row(n).cwiseProduct(gain.row(0)) * r;
    if (inv_rms) (*inv_rms)[static_cast<size_t>(n)] = r;
  }
}

// dx += d(rmsnorm)/dx^T dy; dgain += ...
template <typename T>
void rmsnorm_backward(const Matrix<T>& x, const std::vector<T>& inv_rms,
                      const ConstMatrixMap<T>& gain, const Matrix<T>& dy, Matrix<T>& dx,
                      MatrixMap<T> dgain) {
  const T inv_d = T(1) / T(x.cols());
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const T r = inv_rms[static_cast<size_t>(n)];
    dgain.row(0) += dy.row(n).cwiseProduct(x.row(n)) * r;
    const RowVec<T> dxhat = dy.row(n).cwiseProduct(gain.row(0));
    const T dot = dxhat.dot(x.row(n));
    dx.row(n) += dxhat * r - x.row(n) * (r * r * r * dot * inv_d);
  }
}

template <typename T>
struct RopeTable {
  Matrix<T> cos, sin;  // L x (head_dim / 2)
};

template <typename T>
RopeTable<T> rope_table(std::span<const int> positions, int head_dim, double base) {
  const int half = head_dim / 2;
  RopeTable<T> t{Matrix<T>(static_cast<Eigen::Index>(positions.size()), half),
                 Matrix<T>(static_cast<Eigen::Index>(positions.size()), half)};
  for (size_t n = 0; n < positions.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double theta = std::pow(base, -2.0 * i / head_dim);
      const double angle = positions[n] * theta;
      t.cos(static_cast<Eigen::Index>(n), i) = static_cast<T>(std::cos(angle));
      t.sin(static_cast<Eigen::Index>(n), i) = static_cast<T>(std::sin(angle));
    }
  }
  return t;
}

// Rotates adjacent pairs of every head in place; `inverse` applies the transpose.
template <typename T, typename Derived>
void apply_rope(Eigen::MatrixBase<Derived>& m, const RopeTable<T>& t, Eigen::Index row0,
                int head_dim, bool inverse) {
  const int half = head_dim / 2;
  const Eigen::Index heads = m.cols() / head_dim;
  for (Eigen::Index n = 0; n < m.rows(); ++n) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      for (int i = 0; i < half; ++i) {
        const T c = t.cos(row0 + n, i);
        const T s = inverse ? -t.sin(row0 + n, i) : t.sin(row0 + n, i);
        const Eigen::Index a = h * head_dim + 2 * i;
        const T x0 = m(n, a);
        const T x1 = m(n, a + 1);
        m(n, a) = x0 * c - x1 * s;
        m(n, a + 1) = x0 * s + x1 * c;
      }
    }
  }
}

// Bernoulli keep mask with probability 1 - p, two 32-bit draws per u64.
std::vector<uint8_t> keep_mask(uint64_t seed, size_t count, double p) {
  std::vector<uint8_t> keep(count);
  Rng rng(seed);
  const uint64_t threshold = static_cast<uint64_t>((1.0 - p) * 4294967296.0);
  size_t i = 0;
  while (i < count) {
    const uint64_t r = rng.next_u64();
    keep[i++] = (r & 0xffffffffULL) < threshold;
    if (i < count) keep[i++] = (r >> 32) < threshold;
  }
  return keep;
}

uint64_t dropout_stream(uint64_t seed, int layer, int slot) {
  return hash_combine(hash_combine(seed, static_cast<uint64_t>(layer)), static_cast<uint64_t>(slot));
}

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

}  // namespace

template <typename T>
void rmsnorm(std::span<const T> x, std::span<const T> gain, std::span<T> out, T eps) {
  if (x.size() != gain.size() || x.size() != out.size()) {
    throw InvalidInput("rmsnorm: length mismatch");
  }
  T ms = 0;
  for (T v : x) ms += v * v;
  ms /= static_cast<T>(x.size());
  const T r = T(1) / std::sqrt(ms + eps);
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * r * gain[i];
}

template void rmsnorm<float>(std::span<const float>, std::span<const float>, std::span<float>, float);
template void rmsnorm<double>(std::span<const double>, std::span<const double>, std::span<double>,
                              double);

template <typename T>
Model<T>::Model(ModelConfig cfg)
    : cfg_(cfg), layout_(std::make_shared<ParamLayout>(cfg)), params_(layout_->total(), T(0)) {}

template <typename T>
void Model<T>::init(uint64_t seed) {
  Rng rng(seed);
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg_.n_layers);
  for (size_t t = 0; t < layout_->tensors().size(); ++t) {
    const TensorInfo& info = (*layout_)[t];
    auto m = tensor(t);
    if (!info.decay) {
      m.setOnes();
      continue;
    }
    const bool adapter = info.name.rfind("heads.", 0) == 0;
    if (adapter) {
      m.setIdentity();
      continue;
    }
    const bool residual = info.name.ends_with(".wo") || info.name.ends_with(".w_down");
    const double std = 0.02 * (residual ? resid_scale : 1.0);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * rng.normal());
  }
}

template <typename T>
ConstMatrixMap<T> Model<T>::tensor(size_t index) const {
  const TensorInfo& info = (*layout_)[index];
  return ConstMatrixMap<T>(params_.data() + info.offset, info.rows, info.cols);
}

template <typename T>
MatrixMap<T> Model<T>::tensor(size_t index) {
  const TensorInfo& info = (*layout_)[index];
  return MatrixMap<T>(params_.data() + info.offset, info.rows, info.cols);
}

template <typename T>
Matrix<T> Model<T>::forward_hidden(std::span<const int32_t> ids, std::span<const int> positions_in,
                                   const ForwardOptions& opts, Cache* cache) const {
  const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
  if (L == 0) throw InvalidInput("forward: empty sequence");
  if (L > cfg_.max_seq_len) {
    throw InvalidInput("forward: sequence length " + std::to_string(L) + " exceeds max_seq_len " +
                       std::to_string(cfg_.max_seq_len));
  }
  for (size_t n = 0; n < ids.size(); ++n) {
    if (ids[n] < 0 || ids[n] >= cfg_.vocab_size) {
      throw InvalidInput("forward: token id " + std::to_string(ids[n]) + " at position " +
                         std::to_string(n) + " outside vocabulary");
    }
  }
  std::vector<int> positions(positions_in.begin(), positions_in.end());
  if (positions.empty()) {
    positions.resize(ids.size());
    for (size_t n = 0; n < positions.size(); ++n) positions[n] = static_cast<int>(n);
  } else if (positions.size() != ids.size()) {
    throw InvalidInput("forward: positions length differs from ids length");
  }

  const int d = cfg_.dim;
  const int hd = cfg_.head_dim();
  const int group = cfg_.n_heads / cfg_.n_kv_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const bool dropout = opts.training && cfg_.dropout > 0.0;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - cfg_.dropout));
  const RopeTable<T> rope = rope_table<T>(positions, hd, cfg_.rope_base);
  const ParamLayout& lay = *layout_;

  if (cache) {
    cache->ids.assign(ids.begin(), ids.end());
    cache->positions = positions;
    cache->layers.assign(static_cast<size_t>(cfg_.n_layers), LayerCache{});
    cache->dropout_active = dropout;
  }

  const auto emb = embedding();
  Matrix<T> x(L, d);
  for (Eigen::Index n = 0; n < L; ++n) x.row(n) = emb.row(ids[static_cast<size_t>(n)]);

  LayerCache scratch;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto& P = lay.layers[static_cast<size_t>(l)];
    LayerCache& lc = cache ? cache->layers[static_cast<size_t>(l)] : scratch;
    if (cache) lc.x_in = x;
    rmsnorm_rows<T>(x, tensor(P.attn_norm), lc.attn_in, &lc.inv_rms_attn);
    lc.q.noalias() = lc.attn_in * tensor(P.wq);
    lc.k.noalias() = lc.attn_in * tensor(P.wk);
    lc.v.noalias() = lc.attn_in * tensor(P.wv);
    apply_rope(lc.q, rope, 0, hd, false);
    apply_rope(lc.k, rope, 0, hd, false);

    lc.attn_out.resize(L, d);
    lc.probs.resize(static_cast<size_t>(cfg_.n_heads));
    lc.attn_keep.assign(static_cast<size_t>(cfg_.n_heads), {});
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const int g = h / group;
      Matrix<T>& S = lc.probs[static_cast<size_t>(h)];
      S.noalias() = lc.q.middleCols(h * hd, hd) * lc.k.middleCols(g * hd, hd).transpose();
      for (Eigen::Index i = 0; i < L; ++i) {
        auto row = S.row(i).head(i + 1);
        row *= scale;
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
        if (i + 1 < L) S.row(i).tail(L - i - 1).setZero();
      }
      if (dropout) {
        auto& keep = lc.attn_keep[static_cast<size_t>(h)];
        keep = keep_mask(dropout_stream(opts.dropout_seed, l, h), static_cast<size_t>(L * L),
                         cfg_.dropout);
        Matrix<T> Pd = S;
        for (Eigen::Index i = 0; i < Pd.size(); ++i) {
          Pd.data()[i] = keep[static_cast<size_t>(i)] ? Pd.data()[i] * keep_scale : T(0);
        }
        lc.attn_out.middleCols(h * hd, hd).noalias() = Pd * lc.v.middleCols(g * hd, hd);
      } else {
        lc.attn_out.middleCols(h * hd, hd).noalias() = S * lc.v.middleCols(g * hd, hd);
      }
    }
    if (!cache) lc.probs.clear();
    x.noalias() += lc.attn_out * tensor(P.wo);
    if (cache) lc.x_mid = x;

    rmsnorm_rows<T>(x, tensor(P.ffn_norm), lc.ffn_in, &lc.inv_rms_ffn);
    lc.gate.noalias() = lc.ffn_in * tensor(P.w_gate);
    lc.up.noalias() = lc.ffn_in * tensor(P.w_up);
    lc.act = lc.gate.unaryExpr([](T g) { return silu(g); }).cwiseProduct(lc.up);
    Matrix<T> f = lc.act * tensor(P.w_down);
    if (dropout) {
      lc.ffn_keep = keep_mask(dropout_stream(opts.dropout_seed, l, cfg_.n_heads),
                              static_cast<size_t>(f.size()), cfg_.dropout);
      for (Eigen::Index i = 0; i < f.size(); ++i) {
        f.data()[i] = lc.ffn_keep[static_cast<size_t>(i)] ? f.data()[i] * keep_scale : T(0);
      }
    }
    x += f;
  }

  Matrix<T> hidden;
  if (cache) {
    cache->x_final = x;
    rmsnorm_rows<T>(x, tensor(lay.final_norm), hidden, &cache->inv_rms_final);
  } else {
    rmsnorm_rows<T>(x, tensor(lay.final_norm), hidden, nullptr);
  }
  return hidden;
}

template <typename T>
void Model<T>::backward_hidden(const Cache& cache, const Matrix<T>& d_hidden,
                               std::span<T> grad) const {
  if (grad.size() != params_.size()) throw InvalidInput("backward: gradient buffer size mismatch");
  const ParamLayout& lay = *layout_;
  auto gmap = [&](size_t index) {
    const TensorInfo& info = lay[index];
    return MatrixMap<T>(grad.data() + info.offset, info.rows, info.cols);
  };
  const Eigen::Index L = static_cast<Eigen::Index>(cache.ids.size());
  const int d = cfg_.dim;
  const int hd = cfg_.head_dim();
  const int group = cfg_.n_heads / cfg_.n_kv_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - cfg_.dropout));
  const RopeTable<T> rope = rope_table<T>(cache.positions, hd, cfg_.rope_base);

  Matrix<T> dx = Matrix<T>::Zero(L, d);
  rmsnorm_backward<T>(cache.x_final, cache.inv_rms_final, tensor(lay.final_norm), d_hidden, dx,
                      gmap(lay.final_norm));

  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const auto& P = lay.layers[static_cast<size_t>(l)];
    const LayerCache& lc = cache.layers[static_cast<size_t>(l)];

    // FFN block: x_out = x_mid + dropout(act * W_down)
    Matrix<T> df = dx;
    if (cache.dropout_active) {
      for (Eigen::Index i = 0; i < df.size(); ++i) {
        df.data()[i] = lc.ffn_keep[static_cast<size_t>(i)] ? df.data()[i] * keep_scale : T(0);
      }
    }
    gmap(P.w_down).noalias() += lc.act.transpose() * df;
    const Matrix<T> dact = df * tensor(P.w_down).transpose();
    Matrix<T> dgate(L, lc.gate.cols());
    Matrix<T> dup(L, lc.gate.cols());
    for (Eigen::Index i = 0; i < dgate.size(); ++i) {
      const T g = lc.gate.data()[i];
      const T sig = T(1) / (T(1) + std::exp(-g));
      const T s = g * sig;
      dup.data()[i] = dact.data()[i] * s;
      dgate.data()[i] = dact.data()[i] * lc.up.data()[i] * sig * (T(1) + g * (T(1) - sig));
    }
    gmap(P.w_gate).noalias() += lc.ffn_in.transpose() * dgate;
    gmap(P.w_up).noalias() += lc.ffn_in.transpose() * dup;
    Matrix<T> dffn_in = dgate * tensor(P.w_gate).transpose();
    dffn_in.noalias() += dup * tensor(P.w_up).transpose();
    rmsnorm_backward<T>(lc.x_mid, lc.inv_rms_ffn, tensor(P.ffn_norm), dffn_in, dx,
                        gmap(P.ffn_norm));

    // Attention block: x_mid = x_in + attn_out * W_o
    gmap(P.wo).noalias() += lc.attn_out.transpose() * dx;
    const Matrix<T> dattn = dx * tensor(P.wo).transpose();
    Matrix<T> dq = Matrix<T>::Zero(L, d);
    Matrix<T> dk = Matrix<T>::Zero(L, cfg_.kv_dim());
    Matrix<T> dv = Matrix<T>::Zero(L, cfg_.kv_dim());
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const int g = h / group;
      const Matrix<T>& prob = lc.probs[static_cast<size_t>(h)];
      const auto dO = dattn.middleCols(h * hd, hd);
      Matrix<T> dP = dO * lc.v.middleCols(g * hd, hd).transpose();
      if (cache.dropout_active) {
        const auto& keep = lc.attn_keep[static_cast<size_t>(h)];
        Matrix<T> Pd = prob;
        for (Eigen::Index i = 0; i < Pd.size(); ++i) {
          const T m = keep[static_cast<size_t>(i)] ? keep_scale : T(0);
          Pd.data()[i] *= m;
          dP.data()[i] *= m;
        }
        dv.middleCols(g * hd, hd).noalias() += Pd.transpose() * dO;
      } else {
        dv.middleCols(g * hd, hd).noalias() += prob.transpose() * dO;
      }
      // softmax backward, restricted to the causal triangle
      Matrix<T>& dS = dP;
      for (Eigen::Index i = 0; i < L; ++i) {
        auto p_row = prob.row(i).head(i + 1);
        auto d_row = dS.row(i).head(i + 1);
        const T dot = p_row.dot(d_row);
        d_row = p_row.cwiseProduct((d_row.array() - dot).matrix()) * scale;
        if (i + 1 < L) dS.row(i).tail(L - i - 1).setZero();
      }
      dq.middleCols(h * hd, hd).noalias() += dS * lc.k.middleCols(g * hd, hd);
      dk.middleCols(g * hd, hd).noalias() += dS.transpose() * lc.q.middleCols(h * hd, hd);
    }
    apply_rope(dq, rope, 0, hd, true);
    apply_rope(dk, rope, 0, hd, true);
    gmap(P.wq).noalias() += lc.attn_in.transpose() * dq;
    gmap(P.wk).noalias() += lc.attn_in.transpose() * dk;
    gmap(P.wv).noalias() += lc.attn_in.transpose() * dv;
    Matrix<T> dattn_in = dq * tensor(P.wq).transpose();
    dattn_in.noalias() += dk * tensor(P.wk).transpose();
    dattn_in.noalias() += dv * tensor(P.wv).transpose();
    rmsnorm_backward<T>(lc.x_in, lc.inv_rms_attn, tensor(P.attn_norm), dattn_in, dx,
                        gmap(P.attn_norm));
  }

  auto demb = gmap(lay.embedding);
  for (Eigen::Index n = 0; n < L; ++n) demb.row(cache.ids[static_cast<size_t>(n)]) += dx.row(n);
}

template <typename T>
Matrix<T> Model<T>::head_input(const Matrix<T>& hidden_rows, int head) const {
  if (head < 1 || head > cfg_.k_heads) throw InvalidInput("head index out of range");
  if (head == 1) return hidden_rows;
  return hidden_rows * tensor(layout_->adapters[static_cast<size_t>(head - 2)]);
}

template <typename T>
Matrix<T> Model<T>::backward_head_input(const Matrix<T>& hidden_rows, const Matrix<T>& d_head_rows,
                                        int head, std::span<T> grad) const {
  if (head == 1) return d_head_rows;
  const size_t index = layout_->adapters[static_cast<size_t>(head - 2)];
  const TensorInfo& info = (*layout_)[index];
  MatrixMap<T>(grad.data() + info.offset, info.rows, info.cols).noalias() +=
      hidden_rows.transpose() * d_head_rows;
  return d_head_rows * tensor(index).transpose();
}

template <typename T>
Matrix<T> Model<T>::logits(const Matrix<T>& head_rows) const {
  return head_rows * embedding().transpose();
}

template <typename T>
Matrix<T> Model<T>::backward_logits(const Matrix<T>& head_rows, const Matrix<T>& d_logits,
                                    std::span<T> grad) const {
  const TensorInfo& info = (*layout_)[layout_->embedding];
  MatrixMap<T>(grad.data() + info.offset, info.rows, info.cols).noalias() +=
      d_logits.transpose() * head_rows;
  return d_logits * embedding();
}

template <typename T>
ForwardOutput<T> Model<T>::forward(std::span<const int32_t> ids,
                                   std::span<const int> positions) const {
  ForwardOutput<T> out;
  out.hidden = forward_hidden(ids, positions, ForwardOptions{}, nullptr);
  for (int j = 1; j <= cfg_.k_heads; ++j) out.logits.push_back(logits(head_input(out.hidden, j)));
  return out;
}

template <typename T>
Model<T>::Decoder::Decoder(const Model& model) : model_(&model) {
  suffix_.k.resize(static_cast<size_t>(model.cfg_.n_layers));
  suffix_.v.resize(static_cast<size_t>(model.cfg_.n_layers));
}

template <typename T>
Eigen::Matrix<T, 1, Eigen::Dynamic> Model<T>::Decoder::prefill(std::span<const int32_t> ids,
                                                               std::span<const int> positions) {
  if (length() != 0) throw InvalidInput("decoder: prefill must come first");
  return run(ids, positions, true);
}

template <typename T>
Eigen::Matrix<T, 1, Eigen::Dynamic> Model<T>::Decoder::step(int32_t id, int position) {
  const int32_t ids[1] = {id};
  const int pos[1] = {position};
  return run(ids, pos, false);
}

template <typename T>
Eigen::Matrix<T, 1, Eigen::Dynamic> Model<T>::Decoder::run(std::span<const int32_t> ids,
                                                           std::span<const int> positions,
                                                           bool into_prefix) {
  const Model& m = *model_;
  const ModelConfig& cfg = m.cfg_;
  const ParamLayout& lay = *m.layout_;
  const Eigen::Index B = static_cast<Eigen::Index>(ids.size());
  if (B == 0 || positions.size() != ids.size()) throw InvalidInput("decoder: bad block");
  if (length() + ids.size() > static_cast<size_t>(cfg.max_seq_len)) {
    throw InvalidInput("decoder: sequence exceeds max_seq_len");
  }
  for (int32_t id : ids) {
    if (id < 0 || id >= cfg.vocab_size) throw InvalidInput("decoder: token id outside vocabulary");
  }
  const int d = cfg.dim;
  const int hd = cfg.head_dim();
  const int kvd = cfg.kv_dim();
  const int group = cfg.n_heads / cfg.n_kv_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const RopeTable<T> rope = rope_table<T>(positions, hd, cfg.rope_base);

  std::shared_ptr<Kv> new_prefix;
  if (into_prefix) {
    new_prefix = std::make_shared<Kv>();
    new_prefix->k.resize(static_cast<size_t>(cfg.n_layers));
    new_prefix->v.resize(static_cast<size_t>(cfg.n_layers));
  }

  const auto emb = m.embedding();
  Matrix<T> x(B, d);
  for (Eigen::Index n = 0; n < B; ++n) x.row(n) = emb.row(ids[static_cast<size_t>(n)]);

  const size_t base = length();
  Matrix<T> a, q, k, v, attn(B, d), b;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& P = lay.layers[static_cast<size_t>(l)];
    const size_t li = static_cast<size_t>(l);
    rmsnorm_rows<T>(x, m.tensor(P.attn_norm), a, nullptr);
    q.noalias() = a * m.tensor(P.wq);
    k.noalias() = a * m.tensor(P.wk);
    v.noalias() = a * m.tensor(P.wv);
    apply_rope(q, rope, 0, hd, false);
    apply_rope(k, rope, 0, hd, false);

    // Key/value rows visible to this block: prefix, suffix so far, then the block.
    Matrix<T> keys(static_cast<Eigen::Index>(base) + B, kvd);
    Matrix<T> vals(static_cast<Eigen::Index>(base) + B, kvd);
    Eigen::Index r = 0;
    if (prefix_) {
      keys.topRows(static_cast<Eigen::Index>(prefix_len_)) = prefix_->k[li];
      vals.topRows(static_cast<Eigen::Index>(prefix_len_)) = prefix_->v[li];
      r = static_cast<Eigen::Index>(prefix_len_);
    }
    if (suffix_len_ > 0) {
      keys.middleRows(r, static_cast<Eigen::Index>(suffix_len_)) =
          ConstMatrixMap<T>(suffix_.k[li].data(), static_cast<Eigen::Index>(suffix_len_), kvd);
      vals.middleRows(r, static_cast<Eigen::Index>(suffix_len_)) =
          ConstMatrixMap<T>(suffix_.v[li].data(), static_cast<Eigen::Index>(suffix_len_), kvd);
    }
    keys.bottomRows(B) = k;
    vals.bottomRows(B) = v;

    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = h / group;
      Matrix<T> S = q.middleCols(h * hd, hd) * keys.middleCols(g * hd, hd).transpose();
      for (Eigen::Index i = 0; i < B; ++i) {
        const Eigen::Index visible = static_cast<Eigen::Index>(base) + i + 1;
        auto row = S.row(i).head(visible);
        row *= scale;
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
        if (visible < S.cols()) S.row(i).tail(S.cols() - visible).setZero();
      }
      attn.middleCols(h * hd, hd).noalias() = S * vals.middleCols(g * hd, hd);
    }
    x.noalias() += attn * m.tensor(P.wo);
    rmsnorm_rows<T>(x, m.tensor(P.ffn_norm), b, nullptr);
    const Matrix<T> gate = b * m.tensor(P.w_gate);
    const Matrix<T> up = b * m.tensor(P.w_up);
    const Matrix<T> act = gate.unaryExpr([](T g) { return silu(g); }).cwiseProduct(up);
    x.noalias() += act * m.tensor(P.w_down);

    if (into_prefix) {
      new_prefix->k[li] = keys;
      new_prefix->v[li] = vals;
    } else {
      auto& sk = suffix_.k[li];
      auto& sv = suffix_.v[li];
      sk.insert(sk.end(), k.data(), k.data() + k.size());
      sv.insert(sv.end(), v.data(), v.data() + v.size());
    }
  }
  if (into_prefix) {
    prefix_ = std::move(new_prefix);
    prefix_len_ = ids.size();
  } else {
    suffix_len_ += ids.size();
  }
  Matrix<T> last = x.bottomRows(1);
  Matrix<T> out;
  rmsnorm_rows<T>(last, m.tensor(lay.final_norm), out, nullptr);
  return out.row(0);
}

template class Model<float>;
template class Model<double>;

}  // namespace ntpseg
