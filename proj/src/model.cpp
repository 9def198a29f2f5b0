#include "edualign/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace edualign::model {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

std::string variant_name(Variant v) {
  return v == Variant::policy ? "policy" : "reward";
}

Variant variant_from_name(const std::string& name) {
  if (name == "policy") return Variant::policy;
  if (name == "reward") return Variant::reward;
  throw ConfigError("unknown model variant: " + name);
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("ModelConfig: vocab_size must be >= 2");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || max_seq_len < 2) {
    throw ConfigError("ModelConfig: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
  }
  if (bos_id < 0 || bos_id >= vocab_size || eos_id < 0 || eos_id >= vocab_size) {
    throw ConfigError("ModelConfig: bos/eos ids outside vocabulary");
  }
}

// ---------------------------------------------------------------------------
// Parameter layout

namespace {

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
};

std::vector<TensorSpec> canonical_layout(const ModelConfig& cfg) {
  const int d = cfg.d_model;
  const int h = 4 * d;
  std::vector<TensorSpec> out;
  out.push_back({"tok_emb", {cfg.vocab_size, d}});
  out.push_back({"pos_emb", {cfg.max_seq_len, d}});
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    out.push_back({p + "ln1.g", {d}});
    out.push_back({p + "ln1.b", {d}});
    out.push_back({p + "attn.wq", {d, d}});
    out.push_back({p + "attn.bq", {d}});
    out.push_back({p + "attn.wk", {d, d}});
    out.push_back({p + "attn.bk", {d}});
    out.push_back({p + "attn.wv", {d, d}});
    out.push_back({p + "attn.bv", {d}});
    out.push_back({p + "attn.wo", {d, d}});
    out.push_back({p + "attn.bo", {d}});
    out.push_back({p + "ln2.g", {d}});
    out.push_back({p + "ln2.b", {d}});
    out.push_back({p + "mlp.w1", {h, d}});
    out.push_back({p + "mlp.b1", {h}});
    out.push_back({p + "mlp.w2", {d, h}});
    out.push_back({p + "mlp.b2", {d}});
  }
  out.push_back({"ln_f.g", {d}});
  out.push_back({"ln_f.b", {d}});
  if (cfg.variant == Variant::policy) {
    out.push_back({"lm_head.w", {cfg.vocab_size, d}});
  } else {
    for (const char* hp : {"head_h", "head_p", "head_c"}) {
      out.push_back({std::string(hp) + ".w", {d}});
      out.push_back({std::string(hp) + ".b", {1}});
    }
  }
  return out;
}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  return n;
}

std::string last_component(const std::string& name) {
  const auto pos = name.rfind('.');
  return pos == std::string::npos ? name : name.substr(pos + 1);
}
bool is_gain(const std::string& name) { return last_component(name) == "g"; }
bool is_bias(const std::string& name) {
  const std::string c = last_component(name);
  return !c.empty() && c[0] == 'b' && name.rfind('.') != std::string::npos;
}
bool is_reward_head(const std::string& name) {
  return name.rfind("head_", 0) == 0;
}

}  // namespace

ModelParameters make_parameters(const ModelConfig& cfg,
                                std::vector<Tensor> tensors) {
  ModelParameters p;
  p.cfg_ = cfg;
  p.tensors_ = std::move(tensors);
  p.rebuild_index();
  return p;
}

void ModelParameters::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    index_[tensors_[i].name] = static_cast<int>(i);
  }
}

ModelParameters ModelParameters::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<Tensor> tensors;
  for (const TensorSpec& spec : canonical_layout(cfg)) {
    Tensor t;
    t.name = spec.name;
    t.shape = spec.shape;
    t.v.resize(shape_numel(spec.shape));
    if (is_gain(spec.name)) {
      std::fill(t.v.begin(), t.v.end(), 1.0f);
    } else if (is_bias(spec.name) || is_reward_head(spec.name)) {
      // zero; reward heads stay entirely at zero so scores start at 1.0
    } else {
      for (float& x : t.v) {
        x = static_cast<float>(0.02 * rng.next_gaussian());
      }
    }
    tensors.push_back(std::move(t));
  }
  return make_parameters(cfg, std::move(tensors));
}

const Tensor& ModelParameters::at(const std::string& name) const {
  return tensors_[static_cast<std::size_t>(index_of(name))];
}
Tensor& ModelParameters::at(const std::string& name) {
  return tensors_[static_cast<std::size_t>(index_of(name))];
}
int ModelParameters::index_of(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw ArgumentError("no parameter tensor named " + name);
  }
  return it->second;
}

std::size_t ModelParameters::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) n += t.numel();
  return n;
}

Gradients Gradients::zeros_like(const ModelParameters& params) {
  Gradients g;
  g.by_tensor.reserve(params.tensors().size());
  for (const Tensor& t : params.tensors()) {
    g.by_tensor.emplace_back(t.numel(), 0.0);
  }
  return g;
}

void Gradients::add_scaled(const Gradients& other, double scale) {
  for (std::size_t i = 0; i < by_tensor.size(); ++i) {
    for (std::size_t j = 0; j < by_tensor[i].size(); ++j) {
      by_tensor[i][j] += scale * other.by_tensor[i][j];
    }
  }
}

double Gradients::max_abs() const {
  double m = 0.0;
  for (const auto& t : by_tensor) {
    for (double v : t) m = std::max(m, std::abs(v));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward internals

namespace {

struct LayerIdx {
  int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  int ln2_g, ln2_b, w1, b1, w2, b2;
};

struct LayoutIdx {
  int tok_emb, pos_emb;
  std::vector<LayerIdx> layers;
  int lnf_g, lnf_b;
  int lm_w = -1;
  int head_w[3] = {-1, -1, -1};
  int head_b[3] = {-1, -1, -1};
};

LayoutIdx resolve(const ModelParameters& p) {
  LayoutIdx ix;
  ix.tok_emb = p.index_of("tok_emb");
  ix.pos_emb = p.index_of("pos_emb");
  for (int i = 0; i < p.config().n_layers; ++i) {
    const std::string pre = "layer" + std::to_string(i) + ".";
    LayerIdx li;
    li.ln1_g = p.index_of(pre + "ln1.g");
    li.ln1_b = p.index_of(pre + "ln1.b");
    li.wq = p.index_of(pre + "attn.wq");
    li.bq = p.index_of(pre + "attn.bq");
    li.wk = p.index_of(pre + "attn.wk");
    li.bk = p.index_of(pre + "attn.bk");
    li.wv = p.index_of(pre + "attn.wv");
    li.bv = p.index_of(pre + "attn.bv");
    li.wo = p.index_of(pre + "attn.wo");
    li.bo = p.index_of(pre + "attn.bo");
    li.ln2_g = p.index_of(pre + "ln2.g");
    li.ln2_b = p.index_of(pre + "ln2.b");
    li.w1 = p.index_of(pre + "mlp.w1");
    li.b1 = p.index_of(pre + "mlp.b1");
    li.w2 = p.index_of(pre + "mlp.w2");
    li.b2 = p.index_of(pre + "mlp.b2");
    ix.layers.push_back(li);
  }
  ix.lnf_g = p.index_of("ln_f.g");
  ix.lnf_b = p.index_of("ln_f.b");
  if (p.config().variant == Variant::policy) {
    ix.lm_w = p.index_of("lm_head.w");
  } else {
    const char* heads[3] = {"head_h", "head_p", "head_c"};
    for (int i = 0; i < 3; ++i) {
      ix.head_w[i] = p.index_of(std::string(heads[i]) + ".w");
      ix.head_b[i] = p.index_of(std::string(heads[i]) + ".b");
    }
  }
  return ix;
}

constexpr double kLnEps = 1e-5;

const float* data(const ModelParameters& p, int idx) {
  return p.tensors()[static_cast<std::size_t>(idx)].v.data();
}

// y[0..out) = W x + b, W row-major [out, in]
void linear(const float* W, const float* b, const double* x, int in, int out,
            double* y) {
  for (int o = 0; o < out; ++o) {
    const float* row = W + static_cast<std::ptrdiff_t>(o) * in;
    double acc = b ? static_cast<double>(b[o]) : 0.0;
    for (int i = 0; i < in; ++i) acc += static_cast<double>(row[i]) * x[i];
    y[o] = acc;
  }
}

// Accumulate dx += W^T dy, dW += dy x^T, db += dy.
void linear_backward(const float* W, const double* x, const double* dy, int in,
                     int out, double* dx, double* dW, double* db) {
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    const float* row = W + static_cast<std::ptrdiff_t>(o) * in;
    double* drow = dW + static_cast<std::ptrdiff_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      dx[i] += static_cast<double>(row[i]) * g;
      drow[i] += g * x[i];
    }
    db[o] += g;
  }
}

// y = xhat * gamma + beta with xhat = (x - mean) * rstd
void layer_norm(const float* gamma, const float* beta, const double* x, int d,
                double* xhat, double* rstd_out, double* y) {
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= d;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  *rstd_out = rstd;
  for (int i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    y[i] = xhat[i] * static_cast<double>(gamma[i]) + static_cast<double>(beta[i]);
  }
}

void layer_norm_backward(const float* gamma, const double* xhat, double rstd,
                         const double* dy, int d, double* dx, double* dgamma,
                         double* dbeta) {
  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
  for (int i = 0; i < d; ++i) {
    const double dxh = dy[i] * static_cast<double>(gamma[i]);
    mean_dxhat += dxh;
    mean_dxhat_xhat += dxh * xhat[i];
    dgamma[i] += dy[i] * xhat[i];
    dbeta[i] += dy[i];
  }
  mean_dxhat /= d;
  mean_dxhat_xhat /= d;
  for (int i = 0; i < d; ++i) {
    const double dxh = dy[i] * static_cast<double>(gamma[i]);
    dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
  }
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475));
}
double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865475)) +
         x * 0.3989422804014327 * std::exp(-0.5 * x * x);
}

struct LayerTrace {
  std::vector<double> ln1_xhat, ln1_rstd, a;
  std::vector<double> q, k, v;
  // attention probabilities; row (h, t) has t+1 entries
  std::vector<std::vector<double>> probs;
  std::vector<double> concat;
  std::vector<double> ln2_xhat, ln2_rstd, bnorm;
  std::vector<double> m1, gact;
};

struct Trace {
  int T = 0;
  std::vector<double> x;  // final residual stream, overwritten per layer
  std::vector<LayerTrace> layers;
  std::vector<double> lnf_xhat, lnf_rstd, f;
};

void check_tokens(const ModelConfig& cfg, const TokenSequence& seq) {
  for (std::int32_t id : seq.tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw ArgumentError("token id " + std::to_string(id) +
                          " outside vocabulary");
    }
  }
}

// Full-sequence forward pass; fills the trace needed by the reverse pass and
// leaves the final layer-normed hidden states in trace.f (T x D).
void forward_trunk(const ModelParameters& p, const LayoutIdx& ix,
                   const TokenSequence& tokens, Trace& tr) {
  const ModelConfig& cfg = p.config();
  const int T = static_cast<int>(tokens.size());
  const int D = cfg.d_model;
  const int H = cfg.n_heads;
  const int Dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  if (T < 1) throw ArgumentError("forward: empty token sequence");
  if (T > cfg.max_seq_len) {
    throw ArgumentError("forward: sequence length " + std::to_string(T) +
                        " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  check_tokens(cfg, tokens);

  tr.T = T;
  tr.x.assign(static_cast<std::size_t>(T) * D, 0.0);
  tr.layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerTrace{});

  const float* tok_emb = data(p, ix.tok_emb);
  const float* pos_emb = data(p, ix.pos_emb);
  for (int t = 0; t < T; ++t) {
    const float* te = tok_emb + static_cast<std::ptrdiff_t>(tokens[t]) * D;
    const float* pe = pos_emb + static_cast<std::ptrdiff_t>(t) * D;
    for (int i = 0; i < D; ++i) {
      tr.x[static_cast<std::size_t>(t) * D + i] =
          static_cast<double>(te[i]) + static_cast<double>(pe[i]);
    }
  }

  std::vector<double> scores;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerIdx& li = ix.layers[static_cast<std::size_t>(l)];
    LayerTrace& lt = tr.layers[static_cast<std::size_t>(l)];
    const std::size_t td = static_cast<std::size_t>(T) * D;
    lt.ln1_xhat.resize(td);
    lt.ln1_rstd.resize(static_cast<std::size_t>(T));
    lt.a.resize(td);
    lt.q.resize(td);
    lt.k.resize(td);
    lt.v.resize(td);
    lt.probs.assign(static_cast<std::size_t>(H) * T, {});
    lt.concat.assign(td, 0.0);
    lt.ln2_xhat.resize(td);
    lt.ln2_rstd.resize(static_cast<std::size_t>(T));
    lt.bnorm.resize(td);
    lt.m1.resize(static_cast<std::size_t>(T) * 4 * D);
    lt.gact.resize(static_cast<std::size_t>(T) * 4 * D);

    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * D;
      layer_norm(data(p, li.ln1_g), data(p, li.ln1_b), &tr.x[o], D,
                 &lt.ln1_xhat[o], &lt.ln1_rstd[static_cast<std::size_t>(t)],
                 &lt.a[o]);
      linear(data(p, li.wq), data(p, li.bq), &lt.a[o], D, D, &lt.q[o]);
      linear(data(p, li.wk), data(p, li.bk), &lt.a[o], D, D, &lt.k[o]);
      linear(data(p, li.wv), data(p, li.bv), &lt.a[o], D, D, &lt.v[o]);
    }

    for (int h = 0; h < H; ++h) {
      const int hd = h * Dh;
      for (int t = 0; t < T; ++t) {
        scores.assign(static_cast<std::size_t>(t) + 1, 0.0);
        const double* qt = &lt.q[static_cast<std::size_t>(t) * D + hd];
        double mx = -1e300;
        for (int u = 0; u <= t; ++u) {
          const double* ku = &lt.k[static_cast<std::size_t>(u) * D + hd];
          double s = 0.0;
          for (int j = 0; j < Dh; ++j) s += qt[j] * ku[j];
          s *= scale;
          scores[static_cast<std::size_t>(u)] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        std::vector<double>& prow = lt.probs[static_cast<std::size_t>(h) * T + t];
        prow.resize(static_cast<std::size_t>(t) + 1);
        for (int u = 0; u <= t; ++u) {
          const double e = std::exp(scores[static_cast<std::size_t>(u)] - mx);
          prow[static_cast<std::size_t>(u)] = e;
          z += e;
        }
        double* ct = &lt.concat[static_cast<std::size_t>(t) * D + hd];
        for (int u = 0; u <= t; ++u) {
          prow[static_cast<std::size_t>(u)] /= z;
          const double* vu = &lt.v[static_cast<std::size_t>(u) * D + hd];
          const double pu = prow[static_cast<std::size_t>(u)];
          for (int j = 0; j < Dh; ++j) ct[j] += pu * vu[j];
        }
      }
    }

    std::vector<double> o_row(static_cast<std::size_t>(D));
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * D;
      linear(data(p, li.wo), data(p, li.bo), &lt.concat[o], D, D, o_row.data());
      for (int i = 0; i < D; ++i) tr.x[o + i] += o_row[i];

      layer_norm(data(p, li.ln2_g), data(p, li.ln2_b), &tr.x[o], D,
                 &lt.ln2_xhat[o], &lt.ln2_rstd[static_cast<std::size_t>(t)],
                 &lt.bnorm[o]);
      const std::size_t o4 = static_cast<std::size_t>(t) * 4 * D;
      linear(data(p, li.w1), data(p, li.b1), &lt.bnorm[o], D, 4 * D, &lt.m1[o4]);
      for (int i = 0; i < 4 * D; ++i) lt.gact[o4 + i] = gelu(lt.m1[o4 + i]);
      std::vector<double> m2(static_cast<std::size_t>(D));
      linear(data(p, li.w2), data(p, li.b2), &lt.gact[o4], 4 * D, D, m2.data());
      for (int i = 0; i < D; ++i) tr.x[o + i] += m2[i];
    }
  }

  const std::size_t td = static_cast<std::size_t>(T) * D;
  tr.lnf_xhat.resize(td);
  tr.lnf_rstd.resize(static_cast<std::size_t>(T));
  tr.f.resize(td);
  for (int t = 0; t < T; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * D;
    layer_norm(data(p, ix.lnf_g), data(p, ix.lnf_b), &tr.x[o], D, &tr.lnf_xhat[o],
               &tr.lnf_rstd[static_cast<std::size_t>(t)], &tr.f[o]);
  }
}

// Reverse pass; df is the gradient on trace.f (T x D), consumed in place.
void backward_trunk(const ModelParameters& p, const LayoutIdx& ix,
                    const TokenSequence& tokens, const Trace& tr,
                    std::vector<double>& df, Gradients& g) {
  const ModelConfig& cfg = p.config();
  const int T = tr.T;
  const int D = cfg.d_model;
  const int H = cfg.n_heads;
  const int Dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  const std::size_t td = static_cast<std::size_t>(T) * D;

  auto gd = [&](int idx) { return g.by_tensor[static_cast<std::size_t>(idx)].data(); };

  std::vector<double> dx(td, 0.0);
  for (int t = 0; t < T; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * D;
    layer_norm_backward(data(p, ix.lnf_g), &tr.lnf_xhat[o],
                        tr.lnf_rstd[static_cast<std::size_t>(t)], &df[o], D,
                        &dx[o], gd(ix.lnf_g), gd(ix.lnf_b));
  }

  std::vector<double> da(td), dq(td), dk(td), dv(td), dconcat(td);
  std::vector<double> dm1(static_cast<std::size_t>(T) * 4 * D);
  std::vector<double> dgact(static_cast<std::size_t>(T) * 4 * D);
  std::vector<double> dbn(td);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerIdx& li = ix.layers[static_cast<std::size_t>(l)];
    const LayerTrace& lt = tr.layers[static_cast<std::size_t>(l)];

    // MLP sublayer: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
    std::fill(dbn.begin(), dbn.end(), 0.0);
    std::fill(dm1.begin(), dm1.end(), 0.0);
    std::fill(dgact.begin(), dgact.end(), 0.0);
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * D;
      const std::size_t o4 = static_cast<std::size_t>(t) * 4 * D;
      // dx[o..] is d(x_out); residual passes it to x_mid unchanged
      linear_backward(data(p, li.w2), &lt.gact[o4], &dx[o], 4 * D, D,
                      &dgact[o4], gd(li.w2), gd(li.b2));
      for (int i = 0; i < 4 * D; ++i) {
        dm1[o4 + i] = dgact[o4 + i] * gelu_grad(lt.m1[o4 + i]);
      }
      linear_backward(data(p, li.w1), &lt.bnorm[o], &dm1[o4], D, 4 * D, &dbn[o],
                      gd(li.w1), gd(li.b1));
      layer_norm_backward(data(p, li.ln2_g), &lt.ln2_xhat[o],
                          lt.ln2_rstd[static_cast<std::size_t>(t)], &dbn[o], D,
                          &dx[o], gd(li.ln2_g), gd(li.ln2_b));
    }

    // Attention sublayer: x_mid = x_in + Wo concat + bo
    std::fill(dconcat.begin(), dconcat.end(), 0.0);
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::fill(da.begin(), da.end(), 0.0);
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * D;
      linear_backward(data(p, li.wo), &lt.concat[o], &dx[o], D, D, &dconcat[o],
                      gd(li.wo), gd(li.bo));
    }
    std::vector<double> dprow;
    for (int h = 0; h < H; ++h) {
      const int hd = h * Dh;
      for (int t = 0; t < T; ++t) {
        const std::vector<double>& prow =
            lt.probs[static_cast<std::size_t>(h) * T + t];
        const double* dct = &dconcat[static_cast<std::size_t>(t) * D + hd];
        dprow.assign(static_cast<std::size_t>(t) + 1, 0.0);
        for (int u = 0; u <= t; ++u) {
          const double* vu = &lt.v[static_cast<std::size_t>(u) * D + hd];
          double* dvu = &dv[static_cast<std::size_t>(u) * D + hd];
          const double pu = prow[static_cast<std::size_t>(u)];
          double acc = 0.0;
          for (int j = 0; j < Dh; ++j) {
            acc += dct[j] * vu[j];
            dvu[j] += pu * dct[j];
          }
          dprow[static_cast<std::size_t>(u)] = acc;
        }
        double dot = 0.0;
        for (int u = 0; u <= t; ++u) {
          dot += dprow[static_cast<std::size_t>(u)] * prow[static_cast<std::size_t>(u)];
        }
        const double* qt = &lt.q[static_cast<std::size_t>(t) * D + hd];
        double* dqt = &dq[static_cast<std::size_t>(t) * D + hd];
        for (int u = 0; u <= t; ++u) {
          const double ds =
              prow[static_cast<std::size_t>(u)] *
              (dprow[static_cast<std::size_t>(u)] - dot) * scale;
          if (ds == 0.0) continue;
          const double* ku = &lt.k[static_cast<std::size_t>(u) * D + hd];
          double* dku = &dk[static_cast<std::size_t>(u) * D + hd];
          for (int j = 0; j < Dh; ++j) {
            dqt[j] += ds * ku[j];
            dku[j] += ds * qt[j];
          }
        }
      }
    }
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * D;
      linear_backward(data(p, li.wq), &lt.a[o], &dq[o], D, D, &da[o], gd(li.wq),
                      gd(li.bq));
      linear_backward(data(p, li.wk), &lt.a[o], &dk[o], D, D, &da[o], gd(li.wk),
                      gd(li.bk));
      linear_backward(data(p, li.wv), &lt.a[o], &dv[o], D, D, &da[o], gd(li.wv),
                      gd(li.bv));
      layer_norm_backward(data(p, li.ln1_g), &lt.ln1_xhat[o],
                          lt.ln1_rstd[static_cast<std::size_t>(t)], &da[o], D,
                          &dx[o], gd(li.ln1_g), gd(li.ln1_b));
    }
  }

  double* dtok = gd(ix.tok_emb);
  double* dpos = gd(ix.pos_emb);
  for (int t = 0; t < T; ++t) {
    const std::size_t o = static_cast<std::size_t>(t) * D;
    double* dte = dtok + static_cast<std::ptrdiff_t>(tokens[t]) * D;
    double* dpe = dpos + static_cast<std::ptrdiff_t>(t) * D;
    for (int i = 0; i < D; ++i) {
      dte[i] += dx[o + i];
      dpe[i] += dx[o + i];
    }
  }
}

TokenSequence reward_input(const ModelConfig& cfg, const TokenSequence& prompt,
                           const TokenSequence& response) {
  if (response.empty()) {
    throw ArgumentError("forward_reward: response must be nonempty");
  }
  const std::size_t total = prompt.size() + 1 + response.size();
  if (total > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw ArgumentError("forward_reward: combined length " +
                        std::to_string(total) + " exceeds max_seq_len");
  }
  TokenSequence seq = prompt;
  seq.push_back(cfg.eos_id);
  for (std::int32_t id : response) seq.push_back(id);
  return seq;
}

std::array<double, 3> reward_logits(const ModelParameters& p,
                                    const LayoutIdx& ix, const Trace& tr) {
  const int D = p.config().d_model;
  const double* f = &tr.f[static_cast<std::size_t>(tr.T - 1) * D];
  std::array<double, 3> z{};
  for (int i = 0; i < 3; ++i) {
    const float* w = data(p, ix.head_w[i]);
    double acc = static_cast<double>(data(p, ix.head_b[i])[0]);
    for (int j = 0; j < D; ++j) acc += static_cast<double>(w[j]) * f[j];
    z[static_cast<std::size_t>(i)] = acc;
  }
  return z;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void softmax_row(const double* z, int n, double* out) {
  double mx = z[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, z[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(z[i] - mx);
    sum += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= sum;
}

void require_variant(const ModelParameters& p, Variant v, const char* op) {
  if (p.config().variant != v) {
    throw ConfigError(std::string(op) + ": requires the " + variant_name(v) +
                      " variant, got " + variant_name(p.config().variant));
  }
}

}  // namespace

std::vector<std::vector<double>> forward_policy(const ModelParameters& params,
                                                const TokenSequence& tokens) {
  require_variant(params, Variant::policy, "forward_policy");
  const LayoutIdx ix = resolve(params);
  Trace tr;
  forward_trunk(params, ix, tokens, tr);
  const int T = tr.T;
  const int D = params.config().d_model;
  const int V = params.config().vocab_size;
  const float* Wlm = data(params, ix.lm_w);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(T));
  std::vector<double> logits(static_cast<std::size_t>(V));
  for (int t = 0; t < T; ++t) {
    linear(Wlm, nullptr, &tr.f[static_cast<std::size_t>(t) * D], D, V,
           logits.data());
    out[static_cast<std::size_t>(t)].resize(static_cast<std::size_t>(V));
    softmax_row(logits.data(), V, out[static_cast<std::size_t>(t)].data());
  }
  return out;
}

HpcScores forward_reward(const ModelParameters& params,
                         const TokenSequence& prompt,
                         const TokenSequence& response) {
  require_variant(params, Variant::reward, "forward_reward");
  const LayoutIdx ix = resolve(params);
  const TokenSequence seq = reward_input(params.config(), prompt, response);
  Trace tr;
  forward_trunk(params, ix, seq, tr);
  const std::array<double, 3> z = reward_logits(params, ix, tr);
  double s[3];
  for (int i = 0; i < 3; ++i) {
    s[i] = 2.0 * sigmoid(z[static_cast<std::size_t>(i)]);
    if (!std::isfinite(s[i])) {
      throw NumericalError("forward_reward: non-finite head output");
    }
  }
  return HpcScores(s[0], s[1], s[2]);
}

std::vector<double> log_prob(const ModelParameters& params,
                             const TokenSequence& prompt,
                             const TokenSequence& response) {
  require_variant(params, Variant::policy, "log_prob");
  if (prompt.empty()) throw ArgumentError("log_prob: prompt must be nonempty");
  if (response.empty()) throw ArgumentError("log_prob: response must be nonempty");
  TokenSequence full = prompt;
  for (std::int32_t id : response) full.push_back(id);

  const LayoutIdx ix = resolve(params);
  Trace tr;
  forward_trunk(params, ix, full, tr);
  const int D = params.config().d_model;
  const int V = params.config().vocab_size;
  const float* Wlm = data(params, ix.lm_w);

  std::vector<double> out(response.size());
  std::vector<double> logits(static_cast<std::size_t>(V));
  for (std::size_t j = 0; j < response.size(); ++j) {
    const std::size_t row = prompt.size() + j - 1;  // predicts token row+1
    linear(Wlm, nullptr, &tr.f[row * static_cast<std::size_t>(D)], D, V,
           logits.data());
    double mx = logits[0];
    for (int i = 1; i < V; ++i) mx = std::max(mx, logits[static_cast<std::size_t>(i)]);
    double sum = 0.0;
    for (int i = 0; i < V; ++i) sum += std::exp(logits[static_cast<std::size_t>(i)] - mx);
    out[j] = logits[static_cast<std::size_t>(response[j])] - mx - std::log(sum);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Incremental generation

namespace {

struct GenCache {
  std::vector<std::vector<double>> k, v;  // per layer, length * D
  int length = 0;
};

std::vector<double> forward_step(const ModelParameters& p, const LayoutIdx& ix,
                                 GenCache& cache, std::int32_t token) {
  const ModelConfig& cfg = p.config();
  const int D = cfg.d_model;
  const int H = cfg.n_heads;
  const int Dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  const int pos = cache.length;
  if (pos >= cfg.max_seq_len) {
    throw ArgumentError("forward_step: position exceeds max_seq_len");
  }
  if (token < 0 || token >= cfg.vocab_size) {
    throw ArgumentError("forward_step: token id outside vocabulary");
  }
  if (cache.k.empty()) {
    cache.k.assign(static_cast<std::size_t>(cfg.n_layers), {});
    cache.v.assign(static_cast<std::size_t>(cfg.n_layers), {});
  }

  std::vector<double> x(static_cast<std::size_t>(D));
  {
    const float* te = data(p, ix.tok_emb) + static_cast<std::ptrdiff_t>(token) * D;
    const float* pe = data(p, ix.pos_emb) + static_cast<std::ptrdiff_t>(pos) * D;
    for (int i = 0; i < D; ++i) {
      x[static_cast<std::size_t>(i)] =
          static_cast<double>(te[i]) + static_cast<double>(pe[i]);
    }
  }

  std::vector<double> a(static_cast<std::size_t>(D)), xhat(static_cast<std::size_t>(D));
  std::vector<double> q(static_cast<std::size_t>(D)), krow(static_cast<std::size_t>(D)),
      vrow(static_cast<std::size_t>(D)), attn(static_cast<std::size_t>(D)),
      o_row(static_cast<std::size_t>(D));
  std::vector<double> m1(static_cast<std::size_t>(4) * D), gact(static_cast<std::size_t>(4) * D),
      m2(static_cast<std::size_t>(D));
  double rstd = 0.0;

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerIdx& li = ix.layers[static_cast<std::size_t>(l)];
    layer_norm(data(p, li.ln1_g), data(p, li.ln1_b), x.data(), D, xhat.data(),
               &rstd, a.data());
    linear(data(p, li.wq), data(p, li.bq), a.data(), D, D, q.data());
    linear(data(p, li.wk), data(p, li.bk), a.data(), D, D, krow.data());
    linear(data(p, li.wv), data(p, li.bv), a.data(), D, D, vrow.data());
    std::vector<double>& kl = cache.k[static_cast<std::size_t>(l)];
    std::vector<double>& vl = cache.v[static_cast<std::size_t>(l)];
    kl.insert(kl.end(), krow.begin(), krow.end());
    vl.insert(vl.end(), vrow.begin(), vrow.end());

    std::fill(attn.begin(), attn.end(), 0.0);
    std::vector<double> scores(static_cast<std::size_t>(pos) + 1);
    for (int h = 0; h < H; ++h) {
      const int hd = h * Dh;
      double mx = -1e300;
      for (int u = 0; u <= pos; ++u) {
        const double* ku = &kl[static_cast<std::size_t>(u) * D + hd];
        double s = 0.0;
        for (int j = 0; j < Dh; ++j) s += q[static_cast<std::size_t>(hd + j)] * ku[j];
        s *= scale;
        scores[static_cast<std::size_t>(u)] = s;
        mx = std::max(mx, s);
      }
      double z = 0.0;
      for (int u = 0; u <= pos; ++u) {
        scores[static_cast<std::size_t>(u)] = std::exp(scores[static_cast<std::size_t>(u)] - mx);
        z += scores[static_cast<std::size_t>(u)];
      }
      for (int u = 0; u <= pos; ++u) {
        const double pu = scores[static_cast<std::size_t>(u)] / z;
        const double* vu = &vl[static_cast<std::size_t>(u) * D + hd];
        for (int j = 0; j < Dh; ++j) attn[static_cast<std::size_t>(hd + j)] += pu * vu[j];
      }
    }
    linear(data(p, li.wo), data(p, li.bo), attn.data(), D, D, o_row.data());
    for (int i = 0; i < D; ++i) x[static_cast<std::size_t>(i)] += o_row[static_cast<std::size_t>(i)];

    layer_norm(data(p, li.ln2_g), data(p, li.ln2_b), x.data(), D, xhat.data(),
               &rstd, a.data());
    linear(data(p, li.w1), data(p, li.b1), a.data(), D, 4 * D, m1.data());
    for (int i = 0; i < 4 * D; ++i) gact[static_cast<std::size_t>(i)] = gelu(m1[static_cast<std::size_t>(i)]);
    linear(data(p, li.w2), data(p, li.b2), gact.data(), 4 * D, D, m2.data());
    for (int i = 0; i < D; ++i) x[static_cast<std::size_t>(i)] += m2[static_cast<std::size_t>(i)];
  }

  layer_norm(data(p, ix.lnf_g), data(p, ix.lnf_b), x.data(), D, xhat.data(),
             &rstd, a.data());
  std::vector<double> logits(static_cast<std::size_t>(cfg.vocab_size));
  linear(data(p, ix.lm_w), nullptr, a.data(), D, cfg.vocab_size, logits.data());
  cache.length += 1;
  return logits;
}

std::int32_t select_token(const std::vector<double>& logits, double temperature,
                          Rng& rng) {
  const int V = static_cast<int>(logits.size());
  if (temperature == 0.0) {
    int best = 0;
    for (int i = 1; i < V; ++i) {
      if (logits[static_cast<std::size_t>(i)] > logits[static_cast<std::size_t>(best)]) best = i;
    }
    return best;
  }
  std::vector<double> probs(static_cast<std::size_t>(V));
  std::vector<double> scaled(static_cast<std::size_t>(V));
  for (int i = 0; i < V; ++i) scaled[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(i)] / temperature;
  softmax_row(scaled.data(), V, probs.data());
  const double u = rng.next_double();
  double cum = 0.0;
  for (int i = 0; i < V; ++i) {
    cum += probs[static_cast<std::size_t>(i)];
    if (u < cum) return i;
  }
  return V - 1;
}

}  // namespace

TokenSequence sample(const ModelParameters& params, const TokenSequence& prompt,
                     int max_new, double temperature, Rng& rng) {
  require_variant(params, Variant::policy, "sample");
  if (max_new < 1) throw ArgumentError("sample: max_new must be >= 1");
  if (temperature < 0.0) throw ArgumentError("sample: temperature must be >= 0");
  if (prompt.empty()) throw ArgumentError("sample: prompt must be nonempty");
  const ModelConfig& cfg = params.config();
  if (prompt.size() >= static_cast<std::size_t>(cfg.max_seq_len)) {
    throw ArgumentError("sample: prompt fills max_seq_len, no room to generate");
  }
  const int room = cfg.max_seq_len - static_cast<int>(prompt.size());
  const int budget = std::min(max_new, room);

  const LayoutIdx ix = resolve(params);
  GenCache cache;
  std::vector<double> logits;
  for (std::int32_t id : prompt) logits = forward_step(params, ix, cache, id);

  TokenSequence out;
  for (int i = 0; i < budget; ++i) {
    const std::int32_t next = select_token(logits, temperature, rng);
    out.push_back(next);
    if (next == cfg.eos_id) break;
    if (i + 1 < budget) logits = forward_step(params, ix, cache, next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward entry point

namespace {

void backward_rm(const ModelParameters& p, const LayoutIdx& ix,
                 const RmSquaredErrorLoss& spec, BackwardResult& res) {
  if (spec.batch.empty()) {
    throw ArgumentError("backward: empty reward batch");
  }
  const int D = p.config().d_model;
  const double inv_b = 1.0 / static_cast<double>(spec.batch.size());
  for (const RmSquaredErrorLoss::Item& item : spec.batch) {
    const TokenSequence seq = reward_input(p.config(), item.prompt, item.response);
    Trace tr;
    forward_trunk(p, ix, seq, tr);
    const std::array<double, 3> z = reward_logits(p, ix, tr);
    const double targets[3] = {item.target.helpfulness(),
                               item.target.personalization(),
                               item.target.creativity()};
    std::vector<double> df(static_cast<std::size_t>(tr.T) * D, 0.0);
    double* df_last = &df[static_cast<std::size_t>(tr.T - 1) * D];
    const double* f_last = &tr.f[static_cast<std::size_t>(tr.T - 1) * D];
    for (int i = 0; i < 3; ++i) {
      const double s = 2.0 * sigmoid(z[static_cast<std::size_t>(i)]);
      const double err = s - targets[i];
      res.loss += inv_b * err * err;
      const double dz = inv_b * 2.0 * err * (s * (2.0 - s) / 2.0);
      double* dw = res.grads.by_tensor[static_cast<std::size_t>(ix.head_w[i])].data();
      double* db = res.grads.by_tensor[static_cast<std::size_t>(ix.head_b[i])].data();
      const float* w = data(p, ix.head_w[i]);
      for (int j = 0; j < D; ++j) {
        dw[j] += dz * f_last[j];
        df_last[j] += dz * static_cast<double>(w[j]);
      }
      db[0] += dz;
    }
    backward_trunk(p, ix, seq, tr, df, res.grads);
  }
}

void backward_policy_loss(const ModelParameters& p, const LayoutIdx& ix,
                          const WeightedLogProbLoss& spec, BackwardResult& res) {
  if (spec.items.empty()) {
    throw ArgumentError("backward: empty policy loss");
  }
  const int D = p.config().d_model;
  const int V = p.config().vocab_size;
  const float* Wlm = data(p, ix.lm_w);
  double* dWlm = res.grads.by_tensor[static_cast<std::size_t>(ix.lm_w)].data();

  for (const WeightedLogProbLoss::Item& item : spec.items) {
    const int T = static_cast<int>(item.full.size());
    const int n_pred = T - item.predict_from;
    if (item.predict_from < 1 || n_pred < 1) {
      throw ArgumentError("backward: predict_from out of range");
    }
    if (static_cast<int>(item.coeffs.size()) != n_pred) {
      throw ArgumentError("backward: coefficient count mismatch");
    }
    Trace tr;
    forward_trunk(p, ix, item.full, tr);

    std::vector<double> df(static_cast<std::size_t>(T) * D, 0.0);
    std::vector<double> logits(static_cast<std::size_t>(V));
    std::vector<double> probs(static_cast<std::size_t>(V));
    std::vector<double> dlogits(static_cast<std::size_t>(V));
    for (int j = 0; j < n_pred; ++j) {
      const int row = item.predict_from + j - 1;
      const std::int32_t target = item.full[static_cast<std::size_t>(row + 1)];
      const double c = item.coeffs[static_cast<std::size_t>(j)];
      const double* f_row = &tr.f[static_cast<std::size_t>(row) * D];
      linear(Wlm, nullptr, f_row, D, V, logits.data());
      softmax_row(logits.data(), V, probs.data());
      double mx = logits[0];
      for (int i = 1; i < V; ++i) mx = std::max(mx, logits[static_cast<std::size_t>(i)]);
      double sum = 0.0;
      for (int i = 0; i < V; ++i) sum += std::exp(logits[static_cast<std::size_t>(i)] - mx);
      res.loss += c * (logits[static_cast<std::size_t>(target)] - mx - std::log(sum));

      for (int vtok = 0; vtok < V; ++vtok) {
        dlogits[static_cast<std::size_t>(vtok)] =
            c * ((vtok == target ? 1.0 : 0.0) - probs[static_cast<std::size_t>(vtok)]);
      }
      double* df_row = &df[static_cast<std::size_t>(row) * D];
      for (int vtok = 0; vtok < V; ++vtok) {
        const double gld = dlogits[static_cast<std::size_t>(vtok)];
        if (gld == 0.0) continue;
        const float* wrow = Wlm + static_cast<std::ptrdiff_t>(vtok) * D;
        double* dwrow = dWlm + static_cast<std::ptrdiff_t>(vtok) * D;
        for (int i = 0; i < D; ++i) {
          df_row[i] += gld * static_cast<double>(wrow[i]);
          dwrow[i] += gld * f_row[i];
        }
      }
    }
    backward_trunk(p, ix, item.full, tr, df, res.grads);
  }
}

}  // namespace

BackwardResult backward(const ModelParameters& params, const LossSpec& spec) {
  const LayoutIdx ix = resolve(params);
  BackwardResult res;
  res.grads = Gradients::zeros_like(params);

  if (std::holds_alternative<RmSquaredErrorLoss>(spec)) {
    require_variant(params, Variant::reward, "backward(RmSquaredErrorLoss)");
    backward_rm(params, ix, std::get<RmSquaredErrorLoss>(spec), res);
  } else {
    require_variant(params, Variant::policy, "backward(WeightedLogProbLoss)");
    backward_policy_loss(params, ix, std::get<WeightedLogProbLoss>(spec), res);
  }

  if (!std::isfinite(res.loss)) {
    throw NumericalError("backward: non-finite loss");
  }
  for (std::size_t i = 0; i < res.grads.by_tensor.size(); ++i) {
    for (double v : res.grads.by_tensor[i]) {
      if (!std::isfinite(v)) {
        throw NumericalError("backward: non-finite gradient in tensor " +
                             params.tensors()[i].name);
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json config_to_json(const ModelConfig& cfg) {
  return json{{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},
              {"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},
              {"max_seq_len", cfg.max_seq_len}, {"variant", variant_name(cfg.variant)},
              {"bos_id", cfg.bos_id},         {"eos_id", cfg.eos_id}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.variant = variant_from_name(j.at("variant").get<std::string>());
  cfg.bos_id = j.at("bos_id").get<std::int32_t>();
  cfg.eos_id = j.at("eos_id").get<std::int32_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const ModelParameters& params,
                     const std::filesystem::path& path) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const Tensor& t : params.tensors()) {
    tensors.push_back(json{{"name", t.name},
                           {"shape", t.shape},
                           {"offset", offset},
                           {"numel", t.numel()}});
    offset += t.numel() * sizeof(float);
  }
  json header{{"config", config_to_json(params.config())},
              {"dtype", "f32"},
              {"tensors", tensors}};

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out << header.dump() << "\n";
  for (const Tensor& t : params.tensors()) {
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(float)));
  }
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

ModelParameters load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) {
    throw CorruptionError("checkpoint missing header: " + path.string());
  }
  json header;
  ModelConfig cfg;
  try {
    header = json::parse(header_line);
    cfg = config_from_json(header.at("config"));
    if (header.at("dtype").get<std::string>() != "f32") {
      throw CorruptionError("checkpoint dtype must be f32: " + path.string());
    }
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint header unreadable: " + path.string() +
                          ": " + e.what());
  }

  const auto payload_start = in.tellg();
  std::vector<Tensor> tensors;
  try {
    for (const json& tj : header.at("tensors")) {
      Tensor t;
      t.name = tj.at("name").get<std::string>();
      t.shape = tj.at("shape").get<std::vector<int>>();
      const std::size_t numel = tj.at("numel").get<std::size_t>();
      const std::size_t offset = tj.at("offset").get<std::size_t>();
      if (numel != shape_numel(t.shape)) {
        throw CorruptionError("checkpoint tensor " + t.name +
                              ": numel does not match shape");
      }
      t.v.resize(numel);
      in.seekg(payload_start + static_cast<std::streamoff>(offset));
      in.read(reinterpret_cast<char*>(t.v.data()),
              static_cast<std::streamsize>(numel * sizeof(float)));
      if (in.gcount() != static_cast<std::streamsize>(numel * sizeof(float))) {
        throw CorruptionError("checkpoint truncated: " + path.string());
      }
      tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint header unreadable: " + path.string() +
                          ": " + e.what());
  }

  // The tensor set must match the layout implied by the config exactly.
  const std::vector<TensorSpec> expected = canonical_layout(cfg);
  if (expected.size() != tensors.size()) {
    throw CorruptionError("checkpoint tensor count mismatch: " + path.string());
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].name != tensors[i].name ||
        expected[i].shape != tensors[i].shape) {
      throw CorruptionError("checkpoint tensor " + tensors[i].name +
                            " does not match expected layout");
    }
  }
  return make_parameters(cfg, std::move(tensors));
}

ModelParameters load_checkpoint(const std::filesystem::path& path,
                                Variant expected) {
  ModelParameters p = load_checkpoint(path);
  if (p.config().variant != expected) {
    throw ConfigError("checkpoint " + path.string() + " holds a " +
                      variant_name(p.config().variant) + " model, expected " +
                      variant_name(expected));
  }
  return p;
}

}  // namespace edualign::model
