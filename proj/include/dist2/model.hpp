#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "metric_space.hpp"
#include "numeric.hpp"
#include "rng.hpp"

namespace dist2 {

struct ModelConfig {
  int vocab_size = 32;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const {
    require(vocab_size > 0 && d_model > 0 && n_layers > 0 && n_heads > 0, ErrorKind::config,
            "model dimensions must be positive");
    require(d_model % n_heads == 0, ErrorKind::config, "d_model must be divisible by n_heads");
    require(max_seq_len >= 2, ErrorKind::config, "max_seq_len must be >= 2");
  }

  int head_dim() const { return d_model / n_heads; }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"d_model", d_model}, {"n_layers", n_layers},
            {"n_heads", n_heads},       {"max_seq_len", max_seq_len}, {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) { return from_json(j, ModelConfig()); }
  static ModelConfig from_json(const nlohmann::json& j, const ModelConfig& base) {
    ModelConfig c = base;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named slice of the flat parameter buffer.
struct ParamEntry {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return rows * cols; }
};

class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& c) {
    const auto V = static_cast<std::size_t>(c.vocab_size);
    const auto T = static_cast<std::size_t>(c.max_seq_len);
    const auto d = static_cast<std::size_t>(c.d_model);
    add("wte", V, d);
    add("wpe", T, d);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string p = "h" + std::to_string(l) + ".";
      add(p + "ln1.g", 1, d);
      add(p + "ln1.b", 1, d);
      add(p + "attn.w_qkv", 3 * d, d);
      add(p + "attn.b_qkv", 1, 3 * d);
      add(p + "attn.w_proj", d, d);
      add(p + "attn.b_proj", 1, d);
      add(p + "ln2.g", 1, d);
      add(p + "ln2.b", 1, d);
      add(p + "mlp.w_fc", 4 * d, d);
      add(p + "mlp.b_fc", 1, 4 * d);
      add(p + "mlp.w_proj", d, 4 * d);
      add(p + "mlp.b_proj", 1, d);
    }
    add("lnf.g", 1, d);
    add("lnf.b", 1, d);
    add("lm_head", V, d);
  }

  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t total() const noexcept { return total_; }
  const ParamEntry& at(const std::string& name) const {
    auto it = by_name_.find(name);
    require(it != by_name_.end(), ErrorKind::domain, "no parameter named " + name);
    return entries_[it->second];
  }

 private:
  void add(std::string name, std::size_t r, std::size_t c) {
    by_name_[name] = entries_.size();
    entries_.push_back({std::move(name), r, c, total_});
    total_ += r * c;
  }

  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> by_name_;
  std::size_t total_ = 0;
};

/// Flat buffer with named views; shared representation of params and grads.
class ParamSet {
 public:
  explicit ParamSet(const ModelConfig& cfg) : config_(cfg), layout_(cfg), data_(layout_.total(), 0.0) {}

  const ModelConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> view(const std::string& name) {
    const auto& e = layout_.at(name);
    return {data_.data() + e.offset, e.size()};
  }
  std::span<const double> view(const std::string& name) const {
    const auto& e = layout_.at(name);
    return {data_.data() + e.offset, e.size()};
  }

  bool same_shape(const ParamSet& o) const { return config_ == o.config_; }

 protected:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> data_;
};

class ModelGrads : public ParamSet {
 public:
  using ParamSet::ParamSet;

  void zero() { std::fill(data_.begin(), data_.end(), 0.0); }
  void add(const ModelGrads& o) {
    require(same_shape(o), ErrorKind::shape, "gradient shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  }
};

class ModelParams : public ParamSet {
 public:
  using ParamSet::ParamSet;

  /// Normal(0, 0.02) weights; residual projections scaled by 1/sqrt(2 n_layers);
  /// layer-norm gains 1, biases 0.
  static ModelParams initialize(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p(cfg);
    Rng rng(derive_seed(cfg.seed, 0x1417));
    const double sigma = 0.02;
    const double resid = sigma / std::sqrt(2.0 * cfg.n_layers);
    for (const auto& e : p.layout().entries()) {
      auto v = p.view(e.name);
      const bool gain = e.name.ends_with(".g");
      const bool bias = e.name.ends_with(".b") || e.name.find(".b_") != std::string::npos;
      if (gain) {
        std::fill(v.begin(), v.end(), 1.0);
      } else if (bias) {
        std::fill(v.begin(), v.end(), 0.0);
      } else {
        const double s = e.name.ends_with("w_proj") ? resid : sigma;
        for (double& x : v) x = s * rng.normal();
      }
    }
    return p;
  }

  // Checkpoint: manifest (JSON) + flat little-endian float64 buffer.
  nlohmann::json manifest(std::uint64_t step, std::uint64_t run_seed, const std::string& data_file) const {
    nlohmann::json index = nlohmann::json::array();
    for (const auto& e : layout_.entries())
      index.push_back({{"name", e.name}, {"rows", e.rows}, {"cols", e.cols}, {"offset", e.offset}});
    return {{"config", config_.to_json()}, {"step", step}, {"seed", run_seed},
            {"data", data_file},           {"count", data_.size()}, {"arrays", index}};
  }

  void save_checkpoint(const std::filesystem::path& manifest_path, std::uint64_t step,
                       std::uint64_t run_seed) const {
    const std::string data_file = manifest_path.stem().string() + ".bin";
    {
      std::ofstream os(manifest_path);
      require(static_cast<bool>(os), ErrorKind::io, "cannot write " + manifest_path.string());
      os << manifest(step, run_seed, data_file).dump(2) << "\n";
    }
    std::ofstream bs(manifest_path.parent_path() / data_file, std::ios::binary);
    require(static_cast<bool>(bs), ErrorKind::io, "cannot write checkpoint data");
    std::string buf(data_.size() * 8, '\0');
    for (std::size_t i = 0; i < data_.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, &data_[i], 8);
      for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    bs.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }

  static ModelParams load_checkpoint(const std::filesystem::path& manifest_path) {
    std::ifstream is(manifest_path);
    require(static_cast<bool>(is), ErrorKind::io, "cannot open " + manifest_path.string());
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::io, std::string("bad checkpoint manifest: ") + e.what());
    }
    ModelParams p(ModelConfig::from_json(j.at("config")));
    const auto& arrays = j.at("arrays");
    require(arrays.size() == p.layout().entries().size(), ErrorKind::shape, "checkpoint array count mismatch");
    for (std::size_t i = 0; i < arrays.size(); ++i) {
      const auto& e = p.layout().entries()[i];
      require(arrays[i].at("name") == e.name && arrays[i].at("offset").get<std::size_t>() == e.offset &&
                  arrays[i].at("rows").get<std::size_t>() == e.rows && arrays[i].at("cols").get<std::size_t>() == e.cols,
              ErrorKind::shape, "checkpoint array index disagrees with config at " + e.name);
    }
    std::ifstream bs(manifest_path.parent_path() / j.at("data").get<std::string>(), std::ios::binary);
    require(static_cast<bool>(bs), ErrorKind::io, "cannot open checkpoint data");
    std::string buf((std::istreambuf_iterator<char>(bs)), std::istreambuf_iterator<char>());
    require(buf.size() == p.size() * 8, ErrorKind::io, "checkpoint data size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i * 8 + static_cast<std::size_t>(b)])) << (8 * b);
      std::memcpy(&p.data()[i], &bits, 8);
    }
    return p;
  }
};

namespace detail {

constexpr double kLayerNormEps = 1e-5;

// y[t, o] = b[o] + sum_i x[t, i] * w[o, i]
inline void linear(std::span<const double> x, std::size_t n, std::size_t in, std::span<const double> w,
                   std::span<const double> b, std::size_t out, std::span<double> y) {
  for (std::size_t t = 0; t < n; ++t) {
    const double* xr = x.data() + t * in;
    double* yr = y.data() + t * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = w.data() + o * in;
      double s = b.empty() ? 0.0 : b[o];
      for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
      yr[o] = s;
    }
  }
}

// Accumulates dx (if non-empty), dw, db for the linear map above.
inline void linear_backward(std::span<const double> x, std::size_t n, std::size_t in, std::span<const double> w,
                            std::size_t out, std::span<const double> dy, std::span<double> dx, std::span<double> dw,
                            std::span<double> db) {
  for (std::size_t t = 0; t < n; ++t) {
    const double* xr = x.data() + t * in;
    const double* dyr = dy.data() + t * out;
    double* dxr = dx.empty() ? nullptr : dx.data() + t * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      if (g == 0.0) continue;
      if (!db.empty()) db[o] += g;
      const double* wr = w.data() + o * in;
      double* dwr = dw.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dwr[i] += g * xr[i];
      if (dxr)
        for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
    }
  }
}

inline void layer_norm(std::span<const double> x, std::size_t n, std::size_t d, std::span<const double> g,
                       std::span<const double> b, std::span<double> y, std::span<double> xhat,
                       std::span<double> rstd) {
  for (std::size_t t = 0; t < n; ++t) {
    const double* xr = x.data() + t * d;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[t] = r;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - mean) * r;
      xhat[t * d + i] = h;
      y[t * d + i] = h * g[i] + b[i];
    }
  }
}

inline void layer_norm_backward(std::span<const double> xhat, std::span<const double> rstd, std::size_t n,
                                std::size_t d, std::span<const double> g, std::span<const double> dy,
                                std::span<double> dx, std::span<double> dg, std::span<double> db) {
  for (std::size_t t = 0; t < n; ++t) {
    const double* hr = xhat.data() + t * d;
    const double* dyr = dy.data() + t * d;
    double mean_dh = 0.0, mean_dh_h = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      dg[i] += dyr[i] * hr[i];
      db[i] += dyr[i];
      const double dh = dyr[i] * g[i];
      mean_dh += dh;
      mean_dh_h += dh * hr[i];
    }
    mean_dh /= static_cast<double>(d);
    mean_dh_h /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double dh = dyr[i] * g[i];
      dx[t * d + i] += rstd[t] * (dh - mean_dh - hr[i] * mean_dh_h);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

}  // namespace detail

/// Activations retained by forward() for backward().
struct ForwardCache {
  struct Layer {
    std::vector<double> x_in, ln1_out, ln1_hat, ln1_rstd, qkv, att, y, x_mid, ln2_out, ln2_hat, ln2_rstd, h_pre,
        h_act;
  };
  std::vector<TokenId> tokens;
  std::vector<Layer> layers;
  std::vector<double> x_final, lnf_out, lnf_hat, lnf_rstd;
};

/// Decoder-only transformer: token + learned position embeddings, pre-norm
/// causal self-attention and GELU MLP blocks, final layer norm, untied
/// output projection (no bias). Row t of the logits predicts token t+1.
inline Matrix forward(const ModelParams& P, std::span<const TokenId> tokens, ForwardCache* cache = nullptr) {
  const auto& c = P.config();
  const std::size_t n = tokens.size();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto H = static_cast<std::size_t>(c.n_heads);
  const std::size_t hd = d / H;
  require(n >= 1 && n <= static_cast<std::size_t>(c.max_seq_len), ErrorKind::shape,
          "sequence length " + std::to_string(n) + " outside [1, max_seq_len]");
  for (TokenId t : tokens)
    require(t >= 0 && static_cast<std::size_t>(t) < V, ErrorKind::shape, "token id outside vocabulary");

  ForwardCache local;
  ForwardCache& C = cache ? *cache : local;
  C.tokens.assign(tokens.begin(), tokens.end());
  C.layers.assign(static_cast<std::size_t>(c.n_layers), {});

  std::vector<double> x(n * d);
  {
    auto wte = P.view("wte");
    auto wpe = P.view("wpe");
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t i = 0; i < d; ++i)
        x[t * d + i] = wte[static_cast<std::size_t>(tokens[t]) * d + i] + wpe[t * d + i];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    auto& L = C.layers[static_cast<std::size_t>(l)];
    L.x_in = x;
    L.ln1_out.resize(n * d);
    L.ln1_hat.resize(n * d);
    L.ln1_rstd.resize(n);
    detail::layer_norm(x, n, d, P.view(p + "ln1.g"), P.view(p + "ln1.b"), L.ln1_out, L.ln1_hat, L.ln1_rstd);
    L.qkv.resize(n * 3 * d);
    detail::linear(L.ln1_out, n, d, P.view(p + "attn.w_qkv"), P.view(p + "attn.b_qkv"), 3 * d, L.qkv);

    // att[h][t][j] for j <= t; stored dense n x n per head with zeros above the diagonal.
    L.att.assign(H * n * n, 0.0);
    L.y.assign(n * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        const double* q = L.qkv.data() + t * 3 * d + h * hd;
        double* a = L.att.data() + (h * n + t) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= t; ++j) {
          const double* k = L.qkv.data() + j * 3 * d + d + h * hd;
          double s = 0.0;
          for (std::size_t i = 0; i < hd; ++i) s += q[i] * k[i];
          a[j] = s * scale;
          mx = std::max(mx, a[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          a[j] = std::exp(a[j] - mx);
          z += a[j];
        }
        double* yr = L.y.data() + t * d + h * hd;
        for (std::size_t j = 0; j <= t; ++j) {
          a[j] /= z;
          const double* v = L.qkv.data() + j * 3 * d + 2 * d + h * hd;
          for (std::size_t i = 0; i < hd; ++i) yr[i] += a[j] * v[i];
        }
      }
    }
    std::vector<double> proj(n * d);
    detail::linear(L.y, n, d, P.view(p + "attn.w_proj"), P.view(p + "attn.b_proj"), d, proj);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
    L.x_mid = x;

    L.ln2_out.resize(n * d);
    L.ln2_hat.resize(n * d);
    L.ln2_rstd.resize(n);
    detail::layer_norm(x, n, d, P.view(p + "ln2.g"), P.view(p + "ln2.b"), L.ln2_out, L.ln2_hat, L.ln2_rstd);
    L.h_pre.resize(n * 4 * d);
    detail::linear(L.ln2_out, n, d, P.view(p + "mlp.w_fc"), P.view(p + "mlp.b_fc"), 4 * d, L.h_pre);
    L.h_act.resize(n * 4 * d);
    for (std::size_t i = 0; i < L.h_pre.size(); ++i) L.h_act[i] = detail::gelu(L.h_pre[i]);
    detail::linear(L.h_act, n, 4 * d, P.view(p + "mlp.w_proj"), P.view(p + "mlp.b_proj"), d, proj);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
  }

  C.x_final = x;
  C.lnf_out.resize(n * d);
  C.lnf_hat.resize(n * d);
  C.lnf_rstd.resize(n);
  detail::layer_norm(x, n, d, P.view("lnf.g"), P.view("lnf.b"), C.lnf_out, C.lnf_hat, C.lnf_rstd);
  Matrix logits(n, V);
  detail::linear(C.lnf_out, n, d, P.view("lm_head"), {}, V, logits.data());
  return logits;
}

/// Reverse-mode gradients of the scalar loss whose logit gradients are given.
/// The cache must come from forward() on the same params and tokens.
inline ModelGrads backward(const ModelParams& P, const ForwardCache& C, const Matrix& dlogits) {
  const auto& c = P.config();
  const std::size_t n = C.tokens.size();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  const auto H = static_cast<std::size_t>(c.n_heads);
  const std::size_t hd = d / H;
  require(dlogits.rows() == n && dlogits.cols() == V, ErrorKind::shape, "upstream gradient shape mismatch");
  require(C.layers.size() == static_cast<std::size_t>(c.n_layers), ErrorKind::shape, "stale forward cache");

  ModelGrads G(c);
  std::vector<double> dln(n * d, 0.0);
  detail::linear_backward(C.lnf_out, n, d, P.view("lm_head"), V, dlogits.data(), dln, G.view("lm_head"), {});
  std::vector<double> dx(n * d, 0.0);
  detail::layer_norm_backward(C.lnf_hat, C.lnf_rstd, n, d, P.view("lnf.g"), dln, dx, G.view("lnf.g"),
                              G.view("lnf.b"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const std::string p = "h" + std::to_string(l) + ".";
    const auto& L = C.layers[static_cast<std::size_t>(l)];

    // MLP branch: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
    std::vector<double> dh(n * 4 * d, 0.0);
    detail::linear_backward(L.h_act, n, 4 * d, P.view(p + "mlp.w_proj"), d, dx, dh, G.view(p + "mlp.w_proj"),
                            G.view(p + "mlp.b_proj"));
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= detail::gelu_grad(L.h_pre[i]);
    std::fill(dln.begin(), dln.end(), 0.0);
    detail::linear_backward(L.ln2_out, n, d, P.view(p + "mlp.w_fc"), 4 * d, dh, dln, G.view(p + "mlp.w_fc"),
                            G.view(p + "mlp.b_fc"));
    detail::layer_norm_backward(L.ln2_hat, L.ln2_rstd, n, d, P.view(p + "ln2.g"), dln, dx, G.view(p + "ln2.g"),
                                G.view(p + "ln2.b"));

    // Attention branch: x_mid = x_in + proj(attn(qkv(ln1(x_in))))
    std::vector<double> dy(n * d, 0.0);
    detail::linear_backward(L.y, n, d, P.view(p + "attn.w_proj"), d, dx, dy, G.view(p + "attn.w_proj"),
                            G.view(p + "attn.b_proj"));
    std::vector<double> dqkv(n * 3 * d, 0.0);
    std::vector<double> datt(n);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        const double* a = L.att.data() + (h * n + t) * n;
        const double* dyr = dy.data() + t * d + h * hd;
        double dot = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
          const double* v = L.qkv.data() + j * 3 * d + 2 * d + h * hd;
          double* dv = dqkv.data() + j * 3 * d + 2 * d + h * hd;
          double s = 0.0;
          for (std::size_t i = 0; i < hd; ++i) {
            s += dyr[i] * v[i];
            dv[i] += a[j] * dyr[i];
          }
          datt[j] = s;
          dot += a[j] * s;
        }
        const double* q = L.qkv.data() + t * 3 * d + h * hd;
        double* dq = dqkv.data() + t * 3 * d + h * hd;
        for (std::size_t j = 0; j <= t; ++j) {
          const double ds = a[j] * (datt[j] - dot) * scale;
          if (ds == 0.0) continue;
          const double* k = L.qkv.data() + j * 3 * d + d + h * hd;
          double* dk = dqkv.data() + j * 3 * d + d + h * hd;
          for (std::size_t i = 0; i < hd; ++i) {
            dq[i] += ds * k[i];
            dk[i] += ds * q[i];
          }
        }
      }
    }
    std::fill(dln.begin(), dln.end(), 0.0);
    detail::linear_backward(L.ln1_out, n, d, P.view(p + "attn.w_qkv"), 3 * d, dqkv, dln,
                            G.view(p + "attn.w_qkv"), G.view(p + "attn.b_qkv"));
    detail::layer_norm_backward(L.ln1_hat, L.ln1_rstd, n, d, P.view(p + "ln1.g"), dln, dx, G.view(p + "ln1.g"),
                                G.view(p + "ln1.b"));
  }

  auto gte = G.view("wte");
  auto gpe = G.view("wpe");
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      gte[static_cast<std::size_t>(C.tokens[t]) * d + i] += dx[t * d + i];
      gpe[t * d + i] += dx[t * d + i];
    }
  return G;
}

/// Convenience overload that reruns forward to build the cache.
inline ModelGrads backward(const ModelParams& P, std::span<const TokenId> tokens, const Matrix& dlogits) {
  ForwardCache cache;
  forward(P, tokens, &cache);
  return backward(P, cache, dlogits);
}

/// Argmax over row entries, restricted to `allowed` when non-empty; ties go
/// to the lowest token id.
inline TokenId argmax_token(std::span<const double> row, std::span<const TokenId> allowed = {}) {
  TokenId best = -1;
  double best_v = -std::numeric_limits<double>::infinity();
  auto consider = [&](TokenId t) {
    const double v = row[static_cast<std::size_t>(t)];
    if (best < 0 || v > best_v || (v == best_v && t < best)) {
      best = t;
      best_v = v;
    }
  };
  if (allowed.empty()) {
    for (std::size_t t = 0; t < row.size(); ++t) consider(static_cast<TokenId>(t));
  } else {
    for (TokenId t : allowed) consider(t);
  }
  return best;
}

/// Greedy decoding. allowed_per_step[i], when present and non-empty, limits
/// the i-th generated token to that set.
inline std::vector<TokenId> greedy_decode(const ModelParams& P, std::span<const TokenId> prompt, std::size_t max_new,
                                          std::span<const std::vector<TokenId>> allowed_per_step = {}) {
  require(!prompt.empty(), ErrorKind::shape, "empty prompt");
  require(prompt.size() + max_new <= static_cast<std::size_t>(P.config().max_seq_len), ErrorKind::shape,
          "prompt + max_new exceeds max_seq_len");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < max_new; ++i) {
    std::span<const TokenId> allowed;
    if (i < allowed_per_step.size()) allowed = allowed_per_step[i];
    TokenId next;
    if (allowed.size() == 1) {
      next = allowed[0];
    } else {
      const Matrix logits = forward(P, seq);
      next = argmax_token(logits.row(logits.rows() - 1), allowed);
    }
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

/// Same subset allowed at every step.
inline std::vector<TokenId> greedy_decode(const ModelParams& P, std::span<const TokenId> prompt, std::size_t max_new,
                                          const VocabSubset& allowed) {
  std::vector<std::vector<TokenId>> steps(max_new, allowed.token_ids());
  return greedy_decode(P, prompt, max_new, steps);
}

}  // namespace dist2
