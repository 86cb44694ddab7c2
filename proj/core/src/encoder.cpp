#include "skd/encoder.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "skd/errors.hpp"
#include "skd/rng.hpp"

namespace skd {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kCosEps = 1e-12;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_prime(double x) {
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) +
         x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

void apply_gelu(const Tensor& pre, Tensor& post) {
  for (size_t i = 0; i < pre.numel(); ++i) post[i] = gelu(pre[i]);
}

void layernorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& y,
                       LayerNormCache& cache) {
  const int64_t rows = x.dim(0), d = x.dim(1);
  cache.mean.resize(rows);
  cache.inv_std.resize(rows);
  for (int64_t t = 0; t < rows; ++t) {
    const double* xr = x.data() + t * d;
    double* yr = y.data() + t * d;
    double mean = 0.0;
    for (int64_t i = 0; i < d; ++i) mean += xr[i];
    mean /= d;
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double c = xr[i] - mean;
      var += c * c;
    }
    var /= d;
    const double inv_std = 1.0 / std::sqrt(var + kLnEps);
    cache.mean[t] = mean;
    cache.inv_std[t] = inv_std;
    for (int64_t i = 0; i < d; ++i) {
      yr[i] = gamma[i] * (xr[i] - mean) * inv_std + beta[i];
    }
  }
}

// Accumulates into dx, dgamma, dbeta.
void layernorm_backward(const Tensor& dy, const Tensor& x, const Tensor& gamma,
                        const LayerNormCache& cache, Tensor& dx, Tensor& dgamma, Tensor& dbeta) {
  const int64_t rows = x.dim(0), d = x.dim(1);
  for (int64_t t = 0; t < rows; ++t) {
    const double* xr = x.data() + t * d;
    const double* dyr = dy.data() + t * d;
    double* dxr = dx.data() + t * d;
    const double mean = cache.mean[t];
    const double inv_std = cache.inv_std[t];

    double sum_dxhat = 0.0, sum_dxhat_xc = 0.0, sum_xc = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double xc = xr[i] - mean;
      const double dxhat = dyr[i] * gamma[i];
      sum_dxhat += dxhat;
      sum_dxhat_xc += dxhat * xc;
      sum_xc += xc;
      dgamma[i] += dyr[i] * xc * inv_std;
      dbeta[i] += dyr[i];
    }
    const double dvar = sum_dxhat_xc * (-0.5) * inv_std * inv_std * inv_std;
    const double dmean = -sum_dxhat * inv_std + dvar * (-2.0 / d) * sum_xc;
    for (int64_t i = 0; i < d; ++i) {
      const double xc = xr[i] - mean;
      const double dxhat = dyr[i] * gamma[i];
      dxr[i] += dxhat * inv_std + dvar * 2.0 * xc / d + dmean / d;
    }
  }
}

// y = x * W + b. x: [T, in], W: [in, out].
void linear_forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
  const int64_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
  matmul(x.data(), w.data(), y.data(), rows, in, out);
  for (int64_t t = 0; t < rows; ++t) {
    double* yr = y.data() + t * out;
    for (int64_t o = 0; o < out; ++o) yr[o] += b[o];
  }
}

// Accumulates into dx, dw, db.
void linear_backward(const Tensor& dy, const Tensor& x, const Tensor& w, Tensor& dx, Tensor& dw,
                     Tensor& db) {
  const int64_t rows = x.dim(0), in = x.dim(1), out = w.dim(1);
  matmul_bt(dy.data(), w.data(), dx.data(), rows, out, in);
  matmul_at(x.data(), dy.data(), dw.data(), rows, in, out);
  for (int64_t t = 0; t < rows; ++t) {
    const double* dyr = dy.data() + t * out;
    for (int64_t o = 0; o < out; ++o) db[o] += dyr[o];
  }
}

// Strided valid convolution. in: [L_in, C_in], w: [C_out, C_in, K].
void conv1d_forward(const Tensor& in, const Tensor& w, const Tensor& b, int stride, Tensor& out) {
  const int64_t c_in = in.dim(1);
  const int64_t c_out = w.dim(0), kernel = w.dim(2);
  const int64_t l_out = out.dim(0);
  for (int64_t t = 0; t < l_out; ++t) {
    double* orow = out.data() + t * c_out;
    for (int64_t o = 0; o < c_out; ++o) orow[o] = b[o];
    for (int64_t j = 0; j < kernel; ++j) {
      const double* irow = in.data() + (t * stride + j) * c_in;
      for (int64_t o = 0; o < c_out; ++o) {
        const double* wrow = w.data() + (o * c_in) * kernel + j;
        double acc = 0.0;
        for (int64_t c = 0; c < c_in; ++c) acc += irow[c] * wrow[c * kernel];
        orow[o] += acc;
      }
    }
  }
}

void conv1d_backward(const Tensor& dout, const Tensor& in, const Tensor& w, int stride,
                     Tensor& din, Tensor& dw, Tensor& db) {
  const int64_t c_in = in.dim(1);
  const int64_t c_out = w.dim(0), kernel = w.dim(2);
  const int64_t l_out = dout.dim(0);
  for (int64_t t = 0; t < l_out; ++t) {
    const double* drow = dout.data() + t * c_out;
    for (int64_t o = 0; o < c_out; ++o) {
      const double g = drow[o];
      if (g == 0.0) continue;
      db[o] += g;
      for (int64_t j = 0; j < kernel; ++j) {
        const double* irow = in.data() + (t * stride + j) * c_in;
        double* dirow = din.data() + (t * stride + j) * c_in;
        const double* wrow = w.data() + (o * c_in) * kernel + j;
        double* dwrow = dw.data() + (o * c_in) * kernel + j;
        for (int64_t c = 0; c < c_in; ++c) {
          dirow[c] += g * wrow[c * kernel];
          dwrow[c * kernel] += g * irow[c];
        }
      }
    }
  }
}

// Grouped length-preserving convolution with zero padding, pad_left = K/2.
void pos_conv_forward(const Tensor& in, const Tensor& w, const Tensor& b, int groups,
                      Tensor& out) {
  const int64_t rows = in.dim(0), d = in.dim(1);
  const int64_t per_group = d / groups;
  const int64_t kernel = w.dim(2);
  const int64_t pad = kernel / 2;
  for (int64_t t = 0; t < rows; ++t) {
    double* orow = out.data() + t * d;
    for (int64_t o = 0; o < d; ++o) {
      const int64_t base = (o / per_group) * per_group;
      double acc = b[o];
      for (int64_t j = 0; j < kernel; ++j) {
        const int64_t src = t + j - pad;
        if (src < 0 || src >= rows) continue;
        const double* irow = in.data() + src * d;
        const double* wrow = w.data() + (o * per_group) * kernel + j;
        for (int64_t c = 0; c < per_group; ++c) acc += irow[base + c] * wrow[c * kernel];
      }
      orow[o] = acc;
    }
  }
}

void pos_conv_backward(const Tensor& dout, const Tensor& in, const Tensor& w, int groups,
                       Tensor& din, Tensor& dw, Tensor& db) {
  const int64_t rows = in.dim(0), d = in.dim(1);
  const int64_t per_group = d / groups;
  const int64_t kernel = w.dim(2);
  const int64_t pad = kernel / 2;
  for (int64_t t = 0; t < rows; ++t) {
    const double* drow = dout.data() + t * d;
    for (int64_t o = 0; o < d; ++o) {
      const double g = drow[o];
      if (g == 0.0) continue;
      const int64_t base = (o / per_group) * per_group;
      db[o] += g;
      for (int64_t j = 0; j < kernel; ++j) {
        const int64_t src = t + j - pad;
        if (src < 0 || src >= rows) continue;
        const double* irow = in.data() + src * d;
        double* dirow = din.data() + src * d;
        const double* wrow = w.data() + (o * per_group) * kernel + j;
        double* dwrow = dw.data() + (o * per_group) * kernel + j;
        for (int64_t c = 0; c < per_group; ++c) {
          dirow[base + c] += g * wrow[c * kernel];
          dwrow[c * kernel] += g * irow[base + c];
        }
      }
    }
  }
}

void check_finite(const Tensor& t, const char* where) {
  if (!t.all_finite()) {
    throw NumericError(std::string("non-finite value at ") + where);
  }
}

std::string layer_prefix(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "layers.%02d.", i);
  return buf;
}

}  // namespace

void EncoderConfig::validate() const {
  if (cnn_channels < 1) throw ConfigError("config: cnn_channels must be >= 1");
  if (depth < 1) throw ConfigError("config: depth must be >= 1");
  if (emb_dim < 1 || ffn_dim < 1 || proj_dim < 1 || n_labels < 1) {
    throw ConfigError("config: dimensions must be positive");
  }
  if (attn_heads < 1 || emb_dim % attn_heads != 0) {
    throw ConfigError("config: emb_dim must be divisible by attn_heads");
  }
  if (pos_conv_kernel < 1) throw ConfigError("config: pos_conv_kernel must be >= 1");
  if (pos_conv_groups < 1 || emb_dim % pos_conv_groups != 0) {
    throw ConfigError("config: emb_dim must be divisible by pos_conv_groups");
  }
  if (temperature <= 0.0) throw ConfigError("config: temperature must be positive");
}

EncoderConfig EncoderConfig::preset(const std::string& name) {
  EncoderConfig c;
  if (name == "H-L") {
    c.depth = 24;
    c.emb_dim = 1024;
    c.ffn_dim = 4096;
    c.attn_heads = 16;
  } else if (name == "H-S") {
    c.depth = 4;
    c.emb_dim = 1024;
    c.ffn_dim = 2048;
    c.attn_heads = 16;
  } else if (name == "H-ST") {
    c.depth = 4;
    c.emb_dim = 512;
    c.ffn_dim = 2048;
    c.attn_heads = 16;
  } else if (name == "tiny") {
    c.cnn_channels = 24;
    c.depth = 2;
    c.emb_dim = 32;
    c.ffn_dim = 64;
    c.attn_heads = 2;
    c.proj_dim = 32;
    c.n_labels = 64;
    c.pos_conv_kernel = 9;
    c.pos_conv_groups = 4;
  } else if (name == "tiny-shallow") {
    c.cnn_channels = 24;
    c.depth = 1;
    c.emb_dim = 32;
    c.ffn_dim = 64;
    c.attn_heads = 2;
    c.proj_dim = 32;
    c.n_labels = 64;
    c.pos_conv_kernel = 9;
    c.pos_conv_groups = 4;
  } else if (name == "tiny-thin") {
    c.cnn_channels = 24;
    c.depth = 1;
    c.emb_dim = 16;
    c.ffn_dim = 32;
    c.attn_heads = 2;
    c.proj_dim = 16;
    c.n_labels = 64;
    c.pos_conv_kernel = 9;
    c.pos_conv_groups = 4;
  } else if (name == "grad-tiny") {
    c.cnn_channels = 4;
    c.depth = 2;
    c.emb_dim = 8;
    c.ffn_dim = 16;
    c.attn_heads = 2;
    c.proj_dim = 8;
    c.n_labels = 4;
    c.pos_conv_kernel = 4;
    c.pos_conv_groups = 2;
  } else {
    throw ConfigError("unknown encoder preset: " + name);
  }
  c.validate();
  return c;
}

nlohmann::json EncoderConfig::to_json() const {
  return nlohmann::json{{"cnn_channels", cnn_channels},
                        {"depth", depth},
                        {"emb_dim", emb_dim},
                        {"ffn_dim", ffn_dim},
                        {"attn_heads", attn_heads},
                        {"proj_dim", proj_dim},
                        {"n_labels", n_labels},
                        {"pos_conv_kernel", pos_conv_kernel},
                        {"pos_conv_groups", pos_conv_groups},
                        {"head", head == HeadKind::kCosine ? "cosine" : "linear"},
                        {"temperature", temperature}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.cnn_channels = j.at("cnn_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.emb_dim = j.at("emb_dim").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.attn_heads = j.at("attn_heads").get<int>();
  c.proj_dim = j.at("proj_dim").get<int>();
  c.n_labels = j.at("n_labels").get<int>();
  c.pos_conv_kernel = j.at("pos_conv_kernel").get<int>();
  c.pos_conv_groups = j.at("pos_conv_groups").get<int>();
  const std::string head = j.at("head").get<std::string>();
  if (head == "cosine") {
    c.head = HeadKind::kCosine;
  } else if (head == "linear") {
    c.head = HeadKind::kLinear;
  } else {
    throw ConfigError("unknown head kind: " + head);
  }
  c.temperature = j.at("temperature").get<double>();
  c.validate();
  return c;
}

std::vector<std::pair<std::string, std::vector<int64_t>>> parameter_shapes(
    const EncoderConfig& config) {
  config.validate();
  const int64_t ch = config.cnn_channels;
  const int64_t d = config.emb_dim;
  const int64_t ffn = config.ffn_dim;
  const int64_t dp = config.proj_dim;

  std::vector<std::pair<std::string, std::vector<int64_t>>> shapes;
  for (int i = 0; i < 7; ++i) {
    const int64_t in = (i == 0) ? 1 : ch;
    const std::string prefix = "cnn." + std::to_string(i);
    shapes.push_back({prefix + ".weight", {ch, in, EncoderConfig::kCnnKernels[i]}});
    shapes.push_back({prefix + ".bias", {ch}});
  }
  shapes.push_back({"post_cnn_ln.gamma", {ch}});
  shapes.push_back({"post_cnn_ln.beta", {ch}});
  shapes.push_back({"feature_proj.weight", {ch, d}});
  shapes.push_back({"feature_proj.bias", {d}});
  shapes.push_back({"mask_emb", {d}});
  shapes.push_back({"pos_conv.weight", {d, d / config.pos_conv_groups, config.pos_conv_kernel}});
  shapes.push_back({"pos_conv.bias", {d}});
  for (int i = 0; i < config.depth; ++i) {
    const std::string p = layer_prefix(i);
    shapes.push_back({p + "ln1.gamma", {d}});
    shapes.push_back({p + "ln1.beta", {d}});
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      shapes.push_back({p + "attn." + std::string(w) + ".weight", {d, d}});
      shapes.push_back({p + "attn." + std::string(w) + ".bias", {d}});
    }
    shapes.push_back({p + "ln2.gamma", {d}});
    shapes.push_back({p + "ln2.beta", {d}});
    shapes.push_back({p + "ffn.w1.weight", {d, ffn}});
    shapes.push_back({p + "ffn.w1.bias", {ffn}});
    shapes.push_back({p + "ffn.w2.weight", {ffn, d}});
    shapes.push_back({p + "ffn.w2.bias", {d}});
  }
  shapes.push_back({"final_ln.gamma", {d}});
  shapes.push_back({"final_ln.beta", {d}});
  shapes.push_back({"final_proj.weight", {d, dp}});
  shapes.push_back({"final_proj.bias", {dp}});
  shapes.push_back({"label_emb", {static_cast<int64_t>(config.n_labels), dp}});

  std::sort(shapes.begin(), shapes.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return shapes;
}

int64_t param_count(const EncoderConfig& config) {
  int64_t total = 0;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    int64_t n = 1;
    for (int64_t dim : shape) n *= dim;
    total += n;
  }
  return total;
}

Model build_model(const EncoderConfig& config, uint64_t seed) {
  Model model;
  model.config = config;
  const Rng root(seed);
  for (const auto& [name, shape] : parameter_shapes(config)) {
    Tensor t(shape);
    const bool is_bias = name.ends_with(".bias") || name.ends_with(".beta");
    const bool is_gain = name.ends_with(".gamma");
    if (is_gain) {
      t.fill(1.0);
    } else if (!is_bias) {
      double fan_in, fan_out;
      if (shape.size() == 3) {
        fan_in = static_cast<double>(shape[1] * shape[2]);
        fan_out = static_cast<double>(shape[0] * shape[2]);
      } else if (shape.size() == 2) {
        fan_in = static_cast<double>(shape[0]);
        fan_out = static_cast<double>(shape[1]);
      } else {
        fan_in = fan_out = static_cast<double>(shape[0]);
      }
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      Rng rng = root.child(name);
      for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-a, a);
    }
    model.params.emplace(name, std::move(t));
  }
  return model;
}

std::vector<int64_t> cnn_layer_lengths(int64_t n_samples) {
  std::vector<int64_t> lengths;
  int64_t len = n_samples;
  for (int i = 0; i < 7; ++i) {
    if (len < EncoderConfig::kCnnKernels[i]) {
      lengths.push_back(0);
      len = 0;
      continue;
    }
    len = (len - EncoderConfig::kCnnKernels[i]) / EncoderConfig::kCnnStrides[i] + 1;
    lengths.push_back(len);
  }
  return lengths;
}

int64_t cnn_output_length(int64_t n_samples) { return cnn_layer_lengths(n_samples).back(); }

std::vector<uint8_t> mask_spans(int64_t t_count, const MaskSpec& spec) {
  if (t_count < 1) throw ConfigError("mask_spans: need T >= 1");
  if (spec.mask_prob < 0.0 || spec.mask_prob > 1.0) {
    throw ConfigError("mask_spans: mask_prob must lie in [0, 1]");
  }
  if (spec.span_len < 1) throw ConfigError("mask_spans: span_len must be >= 1");
  std::vector<uint8_t> mask(static_cast<size_t>(t_count), 0);
  Rng rng(spec.seed);
  for (int64_t t = 0; t < t_count; ++t) {
    if (rng.next_double() < spec.mask_prob) {
      const int64_t end = std::min<int64_t>(t_count, t + spec.span_len);
      for (int64_t i = t; i < end; ++i) mask[i] = 1;
    }
  }
  return mask;
}

namespace {

// Shared CNN stack; fills pre/post per layer if keep != nullptr.
Tensor run_cnn(const Model& model, const AudioBuffer& audio, std::vector<Tensor>* pre_out,
               std::vector<Tensor>* post_out, Tensor* audio_out) {
  const int64_t n = static_cast<int64_t>(audio.samples.size());
  if (cnn_output_length(n) < 1) {
    throw ConfigError("cnn_forward: audio shorter than the CNN receptive field");
  }
  Tensor x({n, 1});
  for (int64_t i = 0; i < n; ++i) x[i] = audio.samples[i];
  if (audio_out) *audio_out = x;

  const auto lengths = cnn_layer_lengths(n);
  Tensor cur = std::move(x);
  for (int i = 0; i < 7; ++i) {
    const Tensor& w = model.params.at("cnn." + std::to_string(i) + ".weight");
    const Tensor& b = model.params.at("cnn." + std::to_string(i) + ".bias");
    Tensor pre({lengths[i], w.dim(0)});
    conv1d_forward(cur, w, b, EncoderConfig::kCnnStrides[i], pre);
    Tensor post = Tensor::zeros_like(pre);
    apply_gelu(pre, post);
    if (pre_out) pre_out->push_back(std::move(pre));
    if (post_out) {
      post_out->push_back(post);
    }
    cur = std::move(post);
  }
  check_finite(cur, "cnn output");
  return cur;
}

}  // namespace

Tensor cnn_forward(const Model& model, const AudioBuffer& audio) {
  return run_cnn(model, audio, nullptr, nullptr, nullptr);
}

ForwardResult forward(const Model& model, const AudioBuffer& audio,
                      const std::vector<uint8_t>* mask, EncoderTrace* trace) {
  const EncoderConfig& cfg = model.config;
  EncoderTrace local;
  EncoderTrace& tr = trace ? *trace : local;

  Tensor cnn_out = run_cnn(model, audio, &tr.cnn_pre, &tr.cnn_post, &tr.audio_in);
  const int64_t t_count = cnn_out.dim(0);
  const int64_t d = cfg.emb_dim;

  if (mask && static_cast<int64_t>(mask->size()) != t_count) {
    throw ConfigError("forward: mask length does not match CNN output length");
  }

  tr.cnn_ln_out = Tensor({t_count, cfg.cnn_channels});
  layernorm_forward(cnn_out, model.params.at("post_cnn_ln.gamma"),
                    model.params.at("post_cnn_ln.beta"), tr.cnn_ln_out, tr.cnn_ln);

  tr.projected = Tensor({t_count, d});
  linear_forward(tr.cnn_ln_out, model.params.at("feature_proj.weight"),
                 model.params.at("feature_proj.bias"), tr.projected);

  tr.mask = mask ? *mask : std::vector<uint8_t>();
  tr.masked = tr.projected;
  if (mask) {
    const Tensor& mask_emb = model.params.at("mask_emb");
    for (int64_t t = 0; t < t_count; ++t) {
      if ((*mask)[t]) {
        std::memcpy(tr.masked.data() + t * d, mask_emb.data(), sizeof(double) * d);
      }
    }
  }

  tr.pos_pre = Tensor({t_count, d});
  pos_conv_forward(tr.masked, model.params.at("pos_conv.weight"),
                   model.params.at("pos_conv.bias"), cfg.pos_conv_groups, tr.pos_pre);
  Tensor x0({t_count, d});
  for (size_t i = 0; i < x0.numel(); ++i) x0[i] = tr.masked[i] + gelu(tr.pos_pre[i]);
  check_finite(x0, "transformer input");

  tr.hidden.clear();
  tr.hidden.push_back(std::move(x0));
  tr.layers.assign(static_cast<size_t>(cfg.depth), LayerTrace{});

  const int64_t heads = cfg.attn_heads;
  const int64_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int i = 0; i < cfg.depth; ++i) {
    const std::string p = layer_prefix(i);
    LayerTrace& lt = tr.layers[static_cast<size_t>(i)];
    const Tensor& x_in = tr.hidden.back();

    lt.ln1_out = Tensor({t_count, d});
    layernorm_forward(x_in, model.params.at(p + "ln1.gamma"), model.params.at(p + "ln1.beta"),
                      lt.ln1_out, lt.ln1);

    lt.q = Tensor({t_count, d});
    lt.k = Tensor({t_count, d});
    lt.v = Tensor({t_count, d});
    linear_forward(lt.ln1_out, model.params.at(p + "attn.wq.weight"),
                   model.params.at(p + "attn.wq.bias"), lt.q);
    linear_forward(lt.ln1_out, model.params.at(p + "attn.wk.weight"),
                   model.params.at(p + "attn.wk.bias"), lt.k);
    linear_forward(lt.ln1_out, model.params.at(p + "attn.wv.weight"),
                   model.params.at(p + "attn.wv.bias"), lt.v);

    lt.attn_probs = Tensor({heads, t_count, t_count});
    lt.ctx = Tensor({t_count, d});
    std::vector<double> row(static_cast<size_t>(t_count));
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t off = h * dh;
      double* probs = lt.attn_probs.data() + h * t_count * t_count;
      for (int64_t a = 0; a < t_count; ++a) {
        const double* qa = lt.q.data() + a * d + off;
        double max_score = -1e300;
        for (int64_t b = 0; b < t_count; ++b) {
          const double* kb = lt.k.data() + b * d + off;
          double acc = 0.0;
          for (int64_t c = 0; c < dh; ++c) acc += qa[c] * kb[c];
          row[b] = acc * scale;
          max_score = std::max(max_score, row[b]);
        }
        double denom = 0.0;
        for (int64_t b = 0; b < t_count; ++b) {
          row[b] = std::exp(row[b] - max_score);
          denom += row[b];
        }
        double* prow = probs + a * t_count;
        for (int64_t b = 0; b < t_count; ++b) prow[b] = row[b] / denom;

        double* ctx_row = lt.ctx.data() + a * d + off;
        for (int64_t c = 0; c < dh; ++c) ctx_row[c] = 0.0;
        for (int64_t b = 0; b < t_count; ++b) {
          const double pb = prow[b];
          if (pb == 0.0) continue;
          const double* vb = lt.v.data() + b * d + off;
          for (int64_t c = 0; c < dh; ++c) ctx_row[c] += pb * vb[c];
        }
      }
    }

    Tensor attn_out({t_count, d});
    linear_forward(lt.ctx, model.params.at(p + "attn.wo.weight"),
                   model.params.at(p + "attn.wo.bias"), attn_out);

    lt.resid1 = x_in;
    lt.resid1.axpy(1.0, attn_out);

    lt.ln2_out = Tensor({t_count, d});
    layernorm_forward(lt.resid1, model.params.at(p + "ln2.gamma"),
                      model.params.at(p + "ln2.beta"), lt.ln2_out, lt.ln2);

    lt.ffn_pre = Tensor({t_count, cfg.ffn_dim});
    linear_forward(lt.ln2_out, model.params.at(p + "ffn.w1.weight"),
                   model.params.at(p + "ffn.w1.bias"), lt.ffn_pre);
    Tensor ffn_act = Tensor::zeros_like(lt.ffn_pre);
    apply_gelu(lt.ffn_pre, ffn_act);
    Tensor ffn_out({t_count, d});
    linear_forward(ffn_act, model.params.at(p + "ffn.w2.weight"),
                   model.params.at(p + "ffn.w2.bias"), ffn_out);

    Tensor out = lt.resid1;
    out.axpy(1.0, ffn_out);
    if (!out.all_finite()) {
      throw NumericError("non-finite value at transformer layer " + std::to_string(i));
    }
    tr.hidden.push_back(std::move(out));
  }

  tr.final_ln_out = Tensor({t_count, d});
  layernorm_forward(tr.hidden.back(), model.params.at("final_ln.gamma"),
                    model.params.at("final_ln.beta"), tr.final_ln_out, tr.final_ln);

  tr.proj = Tensor({t_count, cfg.proj_dim});
  linear_forward(tr.final_ln_out, model.params.at("final_proj.weight"),
                 model.params.at("final_proj.bias"), tr.proj);

  const Tensor& label_emb = model.params.at("label_emb");
  const int64_t n_labels = cfg.n_labels;
  const int64_t dp = cfg.proj_dim;
  tr.logits = Tensor({t_count, n_labels});
  if (cfg.head == HeadKind::kCosine) {
    std::vector<double> emb_norm(static_cast<size_t>(n_labels));
    for (int64_t c = 0; c < n_labels; ++c) {
      const double* e = label_emb.data() + c * dp;
      double acc = 0.0;
      for (int64_t j = 0; j < dp; ++j) acc += e[j] * e[j];
      emb_norm[c] = std::sqrt(acc) + kCosEps;
    }
    for (int64_t t = 0; t < t_count; ++t) {
      const double* u = tr.proj.data() + t * dp;
      double nu = 0.0;
      for (int64_t j = 0; j < dp; ++j) nu += u[j] * u[j];
      nu = std::sqrt(nu) + kCosEps;
      double* lrow = tr.logits.data() + t * n_labels;
      for (int64_t c = 0; c < n_labels; ++c) {
        const double* e = label_emb.data() + c * dp;
        double dot = 0.0;
        for (int64_t j = 0; j < dp; ++j) dot += u[j] * e[j];
        lrow[c] = dot / (nu * emb_norm[c] * cfg.temperature);
      }
    }
  } else {
    matmul_bt(tr.proj.data(), label_emb.data(), tr.logits.data(), t_count, dp, n_labels);
  }
  check_finite(tr.logits, "logits");

  ForwardResult result;
  result.logits = tr.logits;
  result.hidden = tr.hidden;
  return result;
}

LossBreakdown masked_pred_loss(const Tensor& logits, const std::vector<uint32_t>& labels,
                               const std::vector<uint8_t>& mask, double w_masked,
                               double w_unmasked, Tensor* d_logits) {
  const int64_t t_count = logits.dim(0);
  const int64_t k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != t_count) {
    throw ConfigError("masked_pred_loss: label count does not match logit rows");
  }
  if (!mask.empty() && static_cast<int64_t>(mask.size()) != t_count) {
    throw ConfigError("masked_pred_loss: mask length does not match logit rows");
  }
  if (w_masked < 0.0 || w_unmasked < 0.0 || w_masked + w_unmasked <= 0.0) {
    throw ConfigError("masked_pred_loss: weights must be nonnegative and not both zero");
  }

  LossBreakdown out;
  for (int64_t t = 0; t < t_count; ++t) {
    const bool is_masked = !mask.empty() && mask[static_cast<size_t>(t)];
    if (is_masked) {
      out.masked_count += 1;
    } else {
      out.unmasked_count += 1;
    }
  }

  if (d_logits) {
    *d_logits = Tensor({t_count, k});
  }

  std::vector<double> probs(static_cast<size_t>(k));
  int64_t masked_hits = 0;
  double masked_sum = 0.0, unmasked_sum = 0.0;
  for (int64_t t = 0; t < t_count; ++t) {
    const uint32_t label = labels[static_cast<size_t>(t)];
    if (static_cast<int64_t>(label) >= k) {
      throw ConfigError("masked_pred_loss: label out of range");
    }
    const double* lrow = logits.data() + t * k;
    double max_logit = lrow[0];
    int64_t arg_max = 0;
    for (int64_t c = 1; c < k; ++c) {
      if (lrow[c] > max_logit) {
        max_logit = lrow[c];
        arg_max = c;
      }
    }
    double denom = 0.0;
    for (int64_t c = 0; c < k; ++c) {
      probs[static_cast<size_t>(c)] = std::exp(lrow[c] - max_logit);
      denom += probs[static_cast<size_t>(c)];
    }
    const double log_denom = std::log(denom);
    const double ce = -(lrow[label] - max_logit - log_denom);

    const bool is_masked = !mask.empty() && mask[static_cast<size_t>(t)];
    if (is_masked) {
      masked_sum += ce;
      if (arg_max == static_cast<int64_t>(label)) ++masked_hits;
    } else {
      unmasked_sum += ce;
    }

    if (d_logits) {
      const double region_w = is_masked ? (out.masked_count ? w_masked / out.masked_count : 0.0)
                                        : (out.unmasked_count ? w_unmasked / out.unmasked_count : 0.0);
      if (region_w != 0.0) {
        double* drow = d_logits->data() + t * k;
        for (int64_t c = 0; c < k; ++c) {
          const double p = probs[static_cast<size_t>(c)] / denom;
          drow[c] = region_w * (p - (c == static_cast<int64_t>(label) ? 1.0 : 0.0));
        }
      }
    }
  }

  out.masked_ce = out.masked_count ? masked_sum / out.masked_count : 0.0;
  out.unmasked_ce = out.unmasked_count ? unmasked_sum / out.unmasked_count : 0.0;
  out.total = w_masked * out.masked_ce + w_unmasked * out.unmasked_ce;
  out.masked_acc = out.masked_count ? static_cast<double>(masked_hits) / out.masked_count : 0.0;
  return out;
}

TensorMap backward(const Model& model, const EncoderTrace& trace, const Tensor& d_logits) {
  const EncoderConfig& cfg = model.config;
  if (trace.hidden.empty()) throw ConfigError("backward: forward trace not retained");
  const int64_t t_count = trace.logits.dim(0);
  const int64_t d = cfg.emb_dim;
  const int64_t dp = cfg.proj_dim;
  const int64_t n_labels = cfg.n_labels;

  TensorMap grads;
  for (const auto& [name, tensor] : model.params) {
    grads.emplace(name, Tensor::zeros_like(tensor));
  }

  // Head.
  Tensor d_proj({t_count, dp});
  const Tensor& label_emb = model.params.at("label_emb");
  Tensor& d_label_emb = grads.at("label_emb");
  if (cfg.head == HeadKind::kCosine) {
    std::vector<double> emb_norm(static_cast<size_t>(n_labels));
    for (int64_t c = 0; c < n_labels; ++c) {
      const double* e = label_emb.data() + c * dp;
      double acc = 0.0;
      for (int64_t j = 0; j < dp; ++j) acc += e[j] * e[j];
      emb_norm[c] = std::sqrt(acc);
    }
    for (int64_t t = 0; t < t_count; ++t) {
      const double* u = trace.proj.data() + t * dp;
      double nu = 0.0;
      for (int64_t j = 0; j < dp; ++j) nu += u[j] * u[j];
      nu = std::sqrt(nu);
      const double a = nu + kCosEps;
      double* du = d_proj.data() + t * dp;
      const double* drow = d_logits.data() + t * n_labels;
      for (int64_t c = 0; c < n_labels; ++c) {
        const double g0 = drow[c];
        if (g0 == 0.0) continue;
        const double g = g0 / cfg.temperature;
        const double* e = label_emb.data() + c * dp;
        double* de = d_label_emb.data() + c * dp;
        const double b = emb_norm[c] + kCosEps;
        double dot = 0.0;
        for (int64_t j = 0; j < dp; ++j) dot += u[j] * e[j];
        const double inv_ab = 1.0 / (a * b);
        const double cu = nu > 0.0 ? dot / (a * a * b * nu) : 0.0;
        const double ce = emb_norm[c] > 0.0 ? dot / (a * b * b * emb_norm[c]) : 0.0;
        for (int64_t j = 0; j < dp; ++j) {
          du[j] += g * (e[j] * inv_ab - cu * u[j]);
          de[j] += g * (u[j] * inv_ab - ce * e[j]);
        }
      }
    }
  } else {
    matmul(d_logits.data(), label_emb.data(), d_proj.data(), t_count, n_labels, dp);
    matmul_at(d_logits.data(), trace.proj.data(), d_label_emb.data(), t_count, n_labels, dp);
  }

  // Final projection and layernorm.
  Tensor d_final_ln({t_count, d});
  linear_backward(d_proj, trace.final_ln_out, model.params.at("final_proj.weight"), d_final_ln,
                  grads.at("final_proj.weight"), grads.at("final_proj.bias"));
  Tensor d_hidden({t_count, d});
  layernorm_backward(d_final_ln, trace.hidden.back(), model.params.at("final_ln.gamma"),
                     trace.final_ln, d_hidden, grads.at("final_ln.gamma"),
                     grads.at("final_ln.beta"));

  const int64_t heads = cfg.attn_heads;
  const int64_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int i = cfg.depth - 1; i >= 0; --i) {
    const std::string p = layer_prefix(i);
    const LayerTrace& lt = trace.layers[static_cast<size_t>(i)];
    const Tensor& x_in = trace.hidden[static_cast<size_t>(i)];

    // out = resid1 + ffn(ln2(resid1)); d_hidden currently holds d(out).
    Tensor d_resid1 = d_hidden;

    Tensor ffn_act = Tensor::zeros_like(lt.ffn_pre);
    apply_gelu(lt.ffn_pre, ffn_act);
    Tensor d_ffn_act({t_count, cfg.ffn_dim});
    linear_backward(d_hidden, ffn_act, model.params.at(p + "ffn.w2.weight"), d_ffn_act,
                    grads.at(p + "ffn.w2.weight"), grads.at(p + "ffn.w2.bias"));
    Tensor d_ffn_pre = Tensor::zeros_like(d_ffn_act);
    for (size_t j = 0; j < d_ffn_pre.numel(); ++j) {
      d_ffn_pre[j] = d_ffn_act[j] * gelu_prime(lt.ffn_pre[j]);
    }
    Tensor d_ln2({t_count, d});
    linear_backward(d_ffn_pre, lt.ln2_out, model.params.at(p + "ffn.w1.weight"), d_ln2,
                    grads.at(p + "ffn.w1.weight"), grads.at(p + "ffn.w1.bias"));
    layernorm_backward(d_ln2, lt.resid1, model.params.at(p + "ln2.gamma"), lt.ln2, d_resid1,
                       grads.at(p + "ln2.gamma"), grads.at(p + "ln2.beta"));

    // resid1 = x_in + wo(ctx); d_resid1 flows to both.
    Tensor d_x_in = d_resid1;
    Tensor d_ctx({t_count, d});
    linear_backward(d_resid1, lt.ctx, model.params.at(p + "attn.wo.weight"), d_ctx,
                    grads.at(p + "attn.wo.weight"), grads.at(p + "attn.wo.bias"));

    Tensor d_q({t_count, d}), d_k({t_count, d}), d_v({t_count, d});
    std::vector<double> d_probs_row(static_cast<size_t>(t_count));
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t off = h * dh;
      const double* probs = lt.attn_probs.data() + h * t_count * t_count;
      for (int64_t a = 0; a < t_count; ++a) {
        const double* prow = probs + a * t_count;
        const double* dctx_row = d_ctx.data() + a * d + off;

        // dA[a,b] and dV.
        double dot_pa = 0.0;
        for (int64_t b = 0; b < t_count; ++b) {
          const double* vb = lt.v.data() + b * d + off;
          double acc = 0.0;
          for (int64_t c = 0; c < dh; ++c) acc += dctx_row[c] * vb[c];
          d_probs_row[static_cast<size_t>(b)] = acc;
          dot_pa += acc * prow[b];
          double* dvb = d_v.data() + b * d + off;
          const double pb = prow[b];
          if (pb != 0.0) {
            for (int64_t c = 0; c < dh; ++c) dvb[c] += pb * dctx_row[c];
          }
        }
        // Softmax backward, then into q and k.
        double* dqa = d_q.data() + a * d + off;
        const double* qa = trace.layers[static_cast<size_t>(i)].q.data() + a * d + off;
        for (int64_t b = 0; b < t_count; ++b) {
          const double ds = prow[b] * (d_probs_row[static_cast<size_t>(b)] - dot_pa) * scale;
          if (ds == 0.0) continue;
          const double* kb = lt.k.data() + b * d + off;
          double* dkb = d_k.data() + b * d + off;
          for (int64_t c = 0; c < dh; ++c) {
            dqa[c] += ds * kb[c];
            dkb[c] += ds * qa[c];
          }
        }
      }
    }

    Tensor d_ln1({t_count, d});
    linear_backward(d_q, lt.ln1_out, model.params.at(p + "attn.wq.weight"), d_ln1,
                    grads.at(p + "attn.wq.weight"), grads.at(p + "attn.wq.bias"));
    linear_backward(d_k, lt.ln1_out, model.params.at(p + "attn.wk.weight"), d_ln1,
                    grads.at(p + "attn.wk.weight"), grads.at(p + "attn.wk.bias"));
    linear_backward(d_v, lt.ln1_out, model.params.at(p + "attn.wv.weight"), d_ln1,
                    grads.at(p + "attn.wv.weight"), grads.at(p + "attn.wv.bias"));
    layernorm_backward(d_ln1, x_in, model.params.at(p + "ln1.gamma"), lt.ln1, d_x_in,
                       grads.at(p + "ln1.gamma"), grads.at(p + "ln1.beta"));

    d_hidden = std::move(d_x_in);
  }

  // x0 = masked + gelu(pos_conv(masked)).
  Tensor d_masked = d_hidden;
  Tensor d_pos_pre = Tensor::zeros_like(trace.pos_pre);
  for (size_t j = 0; j < d_pos_pre.numel(); ++j) {
    d_pos_pre[j] = d_hidden[j] * gelu_prime(trace.pos_pre[j]);
  }
  pos_conv_backward(d_pos_pre, trace.masked, model.params.at("pos_conv.weight"),
                    cfg.pos_conv_groups, d_masked, grads.at("pos_conv.weight"),
                    grads.at("pos_conv.bias"));

  // Mask substitution: masked rows route to the mask embedding.
  Tensor d_projected = d_masked;
  if (!trace.mask.empty()) {
    Tensor& d_mask_emb = grads.at("mask_emb");
    for (int64_t t = 0; t < t_count; ++t) {
      if (!trace.mask[static_cast<size_t>(t)]) continue;
      double* drow = d_projected.data() + t * d;
      for (int64_t j = 0; j < d; ++j) {
        d_mask_emb[static_cast<size_t>(j)] += drow[j];
        drow[j] = 0.0;
      }
    }
  }

  Tensor d_cnn_ln({t_count, cfg.cnn_channels});
  linear_backward(d_projected, trace.cnn_ln_out, model.params.at("feature_proj.weight"), d_cnn_ln,
                  grads.at("feature_proj.weight"), grads.at("feature_proj.bias"));

  Tensor d_cnn_post = Tensor::zeros_like(trace.cnn_post.back());
  layernorm_backward(d_cnn_ln, trace.cnn_post.back(), model.params.at("post_cnn_ln.gamma"),
                     trace.cnn_ln, d_cnn_post, grads.at("post_cnn_ln.gamma"),
                     grads.at("post_cnn_ln.beta"));

  for (int i = 6; i >= 0; --i) {
    Tensor d_pre = Tensor::zeros_like(trace.cnn_pre[static_cast<size_t>(i)]);
    for (size_t j = 0; j < d_pre.numel(); ++j) {
      d_pre[j] = d_cnn_post[j] * gelu_prime(trace.cnn_pre[static_cast<size_t>(i)][j]);
    }
    const Tensor& input = (i == 0) ? trace.audio_in : trace.cnn_post[static_cast<size_t>(i - 1)];
    Tensor d_input = Tensor::zeros_like(input);
    conv1d_backward(d_pre, input, model.params.at("cnn." + std::to_string(i) + ".weight"),
                    EncoderConfig::kCnnStrides[i], d_input,
                    grads.at("cnn." + std::to_string(i) + ".weight"),
                    grads.at("cnn." + std::to_string(i) + ".bias"));
    d_cnn_post = std::move(d_input);
  }

  return grads;
}

}  // namespace skd
