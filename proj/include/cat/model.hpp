#pragma once

// Causal audio transformer encoder.
//
// Each time frame of an MRMF tensor becomes two tokens, one per filter channel:
// the [K × F] slab of that channel is flattened and projected to width M. The
// two token streams never mix inside the encoder. Attention heads are split in
// half: the first H/2 heads attend over mel tokens, the rest over raw tokens.
// After L pre-norm blocks each stream is mean-pooled and the pooled vectors are
// concatenated into the latent z (width 2M), which feeds the classifier. The
// reconstruction block maps every frame's token pair back to a [K × F × 2] slab.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cat/autodiff.hpp"
#include "cat/binary_io.hpp"
#include "cat/random.hpp"

namespace cat {

enum class AttentionKernel { global, local };

struct ModelConfig {
  std::size_t frames = 100;      // T, used for the positional distinctness scan
  std::size_t resolutions = 3;   // K
  std::size_t bands = 64;        // F
  std::size_t width = 32;        // M
  std::size_t heads = 4;         // H
  std::size_t layers = 2;        // L
  std::size_t classes = 4;
  std::size_t time_embed_dim = 32;  // D_t
  std::size_t ffn_mult = 4;
  AttentionKernel kernel = AttentionKernel::global;
  std::size_t window_len = 0;  // local kernel window, in frames
  double ln_eps = 1e-5;

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
    if (frames == 0) fail("frames must be positive");
    if (resolutions == 0) fail("resolutions (K) must be positive");
    if (bands == 0) fail("bands (F) must be positive");
    if (width == 0) fail("width (M) must be positive");
    if (heads == 0 || heads % 2 != 0) fail("heads (H) must be even and positive, got " + std::to_string(heads));
    if (width % heads != 0) fail("width (M=" + std::to_string(width) + ") must be divisible by heads (H=" + std::to_string(heads) + ")");
    if (layers == 0) fail("layers must be positive");
    if (classes < 2) fail("classes must be at least 2");
    if (time_embed_dim == 0) fail("time_embed_dim must be positive");
    if (ffn_mult == 0) fail("ffn_mult must be positive");
    if (kernel == AttentionKernel::local && window_len == 0) fail("local kernel needs window_len >= 1");
    if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  }

  std::size_t head_dim() const { return width / heads; }
  std::size_t latent_dim() const { return 2 * width; }
  std::size_t patch_dim() const { return resolutions * bands; }
};

struct Parameter {
  std::string name;
  Tensor value;
};

/// Attention weights of every head in one block, recorded for inspection.
struct AttentionTrace {
  struct Head {
    std::size_t layer;
    std::size_t head;
    std::size_t channel;  // 0 = mel stream, 1 = raw stream
    Tensor weights;       // [T × T]
  };
  std::vector<Head> heads;
};

/// Tokens of both filter channels, each [T × M].
struct StreamPair {
  Var mel;
  Var raw;
};

/// Mask for non-shifted local-window attention: token i may attend to j iff
/// they share the window ⌊i/w⌋. Windows of length ≥ T degrade to global.
inline std::vector<std::uint8_t> local_window_mask(std::size_t T, std::size_t w) {
  if (w == 0) throw ValidationError("local window length must be at least 1");
  std::vector<std::uint8_t> mask(T * T, 1);
  if (w >= T) return mask;
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j < T; ++j) mask[i * T + j] = (i / w == j / w) ? 1 : 0;
  return mask;
}

/// Vaswani sinusoid for position `pos` in `dim` dimensions.
inline std::vector<double> sinusoid(double pos, std::size_t dim) {
  std::vector<double> v(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
    v[i] = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
  }
  return v;
}

/// Fixed feature-axis sinusoid (pe2): one M-vector broadcast over time.
inline Tensor feature_sinusoid(std::size_t width) {
  Tensor t({1, width});
  for (std::size_t m = 0; m < width; ++m) {
    const double phase = std::numbers::pi * (static_cast<double>(m) + 0.5) / static_cast<double>(width);
    t[m] = (m % 2 == 0) ? std::sin(phase) : std::cos(phase);
  }
  return t;
}

/// Positions in the parameter list of every named tensor.
struct ParamLayout {
  struct Block {
    std::size_t ln1_gain, ln1_bias;
    std::size_t q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
    std::size_t ln2_gain, ln2_bias;
    std::size_t ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  };
  std::size_t embed_w[2], embed_b[2];
  std::size_t pe_g_w, pe_g_b;
  std::vector<Block> blocks;
  std::size_t final_gain, final_bias;
  std::size_t head_w, head_b;
  std::size_t recon_w, recon_b;
};

struct SampleOutput {
  Var z;      // [1 × 2M]
  Var recon;  // [T × K × F × 2]
};

struct BatchOutput {
  Var logits;                // [n × classes]
  Var z;                     // [n × 2M]
  std::vector<Var> recon;    // n × [T × K × F × 2]
};

class CatModel {
 public:
  /// Xavier-uniform weights (bound √(6/(fan_in+fan_out))), zero biases, unit
  /// norm gains; fully determined by `seed`.
  static CatModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CatModel m(cfg);
    Rng rng(seed);
    m.build(rng);
    m.check_positional_distinctness();
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  const ParamLayout& layout() const { return layout_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  Parameter& parameter(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw ValidationError("no parameter named " + name);
  }

  /// Places every parameter on `tape` as a gradient-collecting leaf.
  std::vector<Var> bind(Tape& tape) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.parameter(p.value));
    return vars;
  }

  /// Splits x [T × K × F × 2] into per-channel patch matrices [T × K·F].
  std::pair<Tensor, Tensor> patch_matrices(const Tensor& x) const {
    check_input(x);
    const std::size_t T = x.dim(0), P = cfg_.patch_dim();
    Tensor mel({T, P}), raw({T, P});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < P; ++i) {
        mel[t * P + i] = x[(t * P + i) * 2];
        raw[t * P + i] = x[(t * P + i) * 2 + 1];
      }
    return {std::move(mel), std::move(raw)};
  }

  /// Token streams before positional embedding: ξ_c · vec(x[t, :, :, c]) + b_c.
  StreamPair patchify(Tape& tape, const std::vector<Var>& p, const Tensor& x) const {
    auto [mel, raw] = patch_matrices(x);
    Var vm = tape.constant(std::move(mel)), vr = tape.constant(std::move(raw));
    return {add_bias(matmul(vm, p[layout_.embed_w[0]]), p[layout_.embed_b[0]]),
            add_bias(matmul(vr, p[layout_.embed_w[1]]), p[layout_.embed_b[1]])};
  }

  /// Additive embedding for T frames, [T × M]:
  /// Σ_k g([pe1(t), onehot(k)]) + pe2 = [K·pe1(t), 1_K] · G + K·b_g + pe2.
  Var positional_embedding(Tape& tape, const std::vector<Var>& p, std::size_t T) const {
    const std::size_t K = cfg_.resolutions, D = cfg_.time_embed_dim, M = cfg_.width;
    Tensor in({T, D + K});
    for (std::size_t t = 0; t < T; ++t) {
      const auto pe1 = sinusoid(static_cast<double>(t), D);
      for (std::size_t i = 0; i < D; ++i) in[t * (D + K) + i] = static_cast<double>(K) * pe1[i];
      for (std::size_t k = 0; k < K; ++k) in[t * (D + K) + D + k] = 1.0;
    }
    const Tensor pe2 = feature_sinusoid(M);
    Tensor pe2_rows({T, M});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t m = 0; m < M; ++m) pe2_rows[t * M + m] = pe2[m];
    Var g = add_bias(matmul(tape.constant(std::move(in)), p[layout_.pe_g_w]), scale(p[layout_.pe_g_b], static_cast<double>(K)));
    return add(g, tape.constant(std::move(pe2_rows)));
  }

  /// Per-(t, k) embedding before the sum over k, evaluated on current weights: [T·K × M].
  Tensor positional_table(std::size_t T) const {
    const std::size_t K = cfg_.resolutions, D = cfg_.time_embed_dim, M = cfg_.width;
    const Tensor& G = params_[layout_.pe_g_w].value;
    const Tensor& bg = params_[layout_.pe_g_b].value;
    const Tensor pe2 = feature_sinusoid(M);
    Tensor out({T * K, M});
    for (std::size_t t = 0; t < T; ++t) {
      const auto pe1 = sinusoid(static_cast<double>(t), D);
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t m = 0; m < M; ++m) {
          double s = bg[m] + pe2[m] + G[(D + k) * M + m];
          for (std::size_t i = 0; i < D; ++i) s += pe1[i] * G[i * M + m];
          out[(t * K + k) * M + m] = s;
        }
    }
    return out;
  }

  /// Attention outputs (without residual) for both streams of one block.
  StreamPair attention(const std::vector<Var>& p, std::size_t layer, StreamPair in, AttentionTrace* trace) const {
    const auto& b = layout_.blocks.at(layer);
    const std::size_t M = cfg_.width, half = M / 2, dh = cfg_.head_dim(), H = cfg_.heads;
    const std::size_t T = in.mel.value().dim(0);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<std::uint8_t> mask;
    const bool local = cfg_.kernel == AttentionKernel::local && cfg_.window_len < T;
    if (local) mask = local_window_mask(T, cfg_.window_len);

    Var outs[2];
    for (std::size_t c = 0; c < 2; ++c) {
      Var x = c == 0 ? in.mel : in.raw;
      const std::size_t lo = c * half, hi = lo + half;
      Var q = add_bias(matmul(x, slice_cols(p[b.q_w], lo, hi)), slice_rows(reshape(p[b.q_b], {M, 1}), lo, hi));
      Var k = add_bias(matmul(x, slice_cols(p[b.k_w], lo, hi)), slice_rows(reshape(p[b.k_b], {M, 1}), lo, hi));
      Var v = add_bias(matmul(x, slice_cols(p[b.v_w], lo, hi)), slice_rows(reshape(p[b.v_b], {M, 1}), lo, hi));
      std::vector<Var> head_out;
      for (std::size_t h = 0; h < H / 2; ++h) {
        Var qh = slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = slice_cols(v, h * dh, (h + 1) * dh);
        Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        Var w = local ? masked_softmax_rows(scores, mask) : softmax(scores, 1);
        if (trace) trace->heads.push_back({layer, c * (H / 2) + h, c, w.value()});
        head_out.push_back(matmul(w, vh));
      }
      Var cat = head_out.size() == 1 ? head_out[0] : concat_cols(head_out);
      outs[c] = add_bias(matmul(cat, slice_rows(p[b.out_w], lo, hi)), p[b.out_b]);
    }
    return {outs[0], outs[1]};
  }

  /// Residual acoustic attention: tokens + attention(tokens).
  StreamPair acoustic_attention_forward(const std::vector<Var>& p, std::size_t layer, StreamPair tokens,
                                        AttentionTrace* trace = nullptr) const {
    StreamPair d = attention(p, layer, tokens, trace);
    return {add(tokens.mel, d.mel), add(tokens.raw, d.raw)};
  }

  /// Pre-norm block: x + attn(LN1 x), then x + FFN(LN2 x).
  StreamPair block_forward(const std::vector<Var>& p, std::size_t layer, StreamPair x, AttentionTrace* trace) const {
    const auto& b = layout_.blocks.at(layer);
    const double eps = cfg_.ln_eps;
    StreamPair n{layer_norm(x.mel, p[b.ln1_gain], p[b.ln1_bias], eps), layer_norm(x.raw, p[b.ln1_gain], p[b.ln1_bias], eps)};
    StreamPair d = attention(p, layer, n, trace);
    x = {add(x.mel, d.mel), add(x.raw, d.raw)};
    auto ffn = [&](Var v) {
      Var h = layer_norm(v, p[b.ln2_gain], p[b.ln2_bias], eps);
      h = gelu(add_bias(matmul(h, p[b.ffn_in_w]), p[b.ffn_in_b]));
      return add(v, add_bias(matmul(h, p[b.ffn_out_w]), p[b.ffn_out_b]));
    };
    return {ffn(x.mel), ffn(x.raw)};
  }

  /// Token streams after all blocks and the final norm.
  StreamPair encode_tokens(Tape& tape, const std::vector<Var>& p, const Tensor& x, AttentionTrace* trace = nullptr) const {
    StreamPair s = patchify(tape, p, x);
    Var pe = positional_embedding(tape, p, x.dim(0));
    s = {add(s.mel, pe), add(s.raw, pe)};
    for (std::size_t l = 0; l < cfg_.layers; ++l) s = block_forward(p, l, s, trace);
    const double eps = cfg_.ln_eps;
    return {layer_norm(s.mel, p[layout_.final_gain], p[layout_.final_bias], eps),
            layer_norm(s.raw, p[layout_.final_gain], p[layout_.final_bias], eps)};
  }

  SampleOutput encode(Tape& tape, const std::vector<Var>& p, const Tensor& x, AttentionTrace* trace = nullptr) const {
    StreamPair s = encode_tokens(tape, p, x, trace);
    Var z = concat_cols({mean_rows(s.mel), mean_rows(s.raw)});
    Var frames = concat_cols({s.mel, s.raw});
    Var r = add_bias(matmul(frames, p[layout_.recon_w]), p[layout_.recon_b]);
    return {z, reshape(r, x.shape())};
  }

  /// Classifier head on latents z [n × 2M] → logits [n × classes].
  Var classify(const std::vector<Var>& p, Var z) const {
    return add_bias(matmul(z, p[layout_.head_w]), p[layout_.head_b]);
  }

  BatchOutput forward(Tape& tape, const std::vector<Var>& p, std::span<const Tensor> xs,
                      AttentionTrace* trace = nullptr) const {
    if (xs.empty()) throw ContractError("forward: empty batch");
    BatchOutput out;
    std::vector<Var> zs;
    for (const Tensor& x : xs) {
      SampleOutput s = encode(tape, p, x, trace);
      zs.push_back(s.z);
      out.recon.push_back(s.recon);
    }
    out.z = zs.size() == 1 ? zs[0] : concat_rows(zs);
    out.logits = classify(p, out.z);
    return out;
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.resolutions || x.dim(2) != cfg_.bands || x.dim(3) != 2) {
      throw DimensionError("model expects features [T x " + std::to_string(cfg_.resolutions) + " x " +
                           std::to_string(cfg_.bands) + " x 2], got " + shape_str(x.shape()));
    }
  }

 private:
  explicit CatModel(ModelConfig cfg) : cfg_(std::move(cfg)) {}

  std::size_t add_param(std::string name, Shape shape) {
    params_.push_back({std::move(name), Tensor(std::move(shape))});
    return params_.size() - 1;
  }

  void xavier(std::size_t idx, Rng& rng) {
    Tensor& t = params_[idx].value;
    const double bound = std::sqrt(6.0 / static_cast<double>(t.dim(0) + t.dim(1)));
    for (double& v : t.storage()) v = rng.uniform(-bound, bound);
  }

  void ones(std::size_t idx) {
    for (double& v : params_[idx].value.storage()) v = 1.0;
  }

  void build(Rng& rng) {
    const std::size_t M = cfg_.width, P = cfg_.patch_dim(), D = cfg_.time_embed_dim, hidden = cfg_.ffn_mult * M;
    const char* chan[2] = {"mel", "raw"};
    for (int c = 0; c < 2; ++c) {
      layout_.embed_w[c] = add_param(std::string("embed.") + chan[c] + ".weight", {P, M});
      layout_.embed_b[c] = add_param(std::string("embed.") + chan[c] + ".bias", {M});
    }
    layout_.pe_g_w = add_param("pe.g.weight", {D + cfg_.resolutions, M});
    layout_.pe_g_b = add_param("pe.g.bias", {M});
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string pre = "block" + std::to_string(l) + ".";
      ParamLayout::Block b{};
      b.ln1_gain = add_param(pre + "ln1.gain", {M});
      b.ln1_bias = add_param(pre + "ln1.bias", {M});
      b.q_w = add_param(pre + "attn.q.weight", {M, M});
      b.q_b = add_param(pre + "attn.q.bias", {M});
      b.k_w = add_param(pre + "attn.k.weight", {M, M});
      b.k_b = add_param(pre + "attn.k.bias", {M});
      b.v_w = add_param(pre + "attn.v.weight", {M, M});
      b.v_b = add_param(pre + "attn.v.bias", {M});
      b.out_w = add_param(pre + "attn.out.weight", {M, M});
      b.out_b = add_param(pre + "attn.out.bias", {M});
      b.ln2_gain = add_param(pre + "ln2.gain", {M});
      b.ln2_bias = add_param(pre + "ln2.bias", {M});
      b.ffn_in_w = add_param(pre + "ffn.in.weight", {M, hidden});
      b.ffn_in_b = add_param(pre + "ffn.in.bias", {hidden});
      b.ffn_out_w = add_param(pre + "ffn.out.weight", {hidden, M});
      b.ffn_out_b = add_param(pre + "ffn.out.bias", {M});
      layout_.blocks.push_back(b);
    }
    layout_.final_gain = add_param("final_ln.gain", {M});
    layout_.final_bias = add_param("final_ln.bias", {M});
    layout_.head_w = add_param("head.weight", {cfg_.latent_dim(), cfg_.classes});
    layout_.head_b = add_param("head.bias", {cfg_.classes});
    layout_.recon_w = add_param("recon.weight", {cfg_.latent_dim(), 2 * P});
    layout_.recon_b = add_param("recon.bias", {2 * P});

    // Rank-2 tensors are weights; gains start at 1; everything else is a zero bias.
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const std::string& n = params_[i].name;
      if (params_[i].value.rank() == 2) {
        xavier(i, rng);
      } else if (n.size() >= 5 && n.compare(n.size() - 5, 5, ".gain") == 0) {
        ones(i);
      }
    }
  }

  void check_positional_distinctness() const {
    const Tensor table = positional_table(cfg_.frames);
    const std::size_t n = table.dim(0), M = table.dim(1);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) {
        double diff = 0.0;
        for (std::size_t m = 0; m < M; ++m) diff = std::max(diff, std::abs(table[a * M + m] - table[b * M + m]));
        if (diff <= 1e-6) {
          throw ValidationError("positional embedding: (t,k) pairs " + std::to_string(a) + " and " + std::to_string(b) +
                                " coincide");
        }
      }
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  ParamLayout layout_;
};

// Checkpoint: "CATC", u32 version=1, u32 tensor count, then per tensor
// (u32 name length, UTF-8 name, u32 rank, rank × u32 dims), then every
// tensor's data as little-endian float64 in manifest order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<Parameter>& params) {
  std::vector<std::uint8_t> out;
  io::put_bytes(out, "CATC");
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    io::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    io::put_bytes(out, p.name);
    io::put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) io::put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& p : params)
    for (double v : p.value.data()) io::put_f64(out, v);
  return out;
}

/// Decodes a checkpoint without reference to any model.
inline std::vector<Parameter> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::Reader r(bytes, "checkpoint");
  if (bytes.size() < 4 || r.bytes(4) != "CATC") throw FormatError("checkpoint: bad magic (expected CATC)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    std::string name = r.bytes(len);
    const std::uint32_t rank = r.u32();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim == 0) throw FormatError("checkpoint: tensor " + name + " has a zero dimension");
      shape.push_back(dim);
    }
    manifest.emplace_back(std::move(name), std::move(shape));
  }
  std::vector<Parameter> params;
  for (auto& [name, shape] : manifest) {
    const std::size_t n = shape_size(shape);
    r.need(8 * n);
    std::vector<double> data(n);
    for (double& v : data) v = r.f64();
    params.push_back({name, Tensor(shape, std::move(data))});
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
  return params;
}

/// Loads tensors into `model`, requiring the same names, order, and shapes.
inline void load_checkpoint_into(CatModel& model, const std::vector<std::uint8_t>& bytes) {
  std::vector<Parameter> loaded = decode_checkpoint(bytes);
  auto& params = model.parameters();
  if (loaded.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(loaded.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (loaded[i].name != params[i].name) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " is '" + loaded[i].name + "', model expects '" +
                        params[i].name + "'");
    }
    if (loaded[i].value.shape() != params[i].value.shape()) {
      throw FormatError("checkpoint tensor '" + params[i].name + "' has shape " + shape_str(loaded[i].value.shape()) +
                        ", model expects " + shape_str(params[i].value.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].value = std::move(loaded[i].value);
}

inline void save_checkpoint(const std::filesystem::path& path, const CatModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot create " + path.string());
  io::write_all(out, encode_checkpoint(model.parameters()));
}

inline void load_checkpoint(const std::filesystem::path& path, CatModel& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  load_checkpoint_into(model, io::read_all(in));
}

}  // namespace cat
