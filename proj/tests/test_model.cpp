#include <gtest/gtest.h>

#include <cmath>

#include "cat/model.hpp"
#include "cat/random.hpp"

using namespace cat;

namespace {

ModelConfig small_config(std::size_t T = 5) {
  ModelConfig c;
  c.frames = T;
  c.resolutions = 2;
  c.bands = 4;
  c.width = 8;
  c.heads = 4;
  c.layers = 2;
  c.classes = 3;
  c.time_embed_dim = 6;
  return c;
}

Tensor random_features(const ModelConfig& c, std::size_t T, Rng& rng) {
  Tensor x({T, c.resolutions, c.bands, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(0.0, 2.0);
  return x;
}

Tensor random_matrix(std::size_t m, std::size_t n, Rng& rng) {
  Tensor t({m, n});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

// Randomizes every parameter, biases included, so oracles see nonzero terms.
void scramble(CatModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : m.parameters())
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = rng.uniform(-0.5, 0.5);
}

// Per-head loop oracle for one stream's attention output (no residual).
Tensor attention_oracle(const CatModel& m, std::size_t layer, const Tensor& x, std::size_t c,
                        const std::vector<std::uint8_t>* mask) {
  const auto& cfg = m.config();
  const auto& b = m.layout().blocks[layer];
  const auto& P = m.parameters();
  const std::size_t T = x.dim(0), M = cfg.width, dh = cfg.head_dim(), hh = cfg.heads / 2;
  auto proj = [&](std::size_t w, std::size_t bias, std::size_t t, std::size_t col) {
    double s = P[bias].value[col];
    for (std::size_t i = 0; i < M; ++i) s += x.at(t, i) * P[w].value[i * M + col];
    return s;
  };
  Tensor out({T, M});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < M; ++j) out.at(t, j) = P[b.out_b].value[j];
  for (std::size_t h = 0; h < hh; ++h) {
    const std::size_t c0 = c * (M / 2) + h * dh;
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> s(T, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < T; ++j) {
        if (mask && !(*mask)[i * T + j]) continue;
        double d = 0.0;
        for (std::size_t e = 0; e < dh; ++e) d += proj(b.q_w, b.q_b, i, c0 + e) * proj(b.k_w, b.k_b, j, c0 + e);
        s[j] = d / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& v : s) z += (v = std::isinf(v) ? 0.0 : std::exp(v - mx));
      std::vector<double> head(dh, 0.0);
      for (std::size_t j = 0; j < T; ++j)
        for (std::size_t e = 0; e < dh; ++e) head[e] += s[j] / z * proj(b.v_w, b.v_b, j, c0 + e);
      for (std::size_t e = 0; e < dh; ++e)
        for (std::size_t o = 0; o < M; ++o) out.at(i, o) += head[e] * P[b.out_w].value[(c0 + e) * M + o];
    }
  }
  return out;
}

}  // namespace

TEST(ModelConfig, ValidationNamesConstraint) {
  ModelConfig c = small_config();
  c.heads = 3;
  try {
    c.validate();
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("even"), std::string::npos);
  }
  c = small_config();
  c.width = 10;
  EXPECT_THROW(CatModel::init(c, 1), ValidationError);
}

TEST(Init, DeterministicPerSeedAndXavierBounded) {
  const auto a = CatModel::init(small_config(), 5), b = CatModel::init(small_config(), 5);
  const auto c = CatModel::init(small_config(), 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
    differs = differs || !(a.parameters()[i].value == c.parameters()[i].value);
    const Tensor& v = a.parameters()[i].value;
    if (v.rank() == 2) {
      const double bound = std::sqrt(6.0 / static_cast<double>(v.dim(0) + v.dim(1)));
      for (double x : v.data()) EXPECT_LE(std::abs(x), bound);
    } else {
      const bool gain = a.parameters()[i].name.find(".gain") != std::string::npos;
      for (double x : v.data()) EXPECT_EQ(x, gain ? 1.0 : 0.0);
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Patchify, LoopOracleAndZeroInput) {
  Rng rng(1);
  auto m = CatModel::init(small_config(), 2);
  scramble(m, 3);
  const Tensor x = random_features(m.config(), 5, rng);
  Tape t;
  const auto p = m.bind(t);
  const StreamPair s = m.patchify(t, p, x);
  const auto& L = m.layout();
  const std::size_t K = 2, F = 4, M = 8;
  for (std::size_t c = 0; c < 2; ++c) {
    const Tensor& tok = c == 0 ? s.mel.value() : s.raw.value();
    const Tensor& W = m.parameters()[L.embed_w[c]].value;
    const Tensor& B = m.parameters()[L.embed_b[c]].value;
    for (std::size_t tt = 0; tt < 5; ++tt)
      for (std::size_t o = 0; o < M; ++o) {
        double ref = B[o];
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t f = 0; f < F; ++f) ref += x[((tt * K + k) * F + f) * 2 + c] * W[(k * F + f) * M + o];
        EXPECT_NEAR(tok.at(tt, o), ref, 1e-12);
      }
  }
  auto fresh = CatModel::init(small_config(), 2);
  Tape t2;
  const auto p2 = fresh.bind(t2);
  const StreamPair z = fresh.patchify(t2, p2, Tensor({5, 2, 4, 2}));
  for (double v : z.mel.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(fresh.patchify(t2, p2, Tensor({5, 3, 4, 2})), DimensionError);
}

TEST(Patchify, IdentityProjectionCopiesValues) {
  ModelConfig c = small_config(1);
  c.resolutions = 1;
  c.bands = 2;
  c.width = 2;
  c.heads = 2;
  auto m = CatModel::init(c, 1);
  m.parameter("embed.mel.weight").value = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor x({1, 1, 2, 2}, {0.3, 9.0, 0.7, 9.0});
  Tape t;
  const auto p = m.bind(t);
  const Tensor tok = m.patchify(t, p, x).mel.value();
  EXPECT_EQ(tok[0], 0.3);
  EXPECT_EQ(tok[1], 0.7);
}

TEST(Positional, DistinctAtDefaultConfig) {
  const auto m = CatModel::init(ModelConfig{}, 1);
  Tape t;
  const auto p = m.bind(t);
  const Tensor pe = m.positional_embedding(t, p, 100).value();
  const std::size_t M = m.config().width;
  for (std::size_t a = 0; a < 100; ++a)
    for (std::size_t b = a + 1; b < 100; ++b) {
      double d = 0.0;
      for (std::size_t j = 0; j < M; ++j) d = std::max(d, std::abs(pe.at(a, j) - pe.at(b, j)));
      ASSERT_GT(d, 1e-6) << a << " vs " << b;
    }
}

TEST(Positional, SingleResolutionAndZeroedG) {
  ModelConfig c = small_config();
  c.resolutions = 1;
  auto m = CatModel::init(c, 4);
  scramble(m, 9);
  Tape t;
  auto p = m.bind(t);
  const Tensor pe = m.positional_embedding(t, p, 5).value();
  const Tensor& G = m.parameter("pe.g.weight").value;
  const Tensor& bg = m.parameter("pe.g.bias").value;
  const Tensor pe2 = feature_sinusoid(c.width);
  for (std::size_t tt = 0; tt < 5; ++tt) {
    const auto s = sinusoid(static_cast<double>(tt), c.time_embed_dim);
    for (std::size_t j = 0; j < c.width; ++j) {
      double ref = bg[j] + pe2[j] + G[c.time_embed_dim * c.width + j];
      for (std::size_t i = 0; i < c.time_embed_dim; ++i) ref += s[i] * G[i * c.width + j];
      EXPECT_NEAR(pe.at(tt, j), ref, 1e-12);
    }
  }
  for (auto* name : {"pe.g.weight", "pe.g.bias"}) {
    auto& v = m.parameter(name).value;
    v = Tensor::zeros(v.shape());
  }
  Tape t2;
  p = m.bind(t2);
  const Tensor flat = m.positional_embedding(t2, p, 5).value();
  for (std::size_t tt = 0; tt < 5; ++tt)
    for (std::size_t j = 0; j < c.width; ++j) EXPECT_EQ(flat.at(tt, j), pe2[j]);
}

TEST(Attention, MatchesLoopOracleAndRowsSumToOne) {
  Rng rng(5);
  auto m = CatModel::init(small_config(6), 1);
  scramble(m, 7);
  const Tensor a = random_matrix(6, 8, rng), b = random_matrix(6, 8, rng);
  Tape t;
  const auto p = m.bind(t);
  AttentionTrace trace;
  const StreamPair out = m.attention(p, 1, {t.constant(a), t.constant(b)}, &trace);
  EXPECT_LE(max_abs_diff(out.mel.value(), attention_oracle(m, 1, a, 0, nullptr)), 1e-10);
  EXPECT_LE(max_abs_diff(out.raw.value(), attention_oracle(m, 1, b, 1, nullptr)), 1e-10);
  ASSERT_EQ(trace.heads.size(), 4u);
  for (const auto& h : trace.heads)
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) s += h.weights.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Attention, StreamsAreIsolated) {
  Rng rng(6);
  auto m = CatModel::init(small_config(6), 1);
  scramble(m, 8);
  const Tensor a = random_matrix(6, 8, rng), b = random_matrix(6, 8, rng), b2 = random_matrix(6, 8, rng);
  Tape t;
  const auto p = m.bind(t);
  const StreamPair o1 = m.attention(p, 0, {t.constant(a), t.constant(b)}, nullptr);
  const StreamPair o2 = m.attention(p, 0, {t.constant(a), t.constant(b2)}, nullptr);
  EXPECT_EQ(o1.mel.value(), o2.mel.value());
  EXPECT_FALSE(o1.raw.value() == o2.raw.value());
  // Gradient of the mel output never reaches raw-stream projection columns.
  Var rawv = t.parameter(b);
  const StreamPair o3 = m.attention(p, 0, {t.constant(a), rawv}, nullptr);
  t.backward(sum(o3.mel));
  const Tensor g = t.grad(rawv);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, SingleTokenAndIdenticalKeys) {
  Rng rng(2);
  auto m = CatModel::init(small_config(1), 1);
  scramble(m, 4);
  Tape t;
  const auto p = m.bind(t);
  const Tensor x = random_matrix(1, 8, rng);
  AttentionTrace tr;
  const StreamPair o = m.attention(p, 0, {t.constant(x), t.constant(x)}, &tr);
  for (const auto& h : tr.heads) EXPECT_EQ(h.weights[0], 1.0);
  EXPECT_LE(max_abs_diff(o.mel.value(), attention_oracle(m, 0, x, 0, nullptr)), 1e-12);

  auto k = CatModel::init(small_config(4), 1);
  scramble(k, 4);
  auto& kw = k.parameter("block0.attn.k.weight").value;
  kw = Tensor::zeros(kw.shape());
  Tape t2;
  const auto p2 = k.bind(t2);
  const Tensor y = random_matrix(4, 8, rng);
  AttentionTrace tr2;
  k.attention(p2, 0, {t2.constant(y), t2.constant(y)}, &tr2);
  for (const auto& h : tr2.heads)
    for (double w : h.weights.data()) EXPECT_NEAR(w, 0.25, 1e-15);
}

TEST(LocalKernel, MaskConstruction) {
  const auto mask = local_window_mask(8, 4);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(mask[i * 8 + j], (i < 4) == (j < 4) ? 1 : 0);
  const auto all = local_window_mask(5, 9);
  for (auto v : all) EXPECT_EQ(v, 1);
}

TEST(LocalKernel, WindowCasesAgainstOracle) {
  Rng rng(3);
  ModelConfig c = small_config(8);
  c.kernel = AttentionKernel::local;
  const Tensor a = random_matrix(8, 8, rng);

  // w = T matches the global kernel.
  c.window_len = 8;
  auto loc = CatModel::init(c, 1);
  scramble(loc, 2);
  ModelConfig g = c;
  g.kernel = AttentionKernel::global;
  auto glob = CatModel::init(g, 1);
  scramble(glob, 2);
  Tape t;
  auto pl = loc.bind(t), pg = glob.bind(t);
  EXPECT_LE(max_abs_diff(loc.attention(pl, 0, {t.constant(a), t.constant(a)}, nullptr).mel.value(),
                         glob.attention(pg, 0, {t.constant(a), t.constant(a)}, nullptr).mel.value()),
            1e-12);

  // w = 4 gives two 4×4 blocks; w = 1 is self-attention only.
  for (std::size_t w : {4u, 1u}) {
    c.window_len = w;
    auto m = CatModel::init(c, 1);
    scramble(m, 2);
    Tape t2;
    const auto p = m.bind(t2);
    AttentionTrace tr;
    const StreamPair o = m.attention(p, 0, {t2.constant(a), t2.constant(a)}, &tr);
    const auto mask = local_window_mask(8, w);
    EXPECT_LE(max_abs_diff(o.mel.value(), attention_oracle(m, 0, a, 0, &mask)), 1e-10);
    for (const auto& h : tr.heads)
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
          if (i / w != j / w) EXPECT_EQ(h.weights.at(i, j), 0.0);
          if (w == 1) EXPECT_EQ(h.weights.at(i, j), i == j ? 1.0 : 0.0);
        }
  }
}

TEST(Block, ZeroOutputProjectionsGiveIdentity) {
  Rng rng(8);
  auto m = CatModel::init(small_config(5), 1);
  scramble(m, 3);
  for (auto* n : {"block0.attn.out.weight", "block0.attn.out.bias", "block0.ffn.out.weight", "block0.ffn.out.bias"}) {
    auto& v = m.parameter(n).value;
    v = Tensor::zeros(v.shape());
  }
  const Tensor a = random_matrix(5, 8, rng), b = random_matrix(5, 8, rng);
  Tape t;
  const auto p = m.bind(t);
  const StreamPair o = m.block_forward(p, 0, {t.constant(a), t.constant(b)}, nullptr);
  EXPECT_EQ(o.mel.value(), a);
  EXPECT_EQ(o.raw.value(), b);
}

TEST(Forward, ShapesDeterminismAndHeadPermutation) {
  Rng rng(10);
  auto m = CatModel::init(small_config(5), 1);
  scramble(m, 5);
  const Tensor x = random_features(m.config(), 7, rng);  // T may differ from config.frames
  const std::vector<Tensor> xs{x, x};
  Tape t;
  const auto p = m.bind(t);
  const BatchOutput o = m.forward(t, p, xs);
  EXPECT_EQ(o.logits.value().shape(), (Shape{2, 3}));
  EXPECT_EQ(o.z.value().shape(), (Shape{2, 16}));
  EXPECT_EQ(o.recon[0].value().shape(), x.shape());
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(o.logits.value().at(0, j), o.logits.value().at(1, j));
  EXPECT_EQ(o.recon[0].value(), o.recon[1].value());

  // Swapping head columns 0 and 2 swaps the logits.
  auto& hw = m.parameter("head.weight").value;
  auto& hb = m.parameter("head.bias").value;
  for (std::size_t r = 0; r < hw.dim(0); ++r) std::swap(hw[r * 3], hw[r * 3 + 2]);
  std::swap(hb[0], hb[2]);
  Tape t2;
  const auto p2 = m.bind(t2);
  const BatchOutput s = m.forward(t2, p2, xs);
  EXPECT_EQ(s.logits.value().at(0, 0), o.logits.value().at(0, 2));
  EXPECT_EQ(s.logits.value().at(0, 2), o.logits.value().at(0, 0));
  EXPECT_EQ(s.logits.value().at(0, 1), o.logits.value().at(0, 1));
}

TEST(Reconstruction, PerFrameLinearMap) {
  Rng rng(12);
  auto m = CatModel::init(small_config(4), 1);
  scramble(m, 6);
  const Tensor x = random_features(m.config(), 4, rng);
  Tape t;
  const auto p = m.bind(t);
  const StreamPair s = m.encode_tokens(t, p, x);
  const SampleOutput o = m.encode(t, p, x);
  const Tensor& W = m.parameter("recon.weight").value;
  const Tensor& B = m.parameter("recon.bias").value;
  const std::size_t M = 8, out = W.dim(1);
  for (std::size_t tt = 0; tt < 4; ++tt)
    for (std::size_t o2 = 0; o2 < out; ++o2) {
      double ref = B[o2];
      for (std::size_t j = 0; j < M; ++j) {
        ref += s.mel.value().at(tt, j) * W[j * out + o2];
        ref += s.raw.value().at(tt, j) * W[(M + j) * out + o2];
      }
      EXPECT_NEAR(o.recon.value()[tt * out + o2], ref, 1e-12);
    }
}

TEST(Checkpoint, RoundTripAndValidation) {
  auto m = CatModel::init(small_config(), 3);
  const auto bytes = encode_checkpoint(m.parameters());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CATC");
  auto n = CatModel::init(small_config(), 99);
  load_checkpoint_into(n, bytes);
  EXPECT_EQ(encode_checkpoint(n.parameters()), bytes);
  EXPECT_EQ(encode_checkpoint(decode_checkpoint(bytes)), bytes);

  ModelConfig other = small_config();
  other.classes = 5;
  auto wrong = CatModel::init(other, 1);
  try {
    load_checkpoint_into(wrong, bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("head.weight"), std::string::npos) << e.what();
  }
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}
