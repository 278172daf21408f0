#include <cmath>
#include <doctest.h>

#include "paine/errors.hpp"
#include "paine/networks.hpp"
#include "test_helpers.hpp"

using namespace paine;
using paine::testing::random_vec;

namespace {

PredictorConfig tiny_config() {
  PredictorConfig cfg;
  cfg.prompt_streams = {{3, 4}};
  cfg.attn_blocks = 1;
  cfg.heads = 2;
  cfg.noise_shape = {1, 16, 16};
  cfg.stage_channels = {2, 2, 2, 2};
  cfg.mlp_hidden = {3};
  return cfg;
}

void zero_all_params(PainePredictor& m) {
  for (auto& t : m.params())
    for (auto& v : t.values()) v = 0.0;
}

Mat random_mat(Rng& rng, int rows, int cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (auto& v : m.v) v = rng.normal() * scale;
  return m;
}

// plain-loop conv reference, stride/pad generic, 3x3 kernels
std::vector<double> conv_ref(const std::vector<double>& x, int C, int H, int W,
                             const std::vector<double>& w, const std::vector<double>& b, int Co,
                             int stride, int pad, int& OH, int& OW) {
  OH = (H + 2 * pad - 3) / stride + 1;
  OW = (W + 2 * pad - 3) / stride + 1;
  std::vector<double> out(static_cast<size_t>(Co) * OH * OW, 0.0);
  for (int co = 0; co < Co; ++co)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        double acc = b[static_cast<size_t>(co)];
        for (int ci = 0; ci < C; ++ci)
          for (int a = 0; a < 3; ++a)
            for (int bb = 0; bb < 3; ++bb) {
              const int ih = oh * stride - pad + a;
              const int iw = ow * stride - pad + bb;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += x[(static_cast<size_t>(ci) * H + ih) * W + iw] *
                     w[((static_cast<size_t>(co) * C + ci) * 3 + a) * 3 + bb];
            }
        out[(static_cast<size_t>(co) * OH + oh) * OW + ow] = acc;
      }
  return out;
}

}  // namespace

TEST_SUITE("networks") {

TEST_CASE("config validation") {
  PredictorConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 3;  // does not divide d_tok = 4
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.noise_shape = {1, 8, 16};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.attn_blocks = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("attnpool encoder contracts") {
  PredictorConfig cfg = tiny_config();
  PainePredictor model(cfg, 7);
  Rng rng(3);
  Mat c = random_mat(rng, 3, 4);

  Tensor out = model.prompt_encode_attnpool(0, model.embedding_to_tensor(c));
  CHECK(out.shape() == std::vector<int>{4});

  // permuting token rows leaves the output unchanged
  Mat perm(3, 4);
  const int order[3] = {2, 0, 1};
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 4; ++j) perm.at(r, j) = c.at(order[r], j);
  Tensor out2 = model.prompt_encode_attnpool(0, model.embedding_to_tensor(perm));
  for (int j = 0; j < 4; ++j)
    CHECK(std::fabs(out.values()[static_cast<size_t>(j)] - out2.values()[static_cast<size_t>(j)]) < 1e-12);

  // zero blocks: output equals the summary token's value
  PainePredictor zeroed(cfg, 7);
  zero_all_params(zeroed);
  auto& token = zeroed.stream_params(0).summary_token.values();
  for (size_t i = 0; i < token.size(); ++i) token[i] = 0.25 * static_cast<double>(i + 1);
  Tensor out3 = zeroed.prompt_encode_attnpool(0, zeroed.embedding_to_tensor(c));
  for (int j = 0; j < 4; ++j)
    CHECK(out3.values()[static_cast<size_t>(j)] == doctest::Approx(0.25 * (j + 1)).epsilon(1e-15));

  CHECK_THROWS_AS(model.prompt_encode_attnpool(0, model.embedding_to_tensor(random_mat(rng, 2, 4))),
                  Error);
}

TEST_CASE("pertoken encoder") {
  PredictorConfig cfg = tiny_config();
  cfg.encoder_variant = EncoderVariant::PerTokenScalar;
  PainePredictor model(cfg, 11);
  Rng rng(5);
  Mat c = random_mat(rng, 3, 4);

  // zero-weight MLP: uniform softmax, output is the token mean
  PainePredictor zeroed(cfg, 11);
  zero_all_params(zeroed);
  Tensor out = zeroed.prompt_encode_pertoken(0, zeroed.embedding_to_tensor(c));
  for (int j = 0; j < 4; ++j) {
    const double mean = (c.at(0, j) + c.at(1, j) + c.at(2, j)) / 3.0;
    CHECK(out.values()[static_cast<size_t>(j)] == doctest::Approx(mean).epsilon(1e-14));
  }

  // single token passes through
  PredictorConfig cfg1 = cfg;
  cfg1.prompt_streams = {{1, 4}};
  PainePredictor m1(cfg1, 11);
  Mat single = random_mat(rng, 1, 4);
  Tensor out1 = m1.prompt_encode_pertoken(0, m1.embedding_to_tensor(single));
  for (int j = 0; j < 4; ++j)
    CHECK(out1.values()[static_cast<size_t>(j)] == doctest::Approx(single.at(0, j)).epsilon(1e-14));

  // explicit softmax-weighted-sum oracle
  Tensor got = model.prompt_encode_pertoken(0, model.embedding_to_tensor(c));
  const auto& sp = model.stream_params(0);
  std::vector<double> logits(3);
  for (int r = 0; r < 3; ++r) {
    std::vector<double> h(4);
    for (int j = 0; j < 4; ++j) {
      double acc = sp.mlp_b1.values()[static_cast<size_t>(j)];
      for (int i = 0; i < 4; ++i) acc += c.at(r, i) * sp.mlp_w1.values()[static_cast<size_t>(i) * 4 + j];
      h[static_cast<size_t>(j)] = acc > 0 ? acc : 0;
    }
    double acc = sp.mlp_b2.values()[0];
    for (int i = 0; i < 4; ++i) acc += h[static_cast<size_t>(i)] * sp.mlp_w2.values()[static_cast<size_t>(i)];
    logits[static_cast<size_t>(r)] = acc;
  }
  const double mx = std::max({logits[0], logits[1], logits[2]});
  double z = 0;
  std::vector<double> a(3);
  for (int r = 0; r < 3; ++r) {
    a[static_cast<size_t>(r)] = std::exp(logits[static_cast<size_t>(r)] - mx);
    z += a[static_cast<size_t>(r)];
  }
  for (int j = 0; j < 4; ++j) {
    double expect = 0;
    for (int r = 0; r < 3; ++r) expect += a[static_cast<size_t>(r)] / z * c.at(r, j);
    CHECK(std::fabs(got.values()[static_cast<size_t>(j)] - expect) < 1e-12);
  }
}

TEST_CASE("noise encoder shapes and zero case") {
  PredictorConfig cfg;
  cfg.prompt_streams = {{3, 32}};
  cfg.heads = 16;
  PainePredictor model(cfg, 1);
  Rng rng(8);
  std::vector<double> x = random_vec(rng, 4 * 32 * 32);
  Tensor out = model.noise_encode(model.noise_to_tensor(x));
  CHECK(out.shape() == std::vector<int>{512});

  // zero input with zero biases gives zero output (biases start at zero)
  Tensor zout = model.noise_encode(Tensor::zeros({4, 32, 32}));
  for (double v : zout.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(model.noise_encode(Tensor::zeros({4, 16, 32})), Error);
}

TEST_CASE("noise encoder matches a straight-line reimplementation") {
  PredictorConfig cfg = tiny_config();
  PainePredictor model(cfg, 99);
  Rng rng(13);
  std::vector<double> x = random_vec(rng, 1 * 16 * 16);
  Tensor got = model.noise_encode(model.noise_to_tensor(x));

  std::vector<double> cur = x;
  int C = 1, H = 16, W = 16;
  for (int s = 0; s < 4; ++s) {
    const auto& st = model.noise_stage(s);
    int OH, OW;
    std::vector<double> down =
        conv_ref(cur, C, H, W, st.down_w.values(), st.down_b.values(), 2, 2, 1, OH, OW);
    for (auto& v : down) v = v > 0 ? v : 0;
    int oh2, ow2;
    std::vector<double> r1 =
        conv_ref(down, 2, OH, OW, st.res1_w.values(), st.res1_b.values(), 2, 1, 1, oh2, ow2);
    for (auto& v : r1) v = v > 0 ? v : 0;
    std::vector<double> r2 =
        conv_ref(r1, 2, OH, OW, st.res2_w.values(), st.res2_b.values(), 2, 1, 1, oh2, ow2);
    for (size_t i = 0; i < r2.size(); ++i) {
      const double v = down[i] + r2[i];
      down[i] = v > 0 ? v : 0;
    }
    cur = down;
    C = 2;
    H = OH;
    W = OW;
  }
  CHECK(H == 1);
  CHECK(W == 1);
  for (int c = 0; c < 2; ++c)
    CHECK(std::fabs(got.values()[static_cast<size_t>(c)] - cur[static_cast<size_t>(c)]) < 1e-12);
}

TEST_CASE("score head") {
  PredictorConfig cfg = tiny_config();
  PainePredictor model(cfg, 21);
  Rng rng(2);

  // zero weights: output 0
  PainePredictor zeroed(cfg, 21);
  zero_all_params(zeroed);
  std::vector<Tensor> pv = {Tensor::from({4}, random_vec(rng, 4))};
  Tensor nv = Tensor::from({2}, random_vec(rng, 2));
  CHECK(zeroed.score_head(pv, nv).item() == 0.0);

  // manual affine chain
  Tensor out = model.score_head(pv, nv);
  std::vector<double> cur;
  cur.insert(cur.end(), pv[0].values().begin(), pv[0].values().end());
  cur.insert(cur.end(), nv.values().begin(), nv.values().end());
  const auto& layers = model.head_layers();
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l].first.values();
    const auto& b = layers[l].second.values();
    const int ni = layers[l].first.dim(0), no = layers[l].first.dim(1);
    std::vector<double> next(static_cast<size_t>(no));
    for (int o = 0; o < no; ++o) {
      double acc = b[static_cast<size_t>(o)];
      for (int i = 0; i < ni; ++i) acc += cur[static_cast<size_t>(i)] * w[static_cast<size_t>(i) * no + o];
      next[static_cast<size_t>(o)] = l + 1 < layers.size() ? (acc > 0 ? acc : 0) : acc;
    }
    cur = next;
  }
  CHECK(std::fabs(out.item() - cur[0]) < 1e-12);
  CHECK(std::isfinite(out.item()));

  CHECK_THROWS_AS(model.score_head(pv, Tensor::from({3}, {1, 2, 3})), Error);
}

TEST_CASE("predict masking, distinctness, determinism") {
  PredictorConfig cfg = tiny_config();
  PainePredictor model(cfg, 3);
  Rng rng(17);
  PromptEmbedding emb;
  emb.streams.push_back(random_mat(rng, 3, 4));

  std::vector<double> n1 = random_vec(rng, 256);
  std::vector<double> n2 = random_vec(rng, 256);

  // masked: identical for different noises, and bitwise equal to feeding a
  // zero noise vector through the head
  const double m1 = model.predict(emb, n1, true);
  const double m2 = model.predict(emb, n2, true);
  CHECK(m1 == m2);
  {
    NoGradGuard ng;
    Tensor pvec = model.prompt_encode(0, model.embedding_to_tensor(emb.streams[0]));
    Tensor manual = model.score_head({pvec}, Tensor::zeros({2}));
    CHECK(manual.item() == m1);
  }

  // unmasked: different noises disagree on randomized models; wide enough
  // stages so no model has its whole noise path dead under relu
  int distinct = 0;
  PredictorConfig wide = cfg;
  wide.stage_channels = {8, 8, 8, 8};
  for (uint64_t seed = 0; seed < 10; ++seed) {
    PainePredictor m(wide, 100 + seed);
    if (m.predict(emb, n1, false) != m.predict(emb, n2, false)) ++distinct;
  }
  CHECK(distinct == 10);

  // bitwise determinism
  CHECK(model.predict(emb, n1, false) == model.predict(emb, n1, false));
}

TEST_CASE("predict is permutation-invariant per stream with AttnPool") {
  PredictorConfig cfg = tiny_config();
  PainePredictor model(cfg, 5);
  Rng rng(23);
  Mat c = random_mat(rng, 3, 4);
  std::vector<double> noise = random_vec(rng, 256);

  PromptEmbedding a;
  a.streams.push_back(c);
  Mat perm(3, 4);
  const int order[3] = {1, 2, 0};
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 4; ++j) perm.at(r, j) = c.at(order[r], j);
  PromptEmbedding b;
  b.streams.push_back(perm);
  CHECK(std::fabs(model.predict(a, noise, false) - model.predict(b, noise, false)) < 1e-12);
}

TEST_CASE("parameter count equals stored scalars for randomized configs") {
  Rng rng(31);
  for (int t = 0; t < 10; ++t) {
    PredictorConfig cfg;
    cfg.heads = 2;
    const int streams = 1 + static_cast<int>(rng.below(2));
    for (int s = 0; s < streams; ++s)
      cfg.prompt_streams.push_back(
          {2 + static_cast<int>(rng.below(5)), 4 * (1 + static_cast<int>(rng.below(3)))});
    cfg.attn_blocks = 1 + static_cast<int>(rng.below(2));
    cfg.encoder_variant = rng.below(2) ? EncoderVariant::AttnPool : EncoderVariant::PerTokenScalar;
    cfg.noise_shape = {1 + static_cast<int>(rng.below(3)), 16, 16};
    cfg.stage_channels = {1 + static_cast<int>(rng.below(4)), 1 + static_cast<int>(rng.below(4)),
                          1 + static_cast<int>(rng.below(4)), 1 + static_cast<int>(rng.below(4))};
    cfg.mlp_hidden = {1 + static_cast<int>(rng.below(8)), 1 + static_cast<int>(rng.below(8))};
    const CountBreakdown cb = count_params_flops(cfg);
    PainePredictor model(cfg, 7 + static_cast<uint64_t>(t));
    CHECK(cb.total.params == model.param_scalar_count());
  }
}

TEST_CASE("full paper-scale count matches a per-layer enumeration oracle") {
  PredictorConfig cfg;
  cfg.prompt_streams = {{77, 768}, {77, 1280}};
  cfg.noise_shape = {4, 128, 128};
  const CountBreakdown cb = count_params_flops(cfg);

  int64_t params = 0, flops = 0;
  for (const auto& s : cfg.prompt_streams) {
    const int64_t d = s.d_tok, L = s.tok + 1;
    params += d;  // summary token
    for (int b = 0; b < 2; ++b) {
      params += 2 * d + 2 * d;                      // two layer norms
      params += 4 * (d * d + d);                    // q,k,v,o projections
      params += d * 4 * d + 4 * d + 4 * d * d + d;  // feed-forward
      flops += 4 * (2 * L * d * d);
      flops += 2 * (2 * L * L * d);  // score and value products
      flops += 2 * L * d * 4 * d + 2 * L * 4 * d * d;
    }
  }
  {
    int64_t cin = 4, h = 128, w = 128;
    const int64_t chans[4] = {64, 128, 256, 512};
    for (int s = 0; s < 4; ++s) {
      const int64_t oh = (h + 2 - 3) / 2 + 1, ow = (w + 2 - 3) / 2 + 1;
      params += chans[s] * cin * 9 + chans[s];
      flops += 2 * chans[s] * cin * 9 * oh * ow;
      for (int r = 0; r < 2; ++r) {
        params += chans[s] * chans[s] * 9 + chans[s];
        flops += 2 * chans[s] * chans[s] * 9 * oh * ow;
      }
      cin = chans[s];
      h = oh;
      w = ow;
    }
  }
  {
    int64_t in = 768 + 1280 + 512;
    for (int hdim : {512, 256}) {
      params += in * hdim + hdim;
      flops += 2 * in * hdim;
      in = hdim;
    }
    params += in + 1;
    flops += 2 * in;
  }
  CHECK(cb.total.params == params);
  CHECK(cb.total.flops == flops);

  // two CLIP-like streams at 4x128x128 land within 20% of 55.12M parameters
  CHECK(cb.total.params > static_cast<int64_t>(55.12e6 * 0.8));
  CHECK(cb.total.params < static_cast<int64_t>(55.12e6 * 1.2));
}

TEST_CASE("gradient of predict passes the finite-difference check") {
  PredictorConfig cfg = tiny_config();
  PainePredictor model(cfg, 41);
  Rng rng(6);
  PromptEmbedding emb;
  emb.streams.push_back(random_mat(rng, 3, 4));
  std::vector<double> noise = random_vec(rng, 256);

  auto params = model.params();
  auto set_params = [&](const std::vector<double>& x) {
    size_t off = 0;
    for (auto& t : params) {
      auto& v = t.values();
      std::copy(x.begin() + static_cast<long>(off), x.begin() + static_cast<long>(off + v.size()),
                v.begin());
      off += v.size();
    }
  };
  std::vector<double> x0;
  for (const auto& t : params) x0.insert(x0.end(), t.values().begin(), t.values().end());

  // small loss scale keeps finite-difference noise below the relative floor
  // on exactly-zero-gradient coordinates (key biases, inactive relu paths)
  auto f = [&](const std::vector<double>& x) {
    set_params(x);
    return 1e-3 * model.predict(emb, noise, false);
  };
  auto g = [&](const std::vector<double>& x) {
    set_params(x);
    model.zero_grad();
    std::vector<Tensor> mats = {model.embedding_to_tensor(emb.streams[0])};
    Tensor out = scale(model.predict_node(mats, model.noise_to_tensor(noise), false), 1e-3);
    backward(out);
    std::vector<double> grads;
    for (auto& t : params) {
      const auto& gr = t.grad();
      grads.insert(grads.end(), gr.begin(), gr.end());
    }
    return grads;
  };
  CHECK(grad_check(f, g, x0, 1e-5) < 1e-4);
  set_params(x0);
}

}  // TEST_SUITE
