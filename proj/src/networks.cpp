#include "paine/networks.hpp"

#include <cmath>

#include "paine/errors.hpp"
#include "paine/rng.hpp"

namespace paine {

void PredictorConfig::validate() const {
  if (prompt_streams.empty()) throw_config("config: at least one prompt stream required");
  for (const auto& s : prompt_streams) {
    if (s.tok < 1 || s.d_tok < 1) throw_config("config: stream extents must be positive");
    if (heads < 1 || s.d_tok % heads != 0) throw_config("config: heads must divide every stream d_tok");
  }
  if (attn_blocks < 1) throw_config("config: attn_blocks must be at least 1");
  const auto [c, h, w] = noise_shape;
  if (c < 1) throw_config("config: noise channels must be positive");
  if (h < 16 || w < 16) throw_config("config: noise spatial extents must be at least 16");
  for (int sc : stage_channels)
    if (sc < 1) throw_config("config: stage channels must be positive");
  if (mlp_hidden.empty()) throw_config("config: score head needs at least one hidden width");
  for (int mh : mlp_hidden)
    if (mh < 1) throw_config("config: mlp widths must be positive");
}

int PredictorConfig::score_input_width() const {
  int w = stage_channels[3];
  for (const auto& s : prompt_streams) w += s.d_tok;
  return w;
}

namespace {

Tensor init_linear_weight(int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<double> w(static_cast<size_t>(fan_in) * fan_out);
  for (auto& x : w) x = rng.uniform(-bound, bound);
  return Tensor::from({fan_in, fan_out}, std::move(w), true);
}

// relu-gain bound: variance 2/fan_in. The conv pyramid has no normalization
// layers, so activation scale must survive four downsampling stages.
Tensor init_conv_weight(int co, int ci, int kh, int kw, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(ci * kh * kw));
  std::vector<double> w(static_cast<size_t>(co) * ci * kh * kw);
  for (auto& x : w) x = rng.uniform(-bound, bound);
  return Tensor::from({co, ci, kh, kw}, std::move(w), true);
}

Tensor zeros_param(std::vector<int> shape) { return Tensor::zeros(std::move(shape), true); }

BlockParams init_block(int d, Rng& rng) {
  BlockParams p;
  p.ln1_gamma = Tensor::full({d}, 1.0, true);
  p.ln1_beta = zeros_param({d});
  p.wq = init_linear_weight(d, d, rng);
  p.bq = zeros_param({d});
  p.wk = init_linear_weight(d, d, rng);
  p.bk = zeros_param({d});
  p.wv = init_linear_weight(d, d, rng);
  p.bv = zeros_param({d});
  p.wo = init_linear_weight(d, d, rng);
  p.bo = zeros_param({d});
  p.ln2_gamma = Tensor::full({d}, 1.0, true);
  p.ln2_beta = zeros_param({d});
  p.ff_w1 = init_linear_weight(d, 4 * d, rng);
  p.ff_b1 = zeros_param({4 * d});
  p.ff_w2 = init_linear_weight(4 * d, d, rng);
  p.ff_b2 = zeros_param({d});
  return p;
}

}  // namespace

PainePredictor::PainePredictor(const PredictorConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(Rng::derive(seed, 0x70726564));  // independent of data streams

  streams_.resize(cfg_.prompt_streams.size());
  for (size_t i = 0; i < streams_.size(); ++i) {
    const int d = cfg_.prompt_streams[i].d_tok;
    auto& sp = streams_[i];
    if (cfg_.encoder_variant == EncoderVariant::AttnPool) {
      sp.summary_token = zeros_param({d});
      sp.blocks.reserve(static_cast<size_t>(cfg_.attn_blocks));
      for (int b = 0; b < cfg_.attn_blocks; ++b) sp.blocks.push_back(init_block(d, rng));
    } else {
      sp.mlp_w1 = init_linear_weight(d, d, rng);
      sp.mlp_b1 = zeros_param({d});
      sp.mlp_w2 = init_linear_weight(d, 1, rng);
      sp.mlp_b2 = zeros_param({1});
    }
  }

  noise_stages_.resize(4);
  int cin = cfg_.noise_shape[0];
  for (int s = 0; s < 4; ++s) {
    const int cout = cfg_.stage_channels[static_cast<size_t>(s)];
    auto& st = noise_stages_[static_cast<size_t>(s)];
    st.down_w = init_conv_weight(cout, cin, 3, 3, rng);
    st.down_b = zeros_param({cout});
    st.res1_w = init_conv_weight(cout, cout, 3, 3, rng);
    st.res1_b = zeros_param({cout});
    st.res2_w = init_conv_weight(cout, cout, 3, 3, rng);
    st.res2_b = zeros_param({cout});
    cin = cout;
  }

  int in = cfg_.score_input_width();
  for (int h : cfg_.mlp_hidden) {
    head_.push_back({init_linear_weight(in, h, rng), zeros_param({h})});
    in = h;
  }
  head_.push_back({init_linear_weight(in, 1, rng), zeros_param({1})});
}

std::vector<std::pair<std::string, Tensor>> PainePredictor::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t i = 0; i < streams_.size(); ++i) {
    const std::string prefix = "stream" + std::to_string(i);
    const auto& sp = streams_[i];
    if (cfg_.encoder_variant == EncoderVariant::AttnPool) {
      out.push_back({prefix + ".token", sp.summary_token});
      for (size_t b = 0; b < sp.blocks.size(); ++b) {
        auto named = sp.blocks[b].named(prefix + ".block" + std::to_string(b));
        out.insert(out.end(), named.begin(), named.end());
      }
    } else {
      out.push_back({prefix + ".mlp.w1", sp.mlp_w1});
      out.push_back({prefix + ".mlp.b1", sp.mlp_b1});
      out.push_back({prefix + ".mlp.w2", sp.mlp_w2});
      out.push_back({prefix + ".mlp.b2", sp.mlp_b2});
    }
  }
  for (size_t s = 0; s < noise_stages_.size(); ++s) {
    const std::string prefix = "noise.stage" + std::to_string(s);
    const auto& st = noise_stages_[s];
    out.push_back({prefix + ".down.w", st.down_w});
    out.push_back({prefix + ".down.b", st.down_b});
    out.push_back({prefix + ".res1.w", st.res1_w});
    out.push_back({prefix + ".res1.b", st.res1_b});
    out.push_back({prefix + ".res2.w", st.res2_w});
    out.push_back({prefix + ".res2.b", st.res2_b});
  }
  for (size_t l = 0; l < head_.size(); ++l) {
    const std::string prefix = "head.fc" + std::to_string(l);
    out.push_back({prefix + ".w", head_[l].first});
    out.push_back({prefix + ".b", head_[l].second});
  }
  return out;
}

std::vector<Tensor> PainePredictor::params() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

int64_t PainePredictor::param_scalar_count() const {
  int64_t n = 0;
  for (const auto& t : params()) n += t.numel();
  return n;
}

void PainePredictor::zero_grad() {
  for (auto& t : params()) const_cast<Tensor&>(t).zero_grad();
}

PainePredictor PainePredictor::clone() const {
  PainePredictor out;
  out.cfg_ = cfg_;
  out.streams_.resize(streams_.size());
  for (size_t i = 0; i < streams_.size(); ++i) {
    const auto& src = streams_[i];
    auto& dst = out.streams_[i];
    if (src.summary_token.defined()) dst.summary_token = src.summary_token.clone_detached();
    for (const auto& b : src.blocks) {
      BlockParams nb;
      nb.ln1_gamma = b.ln1_gamma.clone_detached();
      nb.ln1_beta = b.ln1_beta.clone_detached();
      nb.wq = b.wq.clone_detached();
      nb.bq = b.bq.clone_detached();
      nb.wk = b.wk.clone_detached();
      nb.bk = b.bk.clone_detached();
      nb.wv = b.wv.clone_detached();
      nb.bv = b.bv.clone_detached();
      nb.wo = b.wo.clone_detached();
      nb.bo = b.bo.clone_detached();
      nb.ln2_gamma = b.ln2_gamma.clone_detached();
      nb.ln2_beta = b.ln2_beta.clone_detached();
      nb.ff_w1 = b.ff_w1.clone_detached();
      nb.ff_b1 = b.ff_b1.clone_detached();
      nb.ff_w2 = b.ff_w2.clone_detached();
      nb.ff_b2 = b.ff_b2.clone_detached();
      dst.blocks.push_back(std::move(nb));
    }
    if (src.mlp_w1.defined()) {
      dst.mlp_w1 = src.mlp_w1.clone_detached();
      dst.mlp_b1 = src.mlp_b1.clone_detached();
      dst.mlp_w2 = src.mlp_w2.clone_detached();
      dst.mlp_b2 = src.mlp_b2.clone_detached();
    }
  }
  out.noise_stages_.resize(noise_stages_.size());
  for (size_t i = 0; i < noise_stages_.size(); ++i) {
    const auto& src = noise_stages_[i];
    auto& dst = out.noise_stages_[i];
    dst.down_w = src.down_w.clone_detached();
    dst.down_b = src.down_b.clone_detached();
    dst.res1_w = src.res1_w.clone_detached();
    dst.res1_b = src.res1_b.clone_detached();
    dst.res2_w = src.res2_w.clone_detached();
    dst.res2_b = src.res2_b.clone_detached();
  }
  for (const auto& [w, b] : head_) out.head_.push_back({w.clone_detached(), b.clone_detached()});
  return out;
}

Tensor PainePredictor::embedding_to_tensor(const Mat& m) const {
  return Tensor::from({m.rows, m.cols}, m.v);
}

Tensor PainePredictor::noise_to_tensor(const std::vector<double>& noise) const {
  const auto [c, h, w] = cfg_.noise_shape;
  if (static_cast<int64_t>(noise.size()) != static_cast<int64_t>(c) * h * w)
    throw_dim("noise length does not match config noise_shape");
  return Tensor::from({c, h, w}, noise);
}

Tensor PainePredictor::prompt_encode_attnpool(int stream, const Tensor& c) const {
  const auto& spec = cfg_.prompt_streams.at(static_cast<size_t>(stream));
  if (c.shape() != std::vector<int>{spec.tok, spec.d_tok})
    throw_dim("prompt stream shape does not match config");
  const auto& sp = streams_[static_cast<size_t>(stream)];
  Tensor seq = append_row(c, sp.summary_token);
  for (const auto& b : sp.blocks) seq = attention_block(seq, b, cfg_.heads);
  return take_row(seq, spec.tok);  // the appended summary row
}

Tensor PainePredictor::prompt_encode_pertoken(int stream, const Tensor& c) const {
  const auto& spec = cfg_.prompt_streams.at(static_cast<size_t>(stream));
  if (c.shape() != std::vector<int>{spec.tok, spec.d_tok})
    throw_dim("prompt stream shape does not match config");
  const auto& sp = streams_[static_cast<size_t>(stream)];
  Tensor h = relu(add_rowvec(matmul(c, sp.mlp_w1), sp.mlp_b1));
  Tensor logits = add_rowvec(matmul(h, sp.mlp_w2), sp.mlp_b2);  // [tok,1]
  Tensor weights = softmax_rows(reshape(logits, {1, spec.tok}));
  return take_row(matmul(weights, c), 0);  // softmax-weighted token average
}

Tensor PainePredictor::prompt_encode(int stream, const Tensor& c) const {
  return cfg_.encoder_variant == EncoderVariant::AttnPool ? prompt_encode_attnpool(stream, c)
                                                          : prompt_encode_pertoken(stream, c);
}

Tensor PainePredictor::noise_encode(const Tensor& x) const {
  const auto [c, h, w] = cfg_.noise_shape;
  if (x.shape() != std::vector<int>{c, h, w}) throw_dim("noise shape does not match config");
  Tensor cur = x;
  for (const auto& st : noise_stages_) {
    cur = relu(conv2d(cur, st.down_w, st.down_b, 2, 1));
    Tensor r = relu(conv2d(cur, st.res1_w, st.res1_b, 1, 1));
    r = conv2d(r, st.res2_w, st.res2_b, 1, 1);
    cur = relu(add(cur, r));
  }
  return adaptive_max_pool_to_1(cur);
}

Tensor PainePredictor::score_head(const std::vector<Tensor>& prompt_vecs,
                                  const Tensor& noise_vec) const {
  std::vector<Tensor> parts = prompt_vecs;
  parts.push_back(noise_vec);
  Tensor in = concat_vecs(parts);
  if (in.dim(0) != cfg_.score_input_width()) throw_dim("score head input width mismatch");
  Tensor cur = reshape(in, {1, in.dim(0)});
  for (size_t l = 0; l < head_.size(); ++l) {
    cur = add_rowvec(matmul(cur, head_[l].first), head_[l].second);
    if (l + 1 < head_.size()) cur = relu(cur);
  }
  return reshape(cur, {1});
}

Tensor PainePredictor::predict_node(const std::vector<Tensor>& stream_mats, const Tensor& noise,
                                    bool mask_noise) const {
  if (stream_mats.size() != cfg_.prompt_streams.size())
    throw_dim("stream count does not match config");
  std::vector<Tensor> pvecs;
  pvecs.reserve(stream_mats.size());
  for (size_t i = 0; i < stream_mats.size(); ++i)
    pvecs.push_back(prompt_encode(static_cast<int>(i), stream_mats[i]));
  Tensor nvec = mask_noise ? Tensor::zeros({cfg_.stage_channels[3]}) : noise_encode(noise);
  Tensor out = score_head(pvecs, nvec);
  ensure_all_finite(out.values(), "predict");
  return out;
}

double PainePredictor::predict(const PromptEmbedding& streams, const std::vector<double>& noise,
                               bool mask_noise) const {
  NoGradGuard ng;
  std::vector<Tensor> mats;
  mats.reserve(streams.streams.size());
  for (const auto& m : streams.streams) mats.push_back(embedding_to_tensor(m));
  Tensor x = mask_noise ? Tensor::zeros({cfg_.noise_shape[0], cfg_.noise_shape[1], cfg_.noise_shape[2]})
                        : noise_to_tensor(noise);
  return predict_node(mats, x, mask_noise).item();
}

namespace {

ComponentCounts linear_counts(int64_t m, int64_t n) { return {m * n + n, 2 * m * n}; }

ComponentCounts conv_counts(int64_t co, int64_t ci, int64_t kh, int64_t kw, int64_t oh, int64_t ow) {
  return {co * ci * kh * kw + co, 2 * co * ci * kh * kw * oh * ow};
}

void add_to(ComponentCounts& acc, const ComponentCounts& c) {
  acc.params += c.params;
  acc.flops += c.flops;
}

}  // namespace

CountBreakdown count_params_flops(const PredictorConfig& cfg) {
  cfg.validate();
  CountBreakdown out;

  for (const auto& s : cfg.prompt_streams) {
    ComponentCounts sc;
    const int64_t d = s.d_tok;
    if (cfg.encoder_variant == EncoderVariant::AttnPool) {
      const int64_t L = s.tok + 1;  // appended summary token
      sc.params += d;               // the token itself
      for (int b = 0; b < cfg.attn_blocks; ++b) {
        add_to(sc, {2 * d, 0});  // ln1 gamma/beta
        for (int proj = 0; proj < 4; ++proj) {
          auto lin = linear_counts(d, d);
          sc.params += lin.params;
          sc.flops += L * lin.flops;
        }
        sc.flops += 2 * 2 * L * L * d;  // score and value products
        add_to(sc, {2 * d, 0});         // ln2
        auto ff1 = linear_counts(d, 4 * d);
        auto ff2 = linear_counts(4 * d, d);
        sc.params += ff1.params + ff2.params;
        sc.flops += L * (ff1.flops + ff2.flops);
      }
    } else {
      const int64_t L = s.tok;
      auto m1 = linear_counts(d, d);
      auto m2 = linear_counts(d, 1);
      sc.params += m1.params + m2.params;
      sc.flops += L * (m1.flops + m2.flops);
      sc.flops += 2 * L * d;  // weighted token average
    }
    out.per_stream.push_back(sc);
    add_to(out.total, sc);
  }

  {
    auto [c, h, w] = cfg.noise_shape;
    int64_t cin = c;
    int64_t ch = h, cw = w;
    for (int s = 0; s < 4; ++s) {
      const int64_t cout = cfg.stage_channels[static_cast<size_t>(s)];
      const int64_t oh = (ch + 2 - 3) / 2 + 1;
      const int64_t ow = (cw + 2 - 3) / 2 + 1;
      add_to(out.noise_encoder, conv_counts(cout, cin, 3, 3, oh, ow));
      add_to(out.noise_encoder, conv_counts(cout, cout, 3, 3, oh, ow));
      add_to(out.noise_encoder, conv_counts(cout, cout, 3, 3, oh, ow));
      cin = cout;
      ch = oh;
      cw = ow;
    }
    add_to(out.total, out.noise_encoder);
  }

  {
    int64_t in = cfg.score_input_width();
    for (int hdim : cfg.mlp_hidden) {
      add_to(out.score_head, linear_counts(in, hdim));
      in = hdim;
    }
    add_to(out.score_head, linear_counts(in, 1));
    add_to(out.total, out.score_head);
  }

  return out;
}

}  // namespace paine
