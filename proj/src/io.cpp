#include "paine/io.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "paine/digest.hpp"
#include "paine/errors.hpp"

namespace paine {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint16_t kBlobVersion = 1;
constexpr uint8_t kDtypeF32 = 1;
constexpr int kSchemaVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

std::string encode_blob(const TensorBlob& blob) {
  std::string out;
  out.reserve(16 + blob.payload.size() * 4);
  out += "PANT";
  put_u16(out, kBlobVersion);
  out.push_back(static_cast<char>(kDtypeF32));
  out.push_back(static_cast<char>(blob.extents.size()));
  size_t n = 1;
  for (int e : blob.extents) {
    put_u32(out, static_cast<uint32_t>(e));
    n *= static_cast<size_t>(e);
  }
  if (n != blob.payload.size()) throw_usage("blob payload does not match extents");
  for (float v : blob.payload) put_f32(out, v);
  return out;
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  bool eof() const { return pos_ >= data_.size(); }

  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(data_[pos_++]);
  }

  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint8_t>(data_[pos_]) |
                 (static_cast<uint16_t>(static_cast<uint8_t>(data_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(data_[pos_ + static_cast<size_t>(i)])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  void expect_magic() {
    need(4);
    if (data_.compare(pos_, 4, "PANT") != 0)
      throw_data("bad tensor magic in " + path_);
    pos_ += 4;
  }

 private:
  void need(size_t n) {
    if (pos_ + n > data_.size()) throw_data("truncated tensor blob in " + path_);
  }

  const std::string& data_;
  std::string path_;
  size_t pos_ = 0;
};

TensorBlob decode_blob(ByteReader& r, const std::string& path) {
  r.expect_magic();
  const uint16_t version = r.u16();
  if (version != kBlobVersion)
    throw_data("unsupported tensor format version in " + path);
  const uint8_t dtype = r.u8();
  if (dtype != kDtypeF32) throw_data("unsupported dtype code in " + path);
  const uint8_t rank = r.u8();
  TensorBlob blob;
  size_t n = 1;
  for (int i = 0; i < rank; ++i) {
    const uint32_t e = r.u32();
    if (e == 0) throw_data("zero extent in " + path);
    blob.extents.push_back(static_cast<int>(e));
    n *= e;
  }
  blob.payload.resize(n);
  for (size_t i = 0; i < n; ++i) blob.payload[i] = r.f32();
  return blob;
}

std::string read_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_data("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

void write_binary_atomic(const fs::path& path, const std::string& data) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw_data("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw_data("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw_data("cannot rename " + tmp.string() + " to " + path.string());
}

json parse_json(const std::string& text, const std::string& what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw_data("invalid JSON in " + what);
  return j;
}

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc;
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

}  // namespace

void write_blob_file(const fs::path& path, const TensorBlob& blob) {
  write_binary_atomic(path, encode_blob(blob));
}

TensorBlob read_blob_file(const fs::path& path) {
  const std::string data = read_binary(path);
  ByteReader r(data, path.string());
  TensorBlob blob = decode_blob(r, path.string());
  if (!r.eof()) throw_data("trailing bytes after tensor blob in " + path.string());
  return blob;
}

void write_blobs_file(const fs::path& path, const std::vector<TensorBlob>& blobs) {
  std::string data;
  for (const auto& b : blobs) data += encode_blob(b);
  write_binary_atomic(path, data);
}

std::vector<TensorBlob> read_blobs_file(const fs::path& path) {
  const std::string data = read_binary(path);
  ByteReader r(data, path.string());
  std::vector<TensorBlob> out;
  while (!r.eof()) out.push_back(decode_blob(r, path.string()));
  if (out.empty()) throw_data("no tensor blobs in " + path.string());
  return out;
}

TensorBlob to_blob(const std::vector<int>& extents, const std::vector<double>& values) {
  TensorBlob b;
  b.extents = extents;
  b.payload.reserve(values.size());
  for (double v : values) b.payload.push_back(static_cast<float>(v));
  return b;
}

std::vector<double> blob_values(const TensorBlob& blob) {
  std::vector<double> out;
  out.reserve(blob.payload.size());
  for (float v : blob.payload) out.push_back(static_cast<double>(v));
  return out;
}

// ---- config JSON ----

namespace {

json streams_to_json(const std::vector<StreamSpec>& streams) {
  json arr = json::array();
  for (const auto& s : streams) arr.push_back({{"tok", s.tok}, {"d_tok", s.d_tok}});
  return arr;
}

std::vector<StreamSpec> streams_from_json(const json& arr, const std::string& what) {
  if (!arr.is_array() || arr.empty()) throw_data(what + ": streams must be a nonempty array");
  std::vector<StreamSpec> out;
  for (const auto& e : arr) out.push_back({e.at("tok").get<int>(), e.at("d_tok").get<int>()});
  return out;
}

json predictor_to_json_obj(const PredictorConfig& cfg) {
  return json{
      {"streams", streams_to_json(cfg.prompt_streams)},
      {"encoder", cfg.encoder_variant == EncoderVariant::AttnPool ? "attn_pool" : "per_token_scalar"},
      {"attn_blocks", cfg.attn_blocks},
      {"heads", cfg.heads},
      {"noise_shape", {cfg.noise_shape[0], cfg.noise_shape[1], cfg.noise_shape[2]}},
      {"stage_channels",
       {cfg.stage_channels[0], cfg.stage_channels[1], cfg.stage_channels[2], cfg.stage_channels[3]}},
      {"mlp_hidden", cfg.mlp_hidden},
  };
}

PredictorConfig predictor_from_json_obj(const json& j) {
  PredictorConfig cfg;
  cfg.prompt_streams = streams_from_json(j.at("streams"), "predictor config");
  if (j.contains("encoder")) {
    const std::string e = j.at("encoder").get<std::string>();
    if (e == "attn_pool")
      cfg.encoder_variant = EncoderVariant::AttnPool;
    else if (e == "per_token_scalar")
      cfg.encoder_variant = EncoderVariant::PerTokenScalar;
    else
      throw_data("predictor config: unknown encoder variant '" + e + "'");
  }
  if (j.contains("attn_blocks")) cfg.attn_blocks = j.at("attn_blocks").get<int>();
  if (j.contains("heads")) cfg.heads = j.at("heads").get<int>();
  if (j.contains("noise_shape")) {
    const auto ns = j.at("noise_shape");
    if (!ns.is_array() || ns.size() != 3) throw_data("predictor config: noise_shape must have 3 extents");
    for (int i = 0; i < 3; ++i) cfg.noise_shape[static_cast<size_t>(i)] = ns.at(static_cast<size_t>(i)).get<int>();
  }
  if (j.contains("stage_channels")) {
    const auto sc = j.at("stage_channels");
    if (!sc.is_array() || sc.size() != 4) throw_data("predictor config: stage_channels must have 4 widths");
    for (int i = 0; i < 4; ++i)
      cfg.stage_channels[static_cast<size_t>(i)] = sc.at(static_cast<size_t>(i)).get<int>();
  }
  if (j.contains("mlp_hidden")) cfg.mlp_hidden = j.at("mlp_hidden").get<std::vector<int>>();
  return cfg;
}

json oracle_to_json_obj(const OracleConfig& cfg) {
  return json{
      {"prompt_count", cfg.prompt_count},
      {"noises_per_prompt", cfg.noises_per_prompt},
      {"streams", streams_to_json(cfg.streams)},
      {"noise_shape", {cfg.noise_shape[0], cfg.noise_shape[1], cfg.noise_shape[2]}},
      {"label_noise_std", cfg.label_noise_std},
      {"base_mean", cfg.base_mean},
      {"mean_spread", cfg.mean_spread},
      {"sd_base", cfg.sd_base},
      {"sd_spread", cfg.sd_spread},
      {"master_seed", cfg.master_seed},
  };
}

OracleConfig oracle_from_json_obj(const json& j) {
  OracleConfig cfg;
  cfg.prompt_count = j.at("prompt_count").get<int>();
  if (j.contains("noises_per_prompt")) cfg.noises_per_prompt = j.at("noises_per_prompt").get<int>();
  cfg.streams = streams_from_json(j.at("streams"), "oracle config");
  if (j.contains("noise_shape")) {
    const auto ns = j.at("noise_shape");
    if (!ns.is_array() || ns.size() != 3) throw_data("oracle config: noise_shape must have 3 extents");
    for (int i = 0; i < 3; ++i) cfg.noise_shape[static_cast<size_t>(i)] = ns.at(static_cast<size_t>(i)).get<int>();
  }
  if (j.contains("label_noise_std")) cfg.label_noise_std = j.at("label_noise_std").get<double>();
  if (j.contains("base_mean")) cfg.base_mean = j.at("base_mean").get<double>();
  if (j.contains("mean_spread")) cfg.mean_spread = j.at("mean_spread").get<double>();
  if (j.contains("sd_base")) cfg.sd_base = j.at("sd_base").get<double>();
  if (j.contains("sd_spread")) cfg.sd_spread = j.at("sd_spread").get<double>();
  if (j.contains("master_seed")) cfg.master_seed = j.at("master_seed").get<uint64_t>();
  return cfg;
}

json loss_to_json_obj(const LossConfig& cfg) {
  return json{
      {"variant", cfg.variant == LossVariant::Srcc ? "srcc" : "lambdarank"},
      {"soft_rank_eps", cfg.soft_rank_eps},
      {"ndcg_k", cfg.ndcg_k},
      {"lambdarank_sigma", cfg.lambdarank_sigma},
  };
}

LossConfig loss_from_json_obj(const json& j) {
  LossConfig cfg;
  if (j.contains("variant")) {
    const std::string v = j.at("variant").get<std::string>();
    if (v == "srcc")
      cfg.variant = LossVariant::Srcc;
    else if (v == "lambdarank")
      cfg.variant = LossVariant::LambdaRank;
    else
      throw_data("loss config: unknown variant '" + v + "'");
  }
  if (j.contains("soft_rank_eps")) cfg.soft_rank_eps = j.at("soft_rank_eps").get<double>();
  if (j.contains("ndcg_k")) cfg.ndcg_k = j.at("ndcg_k").get<int>();
  if (j.contains("lambdarank_sigma")) cfg.lambdarank_sigma = j.at("lambdarank_sigma").get<double>();
  return cfg;
}

json train_to_json_obj(const TrainConfig& cfg) {
  return json{
      {"lr", cfg.lr},
      {"weight_decay", cfg.weight_decay},
      {"betas", {cfg.beta1, cfg.beta2}},
      {"adam_eps", cfg.adam_eps},
      {"clip_norm", cfg.clip_norm},
      {"max_epochs", cfg.max_epochs},
      {"plateau_factor", cfg.plateau_factor},
      {"plateau_patience", cfg.plateau_patience},
      {"early_stop_patience", cfg.early_stop_patience},
      {"loss", loss_to_json_obj(cfg.loss)},
      {"group_k", cfg.group_k},
      {"seed", cfg.seed},
      {"mask_prob", cfg.mask_prob},
      {"split", {cfg.split.train, cfg.split.val, cfg.split.test}},
  };
}

TrainConfig train_from_json_obj(const json& j) {
  TrainConfig cfg;
  if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
  if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("betas")) {
    const auto b = j.at("betas");
    if (!b.is_array() || b.size() != 2) throw_data("train config: betas must have 2 entries");
    cfg.beta1 = b.at(0).get<double>();
    cfg.beta2 = b.at(1).get<double>();
  }
  if (j.contains("adam_eps")) cfg.adam_eps = j.at("adam_eps").get<double>();
  if (j.contains("clip_norm")) cfg.clip_norm = j.at("clip_norm").get<double>();
  if (j.contains("max_epochs")) cfg.max_epochs = j.at("max_epochs").get<int>();
  if (j.contains("plateau_factor")) cfg.plateau_factor = j.at("plateau_factor").get<double>();
  if (j.contains("plateau_patience")) cfg.plateau_patience = j.at("plateau_patience").get<int>();
  if (j.contains("early_stop_patience"))
    cfg.early_stop_patience = j.at("early_stop_patience").get<int>();
  if (j.contains("loss")) cfg.loss = loss_from_json_obj(j.at("loss"));
  if (j.contains("group_k")) cfg.group_k = j.at("group_k").get<int>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
  if (j.contains("mask_prob")) cfg.mask_prob = j.at("mask_prob").get<double>();
  if (j.contains("split")) {
    const auto s = j.at("split");
    if (!s.is_array() || s.size() != 3) throw_data("train config: split must have 3 ratios");
    cfg.split.train = s.at(0).get<double>();
    cfg.split.val = s.at(1).get<double>();
    cfg.split.test = s.at(2).get<double>();
  }
  return cfg;
}

}  // namespace

std::string predictor_config_to_json(const PredictorConfig& cfg) {
  return predictor_to_json_obj(cfg).dump(2) + "\n";
}

PredictorConfig predictor_config_from_json(const std::string& text) {
  return predictor_from_json_obj(parse_json(text, "predictor config"));
}

std::string oracle_config_to_json(const OracleConfig& cfg) {
  return oracle_to_json_obj(cfg).dump(2) + "\n";
}

OracleConfig oracle_config_from_json(const std::string& text) {
  const json j = parse_json(text, "oracle config");
  return oracle_from_json_obj(j.contains("oracle") ? j.at("oracle") : j);
}

std::string train_config_to_json(const TrainConfig& cfg) {
  return train_to_json_obj(cfg).dump(2) + "\n";
}

TrainConfig train_config_from_json(const std::string& text) {
  const json j = parse_json(text, "train config");
  return train_from_json_obj(j.contains("train") ? j.at("train") : j);
}

std::string read_text_file(const fs::path& path) { return read_binary(path); }

void write_text_file_atomic(const fs::path& path, const std::string& text) {
  write_binary_atomic(path, text);
}

// ---- dataset persistence ----

void save_dataset(const Dataset& ds, const fs::path& dir) {
  ds.validate();
  const int P = ds.prompt_count();
  const int S = ds.sample_count();
  if (P < 1 || S < 1) throw_usage("save_dataset: empty dataset");
  if (S % P != 0) throw_data("save_dataset: prompts must have equal sample counts");
  const int npp = S / P;
  // prompt-major sample order is the on-disk contract
  for (int i = 0; i < S; ++i)
    if (ds.samples[static_cast<size_t>(i)].prompt_index != i / npp)
      throw_data("save_dataset: samples not in prompt-major order");

  std::error_code ec;
  fs::create_directories(dir, ec);

  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["kind"] = "paine.dataset";
  manifest["streams"] = streams_to_json(ds.oracle.streams);
  manifest["noise_shape"] = {ds.oracle.noise_shape[0], ds.oracle.noise_shape[1],
                             ds.oracle.noise_shape[2]};
  json ids = json::array();
  for (const auto& p : ds.prompts) ids.push_back(p.prompt_id);
  manifest["prompt_ids"] = ids;
  manifest["noises_per_prompt"] = npp;
  manifest["oracle"] = oracle_to_json_obj(ds.oracle);
  manifest["oracle_digest"] = ds.oracle_digest;
  if (ds.norm)
    manifest["norm_stats"] = {{"mean", ds.norm->mean}, {"std", ds.norm->std}};
  else
    manifest["norm_stats"] = nullptr;

  json blob_names = json::object();
  std::vector<std::string> emb_files;
  for (size_t s = 0; s < ds.oracle.streams.size(); ++s)
    emb_files.push_back("emb_s" + std::to_string(s) + ".pant");
  blob_names["embeddings"] = emb_files;
  blob_names["noises"] = "noises.pant";
  blob_names["scores"] = "scores.pant";
  manifest["blobs"] = blob_names;

  Fnv1a digest;
  auto write_and_hash = [&](const std::string& name, const TensorBlob& blob) {
    const std::string bytes = encode_blob(blob);
    digest.update(bytes);
    write_binary_atomic(dir / name, bytes);
  };

  for (size_t s = 0; s < ds.oracle.streams.size(); ++s) {
    const auto& spec = ds.oracle.streams[s];
    std::vector<double> all;
    all.reserve(static_cast<size_t>(P) * spec.tok * spec.d_tok);
    for (const auto& p : ds.prompts) {
      const auto& m = p.streams[s];
      all.insert(all.end(), m.v.begin(), m.v.end());
    }
    write_and_hash(emb_files[s], to_blob({P, spec.tok, spec.d_tok}, all));
  }
  {
    const auto [c, h, w] = ds.oracle.noise_shape;
    std::vector<double> all;
    all.reserve(static_cast<size_t>(S) * c * h * w);
    for (const auto& smp : ds.samples) all.insert(all.end(), smp.noise.begin(), smp.noise.end());
    write_and_hash("noises.pant", to_blob({S, c, h, w}, all));
  }
  {
    std::vector<double> scores;
    scores.reserve(static_cast<size_t>(S));
    for (const auto& smp : ds.samples) scores.push_back(smp.score_raw);
    write_and_hash("scores.pant", to_blob({S}, scores));
  }

  manifest["content_digest"] = digest.hex();
  write_binary_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  const json manifest = parse_json(read_binary(mpath), mpath.string());
  if (!manifest.contains("schema_version") || manifest.at("schema_version").get<int>() != kSchemaVersion)
    throw_data("unsupported dataset schema_version in " + mpath.string());
  if (manifest.at("kind").get<std::string>() != "paine.dataset")
    throw_data("not a dataset manifest: " + mpath.string());

  Dataset ds;
  ds.oracle = oracle_from_json_obj(manifest.at("oracle"));
  ds.oracle_digest = manifest.at("oracle_digest").get<std::string>();
  if (ds.oracle_digest != oracle_config_digest(ds.oracle))
    throw_data("oracle digest mismatch in " + mpath.string());
  if (!manifest.at("norm_stats").is_null()) {
    NormStats ns;
    ns.mean = manifest.at("norm_stats").at("mean").get<double>();
    ns.std = manifest.at("norm_stats").at("std").get<double>();
    ds.norm = ns;
  }
  const std::vector<int> prompt_ids = manifest.at("prompt_ids").get<std::vector<int>>();
  const int P = static_cast<int>(prompt_ids.size());
  const int npp = manifest.at("noises_per_prompt").get<int>();
  if (P < 1 || npp < 1) throw_data("empty dataset in " + mpath.string());

  const auto blob_names = manifest.at("blobs");
  const std::vector<std::string> emb_files =
      blob_names.at("embeddings").get<std::vector<std::string>>();
  if (emb_files.size() != ds.oracle.streams.size())
    throw_data("embedding blob count mismatch in " + mpath.string());

  Fnv1a digest;
  auto read_and_hash = [&](const std::string& name) {
    const fs::path p = dir / name;
    const std::string bytes = read_binary(p);
    digest.update(bytes);
    ByteReader r(bytes, p.string());
    TensorBlob blob = decode_blob(r, p.string());
    if (!r.eof()) throw_data("trailing bytes after tensor blob in " + p.string());
    return blob;
  };

  std::vector<TensorBlob> embs;
  for (const auto& name : emb_files) embs.push_back(read_and_hash(name));
  TensorBlob noises = read_and_hash(blob_names.at("noises").get<std::string>());
  TensorBlob scores = read_and_hash(blob_names.at("scores").get<std::string>());

  if (manifest.at("content_digest").get<std::string>() != digest.hex())
    throw_data("content digest mismatch for dataset in " + dir.string());

  for (size_t s = 0; s < embs.size(); ++s) {
    const auto& spec = ds.oracle.streams[s];
    if (embs[s].extents != std::vector<int>{P, spec.tok, spec.d_tok})
      throw_data("embedding blob extents mismatch in " + dir.string());
  }
  const auto [c, h, w] = ds.oracle.noise_shape;
  const int S = P * npp;
  if (noises.extents != std::vector<int>{S, c, h, w})
    throw_data("noise blob extents mismatch in " + dir.string());
  if (scores.extents != std::vector<int>{S})
    throw_data("score blob extents mismatch in " + dir.string());

  ds.prompts.resize(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) {
    auto& entry = ds.prompts[static_cast<size_t>(p)];
    entry.prompt_id = prompt_ids[static_cast<size_t>(p)];
    for (size_t s = 0; s < embs.size(); ++s) {
      const auto& spec = ds.oracle.streams[s];
      Mat m(spec.tok, spec.d_tok);
      const size_t stride = static_cast<size_t>(spec.tok) * spec.d_tok;
      for (size_t i = 0; i < stride; ++i)
        m.v[i] = static_cast<double>(embs[s].payload[static_cast<size_t>(p) * stride + i]);
      entry.streams.push_back(std::move(m));
    }
  }
  const size_t noise_len = static_cast<size_t>(c) * h * w;
  ds.samples.resize(static_cast<size_t>(S));
  for (int i = 0; i < S; ++i) {
    auto& rec = ds.samples[static_cast<size_t>(i)];
    rec.prompt_index = i / npp;
    rec.noise.resize(noise_len);
    for (size_t j = 0; j < noise_len; ++j)
      rec.noise[j] = static_cast<double>(noises.payload[static_cast<size_t>(i) * noise_len + j]);
    rec.score_raw = static_cast<double>(scores.payload[static_cast<size_t>(i)]);
  }
  ds.validate();
  return ds;
}

// ---- checkpoint persistence ----

namespace {

json checkpoint_manifest_without_digest(const Checkpoint& ck,
                                        const std::vector<std::pair<std::string, Tensor>>& named) {
  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["kind"] = "paine.checkpoint";
  manifest["config"] = predictor_to_json_obj(ck.config);
  manifest["norm_stats"] = {{"mean", ck.norm.mean}, {"std", ck.norm.std}};
  manifest["provenance"] = {
      {"seed", ck.prov.seed},
      {"best_epoch", ck.prov.best_epoch},
      {"best_val_srcc", ck.prov.best_val_srcc},
      {"dataset_digest", ck.prov.dataset_digest},
      {"oracle_digest", ck.prov.oracle_digest},
  };
  json params = json::array();
  for (const auto& [name, t] : named) params.push_back({{"name", name}, {"file", name + ".pant"}});
  manifest["params"] = params;
  return manifest;
}

}  // namespace

std::string save_checkpoint(const Checkpoint& ck, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "params", ec);
  const auto named = ck.model.named_params();
  json manifest = checkpoint_manifest_without_digest(ck, named);

  Fnv1a digest;
  digest.update(manifest.dump());
  for (const auto& [name, t] : named) {
    const std::string bytes = encode_blob(to_blob(t.shape(), t.values()));
    digest.update(bytes);
    write_binary_atomic(dir / "params" / (name + ".pant"), bytes);
  }
  manifest["content_digest"] = digest.hex();
  write_binary_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  return digest.hex();
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  json manifest = parse_json(read_binary(mpath), mpath.string());
  if (!manifest.contains("schema_version") || manifest.at("schema_version").get<int>() != kSchemaVersion)
    throw_data("unsupported checkpoint schema_version in " + mpath.string());
  if (manifest.at("kind").get<std::string>() != "paine.checkpoint")
    throw_data("not a checkpoint manifest: " + mpath.string());

  LoadedCheckpoint out;
  out.ck.config = predictor_from_json_obj(manifest.at("config"));
  out.ck.norm.mean = manifest.at("norm_stats").at("mean").get<double>();
  out.ck.norm.std = manifest.at("norm_stats").at("std").get<double>();
  const auto prov = manifest.at("provenance");
  out.ck.prov.seed = prov.at("seed").get<uint64_t>();
  out.ck.prov.best_epoch = prov.at("best_epoch").get<int>();
  out.ck.prov.best_val_srcc = prov.at("best_val_srcc").get<double>();
  out.ck.prov.dataset_digest = prov.at("dataset_digest").get<std::string>();
  out.ck.prov.oracle_digest = prov.at("oracle_digest").get<std::string>();

  out.ck.model = PainePredictor(out.ck.config, 0);
  auto named = out.ck.model.named_params();

  std::map<std::string, std::string> files;
  for (const auto& e : manifest.at("params"))
    files[e.at("name").get<std::string>()] = e.at("file").get<std::string>();

  const std::string stored_digest = manifest.at("content_digest").get<std::string>();
  manifest.erase("content_digest");
  Fnv1a digest;
  digest.update(manifest.dump());

  for (auto& [name, t] : named) {
    const auto it = files.find(name);
    if (it == files.end()) throw_data("checkpoint missing parameter blob for '" + name + "'");
    const fs::path p = dir / "params" / it->second;
    const std::string bytes = read_binary(p);
    digest.update(bytes);
    ByteReader r(bytes, p.string());
    TensorBlob blob = decode_blob(r, p.string());
    if (!r.eof()) throw_data("trailing bytes after tensor blob in " + p.string());
    if (blob.extents != t.shape())
      throw_data("parameter blob extents mismatch for '" + name + "'");
    auto& vals = t.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(blob.payload[i]);
  }
  if (stored_digest != digest.hex())
    throw_data("content digest mismatch for checkpoint in " + dir.string());
  out.digest = stored_digest;
  return out;
}

void save_prompt_file(const fs::path& path, const PromptEmbedding& emb) {
  std::vector<TensorBlob> blobs;
  for (const auto& m : emb.streams) blobs.push_back(to_blob({m.rows, m.cols}, m.v));
  write_blobs_file(path, blobs);
}

PromptEmbedding load_prompt_file(const fs::path& path) {
  PromptEmbedding emb;
  for (const auto& blob : read_blobs_file(path)) {
    if (blob.extents.size() != 2) throw_data("prompt stream blob must be rank 2 in " + path.string());
    Mat m(blob.extents[0], blob.extents[1]);
    for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<double>(blob.payload[i]);
    emb.streams.push_back(std::move(m));
  }
  return emb;
}

void save_selection(const SelectionResult& res, const std::array<int, 3>& noise_shape,
                    const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["kind"] = "paine.selection";
  manifest["checkpoint_digest"] = res.checkpoint_digest;
  manifest["seed"] = res.seed;
  manifest["n"] = res.n;
  manifest["b"] = static_cast<int>(res.entries.size());
  json scores = json::array();
  json indices = json::array();
  std::vector<double> all;
  for (const auto& e : res.entries) {
    scores.push_back(e.predicted_score_raw);
    indices.push_back(e.candidate_index);
    all.insert(all.end(), e.noise.begin(), e.noise.end());
  }
  manifest["predicted_scores"] = scores;
  manifest["candidate_indices"] = indices;
  const std::string bytes = encode_blob(to_blob(
      {static_cast<int>(res.entries.size()), noise_shape[0], noise_shape[1], noise_shape[2]}, all));
  Fnv1a digest;
  digest.update(bytes);
  write_binary_atomic(dir / "noises.pant", bytes);
  manifest["content_digest"] = digest.hex();
  write_binary_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

MetricsLog::MetricsLog(fs::path path, std::string cmd, uint64_t seed, std::string digest)
    : path_(std::move(path)), cmd_(std::move(cmd)), seed_(seed), digest_(std::move(digest)) {}

void MetricsLog::record(const std::string& metric, double value, int epoch) {
  if (path_.empty()) return;
  json rec;
  rec["cmd"] = cmd_;
  rec["metric"] = metric;
  rec["value"] = value;
  if (epoch >= 0) rec["epoch"] = epoch;
  rec["seed"] = seed_;
  rec["digest"] = digest_;
  rec["ts"] = iso_timestamp();
  std::ofstream out(path_, std::ios::app);
  if (!out) throw_data("cannot append to metrics log " + path_.string());
  out << rec.dump() << "\n";
}

}  // namespace paine
