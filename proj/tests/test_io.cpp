#include <doctest.h>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "paine/errors.hpp"
#include "paine/io.hpp"
#include "paine/training.hpp"

using namespace paine;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("paine_test_" + std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

OracleConfig io_oracle() {
  OracleConfig cfg;
  cfg.prompt_count = 4;
  cfg.noises_per_prompt = 3;
  cfg.streams = {{3, 8}, {2, 4}};
  cfg.noise_shape = {2, 16, 16};
  cfg.label_noise_std = 0.05;
  cfg.master_seed = 31;
  return cfg;
}

void corrupt_byte(const fs::path& p, size_t offset) {
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(static_cast<std::streamoff>(offset));
  char c = 0;
  f.read(&c, 1);
  c = static_cast<char>(c ^ 0x5a);
  f.seekp(static_cast<std::streamoff>(offset));
  f.write(&c, 1);
}

}  // namespace

TEST_SUITE("io") {

TEST_CASE("tensor blob roundtrip is bitwise at f32") {
  TempDir tmp;
  Rng rng(5);
  std::vector<double> vals(24);
  for (auto& v : vals) v = rng.normal() * 10.0;
  const TensorBlob blob = to_blob({2, 3, 4}, vals);
  write_blob_file(tmp.path / "t.pant", blob);
  const TensorBlob back = read_blob_file(tmp.path / "t.pant");
  CHECK(back.extents == std::vector<int>{2, 3, 4});
  REQUIRE(back.payload.size() == 24);
  for (size_t i = 0; i < vals.size(); ++i)
    CHECK(back.payload[i] == static_cast<float>(vals[i]));  // exact f32 bits
}

TEST_CASE("blob corruption cases produce structured errors") {
  TempDir tmp;
  const fs::path p = tmp.path / "t.pant";
  write_blob_file(p, to_blob({4}, {1, 2, 3, 4}));

  // truncation
  {
    const auto size = fs::file_size(p);
    fs::resize_file(p, size - 5);
    CHECK_THROWS_WITH_AS(static_cast<void>(read_blob_file(p)),
                         doctest::Contains("truncated"), Error);
  }
  // bad magic
  write_blob_file(p, to_blob({4}, {1, 2, 3, 4}));
  corrupt_byte(p, 1);
  CHECK_THROWS_WITH_AS(static_cast<void>(read_blob_file(p)), doctest::Contains("magic"), Error);

  // unsupported version
  write_blob_file(p, to_blob({4}, {1, 2, 3, 4}));
  corrupt_byte(p, 4);
  CHECK_THROWS_WITH_AS(static_cast<void>(read_blob_file(p)), doctest::Contains("version"), Error);

  CHECK_THROWS_AS(static_cast<void>(read_blob_file(tmp.path / "missing.pant")), Error);
}

TEST_CASE("multi-blob prompt files round-trip") {
  TempDir tmp;
  PromptEmbedding emb;
  Rng rng(9);
  for (int s = 0; s < 2; ++s) {
    Mat m(3, 4 + s);
    for (auto& v : m.v) v = rng.normal();
    emb.streams.push_back(m);
  }
  save_prompt_file(tmp.path / "p.pant", emb);
  const PromptEmbedding back = load_prompt_file(tmp.path / "p.pant");
  REQUIRE(back.streams.size() == 2);
  for (int s = 0; s < 2; ++s) {
    CHECK(back.streams[static_cast<size_t>(s)].rows == emb.streams[static_cast<size_t>(s)].rows);
    for (size_t i = 0; i < back.streams[static_cast<size_t>(s)].v.size(); ++i)
      CHECK(back.streams[static_cast<size_t>(s)].v[i] ==
            static_cast<double>(static_cast<float>(emb.streams[static_cast<size_t>(s)].v[i])));
  }
}

TEST_CASE("dataset save/load roundtrip") {
  TempDir tmp;
  const Dataset ds = oracle_generate(io_oracle(), 17);
  save_dataset(ds, tmp.path / "ds");
  const Dataset back = load_dataset(tmp.path / "ds");

  CHECK(back.oracle_digest == ds.oracle_digest);
  CHECK(back.prompt_count() == ds.prompt_count());
  CHECK(back.sample_count() == ds.sample_count());
  for (int p = 0; p < ds.prompt_count(); ++p) {
    CHECK(back.prompts[static_cast<size_t>(p)].prompt_id == ds.prompts[static_cast<size_t>(p)].prompt_id);
    for (size_t s = 0; s < ds.prompts[static_cast<size_t>(p)].streams.size(); ++s) {
      const auto& a = ds.prompts[static_cast<size_t>(p)].streams[s];
      const auto& b = back.prompts[static_cast<size_t>(p)].streams[s];
      REQUIRE(a.v.size() == b.v.size());
      for (size_t i = 0; i < a.v.size(); ++i)
        CHECK(b.v[i] == static_cast<double>(static_cast<float>(a.v[i])));
    }
  }
  for (int i = 0; i < ds.sample_count(); ++i) {
    const auto& a = ds.samples[static_cast<size_t>(i)];
    const auto& b = back.samples[static_cast<size_t>(i)];
    CHECK(a.prompt_index == b.prompt_index);
    CHECK(b.score_raw == static_cast<double>(static_cast<float>(a.score_raw)));
    for (size_t j = 0; j < a.noise.size(); ++j)
      CHECK(b.noise[j] == static_cast<double>(static_cast<float>(a.noise[j])));
  }

  // norm stats round through
  Dataset with_norm = ds;
  with_norm.norm = NormStats{21.5, 0.75};
  save_dataset(with_norm, tmp.path / "ds2");
  const Dataset back2 = load_dataset(tmp.path / "ds2");
  REQUIRE(back2.norm.has_value());
  CHECK(back2.norm->mean == 21.5);
  CHECK(back2.norm->std == 0.75);
}

TEST_CASE("dataset integrity errors") {
  TempDir tmp;
  const Dataset ds = oracle_generate(io_oracle(), 17);
  const fs::path dir = tmp.path / "ds";
  save_dataset(ds, dir);

  // corrupt payload: content digest mismatch
  corrupt_byte(dir / "noises.pant", 200);
  CHECK_THROWS_WITH_AS(static_cast<void>(load_dataset(dir)), doctest::Contains("digest"), Error);

  // unknown schema version
  save_dataset(ds, dir);
  {
    auto j = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    j["schema_version"] = 99;
    write_text_file_atomic(dir / "manifest.json", j.dump(2) + "\n");
  }
  CHECK_THROWS_WITH_AS(static_cast<void>(load_dataset(dir)), doctest::Contains("schema_version"),
                       Error);

  // missing blob file
  save_dataset(ds, dir);
  fs::remove(dir / "scores.pant");
  CHECK_THROWS_AS(static_cast<void>(load_dataset(dir)), Error);
}

TEST_CASE("checkpoint save/load roundtrip") {
  TempDir tmp;
  Checkpoint ck;
  ck.config.prompt_streams = {{3, 8}};
  ck.config.heads = 4;
  ck.config.attn_blocks = 1;
  ck.config.noise_shape = {2, 16, 16};
  ck.config.stage_channels = {4, 4, 8, 8};
  ck.config.mlp_hidden = {8};
  ck.model = PainePredictor(ck.config, 12);
  ck.norm = {20.5, 1.25};
  ck.prov.seed = 42;
  ck.prov.best_epoch = 17;
  ck.prov.best_val_srcc = 0.789;
  ck.prov.dataset_digest = "abc";
  ck.prov.oracle_digest = "def";

  const fs::path dir = tmp.path / "ck";
  const std::string digest = save_checkpoint(ck, dir);
  const LoadedCheckpoint back = load_checkpoint(dir);
  CHECK(back.digest == digest);
  CHECK(back.ck.norm.mean == 20.5);
  CHECK(back.ck.norm.std == 1.25);
  CHECK(back.ck.prov.seed == 42);
  CHECK(back.ck.prov.best_epoch == 17);
  CHECK(back.ck.prov.dataset_digest == "abc");
  CHECK(back.ck.prov.oracle_digest == "def");

  // predictions agree to f32 rounding on random inputs
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    PromptEmbedding emb;
    Mat m(3, 8);
    for (auto& v : m.v) v = rng.normal();
    emb.streams.push_back(m);
    std::vector<double> noise(2 * 16 * 16);
    for (auto& v : noise) v = rng.normal();
    const double a = ck.model.predict(emb, noise, false);
    const double b = back.ck.model.predict(emb, noise, false);
    CHECK(std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8}) <= 1e-5);
    CHECK(ck.model.predict(emb, noise, true) ==
          doctest::Approx(back.ck.model.predict(emb, noise, true)).epsilon(1e-5));
  }

  // a second save is byte-identical (modulo nothing: no timestamps inside)
  const fs::path dir2 = tmp.path / "ck2";
  save_checkpoint(ck, dir2);
  CHECK(read_text_file(dir / "manifest.json") == read_text_file(dir2 / "manifest.json"));

  // missing parameter blob: structured error
  fs::remove(dir / "params" / "head.fc0.w.pant");
  CHECK_THROWS_WITH_AS(static_cast<void>(load_checkpoint(dir)), doctest::Contains("cannot open"),
                       Error);
}

TEST_CASE("config json round trips") {
  PredictorConfig pc;
  pc.prompt_streams = {{7, 16}, {5, 8}};
  pc.encoder_variant = EncoderVariant::PerTokenScalar;
  pc.attn_blocks = 3;
  pc.heads = 8;
  pc.noise_shape = {3, 32, 16};
  pc.stage_channels = {2, 4, 6, 8};
  pc.mlp_hidden = {10, 5};
  const PredictorConfig pc2 = predictor_config_from_json(predictor_config_to_json(pc));
  CHECK(pc2.prompt_streams == pc.prompt_streams);
  CHECK(pc2.encoder_variant == pc.encoder_variant);
  CHECK(pc2.attn_blocks == pc.attn_blocks);
  CHECK(pc2.heads == pc.heads);
  CHECK(pc2.noise_shape == pc.noise_shape);
  CHECK(pc2.stage_channels == pc.stage_channels);
  CHECK(pc2.mlp_hidden == pc.mlp_hidden);

  OracleConfig oc = io_oracle();
  const OracleConfig oc2 = oracle_config_from_json(oracle_config_to_json(oc));
  CHECK(oracle_config_digest(oc2) == oracle_config_digest(oc));

  TrainConfig tc;
  tc.lr = 5e-4;
  tc.loss.variant = LossVariant::LambdaRank;
  tc.seed = 99;
  tc.split = {0.6, 0.2, 0.2};
  const TrainConfig tc2 = train_config_from_json(train_config_to_json(tc));
  CHECK(tc2.lr == 5e-4);
  CHECK(tc2.loss.variant == LossVariant::LambdaRank);
  CHECK(tc2.seed == 99);
  CHECK(tc2.split.val == 0.2);

  CHECK_THROWS_AS(static_cast<void>(predictor_config_from_json("{nope")), Error);
}

TEST_CASE("metrics log records are one JSON object per line with a ts field") {
  TempDir tmp;
  const fs::path logp = tmp.path / "m.jsonl";
  MetricsLog log(logp, "train", 42, "deadbeef");
  log.record("val_srcc_global", 0.5, 3);
  log.record("done", 1.0);

  std::ifstream in(logp);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("cmd") == "train");
    CHECK(j.at("seed") == 42);
    CHECK(j.at("digest") == "deadbeef");
    CHECK(j.contains("ts"));
    CHECK(j.contains("metric"));
    CHECK(j.contains("value"));
    if (lines == 0) {
      CHECK(j.at("epoch") == 3);
      CHECK(j.at("metric") == "val_srcc_global");
    } else {
      CHECK_FALSE(j.contains("epoch"));
    }
    ++lines;
  }
  CHECK(lines == 2);
}

}  // TEST_SUITE
