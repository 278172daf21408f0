#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "paine/selection.hpp"

namespace paine {

// "PANT" tensor container: magic, format version u16, dtype code u8
// (1 = f32), rank u8, extents u32 little-endian, payload f32 little-endian
// row-major. All on-disk payloads are f32 regardless of host platform.
struct TensorBlob {
  std::vector<int> extents;
  std::vector<float> payload;
};

void write_blob_file(const std::filesystem::path& path, const TensorBlob& blob);
TensorBlob read_blob_file(const std::filesystem::path& path);

// Multi-blob container: blobs are self-delimiting and concatenated.
void write_blobs_file(const std::filesystem::path& path, const std::vector<TensorBlob>& blobs);
std::vector<TensorBlob> read_blobs_file(const std::filesystem::path& path);

TensorBlob to_blob(const std::vector<int>& extents, const std::vector<double>& values);
std::vector<double> blob_values(const TensorBlob& blob);

// ---- dataset / checkpoint / selection persistence ----

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

struct LoadedCheckpoint {
  Checkpoint ck;
  std::string digest;
};

std::string save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

void save_prompt_file(const std::filesystem::path& path, const PromptEmbedding& emb);
PromptEmbedding load_prompt_file(const std::filesystem::path& path);

void save_selection(const SelectionResult& res, const std::array<int, 3>& noise_shape,
                    const std::filesystem::path& dir);

// ---- configs (one JSON grammar for all config files) ----

std::string predictor_config_to_json(const PredictorConfig& cfg);
PredictorConfig predictor_config_from_json(const std::string& text);
std::string oracle_config_to_json(const OracleConfig& cfg);
OracleConfig oracle_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file_atomic(const std::filesystem::path& path, const std::string& text);

// Append-only metrics log: one JSON record per line. Timestamps live in the
// separate "ts" field so golden comparisons can exclude them.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(std::filesystem::path path, std::string cmd, uint64_t seed, std::string digest);

  void record(const std::string& metric, double value, int epoch = -1);
  bool active() const { return !path_.empty(); }

 private:
  std::filesystem::path path_;
  std::string cmd_;
  uint64_t seed_ = 0;
  std::string digest_;
};

}  // namespace paine
