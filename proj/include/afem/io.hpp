#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "afem/nn.hpp"
#include "afem/pipeline.hpp"

namespace afem::io {

/// Dataset container, all integers and floats little-endian:
///
///   "AFEM" | u32 version | u32 nx | u32 ny | u32 n_train | u32 n_test
///   | u32 length + UTF-8 JSON (generation config echo)
///   | (n_train + n_test) x { u64 seed | f64[N] kappa | f64[N] u_obs }
///   | f64 mean | f64 std            (train-split normalization)
///
/// with N = (nx + 1)(ny + 1). Train records precede test records.
inline constexpr std::uint32_t kDatasetVersion = 1;

/// Checkpoint container:
///
///   "AFCK" | u32 version | u32 length + UTF-8 JSON (model config, training
///   config echo, epoch, loss history) | u64 adam step | u64 rng seed
///   | u64 P | f64[P] params | f64[P] first moments | f64[P] second moments
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_dataset(const pipeline::Dataset& data);
/// Throws ParseError naming the byte offset of the first inconsistency.
pipeline::Dataset decode_dataset(const std::string& bytes);

struct Checkpoint {
  nn::ModelConfig model;
  nlohmann::json train_config;
  pipeline::TrainState state;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

inline void write_dataset(const std::filesystem::path& path, const pipeline::Dataset& data) {
  write_file_atomic(path, encode_dataset(data));
}
inline pipeline::Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}
inline Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

/// Pretty-printed JSON, written atomically. Throws IoError on non-finite numbers.
void write_report(const std::filesystem::path& path, const nlohmann::json& report);

}  // namespace afem::io
