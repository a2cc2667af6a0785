// SPDX-License-Identifier: Apache-2.0
/**
 * @file   io.hpp
 * @brief  Run manifests, checkpoints and small file helpers.
 *
 * A checkpoint is a directory:
 *
 *   manifest.json   {"format": "condnet-checkpoint", "dtype": "f32"|"f64",
 *                    "iteration": n, "arch": {...},
 *                    "params": [{"id", "file", "shape"}, ...]}
 *   <param>.bin     one tensor per parameter (write_tensor layout)
 *
 * Nothing time- or host-dependent is written, so identical runs produce
 * identical bytes.
 */
#pragma once

#include <condnet/arch.hpp>
#include <condnet/autodiff.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace condnet {

inline constexpr std::string_view kEngineVersion = "0.1.0";

/// 64-bit FNV-1a, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string precision = "f32";
  std::string engine_version{kEngineVersion};
  /// Every resolved option, stringified (sorted by key).
  std::map<std::string, std::string> config;
  /// Output files relative to the run directory.
  std::vector<std::string> outputs;

  /// Hash of command, seed, precision and config; outputs are excluded.
  std::string config_hash() const;
  std::string to_json() const;
  static RunManifest from_json(const std::string &text);
};

template <typename T> std::string_view dtype_name();

template <typename T> struct Checkpoint {
  ArchSpec arch;
  ParamStore<T> params;
  std::string dtype; // as stored on disk
  std::size_t iteration = 0;
};

/// Writes (replacing) a checkpoint directory. Parameter ids must belong to
/// the architecture.
template <typename T>
void save_checkpoint(const std::filesystem::path &dir, const ArchSpec &arch,
                     const ParamStore<T> &params, std::size_t iteration = 0);

/// Loads a checkpoint, converting stored values to T. Missing or malformed
/// pieces raise FormatError; parameters are checked against the architecture.
template <typename T> Checkpoint<T> load_checkpoint(const std::filesystem::path &dir);

/// Whole-file helpers; write_text creates parent directories.
std::string read_text(const std::filesystem::path &path);
void write_text(const std::filesystem::path &path, std::string_view text);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

} // namespace condnet
