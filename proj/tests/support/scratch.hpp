// SPDX-License-Identifier: Apache-2.0
// Fresh per-test scratch directories.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

namespace condnet::testing {

/// Empty directory under $CONDNET_TEST_TMP (or the system temp dir).
inline std::filesystem::path scratch_dir(const std::string &name) {
  const char *root = std::getenv("CONDNET_TEST_TMP");
  const std::filesystem::path base =
      root && *root ? std::filesystem::path(root)
                    : std::filesystem::temp_directory_path() / "condnet-tests";
  const std::filesystem::path dir = base / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

} // namespace condnet::testing
