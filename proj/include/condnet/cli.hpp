// SPDX-License-Identifier: Apache-2.0
/**
 * @file   cli.hpp
 * @brief  The `condnet` command line.
 *
 * Subcommands: train, eval, sweep-tau, cost, search, ensemble-train,
 * ensemble-sweep, analyze, and rerun (replays a manifest.json). Every command
 * writes manifest.json plus its outputs to --out.
 *
 * Exit status: 0 on success (and for --help), 1 when a command fails, 2 on a
 * usage error.
 */
#pragma once

#include <condnet/data.hpp>
#include <condnet/graph.hpp>

#include <cstdint>
#include <iosfwd>
#include <string>

namespace condnet {

int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err);

/// "two_clusters:N", "block_classes:N", "cifar10" or "cifar10:PATH"
/// (PATH defaults to $CONDNET_DATA; `limit` caps the CIFAR record count).
Dataset load_data_spec(const std::string &spec, std::uint64_t seed, std::size_t limit);

/// "soft", "hard" or "top:K".
RoutingPolicy parse_policy(const std::string &text, bool renormalize = true);

} // namespace condnet
