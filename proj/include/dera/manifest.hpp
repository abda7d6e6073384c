#pragma once

// Run manifests: enough recorded context (argv, config, seeds, input hashes,
// engine version) to re-execute a CLI run and get the same bytes out.

#include <filesystem>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace dera {

std::string_view engine_version() noexcept;

// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  // Input path -> SHA-256 of its contents at the start of the run.
  std::map<std::string, std::string> input_hashes;
  // Output path -> SHA-256 of what the run wrote.
  std::map<std::string, std::string> output_hashes;
  // Free-form log lines, e.g. one per interactive generation.
  std::vector<std::string> log;
  double duration_seconds = 0.0;
  int exit_code = 0;

  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
};

std::string manifest_to_json(const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const RunManifest& m);

}  // namespace dera
