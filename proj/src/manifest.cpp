#include "dera/manifest.hpp"

#include <openssl/evp.h>

#include <memory>

#include "dera/error.hpp"
#include "dera/model_io.hpp"
#include "json.hpp"

namespace dera {

std::string_view engine_version() noexcept { return DERA_VERSION; }

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(Errc::Io, "SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

void RunManifest::add_input(const std::filesystem::path& path) { input_hashes[path.string()] = sha256_file(path); }
void RunManifest::add_output(const std::filesystem::path& path) { output_hashes[path.string()] = sha256_file(path); }

std::string manifest_to_json(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["engine_version"] = engine_version();
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["seed"] = m.seed;
  j["config"] = m.config;
  j["input_hashes"] = m.input_hashes;
  j["output_hashes"] = m.output_hashes;
  j["log"] = m.log;
  j["duration_seconds"] = m.duration_seconds;
  j["exit_code"] = m.exit_code;
  return j.dump(1) + "\n";
}

RunManifest read_manifest(const std::filesystem::path& path) {
  try {
    const auto j = nlohmann::json::parse(read_text_file(path));
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.value("config", std::map<std::string, std::string>{});
    m.input_hashes = j.value("input_hashes", std::map<std::string, std::string>{});
    m.output_hashes = j.value("output_hashes", std::map<std::string, std::string>{});
    m.log = j.value("log", std::vector<std::string>{});
    m.duration_seconds = j.value("duration_seconds", 0.0);
    m.exit_code = j.value("exit_code", 0);
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::Parse, path.string() + ": " + e.what());
  }
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
  write_text_file(path, manifest_to_json(m));
}

}  // namespace dera
