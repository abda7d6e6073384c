#pragma once

// On-disk formats: vocabulary text files, model JSON, reward JSON and the
// tab-separated training corpus.
//
// Vocab:   first line "#eos=<index>", then one token per line.
// Model:   {"version": 1, "vocab_file": "<path relative to the model>",
//           "order", "max_len", "positional"?, "beta"?,
//           "rows": [{"query", "depth"?, "context": [ids], "logits": [..]}]}
//          Masked logits are the string "-inf"; other floats are written
//          as shortest round-trip decimals.
// Reward:  {"kind": "length_band", "l_min", "l_max"} or
//          {"kind": "table", "entries": [{"query", "response": [ids], "reward"}]}
// Corpus:  "<query id>\t<token> <token> ... <eos token>" per line.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dera/tabular.hpp"

namespace dera {

inline constexpr int kModelFormatVersion = 1;

Vocab read_vocab(const std::filesystem::path& path);
void write_vocab(const std::filesystem::path& path, const Vocab& vocab);

struct ModelFile {
  TabularLM model;
  // Training-time KL strength recorded by align-exact.
  std::optional<double> beta;
  // Vocabulary file as resolved against the model's directory.
  std::filesystem::path vocab_path;
};

// Errc::Io when a file cannot be read, Errc::Parse for malformed content.
ModelFile read_model(const std::filesystem::path& path);
// Writes the model JSON; `vocab_file` is stored verbatim (normally a path
// relative to the model file's directory).
void write_model(const std::filesystem::path& path, const TabularLM& model, const std::string& vocab_file,
                 std::optional<double> beta = std::nullopt);
std::string model_to_json(const TabularLM& model, const std::string& vocab_file, std::optional<double> beta);

RewardSpec read_reward(const std::filesystem::path& path);
void write_reward(const std::filesystem::path& path, const RewardSpec& reward);

std::vector<CorpusEntry> read_corpus(const std::filesystem::path& path, const Vocab& vocab);
void write_corpus(const std::filesystem::path& path, const Vocab& vocab, std::span<const CorpusEntry> corpus);

// Space-separated token strings.
std::string detokenize(const Vocab& vocab, const Sequence& y, bool keep_eos = false);
Sequence tokenize(const Vocab& vocab, const std::string& text);

std::string read_text_file(const std::filesystem::path& path);
// Writes through a temporary file and renames it into place.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace dera
