#include "dera/model_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "dera/error.hpp"
#include "dera/format.hpp"
#include "json.hpp"

namespace dera {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

double logit_value(const json& j) {
  if (j.is_string() && j.get<std::string>() == "-inf") return kMasked;
  if (!j.is_number()) fail(Errc::Parse, "logit must be a number or \"-inf\"");
  return j.get<double>();
}

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) fail(Errc::Parse, std::string("missing field \"") + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(Errc::Parse, std::string("field \"") + key + "\": " + e.what());
  }
}

json parse_json(const fs::path& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(Errc::Parse, path.string() + ": " + e.what());
  }
}

std::vector<TokenId> ids_of(const json& j, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& x : j) {
    if (!x.is_number_integer()) fail(Errc::Parse, "token ids must be integers");
    const auto id = x.get<long long>();
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      fail(Errc::Parse, "token id " + std::to_string(id) + " out of range");
    }
    ids.push_back(static_cast<TokenId>(id));
  }
  return ids;
}

}  // namespace

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::Io, "cannot write " + tmp.string());
    out << text;
    if (!out.flush()) fail(Errc::Io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(Errc::Io, "cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Vocab read_vocab(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind("#eos=", 0) != 0) {
    fail(Errc::Parse, path.string() + ": first line must be #eos=<index>");
  }
  long long eos = -1;
  const char* b = line.data() + 5;
  const char* e = line.data() + line.size();
  if (!line.empty() && line.back() == '\r') --e;
  const auto [ptr, ec] = std::from_chars(b, e, eos);
  if (ec != std::errc() || ptr != e) fail(Errc::Parse, path.string() + ": bad eos index");
  std::vector<std::string> tokens;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  try {
    return Vocab(std::move(tokens), static_cast<TokenId>(eos));
  } catch (const Error& err) {
    fail(Errc::Parse, path.string() + ": " + err.what());
  }
}

void write_vocab(const fs::path& path, const Vocab& vocab) {
  std::string text = "#eos=" + std::to_string(vocab.eos()) + "\n";
  for (const auto& t : vocab.tokens()) text += t + "\n";
  write_text_file(path, text);
}

std::string model_to_json(const TabularLM& model, const std::string& vocab_file, std::optional<double> beta) {
  // Written by hand so every float is the shortest round-trip decimal.
  std::string out = "{\n \"version\": " + std::to_string(kModelFormatVersion) + ",\n";
  out += " \"vocab_file\": " + json(vocab_file).dump() + ",\n";
  out += " \"order\": " + std::to_string(model.order()) + ",\n";
  out += " \"max_len\": " + std::to_string(model.max_len()) + ",\n";
  if (model.positional()) out += " \"positional\": true,\n";
  if (beta) out += " \"beta\": " + format_double(*beta) + ",\n";
  out += " \"rows\": [";
  bool first = true;
  for (const auto& [key, row] : model.rows()) {
    out += first ? "\n  " : ",\n  ";
    first = false;
    out += "{\"query\": " + std::to_string(key.query);
    if (model.positional()) out += ", \"depth\": " + std::to_string(key.depth);
    out += ", \"context\": [";
    for (std::size_t i = 0; i < key.context.size(); ++i) {
      out += (i ? ", " : "") + std::to_string(key.context[i]);
    }
    out += "], \"logits\": [";
    for (std::size_t i = 0; i < row.size(); ++i) {
      out += i ? ", " : "";
      out += row.masked(i) ? std::string("\"-inf\"") : format_double(row[i]);
    }
    out += "]}";
  }
  out += first ? "]\n}\n" : "\n ]\n}\n";
  return out;
}

void write_model(const fs::path& path, const TabularLM& model, const std::string& vocab_file,
                 std::optional<double> beta) {
  write_text_file(path, model_to_json(model, vocab_file, beta));
}

ModelFile read_model(const fs::path& path) {
  const json doc = parse_json(path);
  if (!doc.is_object()) fail(Errc::Parse, path.string() + ": model file must be a JSON object");
  const int version = field<int>(doc, "version");
  if (version != kModelFormatVersion) fail(Errc::Parse, "unsupported model version " + std::to_string(version));
  fs::path vocab_path = field<std::string>(doc, "vocab_file");
  if (vocab_path.is_relative()) vocab_path = path.parent_path() / vocab_path;
  Vocab vocab = read_vocab(vocab_path);

  const bool positional = doc.value("positional", false);
  TabularLM model(vocab, field<std::size_t>(doc, "order"), field<std::size_t>(doc, "max_len"), positional);
  if (!doc.contains("rows") || !doc["rows"].is_array()) fail(Errc::Parse, "missing rows array");
  try {
    for (const auto& r : doc["rows"]) {
      ContextKey key;
      key.query = field<QueryId>(r, "query");
      key.depth = positional ? field<std::int32_t>(r, "depth") : -1;
      key.context = ids_of(field<json>(r, "context"), vocab);
      std::vector<double> logits;
      for (const auto& x : field<json>(r, "logits")) logits.push_back(logit_value(x));
      model.set_row(key, LogitVector(std::move(logits)));
    }
  } catch (const Error& e) {
    if (e.code() == Errc::Parse) throw;
    fail(Errc::Parse, path.string() + ": " + e.what());
  }
  std::optional<double> beta;
  if (doc.contains("beta")) beta = field<double>(doc, "beta");
  return {std::move(model), beta, vocab_path};
}

RewardSpec read_reward(const fs::path& path) {
  const json doc = parse_json(path);
  const std::string kind = field<std::string>(doc, "kind");
  if (kind == "length_band") {
    return RewardSpec::length_band(field<std::size_t>(doc, "l_min"), field<std::size_t>(doc, "l_max"));
  }
  if (kind != "table") fail(Errc::Parse, "unknown reward kind \"" + kind + "\"");
  RewardTable table;
  for (const auto& e : field<json>(doc, "entries")) {
    std::vector<TokenId> y;
    for (const auto& x : field<json>(e, "response")) {
      if (!x.is_number_integer()) fail(Errc::Parse, "reward responses are lists of token ids");
      y.push_back(x.get<TokenId>());
    }
    table.entries[{field<QueryId>(e, "query"), Sequence(std::move(y))}] = field<double>(e, "reward");
  }
  return RewardSpec::table(std::move(table));
}

void write_reward(const fs::path& path, const RewardSpec& reward) {
  nlohmann::ordered_json doc;
  if (reward.is_length_band()) {
    doc["kind"] = "length_band";
    doc["l_min"] = reward.band().l_min;
    doc["l_max"] = reward.band().l_max;
  } else {
    doc["kind"] = "table";
    doc["entries"] = nlohmann::ordered_json::array();
    for (const auto& [key, r] : reward.entries().entries) {
      nlohmann::ordered_json e;
      e["query"] = key.first;
      e["response"] = std::vector<TokenId>(key.second.tokens().begin(), key.second.tokens().end());
      e["reward"] = r;
      doc["entries"].push_back(std::move(e));
    }
  }
  write_text_file(path, doc.dump(1) + "\n");
}

std::string detokenize(const Vocab& vocab, const Sequence& y, bool keep_eos) {
  std::string out;
  for (TokenId t : y.tokens()) {
    if (t == vocab.eos() && !keep_eos) break;
    if (!out.empty()) out += ' ';
    out += vocab.token(t);
  }
  return out;
}

Sequence tokenize(const Vocab& vocab, const std::string& text) {
  std::istringstream in(text);
  std::vector<TokenId> ids;
  std::string tok;
  while (in >> tok) ids.push_back(vocab.index_of(tok));
  return Sequence(std::move(ids));
}

std::vector<CorpusEntry> read_corpus(const fs::path& path, const Vocab& vocab) {
  std::istringstream in(read_text_file(path));
  std::vector<CorpusEntry> corpus;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) fail(Errc::Parse, path.string() + ":" + std::to_string(lineno) + ": missing tab");
    QueryId q = 0;
    const auto [ptr, ec] = std::from_chars(line.data(), line.data() + tab, q);
    if (ec != std::errc() || ptr != line.data() + tab) {
      fail(Errc::Parse, path.string() + ":" + std::to_string(lineno) + ": bad query id");
    }
    Sequence y = tokenize(vocab, line.substr(tab + 1));
    if (!y.terminated(vocab.eos())) {
      fail(Errc::Parse, path.string() + ":" + std::to_string(lineno) + ": response must end with the eos token");
    }
    y.validate(vocab);
    corpus.push_back({q, std::move(y)});
  }
  return corpus;
}

void write_corpus(const fs::path& path, const Vocab& vocab, std::span<const CorpusEntry> corpus) {
  std::string text;
  for (const auto& e : corpus) text += std::to_string(e.query) + "\t" + detokenize(vocab, e.response, true) + "\n";
  write_text_file(path, text);
}

}  // namespace dera
