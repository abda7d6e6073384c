#include <cmath>
#include <fstream>

#include "doctest.h"
#include "dera/error.hpp"
#include "dera/fixtures.hpp"
#include "dera/lattice.hpp"
#include "dera/model_io.hpp"
#include "tempdir.hpp"

using namespace dera;

namespace {

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected dera::Error");
  return Errc::InvalidArgument;
}

void write_raw(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

}  // namespace

TEST_CASE("vocab file round trip") {
  TempDir dir("io");
  const Vocab v({"hello", "wörld", "<eos>"}, 2);
  write_vocab(dir / "v.txt", v);
  CHECK(read_text_file(dir / "v.txt") == "#eos=2\nhello\nwörld\n<eos>\n");
  CHECK(read_vocab(dir / "v.txt") == v);

  write_raw(dir / "bad.txt", "a\nb\n");
  CHECK(code_of([&] { read_vocab(dir / "bad.txt"); }) == Errc::Parse);
  write_raw(dir / "dup.txt", "#eos=1\na\na\n");
  CHECK(code_of([&] { read_vocab(dir / "dup.txt"); }) == Errc::Parse);
  CHECK(code_of([&] { read_vocab(dir / "missing.txt"); }) == Errc::Io);
}

TEST_CASE("model file round trip is exact") {
  TempDir dir("io");
  Rng rng(3);
  const Vocab v = toy_vocab(4);
  write_vocab(dir / "vocab.txt", v);
  TabularLM m = random_model(rng, v, 2, 3, 3.0);
  m.set_row(0, std::vector<TokenId>{1}, LogitVector({0.1, kMasked, 1.0 / 3.0, -7e-300}));
  write_model(dir / "m.json", m, "vocab.txt", 0.1);
  const ModelFile back = read_model(dir / "m.json");
  CHECK(back.model.rows() == m.rows());
  CHECK(back.model.order() == 2);
  CHECK(back.model.max_len() == 3);
  REQUIRE(back.beta.has_value());
  CHECK(*back.beta == 0.1);

  // Writing the parsed model again gives the same bytes.
  write_model(dir / "m2.json", back.model, "vocab.txt", back.beta);
  CHECK(read_text_file(dir / "m.json") == read_text_file(dir / "m2.json"));
  CHECK(read_text_file(dir / "m.json").find("\"-inf\"") != std::string::npos);
}

TEST_CASE("positional model round trip") {
  TempDir dir("io");
  const LengthRewardFixture f = length_reward_fixture(7, 300);
  write_vocab(dir / "vocab.txt", f.ref.vocab());
  write_model(dir / "a.json", f.aligned, "vocab.txt");
  const ModelFile back = read_model(dir / "a.json");
  CHECK(back.model.positional());
  CHECK(back.model.rows() == f.aligned.rows());
  CHECK(!back.beta.has_value());
}

TEST_CASE("malformed model files") {
  TempDir dir("io");
  write_vocab(dir / "vocab.txt", toy_vocab(3));
  write_raw(dir / "a.json", "{not json");
  CHECK(code_of([&] { read_model(dir / "a.json"); }) == Errc::Parse);
  write_raw(dir / "b.json", R"({"version": 1, "vocab_file": "vocab.txt", "order": 0, "max_len": 2,
    "rows": [{"query": 0, "context": [], "logits": [0, 1]}]})");
  CHECK(code_of([&] { read_model(dir / "b.json"); }) == Errc::Parse);
  write_raw(dir / "c.json", R"({"version": 1, "vocab_file": "vocab.txt", "order": 0, "max_len": 2,
    "rows": [{"query": 0, "context": [], "logits": ["-inf", "-inf", "-inf"]}]})");
  CHECK(code_of([&] { read_model(dir / "c.json"); }) == Errc::Parse);
  write_raw(dir / "d.json", R"({"version": 9, "vocab_file": "vocab.txt", "order": 0, "max_len": 2, "rows": []})");
  CHECK(code_of([&] { read_model(dir / "d.json"); }) == Errc::Parse);
  write_raw(dir / "e.json", R"({"version": 1, "vocab_file": "nope.txt", "order": 0, "max_len": 2, "rows": []})");
  CHECK(code_of([&] { read_model(dir / "e.json"); }) == Errc::Io);
}

TEST_CASE("reward file round trip") {
  TempDir dir("io");
  write_reward(dir / "band.json", RewardSpec::length_band(4, 6));
  const RewardSpec band = read_reward(dir / "band.json");
  REQUIRE(band.is_length_band());
  CHECK(band.band().l_min == 4);
  CHECK(band.band().l_max == 6);

  RewardTable t;
  t.entries[{0, Sequence({0, 2})}] = -0.25;
  t.entries[{1, Sequence({2})}] = 1.0 / 3.0;
  write_reward(dir / "table.json", RewardSpec::table(t));
  const RewardSpec table = read_reward(dir / "table.json");
  REQUIRE(!table.is_length_band());
  CHECK(table.entries().entries == t.entries);

  write_raw(dir / "bad.json", R"({"kind": "mystery"})");
  CHECK(code_of([&] { read_reward(dir / "bad.json"); }) == Errc::Parse);
  write_raw(dir / "inverted.json", R"({"kind": "length_band", "l_min": 5, "l_max": 2})");
  CHECK(code_of([&] { read_reward(dir / "inverted.json"); }) == Errc::BadReward);
}

TEST_CASE("corpus file round trip") {
  TempDir dir("io");
  const LengthCorpus c = synthetic_length_corpus(1, 50);
  write_corpus(dir / "c.tsv", c.vocab, c.corpus);
  const auto back = read_corpus(dir / "c.tsv", c.vocab);
  REQUIRE(back.size() == c.corpus.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].query == c.corpus[i].query);
    CHECK(back[i].response == c.corpus[i].response);
  }
  write_raw(dir / "open.tsv", "0\tw1 w2\n");
  CHECK(code_of([&] { read_corpus(dir / "open.tsv", c.vocab); }) == Errc::Parse);
  write_raw(dir / "unknown.tsv", "0\tw1 zz <eos>\n");
  CHECK(code_of([&] { read_corpus(dir / "unknown.tsv", c.vocab); }) == Errc::Parse);
  write_raw(dir / "notab.tsv", "w1 <eos>\n");
  CHECK(code_of([&] { read_corpus(dir / "notab.tsv", c.vocab); }) == Errc::Parse);
}

TEST_CASE("detokenize") {
  const Vocab v({"a", "b", "<eos>"}, 2);
  CHECK(detokenize(v, Sequence({0, 1, 2})) == "a b");
  CHECK(detokenize(v, Sequence({0, 1, 2}), true) == "a b <eos>");
  CHECK(detokenize(v, Sequence({2})).empty());
  CHECK(tokenize(v, " a  b <eos>") == Sequence({0, 1, 2}));
}
