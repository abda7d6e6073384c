#pragma once

// Logit providers behind a byte stream: newline-delimited JSON frames over
// child-process pipes or TCP.
//
//   peer -> engine  {"type":"hello","v":V,"eos":E,"name":"...","pipeline":bool?}
//   engine -> peer  {"type":"logits_req","id":N,"query":[...],"prefix":[...]}
//   peer -> engine  {"type":"logits_resp","id":N,"logits":[..., "-inf", ...]}
//
// The peer speaks first. Ids increase by one per request on a connection.
// A connection that times out is closed and never reused, since a late reply
// would desynchronize the frame stream.

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <sys/types.h>
#include <variant>
#include <vector>

#include "dera/sampling.hpp"

namespace dera {

struct HelloFrame {
  std::size_t vocab_size = 0;
  TokenId eos = 0;
  std::string name;
  bool pipeline = false;
};

struct LogitRequest {
  std::uint64_t id = 0;
  std::vector<TokenId> query;
  std::vector<TokenId> prefix;
};

struct LogitResponse {
  std::uint64_t id = 0;
  // Unvalidated: the receiver checks length and contents.
  std::vector<double> logits;
};

using Frame = std::variant<HelloFrame, LogitRequest, LogitResponse>;

// Encoders append the terminating newline. Floats use shortest round-trip
// decimals, masked entries the string "-inf".
std::string encode_frame(const Frame& frame);
// Errc::Protocol for anything that is not exactly one well-formed frame.
Frame decode_frame(std::string_view line);

inline constexpr std::chrono::milliseconds kDefaultProviderTimeout{10000};

// Line-oriented, blocking byte stream with read deadlines. Owns its file
// descriptors and (optionally) a child process, killed on destruction.
class FdChannel {
 public:
  FdChannel(int read_fd, int write_fd, pid_t child = -1);
  ~FdChannel();
  FdChannel(const FdChannel&) = delete;
  FdChannel& operator=(const FdChannel&) = delete;

  void write_line(std::string_view line);
  // Line without its newline. ProviderTimeout past the deadline, Provider
  // when the peer closes the stream.
  std::string read_line(std::chrono::milliseconds timeout);

  // Runs `/bin/sh -c command` with its stdin/stdout connected to the channel.
  static std::unique_ptr<FdChannel> spawn(const std::string& command);
  static std::unique_ptr<FdChannel> connect_tcp(const std::string& host, const std::string& port,
                                                std::chrono::milliseconds timeout);

 private:
  void close_all() noexcept;

  int read_fd_;
  int write_fd_;
  pid_t child_;
  std::string buffer_;
};

struct WireOptions {
  std::chrono::milliseconds timeout = kDefaultProviderTimeout;
  // Name used in diagnostics when the peer's hello has none.
  std::string label = "wire";
};

class WireProvider final : public LogitProvider {
 public:
  // Reads the hello frame; any other first frame is a Protocol error.
  WireProvider(std::unique_ptr<FdChannel> channel, WireOptions options = {});

  const ProviderInfo& info() const override { return info_; }
  LogitVector next_logits(QueryId query, std::span<const TokenId> prefix) override;
  bool remote() const noexcept override { return true; }

  // All requests go out before any reply is read when the peer advertised
  // pipelining; otherwise one at a time. Replies come back in order.
  std::vector<LogitVector> next_logits_batch(QueryId query, std::span<const std::vector<TokenId>> prefixes);

  bool pipelined() const noexcept { return pipeline_; }
  bool connected() const noexcept { return channel_ != nullptr; }

 private:
  std::uint64_t send(QueryId query, std::span<const TokenId> prefix);
  LogitVector receive(std::uint64_t id);
  [[noreturn]] void drop_and_rethrow();

  std::unique_ptr<FdChannel> channel_;
  WireOptions options_;
  ProviderInfo info_;
  bool pipeline_ = false;
  std::uint64_t next_id_ = 1;
};

// "tabular:<model.json>", "pipe:<command line>" or "tcp:<host>:<port>".
std::unique_ptr<LogitProvider> open_provider(const std::string& uri, const WireOptions& options = {});

}  // namespace dera
