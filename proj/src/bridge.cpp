#include "dera/bridge.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <mutex>

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include "dera/error.hpp"
#include "dera/format.hpp"
#include "dera/model_io.hpp"
#include "json.hpp"

extern char** environ;

namespace dera {
namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

constexpr std::size_t kMaxLine = std::size_t{64} << 20;

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { std::signal(SIGPIPE, SIG_IGN); });
}

std::string sys_error(const std::string& what) { return what + ": " + std::strerror(errno); }

void append_ids(std::string& out, std::span<const TokenId> ids) {
  out += '[';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(ids[i]);
  }
  out += ']';
}

std::vector<TokenId> ids_field(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_array()) fail(Errc::Protocol, std::string("frame lacks array \"") + key + "\"");
  std::vector<TokenId> ids;
  for (const auto& x : *it) {
    if (!x.is_number_integer()) fail(Errc::Protocol, std::string("non-integer entry in \"") + key + "\"");
    ids.push_back(x.get<TokenId>());
  }
  return ids;
}

std::uint64_t id_field(const json& j) {
  const auto it = j.find("id");
  if (it == j.end() || !it->is_number_unsigned()) fail(Errc::Protocol, "frame lacks a non-negative integer id");
  return it->get<std::uint64_t>();
}

}  // namespace

// --- Frames ----------------------------------------------------------------------

std::string encode_frame(const Frame& frame) {
  std::string out;
  if (const auto* h = std::get_if<HelloFrame>(&frame)) {
    out = "{\"type\":\"hello\",\"v\":" + std::to_string(h->vocab_size) + ",\"eos\":" + std::to_string(h->eos) +
          ",\"name\":" + json(h->name).dump();
    if (h->pipeline) out += ",\"pipeline\":true";
    out += '}';
  } else if (const auto* r = std::get_if<LogitRequest>(&frame)) {
    out = "{\"type\":\"logits_req\",\"id\":" + std::to_string(r->id) + ",\"query\":";
    append_ids(out, r->query);
    out += ",\"prefix\":";
    append_ids(out, r->prefix);
    out += '}';
  } else {
    const auto& resp = std::get<LogitResponse>(frame);
    out = "{\"type\":\"logits_resp\",\"id\":" + std::to_string(resp.id) + ",\"logits\":[";
    for (std::size_t i = 0; i < resp.logits.size(); ++i) {
      if (i) out += ',';
      out += is_masked(resp.logits[i]) ? std::string("\"-inf\"") : format_double(resp.logits[i]);
    }
    out += "]}";
  }
  out += '\n';
  return out;
}

Frame decode_frame(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    fail(Errc::Protocol, std::string("malformed frame: ") + e.what());
  }
  if (!j.is_object()) fail(Errc::Protocol, "frame is not a JSON object");
  const auto type = j.find("type");
  if (type == j.end() || !type->is_string()) fail(Errc::Protocol, "frame has no type");
  const std::string t = type->get<std::string>();

  if (t == "hello") {
    HelloFrame h;
    const auto v = j.find("v");
    const auto eos = j.find("eos");
    if (v == j.end() || !v->is_number_unsigned() || eos == j.end() || !eos->is_number_integer()) {
      fail(Errc::Protocol, "hello needs integer v and eos");
    }
    h.vocab_size = v->get<std::size_t>();
    h.eos = eos->get<TokenId>();
    if (const auto n = j.find("name"); n != j.end()) {
      if (!n->is_string()) fail(Errc::Protocol, "hello name must be a string");
      h.name = n->get<std::string>();
    }
    if (const auto p = j.find("pipeline"); p != j.end()) {
      if (!p->is_boolean()) fail(Errc::Protocol, "hello pipeline flag must be a boolean");
      h.pipeline = p->get<bool>();
    }
    return h;
  }
  if (t == "logits_req") {
    return LogitRequest{id_field(j), ids_field(j, "query"), ids_field(j, "prefix")};
  }
  if (t == "logits_resp") {
    LogitResponse r{id_field(j), {}};
    const auto it = j.find("logits");
    if (it == j.end() || !it->is_array()) fail(Errc::Protocol, "logits_resp lacks a logits array");
    for (const auto& x : *it) {
      if (x.is_number()) {
        r.logits.push_back(x.get<double>());
      } else if (x.is_string() && x.get<std::string>() == "-inf") {
        r.logits.push_back(kMasked);
      } else {
        fail(Errc::Protocol, "logit entries must be numbers or \"-inf\"");
      }
    }
    return r;
  }
  fail(Errc::Protocol, "unknown frame type \"" + t + "\"");
}

// --- FdChannel ---------------------------------------------------------------------

FdChannel::FdChannel(int read_fd, int write_fd, pid_t child)
    : read_fd_(read_fd), write_fd_(write_fd), child_(child) {
  ignore_sigpipe();
}

FdChannel::~FdChannel() { close_all(); }

void FdChannel::close_all() noexcept {
  if (read_fd_ >= 0) ::close(read_fd_);
  if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
  read_fd_ = write_fd_ = -1;
  if (child_ > 0) {
    ::kill(-child_, SIGTERM);
    int status = 0;
    while (::waitpid(child_, &status, 0) < 0 && errno == EINTR) {
    }
    child_ = -1;
  }
}

void FdChannel::write_line(std::string_view line) {
  std::size_t done = 0;
  while (done < line.size()) {
    const ssize_t n = ::write(write_fd_, line.data() + done, line.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(Errc::Provider, sys_error("write to provider failed"));
    }
    done += static_cast<std::size_t>(n);
  }
}

std::string FdChannel::read_line(std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  std::size_t scanned = 0;
  for (;;) {
    const auto nl = buffer_.find('\n', scanned);
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    scanned = buffer_.size();
    if (buffer_.size() > kMaxLine) fail(Errc::Protocol, "frame exceeds 64 MiB");

    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (left.count() <= 0) fail(Errc::ProviderTimeout, "provider did not answer within the timeout");
    pollfd pfd{read_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
    if (ready < 0) {
      if (errno == EINTR) continue;
      fail(Errc::Provider, sys_error("poll failed"));
    }
    if (ready == 0) continue;

    char chunk[65536];
    const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      fail(Errc::Provider, sys_error("read from provider failed"));
    }
    if (n == 0) fail(Errc::Provider, "provider closed the connection");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

std::unique_ptr<FdChannel> FdChannel::spawn(const std::string& command) {
  ignore_sigpipe();
  int to_child[2], from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) fail(Errc::Provider, sys_error("pipe failed"));
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    fail(Errc::Provider, sys_error("pipe failed"));
  }
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);

  const char* argv[] = {"sh", "-c", command.c_str(), nullptr};
  pid_t pid = -1;
  // Own process group, so teardown also reaches anything the shell started.
  posix_spawnattr_t attr;
  posix_spawnattr_init(&attr);
  posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP);
  posix_spawnattr_setpgroup(&attr, 0);
  const int rc = ::posix_spawn(&pid, "/bin/sh", &actions, &attr, const_cast<char* const*>(argv), environ);
  posix_spawnattr_destroy(&attr);
  posix_spawn_file_actions_destroy(&actions);
  ::close(to_child[0]);
  ::close(from_child[1]);
  if (rc != 0) {
    ::close(to_child[1]);
    ::close(from_child[0]);
    errno = rc;
    fail(Errc::Provider, sys_error("cannot start provider command"));
  }
  return std::make_unique<FdChannel>(from_child[0], to_child[1], pid);
}

std::unique_ptr<FdChannel> FdChannel::connect_tcp(const std::string& host, const std::string& port,
                                                  std::chrono::milliseconds timeout) {
  ignore_sigpipe();
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    fail(Errc::Provider, "cannot resolve " + host + ":" + port + ": " + ::gai_strerror(rc));
  }
  std::string last = "no address";
  for (addrinfo* a = res; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC | SOCK_NONBLOCK, a->ai_protocol);
    if (fd < 0) continue;
    int rc = ::connect(fd, a->ai_addr, a->ai_addrlen);
    if (rc != 0 && errno == EINPROGRESS) {
      pollfd pfd{fd, POLLOUT, 0};
      rc = ::poll(&pfd, 1, static_cast<int>(timeout.count())) == 1 ? 0 : -1;
      int err = 0;
      socklen_t len = sizeof err;
      if (rc == 0 && (::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) != 0 || err != 0)) {
        errno = err;
        rc = -1;
      }
      if (rc != 0 && err == 0) errno = ETIMEDOUT;
    }
    if (rc == 0) {
      ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) & ~O_NONBLOCK);
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      ::freeaddrinfo(res);
      return std::make_unique<FdChannel>(fd, fd);
    }
    last = std::strerror(errno);
    ::close(fd);
  }
  ::freeaddrinfo(res);
  fail(Errc::Provider, "cannot connect to " + host + ":" + port + ": " + last);
}

// --- WireProvider --------------------------------------------------------------------

WireProvider::WireProvider(std::unique_ptr<FdChannel> channel, WireOptions options)
    : channel_(std::move(channel)), options_(std::move(options)) {
  if (!channel_) fail(Errc::InvalidArgument, "wire provider needs a channel");
  try {
    const Frame f = decode_frame(channel_->read_line(options_.timeout));
    const auto* hello = std::get_if<HelloFrame>(&f);
    if (!hello) fail(Errc::Protocol, "first frame from the provider must be hello");
    if (hello->vocab_size < 2 || hello->eos < 0 || static_cast<std::size_t>(hello->eos) >= hello->vocab_size) {
      fail(Errc::Protocol, "hello announces an invalid vocabulary");
    }
    info_ = {hello->vocab_size, hello->eos, hello->name.empty() ? options_.label : hello->name};
    pipeline_ = hello->pipeline;
  } catch (...) {
    channel_.reset();
    throw;
  }
}

void WireProvider::drop_and_rethrow() {
  channel_.reset();
  throw;
}

std::uint64_t WireProvider::send(QueryId query, std::span<const TokenId> prefix) {
  const std::uint64_t id = next_id_++;
  channel_->write_line(encode_frame(LogitRequest{id, {query}, {prefix.begin(), prefix.end()}}));
  return id;
}

LogitVector WireProvider::receive(std::uint64_t id) {
  const Frame f = decode_frame(channel_->read_line(options_.timeout));
  const auto* resp = std::get_if<LogitResponse>(&f);
  if (!resp) fail(Errc::Protocol, "expected logits_resp");
  if (resp->id != id) {
    fail(Errc::Protocol, "reply id " + std::to_string(resp->id) + " does not match request " + std::to_string(id));
  }
  if (resp->logits.size() != info_.vocab_size) {
    fail(Errc::Incompatible, "provider sent " + std::to_string(resp->logits.size()) + " logits for V = " +
                                 std::to_string(info_.vocab_size));
  }
  try {
    return LogitVector(resp->logits);
  } catch (const Error& e) {
    fail(Errc::Protocol, std::string("invalid logits: ") + e.what());
  }
}

LogitVector WireProvider::next_logits(QueryId query, std::span<const TokenId> prefix) {
  if (!channel_) fail(Errc::Provider, "connection to '" + info_.name + "' was discarded after a failure");
  try {
    return receive(send(query, prefix));
  } catch (...) {
    drop_and_rethrow();
  }
}

std::vector<LogitVector> WireProvider::next_logits_batch(QueryId query,
                                                         std::span<const std::vector<TokenId>> prefixes) {
  if (!channel_) fail(Errc::Provider, "connection to '" + info_.name + "' was discarded after a failure");
  std::vector<LogitVector> out;
  out.reserve(prefixes.size());
  try {
    if (pipeline_) {
      std::vector<std::uint64_t> ids;
      for (const auto& p : prefixes) ids.push_back(send(query, p));
      for (std::uint64_t id : ids) out.push_back(receive(id));
    } else {
      for (const auto& p : prefixes) out.push_back(receive(send(query, p)));
    }
  } catch (...) {
    drop_and_rethrow();
  }
  return out;
}

// --- URIs ----------------------------------------------------------------------------

std::unique_ptr<LogitProvider> open_provider(const std::string& uri, const WireOptions& options) {
  const auto colon = uri.find(':');
  if (colon == std::string::npos) fail(Errc::InvalidArgument, "provider URI needs a scheme: " + uri);
  const std::string scheme = uri.substr(0, colon);
  const std::string rest = uri.substr(colon + 1);
  if (rest.empty()) fail(Errc::InvalidArgument, "empty provider URI body: " + uri);

  if (scheme == "tabular") {
    auto model = std::make_shared<const TabularLM>(read_model(rest).model);
    return std::make_unique<TabularProvider>(std::move(model), rest);
  }
  WireOptions o = options;
  if (o.label == WireOptions{}.label) o.label = uri;
  if (scheme == "pipe") return std::make_unique<WireProvider>(FdChannel::spawn(rest), o);
  if (scheme == "tcp") {
    const auto sep = rest.rfind(':');
    if (sep == std::string::npos || sep == 0 || sep + 1 == rest.size()) {
      fail(Errc::InvalidArgument, "tcp URI must be tcp:<host>:<port>");
    }
    std::string host = rest.substr(0, sep);
    if (host.size() > 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
    return std::make_unique<WireProvider>(FdChannel::connect_tcp(host, rest.substr(sep + 1), o.timeout), o);
  }
  fail(Errc::InvalidArgument, "unknown provider scheme \"" + scheme + "\"");
}

}  // namespace dera
