// Reference peer for the wire protocol: serves a tabular model (or a fixed
// vector) over stdin/stdout or TCP. The fault switches exist for testing the
// engine's error handling.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "CLI11.hpp"
#include "dera/bridge.hpp"
#include "dera/error.hpp"
#include "dera/model_io.hpp"

namespace {

struct Options {
  std::string model_path;
  std::string fixed;
  std::size_t fixed_eos = 0;
  std::string name = "stub";
  bool pipeline = false;
  int listen_port = -1;
  int max_connections = 0;

  bool no_hello = false;
  bool bad_id = false;
  bool garbage = false;
  bool short_reply = false;
  long delay_ms = 0;
  long vocab_override = -1;
  long close_after = -1;
};

class Source {
 public:
  explicit Source(const Options& o) {
    if (!o.fixed.empty()) {
      std::stringstream ss(o.fixed);
      std::string item;
      while (std::getline(ss, item, ',')) fixed_.push_back(item == "-inf" ? dera::kMasked : std::stod(item));
      vocab_size_ = fixed_.size();
      eos_ = static_cast<dera::TokenId>(o.fixed_eos);
    } else {
      model_ = std::make_unique<dera::TabularLM>(dera::read_model(o.model_path).model);
      vocab_size_ = model_->vocab().size();
      eos_ = model_->vocab().eos();
    }
  }

  std::vector<double> logits(const dera::LogitRequest& req) const {
    if (model_) {
      const dera::QueryId q = req.query.empty() ? 0 : req.query.front();
      const auto row = model_->logits(q, req.prefix).values();
      return {row.begin(), row.end()};
    }
    return fixed_;
  }

  std::size_t vocab_size() const { return vocab_size_; }
  dera::TokenId eos() const { return eos_; }

 private:
  std::unique_ptr<dera::TabularLM> model_;
  std::vector<double> fixed_;
  std::size_t vocab_size_ = 0;
  dera::TokenId eos_ = 0;
};

bool write_all(int fd, const std::string& s) {
  std::size_t done = 0;
  while (done < s.size()) {
    const ssize_t n = ::write(fd, s.data() + done, s.size() - done);
    if (n <= 0) return false;
    done += static_cast<std::size_t>(n);
  }
  return true;
}

// Serves one connection until the peer hangs up or close_after is reached.
void serve(const Options& o, const Source& src, int in_fd, int out_fd) {
  if (o.no_hello) {
    // Skips the handshake and opens with a reply frame instead.
    if (!write_all(out_fd, dera::encode_frame(dera::LogitResponse{0, src.logits({})}))) return;
  } else {
    dera::HelloFrame hello;
    hello.vocab_size = o.vocab_override >= 0 ? static_cast<std::size_t>(o.vocab_override) : src.vocab_size();
    hello.eos = src.eos();
    hello.name = o.name;
    hello.pipeline = o.pipeline;
    if (!write_all(out_fd, dera::encode_frame(hello))) return;
  }
  std::string buffer;
  long served = 0;
  char chunk[65536];
  for (;;) {
    const auto nl = buffer.find('\n');
    if (nl == std::string::npos) {
      const ssize_t n = ::read(in_fd, chunk, sizeof chunk);
      if (n <= 0) return;
      buffer.append(chunk, static_cast<std::size_t>(n));
      continue;
    }
    const std::string line = buffer.substr(0, nl);
    buffer.erase(0, nl + 1);
    if (line.empty()) continue;

    const dera::Frame f = dera::decode_frame(line);
    const auto* req = std::get_if<dera::LogitRequest>(&f);
    if (!req) throw dera::Error(dera::Errc::Protocol, "stub expected logits_req");
    if (o.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(o.delay_ms));

    std::string reply;
    if (o.garbage) {
      reply = "this is not json\n";
    } else {
      dera::LogitResponse resp{o.bad_id ? req->id + 7 : req->id, src.logits(*req)};
      if (o.short_reply && !resp.logits.empty()) resp.logits.pop_back();
      reply = dera::encode_frame(resp);
    }
    if (!write_all(out_fd, reply)) return;
    if (o.close_after >= 0 && ++served >= o.close_after) return;
  }
}

int listen_and_serve(const Options& o, const Source& src) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw dera::Error(dera::Errc::Io, "socket failed");
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(o.listen_port));
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 8) != 0) {
    throw dera::Error(dera::Errc::Io, "cannot listen on port " + std::to_string(o.listen_port));
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  std::cout << "port " << ntohs(addr.sin_port) << std::endl;

  for (int served = 0; o.max_connections <= 0 || served < o.max_connections; ++served) {
    const int conn = ::accept(fd, nullptr, nullptr);
    if (conn < 0) continue;
    try {
      serve(o, src, conn, conn);
    } catch (const std::exception& e) {
      std::cerr << "dera_provider_stub: " << e.what() << '\n';
    }
    ::close(conn);
  }
  ::close(fd);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Serve logits over the dera wire protocol"};
  auto* model = app.add_option("--model", o.model_path, "Model JSON to serve");
  auto* fixed = app.add_option("--fixed", o.fixed, "Comma-separated logits returned for every request");
  app.add_option("--fixed-eos", o.fixed_eos, "eos index announced with --fixed");
  model->excludes(fixed);
  app.add_option("--name", o.name, "Name announced in hello");
  app.add_flag("--pipeline", o.pipeline, "Advertise pipelining");
  app.add_option("--listen", o.listen_port, "Serve TCP on 127.0.0.1:<port> (0 picks a port, printed on stdout)");
  app.add_option("--max-connections", o.max_connections, "Exit after this many TCP connections (0: never)");
  app.add_flag("--no-hello", o.no_hello, "Fault: open with a logits_resp frame instead of hello");
  app.add_flag("--bad-id", o.bad_id, "Fault: reply with the wrong id");
  app.add_flag("--garbage", o.garbage, "Fault: reply with a non-JSON line");
  app.add_flag("--short", o.short_reply, "Fault: reply with V-1 logits");
  app.add_option("--delay-ms", o.delay_ms, "Fault: sleep before every reply");
  app.add_option("--vocab-override", o.vocab_override, "Fault: announce this vocabulary size");
  app.add_option("--close-after", o.close_after, "Fault: hang up after this many replies");
  CLI11_PARSE(app, argc, argv);
  if (o.model_path.empty() && o.fixed.empty()) {
    std::cerr << "dera_provider_stub: need --model or --fixed\n";
    return 2;
  }
  try {
    const Source src(o);
    if (o.listen_port >= 0) return listen_and_serve(o, src);
    serve(o, src, STDIN_FILENO, STDOUT_FILENO);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "dera_provider_stub: " << e.what() << '\n';
    return 1;
  }
}
