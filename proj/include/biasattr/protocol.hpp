/*
 * Copyright 2026 The biasattr Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Remote model backends. Requests and responses are single-line JSON objects
// carrying "v":1, exchanged over a pipe to a child process or a TCP socket.
//
//   {"v":1,"op":"caps"}
//   {"v":1,"op":"tokenize","text":"..."}
//   {"v":1,"op":"snapshot","ids":[...],"layer":"proj_input"|"hidden1"}
//   {"v":1,"op":"proj_slice","token_ids":[...]}
//   {"v":1,"op":"seq_logprob","ids":[...],"span":[s,e],
//    "mask":{"idx":[...],"c":v}|null}
//
// Replies are {"v":1,"ok":true,"data":...} or {"v":1,"ok":false,"err":"..."}.
// A mask may also carry "layer" and "scope" when they differ from
// proj_input and all positions.

#pragma once

#include <netdb.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <istream>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "biasattr/common.hpp"
#include "biasattr/hashing.hpp"
#include "biasattr/model.hpp"
#include "json.hpp"

namespace biasattr::protocol {

inline constexpr int kVersion = 1;
inline constexpr int kDefaultRetries = 2;

// -- Transports ----------------------------------------------------------------

// Sends one request line and returns one response line. Failures are
// kBackend errors. Reset() re-establishes a broken connection.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual std::string RoundTrip(const std::string& request) = 0;
  virtual void Reset() {}
};

namespace internal {

inline void WriteAll(int fd, std::string_view bytes) {
  while (!bytes.empty()) {
    const ssize_t n = ::write(fd, bytes.data(), bytes.size());
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      Fail(ErrorKind::kBackend, "write failed: ", std::strerror(errno));
    }
    bytes.remove_prefix(static_cast<std::size_t>(n));
  }
}

// Buffered newline-delimited reads from a file descriptor.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}

  // False on clean end of stream before any byte of a new line.
  bool ReadLine(std::string& line) {
    for (;;) {
      const std::size_t nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return true;
      }
      char chunk[4096];
      const ssize_t n = ::read(fd_, chunk, sizeof(chunk));
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) {
        Fail(ErrorKind::kBackend, "read failed: ", std::strerror(errno));
      }
      if (n == 0) {
        if (buffer_.empty()) return false;
        Fail(ErrorKind::kBackend, "stream ended inside a message");
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buffer_;
};

}  // namespace internal

// A child process speaking the protocol on its standard input and output.
class PipeTransport : public Transport {
 public:
  explicit PipeTransport(std::vector<std::string> argv)
      : argv_(std::move(argv)) {
    Require(!argv_.empty(), "pipe transport needs a command");
    Spawn();
  }

  ~PipeTransport() override { Stop(); }

  std::string RoundTrip(const std::string& request) override {
    internal::WriteAll(to_child_, request + "\n");
    std::string line;
    if (!reader_->ReadLine(line)) {
      Fail(ErrorKind::kBackend, "backend process closed its output");
    }
    return line;
  }

  void Reset() override {
    Stop();
    Spawn();
  }

 private:
  void Spawn() {
    // A dead child must surface as a write error, not kill this process.
    ::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2];
    int out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) {
      Fail(ErrorKind::kBackend, "pipe() failed: ", std::strerror(errno));
    }
    pid_ = ::fork();
    if (pid_ < 0) Fail(ErrorKind::kBackend, "fork() failed");
    if (pid_ == 0) {
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      ::close(out_pipe[0]);
      ::close(out_pipe[1]);
      std::vector<char*> args;
      for (auto& a : argv_) args.push_back(a.data());
      args.push_back(nullptr);
      ::execvp(args[0], args.data());
      ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    reader_ = std::make_unique<internal::LineReader>(from_child_);
  }

  void Stop() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  std::vector<std::string> argv_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::unique_ptr<internal::LineReader> reader_;
};

class TcpTransport : public Transport {
 public:
  TcpTransport(std::string host, int port)
      : host_(std::move(host)), port_(port) {
    Connect();
  }

  ~TcpTransport() override { Close(); }

  std::string RoundTrip(const std::string& request) override {
    if (fd_ < 0) Connect();
    internal::WriteAll(fd_, request + "\n");
    std::string line;
    if (!reader_->ReadLine(line)) {
      Fail(ErrorKind::kBackend, "server closed the connection");
    }
    return line;
  }

  void Reset() override {
    Close();
    Connect();
  }

 private:
  void Connect() {
    ::signal(SIGPIPE, SIG_IGN);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(port_);
    if (::getaddrinfo(host_.c_str(), port.c_str(), &hints, &res) != 0) {
      Fail(ErrorKind::kBackend, "cannot resolve ", host_);
    }
    for (addrinfo* p = res; p != nullptr; p = p->ai_next) {
      const int fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) {
        fd_ = fd;
        break;
      }
      ::close(fd);
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) {
      Fail(ErrorKind::kBackend, "cannot connect to ", host_, ":", port_);
    }
    reader_ = std::make_unique<internal::LineReader>(fd_);
  }

  void Close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  std::string host_;
  int port_;
  int fd_ = -1;
  std::unique_ptr<internal::LineReader> reader_;
};

// Golden transcripts: alternating "> request" and "< response" lines.
struct TranscriptEntry {
  std::string request;
  std::string response;
};

inline std::vector<TranscriptEntry> ParseTranscript(std::istream& in) {
  std::vector<TranscriptEntry> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    if (line.rfind("> ", 0) == 0) {
      out.push_back({line.substr(2), {}});
    } else if (line.rfind("< ", 0) == 0) {
      if (out.empty() || !out.back().response.empty()) {
        Fail(ErrorKind::kFormat, "transcript line ", number,
             ": response without a request");
      }
      out.back().response = line.substr(2);
    } else {
      Fail(ErrorKind::kFormat, "transcript line ", number,
           ": expected '> ' or '< ' prefix");
    }
  }
  for (const auto& e : out) {
    if (e.response.empty()) {
      Fail(ErrorKind::kFormat, "transcript ends with an unanswered request");
    }
  }
  return out;
}

inline std::vector<TranscriptEntry> LoadTranscript(const std::string& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kConfig, "cannot open transcript ", path);
  return ParseTranscript(in);
}

// Answers requests from a recorded transcript, in order. Any deviation from
// the recorded request stream is an error.
class ReplayTransport : public Transport {
 public:
  explicit ReplayTransport(std::vector<TranscriptEntry> entries)
      : entries_(std::move(entries)) {}

  std::string RoundTrip(const std::string& request) override {
    if (next_ >= entries_.size()) {
      Fail(ErrorKind::kBackend, "transcript exhausted after ", next_,
           " exchanges; unexpected request ", request);
    }
    const TranscriptEntry& e = entries_[next_];
    if (e.request != request) {
      Fail(ErrorKind::kBackend, "transcript mismatch at exchange ", next_,
           ": expected ", e.request, " but got ", request);
    }
    ++next_;
    return e.response;
  }

  std::size_t consumed() const { return next_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<TranscriptEntry> entries_;
  std::size_t next_ = 0;
};

// -- Message encoding ----------------------------------------------------------

inline nlohmann::json VecToJson(const Vec& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    Require(std::isfinite(v[i]), "refusing to send a non-finite value");
    out.push_back(v[i]);
  }
  return out;
}

inline Vec VecFromJson(const nlohmann::json& j, std::string_view what) {
  if (!j.is_array()) Fail(ErrorKind::kBackend, what, " is not an array");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) {
      Fail(ErrorKind::kBackend, what, "[", i, "] is not a number");
    }
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    if (!std::isfinite(v[static_cast<Eigen::Index>(i)])) {
      Fail(ErrorKind::kBackend, what, "[", i, "] is not finite");
    }
  }
  return v;
}

inline nlohmann::json MaskToWire(const InterventionMask* mask,
                                 MaskScope scope) {
  if (mask == nullptr) return nullptr;
  nlohmann::json j = {{"idx", mask->indices()}, {"c", mask->clamp_value()}};
  if (mask->layer() != LayerTag::kProjectionInput) {
    j["layer"] = LayerTagName(mask->layer());
  }
  if (scope != MaskScope::kAllPositions) j["scope"] = MaskScopeName(scope);
  return j;
}

inline std::string Dump(const nlohmann::json& j) { return j.dump(); }

// -- Client --------------------------------------------------------------------

// A ModelBackend that forwards every query to a protocol server. Calls are
// serialized over one connection; transport failures are retried up to
// `retries` times after a reconnect, server-reported errors never are.
class RemoteBackend : public ModelBackend {
 public:
  explicit RemoteBackend(std::unique_ptr<Transport> transport,
                         int retries = kDefaultRetries)
      : transport_(std::move(transport)), retries_(retries) {
    Require(retries_ >= 0, "retries must be non-negative");
    caps_json_ = Call({{"op", "caps"}});
    try {
      caps_.vocab_size = caps_json_.at("vocab_size").get<std::int64_t>();
      caps_.hidden_dim = caps_json_.at("hidden_dim").get<std::int64_t>();
      caps_.supports_hidden1 = caps_json_.value("supports_hidden1", false);
      caps_.hidden1_dim = caps_json_.value("hidden1_dim", std::int64_t{0});
      caps_.tokenizer_id = caps_json_.value("tokenizer_id", std::string());
      if (caps_json_.contains("unk_id") && !caps_json_["unk_id"].is_null()) {
        unknown_id_ = caps_json_["unk_id"].get<TokenId>();
      }
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorKind::kBackend, "malformed caps reply: ", e.what());
    }
    // Embeddings are not part of the protocol, whatever the server says.
    caps_.supports_embeddings = false;
    if (caps_.vocab_size <= 0 || caps_.hidden_dim <= 0) {
      Fail(ErrorKind::kBackend, "caps reply has non-positive dimensions");
    }
    fingerprint_ = caps_json_.contains("fingerprint")
                       ? caps_json_["fingerprint"].get<std::string>()
                       : Sha256Hex(Dump(caps_json_));
  }

  BackendCapabilities Capabilities() const override { return caps_; }

  TokenSeq Tokenize(std::string_view text) const override {
    const nlohmann::json data =
        Call({{"op", "tokenize"}, {"text", std::string(text)}});
    TokenSeq seq;
    seq.text = std::string(text);
    try {
      seq.ids = data.at("ids").get<std::vector<TokenId>>();
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorKind::kBackend, "malformed tokenize reply: ", e.what());
    }
    return seq;
  }

  HiddenSnapshot Snapshot(const TokenSeq& prompt,
                          LayerTag layer) const override {
    const std::int64_t dim = caps_.DimAt(layer);
    const nlohmann::json data = Call(
        {{"op", "snapshot"}, {"ids", prompt.ids}, {"layer", LayerTagName(layer)}});
    Vec h = VecFromJson(data.contains("h") ? data["h"] : nlohmann::json(), "h");
    if (h.size() != dim) {
      Fail(ErrorKind::kBackend, "snapshot has length ", h.size(),
           ", expected ", dim);
    }
    return {std::move(h), layer};
  }

  math::ProjectionSlice ProjectionSlice(
      std::span<const TokenId> token_ids) const override {
    const nlohmann::json data =
        Call({{"op", "proj_slice"},
              {"token_ids", std::vector<TokenId>(token_ids.begin(),
                                                 token_ids.end())}});
    const Vec rows = VecFromJson(
        data.contains("rows") ? data["rows"] : nlohmann::json(), "rows");
    const Vec bias = VecFromJson(
        data.contains("bias") ? data["bias"] : nlohmann::json(), "bias");
    const auto n = static_cast<Eigen::Index>(token_ids.size());
    if (bias.size() != n || rows.size() != n * caps_.hidden_dim) {
      Fail(ErrorKind::kBackend, "proj_slice reply has the wrong shape");
    }
    math::ProjectionSlice slice{Mat(n, caps_.hidden_dim), bias};
    for (Eigen::Index k = 0; k < n; ++k) {
      slice.rows.row(k) = rows.segment(k * caps_.hidden_dim, caps_.hidden_dim);
    }
    return slice;
  }

  std::vector<double> SpanLogprobs(const TokenSeq& tokens, TokenSpan span,
                                   const InterventionMask* mask,
                                   MaskScope scope) const override {
    const nlohmann::json data =
        Call({{"op", "seq_logprob"},
              {"ids", tokens.ids},
              {"span", {span.begin, span.end}},
              {"mask", MaskToWire(mask, scope)}});
    const Vec lp = VecFromJson(
        data.contains("logprobs") ? data["logprobs"] : nlohmann::json(),
        "logprobs");
    if (static_cast<std::size_t>(lp.size()) != span.size()) {
      Fail(ErrorKind::kBackend, "seq_logprob returned ", lp.size(),
           " values for a span of ", span.size());
    }
    return {lp.data(), lp.data() + lp.size()};
  }

  // Full projection times the (masked) projection input. The projection is
  // fetched once and cached.
  Vec NextTokenLogits(const TokenSeq& prompt,
                      const InterventionMask* mask) const override {
    if (mask != nullptr && mask->layer() != LayerTag::kProjectionInput) {
      Fail(ErrorKind::kCapability,
           "remote backends only accept masks at proj_input for next-token "
           "logits");
    }
    const Vec h = ProjectionInput(*this, prompt, mask);
    const math::ProjectionSlice& full = FullProjection();
    return full.rows * h + full.bias;
  }

  std::optional<TokenId> UnknownTokenId() const override { return unknown_id_; }

  std::string Fingerprint() const override { return fingerprint_; }

  const nlohmann::json& caps_json() const { return caps_json_; }

 private:
  const math::ProjectionSlice& FullProjection() const {
    std::call_once(full_once_, [this] {
      std::vector<TokenId> all(static_cast<std::size_t>(caps_.vocab_size));
      for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = static_cast<TokenId>(i);
      }
      full_ = ProjectionSlice(all);
    });
    return full_;
  }

  nlohmann::json Call(nlohmann::json request) const {
    nlohmann::json ordered = {{"v", kVersion}};
    ordered.update(request);
    const std::string line = Dump(ordered);
    std::lock_guard<std::mutex> lock(mutex_);
    for (int attempt = 0;; ++attempt) {
      std::string reply;
      try {
        reply = transport_->RoundTrip(line);
      } catch (const Error& e) {
        if (attempt >= retries_) {
          Fail(ErrorKind::kBackend, "request failed after ", attempt + 1,
               " attempt(s): ", e.what());
        }
        try {
          transport_->Reset();
        } catch (const Error&) {
          // The next attempt reports the failure.
        }
        continue;
      }
      return ParseReply(reply, request.value("op", std::string()));
    }
  }

  static nlohmann::json ParseReply(const std::string& reply,
                                   const std::string& op) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(reply);
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorKind::kBackend, op, ": unparseable reply: ", e.what());
    }
    if (!j.is_object() || j.value("v", 0) != kVersion) {
      Fail(ErrorKind::kBackend, op, ": reply lacks protocol version ", kVersion);
    }
    if (!j.value("ok", false)) {
      Fail(ErrorKind::kBackend, op, ": server error: ",
           j.value("err", std::string("(no message)")));
    }
    if (!j.contains("data")) Fail(ErrorKind::kBackend, op, ": reply has no data");
    return j["data"];
  }

  std::unique_ptr<Transport> transport_;
  int retries_;
  mutable std::mutex mutex_;
  nlohmann::json caps_json_;
  BackendCapabilities caps_;
  std::optional<TokenId> unknown_id_;
  std::string fingerprint_;
  mutable std::once_flag full_once_;
  mutable math::ProjectionSlice full_;
};

// -- Server --------------------------------------------------------------------

// Answers protocol requests from any in-process backend. Never throws on bad
// input; every failure becomes an {"ok":false} reply.
class ProtocolServer {
 public:
  explicit ProtocolServer(const ModelBackend& backend) : backend_(backend) {}

  std::string Handle(const std::string& line) const {
    nlohmann::json reply = {{"v", kVersion}};
    try {
      const nlohmann::json request = nlohmann::json::parse(line);
      if (!request.is_object()) throw Error(ErrorKind::kConfig, "not an object");
      if (request.value("v", 0) != kVersion) {
        throw Error(ErrorKind::kConfig, "unsupported protocol version");
      }
      reply["data"] = Dispatch(request);
      reply["ok"] = true;
    } catch (const std::exception& e) {
      reply.erase("data");
      reply["ok"] = false;
      reply["err"] = e.what();
    }
    return Dump(reply);
  }

  // Serves until end of input. When `record` is set, every exchange is
  // appended to it in transcript form.
  void Serve(std::istream& in, std::ostream& out,
             std::ostream* record = nullptr) const {
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string reply = Handle(line);
      out << reply << '\n' << std::flush;
      if (record != nullptr) {
        *record << "> " << line << "\n< " << reply << '\n' << std::flush;
      }
    }
  }

  // Accepts connections on `port` one at a time, forever, or until
  // `max_connections` have been served when it is positive.
  void ServeTcp(int port, std::ostream* record = nullptr,
                int max_connections = 0,
                const std::function<void(int)>& on_listen = nullptr) const {
    ::signal(SIGPIPE, SIG_IGN);
    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listener < 0) Fail(ErrorKind::kBackend, "socket() failed");
    const int one = 1;
    ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) !=
            0 ||
        ::listen(listener, 4) != 0) {
      ::close(listener);
      Fail(ErrorKind::kBackend, "cannot listen on port ", port, ": ",
           std::strerror(errno));
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
    if (on_listen) on_listen(ntohs(addr.sin_port));
    for (int served = 0; max_connections <= 0 || served < max_connections;
         ++served) {
      const int fd = ::accept(listener, nullptr, nullptr);
      if (fd < 0) continue;
      internal::LineReader reader(fd);
      try {
        for (std::string line; reader.ReadLine(line);) {
          const std::string reply = Handle(line);
          internal::WriteAll(fd, reply + "\n");
          if (record != nullptr) {
            *record << "> " << line << "\n< " << reply << '\n' << std::flush;
          }
        }
      } catch (const Error&) {
        // A broken client ends its connection, not the server.
      }
      ::close(fd);
    }
    ::close(listener);
  }

 private:
  static std::vector<TokenId> Ids(const nlohmann::json& request,
                                  const char* key) {
    if (!request.contains(key) || !request[key].is_array()) {
      throw Error(ErrorKind::kConfig, StrCat("missing array field '", key, "'"));
    }
    return request[key].get<std::vector<TokenId>>();
  }

  void CheckIds(const std::vector<TokenId>& ids) const {
    const std::int64_t vocab = backend_.Capabilities().vocab_size;
    Require(!ids.empty(), "token sequence is empty");
    for (TokenId id : ids) {
      Require(id >= 0 && id < vocab, "unknown token id ", id);
    }
  }

  nlohmann::json Dispatch(const nlohmann::json& request) const {
    const std::string op = request.value("op", std::string());
    if (op == "caps") {
      const BackendCapabilities c = backend_.Capabilities();
      nlohmann::json data = {{"vocab_size", c.vocab_size},
                             {"hidden_dim", c.hidden_dim},
                             {"supports_hidden1", c.supports_hidden1},
                             {"tokenizer_id", c.tokenizer_id},
                             {"fingerprint", backend_.Fingerprint()}};
      if (c.supports_hidden1) data["hidden1_dim"] = c.hidden1_dim;
      if (auto unk = backend_.UnknownTokenId()) data["unk_id"] = *unk;
      return data;
    }
    if (op == "tokenize") {
      if (!request.contains("text") || !request["text"].is_string()) {
        throw Error(ErrorKind::kConfig, "missing string field 'text'");
      }
      return {{"ids", backend_.Tokenize(request["text"].get<std::string>()).ids}};
    }
    if (op == "snapshot") {
      TokenSeq seq{Ids(request, "ids"), {}};
      CheckIds(seq.ids);
      const LayerTag layer = ParseLayerTag(
          request.value("layer", std::string(LayerTagName(
                                     LayerTag::kProjectionInput))));
      backend_.Capabilities().DimAt(layer);
      return {{"h", VecToJson(backend_.Snapshot(seq, layer).h)}};
    }
    if (op == "proj_slice") {
      const std::vector<TokenId> ids = Ids(request, "token_ids");
      CheckIds(ids);
      const math::ProjectionSlice s = backend_.ProjectionSlice(ids);
      Mat rows_major = s.rows;
      Vec flat(rows_major.size());
      for (Eigen::Index k = 0; k < s.rows.rows(); ++k) {
        flat.segment(k * s.rows.cols(), s.rows.cols()) = s.rows.row(k);
      }
      return {{"rows", VecToJson(flat)}, {"bias", VecToJson(s.bias)}};
    }
    if (op == "seq_logprob") {
      TokenSeq seq{Ids(request, "ids"), {}};
      CheckIds(seq.ids);
      const auto span = request.at("span").get<std::vector<std::size_t>>();
      Require(span.size() == 2, "span must be [begin, end]");
      Require(span[0] < span[1] && span[1] <= seq.size(), "invalid span [",
              span[0], ", ", span[1], ")");
      std::optional<InterventionMask> mask;
      MaskScope scope = MaskScope::kAllPositions;
      if (request.contains("mask") && !request["mask"].is_null()) {
        const nlohmann::json& m = request["mask"];
        const LayerTag layer = ParseLayerTag(
            m.value("layer", std::string(LayerTagName(
                                 LayerTag::kProjectionInput))));
        mask.emplace(m.at("idx").get<std::vector<int>>(),
                     m.at("c").get<double>(), layer);
        mask->CheckFits(backend_.Capabilities().DimAt(layer));
        const std::string s = m.value("scope", std::string("all_positions"));
        if (s == MaskScopeName(MaskScope::kFinalPositionOnly)) {
          scope = MaskScope::kFinalPositionOnly;
        } else if (s != MaskScopeName(MaskScope::kAllPositions)) {
          throw Error(ErrorKind::kConfig, StrCat("unknown mask scope '", s, "'"));
        }
      }
      const std::vector<double> lp = backend_.SpanLogprobs(
          seq, {span[0], span[1]}, mask ? &*mask : nullptr, scope);
      return {{"logprobs",
               VecToJson(Eigen::Map<const Vec>(
                   lp.data(), static_cast<Eigen::Index>(lp.size())))}};
    }
    throw Error(ErrorKind::kConfig, StrCat("unknown op '", op, "'"));
  }

  const ModelBackend& backend_;
};

// In-process transport straight into a server; used for tests and recording.
class LoopbackTransport : public Transport {
 public:
  explicit LoopbackTransport(const ProtocolServer& server,
                             std::ostream* record = nullptr)
      : server_(server), record_(record) {}

  std::string RoundTrip(const std::string& request) override {
    std::string reply = server_.Handle(request);
    if (record_ != nullptr) {
      *record_ << "> " << request << "\n< " << reply << '\n';
    }
    return reply;
  }

 private:
  const ProtocolServer& server_;
  std::ostream* record_;
};

}  // namespace biasattr::protocol
