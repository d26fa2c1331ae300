// SPDX-License-Identifier: Apache-2.0

#pragma once

/**
 * Client for an external scorer process (e.g. a COMET wrapper).
 *
 * Wire protocol, one request per line on the child's stdin:
 *
 *     src<TAB>mt<TAB>ref<LF>
 *
 * Inside a field, backslash, TAB and LF are written as `\\`, `\t` and `\n`.
 * An empty line ends a batch and asks the scorer to flush. The child answers
 * with one decimal number per line on stdout, in request order.
 */

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "mbrforge/error.hpp"
#include "mbrforge/text.hpp"

namespace mbrforge::bridge {

struct ScoreRequest {
  Segment src;
  Segment mt;
  Segment ref;

  friend bool operator==(const ScoreRequest&, const ScoreRequest&) = default;
};

struct BridgeConfig {
  static constexpr std::size_t kMaxBatchSize = 1024;

  /// argv of the scorer; the environment is inherited unchanged.
  std::vector<std::string> command;
  std::size_t batch_size = 32;
  /// Longest wait for the next response line before giving up.
  std::chrono::milliseconds timeout{60'000};
  bool restart_on_failure = false;
  bool require_src = false;
  bool require_ref = false;

  /// Runs `command_line` through /bin/sh.
  static BridgeConfig shell(const std::string& command_line) {
    BridgeConfig c;
    c.command = {"/bin/sh", "-c", command_line};
    return c;
  }
};

inline std::string escape_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string unescape_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 1 == s.size()) throw DataError("dangling backslash in escaped field");
    switch (s[++i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      default: throw DataError(std::string("unknown escape '\\") + s[i] + "'");
    }
  }
  return out;
}

inline std::string encode_request(const ScoreRequest& r) {
  return escape_field(r.src) + '\t' + escape_field(r.mt) + '\t' + escape_field(r.ref) + '\n';
}

/// Inverse of encode_request for a single line without its LF.
inline ScoreRequest decode_request(std::string_view line) {
  auto t1 = line.find('\t');
  auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
  if (t2 == std::string_view::npos || line.find('\t', t2 + 1) != std::string_view::npos) {
    throw DataError("request line must have exactly three TAB-separated fields");
  }
  return {unescape_field(line.substr(0, t1)), unescape_field(line.substr(t1 + 1, t2 - t1 - 1)),
          unescape_field(line.substr(t2 + 1))};
}

/// Parses one response line. Surrounding blanks and a CR are tolerated;
/// anything else that is not a finite decimal number is rejected.
inline std::optional<double> parse_score(std::string_view line) {
  while (!line.empty() && text::is_space(line.front())) line.remove_prefix(1);
  while (!line.empty() && text::is_space(line.back())) line.remove_suffix(1);
  if (line.empty()) return std::nullopt;
  std::string buf(line);
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(buf.c_str(), &end);
  if (end != buf.c_str() + buf.size() || errno == ERANGE || !std::isfinite(v)) return std::nullopt;
  return v;
}

/// A running scorer child with pipes to its stdin and stdout.
class ScorerProcess {
 public:
  explicit ScorerProcess(const std::vector<std::string>& command) { spawn(command); }
  ScorerProcess(const ScorerProcess&) = delete;
  ScorerProcess& operator=(const ScorerProcess&) = delete;
  ~ScorerProcess() { terminate(); }

  int stdin_fd() const { return in_fd_; }
  int stdout_fd() const { return out_fd_; }
  pid_t pid() const { return pid_; }

  void close_stdin() {
    if (in_fd_ >= 0) ::close(in_fd_);
    in_fd_ = -1;
  }

  /// Closes the pipes and reaps the child, killing it if it lingers.
  void terminate() {
    close_stdin();
    if (out_fd_ >= 0) ::close(out_fd_);
    out_fd_ = -1;
    if (pid_ <= 0) return;
    for (int i = 0; i < 200; ++i) {
      int status = 0;
      pid_t r = ::waitpid(pid_, &status, WNOHANG);
      if (r == pid_ || (r < 0 && errno != EINTR)) {
        pid_ = -1;
        return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    ::kill(pid_, SIGKILL);
    int status = 0;
    while (::waitpid(pid_, &status, 0) < 0 && errno == EINTR) {
    }
    pid_ = -1;
  }

 private:
  void spawn(const std::vector<std::string>& command) {
    if (command.empty()) throw BridgeError(BridgeError::Reason::Spawn, "empty scorer command");
    int to_child[2], from_child[2], status_pipe[2];
    if (::pipe2(to_child, O_CLOEXEC) != 0) throw_spawn("pipe");
    if (::pipe2(from_child, O_CLOEXEC) != 0) {
      close_pair(to_child);
      throw_spawn("pipe");
    }
    if (::pipe2(status_pipe, O_CLOEXEC) != 0) {
      close_pair(to_child);
      close_pair(from_child);
      throw_spawn("pipe");
    }
    std::vector<char*> argv;
    for (const auto& a : command) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);

    pid_t pid = ::fork();
    if (pid < 0) {
      close_pair(to_child);
      close_pair(from_child);
      close_pair(status_pipe);
      throw_spawn("fork");
    }
    if (pid == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::signal(SIGPIPE, SIG_DFL);
      ::execvp(argv[0], argv.data());
      int err = errno;
      [[maybe_unused]] auto n = ::write(status_pipe[1], &err, sizeof err);
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::close(status_pipe[1]);
    int err = 0;
    ssize_t n;
    while ((n = ::read(status_pipe[0], &err, sizeof err)) < 0 && errno == EINTR) {
    }
    ::close(status_pipe[0]);
    pid_ = pid;
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
    if (n == static_cast<ssize_t>(sizeof err)) {
      terminate();
      throw BridgeError(BridgeError::Reason::Spawn,
                        "cannot start scorer '" + command.front() + "': " + std::strerror(err));
    }
    ::fcntl(in_fd_, F_SETFL, ::fcntl(in_fd_, F_GETFL) | O_NONBLOCK);
  }

  static void close_pair(int p[2]) {
    ::close(p[0]);
    ::close(p[1]);
  }

  [[noreturn]] static void throw_spawn(const char* what) {
    throw BridgeError(BridgeError::Reason::Spawn,
                      std::string("cannot start scorer: ") + what + ": " + std::strerror(errno));
  }

  pid_t pid_ = -1;
  int in_fd_ = -1;
  int out_fd_ = -1;
};

/// Owns one scorer process and feeds it batches. Not thread-safe: use one
/// client per worker.
class BridgeClient {
 public:
  explicit BridgeClient(BridgeConfig config) : config_(std::move(config)) {
    if (config_.batch_size == 0 || config_.batch_size > BridgeConfig::kMaxBatchSize) {
      throw UsageError("bridge batch size must be in [1, " +
                       std::to_string(BridgeConfig::kMaxBatchSize) + "]");
    }
    ignore_sigpipe();
  }

  const BridgeConfig& config() const { return config_; }

  /// Number of times the scorer had to be restarted after a crash.
  std::size_t restarts() const { return restarts_; }

  std::vector<double> score(std::span<const ScoreRequest> requests) {
    for (std::size_t i = 0; i < requests.size(); ++i) validate(requests[i], i);
    std::vector<double> scores;
    scores.reserve(requests.size());
    for (std::size_t b = 0; b < requests.size(); b += config_.batch_size) {
      auto e = std::min(requests.size(), b + config_.batch_size);
      run_batch(requests, b, e, scores);
    }
    return scores;
  }

 private:
  static void ignore_sigpipe() {
    static const bool once = [] {
      ::signal(SIGPIPE, SIG_IGN);
      return true;
    }();
    (void)once;
  }

  void validate(const ScoreRequest& r, std::size_t index) const {
    auto bad = [&](const char* field) {
      throw DataError("score request " + std::to_string(index) + ": empty " + field);
    };
    if (r.mt.empty()) bad("mt");
    if (config_.require_src && r.src.empty()) bad("src");
    if (config_.require_ref && r.ref.empty()) bad("ref");
  }

  ScorerProcess& process() {
    if (!proc_) proc_.emplace(config_.command);
    return *proc_;
  }

  void run_batch(std::span<const ScoreRequest> requests, std::size_t begin, std::size_t end,
                 std::vector<double>& scores) {
    bool restarted = false;
    std::size_t next = begin;
    while (true) {
      try {
        exchange(requests, next, end, scores);
        return;
      } catch (const BridgeError& e) {
        proc_.reset();
        pending_.clear();
        if (e.reason() != BridgeError::Reason::Crash || !config_.restart_on_failure || restarted) {
          throw;
        }
        restarted = true;
        ++restarts_;
        // replay only what has not been answered yet
        next = scores.size();
      }
    }
  }

  void exchange(std::span<const ScoreRequest> requests, std::size_t begin, std::size_t end,
                std::vector<double>& scores) {
    auto& proc = process();
    std::string payload;
    for (std::size_t i = begin; i < end; ++i) payload += encode_request(requests[i]);
    payload += '\n';

    std::size_t written = 0;
    auto deadline = std::chrono::steady_clock::now() + config_.timeout;
    while (scores.size() < end) {
      // complete lines already buffered
      auto nl = pending_.find('\n');
      if (nl != std::string::npos) {
        std::string line = pending_.substr(0, nl);
        pending_.erase(0, nl + 1);
        auto v = parse_score(line);
        if (!v) {
          throw BridgeError(BridgeError::Reason::Protocol,
                            "scorer protocol error at request " + std::to_string(scores.size()) +
                                ": non-numeric response line '" + line + "'",
                            line);
        }
        scores.push_back(*v);
        deadline = std::chrono::steady_clock::now() + config_.timeout;
        continue;
      }

      pollfd fds[2];
      nfds_t nfds = 0;
      fds[nfds++] = {proc.stdout_fd(), POLLIN, 0};
      bool want_write = written < payload.size() && proc.stdin_fd() >= 0;
      if (want_write) fds[nfds++] = {proc.stdin_fd(), POLLOUT, 0};

      auto now = std::chrono::steady_clock::now();
      if (now >= deadline) throw_timeout(scores.size());
      auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
      int rc = ::poll(fds, nfds, static_cast<int>(std::max<long long>(1, wait)));
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw BridgeError(BridgeError::Reason::Crash,
                          std::string("poll on scorer pipes failed: ") + std::strerror(errno));
      }
      if (rc == 0) continue;

      if (want_write && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
        ssize_t n = ::write(proc.stdin_fd(), payload.data() + written, payload.size() - written);
        if (n > 0) {
          written += static_cast<std::size_t>(n);
        } else if (n < 0 && errno != EAGAIN && errno != EINTR) {
          // the scorer closed its stdin; keep draining stdout until EOF
          proc.close_stdin();
        }
      }
      if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
        char buf[4096];
        ssize_t n = ::read(proc.stdout_fd(), buf, sizeof buf);
        if (n > 0) {
          pending_.append(buf, static_cast<std::size_t>(n));
        } else if (n == 0 || (errno != EAGAIN && errno != EINTR)) {
          std::string partial = pending_;
          pending_.clear();
          throw BridgeError(BridgeError::Reason::Crash,
                            "scorer exited before answering request " +
                                std::to_string(scores.size()) + " (" +
                                std::to_string(end - scores.size()) + " pending)",
                            partial);
        }
      }
    }
    if (!pending_.empty()) {
      std::string extra = pending_;
      pending_.clear();
      throw BridgeError(BridgeError::Reason::Protocol,
                        "scorer protocol error: unexpected output after batch: '" + extra + "'",
                        extra);
    }
  }

  [[noreturn]] void throw_timeout(std::size_t index) {
    std::string partial = pending_;
    pending_.clear();
    throw BridgeError(BridgeError::Reason::Timeout,
                      "scorer timed out waiting for request " + std::to_string(index), partial);
  }

  BridgeConfig config_;
  std::optional<ScorerProcess> proc_;
  std::string pending_;
  std::size_t restarts_ = 0;
};

/// Scores `requests` with a fresh scorer process, one score per request in
/// request order.
inline std::vector<double> score_batch(std::span<const ScoreRequest> requests,
                                       const BridgeConfig& config) {
  BridgeClient client(config);
  return client.score(requests);
}

}  // namespace mbrforge::bridge
