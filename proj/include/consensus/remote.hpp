#pragma once

// Client side of the wire protocol: line transports over a child process's
// stdin/stdout or a TCP socket, the RemoteBackend adapter, and a small
// connection pool. One connection carries strictly sequential
// request/response pairs.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "consensus/backend.hpp"
#include "consensus/error.hpp"
#include "consensus/protocol.hpp"

namespace consensus {

using Millis = std::chrono::milliseconds;
inline constexpr Millis kDefaultTimeout{60'000};

/// Newline-delimited transport over a pair of file descriptors.
class LineChannel {
public:
    LineChannel() = default;
    LineChannel(int read_fd, int write_fd, bool socket) : read_fd_(read_fd), write_fd_(write_fd), socket_(socket) {}
    LineChannel(const LineChannel&) = delete;
    LineChannel& operator=(const LineChannel&) = delete;
    virtual ~LineChannel() { close_fds(); }

    void send_line(const std::string& line) {
        std::string buf = line;
        buf.push_back('\n');
        std::size_t off = 0;
        while (off < buf.size()) {
            const ssize_t n = socket_ ? ::send(write_fd_, buf.data() + off, buf.size() - off, MSG_NOSIGNAL)
                                      : ::write(write_fd_, buf.data() + off, buf.size() - off);
            if (n < 0 && errno == EINTR) continue;
            require(n > 0, ErrorCode::BackendFailure, std::string("write to backend failed: ") + std::strerror(errno));
            off += static_cast<std::size_t>(n);
        }
    }

    std::string recv_line(Millis timeout) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            const auto nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
            require(left.count() > 0, ErrorCode::Timeout, "backend did not answer within " + std::to_string(timeout.count()) + " ms");
            pollfd p{read_fd_, POLLIN, 0};
            const int r = ::poll(&p, 1, static_cast<int>(left.count()));
            if (r < 0 && errno == EINTR) continue;
            require(r >= 0, ErrorCode::BackendFailure, std::string("poll failed: ") + std::strerror(errno));
            if (r == 0) continue;
            char chunk[65536];
            const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
            if (n < 0 && errno == EINTR) continue;
            require(n > 0, ErrorCode::BackendFailure, "backend closed the connection");
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

protected:
    void close_fds() {
        if (read_fd_ >= 0) ::close(read_fd_);
        if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
        read_fd_ = write_fd_ = -1;
    }

    int read_fd_ = -1;
    int write_fd_ = -1;
    bool socket_ = false;
    std::string buffer_;
};

/// Spawns `argv` and talks to it over its stdin/stdout.
class ProcessChannel final : public LineChannel {
public:
    explicit ProcessChannel(const std::vector<std::string>& argv) {
        require(!argv.empty(), ErrorCode::InvalidArgument, "empty backend command");
        ::signal(SIGPIPE, SIG_IGN);
        int to_child[2], from_child[2];
        require(::pipe(to_child) == 0 && ::pipe(from_child) == 0, ErrorCode::BackendFailure, "pipe() failed");
        std::vector<char*> args;
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        pid_ = ::fork();
        require(pid_ >= 0, ErrorCode::BackendFailure, "fork() failed");
        if (pid_ == 0) {
            ::dup2(to_child[0], STDIN_FILENO);
            ::dup2(from_child[1], STDOUT_FILENO);
            ::close(to_child[0]);
            ::close(to_child[1]);
            ::close(from_child[0]);
            ::close(from_child[1]);
            ::execvp(args[0], args.data());
            ::_exit(127);
        }
        ::close(to_child[0]);
        ::close(from_child[1]);
        ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
        ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
        read_fd_ = from_child[0];
        write_fd_ = to_child[1];
    }

    ~ProcessChannel() override {
        close_fds();  // EOF on stdin asks the server to exit
        if (pid_ > 0) {
            for (int i = 0; i < 200; ++i) {
                if (::waitpid(pid_, nullptr, WNOHANG) == pid_) return;
                ::usleep(10'000);
            }
            ::kill(pid_, SIGKILL);
            ::waitpid(pid_, nullptr, 0);
        }
    }

private:
    pid_t pid_ = -1;
};

class TcpChannel final : public LineChannel {
public:
    TcpChannel(const std::string& host, int port) {
        ::signal(SIGPIPE, SIG_IGN);
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo* res = nullptr;
        const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
        require(rc == 0, ErrorCode::BackendFailure, "cannot resolve '" + host + "': " + ::gai_strerror(rc));
        int fd = -1;
        for (auto* ai = res; ai != nullptr; ai = ai->ai_next) {
            fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
            if (fd < 0) continue;
            if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
            ::close(fd);
            fd = -1;
        }
        ::freeaddrinfo(res);
        require(fd >= 0, ErrorCode::BackendFailure, "cannot connect to " + host + ":" + std::to_string(port));
        read_fd_ = write_fd_ = fd;
        socket_ = true;
    }
};

/// A model served by another process, reached through a LineChannel.
class RemoteBackend final : public ModelBackend {
public:
    RemoteBackend(std::unique_ptr<LineChannel> channel, Millis timeout = kDefaultTimeout, std::size_t batch_cap = 32)
        : channel_(std::move(channel)), timeout_(timeout), batch_cap_(std::max<std::size_t>(1, batch_cap)) {
        desc_ = handshake();
    }

    const BackendDescriptor& descriptor() const override { return desc_; }

    std::vector<std::vector<double>> predict_batch(std::span<const Image> images) override {
        require(desc_.can_predict, ErrorCode::CapabilityMissing, "model '" + desc_.model_id + "' cannot predict");
        std::vector<std::vector<double>> out;
        out.reserve(images.size());
        for (std::size_t start = 0; start < images.size(); start += batch_cap_) {
            const auto chunk = images.subspan(start, std::min(batch_cap_, images.size() - start));
            for (const auto& img : chunk) check_input(img);
            const auto resp = call(protocol::PredictRequest{next_id_, protocol::images_to_tensor(chunk, desc_.input_shape)});
            const auto& r = expect<protocol::PredictResponse>(resp);
            const auto& t = r.probabilities;
            require(t.shape.size() == 2 && t.shape[0] == chunk.size() &&
                        t.shape[1] == static_cast<std::uint32_t>(desc_.num_classes),
                    ErrorCode::ProtocolError, "predict response has the wrong shape");
            for (std::size_t b = 0; b < chunk.size(); ++b) {
                const auto begin = t.data.begin() + static_cast<std::ptrdiff_t>(b * t.shape[1]);
                out.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(t.shape[1]));
            }
        }
        return out;
    }

    Image gradient(const Image& image, int target_class) override {
        require(desc_.can_gradient, ErrorCode::CapabilityMissing, "model '" + desc_.model_id + "' does not provide gradients");
        check_input(image);
        check_class(target_class);
        const auto resp = call(protocol::GradientRequest{next_id_, protocol::image_to_tensor(image), target_class});
        const auto& r = expect<protocol::GradientResponse>(resp);
        Image g = protocol::tensor_to_image(r.gradient);
        require(g.shape == image.shape, ErrorCode::ProtocolError, "gradient response has the wrong shape");
        return g;
    }

private:
    BackendDescriptor handshake() {
        const auto resp = call(protocol::HandshakeRequest{next_id_, protocol::kVersion});
        if (const auto* err = std::get_if<protocol::ErrorResponse>(&resp)) {
            require(err->code != protocol::WireError::version_mismatch, ErrorCode::VersionMismatch, err->message);
            fail(ErrorCode::ProtocolError, "handshake rejected: " + err->message);
        }
        const auto& h = std::get<protocol::HandshakeResponse>(resp);
        require(h.version == protocol::kVersion, ErrorCode::VersionMismatch,
                "server speaks '" + h.version + "', client supports '" + protocol::kVersion + "'");
        validate(h.descriptor);
        return h.descriptor;
    }

    protocol::Response call(const protocol::Request& req) {
        const std::uint64_t id = next_id_++;
        channel_->send_line(protocol::encode(req));
        protocol::Response resp = protocol::decode_response(channel_->recv_line(timeout_));
        const std::uint64_t got = std::visit([](const auto& r) { return r.id; }, resp);
        require(got == id, ErrorCode::ProtocolError,
                "response id " + std::to_string(got) + " does not match request id " + std::to_string(id));
        return resp;
    }

    template <typename T>
    const T& expect(const protocol::Response& resp) {
        if (const auto* err = std::get_if<protocol::ErrorResponse>(&resp)) {
            const ErrorCode code = err->code == protocol::WireError::shape_mismatch       ? ErrorCode::ShapeMismatch
                                   : err->code == protocol::WireError::capability_missing ? ErrorCode::CapabilityMissing
                                                                                          : ErrorCode::BackendFailure;
            fail(code, "model '" + desc_.model_id + "': " + err->message);
        }
        const auto* r = std::get_if<T>(&resp);
        require(r != nullptr, ErrorCode::ProtocolError, "unexpected response kind");
        return *r;
    }

    std::unique_ptr<LineChannel> channel_;
    Millis timeout_;
    std::size_t batch_cap_;
    std::uint64_t next_id_ = 1;
    BackendDescriptor desc_;
};

/// Fixed-size pool of connections to one model server. lease() blocks
/// until a connection is free and returns it when the lease is destroyed.
class ConnectionPool {
public:
    using Factory = std::function<std::unique_ptr<ModelBackend>()>;

    ConnectionPool(Factory factory, std::size_t size) {
        require(size >= 1, ErrorCode::InvalidArgument, "connection pool needs at least one connection");
        for (std::size_t i = 0; i < size; ++i) free_.push_back(factory());
    }

    class Lease {
    public:
        Lease(ConnectionPool& pool, std::unique_ptr<ModelBackend> conn) : pool_(&pool), conn_(std::move(conn)) {}
        Lease(Lease&&) = default;
        Lease& operator=(Lease&&) = default;
        ~Lease() {
            if (pool_ && conn_) pool_->give_back(std::move(conn_));
        }
        ModelBackend& operator*() { return *conn_; }
        ModelBackend* operator->() { return conn_.get(); }

    private:
        ConnectionPool* pool_;
        std::unique_ptr<ModelBackend> conn_;
    };

    Lease lease() {
        std::unique_lock lock(mutex_);
        ready_.wait(lock, [&] { return !free_.empty(); });
        auto conn = std::move(free_.back());
        free_.pop_back();
        return Lease(*this, std::move(conn));
    }

private:
    void give_back(std::unique_ptr<ModelBackend> conn) {
        {
            std::lock_guard lock(mutex_);
            free_.push_back(std::move(conn));
        }
        ready_.notify_one();
    }

    std::mutex mutex_;
    std::condition_variable ready_;
    std::vector<std::unique_ptr<ModelBackend>> free_;
};

/// Serves `model` over a pair of descriptors until EOF.
inline void serve_lines(ModelBackend& model, int in_fd, int out_fd, bool include_logits = false) {
    LineChannel chan(in_fd, out_fd, false);
    for (;;) {
        std::string line;
        try {
            line = chan.recv_line(Millis{24L * 3600 * 1000});
        } catch (const Error&) {
            break;
        }
        if (line.empty()) continue;
        chan.send_line(protocol::handle_request_line(model, line, include_logits));
    }
}

}  // namespace consensus
