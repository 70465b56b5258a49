// consensus-model-server: serves one in-process model over the wire
// protocol, on stdin/stdout or on a TCP port (one thread per connection).

#include <CLI11.hpp>

#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdio>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>

#include "consensus/backend.hpp"
#include "consensus/manifest.hpp"
#include "consensus/remote.hpp"

namespace {

using namespace consensus;

std::vector<int> parse_ints(const std::string& s, std::size_t count, const char* what) {
    std::vector<int> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(std::stoi(item));
    require(out.size() == count, ErrorCode::InvalidArgument,
            std::string(what) + " needs " + std::to_string(count) + " comma-separated integers");
    return out;
}

using Factory = std::function<std::unique_ptr<ModelBackend>()>;

void serve_tcp(const Factory& factory, int port, bool include_logits, bool once) {
    const int srv = ::socket(AF_INET, SOCK_STREAM, 0);
    require(srv >= 0, ErrorCode::Io, "socket() failed");
    int yes = 1;
    ::setsockopt(srv, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    require(::bind(srv, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0, ErrorCode::Io,
            "cannot bind port " + std::to_string(port));
    require(::listen(srv, 16) == 0, ErrorCode::Io, "listen() failed");
    socklen_t len = sizeof addr;
    ::getsockname(srv, reinterpret_cast<sockaddr*>(&addr), &len);
    // The bound port goes to stdout so callers can pass --port 0.
    std::cout << "listening " << ntohs(addr.sin_port) << std::endl;
    for (;;) {
        const int fd = ::accept(srv, nullptr, nullptr);
        if (fd < 0) continue;
        auto session = [fd, &factory, include_logits] {
            try {
                auto model = factory();
                serve_lines(*model, fd, fd, include_logits);
            } catch (const std::exception& e) {
                std::cerr << "consensus-model-server: " << e.what() << "\n";
                ::close(fd);
            }
        };
        if (once) {
            session();
            break;
        }
        std::thread(session).detach();
    }
    ::close(srv);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Serves a synthetic model over the consensus/1 line protocol."};
    std::string kind = "box", id = "model", shape = "8,8,3", box = "2,2,6,6", manifest, model_id;
    double sharpness = 10.0;
    int port = -1;
    bool logits = false, once = false;
    app.add_option("--kind", kind, "box or linear-ramp")->check(CLI::IsMember({"box", "linear-ramp"}))->capture_default_str();
    app.add_option("--id", id, "Model id reported in the handshake")->capture_default_str();
    app.add_option("--shape", shape, "Input shape H,W,C")->capture_default_str();
    app.add_option("--box", box, "Box x0,y0,x1,y1 (kind box)")->capture_default_str();
    app.add_option("--sharpness", sharpness, "Logit slope (kind box)")->capture_default_str();
    app.add_option("--manifest", manifest, "Serve a synthetic_box model from a manifest instead")->check(CLI::ExistingFile);
    app.add_option("--model-id", model_id, "Model to serve from --manifest");
    app.add_option("--tcp", port, "Listen on this loopback port (0 picks one) instead of stdin/stdout");
    app.add_flag("--logits", logits, "Include logits in predict responses");
    app.add_flag("--once", once, "With --tcp, accept a single connection");
    CLI11_PARSE(app, argc, argv);

    try {
        ::signal(SIGPIPE, SIG_IGN);
        Factory factory;
        if (!manifest.empty()) {
            const auto m = load_manifest(manifest, false);
            require(!model_id.empty(), ErrorCode::InvalidArgument, "--model-id is required with --manifest");
            const auto entry = m.model(model_id);
            require(entry.backend.kind == BackendKind::synthetic_box || entry.backend.kind == BackendKind::linear,
                    ErrorCode::InvalidArgument, "only in-process models can be served");
            const auto s = parse_ints(shape, 3, "--shape");
            const Shape sh{s[0], s[1], s[2]};
            factory = [entry, sh] { return open_backend(entry, sh); };
        } else {
            const auto s = parse_ints(shape, 3, "--shape");
            const Shape sh{s[0], s[1], s[2]};
            if (kind == "box") {
                const auto b = parse_ints(box, 4, "--box");
                const Box bx{b[0], b[1], b[2], b[3]};
                factory = [=] { return std::make_unique<SyntheticBoxModel>(id, sh, bx, sharpness); };
            } else {
                // Class 0 weighs pixels by their row, class 1 by their column.
                factory = [=] {
                    Image w0(sh.height, sh.width, sh.channels), w1(sh.height, sh.width, sh.channels);
                    for (int r = 0; r < sh.height; ++r)
                        for (int c = 0; c < sh.width; ++c)
                            for (int ch = 0; ch < sh.channels; ++ch) {
                                w0.at(r, c, ch) = 0.1 * (r + 1);
                                w1.at(r, c, ch) = 0.1 * (c + 1);
                            }
                    return std::make_unique<LinearModel>(id, std::vector<Image>{w0, w1});
                };
            }
        }
        if (port >= 0) {
            serve_tcp(factory, port, logits, once);
        } else {
            auto model = factory();
            serve_lines(*model, STDIN_FILENO, STDOUT_FILENO, logits);
        }
    } catch (const Error& e) {
        std::cerr << "consensus-model-server: error [" << to_string(e.code()) << "]: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "consensus-model-server: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
