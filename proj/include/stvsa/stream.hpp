#pragma once

// Online assessment over streamed PMU frames: a ring of post-trigger frames is
// normalized with the model bundle's stored normalizer and classified once per
// trigger event. A small line-delimited TCP server exposes the same semantics
// per connection.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <istream>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvsa/common.hpp"
#include "stvsa/dataset.hpp"
#include "stvsa/dynsim.hpp"
#include "stvsa/stability_model.hpp"
#include "stvsa/weights_io.hpp"

namespace stvsa::stream {

struct Decision {
    double t_decision = 0.0;
    dataset::Label label = dataset::Label::unstable;
    double probability = 0.0;
    int frames_used = 0;

    nlohmann::json to_json() const {
        return {{"t_decision", t_decision},
                {"label", dataset::label_name(label)},
                {"probability", probability},
                {"frames_used", frames_used}};
    }
};

// One assessor per stream. Triggering prefers an explicit "fault_cleared"
// marker; the fallback dip detector arms on any bus voltage below 0.9 p.u.
// and fires on the recovery jump at fault clearing.
class StreamAssessor {
public:
    StreamAssessor(const weights_io::ModelBundle& bundle, double otw_s)
        : bundle_(bundle),
          t_frames_(bundle.params.t_frames) {
        if (otw_s <= 0) throw ConfigError("assessor: otw must be positive");
        otw_s_ = otw_s;
    }

    int frames_per_window() const { return t_frames_; }

    // Feeds one raw NDJSON line; appends any emitted events to `events`.
    void on_line(const std::string& line, long line_no,
                 std::vector<nlohmann::json>& events) {
        if (line.empty()) return;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error&) {
            events.push_back({{"event", "error"},
                              {"line", line_no},
                              {"message", "malformed frame line"}});
            return;
        }
        try {
            on_frame(dynsim::frame_from_json(j), j.value("marker", ""), events);
        } catch (const std::exception& e) {
            events.push_back(
                {{"event", "error"}, {"line", line_no}, {"message", e.what()}});
        }
    }

    void on_frame(const dynsim::Frame& frame, const std::string& marker,
                  std::vector<nlohmann::json>& events) {
        if (collecting_) {
            push_frame(frame);
            if (int(window_.size()) == t_frames_) events.push_back(decide());
            return;
        }
        double min_u = std::numeric_limits<double>::infinity();
        for (const auto& b : frame.bus) min_u = std::min(min_u, b[0]);
        bool trigger = marker == "fault_cleared";
        if (!trigger && dipped_ && prev_min_u_ >= 0.0 &&
            min_u - prev_min_u_ >= recovery_jump_)
            trigger = true;
        if (min_u < dip_threshold_) dipped_ = true;
        prev_min_u_ = min_u;
        if (trigger) {
            collecting_ = true;
            window_.clear();
            push_frame(frame);
            if (int(window_.size()) == t_frames_) events.push_back(decide());
        }
    }

    // Stream ended; reports an unfinished window if one was in flight.
    std::optional<nlohmann::json> finish() const {
        if (collecting_ && int(window_.size()) < t_frames_)
            return nlohmann::json{{"event", "incomplete_window"},
                                  {"frames_buffered", window_.size()},
                                  {"frames_needed", t_frames_}};
        return std::nullopt;
    }

private:
    void push_frame(const dynsim::Frame& f) {
        if (int(f.bus.size()) * 3 != bundle_.params.input_width)
            throw StreamError("frame width " + std::to_string(f.bus.size() * 3) +
                              " does not match model width " +
                              std::to_string(bundle_.params.input_width));
        window_.push_back(f);
    }

    nlohmann::json decide() {
        dataset::Sample s;
        const int nb = int(window_.front().bus.size());
        s.features.resize(t_frames_, 3 * nb);
        for (int r = 0; r < t_frames_; ++r) {
            for (int b = 0; b < nb; ++b) {
                s.features(r, 3 * b + 0) = window_[std::size_t(r)].bus[std::size_t(b)][0];
                s.features(r, 3 * b + 1) = window_[std::size_t(r)].bus[std::size_t(b)][1];
                s.features(r, 3 * b + 2) = window_[std::size_t(r)].bus[std::size_t(b)][2];
            }
        }
        // Same normalization path the offline datasets go through.
        dataset::Dataset one;
        one.samples.push_back(std::move(s));
        one = dataset::apply_normalizer(one, bundle_.norm);
        auto [label, prob] = stability_model::predict(bundle_.params,
                                                      one.samples.front());
        Decision d;
        d.t_decision = window_.back().t;
        d.label = label;
        d.probability = prob;
        d.frames_used = t_frames_;
        // Back to monitoring; the dip detector re-arms.
        collecting_ = false;
        dipped_ = false;
        prev_min_u_ = -1.0;
        window_.clear();
        return d.to_json();
    }

    const weights_io::ModelBundle& bundle_;
    int t_frames_;
    double otw_s_ = 0.0;
    double dip_threshold_ = 0.9;
    double recovery_jump_ = 0.02;
    bool collecting_ = false;
    bool dipped_ = false;
    double prev_min_u_ = -1.0;
    std::vector<dynsim::Frame> window_;
};

// ---------------------------------------------------------------------------
// Replays a frame stream from an input stream; decision/error events go to
// `events_out` (one JSON object per line) and decisions are also returned.

inline std::vector<Decision> assess_stream(const weights_io::ModelBundle& bundle,
                                           std::istream& frames, double otw_s,
                                           std::ostream* events_out = nullptr) {
    StreamAssessor assessor(bundle, otw_s);
    std::vector<Decision> decisions;
    std::string line;
    long line_no = 0;
    std::vector<nlohmann::json> events;
    while (std::getline(frames, line)) {
        ++line_no;
        events.clear();
        assessor.on_line(line, line_no, events);
        for (const auto& e : events) {
            if (events_out) *events_out << e.dump() << '\n';
            if (e.contains("t_decision")) {
                Decision d;
                d.t_decision = e.at("t_decision");
                d.label = dataset::label_from_name(e.at("label"));
                d.probability = e.at("probability");
                d.frames_used = e.at("frames_used");
                decisions.push_back(d);
            }
        }
    }
    if (auto tail = assessor.finish()) {
        if (events_out) *events_out << tail->dump() << '\n';
    }
    return decisions;
}

// ---------------------------------------------------------------------------
// Line-delimited TCP listener. Each connection gets its own assessor; the
// model bundle is shared read-only.

class TcpLineServer {
public:
    TcpLineServer(weights_io::ModelBundle bundle, double otw_s)
        : bundle_(std::move(bundle)), otw_s_(otw_s) {}

    ~TcpLineServer() { stop(); }

    // Binds and starts accepting; port 0 picks an ephemeral port.
    void start(std::uint16_t port) {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw StreamError("serve: socket() failed");
        const int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = htons(port);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            ::close(listen_fd_);
            listen_fd_ = -1;
            throw StreamError("serve: cannot bind port " + std::to_string(port));
        }
        if (::listen(listen_fd_, 16) != 0) {
            ::close(listen_fd_);
            listen_fd_ = -1;
            throw StreamError("serve: listen() failed");
        }
        socklen_t len = sizeof(addr);
        ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
        port_ = ntohs(addr.sin_port);
        running_ = true;
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    std::uint16_t port() const { return port_; }

    void stop() {
        if (!running_.exchange(false)) return;
        if (listen_fd_ >= 0) {
            ::shutdown(listen_fd_, SHUT_RDWR);
            ::close(listen_fd_);
            listen_fd_ = -1;
        }
        {
            std::lock_guard<std::mutex> lock(clients_mutex_);
            for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        for (auto& t : client_threads_)
            if (t.joinable()) t.join();
        client_threads_.clear();
    }

    void wait() {
        if (accept_thread_.joinable()) accept_thread_.join();
    }

private:
    void accept_loop() {
        while (running_) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) break;
            {
                std::lock_guard<std::mutex> lock(clients_mutex_);
                client_fds_.push_back(fd);
            }
            client_threads_.emplace_back([this, fd] { serve_client(fd); });
        }
    }

    void serve_client(int fd) {
        StreamAssessor assessor(bundle_, otw_s_);
        std::string buffer;
        char chunk[4096];
        long line_no = 0;
        std::vector<nlohmann::json> events;
        auto send_line = [&](const nlohmann::json& j) {
            const std::string out = j.dump() + "\n";
            std::size_t sent = 0;
            while (sent < out.size()) {
                const auto n = ::send(fd, out.data() + sent, out.size() - sent, 0);
                if (n <= 0) return false;
                sent += std::size_t(n);
            }
            return true;
        };
        for (;;) {
            const auto n = ::recv(fd, chunk, sizeof(chunk), 0);
            if (n <= 0) break;
            buffer.append(chunk, std::size_t(n));
            std::size_t pos;
            while ((pos = buffer.find('\n')) != std::string::npos) {
                const std::string line = buffer.substr(0, pos);
                buffer.erase(0, pos + 1);
                ++line_no;
                events.clear();
                assessor.on_line(line, line_no, events);
                for (const auto& e : events)
                    if (!send_line(e)) goto done;
            }
        }
    done:
        if (auto tail = assessor.finish()) send_line(*tail);
        ::close(fd);
        std::lock_guard<std::mutex> lock(clients_mutex_);
        for (auto it = client_fds_.begin(); it != client_fds_.end(); ++it) {
            if (*it == fd) {
                client_fds_.erase(it);
                break;
            }
        }
    }

    weights_io::ModelBundle bundle_;
    double otw_s_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> running_{false};
    std::thread accept_thread_;
    std::vector<std::thread> client_threads_;
    std::vector<int> client_fds_;
    std::mutex clients_mutex_;
};

}  // namespace stvsa::stream
