#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include "imta/common.hpp"
#include "imta/model.hpp"
#include "imta/obfuscate.hpp"
#include "imta/rng.hpp"
#include "imta/trace.hpp"

namespace imta::improxy {

// ---------------------------------------------------------------------------
// ChaCha20 keystream (RFC 8439 block function). The tunnel encrypts both
// directions with a pre-shared key and per-direction random nonces, so Data
// and Dummy frames are indistinguishable on the wire. A PSK stream cipher is
// a stand-in: production deployments need authenticated key exchange.

class ChaCha20 {
public:
    ChaCha20() = default;
    ChaCha20(const unsigned char key[32], const unsigned char nonce[12]) {
        static const char sigma[] = "expand 32-byte k";
        std::memcpy(state_, sigma, 16);
        std::memcpy(state_ + 4, key, 32);
        state_[12] = 0;
        std::memcpy(state_ + 13, nonce, 12);
    }

    void xor_buf(unsigned char* buf, std::size_t len) {
        for (std::size_t i = 0; i < len; ++i) {
            if (pos_ == 64) refill();
            buf[i] ^= block_[pos_++];
        }
    }

private:
    static std::uint32_t rotl(std::uint32_t x, int k) { return (x << k) | (x >> (32 - k)); }
    static void qr(std::uint32_t& a, std::uint32_t& b, std::uint32_t& c, std::uint32_t& d) {
        a += b; d ^= a; d = rotl(d, 16);
        c += d; b ^= c; b = rotl(b, 12);
        a += b; d ^= a; d = rotl(d, 8);
        c += d; b ^= c; b = rotl(b, 7);
    }
    void refill() {
        std::uint32_t x[16];
        std::memcpy(x, state_, sizeof(x));
        for (int i = 0; i < 10; ++i) {
            qr(x[0], x[4], x[8], x[12]);
            qr(x[1], x[5], x[9], x[13]);
            qr(x[2], x[6], x[10], x[14]);
            qr(x[3], x[7], x[11], x[15]);
            qr(x[0], x[5], x[10], x[15]);
            qr(x[1], x[6], x[11], x[12]);
            qr(x[2], x[7], x[8], x[13]);
            qr(x[3], x[4], x[9], x[14]);
        }
        for (int i = 0; i < 16; ++i) x[i] += state_[i];
        std::memcpy(block_, x, 64);
        state_[12]++;
        pos_ = 0;
    }

    std::uint32_t state_[16] = {};
    unsigned char block_[64] = {};
    std::size_t pos_ = 64;
};

inline void psk_to_key(const std::string& psk, unsigned char key[32]) {
    // stretch/truncate the PSK over 32 bytes with splitmix feedback
    std::uint64_t st = 0x243f6a8885a308d3ULL;
    for (unsigned char c : psk) st = splitmix64(st) ^ (st * 131 + c);
    for (int i = 0; i < 4; ++i) {
        std::uint64_t w = splitmix64(st);
        std::memcpy(key + 8 * i, &w, 8);
    }
}

// ---------------------------------------------------------------------------
// Tunnel framing: 1-byte type, 2-byte big-endian length, payload. Everything
// after the cleartext nonce exchange is encrypted.

enum class FrameType : unsigned char { Data = 0, Dummy = 1, Control = 2 };
constexpr std::size_t kMaxFramePayload = 65535;
constexpr std::size_t kDataChunk = 16384;

namespace net {

inline bool send_all(int fd, const unsigned char* p, std::size_t n) {
    while (n > 0) {
        ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
        if (w <= 0) return false;
        p += w;
        n -= std::size_t(w);
    }
    return true;
}

inline bool recv_all(int fd, unsigned char* p, std::size_t n) {
    while (n > 0) {
        ssize_t r = ::recv(fd, p, n, 0);
        if (r <= 0) return false;
        p += r;
        n -= std::size_t(r);
    }
    return true;
}

inline int dial(const std::string& host, std::uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return -1;
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1 ||
        ::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
        ::close(fd);
        return -1;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return fd;
}

inline int listen_on(const std::string& host, std::uint16_t port) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return -1;
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1 ||
        ::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0 || ::listen(fd, 64) != 0) {
        ::close(fd);
        return -1;
    }
    return fd;
}

inline void set_recv_timeout(int fd, double seconds) {
    timeval tv{};
    tv.tv_sec = long(seconds);
    tv.tv_usec = long((seconds - double(tv.tv_sec)) * 1e6);
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
}

inline std::uint16_t bound_port(int fd) {
    sockaddr_in sa{};
    socklen_t len = sizeof(sa);
    if (::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len) != 0) return 0;
    return ntohs(sa.sin_port);
}

} // namespace net

// Wire observations of one tunnel endpoint: timestamps and frame sizes only,
// exactly what a wiretap between the proxies would record.
class Capture {
public:
    void enable() { enabled_ = true; }
    bool enabled() const { return enabled_; }
    void record(double t, double wire_bytes, Direction dir) {
        if (!enabled_) return;
        std::lock_guard<std::mutex> lk(mu_);
        packets_.push_back({t, wire_bytes, dir});
    }
    trace::PacketTrace to_trace() const {
        std::lock_guard<std::mutex> lk(mu_);
        trace::PacketTrace t;
        t.packets = packets_;
        t.sort_by_time();
        return t;
    }

private:
    std::atomic<bool> enabled_{false};
    mutable std::mutex mu_;
    std::vector<trace::PacketRecord> packets_;
};

struct SessionStats {
    std::uint64_t up_real_bytes = 0;
    std::uint64_t up_dummy_bytes = 0;
    std::uint64_t down_real_bytes = 0;
    std::uint64_t down_dummy_bytes = 0;
};

// One direction of an established tunnel. All writes go through send_frame,
// which serializes on a mutex so pump and injector threads can interleave.
class TunnelLink {
public:
    TunnelLink(int fd, const std::string& psk, bool initiator, Capture* cap, double t0)
        : fd_(fd), cap_(cap), t0_(t0) {
        unsigned char key[32];
        psk_to_key(psk, key);
        unsigned char my_nonce[12], peer_nonce[12];
        std::random_device rd;
        for (auto& b : my_nonce) b = (unsigned char)rd();
        ok_ = initiator ? (net::send_all(fd_, my_nonce, 12) && net::recv_all(fd_, peer_nonce, 12))
                        : (net::recv_all(fd_, peer_nonce, 12) && net::send_all(fd_, my_nonce, 12));
        tx_ = ChaCha20(key, my_nonce);
        rx_ = ChaCha20(key, peer_nonce);
    }
    ~TunnelLink() {
        close();
        int fd = fd_.exchange(-1);
        if (fd >= 0) ::close(fd);
    }

    bool ok() const { return ok_; }
    int fd() const { return fd_; }

    bool send_frame(FrameType type, const unsigned char* payload, std::size_t len) {
        if (len > kMaxFramePayload) return false;
        std::lock_guard<std::mutex> lk(tx_mu_);
        std::vector<unsigned char> buf(3 + len);
        buf[0] = (unsigned char)type;
        buf[1] = (unsigned char)(len >> 8);
        buf[2] = (unsigned char)(len & 0xff);
        if (len) std::memcpy(buf.data() + 3, payload, len);
        tx_.xor_buf(buf.data(), buf.size());
        if (!net::send_all(fd_, buf.data(), buf.size())) return false;
        if (cap_) cap_->record(now() - t0_, double(buf.size()), tx_dir_);
        return true;
    }

    bool recv_frame(FrameType& type, std::vector<unsigned char>& payload) {
        unsigned char hdr[3];
        if (!net::recv_all(fd_, hdr, 3)) return false;
        rx_.xor_buf(hdr, 3);
        if (hdr[0] > 2) return false;  // malformed frame: unknown type
        type = FrameType(hdr[0]);
        std::size_t len = (std::size_t(hdr[1]) << 8) | hdr[2];
        payload.resize(len);
        if (len && !net::recv_all(fd_, payload.data(), len)) return false;
        if (len) rx_.xor_buf(payload.data(), len);
        if (cap_) cap_->record(now() - t0_, double(3 + len), rx_dir_);
        return true;
    }

    void set_capture_dirs(Direction tx, Direction rx) {
        tx_dir_ = tx;
        rx_dir_ = rx;
    }
    // Aborts the link: wakes every blocked send/recv with an error. The fd
    // itself is only released by the destructor, after the last pump thread
    // has dropped its reference, so the descriptor can never be reused while
    // a sibling thread is still inside a socket call on it.
    void close() {
        if (closed_.exchange(true)) return;
        int fd = fd_.load();
        if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
    }

    static double now() {
        return std::chrono::duration<double>(
                   std::chrono::steady_clock::now().time_since_epoch())
            .count();
    }

private:
    std::atomic<int> fd_;
    std::atomic<bool> closed_{false};
    std::mutex tx_mu_;
    ChaCha20 tx_, rx_;
    bool ok_ = false;
    Capture* cap_ = nullptr;
    double t0_ = 0;
    Direction tx_dir_ = Direction::Up, rx_dir_ = Direction::Down;
};

struct ProxyConfig {
    std::string listen_host = "127.0.0.1";
    std::uint16_t listen_port = 0;  // 0 picks an ephemeral port
    std::string remote_host;        // local proxy only
    std::uint16_t remote_port = 0;
    std::string psk = "improxy";
    double r_padding = 0;
    double p_padding = 0;
    double delay_rate_per_s = 0;  // downstream per-frame delay; 0 disables
    const model::SizeTable* dummy_sizes = nullptr;
    std::uint64_t seed = 1;
};

namespace detail {

// Sends one dummy event: a burst of Dummy frames totalling event_bytes.
inline void send_dummy_event(TunnelLink& link, double event_bytes) {
    std::vector<unsigned char> zeros(kDataChunk, 0);
    double rem = event_bytes;
    while (rem > 0) {
        std::size_t n = std::size_t(std::min(rem, double(kDataChunk)));
        if (n == 0) n = 1;
        if (!link.send_frame(FrameType::Dummy, zeros.data(), n)) return;
        rem -= double(n);
    }
}

// Silence-gated dummy injector: one coin per 1-second interval with no real
// traffic in that direction.
class Injector {
public:
    Injector(TunnelLink& link, double p, double dummy_mean, const model::SizeTable* sizes,
             std::uint64_t seed, std::atomic<std::uint64_t>* dummy_bytes = nullptr)
        : link_(link), p_(p), dummy_mean_(dummy_mean), sizes_(sizes), rng_(seed),
          dummy_bytes_(dummy_bytes) {}

    ~Injector() { stop(); }

    void start() {
        if (p_ <= 0) return;
        th_ = std::thread([this] { run(); });
    }
    // safe to call from several teardown paths: only the first caller joins
    void stop() {
        stop_.store(true);
        cv_.notify_all();
        if (!joined_.exchange(true) && th_.joinable()) th_.join();
    }
    void note_activity() { last_activity_.store(TunnelLink::now()); }

private:
    void run() {
        std::unique_lock<std::mutex> lk(mu_);
        while (!stop_.load()) {
            // wait_for bounds the staleness of a missed notify to one tick
            cv_.wait_for(lk, std::chrono::seconds(1));
            if (stop_.load()) break;
            double now = TunnelLink::now();
            if (now - last_activity_.load() < 1.0) continue;
            if (!rng_.bernoulli(p_)) continue;
            double sz = sizes_ ? sizes_->sample_bytes(rng_.next_unit()) : dummy_mean_;
            if (dummy_bytes_) *dummy_bytes_ += std::uint64_t(sz);
            lk.unlock();
            send_dummy_event(link_, sz);
            lk.lock();
        }
    }

    TunnelLink& link_;
    double p_;
    double dummy_mean_;
    const model::SizeTable* sizes_;
    Rng rng_;
    std::atomic<std::uint64_t>* dummy_bytes_ = nullptr;
    std::atomic<bool> joined_{false};
    std::thread th_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::atomic<bool> stop_{false};
    std::atomic<double> last_activity_{0};
};

} // namespace detail

// ---------------------------------------------------------------------------
// LocalIMProxy: SOCKS5 (CONNECT, no-auth) listener that wraps each client
// connection into the encrypted tunnel, pads and cover-injects upstream, and
// strips arriving Dummy frames before the client sees anything.

class LocalProxy {
public:
    explicit LocalProxy(ProxyConfig cfg) : cfg_(std::move(cfg)) {}
    ~LocalProxy() { stop(); }

    void start() {
        int fd = net::listen_on(cfg_.listen_host, cfg_.listen_port);
        if (fd < 0) throw runtime_fault("local proxy: cannot bind listener");
        listen_fd_.store(fd);
        port_ = net::bound_port(fd);
        t0_ = TunnelLink::now();
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    void stop() {
        bool expected = false;
        if (!stopping_.compare_exchange_strong(expected, true)) return;
        int lfd = listen_fd_.load();
        if (lfd >= 0) ::shutdown(lfd, SHUT_RDWR);  // wakes the accept loop
        if (accept_thread_.joinable()) accept_thread_.join();
        if (lfd >= 0) {
            ::close(lfd);
            listen_fd_.store(-1);
        }
        while (pending_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(1));
        std::vector<std::thread> joiners;
        {
            std::lock_guard<std::mutex> lk(mu_);
            for (auto& s : sessions_) s->shutdown();
            for (auto& s : sessions_) joiners.emplace_back([sp = s] { sp->join(); });
        }
        for (auto& t : joiners) t.join();
    }

    std::uint16_t port() const { return port_; }
    Capture& capture() { return capture_; }
    SessionStats stats() const {
        std::lock_guard<std::mutex> lk(mu_);
        SessionStats total;
        for (const auto& s : sessions_) {
            total.up_real_bytes += s->up_real.load();
            total.up_dummy_bytes += s->up_dummy.load();
            total.down_real_bytes += s->down_real.load();
            total.down_dummy_bytes += s->down_dummy.load();
        }
        return total;
    }

private:
    struct Session {
        int client_fd = -1;
        std::shared_ptr<TunnelLink> tunnel;
        std::thread up, down;
        std::unique_ptr<detail::Injector> injector;
        std::atomic<std::uint64_t> up_real{0}, up_dummy{0}, down_real{0}, down_dummy{0};

        void shutdown() {
            if (injector) injector->stop();
            if (tunnel) tunnel->close();
            if (client_fd >= 0) ::shutdown(client_fd, SHUT_RDWR);
        }
        void join() {
            if (up.joinable()) up.join();
            if (down.joinable()) down.join();
            if (injector) injector->stop();
            if (client_fd >= 0) {
                ::close(client_fd);
                client_fd = -1;
            }
        }
    };

    void accept_loop() {
        std::uint64_t session_idx = 0;
        const int lfd = listen_fd_.load();
        while (true) {
            int cfd = ::accept(lfd, nullptr, nullptr);
            if (cfd < 0) break;
            int one = 1;
            ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            net::set_recv_timeout(cfd, 10.0);  // bounds a stalled handshake
            ++pending_;
            std::thread([this, cfd, idx = session_idx++] {
                handle_client(cfd, idx);
                --pending_;
            }).detach();
        }
    }

    // SOCKS5 greeting + request. Returns the raw request tail (ATYP onwards)
    // to forward to the remote, or empty on failure (reply already sent).
    std::vector<unsigned char> socks5_handshake(int cfd) {
        unsigned char hdr[2];
        if (!net::recv_all(cfd, hdr, 2)) return {};
        if (hdr[0] != 5) return {};  // not SOCKS5; cannot even reply coherently
        std::vector<unsigned char> methods(hdr[1]);
        if (hdr[1] && !net::recv_all(cfd, methods.data(), methods.size())) return {};
        bool noauth = std::find(methods.begin(), methods.end(), 0) != methods.end();
        unsigned char greet_reply[2] = {5, (unsigned char)(noauth ? 0x00 : 0xff)};
        if (!net::send_all(cfd, greet_reply, 2) || !noauth) return {};

        unsigned char req[4];
        if (!net::recv_all(cfd, req, 4) || req[0] != 5) return {};
        std::vector<unsigned char> tail;
        tail.push_back(req[3]);
        switch (req[3]) {  // ATYP
            case 1: tail.resize(1 + 4 + 2); break;
            case 3: {
                unsigned char n;
                if (!net::recv_all(cfd, &n, 1)) return {};
                tail.push_back(n);
                tail.resize(2 + n + 2);
                break;
            }
            case 4: tail.resize(1 + 16 + 2); break;
            default:
                send_socks_reply(cfd, 0x08);  // address type not supported
                return {};
        }
        std::size_t already = req[3] == 3 ? 2 : 1;
        if (!net::recv_all(cfd, tail.data() + already, tail.size() - already)) return {};
        if (req[1] != 1) {  // only CONNECT
            send_socks_reply(cfd, 0x07);
            return {};
        }
        return tail;
    }

    static void send_socks_reply(int cfd, unsigned char code) {
        unsigned char rep[10] = {5, code, 0, 1, 0, 0, 0, 0, 0, 0};
        net::send_all(cfd, rep, sizeof(rep));
    }

    void handle_client(int cfd, std::uint64_t idx) {
        auto req = socks5_handshake(cfd);
        if (req.empty()) {
            ::close(cfd);
            return;
        }
        int rfd = net::dial(cfg_.remote_host, cfg_.remote_port);
        if (rfd < 0) {
            send_socks_reply(cfd, 0x05);  // connection refused
            ::close(cfd);
            return;
        }
        auto tunnel = std::make_shared<TunnelLink>(rfd, cfg_.psk, true,
                                                   capture_.enabled() ? &capture_ : nullptr, t0_);
        tunnel->set_capture_dirs(Direction::Up, Direction::Down);
        if (!tunnel->ok() || !tunnel->send_frame(FrameType::Control, req.data(), req.size())) {
            send_socks_reply(cfd, 0x05);
            ::close(cfd);
            return;
        }
        FrameType ft;
        std::vector<unsigned char> payload;
        if (!tunnel->recv_frame(ft, payload) || ft != FrameType::Control || payload.size() != 1 ||
            payload[0] != 0) {
            send_socks_reply(cfd, payload.size() == 1 && payload[0] != 0 ? payload[0] : 0x05);
            ::close(cfd);
            return;
        }
        send_socks_reply(cfd, 0x00);
        net::set_recv_timeout(cfd, 0.0);  // pumps block indefinitely

        auto s = std::make_shared<Session>();
        s->client_fd = cfd;
        s->tunnel = tunnel;
        double dummy_mean = cfg_.dummy_sizes ? cfg_.dummy_sizes->implied_mean_bytes() : 90000.0;
        s->injector = std::make_unique<detail::Injector>(
            *tunnel, cfg_.p_padding, dummy_mean, cfg_.dummy_sizes,
            Rng::substream(cfg_.seed, idx * 2 + 1).next_u64(), &s->up_dummy);
        s->injector->start();

        Rng pad_rng(Rng::substream(cfg_.seed, idx * 2).next_u64());
        s->up = std::thread([this, s, pad_rng]() mutable {
            std::vector<unsigned char> buf(kDataChunk);
            while (true) {
                ssize_t r = ::recv(s->client_fd, buf.data(), buf.size(), 0);
                if (r <= 0) break;
                s->injector->note_activity();
                if (!s->tunnel->send_frame(FrameType::Data, buf.data(), std::size_t(r))) break;
                s->up_real += std::uint64_t(r);
                if (cfg_.r_padding > 0) {
                    std::size_t pad = std::size_t(pad_rng.uniform(0, cfg_.r_padding) * double(r));
                    if (pad > 0) {
                        std::vector<unsigned char> zeros(std::min(pad, kMaxFramePayload), 0);
                        s->tunnel->send_frame(FrameType::Dummy, zeros.data(), zeros.size());
                        s->up_dummy += zeros.size();
                    }
                }
            }
            s->tunnel->close();
            ::shutdown(s->client_fd, SHUT_RDWR);
        });
        s->down = std::thread([s]() {
            FrameType ft;
            std::vector<unsigned char> payload;
            while (s->tunnel->recv_frame(ft, payload)) {
                if (ft == FrameType::Dummy) {
                    s->down_dummy += payload.size();
                    continue;  // cover traffic never reaches the client
                }
                if (ft == FrameType::Control) break;  // peer teardown
                if (!payload.empty() &&
                    !net::send_all(s->client_fd, payload.data(), payload.size()))
                    break;
                s->down_real += payload.size();
            }
            s->tunnel->close();
            ::shutdown(s->client_fd, SHUT_RDWR);
        });

        bool rejected = false;
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (stopping_) rejected = true;
            else sessions_.push_back(s);
        }
        if (rejected) {
            s->shutdown();
            s->join();
        }
    }

    ProxyConfig cfg_;
    std::atomic<int> listen_fd_{-1};
    std::uint16_t port_ = 0;
    double t0_ = 0;
    std::thread accept_thread_;
    std::atomic<bool> stopping_{false};
    std::atomic<int> pending_{0};
    mutable std::mutex mu_;
    std::vector<std::shared_ptr<Session>> sessions_;
    Capture capture_;
};

// ---------------------------------------------------------------------------
// RemoteIMProxy: unwraps tunnel frames, forwards Data to the requested
// destination, strips upstream cover traffic, and obfuscates the downstream
// leg (padding, dummy events, per-frame exponential delays). Upstream is
// never delayed.

class RemoteProxy {
public:
    explicit RemoteProxy(ProxyConfig cfg) : cfg_(std::move(cfg)) {}
    ~RemoteProxy() { stop(); }

    void start() {
        int fd = net::listen_on(cfg_.listen_host, cfg_.listen_port);
        if (fd < 0) throw runtime_fault("remote proxy: cannot bind listener");
        listen_fd_.store(fd);
        port_ = net::bound_port(fd);
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    void stop() {
        bool expected = false;
        if (!stopping_.compare_exchange_strong(expected, true)) return;
        int lfd = listen_fd_.load();
        if (lfd >= 0) ::shutdown(lfd, SHUT_RDWR);
        if (accept_thread_.joinable()) accept_thread_.join();
        if (lfd >= 0) {
            ::close(lfd);
            listen_fd_.store(-1);
        }
        while (pending_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(1));
        std::vector<std::thread> joiners;
        {
            std::lock_guard<std::mutex> lk(mu_);
            for (auto& s : sessions_) s->shutdown();
            for (auto& s : sessions_) joiners.emplace_back([sp = s] { sp->join(); });
        }
        for (auto& t : joiners) t.join();
    }

    std::uint16_t port() const { return port_; }

private:
    struct Session {
        int dest_fd = -1;
        std::shared_ptr<TunnelLink> tunnel;
        std::thread up, down;
        std::unique_ptr<detail::Injector> injector;

        void shutdown() {
            if (injector) injector->stop();
            if (tunnel) tunnel->close();
            if (dest_fd >= 0) ::shutdown(dest_fd, SHUT_RDWR);
        }
        void join() {
            if (up.joinable()) up.join();
            if (down.joinable()) down.join();
            if (injector) injector->stop();
            if (dest_fd >= 0) {
                ::close(dest_fd);
                dest_fd = -1;
            }
        }
    };

    void accept_loop() {
        std::uint64_t session_idx = 0;
        const int lfd = listen_fd_.load();
        while (true) {
            int tfd = ::accept(lfd, nullptr, nullptr);
            if (tfd < 0) break;
            int one = 1;
            ::setsockopt(tfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            net::set_recv_timeout(tfd, 10.0);
            ++pending_;
            std::thread([this, tfd, idx = session_idx++] {
                handle_tunnel(tfd, idx);
                --pending_;
            }).detach();
        }
    }

    // Control payload: ATYP, address, big-endian port (SOCKS5 layout).
    static bool parse_dest(const std::vector<unsigned char>& req, std::string& host,
                           std::uint16_t& port) {
        if (req.empty()) return false;
        if (req[0] == 1 && req.size() == 7) {
            char buf[INET_ADDRSTRLEN];
            if (!::inet_ntop(AF_INET, req.data() + 1, buf, sizeof(buf))) return false;
            host = buf;
            port = std::uint16_t((req[5] << 8) | req[6]);
            return true;
        }
        if (req[0] == 3 && req.size() >= 2 && req.size() == std::size_t(2 + req[1] + 2)) {
            host.assign(reinterpret_cast<const char*>(req.data() + 2), req[1]);
            port = std::uint16_t((req[req.size() - 2] << 8) | req[req.size() - 1]);
            return true;
        }
        return false;  // IPv6 CONNECT not offered
    }

    void handle_tunnel(int tfd, std::uint64_t idx) {
        auto tunnel = std::make_shared<TunnelLink>(tfd, cfg_.psk, false, nullptr, 0);
        tunnel->set_capture_dirs(Direction::Down, Direction::Up);
        FrameType ft;
        std::vector<unsigned char> req;
        if (!tunnel->ok() || !tunnel->recv_frame(ft, req) || ft != FrameType::Control) return;
        std::string host;
        std::uint16_t port = 0;
        unsigned char status = 0;
        int dfd = -1;
        if (!parse_dest(req, host, port)) status = 0x08;
        else {
            dfd = net::dial(host, port);
            if (dfd < 0) status = 0x05;
        }
        if (!tunnel->send_frame(FrameType::Control, &status, 1) || status != 0) {
            if (dfd >= 0) ::close(dfd);
            return;
        }

        net::set_recv_timeout(tfd, 0.0);
        auto s = std::make_shared<Session>();
        s->dest_fd = dfd;
        s->tunnel = tunnel;
        double dummy_mean = cfg_.dummy_sizes ? cfg_.dummy_sizes->implied_mean_bytes() : 90000.0;
        s->injector = std::make_unique<detail::Injector>(
            *tunnel, cfg_.p_padding, dummy_mean, cfg_.dummy_sizes,
            Rng::substream(cfg_.seed, idx * 2 + 1).next_u64());
        s->injector->start();

        // tunnel -> destination: strip cover traffic, forward data untouched
        s->up = std::thread([s]() {
            FrameType ft2;
            std::vector<unsigned char> payload;
            while (s->tunnel->recv_frame(ft2, payload)) {
                if (ft2 == FrameType::Dummy) continue;
                if (ft2 == FrameType::Control) break;
                if (!payload.empty() && !net::send_all(s->dest_fd, payload.data(), payload.size()))
                    break;
            }
            s->tunnel->close();
            ::shutdown(s->dest_fd, SHUT_RDWR);
        });

        // destination -> tunnel: pad, and delay each frame independently;
        // FIFO order is preserved so a stalled frame holds back later ones,
        // never the upstream pump.
        Rng down_rng(Rng::substream(cfg_.seed, idx * 2).next_u64());
        s->down = std::thread([this, s, down_rng]() mutable {
            std::vector<unsigned char> buf(kDataChunk);
            double release_floor = 0;
            while (true) {
                ssize_t r = ::recv(s->dest_fd, buf.data(), buf.size(), 0);
                if (r <= 0) break;
                s->injector->note_activity();
                if (cfg_.delay_rate_per_s > 0) {
                    double d = down_rng.exponential(cfg_.delay_rate_per_s);
                    double target = std::max(TunnelLink::now() + d, release_floor);
                    double wait = target - TunnelLink::now();
                    if (wait > 0)
                        std::this_thread::sleep_for(std::chrono::duration<double>(wait));
                    release_floor = target;
                }
                if (!s->tunnel->send_frame(FrameType::Data, buf.data(), std::size_t(r))) break;
                if (cfg_.r_padding > 0) {
                    std::size_t pad =
                        std::size_t(down_rng.uniform(0, cfg_.r_padding) * double(r));
                    if (pad > 0) {
                        std::vector<unsigned char> zeros(std::min(pad, kMaxFramePayload), 0);
                        s->tunnel->send_frame(FrameType::Dummy, zeros.data(), zeros.size());
                    }
                }
            }
            s->tunnel->close();
            ::shutdown(s->dest_fd, SHUT_RDWR);
        });

        bool rejected = false;
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (stopping_) rejected = true;
            else sessions_.push_back(s);
        }
        if (rejected) {
            s->shutdown();
            s->join();
        }
    }

    ProxyConfig cfg_;
    std::atomic<int> listen_fd_{-1};
    std::uint16_t port_ = 0;
    std::thread accept_thread_;
    std::atomic<bool> stopping_{false};
    std::atomic<int> pending_{0};
    std::mutex mu_;
    std::vector<std::shared_ptr<Session>> sessions_;
};

// Proxy configuration file: `key value` lines. Keys: listen, remote, psk,
// r_padding, p_padding, lambda_d, model, capture.
struct ProxyFileConfig {
    ProxyConfig proxy;
    std::string model_path;
    std::string capture_path;
};

inline std::pair<std::string, std::uint16_t> parse_hostport(const std::string& s,
                                                            const std::string& where) {
    auto pos = s.rfind(':');
    if (pos == std::string::npos) throw parse_error(where, "expected host:port");
    std::uint64_t port;
    if (!parse_u64(s.substr(pos + 1), port) || port > 65535)
        throw parse_error(where, "bad port in '" + s + "'");
    return {s.substr(0, pos), std::uint16_t(port)};
}

inline ProxyFileConfig load_proxy_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw runtime_fault("cannot open proxy config: " + path);
    ProxyFileConfig out;
    std::string line;
    std::size_t ln = 0;
    while (std::getline(is, line)) {
        ++ln;
        auto sv = strip_cr(line);
        if (sv.empty() || sv[0] == '#') continue;
        auto toks = split_ws(sv);
        if (toks.size() != 2) throw parse_error(loc(path, ln), "expected 'key value'");
        std::string key(toks[0]), val(toks[1]);
        if (key == "listen") {
            auto [h, p] = parse_hostport(val, loc(path, ln));
            out.proxy.listen_host = h;
            out.proxy.listen_port = p;
        } else if (key == "remote") {
            auto [h, p] = parse_hostport(val, loc(path, ln));
            out.proxy.remote_host = h;
            out.proxy.remote_port = p;
        } else if (key == "psk") out.proxy.psk = val;
        else if (key == "r_padding") { if (!parse_double(val, out.proxy.r_padding)) throw parse_error(loc(path, ln), "bad number"); }
        else if (key == "p_padding") { if (!parse_double(val, out.proxy.p_padding)) throw parse_error(loc(path, ln), "bad number"); }
        else if (key == "lambda_d") { if (!parse_double(val, out.proxy.delay_rate_per_s)) throw parse_error(loc(path, ln), "bad number"); }
        else if (key == "seed") { if (!parse_u64(val, out.proxy.seed)) throw parse_error(loc(path, ln), "bad seed"); }
        else if (key == "model") out.model_path = val;
        else if (key == "capture") out.capture_path = val;
        else throw parse_error(loc(path, ln), "unknown key '" + key + "'");
    }
    return out;
}

} // namespace imta::improxy
