#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>

#include "imta/detect_event.hpp"
#include "imta/improxy.hpp"

using namespace imta;
using namespace imta::improxy;

namespace {

struct EchoServer {
    int fd = -1;
    std::uint16_t port = 0;
    std::thread th;

    void start() {
        fd = net::listen_on("127.0.0.1", 0);
        REQUIRE(fd >= 0);
        port = net::bound_port(fd);
        th = std::thread([this] {
            while (true) {
                int c = ::accept(fd, nullptr, nullptr);
                if (c < 0) break;
                std::thread([c] {
                    unsigned char buf[16384];
                    while (true) {
                        ssize_t r = ::recv(c, buf, sizeof buf, 0);
                        if (r <= 0) break;
                        if (!net::send_all(c, buf, std::size_t(r))) break;
                    }
                    ::close(c);
                }).detach();
            }
        });
    }
    ~EchoServer() {
        if (fd >= 0) {
            ::shutdown(fd, SHUT_RDWR);
            ::close(fd);
        }
        if (th.joinable()) th.join();
    }
};

int socks_connect(std::uint16_t proxy_port, std::uint16_t dest_port) {
    int fd = net::dial("127.0.0.1", proxy_port);
    REQUIRE(fd >= 0);
    unsigned char greet[3] = {5, 1, 0};
    REQUIRE(net::send_all(fd, greet, 3));
    unsigned char rep[2];
    REQUIRE(net::recv_all(fd, rep, 2));
    REQUIRE(rep[0] == 5);
    REQUIRE(rep[1] == 0);
    unsigned char req[10] = {5, 1,    0,    1, 127, 0, 0, 1,
                             (unsigned char)(dest_port >> 8), (unsigned char)(dest_port & 0xff)};
    REQUIRE(net::send_all(fd, req, 10));
    unsigned char rep2[10];
    REQUIRE(net::recv_all(fd, rep2, 10));
    REQUIRE(rep2[1] == 0);
    return fd;
}


std::vector<unsigned char> pattern_bytes(std::size_t n, std::uint64_t seed) {
    std::vector<unsigned char> v(n);
    Rng rng(seed);
    for (auto& b : v) b = (unsigned char)(rng.next_u64() & 0xff);
    return v;
}

} // namespace

TEST_CASE("socks5 greeting and connect reply bytes") {
    EchoServer echo;
    echo.start();
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    LocalProxy local(lc);
    local.start();

    // greeting 05 01 00 -> 05 00
    int fd = net::dial("127.0.0.1", local.port());
    unsigned char greet[3] = {5, 1, 0};
    net::send_all(fd, greet, 3);
    unsigned char rep[2];
    REQUIRE(net::recv_all(fd, rep, 2));
    CHECK(rep[0] == 5);
    CHECK(rep[1] == 0);
    ::close(fd);

    // offering only auth method 0x02 is refused with 0xff
    fd = net::dial("127.0.0.1", local.port());
    unsigned char greet2[3] = {5, 1, 2};
    net::send_all(fd, greet2, 3);
    REQUIRE(net::recv_all(fd, rep, 2));
    CHECK(rep[1] == 0xff);
    ::close(fd);

    // BIND command is rejected with code 7
    fd = net::dial("127.0.0.1", local.port());
    net::send_all(fd, greet, 3);
    REQUIRE(net::recv_all(fd, rep, 2));
    unsigned char req[10] = {5, 2, 0, 1, 127, 0, 0, 1, 0, 80};
    net::send_all(fd, req, 10);
    unsigned char rep2[10];
    REQUIRE(net::recv_all(fd, rep2, 10));
    CHECK(rep2[1] == 0x07);
    ::close(fd);

    local.stop();
    remote.stop();
}

TEST_CASE("unreachable destination maps to the refused reply") {
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    LocalProxy local(lc);
    local.start();

    int fd = net::dial("127.0.0.1", local.port());
    unsigned char greet[3] = {5, 1, 0};
    net::send_all(fd, greet, 3);
    unsigned char rep[2];
    REQUIRE(net::recv_all(fd, rep, 2));
    unsigned char req[10] = {5, 1, 0, 1, 127, 0, 0, 1, 0, 9};  // port 9, nothing listens
    net::send_all(fd, req, 10);
    unsigned char rep2[10];
    REQUIRE(net::recv_all(fd, rep2, 10));
    CHECK(rep2[1] == 0x05);
    ::close(fd);
    local.stop();
    remote.stop();
}

TEST_CASE("one megabyte of random payload survives bit-exact with all obfuscation on") {
    EchoServer echo;
    echo.start();
    ProxyConfig rc;
    rc.psk = "k";
    rc.r_padding = 0.3;
    rc.p_padding = 0.2;
    rc.delay_rate_per_s = 200;  // 5 ms mean, keeps the test fast
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    lc.r_padding = 0.3;
    lc.p_padding = 0.2;
    LocalProxy local(lc);
    local.start();

    int fd = socks_connect(local.port(), echo.port);
    auto data = pattern_bytes(1 << 20, 99);
    std::thread sender([&] { net::send_all(fd, data.data(), data.size()); });
    std::vector<unsigned char> back(data.size());
    bool ok = net::recv_all(fd, back.data(), back.size());
    sender.join();
    CHECK(ok);
    CHECK(back == data);

    auto st = local.stats();
    CHECK(st.up_real_bytes == data.size());
    CHECK(st.down_real_bytes == data.size());
    ::close(fd);
    local.stop();
    remote.stop();
}

TEST_CASE("several concurrent sessions stay isolated") {
    EchoServer echo;
    echo.start();
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    lc.r_padding = 0.2;
    LocalProxy local(lc);
    local.start();

    const int kSessions = 8;
    std::vector<std::thread> workers;
    std::vector<char> results(kSessions, 0);
    for (int s = 0; s < kSessions; ++s) {
        workers.emplace_back([&, s] {
            int fd = net::dial("127.0.0.1", local.port());
            unsigned char greet[3] = {5, 1, 0};
            net::send_all(fd, greet, 3);
            unsigned char rep[2];
            if (!net::recv_all(fd, rep, 2)) return;
            unsigned char req[10] = {5, 1, 0, 1, 127, 0, 0, 1,
                                     (unsigned char)(echo.port >> 8),
                                     (unsigned char)(echo.port & 0xff)};
            net::send_all(fd, req, 10);
            unsigned char rep2[10];
            if (!net::recv_all(fd, rep2, 10) || rep2[1] != 0) return;
            auto data = pattern_bytes(200000 + std::size_t(s) * 1000, 1000 + std::uint64_t(s));
            std::thread sender([&] { net::send_all(fd, data.data(), data.size()); });
            std::vector<unsigned char> back(data.size());
            bool ok = net::recv_all(fd, back.data(), back.size());
            sender.join();
            results[std::size_t(s)] = ok && back == data;
            ::close(fd);
        });
    }
    for (auto& w : workers) w.join();
    for (char r : results) CHECK(r != 0);
    local.stop();
    remote.stop();
}

TEST_CASE("an idle tunnel with certain injection emits cover frames only on the wire") {
    EchoServer echo;
    echo.start();
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    lc.p_padding = 1.0;
    LocalProxy local(lc);
    local.capture().enable();
    local.start();

    int fd = socks_connect(local.port(), echo.port);
    std::this_thread::sleep_for(std::chrono::seconds(30));
    auto st = local.stats();
    CHECK(st.up_dummy_bytes > 0);
    CHECK(st.up_real_bytes == 0);
    CHECK(st.down_real_bytes == 0);

    // at least 25 cover events in 30 idle seconds at p = 1
    auto trace = local.capture().to_trace();
    std::size_t up_frames = 0;
    for (const auto& p : trace.packets)
        if (p.dir == Direction::Up && p.size_bytes > 3) ++up_frames;
    CHECK(up_frames >= 25);
    ::close(fd);
    local.stop();
    remote.stop();
}

TEST_CASE("capture sees exactly the data frames when injection is off") {
    EchoServer echo;
    echo.start();
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    LocalProxy local(lc);
    local.capture().enable();
    local.start();

    int fd = socks_connect(local.port(), echo.port);
    auto base = local.capture().to_trace().packets.size();  // CONNECT exchange
    CHECK(base <= 2);

    const std::size_t kChunk = 1200;
    const int kFrames = 5;
    for (int i = 0; i < kFrames; ++i) {
        auto data = pattern_bytes(kChunk, 7 + std::uint64_t(i));
        net::send_all(fd, data.data(), data.size());
        std::vector<unsigned char> back(kChunk);
        REQUIRE(net::recv_all(fd, back.data(), back.size()));
        CHECK(back == data);
    }
    auto packets = local.capture().to_trace().packets;
    std::size_t up = 0, down = 0;
    for (const auto& p : packets) {
        if (p.size_bytes != kChunk + 3) continue;
        if (p.dir == Direction::Up) ++up;
        else ++down;
    }
    CHECK(up == kFrames);
    CHECK(down == kFrames);
    ::close(fd);
    local.stop();
    remote.stop();
}

TEST_CASE("idle session with everything off leaves no wire records beyond the handshake") {
    EchoServer echo;
    echo.start();
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    LocalProxy local(lc);
    local.capture().enable();
    local.start();

    int fd = socks_connect(local.port(), echo.port);
    std::this_thread::sleep_for(std::chrono::seconds(3));
    CHECK(local.capture().to_trace().packets.size() <= 2);
    ::close(fd);
    local.stop();
    remote.stop();
}

TEST_CASE("a malformed tunnel stream tears the session down") {
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    int fd = net::dial("127.0.0.1", remote.port());
    REQUIRE(fd >= 0);
    // garbage nonce and frames under the wrong key: the control frame fails
    // to parse and the remote hangs up
    auto junk = pattern_bytes(64, 5);
    net::send_all(fd, junk.data(), junk.size());
    unsigned char buf[32];
    ssize_t r;
    do {
        r = ::recv(fd, buf, sizeof buf, 0);
    } while (r > 0);
    CHECK(r <= 0);
    ::close(fd);
    remote.stop();
}

TEST_CASE("downstream delays average out near the configured mean, upstream unaffected") {
    EchoServer echo;
    echo.start();
    ProxyConfig rc;
    rc.psk = "k";
    rc.delay_rate_per_s = 20;  // 50 ms mean
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    LocalProxy local(lc);
    local.start();

    // baseline: same topology, no delays
    ProxyConfig rc0;
    rc0.psk = "k";
    RemoteProxy remote0(rc0);
    remote0.start();
    ProxyConfig lc0;
    lc0.psk = "k";
    lc0.remote_host = "127.0.0.1";
    lc0.remote_port = remote0.port();
    LocalProxy local0(lc0);
    local0.start();

    auto measure_rtt = [&](std::uint16_t proxy_port, int rounds) {
        int fd = socks_connect(proxy_port, echo.port);
        std::vector<double> rtts;
        unsigned char b = 0x5a, back;
        for (int i = 0; i < rounds; ++i) {
            double t0 = TunnelLink::now();
            net::send_all(fd, &b, 1);
            REQUIRE(net::recv_all(fd, &back, 1));
            rtts.push_back(TunnelLink::now() - t0);
        }
        ::close(fd);
        return rtts;
    };

    auto base = measure_rtt(local0.port(), 40);
    auto delayed = measure_rtt(local.port(), 60);
    double base_mean = std::accumulate(base.begin(), base.end(), 0.0) / double(base.size());
    double delayed_mean =
        std::accumulate(delayed.begin(), delayed.end(), 0.0) / double(delayed.size());
    double added = delayed_mean - base_mean;
    CHECK(base_mean < 0.005);           // upstream+downstream framing cost on loopback
    CHECK(added > 0.020);               // delays clearly present
    CHECK(added < 0.120);               // and not wildly above the 50 ms mean
    local.stop();
    remote.stop();
    local0.stop();
    remote0.stop();
}

TEST_CASE("a 32 MB session stays transparent") {
    EchoServer echo;
    echo.start();
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    LocalProxy local(lc);
    local.start();

    int fd = socks_connect(local.port(), echo.port);
    auto data = pattern_bytes(32u << 20, 321);
    std::thread sender([&] { net::send_all(fd, data.data(), data.size()); });
    std::vector<unsigned char> back(data.size());
    bool ok = net::recv_all(fd, back.data(), back.size());
    sender.join();
    CHECK(ok);
    CHECK(back == data);
    ::close(fd);
    local.stop();
    remote.stop();
}

TEST_CASE("proxy config files parse and reject unknown keys") {
    {
        std::ofstream os("/tmp/improxy_good.conf");
        os << "# comment\nlisten 127.0.0.1:1080\nremote 10.0.0.1:9000\npsk hunter2\n"
              "r_padding 0.1\np_padding 0.0001\nlambda_d 1\nseed 9\ncapture /tmp/cap.tsv\n";
    }
    auto fc = load_proxy_config("/tmp/improxy_good.conf");
    CHECK(fc.proxy.listen_port == 1080);
    CHECK(fc.proxy.remote_host == "10.0.0.1");
    CHECK(fc.proxy.psk == "hunter2");
    CHECK(fc.proxy.r_padding == 0.1);
    CHECK(fc.proxy.delay_rate_per_s == 1);
    CHECK(fc.capture_path == "/tmp/cap.tsv");

    {
        std::ofstream os("/tmp/improxy_bad.conf");
        os << "listne 127.0.0.1:1080\n";
    }
    CHECK_THROWS_AS(load_proxy_config("/tmp/improxy_bad.conf"), parse_error);
}

TEST_CASE("a non-SOCKS5 client is dropped without a reply") {
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    ProxyConfig lc;
    lc.psk = "k";
    lc.remote_host = "127.0.0.1";
    lc.remote_port = remote.port();
    LocalProxy local(lc);
    local.start();

    int fd = net::dial("127.0.0.1", local.port());
    unsigned char v4_greet[3] = {4, 1, 0};  // SOCKS4 version byte
    net::send_all(fd, v4_greet, 3);
    unsigned char buf[8];
    ssize_t r = ::recv(fd, buf, sizeof buf, 0);
    CHECK(r <= 0);  // connection closed, no SOCKS5 reply forged
    ::close(fd);
    local.stop();
    remote.stop();
}

// End-to-end self-test: the same message schedule is pushed through the
// proxy with obfuscation off and on; the wire captures are run through burst
// extraction and matched against the ground-truth events. Obfuscation must
// lower the adversary's match ratio.
TEST_CASE("obfuscated wire traffic correlates worse than clean wire traffic") {
    auto run_session = [&](double r_padding, double p_padding) {
        EchoServer echo;
        echo.start();
        ProxyConfig rc;
        rc.psk = "k";
        RemoteProxy remote(rc);
        remote.start();
        ProxyConfig lc;
        lc.psk = "k";
        lc.remote_host = "127.0.0.1";
        lc.remote_port = remote.port();
        lc.r_padding = r_padding;
        lc.p_padding = p_padding;
        lc.seed = 11;
        LocalProxy local(lc);
        local.capture().enable();
        local.start();

        int fd = socks_connect(local.port(), echo.port);
        // ground truth: eight messages, 80-240 KB, 2 s apart
        Flow truth;
        double t0 = TunnelLink::now();
        Rng rng(55);
        std::thread drain([&] {
            std::vector<unsigned char> sink(65536);
            while (::recv(fd, sink.data(), sink.size(), 0) > 0) {}
        });
        for (int i = 0; i < 8; ++i) {
            std::size_t len = 80000 + std::size_t(rng.next_unit() * 160000);
            auto data = pattern_bytes(len, 100 + std::uint64_t(i));
            double at = TunnelLink::now();
            net::send_all(fd, data.data(), data.size());
            truth.events.push_back(Event{at - t0, double(len), -1, false});
            std::this_thread::sleep_for(std::chrono::milliseconds(2000));
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(300));
        ::shutdown(fd, SHUT_RDWR);
        drain.join();
        ::close(fd);
        auto wire = local.capture().to_trace();
        local.stop();
        remote.stop();

        trace::BurstConfig bc;
        bc.dir_filter = Direction::Up;
        auto extracted = trace::extract_events(wire, bc);
        detect::EventMatchConfig ec;  // defaults: 3 s, 10 KB
        return detect::match_events(truth, extracted, ec).r;
    };

    double clean = run_session(0.0, 0.0);
    double obfuscated = run_session(0.6, 1.0);
    CHECK(clean >= 0.8);
    CHECK(obfuscated < clean);
}

TEST_CASE("random garbage streams always tear tunnel sessions down") {
    ProxyConfig rc;
    rc.psk = "k";
    RemoteProxy remote(rc);
    remote.start();
    Rng rng(314);
    for (int trial = 0; trial < 20; ++trial) {
        int fd = net::dial("127.0.0.1", remote.port());
        REQUIRE(fd >= 0);
        std::size_t n = 1 + std::size_t(rng.next_unit() * 200);
        std::vector<unsigned char> junk(n);
        for (auto& b : junk) b = (unsigned char)(rng.next_u64() & 0xff);
        net::send_all(fd, junk.data(), junk.size());
        ::shutdown(fd, SHUT_WR);
        unsigned char buf[64];
        ssize_t r;
        do {
            r = ::recv(fd, buf, sizeof buf, 0);
        } while (r > 0);
        CHECK(r <= 0);
        ::close(fd);
    }
    remote.stop();
}
