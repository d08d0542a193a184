// imta: IM traffic analysis toolkit command line.
//   synth      generate synthetic channel/user flow corpora
//   extract    recover events from packet traces (pcap or line format)
//   correlate  score a channel/user flow pair with a detector
//   roc        sweep thresholds over a score file
//   obfuscate  apply padding / cover events / delays to a flow
//   proxy      run the local or remote obfuscation proxy

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "imta/detect_event.hpp"
#include "imta/detect_shape.hpp"
#include "imta/eval.hpp"
#include "imta/flow.hpp"
#include "imta/improxy.hpp"
#include "imta/model.hpp"
#include "imta/obfuscate.hpp"
#include "imta/synth.hpp"
#include "imta/trace.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

static constexpr const char* kVersion = "imta 1.0.0";

namespace {

std::string default_model_path(const char* argv0) {
    // walk up from the binary, then try the working directory
    std::error_code ec;
    fs::path base = fs::weakly_canonical(fs::path(argv0), ec).parent_path();
    for (int up = 0; up < 4; ++up) {
        fs::path cand = base / "data" / "default.imta";
        if (fs::exists(cand, ec)) return cand.string();
        base = base.parent_path();
    }
    for (const fs::path& wd : {fs::path("."), fs::path("..")}) {
        fs::path cand = wd / "data" / "default.imta";
        if (fs::exists(cand, ec)) return cand.string();
    }
#ifdef IMTA_DEFAULT_MODEL
    return IMTA_DEFAULT_MODEL;
#else
    return "data/default.imta";
#endif
}

void write_manifest(const fs::path& path, const json& j) {
    std::ofstream os(path, std::ios::binary);
    os << j.dump(2) << "\n";
}

std::string pad_index(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05zu", i);
    return buf;
}

int cmd_synth(const std::string& model_path, std::size_t channels, double rate,
              bool rate_buckets, double hours, std::uint64_t seed, double bw_mbps,
              double te, const std::string& role, const std::string& out_dir, unsigned jobs) {
    auto m = imta::model::load_model(model_path);
    imta::synth::PairCorpusConfig cfg;
    cfg.master_seed = seed;
    cfg.duration_s = hours * 3600.0;
    if (rate_buckets)
        for (const auto& b : m.buckets) cfg.rates_per_day.push_back(b.rate_per_day);
    else cfg.rates_per_day = {rate};
    cfg.user.bandwidth_bps = bw_mbps * 1e6;
    cfg.user.latency = m.latency;
    cfg.user.merge_threshold_s = te;
    cfg.user.role = role == "admin" ? imta::synth::UserRole::Admin : imta::synth::UserRole::Member;

    fs::create_directories(out_dir);
    auto corpus = imta::synth::make_pair_corpus(m, channels, cfg, jobs);
    for (const auto& p : corpus.pairs) {
        imta::write_flow_file(p.channel, (fs::path(out_dir) / ("channel_" + pad_index(p.id) + ".flow")).string());
        imta::write_flow_file(p.user, (fs::path(out_dir) / ("user_" + pad_index(p.id) + ".flow")).string());
    }
    json manifest{{"tool", kVersion},
                  {"subcommand", "synth"},
                  {"model", model_path},
                  {"channels", channels},
                  {"rate_buckets", rate_buckets},
                  {"rate_per_day", rate},
                  {"hours", hours},
                  {"seed", seed},
                  {"bandwidth_mbps", bw_mbps},
                  {"te_s", te},
                  {"role", role},
                  {"out", out_dir},
                  {"bucket_counts", corpus.bucket_counts}};
    write_manifest(fs::path(out_dir) / "manifest.json", manifest);
    std::size_t total = 0;
    std::cout << "channels " << corpus.pairs.size() << "\nbucket_counts";
    for (auto c : corpus.bucket_counts) {
        std::cout << " " << c;
        total += c;
    }
    std::cout << "\nbucket_total " << total << "\n";
    return 0;
}

int cmd_extract(const std::string& in, const std::string& endpoint, double te, double min_pkt,
                const std::string& dir, const std::string& out) {
    imta::trace::PacketTrace t;
    auto ext = fs::path(in).extension().string();
    if (ext == ".pcap" || ext == ".cap") {
        if (endpoint.empty())
            throw imta::runtime_fault("pcap input needs --endpoint <ipv4> for direction");
        t = imta::trace::read_pcap(in, endpoint);
    } else {
        t = imta::trace::read_line_trace(in);
    }
    imta::trace::BurstConfig cfg;
    cfg.te_s = te;
    cfg.min_packet_size = min_pkt;
    if (dir == "U") cfg.dir_filter = imta::Direction::Up;
    else if (dir == "D") cfg.dir_filter = imta::Direction::Down;
    auto flow = imta::trace::extract_events(t, cfg);
    imta::write_flow_file(flow, out);
    json manifest{{"tool", kVersion}, {"subcommand", "extract"}, {"in", in},
                  {"endpoint", endpoint}, {"te_s", te}, {"min_pkt", min_pkt},
                  {"dir", dir}, {"out", out}, {"events", flow.events.size()}};
    write_manifest(out + ".manifest.json", manifest);
    std::cout << "events " << flow.events.size() << "\n";
    return 0;
}

int cmd_correlate(const std::string& detector, const std::string& channel_path,
                  const std::string& user_path, double delta, double gamma, double ts, double te,
                  double eta, double length, double gap_cutoff, double user_bw_mbps,
                  const std::string& append, std::uint64_t pair_id, bool associated) {
    auto channel = imta::read_flow_file(channel_path);
    auto user = imta::read_flow_file(user_path);
    imta::eval::ScoreConfig cfg;
    cfg.detector = detector == "shape" ? imta::eval::Detector::Shape : imta::eval::Detector::Event;
    cfg.event.delta_s = delta;
    cfg.event.gamma_bytes = gamma;
    cfg.event.eta = eta;
    cfg.shape.ts_s = ts;
    cfg.shape.te_s = te;
    cfg.shape.eta = eta;
    cfg.observation_s = length;
    cfg.gap_cutoff_s = gap_cutoff;
    cfg.user_bandwidth_bps = user_bw_mbps * 1e6;
    if (cfg.detector == imta::eval::Detector::Event && channel.events.empty())
        throw imta::runtime_fault("empty channel flow: match ratio undefined");
    double score = imta::eval::score_pair(channel, user, cfg);
    const char* decision = score > eta ? "H1" : "H0";
    std::cout << "score " << imta::fmt_double(score) << "\ndecision " << decision << "\n";
    if (!append.empty()) {
        bool fresh = !fs::exists(append);
        std::ofstream os(append, std::ios::binary | std::ios::app);
        if (fresh) os << "pair_id,associated,detector,length_s,score\n";
        os << pair_id << ',' << (associated ? 1 : 0) << ',' << detector << ','
           << imta::fmt_double(length) << ',' << imta::fmt_double(score) << '\n';
    }
    return 0;
}

int cmd_roc(const std::string& scores_path, const std::string& out, std::size_t grid) {
    auto scores = imta::eval::read_scores_csv(scores_path);
    auto curve = imta::eval::roc(scores, imta::eval::default_threshold_grid(grid));
    std::ofstream os(out, std::ios::binary);
    if (!os) throw imta::runtime_fault("cannot open for writing: " + out);
    imta::eval::write_roc_csv(curve, os);
    json manifest{{"tool", kVersion}, {"subcommand", "roc"}, {"scores", scores_path},
                  {"out", out}, {"grid", grid},
                  {"positives", curve.positives}, {"negatives", curve.negatives},
                  {"auc", imta::eval::auc(scores)}};
    write_manifest(out + ".manifest.json", manifest);
    std::cout << "points " << curve.points.size() << "\nauc "
              << imta::fmt_double(imta::eval::auc(scores)) << "\n";
    return 0;
}

int cmd_obfuscate(const std::string& in, const std::string& out, const std::string& model_path,
                  double r_padding, double p_padding, double delay_mean, double duration,
                  std::uint64_t seed, const std::string& report_path) {
    auto flow = imta::read_flow_file(in);
    auto m = imta::model::load_model(model_path);
    imta::obfuscate::ObfuscationConfig cfg;
    cfg.r_padding = r_padding;
    cfg.p_padding = p_padding;
    cfg.delay_rate_per_s = delay_mean > 0 ? 1.0 / delay_mean : 0;
    cfg.dummy_sizes = &m.sizes.table(imta::MessageType::Photo);
    cfg.seed = seed;
    double dur = duration > 0 ? duration : flow.span_s();
    auto obf = imta::obfuscate::apply(flow, dur, cfg);
    imta::write_flow_file(obf, out);
    auto rep = imta::obfuscate::overhead(flow, obf, cfg, dur);
    if (!report_path.empty()) {
        std::ofstream os(report_path, std::ios::binary);
        os << imta::obfuscate::overhead_csv_header() << "\n"
           << imta::obfuscate::overhead_csv(rep) << "\n";
    }
    json manifest{{"tool", kVersion}, {"subcommand", "obfuscate"}, {"in", in}, {"out", out},
                  {"model", model_path}, {"r_padding", r_padding}, {"p_padding", p_padding},
                  {"delay_mean_s", delay_mean}, {"duration_s", dur}, {"seed", seed}};
    write_manifest(out + ".manifest.json", manifest);
    std::cout << "overhead " << imta::fmt_double(rep.overhead) << "\nanalytical "
              << imta::fmt_double(rep.analytical_overhead) << "\n";
    return 0;
}

std::atomic<bool> g_stop{false};

int cmd_proxy(const std::string& which, const std::string& config_path,
              const std::string& model_fallback) {
    auto fc = imta::improxy::load_proxy_config(config_path);
    imta::model::TrafficModel m =
        imta::model::load_model(fc.model_path.empty() ? model_fallback : fc.model_path);
    fc.proxy.dummy_sizes = &m.sizes.table(imta::MessageType::Photo);

    std::signal(SIGINT, [](int) { g_stop = true; });
    std::signal(SIGTERM, [](int) { g_stop = true; });

    if (which == "local") {
        imta::improxy::LocalProxy p(fc.proxy);
        if (!fc.capture_path.empty()) p.capture().enable();
        p.start();
        std::cout << "local proxy listening on " << fc.proxy.listen_host << ":" << p.port()
                  << std::endl;
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        p.stop();
        if (!fc.capture_path.empty())
            imta::trace::write_line_trace_file(p.capture().to_trace(), fc.capture_path);
    } else {
        imta::improxy::RemoteProxy p(fc.proxy);
        p.start();
        std::cout << "remote proxy listening on " << fc.proxy.listen_host << ":" << p.port()
                  << std::endl;
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        p.stop();
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"IM traffic analysis toolkit"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    std::string model_path = default_model_path(argv[0]);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic channel/user flow corpus");
    std::size_t channels = 1;
    double rate = 130.57, hours = 24, bw_mbps = 1.0, s_te = 0.5;
    bool rate_buckets = false;
    std::uint64_t seed = 1;
    unsigned jobs = 1;
    std::string role = "member", out_dir = "corpus";
    std::string synth_model = model_path;
    synth->add_option("--model", synth_model, "model file")->capture_default_str();
    synth->add_option("--channels", channels, "number of channels")->check(CLI::PositiveNumber);
    synth->add_option("--rate", rate, "messages per day")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_flag("--rate-buckets", rate_buckets, "cycle the five bucket rates instead of --rate");
    synth->add_option("--hours", hours, "flow duration, hours")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--seed", seed, "master seed")->capture_default_str();
    synth->add_option("--bw", bw_mbps, "user link bandwidth, Mbps")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--te", s_te, "burst/merge threshold, seconds")->check(CLI::PositiveNumber)->capture_default_str();
    synth->add_option("--role", role, "member|admin")->check(CLI::IsMember({"member", "admin"}))->capture_default_str();
    synth->add_option("--jobs", jobs, "worker threads")->capture_default_str();
    synth->add_option("--out", out_dir, "output directory")->capture_default_str();

    // extract
    auto* extract = app.add_subcommand("extract", "Extract events from a packet trace");
    std::string ex_in, ex_endpoint, ex_dir = "D", ex_out = "extracted.flow";
    double ex_te = 0.5, ex_minpkt = 512;
    extract->add_option("--in", ex_in, "input trace (.pcap/.cap or line format)")->required();
    extract->add_option("--endpoint", ex_endpoint, "monitored IPv4 address (pcap input)");
    extract->add_option("--te", ex_te, "burst gap threshold, seconds")->capture_default_str();
    extract->add_option("--min-pkt", ex_minpkt, "ignore packets smaller than this, bytes")->capture_default_str();
    extract->add_option("--dir", ex_dir, "direction filter: U, D or both")->check(CLI::IsMember({"U", "D", "both"}))->capture_default_str();
    extract->add_option("--out", ex_out, "output flow file")->capture_default_str();

    // correlate
    auto* correlate = app.add_subcommand("correlate", "Score a channel/user flow pair");
    std::string c_detector = "event", c_channel, c_user, c_append;
    double c_delta = 3.0, c_gamma = 10000, c_ts = 0.01, c_te = 0.5, c_eta = 0.5;
    double c_length = 900, c_cutoff = 7200, c_user_bw = 0;
    std::uint64_t c_pair_id = 0;
    bool c_assoc = false;
    correlate->add_option("--detector", c_detector, "event|shape")->check(CLI::IsMember({"event", "shape"}))->capture_default_str();
    correlate->add_option("--channel", c_channel, "channel flow file")->required();
    correlate->add_option("--user", c_user, "user flow file")->required();
    correlate->add_option("--delta", c_delta, "event timing tolerance, seconds")->capture_default_str();
    correlate->add_option("--gamma", c_gamma, "event size tolerance, bytes")->capture_default_str();
    correlate->add_option("--ts", c_ts, "shape bin width, seconds")->capture_default_str();
    correlate->add_option("--te", c_te, "bar half-width, seconds")->capture_default_str();
    correlate->add_option("--eta", c_eta, "decision threshold")->capture_default_str();
    correlate->add_option("--length", c_length, "observation length (active seconds)")->capture_default_str();
    correlate->add_option("--gap-cutoff", c_cutoff, "long-gap cutoff for active time, seconds")->capture_default_str();
    correlate->add_option("--user-bw", c_user_bw,
                          "monitored user's link rate, Mbps; the shape detector folds the "
                          "transfer time back out of event stamps (0 = off)")->capture_default_str();
    correlate->add_option("--append", c_append, "append a CSV row to this score file");
    correlate->add_option("--pair-id", c_pair_id, "pair id for the CSV row")->capture_default_str();
    correlate->add_flag("--associated", c_assoc, "mark the CSV row as ground-truth associated");

    // roc
    auto* roc = app.add_subcommand("roc", "Threshold sweep over a score file");
    std::string r_scores, r_out = "roc.csv";
    std::size_t r_grid = 512;
    roc->add_option("--scores", r_scores, "score CSV")->required();
    roc->add_option("--out", r_out, "output ROC CSV")->capture_default_str();
    roc->add_option("--grid", r_grid, "number of thresholds in [0,1]")->capture_default_str();

    // obfuscate
    auto* obf = app.add_subcommand("obfuscate", "Apply the countermeasure transforms to a flow");
    std::string o_in, o_out = "out.flow.obf", o_report;
    std::string o_model = model_path;
    double o_r = 0, o_p = 0, o_delay_mean = 0, o_duration = 0;
    std::uint64_t o_seed = 1;
    obf->add_option("--in", o_in, "input flow")->required();
    obf->add_option("--out", o_out, "output flow (.obf keeps dummy flags)")->capture_default_str();
    obf->add_option("--model", o_model, "model file for dummy sizes")->capture_default_str();
    obf->add_option("--r-padding", o_r, "per-event padding cap")->capture_default_str();
    obf->add_option("--p-padding", o_p, "dummy probability per silent second")->capture_default_str();
    obf->add_option("--delay-mean", o_delay_mean, "mean exponential delay, seconds (0 = off)")->capture_default_str();
    obf->add_option("--duration", o_duration, "injection window, seconds (default: flow span)")->capture_default_str();
    obf->add_option("--seed", o_seed, "seed")->capture_default_str();
    obf->add_option("--report", o_report, "write the overhead report CSV here");

    // proxy
    auto* proxy = app.add_subcommand("proxy", "Run the obfuscation proxy");
    std::string p_which, p_config;
    proxy->add_option("which", p_which, "local|remote")->required()->check(CLI::IsMember({"local", "remote"}));
    proxy->add_option("--config", p_config, "proxy config file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*synth)
            return cmd_synth(synth_model, channels, rate, rate_buckets, hours, seed, bw_mbps,
                             s_te, role, out_dir, jobs);
        if (*extract)
            return cmd_extract(ex_in, ex_endpoint, ex_te, ex_minpkt,
                               ex_dir == "both" ? "" : ex_dir, ex_out);
        if (*correlate)
            return cmd_correlate(c_detector, c_channel, c_user, c_delta, c_gamma, c_ts, c_te,
                                 c_eta, c_length, c_cutoff, c_user_bw, c_append, c_pair_id,
                                 c_assoc);
        if (*roc) return cmd_roc(r_scores, r_out, r_grid);
        if (*obf)
            return cmd_obfuscate(o_in, o_out, o_model, o_r, o_p, o_delay_mean, o_duration, o_seed,
                                 o_report);
        if (*proxy) return cmd_proxy(p_which, p_config, model_path);
    } catch (const imta::parse_error& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
