#include "netlens/stats.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>

namespace netlens {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr int kSchemaVersion = 1;

std::string endpoint_str(Ipv4Addr addr, uint16_t port) {
    return addr.to_string() + ":" + std::to_string(port);
}

bool parse_endpoint(const std::string& s, Ipv4Addr& addr, uint16_t& port) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) return false;
    addr = Ipv4Addr::parse(s.substr(0, colon));
    port = static_cast<uint16_t>(std::stoul(s.substr(colon + 1)));
    return true;
}

ConnectOutcome outcome_from_name(const std::string& name) {
    if (name == "success") return ConnectOutcome::Success;
    if (name == "timeout") return ConnectOutcome::Timeout;
    if (name == "refused") return ConnectOutcome::Refused;
    if (name == "unreachable") return ConnectOutcome::Unreachable;
    if (name == "canceled") return ConnectOutcome::Canceled;
    throw std::runtime_error("bad outcome: " + name);
}

FailureClass class_from_name(const std::string& name) {
    if (name == "timeout") return FailureClass::Timeout;
    if (name == "refused") return FailureClass::Refused;
    if (name == "unreachable") return FailureClass::Unreachable;
    if (name == "canceled") return FailureClass::Canceled;
    if (name == "dns_misconfig") return FailureClass::DnsMisconfig;
    throw std::runtime_error("bad failure class: " + name);
}

}  // namespace

uint64_t AppStats::failure_total() const {
    uint64_t total = 0;
    for (const auto& [cls, count] : failures) total += count;
    return total;
}

void StatsStore::record(const RttSample& sample) {
    EventLogRecord ev;
    ev.kind = EventLogRecord::Kind::Sample;
    ev.sample = sample;
    std::lock_guard<std::mutex> lock(mu_);
    record_locked(std::move(ev), true);
}

void StatsStore::record(const FailureRecord& failure) {
    EventLogRecord ev;
    ev.kind = EventLogRecord::Kind::Failure;
    ev.failure = failure;
    std::lock_guard<std::mutex> lock(mu_);
    record_locked(std::move(ev), true);
}

void StatsStore::record_locked(EventLogRecord ev, bool append) {
    if (ev.kind == EventLogRecord::Kind::Sample) {
        const RttSample& s = ev.sample;
        AppStats& st = apps_[s.app];
        st.app = s.app;
        st.conn_count += 1;
        if (s.outcome == ConnectOutcome::Success) {
            if (st.success_count == 0) {
                st.min_ns = st.max_ns = s.rtt_ns;
            } else {
                st.min_ns = std::min(st.min_ns, s.rtt_ns);
                st.max_ns = std::max(st.max_ns, s.rtt_ns);
            }
            st.success_count += 1;
            st.sum_ns += s.rtt_ns;

            DestStats& d = st.per_destination[s.key.dst];
            if (d.count == 0) {
                d.min_ns = d.max_ns = s.rtt_ns;
            } else {
                d.min_ns = std::min(d.min_ns, s.rtt_ns);
                d.max_ns = std::max(d.max_ns, s.rtt_ns);
            }
            d.count += 1;
            d.sum_ns += s.rtt_ns;
        } else {
            // Non-success samples are failures; their class mirrors
            // classify_failure with the sample's own elapsed time.
            FailureClass cls;
            switch (s.outcome) {
                case ConnectOutcome::Timeout: cls = FailureClass::Timeout; break;
                case ConnectOutcome::Refused: cls = FailureClass::Refused; break;
                case ConnectOutcome::Unreachable: cls = FailureClass::Unreachable; break;
                default: cls = FailureClass::Canceled; break;
            }
            st.failures[cls] += 1;
        }
    } else {
        const FailureRecord& f = ev.failure;
        // Connect failures already arrive as non-success samples; standalone
        // records (DNS misconfiguration) carry their own accounting.
        AppStats& st = apps_[f.app];
        st.app = f.app;
        if (f.cls == FailureClass::DnsMisconfig) {
            st.conn_count += 1;
            st.failures[f.cls] += 1;
        }
    }

    if (append && append_.is_open()) {
        append_ << to_jsonl(ev) << "\n";
        append_.flush();
    }
    events_.push_back(std::move(ev));
}

std::vector<AppStats> StatsStore::all_app_view() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<AppStats> out;
    out.reserve(apps_.size());
    for (const auto& [name, st] : apps_) out.push_back(st);
    std::sort(out.begin(), out.end(), [](const AppStats& a, const AppStats& b) {
        if (a.conn_count != b.conn_count) return a.conn_count > b.conn_count;
        return a.app < b.app;
    });
    return out;
}

AppStats StatsStore::app_view(const std::string& app) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = apps_.find(app);
    if (it == apps_.end()) throw UnknownApp(app);
    return it->second;
}

std::vector<std::string> StatsStore::app_names() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<std::string> names;
    for (const auto& [name, st] : apps_) names.push_back(name);
    return names;
}

std::vector<std::pair<double, double>> StatsStore::export_cdf(
    const std::string& app, const std::string& network_tag) const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<double> values;
    for (const auto& ev : events_) {
        if (ev.kind != EventLogRecord::Kind::Sample) continue;
        const RttSample& s = ev.sample;
        if (s.outcome != ConnectOutcome::Success) continue;
        if (s.app != app) continue;
        if (!network_tag.empty() && s.network_tag != network_tag) continue;
        values.push_back(static_cast<double>(s.rtt_ns) / 1e6);
    }
    if (values.empty()) throw NoData();
    std::sort(values.begin(), values.end());

    std::vector<std::pair<double, double>> points;
    const double n = static_cast<double>(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        const double frac = static_cast<double>(i + 1) / n;
        if (!points.empty() && points.back().first == values[i]) {
            points.back().second = frac;  // collapse duplicates to the top fraction
        } else {
            points.emplace_back(values[i], frac);
        }
    }
    return points;
}

std::string StatsStore::to_jsonl(const EventLogRecord& ev) {
    ordered_json j;
    if (ev.kind == EventLogRecord::Kind::Sample) {
        const RttSample& s = ev.sample;
        j["kind"] = "sample";
        j["schema_version"] = kSchemaVersion;
        j["wall_ns"] = s.wall_ns;
        j["app"] = s.app;
        j["proto"] = proto_name(s.key.proto);
        j["src"] = endpoint_str(s.key.src, s.key.src_port);
        j["dst"] = endpoint_str(s.key.dst, s.key.dst_port);
        j["outcome"] = outcome_name(s.outcome);
        j["rtt_ns"] = s.rtt_ns;
        j["t_start_ns"] = s.t_start_ns;
        j["t_end_ns"] = s.t_end_ns;
        j["tag"] = s.network_tag;
    } else {
        const FailureRecord& f = ev.failure;
        j["kind"] = "failure";
        j["schema_version"] = kSchemaVersion;
        j["wall_ns"] = f.wall_ns;
        j["app"] = f.app;
        j["proto"] = proto_name(f.key.proto);
        j["src"] = endpoint_str(f.key.src, f.key.src_port);
        j["dst"] = endpoint_str(f.key.dst, f.key.dst_port);
        j["class"] = failure_class_name(f.cls);
        j["evidence"] = f.evidence;
    }
    return j.dump();
}

void StatsStore::persist(const std::string& path) const {
    std::lock_guard<std::mutex> lock(mu_);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write store: " + tmp);
        for (const auto& ev : events_) out << to_jsonl(ev) << "\n";
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("cannot rename store into place: " + path);
    }
}

StatsStore::LoadResult StatsStore::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open store: " + path);

    LoadResult result;
    std::string line;
    std::lock_guard<std::mutex> lock(mu_);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            EventLogRecord ev;
            const std::string kind = j.at("kind").get<std::string>();
            if (kind == "sample") {
                ev.kind = EventLogRecord::Kind::Sample;
                RttSample& s = ev.sample;
                s.wall_ns = j.at("wall_ns").get<uint64_t>();
                s.app = j.at("app").get<std::string>();
                s.key.proto = j.at("proto").get<std::string>() == "udp" ? Proto::Udp : Proto::Tcp;
                if (!parse_endpoint(j.at("src").get<std::string>(), s.key.src, s.key.src_port) ||
                    !parse_endpoint(j.at("dst").get<std::string>(), s.key.dst, s.key.dst_port)) {
                    throw std::runtime_error("bad endpoint");
                }
                s.outcome = outcome_from_name(j.at("outcome").get<std::string>());
                s.rtt_ns = j.at("rtt_ns").get<uint64_t>();
                s.t_start_ns = j.at("t_start_ns").get<uint64_t>();
                s.t_end_ns = j.at("t_end_ns").get<uint64_t>();
                s.network_tag = j.at("tag").get<std::string>();
            } else if (kind == "failure") {
                ev.kind = EventLogRecord::Kind::Failure;
                FailureRecord& f = ev.failure;
                f.wall_ns = j.at("wall_ns").get<uint64_t>();
                f.app = j.at("app").get<std::string>();
                f.key.proto = j.at("proto").get<std::string>() == "udp" ? Proto::Udp : Proto::Tcp;
                if (!parse_endpoint(j.at("src").get<std::string>(), f.key.src, f.key.src_port) ||
                    !parse_endpoint(j.at("dst").get<std::string>(), f.key.dst, f.key.dst_port)) {
                    throw std::runtime_error("bad endpoint");
                }
                f.cls = class_from_name(j.at("class").get<std::string>());
                f.evidence = j.at("evidence").get<std::string>();
            } else {
                throw std::runtime_error("bad kind");
            }
            record_locked(std::move(ev), false);
            ++result.loaded;
        } catch (const std::exception&) {
            ++result.corrupt;
        }
    }
    return result;
}

void StatsStore::attach_append_log(const std::string& path) {
    std::lock_guard<std::mutex> lock(mu_);
    append_.open(path, std::ios::app);
    if (!append_) throw std::runtime_error("cannot open append log: " + path);
}

std::vector<EventLogRecord> StatsStore::events() const {
    std::lock_guard<std::mutex> lock(mu_);
    return events_;
}

size_t StatsStore::event_count() const {
    std::lock_guard<std::mutex> lock(mu_);
    return events_.size();
}

std::string cdf_csv(const std::vector<std::pair<double, double>>& points) {
    std::string out = "rtt_ms,cumulative_fraction\n";
    char line[64];
    for (const auto& [ms, frac] : points) {
        std::snprintf(line, sizeof(line), "%.6f,%.6f\n", ms, frac);
        out += line;
    }
    return out;
}

}  // namespace netlens
