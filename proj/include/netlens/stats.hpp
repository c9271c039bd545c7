#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <variant>
#include <vector>

#include "netlens/diagnostics.hpp"
#include "netlens/rtt.hpp"

namespace netlens {

struct DestStats {
    uint64_t count = 0;
    uint64_t min_ns = 0;
    uint64_t max_ns = 0;
    uint64_t sum_ns = 0;

    uint64_t mean_ns() const { return count ? sum_ns / count : 0; }
};

// Per-app aggregate. The mean is kept as an exact integer sum over success
// samples, so incremental updates match brute-force recomputation.
struct AppStats {
    std::string app;
    uint64_t conn_count = 0;     // successes + failures
    uint64_t success_count = 0;
    uint64_t min_ns = 0;
    uint64_t max_ns = 0;
    uint64_t sum_ns = 0;
    std::map<FailureClass, uint64_t> failures;
    std::map<Ipv4Addr, DestStats> per_destination;  // success samples only

    uint64_t mean_ns() const { return success_count ? sum_ns / success_count : 0; }
    uint64_t failure_total() const;
};

struct EventLogRecord {
    enum class Kind : uint8_t { Sample, Failure };
    Kind kind;
    RttSample sample;       // kind == Sample
    FailureRecord failure;  // kind == Failure
};

class UnknownApp : public std::runtime_error {
public:
    explicit UnknownApp(const std::string& name) : std::runtime_error("unknown app: " + name) {}
};

class NoData : public std::runtime_error {
public:
    NoData() : std::runtime_error("no samples match the requested filters") {}
};

// Accumulates samples and failure records, serves the app views, and
// persists the append-only event log as line-delimited JSON. Safe for
// concurrent record() calls; views are consistent snapshots.
class StatsStore {
public:
    void record(const RttSample& sample);
    void record(const FailureRecord& failure);

    // Sorted by connection count descending, ties by name ascending.
    std::vector<AppStats> all_app_view() const;
    AppStats app_view(const std::string& app) const;  // throws UnknownApp
    std::vector<std::string> app_names() const;

    // Empirical CDF over success RTTs: ascending (rtt_ms, cumulative
    // fraction) points, one per distinct value, final fraction 1.0.
    // Empty tag matches every sample.
    std::vector<std::pair<double, double>> export_cdf(const std::string& app,
                                                      const std::string& network_tag) const;

    struct LoadResult {
        size_t loaded = 0;
        size_t corrupt = 0;
    };

    // Rewrites the full event log (atomic: temp file + rename).
    void persist(const std::string& path) const;
    // Ingests an existing log; unknown fields are ignored, corrupt lines
    // are counted and skipped.
    LoadResult load(const std::string& path);

    // Streams every future event to `path` as it is recorded (append mode).
    void attach_append_log(const std::string& path);

    std::vector<EventLogRecord> events() const;
    size_t event_count() const;

    static std::string to_jsonl(const EventLogRecord& ev);

private:
    void record_locked(EventLogRecord ev, bool append);

    mutable std::mutex mu_;
    std::vector<EventLogRecord> events_;
    std::map<std::string, AppStats> apps_;
    std::ofstream append_;
};

// Two-column CSV of CDF points.
std::string cdf_csv(const std::vector<std::pair<double, double>>& points);

}  // namespace netlens
