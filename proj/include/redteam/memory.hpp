#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "redteam/task_graph.hpp"

namespace redteam {

using Embedding = std::vector<float>;

class Embedder {
public:
    virtual ~Embedder() = default;
    /// Raw vector; callers normalize through embed().
    virtual Embedding embed_raw(std::string_view text) = 0;
    [[nodiscard]] virtual std::size_t dimension() const noexcept = 0;
};

/// Unit-norm embedding of `text`. Throws EmptyText, EmbedderError, DimensionMismatch.
Embedding embed(std::string_view text, Embedder& embedder);

/// Deterministic test embedder: every word and word bigram seeds a
/// pseudo-random direction (splitmix64 over an FNV-1a hash); the sum is
/// normalized. Texts sharing words land close together.
class HashEmbedder final : public Embedder {
public:
    explicit HashEmbedder(std::size_t dimension = 256) : dimension_(dimension) {}
    Embedding embed_raw(std::string_view text) override;
    [[nodiscard]] std::size_t dimension() const noexcept override { return dimension_; }

private:
    std::size_t dimension_;
};

struct LiveEmbedderConfig {
    std::string endpoint;
    std::string api_key;
    std::string model = "text-embedding-3-small";
    std::size_t dimension = 1536;

    /// REDTEAM_LLM_ENDPOINT, REDTEAM_LLM_API_KEY, REDTEAM_EMBEDDING_MODEL, REDTEAM_EMBEDDING_DIM.
    static LiveEmbedderConfig from_environment();
};

class LiveEmbedder final : public Embedder {
public:
    explicit LiveEmbedder(LiveEmbedderConfig config) : config_(std::move(config)) {}
    Embedding embed_raw(std::string_view text) override;
    [[nodiscard]] std::size_t dimension() const noexcept override { return config_.dimension; }

private:
    LiveEmbedderConfig config_;
};

struct MemoryRecord {
    std::string record_id;  // "<run_id>:<node_id>"
    std::string run_id;
    NodeId node_id;
    std::string description;
    Embedding embedding;
    NodeStatus status = NodeStatus::Pending;
    std::optional<OutcomeSummary> outcome;
    std::optional<std::string> parent_record;
    std::vector<std::string> child_records;
    std::int64_t created_at = 0;  // ms since epoch

    bool operator==(const MemoryRecord&) const = default;
};

void to_json(nlohmann::json& j, const MemoryRecord& r);
void from_json(const nlohmann::json& j, MemoryRecord& r);

/// Compact planner-facing digest of a record, at most `max_chars` long.
std::string digest(const MemoryRecord& record, std::size_t max_chars = 300);

struct MemoryHit {
    MemoryRecord record;
    double similarity = 0;
};

/// Non-increasing similarity; ties by newest created_at, then record_id.
bool hit_order(const MemoryHit& a, const MemoryHit& b) noexcept;

double cosine(std::span<const float> a, std::span<const float> b) noexcept;

/// Embedded task-tree store. File layout: 16-byte header ("RTLMEM01", u32
/// dimension, u32 reserved) followed by frames of {u32 length, u32 crc32,
/// JSON payload}. A torn final frame is discarded on open.
class MemoryStore {
public:
    struct Options {
        std::string path;  // empty: in-memory only
        std::size_t dimension = 256;
        bool durable = true;  // fdatasync after each frame
        std::function<std::int64_t()> clock;  // defaults to system clock
    };

    explicit MemoryStore(Options options);
    ~MemoryStore();
    MemoryStore(const MemoryStore&) = delete;
    MemoryStore& operator=(const MemoryStore&) = delete;

    /// One record per node of a finished tree; skips (run_id, node_id) pairs already stored.
    std::size_t store_tree(const PlanTree& tree, const std::string& run_id, Embedder& embedder);

    /// Top-k by cosine similarity. Records of `exclude_run` are never returned.
    std::vector<MemoryHit> query(std::string_view description, std::size_t k, Embedder& embedder,
                                 const std::optional<std::string>& exclude_run = std::nullopt) const;
    std::vector<MemoryHit> query_vector(std::span<const float> query, std::size_t k,
                                        const std::optional<std::string>& exclude_run = std::nullopt) const;

    /// Appends a fully formed record (import path). Returns false for duplicates.
    bool add_record(MemoryRecord record);

    [[nodiscard]] std::size_t size() const;
    [[nodiscard]] std::size_t dimension() const noexcept { return options_.dimension; }
    [[nodiscard]] std::vector<MemoryRecord> records() const;
    [[nodiscard]] std::optional<MemoryRecord> find(const std::string& record_id) const;
    [[nodiscard]] std::size_t skipped_on_open() const noexcept { return skipped_on_open_; }

    void export_jsonl(const std::string& path) const;
    std::size_t import_jsonl(const std::string& path);

private:
    void open_file();
    void append_frame(const MemoryRecord& record);
    bool insert_locked(MemoryRecord record, bool persist);

    Options options_;
    int fd_ = -1;
    mutable std::shared_mutex mutex_;
    std::vector<MemoryRecord> records_;
    std::map<std::string, std::size_t> by_id_;
    std::size_t skipped_on_open_ = 0;
};

}  // namespace redteam
