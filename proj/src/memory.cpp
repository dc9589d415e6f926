#include "redteam/memory.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include "redteam/error.hpp"

namespace redteam {

namespace {

constexpr char kMagic[8] = {'R', 'T', 'L', 'M', 'E', 'M', '0', '1'};
constexpr std::size_t kHeaderSize = 16;

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

void put_u32(char* out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out[i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

std::uint32_t get_u32(const char* in) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[i])) << (8 * i);
    return v;
}

std::uint32_t crc_of(std::string_view payload) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
}

void write_all(int fd, const char* data, std::size_t size) {
    while (size > 0) {
        const ssize_t n = ::write(fd, data, size);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(ErrorCode::StorageError, std::string("memory store write failed: ") + std::strerror(errno));
        }
        data += n;
        size -= static_cast<std::size_t>(n);
    }
}

std::int64_t system_now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

}  // namespace

Embedding embed(std::string_view text, Embedder& embedder) {
    if (text.empty()) throw Error(ErrorCode::EmptyText, "cannot embed empty text");
    Embedding v = embedder.embed_raw(text);
    if (v.size() != embedder.dimension()) {
        throw Error(ErrorCode::DimensionMismatch,
                    "embedder returned " + std::to_string(v.size()) + " dims, expected " +
                        std::to_string(embedder.dimension()));
    }
    double norm = 0;
    for (float x : v) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    if (norm == 0 || !std::isfinite(norm)) throw Error(ErrorCode::EmbedderError, "degenerate embedding");
    for (float& x : v) x = static_cast<float>(x / norm);
    return v;
}

Embedding HashEmbedder::embed_raw(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            current += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!current.empty()) {
            words.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) words.push_back(std::move(current));

    std::vector<std::pair<std::string, double>> features;
    for (std::size_t i = 0; i < words.size(); ++i) {
        features.emplace_back("w:" + words[i], 1.0);
        if (i + 1 < words.size()) features.emplace_back("b:" + words[i] + " " + words[i + 1], 0.5);
    }
    if (features.empty()) features.emplace_back("raw:" + std::string(text), 1.0);

    Embedding v(dimension_, 0.0f);
    for (const auto& [feature, weight] : features) {
        std::uint64_t state = fnv1a(feature);
        for (std::size_t d = 0; d < dimension_; ++d) {
            const double u = static_cast<double>(splitmix64(state) >> 11) * (1.0 / 9007199254740992.0);
            v[d] += static_cast<float>(weight * (2.0 * u - 1.0));
        }
    }
    return v;
}

void to_json(nlohmann::json& j, const MemoryRecord& r) {
    j = nlohmann::json{{"record_id", r.record_id},
                       {"run_id", r.run_id},
                       {"node_id", r.node_id},
                       {"description", r.description},
                       {"embedding", r.embedding},
                       {"status", to_string(r.status)},
                       {"outcome", r.outcome ? nlohmann::json(*r.outcome) : nlohmann::json()},
                       {"parent_record", r.parent_record ? nlohmann::json(*r.parent_record) : nlohmann::json()},
                       {"child_records", r.child_records},
                       {"created_at", r.created_at}};
}

void from_json(const nlohmann::json& j, MemoryRecord& r) {
    r.record_id = j.at("record_id").get<std::string>();
    r.run_id = j.at("run_id").get<std::string>();
    r.node_id = j.at("node_id").get<std::string>();
    r.description = j.at("description").get<std::string>();
    r.embedding = j.at("embedding").get<Embedding>();
    auto status = parse_node_status(j.at("status").get<std::string>());
    if (!status) throw Error(ErrorCode::StorageError, "unknown status in record " + r.record_id);
    r.status = *status;
    r.outcome = j.at("outcome").is_null() ? std::nullopt
                                          : std::optional<OutcomeSummary>(j.at("outcome").get<OutcomeSummary>());
    r.parent_record = j.at("parent_record").is_null()
                          ? std::nullopt
                          : std::optional<std::string>(j.at("parent_record").get<std::string>());
    r.child_records = j.at("child_records").get<std::vector<std::string>>();
    r.created_at = j.at("created_at").get<std::int64_t>();
}

std::string digest(const MemoryRecord& record, std::size_t max_chars) {
    std::string label;
    if (record.outcome) {
        label = record.outcome->success ? "[SUCCEEDED] " : "[FAILED] ";
    } else {
        label = "[" + std::string(to_string(record.status)) + "] ";
    }
    std::string text = label + record.description;
    if (record.outcome) {
        if (!record.outcome->success && record.outcome->failure_reason) {
            text += " | failure: " + *record.outcome->failure_reason;
        } else if (!record.outcome->summary.empty()) {
            text += " | outcome: " + record.outcome->summary;
        }
    }
    if (!record.child_records.empty()) text += " | subtasks: " + std::to_string(record.child_records.size());
    if (text.size() > max_chars) {
        text.resize(max_chars > 3 ? max_chars - 3 : max_chars);
        if (max_chars > 3) text += "...";
    }
    return text;
}

bool hit_order(const MemoryHit& a, const MemoryHit& b) noexcept {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    if (a.record.created_at != b.record.created_at) return a.record.created_at > b.record.created_at;
    return a.record.record_id < b.record.record_id;
}

double cosine(std::span<const float> a, std::span<const float> b) noexcept {
    double dot = 0;
    double na = 0;
    double nb = 0;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0 || nb == 0) return 0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

MemoryStore::MemoryStore(Options options) : options_(std::move(options)) {
    if (!options_.clock) options_.clock = system_now_ms;
    if (options_.dimension == 0) throw Error(ErrorCode::DimensionMismatch, "dimension must be positive");
    if (!options_.path.empty()) open_file();
}

MemoryStore::~MemoryStore() {
    if (fd_ >= 0) ::close(fd_);
}

void MemoryStore::open_file() {
    fd_ = ::open(options_.path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0600);
    if (fd_ < 0) throw Error(ErrorCode::StorageError, "cannot open memory store " + options_.path);
    struct stat st {};
    ::fstat(fd_, &st);
    if (st.st_size == 0) {
        char header[kHeaderSize] = {};
        std::memcpy(header, kMagic, sizeof kMagic);
        put_u32(header + 8, static_cast<std::uint32_t>(options_.dimension));
        write_all(fd_, header, kHeaderSize);
        if (options_.durable) ::fdatasync(fd_);
        return;
    }
    std::string content(static_cast<std::size_t>(st.st_size), '\0');
    if (::pread(fd_, content.data(), content.size(), 0) != static_cast<ssize_t>(content.size())) {
        throw Error(ErrorCode::StorageError, "cannot read memory store " + options_.path);
    }
    if (content.size() < kHeaderSize || std::memcmp(content.data(), kMagic, sizeof kMagic) != 0) {
        throw Error(ErrorCode::StorageError, options_.path + " is not a memory store");
    }
    const std::uint32_t dim = get_u32(content.data() + 8);
    if (dim != options_.dimension) {
        throw Error(ErrorCode::DimensionMismatch, "store has dimension " + std::to_string(dim) + ", configured " +
                                                      std::to_string(options_.dimension));
    }
    std::size_t offset = kHeaderSize;
    while (offset < content.size()) {
        if (content.size() - offset < 8) break;  // torn frame header
        const std::uint32_t len = get_u32(content.data() + offset);
        const std::uint32_t crc = get_u32(content.data() + offset + 4);
        if (content.size() - offset - 8 < len) break;  // torn payload
        std::string_view payload(content.data() + offset + 8, len);
        const bool last = offset + 8 + len == content.size();
        if (crc_of(payload) != crc) {
            if (last) break;
            throw Error(ErrorCode::StorageError, "corrupt frame at offset " + std::to_string(offset)).at(offset);
        }
        auto j = nlohmann::json::parse(payload, nullptr, false);
        if (j.is_discarded()) throw Error(ErrorCode::StorageError, "undecodable frame").at(offset);
        insert_locked(j.get<MemoryRecord>(), false);
        offset += 8 + len;
    }
    if (offset < content.size()) {
        ++skipped_on_open_;
        if (::ftruncate(fd_, static_cast<off_t>(offset)) != 0) {
            throw Error(ErrorCode::StorageError, "cannot drop torn frame");
        }
    }
    ::lseek(fd_, 0, SEEK_END);
}

void MemoryStore::append_frame(const MemoryRecord& record) {
    if (fd_ < 0) return;
    const std::string payload = nlohmann::json(record).dump();
    std::string frame(8, '\0');
    put_u32(frame.data(), static_cast<std::uint32_t>(payload.size()));
    put_u32(frame.data() + 4, crc_of(payload));
    frame += payload;
    write_all(fd_, frame.data(), frame.size());
    if (options_.durable) ::fdatasync(fd_);
}

bool MemoryStore::insert_locked(MemoryRecord record, bool persist) {
    if (record.embedding.size() != options_.dimension) {
        throw Error(ErrorCode::DimensionMismatch, "record " + record.record_id + " has " +
                                                      std::to_string(record.embedding.size()) + " dims");
    }
    if (by_id_.contains(record.record_id)) return false;
    if (persist) append_frame(record);
    by_id_.emplace(record.record_id, records_.size());
    records_.push_back(std::move(record));
    return true;
}

bool MemoryStore::add_record(MemoryRecord record) {
    std::unique_lock lock(mutex_);
    return insert_locked(std::move(record), true);
}

std::size_t MemoryStore::store_tree(const PlanTree& tree, const std::string& run_id, Embedder& embedder) {
    if (!is_terminal(tree.root().status)) {
        throw Error(ErrorCode::InvalidStatus, "tree of run " + run_id + " is not finished");
    }
    if (embedder.dimension() != options_.dimension) {
        throw Error(ErrorCode::DimensionMismatch, "embedder dimension differs from store");
    }
    auto record_id = [&](const NodeId& id) { return run_id + ":" + id; };
    std::size_t stored = 0;
    for (const auto& id : tree.preorder()) {
        const TaskNode& n = tree.node(id);
        {
            std::shared_lock read(mutex_);
            if (by_id_.contains(record_id(id))) continue;
        }
        MemoryRecord r;
        r.record_id = record_id(id);
        r.run_id = run_id;
        r.node_id = id;
        r.description = n.description;
        try {
            r.embedding = embed(n.description, embedder);
        } catch (const Error&) {
            continue;  // node skipped; the count reflects stored records only
        }
        r.status = n.status;
        r.outcome = n.outcome;
        if (n.parent) r.parent_record = record_id(*n.parent);
        for (const auto& c : n.children) r.child_records.push_back(record_id(c));
        r.created_at = options_.clock();
        std::unique_lock write(mutex_);
        if (insert_locked(std::move(r), true)) ++stored;
    }
    return stored;
}

std::vector<MemoryHit> MemoryStore::query(std::string_view description, std::size_t k, Embedder& embedder,
                                          const std::optional<std::string>& exclude_run) const {
    if (k == 0) throw Error(ErrorCode::EmptyInput, "k must be at least 1");
    {
        std::shared_lock lock(mutex_);
        if (records_.empty()) return {};
    }
    const Embedding q = embed(description, embedder);
    return query_vector(q, k, exclude_run);
}

std::vector<MemoryHit> MemoryStore::query_vector(std::span<const float> query, std::size_t k,
                                                 const std::optional<std::string>& exclude_run) const {
    if (k == 0) throw Error(ErrorCode::EmptyInput, "k must be at least 1");
    if (query.size() != options_.dimension) throw Error(ErrorCode::DimensionMismatch, "query dimension");
    std::shared_lock lock(mutex_);
    std::vector<MemoryHit> hits;
    hits.reserve(records_.size());
    for (const auto& r : records_) {
        if (exclude_run && r.run_id == *exclude_run) continue;
        double dot = 0;
        for (std::size_t i = 0; i < query.size(); ++i) dot += static_cast<double>(query[i]) * r.embedding[i];
        hits.push_back(MemoryHit{r, dot});
    }
    const std::size_t keep = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(), hit_order);
    hits.resize(keep);
    return hits;
}

std::size_t MemoryStore::size() const {
    std::shared_lock lock(mutex_);
    return records_.size();
}

std::vector<MemoryRecord> MemoryStore::records() const {
    std::shared_lock lock(mutex_);
    return records_;
}

std::optional<MemoryRecord> MemoryStore::find(const std::string& record_id) const {
    std::shared_lock lock(mutex_);
    auto it = by_id_.find(record_id);
    if (it == by_id_.end()) return std::nullopt;
    return records_[it->second];
}

void MemoryStore::export_jsonl(const std::string& path) const {
    std::shared_lock lock(mutex_);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::StorageError, "cannot write " + path);
    for (const auto& r : records_) out << nlohmann::json(r).dump() << '\n';
}

std::size_t MemoryStore::import_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::StorageError, "cannot read " + path);
    std::size_t added = 0;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw Error(ErrorCode::StorageError, path + ":" + std::to_string(line_no));
        if (add_record(j.get<MemoryRecord>())) ++added;
    }
    return added;
}

}  // namespace redteam
