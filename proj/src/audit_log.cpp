#include "redteam/audit_log.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cctype>
#include <charconv>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>

#include <openssl/evp.h>
#include <openssl/hmac.h>

#include "redteam/error.hpp"

namespace redteam {

namespace {

constexpr std::string_view kHashKey = ",\"hash\":\"";
constexpr std::size_t kHashTail = kHashKey.size() + 64 + 2;  // ,"hash":"<64>"}

std::string to_hex(const unsigned char* data, std::size_t n) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(n * 2, '0');
    for (std::size_t i = 0; i < n; ++i) {
        out[2 * i] = digits[data[i] >> 4];
        out[2 * i + 1] = digits[data[i] & 0xF];
    }
    return out;
}

bool is_hex64(std::string_view s) {
    if (s.size() != 64) return false;
    for (char c : s)
        if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
    return true;
}

std::string json_string(std::string_view s) {
    return nlohmann::json(std::string(s)).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_) throw Error(ErrorCode::AuditFailure, "cannot allocate digest context");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void reset() { EVP_DigestInit_ex2(ctx_, algorithm(), nullptr); }
    void update(std::string_view s) { EVP_DigestUpdate(ctx_, s.data(), s.size()); }
    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md, &len);
        return to_hex(md, len);
    }
    // Compares against a 64-char lowercase hex digest without allocating.
    bool matches_hex(std::string_view expected) {
        static constexpr char digits[] = "0123456789abcdef";
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md, &len);
        if (expected.size() != 2 * static_cast<std::size_t>(len)) return false;
        for (unsigned int i = 0; i < len; ++i)
            if (expected[2 * i] != digits[md[i] >> 4] || expected[2 * i + 1] != digits[md[i] & 0xF]) return false;
        return true;
    }

private:
    // Fetched once; implicit per-call fetching dominates short-message hashing.
    static const EVP_MD* algorithm() {
        static EVP_MD* md = EVP_MD_fetch(nullptr, "SHA256", nullptr);
        return md;
    }

    EVP_MD_CTX* ctx_;
};

std::string checkpoint_mac(std::string_view key, std::uint64_t seq, std::string_view hash) {
    return hmac_sha256_hex(key, std::to_string(seq) + ":" + std::string(hash));
}

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::StorageError, "cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool is_regular_file(const std::string& path) {
    struct stat st {};
    return ::stat(path.c_str(), &st) == 0 && S_ISREG(st.st_mode);
}

bool write_fully(int fd, std::string_view data) {
    while (!data.empty()) {
        ssize_t n = ::write(fd, data.data(), data.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
    return true;
}

bool secret_key(const std::string& key) {
    std::string k;
    for (char c : key) k += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    for (const char* needle : {"api_key", "apikey", "password", "secret", "token", "credential", "authorization"})
        if (k.find(needle) != std::string::npos) return true;
    return false;
}

}  // namespace

std::string format_timestamp(std::chrono::system_clock::time_point t) {
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
    std::time_t secs = static_cast<std::time_t>(ms / 1000);
    int millis = static_cast<int>(ms % 1000);
    if (millis < 0) {
        millis += 1000;
        --secs;
    }
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, millis);
    return buf;
}

std::string sha256_hex(std::string_view data) {
    Sha256 h;
    h.reset();
    h.update(data);
    return h.hex();
}

std::string hmac_sha256_hex(std::string_view key, std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), reinterpret_cast<const unsigned char*>(data.data()),
         data.size(), md, &len);
    return to_hex(md, len);
}

std::string audit_body(const AuditEvent& e) {
    std::string out = "{\"seq\":";
    out += std::to_string(e.seq);
    out += ",\"timestamp\":";
    out += json_string(e.timestamp);
    out += ",\"actor\":";
    out += json_string(e.actor);
    out += ",\"kind\":";
    out += json_string(e.kind);
    out += ",\"payload\":";
    out += e.payload.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    out += ",\"prev_hash\":";
    out += json_string(e.prev_hash);
    out += '}';
    return out;
}

std::string audit_hash(std::string_view prev_hash, std::string_view body) {
    Sha256 h;
    h.reset();
    h.update(prev_hash);
    h.update(body);
    return h.hex();
}

nlohmann::json redact_secrets(nlohmann::json payload) {
    if (payload.is_object()) {
        for (auto it = payload.begin(); it != payload.end(); ++it) {
            if (secret_key(it.key()))
                it.value() = "***";
            else
                it.value() = redact_secrets(std::move(it.value()));
        }
    } else if (payload.is_array()) {
        for (auto& v : payload) v = redact_secrets(std::move(v));
    }
    return payload;
}

AuditLog::AuditLog(Options options) : options_(std::move(options)), last_hash_(kAuditGenesis) {
    if (!options_.clock) options_.clock = [] { return std::chrono::system_clock::now(); };
    if (is_regular_file(options_.path)) {
        std::string content = read_all(options_.path);
        std::optional<nlohmann::json> checkpoint;
        if (!options_.checkpoint_key.empty() && is_regular_file(checkpoint_path(options_.path))) {
            auto parsed = nlohmann::json::parse(read_all(checkpoint_path(options_.path)), nullptr, false);
            if (!parsed.is_discarded()) checkpoint = parsed;
        }
        auto result = verify_text(content, checkpoint, options_.checkpoint_key);
        if (!result.valid)
            throw Error(ErrorCode::AuditFailure, "existing audit log " + options_.path + " is invalid: " + result.reason);
        events_ = parse(content);
        if (!events_.empty()) {
            seq_ = events_.back().seq;
            last_hash_ = events_.back().hash;
        }
    }
    fd_ = ::open(options_.path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0600);
    if (fd_ < 0)
        throw Error(ErrorCode::AuditFailure, "cannot open audit log " + options_.path + ": " + std::strerror(errno));
}

AuditLog::~AuditLog() {
    if (fd_ >= 0) ::close(fd_);
}

std::uint64_t AuditLog::append(std::string_view actor, std::string_view kind, nlohmann::json payload) {
    return *append_guarded(actor, kind, std::move(payload), {});
}

std::optional<std::uint64_t> AuditLog::append_guarded(std::string_view actor, std::string_view kind,
                                                      nlohmann::json payload, const std::function<bool()>& guard) {
    std::function<void()> on_failure;
    std::uint64_t assigned = 0;
    bool write_failed = false;
    {
        std::lock_guard lock(mutex_);
        if (guard && !guard()) return std::nullopt;
        if (failed_) throw Error(ErrorCode::AuditFailure, "audit log is latched closed after a write failure");
        AuditEvent e;
        e.seq = seq_ + 1;
        e.timestamp = format_timestamp(options_.clock());
        e.actor = actor;
        e.kind = kind;
        e.payload = redact_secrets(payload.is_null() ? nlohmann::json::object() : std::move(payload));
        e.prev_hash = last_hash_;
        std::string body = audit_body(e);
        e.hash = audit_hash(e.prev_hash, body);
        body.pop_back();
        body += kHashKey;
        body += e.hash;
        body += "\"}\n";
        bool ok = write_fully(fd_, body);
        if (ok && options_.sync) ok = ::fdatasync(fd_) == 0;
        if (ok) {
            seq_ = e.seq;
            last_hash_ = e.hash;
            assigned = e.seq;
            events_.push_back(std::move(e));
            try {
                write_checkpoint();
            } catch (const Error&) {
                ok = false;
            }
        }
        if (!ok) {
            failed_ = true;
            write_failed = true;
            on_failure = options_.on_failure;
        }
    }
    if (write_failed) {
        if (on_failure) on_failure();
        throw Error(ErrorCode::AuditFailure, "write to " + options_.path + " failed: " + std::strerror(errno));
    }
    return assigned;
}

void AuditLog::write_checkpoint() {
    if (options_.checkpoint_key.empty()) return;
    nlohmann::json head{{"seq", seq_}, {"hash", last_hash_}, {"mac", checkpoint_mac(options_.checkpoint_key, seq_, last_hash_)}};
    const std::string final_path = checkpoint_path(options_.path);
    const std::string tmp = final_path + ".tmp";
    int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
    if (fd < 0) throw Error(ErrorCode::AuditFailure, "cannot write head checkpoint");
    bool ok = write_fully(fd, head.dump());
    if (ok && options_.sync) ok = ::fdatasync(fd) == 0;
    ::close(fd);
    if (!ok || ::rename(tmp.c_str(), final_path.c_str()) != 0)
        throw Error(ErrorCode::AuditFailure, "cannot write head checkpoint");
}

std::uint64_t AuditLog::last_seq() const {
    std::lock_guard lock(mutex_);
    return seq_;
}

bool AuditLog::failed() const {
    std::lock_guard lock(mutex_);
    return failed_;
}

std::vector<AuditEvent> AuditLog::events() const {
    std::lock_guard lock(mutex_);
    return events_;
}

AuditVerification AuditLog::verify_text(std::string_view content, const std::optional<nlohmann::json>& checkpoint,
                                        std::string_view key) {
    AuditVerification result;
    auto fail = [&](std::uint64_t seq, std::string reason) {
        result.valid = false;
        result.first_invalid_seq = seq;
        result.reason = "seq " + std::to_string(seq) + ": " + std::move(reason);
        return result;
    };

    Sha256 sha;
    std::string scratch;
    std::string prev(kAuditGenesis);
    std::uint64_t want_seq = 0;
    if (checkpoint && checkpoint->is_object() && checkpoint->contains("seq") && (*checkpoint)["seq"].is_number_unsigned())
        want_seq = (*checkpoint)["seq"].get<std::uint64_t>();
    std::string hash_at_checkpoint;

    std::uint64_t seq = 0;
    std::size_t pos = 0;
    while (pos < content.size()) {
        ++seq;
        std::size_t nl = content.find('\n', pos);
        if (nl == std::string_view::npos) return fail(seq, "unterminated record");
        std::string_view line = content.substr(pos, nl - pos);
        pos = nl + 1;

        if (line.size() < kHashTail + 2 || line.substr(line.size() - 2) != "\"}" ||
            line.substr(line.size() - kHashTail, kHashKey.size()) != kHashKey)
            return fail(seq, "malformed record");
        std::string_view stated = line.substr(line.size() - 66, 64);
        std::string_view body_head = line.substr(0, line.size() - kHashTail);

        char seq_prefix[32] = "{\"seq\":";
        char* seq_end = std::to_chars(seq_prefix + 7, seq_prefix + sizeof seq_prefix - 1, seq).ptr;
        *seq_end++ = ',';
        if (body_head.substr(0, static_cast<std::size_t>(seq_end - seq_prefix)) !=
            std::string_view(seq_prefix, static_cast<std::size_t>(seq_end - seq_prefix)))
            return fail(seq, "sequence gap or reorder");
        constexpr std::string_view kPrevKey = ",\"prev_hash\":\"";
        const std::size_t suffix_len = kPrevKey.size() + prev.size() + 1;
        if (body_head.size() < suffix_len || body_head.back() != '"' ||
            body_head.substr(body_head.size() - suffix_len, kPrevKey.size()) != kPrevKey ||
            body_head.substr(body_head.size() - 1 - prev.size(), prev.size()) != prev)
            return fail(seq, "prev_hash does not match the preceding record");

        scratch.assign(prev);
        scratch.append(body_head);
        scratch.push_back('}');
        sha.reset();
        sha.update(scratch);
        if (!sha.matches_hex(stated)) return fail(seq, is_hex64(stated) ? "hash mismatch" : "malformed hash");
        prev.assign(stated);
        if (seq == want_seq) hash_at_checkpoint = prev;
    }
    result.events = seq;

    if (!key.empty()) {
        if (!checkpoint) {
            if (seq == 0) return result;
            result.valid = false;
            result.reason = "head checkpoint missing";
            return result;
        }
        const auto& cp = *checkpoint;
        if (!cp.is_object() || !cp.contains("hash") || !cp.contains("mac") || !cp["hash"].is_string() ||
            !cp["mac"].is_string() || !cp.contains("seq")) {
            result.valid = false;
            result.reason = "head checkpoint malformed";
            return result;
        }
        if (cp["mac"].get<std::string>() != checkpoint_mac(key, want_seq, cp["hash"].get<std::string>())) {
            result.valid = false;
            result.reason = "head checkpoint signature invalid";
            return result;
        }
        if (want_seq > seq) return fail(seq + 1, "log truncated: checkpoint covers seq " + std::to_string(want_seq));
        if (want_seq > 0 && hash_at_checkpoint != cp["hash"].get<std::string>())
            return fail(want_seq, "record differs from the signed checkpoint");
    }
    return result;
}

AuditVerification AuditLog::verify_file(const std::string& path, std::string_view key) {
    std::string content = read_all(path);
    std::optional<nlohmann::json> checkpoint;
    if (is_regular_file(checkpoint_path(path))) {
        auto parsed = nlohmann::json::parse(read_all(checkpoint_path(path)), nullptr, false);
        checkpoint = parsed.is_discarded() ? nlohmann::json("malformed") : parsed;
    }
    return verify_text(content, checkpoint, key);
}

std::vector<AuditEvent> AuditLog::parse(std::string_view content) {
    std::vector<AuditEvent> out;
    std::size_t pos = 0;
    while (pos < content.size()) {
        std::size_t nl = content.find('\n', pos);
        std::string_view line = content.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? content.size() : nl + 1;
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw Error(ErrorCode::ParseError, "audit record is not JSON");
        try {
            AuditEvent e;
            e.seq = j.at("seq").get<std::uint64_t>();
            e.timestamp = j.at("timestamp").get<std::string>();
            e.actor = j.at("actor").get<std::string>();
            e.kind = j.at("kind").get<std::string>();
            e.payload = j.at("payload");
            e.prev_hash = j.at("prev_hash").get<std::string>();
            e.hash = j.at("hash").get<std::string>();
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw Error(ErrorCode::ParseError, std::string("audit record: ") + ex.what());
        }
    }
    return out;
}

std::vector<AuditEvent> AuditLog::read_file(const std::string& path) { return parse(read_all(path)); }

std::vector<InterlockViolation> check_interlock(const std::vector<AuditEvent>& events) {
    std::map<std::string, bool> approved;
    std::vector<InterlockViolation> violations;
    for (const auto& e : events) {
        const std::string request_id = e.payload.is_object() ? e.payload.value("request_id", std::string()) : "";
        if (e.kind == audit_kind::ApprovalDecided) {
            if (e.payload.value("decision", std::string()) == "Approved") approved[request_id] = true;
        } else if (e.kind == audit_kind::Executed) {
            if (request_id.empty() || !approved.count(request_id)) violations.push_back({e.seq, request_id});
        }
    }
    return violations;
}

}  // namespace redteam
