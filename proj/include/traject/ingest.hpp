#ifndef TRAJECT_INGEST_HPP
#define TRAJECT_INGEST_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "common.hpp"

/**
 * @file ingest.hpp
 * @brief Embedding, manifest and progression-spec loading.
 *
 * On-disk formats:
 *  - embeddings: EMB1 binary (magic "EMB1", u32 version = 1, u64 n, u64 d,
 *    then n*d little-endian float32 values, row-major). Values are widened
 *    to float64 for all computation.
 *  - manifest: CSV with header columns patch_id, slide_id, class_label;
 *    any extra columns are carried as per-patch auxiliary tags.
 *  - progression spec: JSON {"name": ..., "classes": [...]} with classes
 *    ordered earliest to latest.
 */

namespace traject {
namespace ingest {

struct PatchRecord {
    std::string patch_id;
    std::string slide_id;
    std::string class_label;
    std::map<std::string, std::string> aux_tags;
};

struct ProgressionSpec {
    std::string name;
    std::vector<std::string> classes; // earliest first

    /// Rank of a class label in the progression, or -1 when absent.
    int rank_of(const std::string& label) const {
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (classes[i] == label) {
                return static_cast<int>(i);
            }
        }
        return -1;
    }
};

/// Patches of one slide within one class, used by the slide-aware sampler.
struct SlideGroup {
    std::string slide_id;
    std::vector<std::size_t> members; // ascending row indices
};

/// Embeddings joined with their manifest and progression spec; all
/// cross-validation happens at construction (see bind()).
struct EmbeddingSet {
    Matrix embeddings;
    std::vector<PatchRecord> records;
    ProgressionSpec spec;
    std::vector<int> class_ranks;                      // per row
    std::vector<std::vector<std::size_t>> class_members; // per class, ascending
    std::vector<std::vector<SlideGroup>> class_slides;   // per class, slide id order

    std::size_t n() const { return records.size(); }
    std::size_t dim() const { return static_cast<std::size_t>(embeddings.cols()); }
    std::size_t n_classes() const { return spec.classes.size(); }
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "EMB1 I/O assumes a little-endian host");

inline std::uint32_t read_u32(std::istream& in, const std::string& path, const char* what) {
    unsigned char buf[4];
    if (!in.read(reinterpret_cast<char*>(buf), 4)) {
        throw InputError(path + ": truncated while reading " + what);
    }
    return static_cast<std::uint32_t>(buf[0]) | (static_cast<std::uint32_t>(buf[1]) << 8) |
           (static_cast<std::uint32_t>(buf[2]) << 16) | (static_cast<std::uint32_t>(buf[3]) << 24);
}

inline std::uint64_t read_u64(std::istream& in, const std::string& path, const char* what) {
    unsigned char buf[8];
    if (!in.read(reinterpret_cast<char*>(buf), 8)) {
        throw InputError(path + ": truncated while reading " + what);
    }
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | buf[i];
    }
    return v;
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i) {
        buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(buf), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) {
        buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(buf), 8);
}

// Splits one CSV record; supports double-quoted fields with "" escapes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no,
                                               const std::string& path) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            if (cur.empty()) {
                quoted = true;
            } else {
                throw InputError(path + ": line " + std::to_string(line_no) +
                                 ": quote inside unquoted field");
            }
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) {
        throw InputError(path + ": line " + std::to_string(line_no) + ": unterminated quote");
    }
    fields.push_back(std::move(cur));
    return fields;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

} // namespace detail

/// Reads an EMB1 file. Rejects bad magic/version, truncated or oversized
/// payloads, and non-finite values (reporting the first offending cell).
inline Matrix load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError(path + ": cannot open embeddings file");
    }
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "EMB1", 4) != 0) {
        throw InputError(path + ": not an EMB1 file (bad magic)");
    }
    const std::uint32_t version = detail::read_u32(in, path, "version");
    if (version != 1) {
        throw InputError(path + ": unsupported EMB1 version " + std::to_string(version));
    }
    const std::uint64_t n = detail::read_u64(in, path, "row count");
    const std::uint64_t d = detail::read_u64(in, path, "column count");
    if (n == 0 || d == 0) {
        throw InputError(path + ": empty embedding matrix (" + std::to_string(n) + " x " +
                         std::to_string(d) + ")");
    }
    if (d > (std::uint64_t{1} << 24) || n > (std::uint64_t{1} << 32) ||
        n * d > (std::uint64_t{1} << 38)) {
        throw InputError(path + ": implausible EMB1 dimensions (" + std::to_string(n) + " x " +
                         std::to_string(d) + ")");
    }

    std::vector<float> payload(static_cast<std::size_t>(n * d));
    if (!in.read(reinterpret_cast<char*>(payload.data()),
                 static_cast<std::streamsize>(payload.size() * sizeof(float)))) {
        throw InputError(path + ": truncated payload (expected " + std::to_string(n * d) +
                         " float32 values)");
    }
    char extra;
    if (in.read(&extra, 1)) {
        throw InputError(path + ": trailing bytes after payload");
    }

    Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::uint64_t i = 0; i < n; ++i) {
        for (std::uint64_t j = 0; j < d; ++j) {
            const float v = payload[static_cast<std::size_t>(i * d + j)];
            if (!std::isfinite(v)) {
                throw InputError(path + ": non-finite value at row " + std::to_string(i) +
                                 ", column " + std::to_string(j));
            }
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
        }
    }
    return out;
}

/// Writes an EMB1 file; values are narrowed to float32.
inline void save_embeddings(const std::string& path, const Matrix& x) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError(path + ": cannot open for writing");
    }
    out.write("EMB1", 4);
    detail::write_u32(out, 1);
    detail::write_u64(out, static_cast<std::uint64_t>(x.rows()));
    detail::write_u64(out, static_cast<std::uint64_t>(x.cols()));
    std::vector<float> row(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            row[static_cast<std::size_t>(j)] = static_cast<float>(x(i, j));
        }
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!out) {
        throw InputError(path + ": write failed");
    }
}

/// Parses a manifest CSV. Required header columns: patch_id, slide_id,
/// class_label (any order); extras become aux_tags keyed by column name.
inline std::vector<PatchRecord> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError(path + ": cannot open manifest");
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw InputError(path + ": empty manifest");
    }
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    const std::vector<std::string> header = detail::split_csv_line(line, 1, path);

    int col_patch = -1, col_slide = -1, col_class = -1;
    std::vector<std::size_t> aux_cols;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == "patch_id") {
            col_patch = static_cast<int>(i);
        } else if (header[i] == "slide_id") {
            col_slide = static_cast<int>(i);
        } else if (header[i] == "class_label") {
            col_class = static_cast<int>(i);
        } else {
            aux_cols.push_back(i);
        }
    }
    if (col_patch < 0 || col_slide < 0 || col_class < 0) {
        throw InputError(path + ": manifest header must contain patch_id, slide_id, class_label");
    }

    std::vector<PatchRecord> records;
    std::unordered_set<std::string> seen_ids;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields = detail::split_csv_line(line, line_no, path);
        if (fields.size() != header.size()) {
            throw InputError(path + ": line " + std::to_string(line_no) + ": expected " +
                             std::to_string(header.size()) + " fields, got " +
                             std::to_string(fields.size()));
        }
        PatchRecord rec;
        rec.patch_id = fields[static_cast<std::size_t>(col_patch)];
        rec.slide_id = fields[static_cast<std::size_t>(col_slide)];
        rec.class_label = fields[static_cast<std::size_t>(col_class)];
        if (rec.patch_id.empty() || rec.slide_id.empty() || rec.class_label.empty()) {
            throw InputError(path + ": line " + std::to_string(line_no) +
                             ": patch_id, slide_id and class_label must be non-empty");
        }
        if (!seen_ids.insert(rec.patch_id).second) {
            throw InputError(path + ": duplicate patch_id '" + rec.patch_id + "' at line " +
                             std::to_string(line_no));
        }
        for (std::size_t c : aux_cols) {
            rec.aux_tags[header[c]] = fields[c];
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) {
        throw InputError(path + ": manifest has a header but no rows");
    }
    return records;
}

inline void save_manifest(const std::string& path, const std::vector<PatchRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError(path + ": cannot open for writing");
    }
    out << "patch_id,slide_id,class_label\n";
    for (const PatchRecord& r : records) {
        out << detail::csv_escape(r.patch_id) << ',' << detail::csv_escape(r.slide_id) << ','
            << detail::csv_escape(r.class_label) << '\n';
    }
    if (!out) {
        throw InputError(path + ": write failed");
    }
}

inline ProgressionSpec load_progression_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError(path + ": cannot open progression spec");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": invalid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("name") || !j.contains("classes") ||
        !j["name"].is_string() || !j["classes"].is_array()) {
        throw InputError(path + ": progression spec must be {\"name\": ..., \"classes\": [...]}");
    }
    ProgressionSpec spec;
    spec.name = j["name"].get<std::string>();
    for (const auto& c : j["classes"]) {
        if (!c.is_string() || c.get<std::string>().empty()) {
            throw InputError(path + ": class names must be non-empty strings");
        }
        spec.classes.push_back(c.get<std::string>());
    }
    if (spec.classes.size() < 2) {
        throw InputError(path + ": a progression needs at least 2 classes");
    }
    std::unordered_set<std::string> uniq(spec.classes.begin(), spec.classes.end());
    if (uniq.size() != spec.classes.size()) {
        throw InputError(path + ": duplicate class names in progression spec");
    }
    return spec;
}

inline void save_progression_spec(const std::string& path, const ProgressionSpec& spec) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError(path + ": cannot open for writing");
    }
    nlohmann::json j;
    j["name"] = spec.name;
    j["classes"] = spec.classes;
    out << j.dump(2) << '\n';
}

/**
 * Joins embeddings, manifest and spec into a validated EmbeddingSet:
 * shapes must agree, every manifest label must be a spec class, every spec
 * class must have at least one patch, and all values must be finite.
 */
inline EmbeddingSet bind(Matrix embeddings, std::vector<PatchRecord> records,
                         ProgressionSpec spec) {
    const std::size_t n = records.size();
    if (n == 0) {
        throw InputError("bind: no patches");
    }
    if (static_cast<std::size_t>(embeddings.rows()) != n) {
        throw InputError("bind: manifest has " + std::to_string(n) + " rows but embeddings have " +
                         std::to_string(embeddings.rows()));
    }
    if (embeddings.cols() < 2) {
        throw InputError("bind: embedding dimension must be >= 2");
    }
    if (spec.classes.size() < 2) {
        throw InputError("bind: a progression needs at least 2 classes");
    }
    if (!embeddings.allFinite()) {
        for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
            for (Eigen::Index j = 0; j < embeddings.cols(); ++j) {
                if (!std::isfinite(embeddings(i, j))) {
                    throw InputError("bind: non-finite embedding value at row " +
                                     std::to_string(i) + ", column " + std::to_string(j));
                }
            }
        }
    }

    std::unordered_map<std::string, int> rank_by_label;
    for (std::size_t i = 0; i < spec.classes.size(); ++i) {
        rank_by_label[spec.classes[i]] = static_cast<int>(i);
    }

    EmbeddingSet set;
    set.class_ranks.resize(n);
    set.class_members.resize(spec.classes.size());
    std::vector<std::string> offenders;
    std::size_t offender_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        auto it = rank_by_label.find(records[i].class_label);
        if (it == rank_by_label.end()) {
            ++offender_count;
            if (offenders.size() < 5) {
                offenders.push_back("row " + std::to_string(i) + " ('" + records[i].patch_id +
                                    "': '" + records[i].class_label + "')");
            }
            continue;
        }
        set.class_ranks[i] = it->second;
        set.class_members[static_cast<std::size_t>(it->second)].push_back(i);
    }
    if (offender_count > 0) {
        std::string msg = "bind: " + std::to_string(offender_count) +
                          " patches have labels outside the progression spec: ";
        for (std::size_t i = 0; i < offenders.size(); ++i) {
            msg += (i ? "; " : "") + offenders[i];
        }
        if (offender_count > offenders.size()) {
            msg += "; ...";
        }
        throw InputError(msg);
    }
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        if (set.class_members[c].empty()) {
            throw InputError("bind: progression class '" + spec.classes[c] + "' has no patches");
        }
    }

    // Per-class slide groups, slides in lexicographic id order.
    set.class_slides.resize(spec.classes.size());
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        std::map<std::string, std::vector<std::size_t>> by_slide;
        for (std::size_t idx : set.class_members[c]) {
            by_slide[records[idx].slide_id].push_back(idx);
        }
        for (auto& [slide, members] : by_slide) {
            set.class_slides[c].push_back(SlideGroup{slide, std::move(members)});
        }
    }

    set.embeddings = std::move(embeddings);
    set.records = std::move(records);
    set.spec = std::move(spec);
    return set;
}

/// Convenience loader: embeddings + manifest + spec from paths, then bind.
inline EmbeddingSet load_set(const std::string& embeddings_path, const std::string& manifest_path,
                             const std::string& spec_path) {
    Matrix x = load_embeddings(embeddings_path);
    std::vector<PatchRecord> records = load_manifest(manifest_path);
    ProgressionSpec spec = load_progression_spec(spec_path);
    return bind(std::move(x), std::move(records), std::move(spec));
}

} // namespace ingest
} // namespace traject

#endif
