#pragma once
// Trap-set construction: train/val/test partitions in which artifact-label
// associations are amplified in train and reversed in test.
//
// Phase 1 (solver): per class, samples are ranked by how strongly their
// artifacts agree with their label; the most agreeing fill the train pool, the
// rest go to test. Phase 2: each sample follows the solver with probability
// bias_factor, otherwise it takes a uniformly random free slot of its class.
// Validation is then carved at random from the train pool.

#include "artifacts.hpp"
#include "error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace tts {

enum class Label { benign = 0, melanoma = 1 };

inline constexpr std::string_view label_name(Label l) { return l == Label::melanoma ? "melanoma" : "benign"; }

inline std::optional<Label> parse_label(std::string_view s) {
    if (s == "melanoma" || s == "1") return Label::melanoma;
    if (s == "benign" || s == "0") return Label::benign;
    return std::nullopt;
}

struct SampleRecord {
    std::string image_id;
    Label label = Label::benign;
    std::array<bool, kArtifactCount> artifacts{};

    bool has(Artifact a) const { return artifacts[static_cast<std::size_t>(index_of(a))]; }
    friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

enum class Stratum { train, val, test };

inline constexpr std::string_view stratum_name(Stratum s) {
    switch (s) {
    case Stratum::train: return "train";
    case Stratum::val: return "val";
    case Stratum::test: return "test";
    }
    return "unknown";
}

inline std::optional<Stratum> parse_stratum(std::string_view s) {
    if (s == "train") return Stratum::train;
    if (s == "val") return Stratum::val;
    if (s == "test") return Stratum::test;
    return std::nullopt;
}

struct TrapSplitSpec {
    double bias_factor = 1.0;
    double train_fraction = 0.6;
    double val_fraction = 0.1;
    double test_fraction = 0.3;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(bias_factor >= 0.0 && bias_factor <= 1.0))
            throw ConfigError("bias_factor must lie in [0, 1], got " + std::to_string(bias_factor));
        if (!(train_fraction > 0.0) || !(test_fraction > 0.0) || !(val_fraction >= 0.0))
            throw ConfigError("train and test fractions must be positive and val non-negative");
        if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
            throw ConfigError("split fractions must sum to 1");
    }
};

// Signed phi coefficient of one artifact against the melanoma label.
struct PhiValue {
    double phi = 0.0;
    bool degenerate = false;  // a marginal was empty; phi reported as 0
};

struct TrapSplit {
    std::map<std::string, Stratum> assignment;
    std::array<PhiValue, kArtifactCount> train_phi{};
    std::array<PhiValue, kArtifactCount> test_phi{};

    Stratum at(const std::string& id) const {
        auto it = assignment.find(id);
        if (it == assignment.end()) throw PreconditionError("image " + id + " is not part of the split");
        return it->second;
    }
    friend bool operator==(const TrapSplit& a, const TrapSplit& b) {
        return a.assignment == b.assignment;
    }
};

// Phi of two binary variables from their 2x2 table.
inline PhiValue phi_coefficient(long n11, long n10, long n01, long n00) {
    const double r1 = static_cast<double>(n11 + n10);
    const double r0 = static_cast<double>(n01 + n00);
    const double c1 = static_cast<double>(n11 + n01);
    const double c0 = static_cast<double>(n10 + n00);
    if (r1 == 0 || r0 == 0 || c1 == 0 || c0 == 0) return {0.0, true};
    const double num = static_cast<double>(n11) * n00 - static_cast<double>(n10) * n01;
    return {num / std::sqrt(r1 * r0 * c1 * c0), false};
}

// Phi of artifact `a` against the melanoma label over `members`.
inline PhiValue artifact_phi(const std::vector<SampleRecord>& records, const std::vector<std::size_t>& members,
                             Artifact a) {
    long n11 = 0, n10 = 0, n01 = 0, n00 = 0;
    for (std::size_t i : members) {
        const bool x = records[i].has(a);
        const bool y = records[i].label == Label::melanoma;
        if (x && y)
            ++n11;
        else if (x)
            ++n10;
        else if (y)
            ++n01;
        else
            ++n00;
    }
    return phi_coefficient(n11, n10, n01, n00);
}

struct StratumSizes {
    int train = 0;
    int val = 0;
    int test = 0;
};

// Per-class stratum sizes; each within one sample of the requested fraction.
inline StratumSizes stratum_sizes(int n, const TrapSplitSpec& spec) {
    StratumSizes s;
    s.test = static_cast<int>(std::lround(spec.test_fraction * n));
    s.val = static_cast<int>(std::lround(spec.val_fraction * n));
    s.train = n - s.test - s.val;
    return s;
}

namespace detail {

inline std::array<std::vector<std::size_t>, 2> members_by_class(const std::vector<SampleRecord>& records) {
    std::array<std::vector<std::size_t>, 2> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        out[static_cast<std::size_t>(records[i].label)].push_back(i);
    return out;
}

inline std::vector<std::size_t> members_in(const std::vector<SampleRecord>& records, const TrapSplit& split,
                                           Stratum s) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (split.at(records[i].image_id) == s) out.push_back(i);
    return out;
}

} // namespace detail

// Deterministic greedy assignment maximising train association and test
// anti-association. Returns true (train pool) / false (test) per record.
inline std::vector<bool> solver_assignment(const std::vector<SampleRecord>& records, const TrapSplitSpec& spec) {
    const auto n = static_cast<double>(records.size());
    std::array<double, kArtifactCount> mean{}, sd{};
    for (Artifact a : kAllArtifacts) {
        double count = 0;
        for (const auto& r : records) count += r.has(a) ? 1.0 : 0.0;
        const auto k = static_cast<std::size_t>(index_of(a));
        mean[k] = count / n;
        sd[k] = std::sqrt(mean[k] * (1.0 - mean[k]));
    }
    std::vector<double> agreement(records.size(), 0.0);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const double y = records[i].label == Label::melanoma ? 1.0 : -1.0;
        for (Artifact a : kAllArtifacts) {
            const auto k = static_cast<std::size_t>(index_of(a));
            if (sd[k] == 0.0) continue;
            agreement[i] += y * ((records[i].has(a) ? 1.0 : 0.0) - mean[k]) / sd[k];
        }
    }

    std::vector<bool> to_train(records.size(), false);
    for (auto& members : detail::members_by_class(records)) {
        const StratumSizes sizes = stratum_sizes(static_cast<int>(members.size()), spec);
        std::stable_sort(members.begin(), members.end(),
                         [&](std::size_t l, std::size_t r) { return agreement[l] > agreement[r]; });
        for (int i = 0; i < sizes.train + sizes.val; ++i) to_train[members[static_cast<std::size_t>(i)]] = true;
    }
    return to_train;
}

inline TrapSplit build_trap_split(const std::vector<SampleRecord>& records, const TrapSplitSpec& spec) {
    spec.validate();
    const auto by_class = detail::members_by_class(records);
    for (int c = 0; c < 2; ++c)
        if (by_class[static_cast<std::size_t>(c)].size() < 2)
            throw PreconditionError("trap split needs at least 2 samples of class " +
                                    std::string(label_name(static_cast<Label>(c))));
    {
        std::set<std::string> ids;
        for (const auto& r : records)
            if (!ids.insert(r.image_id).second) throw PreconditionError("duplicate image_id " + r.image_id);
    }
    bool any_varying = false;
    for (Artifact a : kAllArtifacts) {
        const bool first = records.front().has(a);
        for (const auto& r : records)
            if (r.has(a) != first) any_varying = true;
    }
    if (!any_varying) throw PreconditionError("trap split needs at least one non-constant artifact column");
    for (const auto& members : by_class) {
        const StratumSizes s = stratum_sizes(static_cast<int>(members.size()), spec);
        if (s.train <= 0 || s.test <= 0 || (spec.val_fraction > 0 && s.val <= 0))
            throw ConfigError("split fractions leave an empty stratum for a class of " +
                              std::to_string(members.size()) + " samples");
    }

    const auto solver = solver_assignment(records, spec);
    std::mt19937_64 rng(spec.seed);
    std::bernoulli_distribution follow(spec.bias_factor);
    std::vector<int> pooled(records.size(), -1);  // 1 = train pool, 0 = test
    std::vector<bool> follows(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) follows[i] = follow(rng);

    for (const auto& members : by_class) {
        const StratumSizes s = stratum_sizes(static_cast<int>(members.size()), spec);
        int free_train = s.train + s.val;
        int free_test = s.test;
        std::vector<std::size_t> rest;
        for (std::size_t i : members) {
            if (follows[i]) {
                pooled[i] = solver[i] ? 1 : 0;
                (solver[i] ? free_train : free_test) -= 1;
            } else {
                rest.push_back(i);
            }
        }
        // Uniform over the remaining free slots of this class.
        std::vector<int> slots;
        slots.insert(slots.end(), static_cast<std::size_t>(free_train), 1);
        slots.insert(slots.end(), static_cast<std::size_t>(free_test), 0);
        std::shuffle(slots.begin(), slots.end(), rng);
        for (std::size_t k = 0; k < rest.size(); ++k) pooled[rest[k]] = slots[k];
    }

    TrapSplit split;
    for (const auto& members : by_class) {
        const StratumSizes s = stratum_sizes(static_cast<int>(members.size()), spec);
        std::vector<std::size_t> pool;
        for (std::size_t i : members) {
            if (pooled[i] == 1)
                pool.push_back(i);
            else
                split.assignment[records[i].image_id] = Stratum::test;
        }
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t k = 0; k < pool.size(); ++k)
            split.assignment[records[pool[k]].image_id] =
                k < static_cast<std::size_t>(s.val) ? Stratum::val : Stratum::train;
    }

    const auto train = detail::members_in(records, split, Stratum::train);
    const auto test = detail::members_in(records, split, Stratum::test);
    for (Artifact a : kAllArtifacts) {
        const auto k = static_cast<std::size_t>(index_of(a));
        split.train_phi[k] = artifact_phi(records, train, a);
        split.test_phi[k] = artifact_phi(records, test, a);
    }
    return split;
}

struct CorrelationRow {
    Artifact artifact;
    Stratum stratum;
    double phi = 0.0;
    bool degenerate = false;
    int samples = 0;
};

// Phi of every artifact against the label, per stratum (train, val, test).
inline std::vector<CorrelationRow> correlation_report(const TrapSplit& split,
                                                      const std::vector<SampleRecord>& records) {
    for (const auto& r : records) (void)split.at(r.image_id);
    std::vector<CorrelationRow> rows;
    for (Stratum s : {Stratum::train, Stratum::val, Stratum::test}) {
        const auto members = detail::members_in(records, split, s);
        for (Artifact a : kAllArtifacts) {
            const PhiValue v = artifact_phi(records, members, a);
            rows.push_back({a, s, v.phi, v.degenerate, static_cast<int>(members.size())});
        }
    }
    return rows;
}

// --- CSV -------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) {
        const auto b = field.find_first_not_of(" \t");
        const auto e = field.find_last_not_of(" \t");
        out.push_back(b == std::string::npos ? std::string() : field.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

} // namespace detail

// Columns: image_id, label, then any subset of the artifact names as 0/1.
inline std::vector<SampleRecord> parse_metadata_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) return {};
    const auto header = detail::split_csv_line(line);
    int id_col = -1, label_col = -1;
    std::vector<std::pair<int, Artifact>> art_cols;
    for (int i = 0; i < static_cast<int>(header.size()); ++i) {
        if (header[i] == "image_id")
            id_col = i;
        else if (header[i] == "label")
            label_col = i;
        else if (auto a = parse_artifact(header[i]))
            art_cols.emplace_back(i, *a);
        else
            throw ParseError("metadata header: unknown column '" + header[i] + "'");
    }
    if (id_col < 0 || label_col < 0) throw ParseError("metadata header needs image_id and label columns");

    std::vector<SampleRecord> records;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != header.size())
            throw ParseError("metadata line " + std::to_string(line_no) + ": expected " +
                             std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
        SampleRecord r;
        r.image_id = f[static_cast<std::size_t>(id_col)];
        auto label = parse_label(f[static_cast<std::size_t>(label_col)]);
        if (!label)
            throw ParseError("metadata line " + std::to_string(line_no) + ": label must be melanoma or benign");
        r.label = *label;
        for (auto [col, a] : art_cols) {
            const auto& v = f[static_cast<std::size_t>(col)];
            if (v != "0" && v != "1")
                throw ParseError("metadata line " + std::to_string(line_no) + ": column " +
                                 std::string(artifact_name(a)) + " must be 0 or 1");
            r.artifacts[static_cast<std::size_t>(index_of(a))] = v == "1";
        }
        records.push_back(std::move(r));
    }
    return records;
}

inline std::vector<SampleRecord> read_metadata_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open metadata file " + path.string());
    return parse_metadata_csv(in);
}

inline void write_metadata_csv(const std::vector<SampleRecord>& records, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "image_id,label";
    for (Artifact a : kAllArtifacts) out << "," << artifact_name(a);
    out << "\n";
    for (const auto& r : records) {
        out << r.image_id << "," << label_name(r.label);
        for (bool v : r.artifacts) out << "," << (v ? 1 : 0);
        out << "\n";
    }
}

inline void write_split_csv(const TrapSplit& split, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "image_id,stratum\n";
    for (const auto& [id, s] : split.assignment) out << id << "," << stratum_name(s) << "\n";
}

inline std::map<std::string, Stratum> read_split_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open split file " + path.string());
    std::string line;
    std::getline(in, line);
    std::map<std::string, Stratum> out;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto f = detail::split_csv_line(line);
        std::optional<Stratum> s;
        if (f.size() == 2) s = parse_stratum(f[1]);
        if (!s) throw ParseError("split line " + std::to_string(line_no) + ": expected image_id,stratum");
        out[f[0]] = *s;
    }
    return out;
}

} // namespace tts
