#pragma once
// Ablation runner: for every (bias factor, seed) build a trap split, train an
// ERM model, then score the trap test set one image at a time with each grid
// cell's method (plain TTA, TTS with a keypoint budget / source / alpha, or
// NoiseCrop). AUCs are aggregated per (cell, bias factor) over seeds.
//
// Keypoint counts are totals: n_keypoints = 40 means 20 positive + 20 negative.
// With annotation_source = artifacts, images without artifact annotations fall
// back to background negatives from the lesion mask.

#include "error.hpp"
#include "keypoints.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "selection.hpp"
#include "synthetic.hpp"
#include "trapset.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace tts {

enum class Method { baseline_tta, tts, noisecrop };
enum class AnnotationSource { none, segm_mask, artifacts };

inline std::string_view method_name(Method m) {
    switch (m) {
    case Method::baseline_tta: return "baseline_tta";
    case Method::tts: return "tts";
    case Method::noisecrop: return "noisecrop";
    }
    return "unknown";
}

inline std::string_view source_name(AnnotationSource s) {
    switch (s) {
    case AnnotationSource::none: return "-";
    case AnnotationSource::segm_mask: return "segm_mask";
    case AnnotationSource::artifacts: return "artifacts";
    }
    return "unknown";
}

struct EvalCell {
    Method method = Method::baseline_tta;
    int n_keypoints = 0;  // total, split evenly between positive and negative
    AnnotationSource source = AnnotationSource::none;
    double alpha = 0.4;
    double keep_fraction = 0.10;

    static EvalCell baseline() { return {}; }
    static EvalCell noise_crop() { return {Method::noisecrop}; }
    static EvalCell selection(int n_keypoints, AnnotationSource source, double alpha, double keep_fraction = 0.10) {
        return {Method::tts, n_keypoints, source, alpha, keep_fraction};
    }

    void validate() const {
        if (method != Method::tts) return;
        if (n_keypoints < 2 || n_keypoints % 2 != 0)
            throw ConfigError("TTS cells need an even keypoint total >= 2, got " + std::to_string(n_keypoints));
        if (source == AnnotationSource::none) throw ConfigError("TTS cells need an annotation source");
        SelectionConfig{alpha, keep_fraction}.validate();
    }

    std::string label() const {
        if (method != Method::tts) return std::string(method_name(method));
        std::ostringstream s;
        s << "tts_" << source_name(source) << "_k" << n_keypoints << "_a" << alpha;
        if (keep_fraction != 0.10) s << "_l" << keep_fraction;
        return s.str();
    }

    friend bool operator==(const EvalCell&, const EvalCell&) = default;
};

struct AblationGrid {
    std::vector<EvalCell> cells;
    std::vector<double> bias_factors;

    // Rows of the main results / ablation table plus the NoiseCrop comparison.
    static AblationGrid keypoint_table() {
        using S = AnnotationSource;
        AblationGrid g;
        g.cells = {EvalCell::baseline(),
                   EvalCell::noise_crop(),
                   EvalCell::selection(40, S::artifacts, 0.2),
                   EvalCell::selection(2, S::segm_mask, 0.4),
                   EvalCell::selection(10, S::segm_mask, 0.4),
                   EvalCell::selection(20, S::segm_mask, 0.4),
                   EvalCell::selection(40, S::segm_mask, 0.4),
                   EvalCell::selection(100, S::segm_mask, 0.4),
                   EvalCell::selection(2, S::artifacts, 0.4),
                   EvalCell::selection(40, S::artifacts, 0.4),
                   EvalCell::selection(2, S::artifacts, 0.2)};
        g.bias_factors = {1.0};
        return g;
    }

    void validate() const {
        if (cells.empty()) throw ConfigError("ablation grid has no cells");
        if (bias_factors.empty()) throw ConfigError("ablation grid has no bias factors");
        for (const auto& c : cells) c.validate();
        for (double b : bias_factors)
            if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("bias factors must lie in [0, 1]");
    }
};

struct AblationConfig {
    TrapSplitSpec split;  // fractions; bias and seed are set per job
    TrainConfig training;
    AugmentationPolicy tta;  // 50 replicas by default
    int threads = 0;         // 0 = hardware concurrency
};

struct EvalRow {
    EvalCell cell;
    double bias_factor = 0.0;
    double auc_mean = 0.0;
    double auc_std = 0.0;
    int n_seeds = 0;
    std::vector<std::uint64_t> seeds;  // seeds that completed
    std::vector<double> per_seed;      // matching AUCs
    bool complete = true;
    std::vector<std::string> errors;
};

struct EvalReport {
    std::vector<EvalRow> rows;

    const EvalRow* find(const EvalCell& cell, double bias) const {
        for (const auto& r : rows)
            if (r.cell == cell && r.bias_factor == bias) return &r;
        return nullptr;
    }
    const EvalRow& at(const EvalCell& cell, double bias) const {
        if (const auto* r = find(cell, bias)) return *r;
        throw PreconditionError("report has no row for " + cell.label() + " at bias " + std::to_string(bias));
    }
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t combine_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x6a09e667f3bcc908ULL;
    for (auto p : parts) h = mix_seed(h ^ p);
    return h;
}

struct JobResult {
    std::vector<std::optional<double>> auc;  // per cell
    std::vector<std::string> error;          // per cell
};

} // namespace detail

// Keypoints an annotator would provide for `sample` under `cell`. Independent of
// alpha, so cells differing only in alpha see the same points.
inline KeypointSet keypoints_for(const SyntheticSample& sample, const EvalCell& cell, std::uint64_t seed) {
    const int per_side = cell.n_keypoints / 2;
    if (cell.source == AnnotationSource::artifacts && !sample.annotation.points.empty())
        return sample_from_artifacts(sample.mask, sample.annotation, per_side, seed);
    return sample_from_mask(sample.mask, per_side, seed);
}

// Scores one trained model on the test images, one image at a time.
inline detail::JobResult evaluate_cells(const SplitModel& model, const std::vector<const SyntheticSample*>& test,
                                        const std::vector<EvalCell>& cells, const AugmentationPolicy& tta,
                                        std::uint64_t seed) {
    detail::JobResult out;
    out.auc.assign(cells.size(), std::nullopt);
    out.error.assign(cells.size(), "");
    std::vector<std::vector<double>> scores(cells.size());
    std::vector<bool> failed(cells.size(), false);
    std::vector<int> labels;
    const std::uint64_t noise_seed = detail::combine_seed({seed, 0x6e6f697365ULL});

    for (std::size_t i = 0; i < test.size(); ++i) {
        const SyntheticSample& s = *test[i];
        labels.push_back(static_cast<int>(s.record.label));
        const auto replicas = replica_features(model, s.image, tta);
        const FeatureMap clean = model.extract(s.image);
        std::optional<std::vector<FeatureMap>> noisy;
        for (std::size_t c = 0; c < cells.size(); ++c) {
            if (failed[c]) continue;
            const EvalCell& cell = cells[c];
            try {
                double p = 0.0;
                switch (cell.method) {
                case Method::baseline_tta: p = classify_replicas(model, replicas, nullptr)[1]; break;
                case Method::noisecrop:
                    if (!noisy) noisy = replica_features(model, noisecrop(s.image, s.mask, noise_seed, model), tta);
                    p = classify_replicas(model, *noisy, nullptr)[1];
                    break;
                case Method::tts: {
                    const auto keys = keypoints_for(
                        s, cell,
                        detail::combine_seed({seed, i, static_cast<std::uint64_t>(cell.n_keypoints),
                                              static_cast<std::uint64_t>(cell.source)}));
                    const auto sel = tts_select(clean, keys, SelectionConfig{cell.alpha, cell.keep_fraction});
                    p = classify_replicas(model, replicas, &sel.mask)[1];
                    break;
                }
                }
                scores[c].push_back(p);
            } catch (const std::exception& e) {
                failed[c] = true;
                out.error[c] = "image " + s.record.image_id + ": " + e.what();
            }
        }
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
        if (failed[c]) continue;
        try {
            out.auc[c] = auc(scores[c], labels);
        } catch (const std::exception& e) {
            out.error[c] = e.what();
        }
    }
    return out;
}

inline EvalReport run_ablation(const std::vector<SyntheticSample>& dataset, const AblationGrid& grid,
                               std::span<const std::uint64_t> seeds, const AblationConfig& cfg) {
    grid.validate();
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    const auto records = records_of(dataset);

    struct Job {
        double bias;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (double b : grid.bias_factors)
        for (auto s : seeds) jobs.push_back({b, s});
    std::vector<detail::JobResult> results(jobs.size());

    auto run_job = [&](const Job& job) {
        detail::JobResult r;
        r.auc.assign(grid.cells.size(), std::nullopt);
        try {
            TrapSplitSpec spec = cfg.split;
            spec.bias_factor = job.bias;
            spec.seed = job.seed;
            const TrapSplit split = build_trap_split(records, spec);
            std::vector<LabeledImage> train, val;
            std::vector<const SyntheticSample*> test;
            for (const auto& s : dataset) {
                switch (split.at(s.record.image_id)) {
                case Stratum::train: train.push_back({s.image, s.record.label}); break;
                case Stratum::val: val.push_back({s.image, s.record.label}); break;
                case Stratum::test: test.push_back(&s); break;
                }
            }
            TrainConfig tc = cfg.training;
            tc.seed = job.seed;
            const SplitModel model = train_erm(train, val, tc).model();
            r = evaluate_cells(model, test, grid.cells, cfg.tta, job.seed);
        } catch (const std::exception& e) {
            r.error.assign(grid.cells.size(), std::string("run failed: ") + e.what());
        }
        return r;
    };

    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const unsigned n_threads = std::min<unsigned>(cfg.threads > 0 ? static_cast<unsigned>(cfg.threads) : hw,
                                                  static_cast<unsigned>(jobs.size()));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t j = next++; j < jobs.size(); j = next++) results[j] = run_job(jobs[j]);
    };
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    EvalReport report;
    for (double b : grid.bias_factors)
        for (std::size_t c = 0; c < grid.cells.size(); ++c) {
            EvalRow row;
            row.cell = grid.cells[c];
            row.bias_factor = b;
            for (std::size_t j = 0; j < jobs.size(); ++j) {
                if (jobs[j].bias != b) continue;
                const auto& r = results[j];
                if (r.auc[c]) {
                    row.seeds.push_back(jobs[j].seed);
                    row.per_seed.push_back(*r.auc[c]);
                } else {
                    row.complete = false;
                    row.errors.push_back("seed " + std::to_string(jobs[j].seed) + ": " + r.error[c]);
                }
            }
            row.n_seeds = static_cast<int>(row.per_seed.size());
            row.auc_mean = mean_of(row.per_seed);
            row.auc_std = stddev_of(row.per_seed);
            report.rows.push_back(std::move(row));
        }
    return report;
}

// --- output ----------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

} // namespace detail

inline void write_report_csv(const EvalReport& report, std::ostream& out) {
    out << "method,n_keypoints,annotation_source,alpha,keep_fraction,bias_factor,auc_mean,auc_std,n_seeds,complete\n";
    for (const auto& r : report.rows) {
        const bool tts = r.cell.method == Method::tts;
        out << method_name(r.cell.method) << "," << (tts ? std::to_string(r.cell.n_keypoints) : "-") << ","
            << source_name(r.cell.source) << "," << (tts ? detail::fmt(r.cell.alpha, 2) : "-") << ","
            << (tts ? detail::fmt(r.cell.keep_fraction, 2) : "-") << "," << detail::fmt(r.bias_factor, 2) << ","
            << detail::fmt(r.auc_mean) << "," << detail::fmt(r.auc_std) << "," << r.n_seeds << ","
            << (r.complete ? "yes" : "no") << "\n";
    }
}

inline void write_per_seed_csv(const EvalReport& report, std::ostream& out) {
    out << "cell,bias_factor,seed,auc\n";
    for (const auto& r : report.rows)
        for (std::size_t i = 0; i < r.per_seed.size(); ++i)
            out << r.cell.label() << "," << detail::fmt(r.bias_factor, 2) << "," << r.seeds[i] << ","
                << detail::fmt(r.per_seed[i], 6) << "\n";
}

// One line per bias factor, mean/std column pair per cell.
inline void write_bias_sweep_csv(const EvalReport& report, std::ostream& out) {
    std::vector<EvalCell> cells;
    std::vector<double> biases;
    for (const auto& r : report.rows) {
        if (std::find(cells.begin(), cells.end(), r.cell) == cells.end()) cells.push_back(r.cell);
        if (std::find(biases.begin(), biases.end(), r.bias_factor) == biases.end()) biases.push_back(r.bias_factor);
    }
    std::sort(biases.begin(), biases.end());
    out << "bias_factor";
    for (const auto& c : cells) out << "," << c.label() << "_mean," << c.label() << "_std";
    out << "\n";
    for (double b : biases) {
        out << detail::fmt(b, 2);
        for (const auto& c : cells) {
            const auto* r = report.find(c, b);
            out << "," << (r ? detail::fmt(r->auc_mean) : "") << "," << (r ? detail::fmt(r->auc_std) : "");
        }
        out << "\n";
    }
}

inline void write_report_files(const EvalReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream a(dir / "report.csv"), b(dir / "per_seed.csv"), c(dir / "bias_sweep.csv");
    if (!a || !b || !c) throw Error("cannot write report files under " + dir.string());
    write_report_csv(report, a);
    write_per_seed_csv(report, b);
    write_bias_sweep_csv(report, c);
}

// --- grid files ------------------------------------------------------------------
//
// {"cells": [{"method": "tts", "n_keypoints": 40, "annotation_source": "artifacts",
//             "alpha": 0.2, "keep_fraction": 0.1}, {"method": "baseline_tta"}, ...],
//  "bias_factors": [1.0],
//  "corpus": {"count": 500, "seed": 7, "image_size": 32},
//  "training": {"max_epochs": 100, "patience": 10, "batch_size": 16,
//               "learning_rate": 0.01, "momentum": 0.9, "weight_decay": 0.001},
//  "tta_replicas": 50}

struct GridFile {
    AblationGrid grid;
    CorpusConfig corpus;
    AblationConfig config;
};

inline EvalCell cell_from_json(const nlohmann::json& j, std::size_t index) {
    const std::string where = "grid cell " + std::to_string(index);
    try {
        EvalCell c;
        const auto m = j.at("method").get<std::string>();
        if (m == "baseline_tta")
            c.method = Method::baseline_tta;
        else if (m == "noisecrop")
            c.method = Method::noisecrop;
        else if (m == "tts")
            c.method = Method::tts;
        else
            throw ParseError(where + ": unknown method '" + m + "'");
        if (c.method == Method::tts) {
            c.n_keypoints = j.at("n_keypoints").get<int>();
            const auto src = j.at("annotation_source").get<std::string>();
            if (src == "segm_mask")
                c.source = AnnotationSource::segm_mask;
            else if (src == "artifacts")
                c.source = AnnotationSource::artifacts;
            else
                throw ParseError(where + ": unknown annotation_source '" + src + "'");
            c.alpha = j.value("alpha", c.source == AnnotationSource::artifacts ? 0.2 : 0.4);
            c.keep_fraction = j.value("keep_fraction", 0.10);
        }
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(where + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(where + ": " + e.what());
    }
}

inline GridFile parse_grid(const nlohmann::json& j) {
    GridFile g;
    try {
        if (j.contains("cells"))
            for (std::size_t i = 0; i < j["cells"].size(); ++i) g.grid.cells.push_back(cell_from_json(j["cells"][i], i));
        else
            g.grid.cells = AblationGrid::keypoint_table().cells;
        g.grid.bias_factors = j.value("bias_factors", std::vector<double>{1.0});
        if (j.contains("corpus")) {
            const auto& c = j["corpus"];
            g.corpus.count = c.value("count", g.corpus.count);
            g.corpus.seed = c.value("seed", g.corpus.seed);
            g.corpus.image_size = c.value("image_size", g.corpus.image_size);
            g.corpus.artifact_rate = c.value("artifact_rate", g.corpus.artifact_rate);
        }
        auto& t = g.config.training;
        if (j.contains("training")) {
            const auto& c = j["training"];
            t.max_epochs = c.value("max_epochs", t.max_epochs);
            t.patience = c.value("patience", t.patience);
            t.batch_size = c.value("batch_size", t.batch_size);
            t.learning_rate = c.value("learning_rate", t.learning_rate);
            t.momentum = c.value("momentum", t.momentum);
            t.weight_decay = c.value("weight_decay", t.weight_decay);
        }
        t.architecture.input_height = t.architecture.input_width = g.corpus.image_size;
        g.config.tta.replica_count = j.value("tta_replicas", g.config.tta.replica_count);
        g.config.threads = j.value("threads", 0);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("grid file: ") + e.what());
    }
    return g;
}

inline GridFile read_grid(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open grid file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return parse_grid(j);
}

} // namespace tts
