// tts: command-line driver.
//
//   tts generate --out corpus/ [--count 500] [--seed 1]
//   tts split    --metadata corpus/metadata.csv --out split.csv [--bias 1.0] [--seed 0] [--report phi.csv]
//   tts train    --corpus corpus/ --split split.csv --out model.json [--seed 0] [--epochs 100]
//   tts eval     --grid grid.json --seeds 5 --out results/ [--bias-factors 0.5,0.7,0.9,1.0] [--corpus dir]
//   tts serve    --checkpoint model.json --corpus corpus/ [--port 8080] [--study-mode]

#include <tts/eval.hpp>
#include <tts/model.hpp>
#include <tts/service.hpp>
#include <tts/synthetic.hpp>
#include <tts/trapset.hpp>

#include <CLI11.hpp>
#include <httplib.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

namespace fs = std::filesystem;

namespace {

int cmd_generate(const fs::path& out, tts::CorpusConfig cfg) {
    const auto corpus = tts::generate_corpus(cfg);
    tts::write_corpus(corpus, out);
    std::cout << "wrote " << corpus.size() << " samples to " << out << "\n";
    return 0;
}

int cmd_split(const fs::path& metadata, const fs::path& out, const fs::path& report, tts::TrapSplitSpec spec) {
    const auto records = tts::read_metadata_csv(metadata);
    const auto split = tts::build_trap_split(records, spec);
    tts::write_split_csv(split, out);
    std::ostream* rep = &std::cout;
    std::ofstream file;
    if (!report.empty()) {
        file.open(report);
        if (!file) throw tts::Error("cannot write " + report.string());
        rep = &file;
    }
    *rep << "artifact,stratum,phi,degenerate,samples\n";
    for (const auto& r : tts::correlation_report(split, records))
        *rep << tts::artifact_name(r.artifact) << "," << tts::stratum_name(r.stratum) << "," << r.phi << ","
             << (r.degenerate ? "yes" : "no") << "," << r.samples << "\n";
    return 0;
}

int cmd_train(const fs::path& corpus_dir, const fs::path& split_path, const fs::path& out, tts::TrainConfig cfg) {
    const auto corpus = tts::read_corpus(corpus_dir);
    const auto split = tts::read_split_csv(split_path);
    std::vector<tts::LabeledImage> train, val;
    for (const auto& s : corpus) {
        const auto st = split.at(s.record.image_id);
        if (st == tts::Stratum::train) train.push_back({s.image, s.record.label});
        if (st == tts::Stratum::val) val.push_back({s.image, s.record.label});
    }
    if (!corpus.empty()) {
        cfg.architecture.input_height = corpus.front().image.height();
        cfg.architecture.input_width = corpus.front().image.width();
    }
    const auto result = tts::train_erm(train, val, cfg);
    for (const auto& e : result.history)
        std::cerr << "epoch " << e.epoch << " loss " << e.train_loss
                  << (e.val_auc ? " val_auc " + std::to_string(*e.val_auc) : std::string()) << "\n";
    tts::save_checkpoint(*result.network, out);
    std::cout << "best epoch " << result.best_epoch << ", checkpoint " << out << "\n";
    return 0;
}

int cmd_eval(const fs::path& grid_path, int n_seeds, const fs::path& out, const std::vector<double>& biases,
             const fs::path& corpus_dir) {
    auto grid = tts::read_grid(grid_path);
    if (!biases.empty()) grid.grid.bias_factors = biases;
    const auto corpus = corpus_dir.empty() ? tts::generate_corpus(grid.corpus) : tts::read_corpus(corpus_dir);
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_seeds));
    std::iota(seeds.begin(), seeds.end(), std::uint64_t{0});
    const auto report = tts::run_ablation(corpus, grid.grid, seeds, grid.config);
    tts::write_report_files(report, out);
    tts::write_report_csv(report, std::cout);
    for (const auto& r : report.rows)
        for (const auto& e : r.errors) std::cerr << r.cell.label() << ": " << e << "\n";
    return 0;
}

int cmd_serve(const fs::path& checkpoint, const fs::path& corpus_dir, int port, bool study_mode, bool no_cache) {
    auto net = std::make_shared<const tts::nn::ConvNet>(tts::load_checkpoint(checkpoint));
    auto model = std::make_shared<const tts::SplitModel>(tts::SplitModel::from_network(net));
    tts::ServiceConfig cfg;
    cfg.study_mode = study_mode;
    cfg.cache_features = !no_cache;
    cfg.annotation_store = corpus_dir / "annotations.json";
    tts::Service service(model, tts::read_corpus(corpus_dir), cfg);
    httplib::Server server;
    service.bind(server);
    std::cout << "listening on 127.0.0.1:" << port << std::endl;
    if (!server.listen("127.0.0.1", port)) throw tts::Error("cannot listen on port " + std::to_string(port));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Test-time selection of feature-map channels for shortcut mitigation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "write a synthetic dermoscopy-like corpus");
    fs::path gen_out;
    tts::CorpusConfig corpus_cfg;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", corpus_cfg.count, "number of images");
    gen->add_option("--seed", corpus_cfg.seed, "generator seed");
    gen->add_option("--artifact-rate", corpus_cfg.artifact_rate, "per-type artifact prevalence");

    auto* split = app.add_subcommand("split", "build a trap split from metadata");
    fs::path split_meta, split_out, split_report;
    tts::TrapSplitSpec spec;
    split->add_option("--metadata", split_meta, "metadata CSV")->required();
    split->add_option("--out", split_out, "split CSV (image_id,stratum)")->required();
    split->add_option("--report", split_report, "phi report CSV (default stdout)");
    split->add_option("--bias", spec.bias_factor, "bias factor in [0, 1]");
    split->add_option("--seed", spec.seed, "split seed");
    split->add_option("--train", spec.train_fraction);
    split->add_option("--val", spec.val_fraction);
    split->add_option("--test", spec.test_fraction);

    auto* train = app.add_subcommand("train", "train the ERM model on a split");
    fs::path train_corpus, train_split, train_out;
    tts::TrainConfig train_cfg;
    train->add_option("--corpus", train_corpus, "corpus directory")->required();
    train->add_option("--split", train_split, "split CSV")->required();
    train->add_option("--out", train_out, "checkpoint path")->required();
    train->add_option("--seed", train_cfg.seed);
    train->add_option("--epochs", train_cfg.max_epochs);
    train->add_option("--patience", train_cfg.patience);

    auto* eval = app.add_subcommand("eval", "run an ablation grid over bias factors and seeds");
    fs::path grid_path, eval_out, eval_corpus;
    int n_seeds = 5;
    std::vector<double> biases;
    eval->add_option("--grid", grid_path, "grid JSON file")->required();
    eval->add_option("--seeds", n_seeds, "number of seeds (0..N-1)")->check(CLI::PositiveNumber);
    eval->add_option("--out", eval_out, "output directory")->required();
    eval->add_option("--bias-factors", biases, "override the grid's bias factors")->delimiter(',');
    eval->add_option("--corpus", eval_corpus, "corpus directory (default: generate from the grid's corpus block)");

    auto* serve = app.add_subcommand("serve", "start the HTTP service");
    fs::path ckpt, serve_corpus;
    int port = 8080;
    bool study_mode = false, no_cache = false;
    serve->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    serve->add_option("--corpus", serve_corpus, "corpus directory")->required();
    serve->add_option("--port", port);
    serve->add_flag("--study-mode", study_mode, "include labels in /api/images");
    serve->add_flag("--no-cache", no_cache, "disable the feature cache");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(gen_out, corpus_cfg);
        if (split->parsed()) return cmd_split(split_meta, split_out, split_report, spec);
        if (train->parsed()) return cmd_train(train_corpus, train_split, train_out, train_cfg);
        if (eval->parsed()) return cmd_eval(grid_path, n_seeds, eval_out, biases, eval_corpus);
        if (serve->parsed()) return cmd_serve(ckpt, serve_corpus, port, study_mode, no_cache);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
