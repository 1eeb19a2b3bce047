// mscn command-line driver: synthetic dataset generation, two-stage
// training, evaluation, embedding export and the numerical self-check.
//
// Exit codes: 0 success, 1 self-check failure, 2 usage/config error,
// 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mscn/mscn.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int run_generate(const std::string& config_path, const std::string& out_dir,
                 const std::vector<std::string>& overrides) {
    mscn::RunConfig cfg = mscn::RunConfig::load(config_path, overrides);
    auto manifests = mscn::generate_synthetic(cfg.data, out_dir);
    for (const auto& [split, manifest] : manifests) {
        std::vector<std::size_t> counts(cfg.data.class_proportions.size(), 0);
        for (const auto& row : manifest.rows) counts[static_cast<std::size_t>(row.label)]++;
        std::cout << mscn::split_name(split) << ": " << manifest.rows.size() << " samples, class counts [";
        for (std::size_t c = 0; c < counts.size(); ++c) std::cout << (c ? " " : "") << counts[c];
        std::cout << "]\n";
    }
    std::cout << "wrote " << out_dir << "\n";
    return kExitOk;
}

int run_train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir,
              bool stage1_only, int num_aux_override, const std::vector<std::string>& overrides) {
    mscn::RunConfig cfg = mscn::RunConfig::load(config_path, overrides);
    if (num_aux_override >= 0) {
        cfg.train.model.num_aux = static_cast<std::size_t>(num_aux_override);
        cfg.train.model.validate();
    }

    const fs::path data(data_dir);
    const int num_classes = static_cast<int>(cfg.train.model.num_classes);
    mscn::Dataset train = mscn::Dataset::load(data / "manifest_train.csv", num_classes);
    std::optional<mscn::Dataset> val, test;
    if (fs::exists(data / "manifest_val.csv")) val = mscn::Dataset::load(data / "manifest_val.csv", num_classes);
    if (fs::exists(data / "manifest_test.csv")) test = mscn::Dataset::load(data / "manifest_test.csv", num_classes);

    const auto shape = train.image_shape();
    cfg.train.model.image_shape = shape;
    cfg.train.model.validate();

    mscn::PipelineResult result = mscn::run_pipeline(train, val ? &*val : nullptr, test ? &*test : nullptr,
                                                     cfg.train, stage1_only);
    result.report.config_echo = cfg.echo();

    fs::create_directories(out_dir);
    const fs::path out(out_dir);
    mscn::save_checkpoint(out / "checkpoint.mscn", result.params);
    result.report.write(out / "report.jsonl", out / "metrics.json");

    for (const mscn::EpochRecord& r : result.report.epochs) {
        std::cout << "stage " << r.stage << " epoch " << r.epoch << " mean_loss " << mscn::format_double(r.mean_loss);
        if (r.train_accuracy) std::cout << " train_acc " << mscn::format_double(*r.train_accuracy);
        std::cout << "\n";
    }
    if (!result.report.final_eval.is_null() && result.report.final_eval.contains("accuracy")) {
        std::cout << "test accuracy " << mscn::format_double(result.report.final_eval["accuracy"].get<double>())
                  << "\n";
    }
    std::cout << "wrote " << (out / "checkpoint.mscn") << "\n";
    return kExitOk;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& report_path,
             const std::string& split) {
    mscn::ModelParams params = mscn::load_checkpoint(ckpt_path);
    mscn::ModelConfig cfg = mscn::model_config_from_params(params);
    const fs::path manifest = fs::path(data_dir) / ("manifest_" + split + ".csv");
    mscn::Dataset data = mscn::Dataset::load(manifest, static_cast<int>(cfg.num_classes));
    cfg.image_shape = data.image_shape();

    mscn::EvalResult result = mscn::evaluate_classifier(params, cfg, data);
    mscn::EmbeddingQuality quality = mscn::evaluate_embeddings(params, cfg, data);
    nlohmann::ordered_json report = mscn::eval_report_json(result, quality);
    if (!report_path.empty()) {
        std::ofstream f(report_path, std::ios::binary | std::ios::trunc);
        if (!f) throw mscn::IoError("cannot write report: " + report_path);
        f << report.dump(2) << "\n";
    }
    std::cout << "accuracy " << mscn::format_double(result.accuracy) << "\n";
    return kExitOk;
}

int run_embed(const std::string& ckpt_path, const std::string& data_dir, const std::string& out_path,
              const std::string& split) {
    mscn::ModelParams params = mscn::load_checkpoint(ckpt_path);
    mscn::ModelConfig cfg = mscn::model_config_from_params(params);
    const fs::path manifest = fs::path(data_dir) / ("manifest_" + split + ".csv");
    mscn::Dataset data = mscn::Dataset::load(manifest, static_cast<int>(cfg.num_classes));
    cfg.image_shape = data.image_shape();

    std::vector<mscn::Tensor> zs(data.size());
    mscn::parallel_for(data.size(), [&](std::size_t i) {
        zs[i] = mscn::embed_image(params, cfg, data.sample(i).image);
    });

    std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
    if (!f) throw mscn::IoError("cannot write embeddings: " + out_path);
    f << "sample_id,label";
    for (std::size_t d = 0; d < cfg.proj_out; ++d) f << ",z" << d;
    f << "\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        f << data.sample(i).id << "," << data.sample(i).label;
        for (double v : zs[i].values()) f << "," << mscn::format_double(v);
        f << "\n";
    }
    std::cout << "wrote " << out_path << " (" << data.size() << " embeddings)\n";
    return kExitOk;
}

int run_selfcheck_cmd(std::size_t instances, const std::string& perturb_op) {
    if (!perturb_op.empty()) mscn::GradientTape::set_gradient_fault(perturb_op);
    std::vector<mscn::CheckResult> results = mscn::run_selfcheck(instances);
    mscn::GradientTape::set_gradient_fault("");
    std::size_t failures = 0;
    for (const mscn::CheckResult& r : results) {
        std::printf("%-42s %s  max_err %.3e%s%s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL", r.max_err,
                    r.detail.empty() ? "" : "  ", r.detail.c_str());
        if (!r.pass) ++failures;
    }
    if (failures > 0) {
        std::printf("%zu check(s) failed\n", failures);
        return kExitCheckFailure;
    }
    std::printf("all %zu checks passed\n", results.size());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-stage contrastive training on synthetic multimodal data"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, ckpt_path, report_path, split = "test", perturb_op;
    std::vector<std::string> overrides;
    bool stage1_only = false;
    int num_aux_override = -1;
    std::size_t instances = 20;

    CLI::App* generate = app.add_subcommand("generate", "write a synthetic dataset");
    generate->add_option("--config", config_path, "JSON config file");
    generate->add_option("--out", out_dir, "output directory")->required();
    generate->add_option("--set", overrides, "dotted-path config override, key=value");

    CLI::App* train = app.add_subcommand("train", "run the two-stage pipeline");
    train->add_option("--config", config_path, "JSON config file");
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--out", out_dir, "run output directory")->required();
    train->add_flag("--stage1-only", stage1_only, "stop after representation training");
    train->add_option("--num-aux", num_aux_override, "override the number of auxiliaries (0,1,2,4)");
    train->add_option("--set", overrides, "dotted-path config override, key=value");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
    eval_cmd->add_option("--report", report_path, "evaluation report JSON path");
    eval_cmd->add_option("--split", split, "dataset split (train|val|test)");

    CLI::App* embed = app.add_subcommand("embed", "export per-sample embeddings as CSV");
    embed->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    embed->add_option("--data", data_dir, "dataset directory")->required();
    embed->add_option("--out", report_path, "output CSV path")->required();
    embed->add_option("--split", split, "dataset split (train|val|test)");

    CLI::App* selfcheck = app.add_subcommand("selfcheck", "gradient checks, loss oracles, freeze invariants");
    selfcheck->add_option("--instances", instances, "random instances per gradient check");
    selfcheck->add_option("--perturb-op", perturb_op, "test hook: corrupt one op's gradient rule");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (generate->parsed()) return run_generate(config_path, out_dir, overrides);
        if (train->parsed()) return run_train(config_path, data_dir, out_dir, stage1_only, num_aux_override, overrides);
        if (eval_cmd->parsed()) return run_eval(ckpt_path, data_dir, report_path, split);
        if (embed->parsed()) return run_embed(ckpt_path, data_dir, report_path, split);
        if (selfcheck->parsed()) return run_selfcheck_cmd(instances, perturb_op);
    } catch (const mscn::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const mscn::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
