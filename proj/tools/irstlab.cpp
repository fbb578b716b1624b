// irstlab: synthetic IRST benchmark generation, training, evaluation and
// analysis in one binary. Every subcommand exits 0 only on full success.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "irst/gradcheck.hpp"
#include "irst/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    json j;
    f >> j;
    return j;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::string cur;
    for (char ch : s + ",") {
        if (ch == ',') {
            if (!cur.empty()) out.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pinwheel-convolution / scale-dynamic-loss laboratory"};
    app.require_subcommand(1);

    // gen
    auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic dataset");
    std::string gen_spec_path, gen_out;
    int gen_count = 250;
    std::int64_t gen_seed = -1;
    gen_cmd->add_option("--spec", gen_spec_path, "scene spec JSON")->required();
    gen_cmd->add_option("--out", gen_out, "output directory")->required();
    gen_cmd->add_option("--count", gen_count, "number of samples");
    gen_cmd->add_option("--seed", gen_seed, "override the spec seed");

    // train
    auto* train_cmd = app.add_subcommand("train", "train one model");
    std::string train_cfg_path, train_out;
    train_cmd->add_option("--config", train_cfg_path, "experiment config JSON")->required();
    train_cmd->add_option("--out", train_out, "output directory")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved model on a dataset");
    std::string eval_model, eval_data, eval_out;
    eval_cmd->add_option("--model", eval_model, "model JSON file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
    eval_cmd->add_option("--out", eval_out, "report JSON path")->required();

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "run a stem x loss x seed grid");
    std::string grid_path, ablate_out;
    int jobs = 1;
    ablate_cmd->add_option("--grid", grid_path, "grid JSON")->required();
    ablate_cmd->add_option("--out", ablate_out, "output directory")->required();
    ablate_cmd->add_option("--jobs", jobs, "parallel training cells");

    // analyze
    auto* analyze_cmd = app.add_subcommand("analyze", "parameter/receptive-field table");
    int kmax = 5;
    std::string channels_arg = "16,32,64";
    std::string analyze_out;
    analyze_cmd->add_option("--kmax", kmax, "largest fan-leaf length");
    analyze_cmd->add_option("--channels", channels_arg, "comma-separated channel widths");
    analyze_cmd->add_option("--out", analyze_out, "CSV path (stdout when omitted)");

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of all ops");
    std::string grad_ops = "all";
    double grad_tol = 1e-4;
    int grad_instances = 20;
    grad_cmd->add_option("--ops", grad_ops, "comma-separated op names, or 'all'");
    grad_cmd->add_option("--tol", grad_tol, "relative error tolerance");
    grad_cmd->add_option("--instances", grad_instances, "random instances per op");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen_cmd) {
            auto spec_json = read_json_file(gen_spec_path);
            auto cfg = irst::ExperimentConfig::from_json(json{{"gen_spec", spec_json}});
            auto spec = cfg.gen_spec;
            if (gen_seed >= 0) spec.seed = std::uint64_t(gen_seed);
            auto data = irst::generate(spec, gen_count);
            irst::save_dataset(data, spec, gen_out);
            std::cout << "wrote " << data.size() << " samples to " << gen_out << " (hash "
                      << irst::dataset_hash(gen_out) << ")\n";
        } else if (*train_cmd) {
            auto cfg = irst::ExperimentConfig::from_json(read_json_file(train_cfg_path));
            auto outcome = irst::train(cfg);
            fs::create_directories(train_out);
            irst::save_model(outcome.model, (fs::path(train_out) / "model.json").string());
            std::ofstream rf(fs::path(train_out) / "report.json");
            rf << outcome.report.to_json().dump(2) << "\n";
            std::cout << "final " << (cfg.model == irst::ModelKind::seg ? "IoU " : "mAP50 ")
                      << outcome.report.final_metrics.primary << " (best epoch "
                      << outcome.report.best_epoch << ", " << outcome.report.wall_seconds
                      << " s)\n";
        } else if (*eval_cmd) {
            auto model = irst::load_model(eval_model);
            auto data = irst::load_dataset(eval_data);
            auto metrics = irst::evaluate(model, data);
            nlohmann::ordered_json j;
            j["model"] = eval_model;
            j["data"] = eval_data;
            j["precision"] = metrics.precision;
            j["recall"] = metrics.recall;
            j["map50"] = metrics.map50;
            j["precision50"] = metrics.precision50;
            j["recall50"] = metrics.recall50;
            j["iou"] = metrics.iou;
            j["pd"] = metrics.pd;
            j["fa"] = metrics.fa;
            j["primary"] = metrics.primary;
            std::ofstream f(eval_out);
            f << j.dump(2) << "\n";
            std::cout << "primary metric " << metrics.primary << "\n";
        } else if (*ablate_cmd) {
            auto grid = read_json_file(grid_path);
            auto out = irst::ablate(grid, ablate_out, jobs);
            std::cout << "ran " << out["cells"].size() << " cells; results in " << ablate_out
                      << "\n";
        } else if (*analyze_cmd) {
            const auto csv = irst::analyze_csv(kmax, parse_int_list(channels_arg));
            if (analyze_out.empty()) {
                std::cout << csv;
            } else {
                std::ofstream f(analyze_out);
                f << csv;
                std::cout << "wrote " << analyze_out << "\n";
            }
        } else if (*grad_cmd) {
            std::vector<std::string> only;
            if (grad_ops != "all")
                for (const auto& name : CLI::detail::split(grad_ops, ','))
                    only.push_back(name);
            const auto results = irst::run_gradcheck(grad_tol, grad_instances, 42, only);
            for (const auto& r : results)
                std::cout << (r.pass ? "pass" : "FAIL") << "  " << r.name << "  max rel err "
                          << r.max_rel_err << "\n";
            if (!irst::all_passed(results)) {
                std::cerr << "gradcheck failed\n";
                return 1;
            }
            std::cout << results.size() << " ops checked\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
