// pfmda: data generation, two-stage training, evaluation, ablation and
// gradient checks. Exit codes: 0 ok, 1 failure, 2 usage, 3 configuration,
// 4 numerical.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pfmda/pfmda.hpp"

namespace fs = std::filesystem;
using namespace pfmda;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kNumerical = 4 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::string stage_name(NetworkKind k) { return to_string(k); }

struct RunRecord {
    std::string config_snapshot;
    std::uint64_t seed = 0;
    std::string loss_csv;
    std::string checkpoint;
    std::string metrics_csv;
    double wall_clock = 0.0;

    void write(const fs::path& path) const {
        std::ofstream os(path, std::ios::trunc);
        os << "config_snapshot=" << config_snapshot << '\n'
           << "seed=" << seed << '\n'
           << "loss_csv=" << loss_csv << '\n'
           << "checkpoint=" << checkpoint << '\n'
           << "metrics_csv=" << (metrics_csv.empty() ? "none" : metrics_csv) << '\n'
           << "wall_clock_s=" << fmt17(wall_clock) << '\n';
        if (!os) throw std::runtime_error("cannot write " + path.string());
    }
};

std::vector<Case> require_dataset(const std::string& dir, const char* key) {
    if (dir.empty()) throw ConfigError(std::string("config key '") + key + "' is required");
    return load_dataset(dir);
}

void require_matching_data(const ModelConfig& model, const std::vector<Case>& cases, const std::string& where) {
    for (const auto& c : cases)
        if (c.ct.extent(1) != model.image_size || c.ct.extent(2) != model.image_size)
            throw ConfigError("case " + c.id + " in " + where + " is " + shape_str(c.ct.shape()) + " but the model expects " +
                              std::to_string(model.image_size) + "x" + std::to_string(model.image_size));
}

AggNetwork load_agg(const TrainConfig& cfg) {
    if (cfg.agg_checkpoint.empty()) throw ConfigError("stage infer needs agg_checkpoint in the config");
    Checkpoint ck = load_checkpoint(cfg.agg_checkpoint);
    if (ck.kind != NetworkKind::Agg) throw ConfigError(cfg.agg_checkpoint + " is not an Agg checkpoint");
    if (!(ck.model.config() == cfg.model)) throw ConfigError("agg checkpoint architecture differs from the config");
    return AggNetwork(std::move(ck.model), ck.polymerized);
}

int cmd_gen_data(const std::string& spec_name, std::size_t n, const std::string& out, std::optional<std::uint64_t> seed) {
    const DomainSpec spec = DomainSpec::by_name(spec_name, seed.value_or(spec_name == "source-like" ? 1 : 2));
    const Manifest m = generate_dataset(spec, n, out);
    std::cout << "manifest=" << m.file.string() << " cases=" << m.rows.size() << " spec=" << spec.name
              << " seed=" << spec.seed << " fingerprint=" << m.fingerprint() << '\n';
    return kOk;
}

int cmd_train(const std::string& stage, const std::string& config_path) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainConfig cfg = TrainConfig::load(config_path);
    const fs::path out = cfg.out_dir;
    fs::create_directories(out);
    const NetworkKind kind = stage == "agg" ? NetworkKind::Agg : NetworkKind::Infer;
    const std::string tag = stage_name(kind);

    RunRecord rec;
    rec.seed = cfg.seed;
    rec.config_snapshot = (out / ("config_" + tag + ".txt")).string();
    {
        std::ofstream os(rec.config_snapshot, std::ios::trunc);
        os << cfg.to_text();
    }
    rec.loss_csv = (out / ("loss_" + tag + ".csv")).string();
    rec.checkpoint = (out / ("checkpoint_" + tag)).string();

    auto periodic = [&](bool polymerized) {
        return [&, polymerized](std::size_t epoch, const DoseModel& model) {
            if (cfg.checkpoint_every != 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
                char name[64];
                std::snprintf(name, sizeof name, "checkpoint_%s_epoch%04zu", tag.c_str(), epoch + 1);
                save_checkpoint(out / name, model, kind, polymerized);
            }
        };
    };

    std::vector<Tensor> predictions;
    std::vector<Case> test;
    if (!cfg.test_dir.empty()) test = load_dataset(cfg.test_dir);
    double final_loss = 0.0;
    std::size_t steps = 0;
    if (kind == NetworkKind::Agg) {
        const auto source = require_dataset(cfg.source_dir, "source_dir");
        const auto target = require_dataset(cfg.target_dir, "target_dir");
        require_matching_data(cfg.model, source, cfg.source_dir);
        require_matching_data(cfg.model, target, cfg.target_dir);
        AggRun run = train_agg(cfg, source, target, periodic(cfg.use_mca));
        write_loss_csv(rec.loss_csv, run.history);
        save_checkpoint(rec.checkpoint, run.net.model, kind, run.net.polymerized);
        if (!test.empty()) predictions = predict(run.net, test);
        final_loss = run.history.back().l_total;
        steps = run.history.size();
    } else {
        const bool needs_agg = cfg.init_from_agg || cfg.use_dtl;
        std::optional<AggNetwork> agg;
        if (needs_agg || !cfg.agg_checkpoint.empty()) agg.emplace(load_agg(cfg));
        const auto target = require_dataset(cfg.target_dir, "target_dir");
        require_matching_data(cfg.model, target, cfg.target_dir);
        InferRun run = train_infer(cfg, agg ? &*agg : nullptr, target, periodic(false));
        write_loss_csv(rec.loss_csv, run.history);
        save_checkpoint(rec.checkpoint, run.net.model, kind, false);
        if (!test.empty()) predictions = predict(run.net, test);
        final_loss = run.history.back().l_total;
        steps = run.history.size();
    }
    if (!test.empty()) {
        const fs::path eval_dir = out / ("eval_" + tag);
        write_evaluation(eval_dir, evaluate(predictions, test));
        rec.metrics_csv = (eval_dir / "metrics_pred.csv").string();
    }
    rec.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const fs::path record = out / ("run_" + tag + ".txt");
    rec.write(record);
    std::cout << "stage=" << tag << " steps=" << steps << " final_loss=" << fmt17(final_loss)
              << " loss_csv=" << rec.loss_csv << " checkpoint=" << rec.checkpoint << " record=" << record.string()
              << " seconds=" << fmt17(rec.wall_clock) << '\n';
    return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& out) {
    const auto cases = load_dataset(data);
    std::vector<Tensor> predictions;
    std::string predictor = "truth";
    if (checkpoint == "truth") {
        for (const auto& c : cases) predictions.push_back(c.dose);
    } else {
        Checkpoint ck = load_checkpoint(checkpoint);
        require_matching_data(ck.model.config(), cases, data);
        predictor = to_string(ck.kind);
        if (ck.kind == NetworkKind::Agg)
            predictions = predict(AggNetwork(std::move(ck.model), ck.polymerized), cases);
        else
            predictions = predict(InferNetwork(std::move(ck.model)), cases);
    }
    const Evaluation ev = evaluate(predictions, cases);
    write_evaluation(out, ev);
    std::cout << "predictor=" << predictor << " cases=" << ev.cases.size()
              << " metrics=" << (fs::path(out) / "metrics_pred.csv").string();
    for (std::size_t k = 0; k < kMetricNames.size(); ++k)
        std::cout << " ape_" << kMetricNames[k] << '=' << fmt17(ev.ape.cohort[k].mean);
    std::cout << " l1=" << fmt17(ev.l1.mean) << " fallbacks=" << ev.ape.fallback_count << '\n';
    return kOk;
}

int cmd_ablate(const std::string& config_path, const std::string& rows, std::size_t folds, const std::string& out_arg) {
    const TrainConfig cfg = TrainConfig::load(config_path);
    const auto labels = split_csv(rows);
    if (labels.empty()) throw UsageError("--rows needs at least one label");
    for (const auto& l : labels) {
        try {
            ablation_row(l);
        } catch (const ContractError& e) {
            throw UsageError(e.what());
        }
    }
    const fs::path out = out_arg.empty() ? fs::path(cfg.out_dir) / "ablation" : fs::path(out_arg);
    const auto source = require_dataset(cfg.source_dir, "source_dir");
    const auto target = require_dataset(cfg.target_dir, "target_dir");
    require_matching_data(cfg.model, source, cfg.source_dir);
    require_matching_data(cfg.model, target, cfg.target_dir);
    std::vector<AblationResult> results;
    if (folds != 0) {
        results = run_ablation_folds(cfg, labels, source, target, folds, out);
    } else {
        const auto test = require_dataset(cfg.test_dir, "test_dir");
        results = run_ablation(cfg, labels, source, target, test, out);
    }
    write_ablation(out, results);
    std::cout << "rows=" << results.size() << " comparison=" << (out / "comparison.csv").string();
    for (const auto& r : results) std::cout << " l1_" << r.label << '=' << fmt17(r.evaluation.l1.mean);
    std::cout << '\n';
    return kOk;
}

int cmd_gradcheck(const std::string& fault) {
    GradientSuiteOptions opt;
    opt.corrupt = fault;
    const auto report = run_gradient_suite(opt);
    for (const auto& c : report.checks)
        std::cerr << (c.passed() ? "PASS " : "FAIL ") << c.name << " max_rel_error=" << fmt17(c.max_rel_error)
                  << " tol=" << fmt17(c.tolerance) << '\n';
    std::string failed;
    for (const auto& f : report.failures()) failed += (failed.empty() ? "" : ",") + f;
    std::cout << "gradcheck=" << (report.passed() ? "pass" : "fail") << " checks=" << report.checks.size()
              << " failed=" << (failed.empty() ? "none" : failed) << " seconds=" << fmt17(report.seconds) << '\n';
    return report.passed() ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Polymerized-feature domain adaptation for dose prediction"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
    std::string spec, gen_out;
    std::size_t n = 0;
    std::optional<std::uint64_t> gen_seed;
    gen->add_option("--spec", spec, "source-like or target-like")->required()->check(
        CLI::IsMember({"source-like", "target-like"}));
    gen->add_option("--n", n, "number of cases")->required()->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--seed", gen_seed, "generator seed (defaults: source-like 1, target-like 2)");

    auto* train = app.add_subcommand("train", "Train the Agg or Infer network");
    std::string stage, train_config;
    train->add_option("--stage", stage, "agg or infer")->required()->check(CLI::IsMember({"agg", "infer"}));
    train->add_option("--config", train_config, "key=value config file")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string ck, data, eval_out;
    eval->add_option("--checkpoint", ck, "checkpoint directory, or 'truth' for a self-comparison")->required();
    eval->add_option("--data", data, "dataset directory")->required();
    eval->add_option("--out", eval_out, "output directory")->required();

    auto* ablate = app.add_subcommand("ablate", "Run the component ablation");
    std::string ablate_config, rows = "a,b,c,star,d,e", ablate_out;
    std::size_t folds = 0;
    ablate->add_option("--config", ablate_config, "key=value config file")->required();
    ablate->add_option("--rows", rows, "comma-separated subset of a,b,c,star,d,e");
    ablate->add_option("--folds", folds, "k-fold over target_dir instead of test_dir (0: use test_dir)");
    ablate->add_option("--out", ablate_out, "output directory (default: <out_dir>/ablation)");

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every op family");
    std::string fault;
    grad->add_option("--inject-fault", fault)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*gen) return cmd_gen_data(spec, n, gen_out, gen_seed);
        if (*train) return cmd_train(stage, train_config);
        if (*eval) return cmd_eval(ck, data, eval_out);
        if (*ablate) return cmd_ablate(ablate_config, rows, folds, ablate_out);
        if (*grad) return cmd_gradcheck(fault);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const ContractError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kConfig;
    } catch (const DimensionError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kConfig;
    } catch (const FormatError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return kConfig;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailure;
    }
    return kUsage;
}
