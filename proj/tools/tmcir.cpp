// Command-line entry point: data generation, both training stages,
// evaluation, ablations and checkpoint inspection.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tmcir/config.hpp"
#include "tmcir/errors.hpp"
#include "tmcir/retrieval_eval.hpp"
#include "tmcir/synthetic_world.hpp"
#include "tmcir/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace tmcir;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Usage errors that surface after CLI parsing.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    }
    out << text;
    if (!out) {
        throw std::ios_base::failure("write to " + path.string() + " failed");
    }
}

Dataset load_data(const fs::path& dir, const RunConfig& cfg) {
    Dataset data = read_dataset_dir(dir);
    if (!(data.config == cfg.world) || data.seed != cfg.data_seed) {
        throw ConfigError("config: world section or data_seed differs from the dataset header in " + dir.string());
    }
    return data;
}

void print_counts(const Dataset& data) {
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        std::cout << split_name(s) << ": " << data.split(s).size() << " triplets, " << data.candidates_in(s).size()
                  << " candidates\n";
    }
}

RunConfig config_of(const Checkpoint& ckpt) {
    try {
        return run_config_from_json(json::parse(ckpt.config_json));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint config echo is not JSON: ") + e.what());
    }
}

struct TrainOutputs {
    fs::path dir;
    std::ofstream log;
    fs::path checkpoint;
};

TrainOutputs open_outputs(const fs::path& dir, const RunConfig& cfg) {
    fs::create_directories(dir);
    TrainOutputs o;
    o.dir = dir;
    o.checkpoint = dir / "checkpoint.tmc";
    o.log.open(dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
    if (!o.log) {
        throw std::ios_base::failure("cannot open " + (dir / "train_log.jsonl").string());
    }
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    return o;
}

TrainHooks hooks_for(TrainOutputs& o) {
    TrainHooks h;
    h.on_step = [&o](const StepLog& e) {
        write_step_log(o.log, e);
        o.log.flush();
    };
    h.on_checkpoint = [&o](const Checkpoint& c) { save_checkpoint(o.checkpoint, c); };
    return h;
}

void finish_training(TrainOutputs& o, const TrainResult& r) {
    save_checkpoint(o.checkpoint, r.checkpoint);
    std::printf("steps: %zu (skipped %zu)\n", r.log.size() + r.skipped_steps, r.skipped_steps);
    if (!r.log.empty()) {
        std::printf("final loss: %.6f\n", r.log.back().loss);
    }
    std::printf("checkpoint: %s\n", o.checkpoint.string().c_str());
}

std::vector<std::size_t> parse_ks(const std::string& text) {
    std::vector<std::size_t> ks;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        unsigned long k = 0;
        try {
            k = std::stoul(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || k == 0) {
            throw ConfigError("config: --ks expects positive integers separated by commas, got '" + text + "'");
        }
        ks.push_back(k);
    }
    return ks;
}

void print_report(const EvalReport& r) {
    std::printf("queries %zu, gallery %zu\n", r.queries, r.gallery);
    for (auto [k, v] : r.recall) {
        std::printf("R@%zu %.4f\n", k, v);
    }
    for (auto [k, v] : r.subset_recall) {
        std::printf("Rs@%zu %.4f\n", k, v);
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Composed retrieval with adaptive token fusion on a synthetic grid world"};
    app.require_subcommand(1);

    std::string config_path;
    std::string data_dir;
    std::string out_path;
    std::string init_path;
    std::string ckpt_path;
    std::string supervision;
    std::string ks_text;
    std::string split_text;
    std::string kind_text;
    bool from_scratch = false;
    bool no_fusion = false;
    bool timing = false;

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
    gen->add_option("--config", config_path, "Run config JSON")->required();
    gen->add_option("--out", out_path, "Output directory")->required();

    auto* align = app.add_subcommand("train-align", "Stage 1: instruction / pseudo-target alignment");
    align->add_option("--config", config_path)->required();
    align->add_option("--data", data_dir)->required();
    align->add_option("--out", out_path)->required();
    align->add_option("--supervision", supervision, "pseudo or real");

    auto* fuse = app.add_subcommand("train-fuse", "Stage 2: fused query / target alignment");
    fuse->add_option("--config", config_path)->required();
    fuse->add_option("--data", data_dir)->required();
    fuse->add_option("--out", out_path)->required();
    fuse->add_option("--init", init_path, "Stage-1 checkpoint");
    fuse->add_flag("--from-scratch", from_scratch, "Skip stage-1 initialization");
    fuse->add_flag("--no-fusion", no_fusion, "Pool raw tokens instead of fusing");

    auto* eval = app.add_subcommand("eval", "Evaluate a stage-2 checkpoint");
    eval->add_option("--ckpt", ckpt_path)->required();
    eval->add_option("--data", data_dir)->required();
    eval->add_option("--out", out_path)->required();
    eval->add_option("--ks", ks_text, "Comma-separated recall cut-offs");
    eval->add_option("--split", split_text, "val or test");
    eval->add_flag("--timing", timing, "Include wall_ms in the report");

    auto* ablate = app.add_subcommand("ablate", "Run an ablation and write reports and CSV");
    ablate->add_option("--kind", kind_text, "threshold_sweep|no_fusion|pseudo_vs_real|pretrained_vs_finetuned")
        ->required();
    ablate->add_option("--config", config_path)->required();
    ablate->add_option("--out", out_path)->required();
    ablate->add_option("--data", data_dir, "Dataset directory; generated from the config when omitted");

    auto* inspect = app.add_subcommand("inspect", "Validate a checkpoint and list its arrays");
    inspect->add_option("--ckpt", ckpt_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (*gen) {
            const RunConfig cfg = load_run_config(config_path);
            const Dataset data = generate_dataset(cfg.world, cfg.data_seed);
            write_dataset_dir(out_path, data);
            print_counts(data);
        } else if (*align) {
            RunConfig cfg = load_run_config(config_path);
            if (!supervision.empty()) {
                cfg.align.supervision = parse_supervision(supervision);
            }
            const Dataset data = load_data(data_dir, cfg);
            TrainOutputs out = open_outputs(out_path, cfg);
            finish_training(out, train_alignment(data, cfg, hooks_for(out)));
        } else if (*fuse) {
            RunConfig cfg = load_run_config(config_path);
            if (no_fusion) {
                cfg.fuse.use_fusion = false;
            }
            if (from_scratch == !init_path.empty()) {
                throw UsageError("train-fuse needs exactly one of --init <ckpt> or --from-scratch");
            }
            std::optional<Checkpoint> init;
            if (!init_path.empty()) {
                init = load_checkpoint(init_path);
            }
            const Dataset data = load_data(data_dir, cfg);
            TrainOutputs out = open_outputs(out_path, cfg);
            finish_training(out, train_fusion(data, init, cfg, hooks_for(out)));
        } else if (*eval) {
            Checkpoint ckpt = load_checkpoint(ckpt_path);
            RunConfig cfg = config_of(ckpt);
            if (!ks_text.empty()) {
                cfg.eval.ks = parse_ks(ks_text);
                cfg.eval.subset_ks.erase(std::remove_if(cfg.eval.subset_ks.begin(), cfg.eval.subset_ks.end(),
                                                        [&](std::size_t k) {
                                                            return std::find(cfg.eval.ks.begin(), cfg.eval.ks.end(),
                                                                             k) == cfg.eval.ks.end();
                                                        }),
                                         cfg.eval.subset_ks.end());
            }
            if (!split_text.empty()) {
                try {
                    cfg.eval.split = parse_split(split_text);
                } catch (const ParseError& e) {
                    throw ConfigError(std::string("config: --split: ") + e.what());
                }
            }
            const Dataset data = load_data(data_dir, cfg);
            EvalReport report = evaluate(data, ckpt.params, cfg);
            if (!timing) {
                report.wall_ms.reset();
            }
            write_text(out_path, report.to_json().dump() + "\n");
            print_report(report);
        } else if (*ablate) {
            const AblationKind kind = parse_ablation(kind_text);
            const RunConfig cfg = load_run_config(config_path);
            const Dataset data = data_dir.empty() ? generate_dataset(cfg.world, cfg.data_seed)
                                                  : load_data(data_dir, cfg);
            fs::create_directories(out_path);
            write_text(fs::path(out_path) / "config.json", to_json(cfg).dump(2) + "\n");
            const auto outcomes = run_ablation(kind, cfg, data, [](const std::string& msg) {
                std::fprintf(stderr, "%s\n", msg.c_str());
            });
            std::size_t ok = 0;
            for (const auto& o : outcomes) {
                if (o.report) {
                    ++ok;
                    write_text(fs::path(out_path) / (o.variant.name + ".json"), o.report->to_json().dump() + "\n");
                } else {
                    std::fprintf(stderr, "variant %s failed: %s\n", o.variant.name.c_str(), o.error.c_str());
                }
            }
            const std::string csv = ablation_csv(outcomes);
            write_text(fs::path(out_path) / (std::string(ablation_name(kind)) + ".csv"), csv);
            std::cout << csv;
            if (ok == 0) {
                return kExitRuntime;
            }
        } else if (*inspect) {
            std::ifstream in(ckpt_path, std::ios::binary);
            if (!in) {
                throw std::ios_base::failure("cannot open checkpoint " + ckpt_path);
            }
            std::ostringstream ss;
            ss << in.rdbuf();
            const std::string bytes = ss.str();
            const Checkpoint ckpt = deserialize_checkpoint(bytes);
            std::printf("valid checkpoint, crc32 %08x, step %zu\n", checkpoint_checksum(bytes), ckpt.optimizer.step);
            for (const auto& name : ckpt.params.names()) {
                std::printf("  %s %s\n", name.c_str(), ckpt.params.value(name).shape_string().c_str());
            }
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return 0;
}
