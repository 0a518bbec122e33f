#include "tmcir/config.hpp"

#include <fstream>

#include "config_json.hpp"
#include "tmcir/errors.hpp"

namespace tmcir {

using json = nlohmann::ordered_json;
using detail::read_key;
using detail::reject_unknown;

std::string_view supervision_name(Supervision s) { return s == Supervision::Pseudo ? "pseudo" : "real"; }

Supervision parse_supervision(std::string_view name) {
    if (name == "pseudo") {
        return Supervision::Pseudo;
    }
    if (name == "real") {
        return Supervision::Real;
    }
    throw ConfigError("config: supervision must be 'pseudo' or 'real', got '" + std::string(name) + "'");
}

void RunConfig::validate() const {
    world.validate();
    fusion.validate();
    loss.validate();
    if (align.batch_size < 2 || fuse.batch_size < 2) {
        throw ConfigError("config: batch_size must be at least 2 for contrastive training");
    }
    for (double lr : {align.lr, fuse.lr}) {
        if (!(lr >= 0.0)) {
            throw ConfigError("config: learning rates must be non-negative");
        }
    }
    for (double wd : {align.weight_decay, fuse.weight_decay}) {
        if (!(wd >= 0.0)) {
            throw ConfigError("config: weight_decay must be non-negative");
        }
    }
    if (eval.ks.empty()) {
        throw ConfigError("config: eval.ks must not be empty");
    }
    for (const auto* ks : {&eval.ks, &eval.subset_ks}) {
        for (std::size_t k : *ks) {
            if (k == 0) {
                throw ConfigError("config: recall cut-offs must be at least 1");
            }
        }
    }
}

json to_json(const RunConfig& cfg) {
    json j;
    j["data_seed"] = cfg.data_seed;
    j["train_seed"] = cfg.train_seed;
    j["world"] = to_json(cfg.world);
    j["align"] = {{"epochs", cfg.align.epochs},
                  {"batch_size", cfg.align.batch_size},
                  {"lr", cfg.align.lr},
                  {"weight_decay", cfg.align.weight_decay},
                  {"supervision", supervision_name(cfg.align.supervision)},
                  {"checkpoint_every", cfg.align.checkpoint_every}};
    j["fuse"] = {{"epochs", cfg.fuse.epochs},
                 {"batch_size", cfg.fuse.batch_size},
                 {"lr", cfg.fuse.lr},
                 {"weight_decay", cfg.fuse.weight_decay},
                 {"train_encoders", cfg.fuse.train_encoders},
                 {"use_fusion", cfg.fuse.use_fusion},
                 {"checkpoint_every", cfg.fuse.checkpoint_every}};
    j["fusion"] = {{"threshold", cfg.fusion.threshold}, {"epsilon", cfg.fusion.epsilon}, {"dim", cfg.fusion.dim}};
    j["loss"] = {{"temperature", cfg.loss.temperature}, {"printed_denominator", cfg.loss.printed_denominator}};
    j["eval"] = {{"ks", cfg.eval.ks}, {"subset_ks", cfg.eval.subset_ks}, {"split", split_name(cfg.eval.split)}};
    return j;
}

RunConfig run_config_from_json(const json& j) {
    reject_unknown(j, {"data_seed", "train_seed", "world", "align", "fuse", "fusion", "loss", "eval"}, "root");
    RunConfig cfg;
    read_key(j, "data_seed", cfg.data_seed, "root");
    read_key(j, "train_seed", cfg.train_seed, "root");
    if (auto it = j.find("world"); it != j.end()) {
        cfg.world = world_config_from_json(*it);
    }
    if (auto it = j.find("align"); it != j.end()) {
        const json& a = *it;
        reject_unknown(a, {"epochs", "batch_size", "lr", "weight_decay", "supervision", "checkpoint_every"},
                       "align");
        read_key(a, "epochs", cfg.align.epochs, "align");
        read_key(a, "batch_size", cfg.align.batch_size, "align");
        read_key(a, "lr", cfg.align.lr, "align");
        read_key(a, "weight_decay", cfg.align.weight_decay, "align");
        std::string sup(supervision_name(cfg.align.supervision));
        read_key(a, "supervision", sup, "align");
        cfg.align.supervision = parse_supervision(sup);
        read_key(a, "checkpoint_every", cfg.align.checkpoint_every, "align");
    }
    if (auto it = j.find("fuse"); it != j.end()) {
        const json& f = *it;
        reject_unknown(f,
                       {"epochs", "batch_size", "lr", "weight_decay", "train_encoders", "use_fusion",
                        "checkpoint_every"},
                       "fuse");
        read_key(f, "epochs", cfg.fuse.epochs, "fuse");
        read_key(f, "batch_size", cfg.fuse.batch_size, "fuse");
        read_key(f, "lr", cfg.fuse.lr, "fuse");
        read_key(f, "weight_decay", cfg.fuse.weight_decay, "fuse");
        read_key(f, "train_encoders", cfg.fuse.train_encoders, "fuse");
        read_key(f, "use_fusion", cfg.fuse.use_fusion, "fuse");
        read_key(f, "checkpoint_every", cfg.fuse.checkpoint_every, "fuse");
    }
    if (auto it = j.find("fusion"); it != j.end()) {
        reject_unknown(*it, {"threshold", "epsilon", "dim"}, "fusion");
        read_key(*it, "threshold", cfg.fusion.threshold, "fusion");
        read_key(*it, "epsilon", cfg.fusion.epsilon, "fusion");
        read_key(*it, "dim", cfg.fusion.dim, "fusion");
    }
    if (auto it = j.find("loss"); it != j.end()) {
        reject_unknown(*it, {"temperature", "printed_denominator"}, "loss");
        read_key(*it, "temperature", cfg.loss.temperature, "loss");
        read_key(*it, "printed_denominator", cfg.loss.printed_denominator, "loss");
    }
    if (auto it = j.find("eval"); it != j.end()) {
        reject_unknown(*it, {"ks", "subset_ks", "split"}, "eval");
        read_key(*it, "ks", cfg.eval.ks, "eval");
        read_key(*it, "subset_ks", cfg.eval.subset_ks, "eval");
        std::string split(split_name(cfg.eval.split));
        read_key(*it, "split", split, "eval");
        try {
            cfg.eval.split = parse_split(split);
        } catch (const ParseError& e) {
            throw ConfigError(std::string("config: eval.split: ") + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot open " + path.string());
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

} // namespace tmcir
