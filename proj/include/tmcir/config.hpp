#pragma once

// Run configuration: one JSON object with sections world, align, fuse,
// fusion, loss and eval plus the two seeds. Unknown keys are rejected.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tmcir/losses.hpp"
#include "tmcir/synthetic_world.hpp"
#include "tmcir/token_fusion.hpp"

namespace tmcir {

enum class Supervision { Pseudo, Real };

std::string_view supervision_name(Supervision s);
/// Throws ConfigError for anything but "pseudo" or "real".
Supervision parse_supervision(std::string_view name);

/// Stage-1 alignment. Large-model learning rates (1e-5 and 2e-5) undertrain
/// the desk-scale encoders, hence the larger defaults.
struct AlignConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 3e-3;
    double weight_decay = 0.05;
    Supervision supervision = Supervision::Pseudo;
    /// Steps between periodic checkpoints; 0 disables them.
    std::size_t checkpoint_every = 0;

    friend bool operator==(const AlignConfig&, const AlignConfig&) = default;
};

struct FuseConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 0.05;
    bool train_encoders = true;
    /// false selects the no-fusion query path.
    bool use_fusion = true;
    std::size_t checkpoint_every = 0;

    friend bool operator==(const FuseConfig&, const FuseConfig&) = default;
};

struct EvalConfig {
    std::vector<std::size_t> ks{1, 5, 10, 50};
    std::vector<std::size_t> subset_ks{1, 2, 3};
    Split split = Split::Test;

    friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct RunConfig {
    std::uint64_t data_seed = 1;
    std::uint64_t train_seed = 1;
    WorldConfig world;
    AlignConfig align;
    FuseConfig fuse;
    FusionConfig fusion;
    /// Stage-2 temperature; stage 1 starts its learnable temperature here.
    LossConfig loss;
    EvalConfig eval;

    /// Throws ConfigError naming the offending key.
    void validate() const;
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Missing keys keep defaults; unknown keys and bad values are ConfigError.
RunConfig run_config_from_json(const nlohmann::ordered_json& j);
/// Throws ConfigError for unreadable or malformed files.
RunConfig load_run_config(const std::filesystem::path& path);

} // namespace tmcir
