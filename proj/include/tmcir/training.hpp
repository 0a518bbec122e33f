#pragma once

// Two-stage training: stage 1 aligns pooled instruction and pseudo-target
// features, stage 2 aligns composed queries with target features. AdamW with
// decoupled decay, cosine learning-rate schedule, binary checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tmcir/config.hpp"
#include "tmcir/diffcore.hpp"
#include "tmcir/encoders.hpp"
#include "tmcir/synthetic_world.hpp"

namespace tmcir {

/// 0.5 base (1 + cos(pi step / total)); steps past `total` clamp to 0.
/// A zero-step schedule returns base_lr.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

struct OptimizerState {
    std::size_t step = 0;
    /// Keyed by parameter name, in the optimizer's parameter order.
    std::vector<std::string> names;
    std::vector<DenseArray> m;
    std::vector<DenseArray> v;

    friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// p <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p), decay skipped for
/// parameters the store marks as non-decaying.
class AdamW {
public:
    AdamW(const ParameterStore& store, std::vector<std::string> trainable, AdamWConfig cfg);

    void step(ParameterStore& store, double lr);

    const OptimizerState& state() const noexcept { return state_; }
    /// Throws ShapeError when `state` does not fit the trainable set.
    void restore(OptimizerState state);
    const AdamWConfig& config() const noexcept { return cfg_; }

private:
    AdamWConfig cfg_;
    OptimizerState state_;
};

struct Checkpoint {
    ParameterStore params;
    OptimizerState optimizer;
    /// Resolved RunConfig JSON, compact.
    std::string config_json;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "TMC1", u32 version, then per array: u32 name length, name bytes, u32 rows,
/// u32 cols, little-endian doubles; trailing CRC-32 of all prior bytes.
std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws CheckpointError on bad magic, version, checksum or truncation.
Checkpoint deserialize_checkpoint(std::string_view bytes);
/// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// CRC-32 carried in the last four bytes of a serialized checkpoint.
std::uint32_t checkpoint_checksum(std::string_view bytes);

/// Throws ShapeError listing every array of `expected` that is missing from
/// or shaped differently in `loaded`.
void require_compatible(const ParameterStore& expected, const ParameterStore& loaded);

/// Encoders, and the projection when `with_projection`, freshly initialized.
ParameterStore initial_parameters(const RunConfig& cfg, bool with_projection);

struct StepLog {
    std::size_t step = 0;
    int stage = 1;
    double loss = 0.0;
    double lr = 0.0;
    double temp = 0.0;
};

/// {"step","stage","loss","lr","temp"}
void write_step_log(std::ostream& out, const StepLog& entry);

struct TrainHooks {
    std::function<void(const StepLog&)> on_step;
    /// Called every checkpoint_every steps with the current state.
    std::function<void(const Checkpoint&)> on_checkpoint;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<StepLog> log;
    std::size_t skipped_steps = 0;
};

/// Stage 1. Optimizes both encoders and log_temp with InfoNCE between pooled
/// instruction features and pooled features of the pseudo (or noisy real)
/// target. Batches whose features are all identical are skipped.
TrainResult train_alignment(const Dataset& data, const RunConfig& cfg, const TrainHooks& hooks = {});

/// Stage 2. `init` supplies encoder parameters; nullopt starts from a fresh
/// initialization. The projection is created here. Throws TrainingAbort on a
/// non-finite loss.
TrainResult train_fusion(const Dataset& data, const std::optional<Checkpoint>& init, const RunConfig& cfg,
                         const TrainHooks& hooks = {});

/// Stage-2 batch loss for the given triplets, on `tape`.
Var fusion_batch_loss(Tape& tape, ParameterStore& store, const EncoderShape& shape,
                      std::span<const TripletSample* const> batch, const RunConfig& cfg);

/// Stage-1 batch loss for the given triplets, on `tape`. Returns an unbound
/// Var when a batch of two or more has all-identical features.
Var alignment_batch_loss(Tape& tape, ParameterStore& store, const EncoderShape& shape,
                         std::span<const TripletSample* const> batch, Supervision supervision);

} // namespace tmcir
