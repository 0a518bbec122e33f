#pragma once

// Contrastive objectives for both training stages.

#include "tmcir/diffcore.hpp"

namespace tmcir {

/// 1/0.07, the usual contrastive-pretraining starting point.
inline constexpr double kDefaultTemperature = 14.285;

struct LossConfig {
    /// Similarity multiplier applied before the softmax.
    double temperature = kDefaultTemperature;
    /// Stage 1 learns the temperature as a log-parameter.
    bool learnable = false;
    /// Diagnostic only: denominator sums exp(temp * cos(Q_j, T_j)) over the
    /// matched pairs instead of over the query's cross pairs.
    bool printed_denominator = false;

    void validate() const;
    friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

/// Unit-norm tolerance checked on every InfoNCE input row.
inline constexpr double kUnitTolerance = 1e-9;

/// Mean over i of -log softmax_j(temp * Q_i . T_j)[i]. `temperature` is a
/// 1x1 node. Throws EmptyInputError for B = 0, ShapeError for mismatched
/// batches, ContractViolation for rows off the unit sphere.
Var infonce(Var queries, Var targets, Var temperature, bool printed_denominator = false);

/// Plain-value InfoNCE with the same reduction order as the tape version.
double infonce_value(const DenseArray& queries, const DenseArray& targets, double temperature);

/// The temperature node for a step: exp(log_temp) bound from `store` when
/// learnable, otherwise an untracked constant.
Var temperature_node(Tape& tape, ParameterStore& store, const LossConfig& cfg);

} // namespace tmcir
