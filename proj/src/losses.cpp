#include "tmcir/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tmcir/encoders.hpp"
#include "tmcir/errors.hpp"

namespace tmcir {

void LossConfig::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ConfigError("config: loss.temperature must be positive and finite");
    }
}

namespace {

void require_batch(const DenseArray& q, const DenseArray& t) {
    if (q.rows() == 0) {
        throw EmptyInputError("contrastive loss over an empty batch");
    }
    if (!q.same_shape(t)) {
        throw ShapeError("queries " + q.shape_string() + " and targets " + t.shape_string() + " differ");
    }
    for (const DenseArray* x : {&q, &t}) {
        for (std::size_t r = 0; r < x->rows(); ++r) {
            const double n = l2_norm(x->row(r));
            if (std::abs(n - 1.0) > kUnitTolerance) {
                throw ContractViolation(std::string(x == &q ? "query" : "target") + " row " + std::to_string(r) +
                                        " has norm " + std::to_string(n) + ", expected unit norm");
            }
        }
    }
}

} // namespace

Var infonce(Var queries, Var targets, Var temperature, bool printed_denominator) {
    require_batch(queries.value(), targets.value());
    Var logits = ad::mul_scalar(ad::matmul_nt(queries, targets), temperature);
    Var positives = ad::diagonal(logits);
    if (printed_denominator) {
        // The same matched-pair sum for every row.
        Var shared = ad::logsumexp_rows(ad::transpose(positives));
        return ad::sub(shared, ad::mean_all(positives));
    }
    return ad::mean_all(ad::sub(ad::logsumexp_rows(logits), positives));
}

double infonce_value(const DenseArray& queries, const DenseArray& targets, double temperature) {
    require_batch(queries, targets);
    const std::size_t b = queries.rows();
    double total = 0.0;
    std::vector<double> row(b);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
            row[j] = temperature * dot(queries.row(i), targets.row(j));
        }
        const double m = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double x : row) {
            s += std::exp(x - m);
        }
        total += m + std::log(s) - row[i];
    }
    return total / static_cast<double>(b);
}

Var temperature_node(Tape& tape, ParameterStore& store, const LossConfig& cfg) {
    if (cfg.learnable) {
        return ad::exp(tape.parameter(store, param::kLogTemp));
    }
    return tape.constant(DenseArray(1, 1, cfg.temperature));
}

} // namespace tmcir
