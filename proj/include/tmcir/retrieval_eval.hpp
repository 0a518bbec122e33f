#pragma once

// Exhaustive ranking over a split's candidate gallery, Recall@K and subset
// recall, and the ablation runners.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tmcir/config.hpp"
#include "tmcir/diffcore.hpp"
#include "tmcir/synthetic_world.hpp"
#include "tmcir/training.hpp"

namespace tmcir {

struct CandidateIndex {
    /// |gallery| x d, unit rows.
    DenseArray embeddings;
    /// Candidate id per row, ascending.
    std::vector<std::size_t> ids;
    /// Grid -> row.
    std::map<AttributeGrid, std::size_t> rows_by_grid;

    std::size_t size() const noexcept { return ids.size(); }
    /// Row of `grid`, or nullopt when it is not in the gallery.
    std::optional<std::size_t> find(const AttributeGrid& grid) const;
};

/// Pooled features of `candidates` under `params`. Duplicate grids keep the
/// first id.
CandidateIndex build_index(std::span<const Candidate* const> candidates, ParameterStore& params,
                           const EncoderShape& shape);

/// Candidate rows sorted by descending dot product with the unit query; ties
/// go to the lower id. `exclude` rows are left out.
std::vector<std::size_t> rank_query(std::span<const double> query, const CandidateIndex& index,
                                    std::span<const std::size_t> exclude = {});

/// Fraction of queries whose truth sits in the top K. Throws EvaluationError
/// naming the query whose truth is absent from its ranking.
double recall_at_k(std::span<const std::vector<std::size_t>> rankings, std::span<const std::size_t> truths,
                   std::size_t k);

/// Recall@K after restricting each ranking to the query's subset.
double subset_recall_at_k(std::span<const std::vector<std::size_t>> rankings,
                          std::span<const std::vector<std::size_t>> subsets, std::span<const std::size_t> truths,
                          std::size_t k);

struct EvalReport {
    nlohmann::ordered_json config;
    std::uint64_t seed = 0;
    std::map<std::size_t, double> recall;
    std::map<std::size_t, double> subset_recall;
    std::optional<double> wall_ms;
    std::size_t queries = 0;
    std::size_t gallery = 0;

    /// {"config","seed","recall","subset_recall"} plus "wall_ms" when timed.
    nlohmann::ordered_json to_json() const;
};

/// Query embedding for one triplet (fused or no-fusion path per cfg.fuse).
DenseArray query_embedding(ParameterStore& params, const EncoderShape& shape, const TripletSample& t,
                           const RunConfig& cfg);

/// Threads used by evaluation: TMCIR_THREADS if set and positive, else all cores.
std::size_t eval_threads();

/// Ranks every query of cfg.eval.split over that split's gallery. The query's
/// own reference is excluded from its ranking.
EvalReport evaluate(const Dataset& data, ParameterStore& params, const RunConfig& cfg);

enum class AblationKind { ThresholdSweep, NoFusion, PseudoVsReal, PretrainedVsFinetuned };

std::string_view ablation_name(AblationKind k);
/// Throws ConfigError for unknown names.
AblationKind parse_ablation(std::string_view name);

inline constexpr double kSweepThresholds[] = {0.5, 0.6, 0.7, 0.8, 0.9};

struct AblationVariant {
    std::string name;
    RunConfig config;
    /// Stage-2 starts from a fresh initialization instead of stage 1.
    bool from_scratch = false;
};

/// Variants in output order; every variant shares seeds with the base.
std::vector<AblationVariant> ablation_variants(AblationKind kind, const RunConfig& base);

struct AblationOutcome {
    AblationVariant variant;
    std::optional<EvalReport> report;
    std::string error;
};

/// Trains and evaluates each variant; a failing variant records its error
/// and the rest continue. Stage-1 results are shared between variants with
/// identical stage-1 settings.
std::vector<AblationOutcome> run_ablation(AblationKind kind, const RunConfig& base, const Dataset& data,
                                          const std::function<void(const std::string&)>& progress = {});

/// variant,tau,R@1,R@5,R@10,R@50,Rs@1,Rs@2,Rs@3 with one row per successful variant.
std::string ablation_csv(std::span<const AblationOutcome> outcomes);

} // namespace tmcir
