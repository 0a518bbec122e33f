#pragma once

// Adaptive token fusion: cross-modal cosine matrix, strict threshold
// matching, similarity-weighted pair fusion with positional residuals, and
// the pooled, projected query embedding.

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tmcir/diffcore.hpp"
#include "tmcir/encoders.hpp"

namespace tmcir {

struct FusionConfig {
    double threshold = 0.7;
    double epsilon = 1e-8;
    std::size_t dim = 32;

    /// threshold > 0 and epsilon > 0. A threshold at or above 1 is allowed
    /// and yields the no-match path.
    void validate() const;
    friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

struct MatchSet {
    /// Lexicographic by (visual, text).
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    /// Ascending.
    std::vector<std::size_t> matched_visual;
    std::vector<std::size_t> matched_text;
    std::vector<std::size_t> unmatched_visual;
    std::vector<std::size_t> unmatched_text;

    /// |pairs| + unmatched visual + unmatched text.
    std::size_t fused_length() const {
        return pairs.size() + unmatched_visual.size() + unmatched_text.size();
    }
    friend bool operator==(const MatchSet&, const MatchSet&) = default;
};

/// S[i][j] = cosine(v_i, t_j). Throws DegenerateInputError naming the
/// modality and row of a zero-norm token, ShapeError on a width mismatch.
DenseArray similarity_matrix(const DenseArray& visual, const DenseArray& text);

/// Every (i, j) with S[i][j] > threshold; a token is unmatched iff it is in no pair.
MatchSet match_pairs(const DenseArray& similarity, double threshold);

/// (s v + s t) / (2 s + eps) + 0.5 (p_img + p_txt). Throws ContractViolation for s <= 0.
std::vector<double> fuse_pair(std::span<const double> v, std::span<const double> t, double s,
                              std::span<const double> p_img, std::span<const double> p_txt,
                              const FusionConfig& cfg);

/// token + 0.5 pos.
std::vector<double> residual_token(std::span<const double> token, std::span<const double> pos);

/// Value-level Z: fused pairs, then unmatched visual, then unmatched text residuals.
DenseArray assemble(const DenseArray& visual, const DenseArray& text, const DenseArray& img_pos,
                    const DenseArray& txt_pos, const DenseArray& similarity, const MatchSet& matches,
                    const FusionConfig& cfg);

/// Adds fuse.projection.{weight,bias}: identity + uniform(-0.01, 0.01), zero bias.
void init_projection(ParameterStore& store, std::size_t d, std::uint64_t seed);

/// Differentiable Z. Matching is decided on the current values and held
/// constant; gradients reach tokens and the matched similarities.
Var assemble(Tape& tape, const TokenSequence& visual, const TokenSequence& text, const FusionConfig& cfg,
             MatchSet* matches_out = nullptr);

/// normalize(projection(mean_rows(z))).
Var pool_and_project(Tape& tape, ParameterStore& store, Var z);

/// The fused query embedding V_Q (1 x d, unit norm).
Var compose_query(Tape& tape, ParameterStore& store, const TokenSequence& visual, const TokenSequence& text,
                  const FusionConfig& cfg, MatchSet* matches_out = nullptr);

/// Baseline without fusion: normalize(projection(mean of [V; T])).
Var compose_query_no_fusion(Tape& tape, ParameterStore& store, const TokenSequence& visual,
                            const TokenSequence& text);

} // namespace tmcir
