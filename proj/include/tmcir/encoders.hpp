#pragma once

// Trainable stand-ins for the visual and text encoders. A token is an affine
// mix of (embedding row + sinusoidal position); pooled features are the
// L2-normalized token mean.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "tmcir/diffcore.hpp"
#include "tmcir/synthetic_world.hpp"

namespace tmcir {

/// Row k, column 2i = sin(k / 10000^(2i/d)); column 2i+1 = cos of the same.
/// Throws ConfigError for odd d or n == 0.
DenseArray sinusoidal_positions(std::size_t n, std::size_t d);

struct EncoderShape {
    std::size_t d = 32;
    std::size_t n_shapes = 5;
    std::size_t n_colors = 6;
    std::size_t grid_cells = 16;
    std::size_t vocab_size = 22;
    std::size_t max_text_len = 8;

    static EncoderShape for_world(const WorldConfig& world, std::size_t d);
};

namespace param {
inline constexpr std::string_view kCellEmbedding = "visual.cell_embedding";
inline constexpr std::string_view kVisualMixWeight = "visual.mix.weight";
inline constexpr std::string_view kVisualMixBias = "visual.mix.bias";
inline constexpr std::string_view kVocabEmbedding = "text.vocab_embedding";
inline constexpr std::string_view kTextMixWeight = "text.mix.weight";
inline constexpr std::string_view kTextMixBias = "text.mix.bias";
inline constexpr std::string_view kLogTemp = "log_temp";
inline constexpr std::string_view kProjectionWeight = "fuse.projection.weight";
inline constexpr std::string_view kProjectionBias = "fuse.projection.bias";
} // namespace param

/// Adds both encoders to `store`: tables uniform(-0.1, 0.1), mix weights
/// identity + uniform(-0.01, 0.01), zero biases.
void init_encoders(ParameterStore& store, const EncoderShape& shape, std::uint64_t seed);

struct TokenSequence {
    Var tokens;
    /// Fixed, untracked.
    DenseArray positions;
    std::size_t length() const { return positions.rows(); }
};

/// Encoder bound to a store; encodings live on the caller's tape.
class Encoders {
public:
    Encoders(ParameterStore& store, const EncoderShape& shape);

    const EncoderShape& shape() const noexcept { return shape_; }
    const DenseArray& image_positions() const noexcept { return img_pos_; }
    const DenseArray& text_positions() const noexcept { return txt_pos_; }

    /// One token per cell, row-major. Throws EncodingError naming the cell.
    TokenSequence encode_visual(Tape& tape, const AttributeGrid& grid) const;
    /// One token per id. Throws EncodingError naming the offset.
    TokenSequence encode_text(Tape& tape, std::span<const int> ids) const;

    /// Pooled image feature (1 x d, unit norm).
    Var pooled_visual(Tape& tape, const AttributeGrid& grid) const;
    Var pooled_text(Tape& tape, std::span<const int> ids) const;

private:
    ParameterStore& store_;
    EncoderShape shape_;
    DenseArray img_pos_;
    DenseArray txt_pos_;
};

/// Mean of the token rows, L2-normalized.
Var pooled_feature(const TokenSequence& seq);

/// Row index of a cell in the visual embedding table.
inline std::size_t attribute_index(const Cell& c, std::size_t n_colors) {
    return static_cast<std::size_t>(c.shape) * n_colors + static_cast<std::size_t>(c.color);
}

/// x W^T + b with W, b bound from `store` on `tape`.
Var affine(Tape& tape, ParameterStore& store, Var x, std::string_view weight, std::string_view bias);

} // namespace tmcir
