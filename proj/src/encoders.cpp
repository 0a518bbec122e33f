#include "tmcir/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "tmcir/errors.hpp"
#include "tmcir/rng.hpp"

namespace tmcir {

DenseArray sinusoidal_positions(std::size_t n, std::size_t d) {
    if (d == 0 || d % 2 != 0) {
        throw ConfigError("config: positional dimension must be even and positive, got " + std::to_string(d));
    }
    if (n == 0) {
        throw ConfigError("config: positional table needs at least one row");
    }
    DenseArray p(n, d);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double w = static_cast<double>(k) /
                             std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
            p(k, 2 * i) = std::sin(w);
            p(k, 2 * i + 1) = std::cos(w);
        }
    }
    return p;
}

EncoderShape EncoderShape::for_world(const WorldConfig& world, std::size_t d) {
    EncoderShape s;
    s.d = d;
    s.n_shapes = world.n_shapes;
    s.n_colors = world.n_colors;
    s.grid_cells = world.cells();
    s.vocab_size = Vocabulary(world).size();
    s.max_text_len = 8;
    return s;
}

namespace {

DenseArray uniform_array(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
    DenseArray a(rows, cols);
    for (double& x : a.data()) {
        x = rng.uniform(lo, hi);
    }
    return a;
}

DenseArray near_identity(Rng& rng, std::size_t d) {
    DenseArray w = uniform_array(rng, d, d, -0.01, 0.01);
    for (std::size_t i = 0; i < d; ++i) {
        w(i, i) += 1.0;
    }
    return w;
}

} // namespace

void init_encoders(ParameterStore& store, const EncoderShape& shape, std::uint64_t seed) {
    if (shape.d == 0 || shape.d % 2 != 0) {
        throw ConfigError("config: fusion.dim must be even and positive, got " + std::to_string(shape.d));
    }
    Rng rng(seed);
    store.add(std::string(param::kCellEmbedding),
              uniform_array(rng, shape.n_shapes * shape.n_colors, shape.d, -0.1, 0.1));
    store.add(std::string(param::kVisualMixWeight), near_identity(rng, shape.d));
    store.add(std::string(param::kVisualMixBias), DenseArray(1, shape.d));
    store.add(std::string(param::kVocabEmbedding), uniform_array(rng, shape.vocab_size, shape.d, -0.1, 0.1));
    store.add(std::string(param::kTextMixWeight), near_identity(rng, shape.d));
    store.add(std::string(param::kTextMixBias), DenseArray(1, shape.d));
}

Var affine(Tape& tape, ParameterStore& store, Var x, std::string_view weight, std::string_view bias) {
    return ad::add_row(ad::matmul_nt(x, tape.parameter(store, weight)), tape.parameter(store, bias));
}

Encoders::Encoders(ParameterStore& store, const EncoderShape& shape)
    : store_(store), shape_(shape), img_pos_(sinusoidal_positions(shape.grid_cells, shape.d)),
      txt_pos_(sinusoidal_positions(shape.max_text_len, shape.d)) {}

TokenSequence Encoders::encode_visual(Tape& tape, const AttributeGrid& grid) const {
    if (grid.size() != shape_.grid_cells) {
        throw EncodingError("grid has " + std::to_string(grid.size()) + " cells, encoder expects " +
                            std::to_string(shape_.grid_cells));
    }
    std::vector<std::size_t> idx(grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const Cell& c = grid.cells[k];
        if (c.shape < 0 || static_cast<std::size_t>(c.shape) >= shape_.n_shapes || c.color < 0 ||
            static_cast<std::size_t>(c.color) >= shape_.n_colors) {
            throw EncodingError("cell " + std::to_string(k) + " has attributes outside the embedding table");
        }
        idx[k] = attribute_index(c, shape_.n_colors);
    }
    Var rows = ad::gather_rows(tape.parameter(store_, param::kCellEmbedding), idx);
    Var x = ad::add(rows, tape.constant(img_pos_));
    return {affine(tape, store_, x, param::kVisualMixWeight, param::kVisualMixBias), img_pos_};
}

TokenSequence Encoders::encode_text(Tape& tape, std::span<const int> ids) const {
    if (ids.empty()) {
        throw EncodingError("empty instruction");
    }
    if (ids.size() > shape_.max_text_len) {
        throw EncodingError("instruction of " + std::to_string(ids.size()) + " tokens exceeds max length " +
                            std::to_string(shape_.max_text_len));
    }
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t j = 0; j < ids.size(); ++j) {
        if (ids[j] < 0 || static_cast<std::size_t>(ids[j]) >= shape_.vocab_size) {
            throw EncodingError("token id " + std::to_string(ids[j]) + " at offset " + std::to_string(j) +
                                " outside the vocabulary");
        }
        idx[j] = static_cast<std::size_t>(ids[j]);
    }
    DenseArray pos(ids.size(), shape_.d);
    for (std::size_t j = 0; j < ids.size(); ++j) {
        auto src = txt_pos_.row(j);
        std::copy(src.begin(), src.end(), pos.row(j).begin());
    }
    Var rows = ad::gather_rows(tape.parameter(store_, param::kVocabEmbedding), idx);
    Var x = ad::add(rows, tape.constant(pos));
    return {affine(tape, store_, x, param::kTextMixWeight, param::kTextMixBias), std::move(pos)};
}

Var pooled_feature(const TokenSequence& seq) {
    if (seq.length() == 0) {
        throw EmptyInputError("cannot pool an empty token sequence");
    }
    return ad::l2_normalize_rows(ad::mean_rows(seq.tokens));
}

Var Encoders::pooled_visual(Tape& tape, const AttributeGrid& grid) const {
    return pooled_feature(encode_visual(tape, grid));
}

Var Encoders::pooled_text(Tape& tape, std::span<const int> ids) const {
    return pooled_feature(encode_text(tape, ids));
}

} // namespace tmcir
