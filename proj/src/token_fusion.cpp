#include "tmcir/token_fusion.hpp"

#include <algorithm>
#include <string>

#include "tmcir/errors.hpp"
#include "tmcir/rng.hpp"

namespace tmcir {

void FusionConfig::validate() const {
    if (!(threshold > 0.0)) {
        throw ConfigError("config: fusion.threshold must be positive");
    }
    if (!(epsilon > 0.0)) {
        throw ConfigError("config: fusion.epsilon must be positive");
    }
    if (dim == 0 || dim % 2 != 0) {
        throw ConfigError("config: fusion.dim must be even and positive");
    }
}

namespace {

void require_nonzero_rows(const DenseArray& x, const char* modality) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
        if (l2_norm(x.row(r)) <= kNormFloor) {
            throw DegenerateInputError(std::string(modality) + " token " + std::to_string(r) +
                                       " has norm below 1e-12");
        }
    }
}

void require_tokens(const DenseArray& visual, const DenseArray& text) {
    if (visual.rows() == 0 || text.rows() == 0) {
        throw EmptyInputError("fusion needs at least one visual and one text token");
    }
    if (visual.cols() != text.cols()) {
        throw ShapeError("visual tokens " + visual.shape_string() + " and text tokens " + text.shape_string() +
                         " differ in width");
    }
    require_nonzero_rows(visual, "visual");
    require_nonzero_rows(text, "text");
}

} // namespace

DenseArray similarity_matrix(const DenseArray& visual, const DenseArray& text) {
    require_tokens(visual, text);
    DenseArray s(visual.rows(), text.rows());
    for (std::size_t i = 0; i < visual.rows(); ++i) {
        for (std::size_t j = 0; j < text.rows(); ++j) {
            s(i, j) = cosine(visual.row(i), text.row(j));
        }
    }
    return s;
}

MatchSet match_pairs(const DenseArray& similarity, double threshold) {
    MatchSet m;
    std::vector<bool> vis(similarity.rows(), false);
    std::vector<bool> txt(similarity.cols(), false);
    for (std::size_t i = 0; i < similarity.rows(); ++i) {
        for (std::size_t j = 0; j < similarity.cols(); ++j) {
            if (similarity(i, j) > threshold) {
                m.pairs.emplace_back(i, j);
                vis[i] = true;
                txt[j] = true;
            }
        }
    }
    for (std::size_t i = 0; i < vis.size(); ++i) {
        (vis[i] ? m.matched_visual : m.unmatched_visual).push_back(i);
    }
    for (std::size_t j = 0; j < txt.size(); ++j) {
        (txt[j] ? m.matched_text : m.unmatched_text).push_back(j);
    }
    return m;
}

std::vector<double> fuse_pair(std::span<const double> v, std::span<const double> t, double s,
                              std::span<const double> p_img, std::span<const double> p_txt,
                              const FusionConfig& cfg) {
    if (!(s > 0.0)) {
        throw ContractViolation("fuse_pair needs a positive similarity, got " + std::to_string(s));
    }
    const std::size_t d = v.size();
    if (t.size() != d || p_img.size() != d || p_txt.size() != d) {
        throw ShapeError("fuse_pair operands differ in width");
    }
    std::vector<double> f(d);
    for (std::size_t k = 0; k < d; ++k) {
        f[k] = (s * v[k] + s * t[k]) / (2.0 * s + cfg.epsilon) + 0.5 * (p_img[k] + p_txt[k]);
    }
    return f;
}

std::vector<double> residual_token(std::span<const double> token, std::span<const double> pos) {
    if (token.size() != pos.size()) {
        throw ShapeError("residual_token: token width " + std::to_string(token.size()) + " vs position width " +
                         std::to_string(pos.size()));
    }
    std::vector<double> r(token.size());
    for (std::size_t k = 0; k < r.size(); ++k) {
        r[k] = token[k] + 0.5 * pos[k];
    }
    return r;
}

DenseArray assemble(const DenseArray& visual, const DenseArray& text, const DenseArray& img_pos,
                    const DenseArray& txt_pos, const DenseArray& similarity, const MatchSet& matches,
                    const FusionConfig& cfg) {
    if (!visual.same_shape(img_pos) || !text.same_shape(txt_pos)) {
        throw ShapeError("tokens and positions differ in shape");
    }
    DenseArray z(matches.fused_length(), visual.cols());
    std::size_t r = 0;
    auto put = [&](const std::vector<double>& row) {
        std::copy(row.begin(), row.end(), z.row(r++).begin());
    };
    for (auto [i, j] : matches.pairs) {
        put(fuse_pair(visual.row(i), text.row(j), similarity(i, j), img_pos.row(i), txt_pos.row(j), cfg));
    }
    for (std::size_t i : matches.unmatched_visual) {
        put(residual_token(visual.row(i), img_pos.row(i)));
    }
    for (std::size_t j : matches.unmatched_text) {
        put(residual_token(text.row(j), txt_pos.row(j)));
    }
    return z;
}

void init_projection(ParameterStore& store, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    DenseArray w(d, d);
    for (double& x : w.data()) {
        x = rng.uniform(-0.01, 0.01);
    }
    for (std::size_t i = 0; i < d; ++i) {
        w(i, i) += 1.0;
    }
    store.add(std::string(param::kProjectionWeight), std::move(w));
    store.add(std::string(param::kProjectionBias), DenseArray(1, d));
}

namespace {

DenseArray half_rows(const DenseArray& pos, std::span<const std::size_t> idx) {
    DenseArray out(idx.size(), pos.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t k = 0; k < pos.cols(); ++k) {
            out(r, k) = 0.5 * pos(idx[r], k);
        }
    }
    return out;
}

} // namespace

Var assemble(Tape& tape, const TokenSequence& visual, const TokenSequence& text, const FusionConfig& cfg,
             MatchSet* matches_out) {
    const DenseArray& v = visual.tokens.value();
    const DenseArray& t = text.tokens.value();
    if (!v.same_shape(visual.positions) || !t.same_shape(text.positions)) {
        throw ShapeError("tokens and positions differ in shape");
    }
    // Matching reads plain values; the decision is a constant of this pass.
    MatchSet m = match_pairs(similarity_matrix(v, t), cfg.threshold);

    std::vector<Var> parts;
    if (!m.pairs.empty()) {
        Var s = ad::matmul_nt(ad::l2_normalize_rows(visual.tokens), ad::l2_normalize_rows(text.tokens));
        for (auto [i, j] : m.pairs) {
            Var sij = ad::element(s, i, j);
            Var num = ad::add(ad::mul_scalar(ad::row(visual.tokens, i), sij),
                              ad::mul_scalar(ad::row(text.tokens, j), sij));
            Var den = ad::add_const(ad::scale(sij, 2.0), cfg.epsilon);
            DenseArray pos(1, v.cols());
            for (std::size_t k = 0; k < v.cols(); ++k) {
                pos(0, k) = 0.5 * (visual.positions(i, k) + text.positions(j, k));
            }
            parts.push_back(ad::add(ad::div_scalar(num, den), tape.constant(std::move(pos))));
        }
    }
    if (!m.unmatched_visual.empty()) {
        parts.push_back(ad::add(ad::gather_rows(visual.tokens, m.unmatched_visual),
                                tape.constant(half_rows(visual.positions, m.unmatched_visual))));
    }
    if (!m.unmatched_text.empty()) {
        parts.push_back(ad::add(ad::gather_rows(text.tokens, m.unmatched_text),
                                tape.constant(half_rows(text.positions, m.unmatched_text))));
    }
    if (matches_out != nullptr) {
        *matches_out = std::move(m);
    }
    return ad::concat_rows(parts);
}

Var pool_and_project(Tape& tape, ParameterStore& store, Var z) {
    Var pooled = ad::mean_rows(z);
    return ad::l2_normalize_rows(affine(tape, store, pooled, param::kProjectionWeight, param::kProjectionBias));
}

Var compose_query(Tape& tape, ParameterStore& store, const TokenSequence& visual, const TokenSequence& text,
                  const FusionConfig& cfg, MatchSet* matches_out) {
    return pool_and_project(tape, store, assemble(tape, visual, text, cfg, matches_out));
}

Var compose_query_no_fusion(Tape& tape, ParameterStore& store, const TokenSequence& visual,
                            const TokenSequence& text) {
    const Var both[] = {visual.tokens, text.tokens};
    return pool_and_project(tape, store, ad::concat_rows(both));
}

} // namespace tmcir
