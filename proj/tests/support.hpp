#pragma once

// Shared helpers for the test binaries.

#include <cmath>
#include <cstdint>
#include <vector>

#include "tmcir/config.hpp"
#include "tmcir/diffcore.hpp"
#include "tmcir/rng.hpp"

namespace tmcir::testing {

inline DenseArray random_array(Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0, double hi = 1.0) {
    DenseArray a(rows, cols);
    for (double& x : a.data()) {
        x = rng.uniform(lo, hi);
    }
    return a;
}

inline DenseArray random_unit_rows(Rng& rng, std::size_t rows, std::size_t cols) {
    return l2_normalize_rows(random_array(rng, rows, cols));
}

inline double max_abs_diff(const DenseArray& a, const DenseArray& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

/// Central differences for composite graphs. At h = 1e-3 the h^2 truncation
/// term of a deep graph exceeds 1e-4 relative on small coordinates; 1e-4 keeps
/// rounding noise near 1e-12 while cutting truncation a hundredfold.
inline FdOptions composite_fd_options() {
    FdOptions o;
    o.step = 1e-4;
    o.tolerance = 1e-4;
    return o;
}

/// A small world that trains in well under a second.
inline RunConfig tiny_config(std::uint64_t seed = 3) {
    RunConfig cfg;
    cfg.data_seed = seed;
    cfg.train_seed = seed;
    cfg.world.height = 2;
    cfg.world.width = 2;
    cfg.world.n_shapes = 3;
    cfg.world.n_colors = 3;
    cfg.world.n_triplets = 80;
    cfg.world.subset_size = 4;
    cfg.align.epochs = 2;
    cfg.align.batch_size = 8;
    cfg.fuse.epochs = 2;
    cfg.fuse.batch_size = 8;
    cfg.fusion.dim = 8;
    return cfg;
}

} // namespace tmcir::testing
