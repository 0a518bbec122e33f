#include "tmcir/diffcore.hpp"

#include <algorithm>
#include <cmath>

#include "tmcir/errors.hpp"

namespace tmcir {

// ---------------------------------------------------------------------------
// DenseArray

DenseArray::DenseArray(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

DenseArray::DenseArray(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string());
    }
}

DenseArray DenseArray::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("ragged row list");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return DenseArray(r, c, std::move(data));
}

DenseArray DenseArray::row_vector(std::span<const double> values) {
    return DenseArray(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

DenseArray DenseArray::identity(std::size_t n) {
    DenseArray out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        out(i, i) = 1.0;
    }
    return out;
}

std::string DenseArray::shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool DenseArray::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Value-level operations

DenseArray matmul(const DenseArray& a, const DenseArray& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul shape mismatch: " + a.shape_string() + " x " + b.shape_string());
    }
    DenseArray out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    return out;
}

DenseArray transpose(const DenseArray& a) {
    DenseArray out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ShapeError("dot length mismatch: " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        s += u[i] * v[i];
    }
    return s;
}

double l2_norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

DenseArray l2_normalize_rows(const DenseArray& x) {
    DenseArray out = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double n = l2_norm(x.row(r));
        if (!(n > kNormFloor)) {
            throw DegenerateInputError("cannot normalize row " + std::to_string(r) +
                                       ": norm below 1e-12");
        }
        for (double& v : out.row(r)) {
            v /= n;
        }
    }
    return out;
}

DenseArray mean_rows(const DenseArray& x) {
    if (x.rows() == 0) {
        throw EmptyInputError("mean of an empty sequence");
    }
    DenseArray out(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            out(0, c) += x(r, c);
        }
    }
    const double inv = 1.0 / static_cast<double>(x.rows());
    for (double& v : out.data()) {
        v *= inv;
    }
    return out;
}

double cosine(std::span<const double> u, std::span<const double> v) {
    const double nu = l2_norm(u);
    const double nv = l2_norm(v);
    if (!(nu > kNormFloor) || !(nv > kNormFloor)) {
        throw DegenerateInputError("cosine of a zero-norm vector");
    }
    const double c = dot(u, v) / (nu * nv);
    return std::clamp(c, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// ParameterStore

void ParameterStore::add(std::string name, DenseArray value, bool decay) {
    if (index_.contains(name)) {
        throw ConfigError("duplicate parameter name: " + name);
    }
    DenseArray grad(value.rows(), value.cols());
    index_.emplace(name, entries_.size());
    names_.push_back(std::move(name));
    entries_.push_back(Entry{std::move(value), std::move(grad), decay});
}

std::size_t ParameterStore::index_of(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ShapeError("unknown parameter: " + std::string(name));
    }
    return it->second;
}

bool ParameterStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }
DenseArray& ParameterStore::value(std::string_view name) { return entries_[index_of(name)].value; }
const DenseArray& ParameterStore::value(std::string_view name) const {
    return entries_[index_of(name)].value;
}
DenseArray& ParameterStore::grad(std::string_view name) { return entries_[index_of(name)].grad; }
const DenseArray& ParameterStore::grad(std::string_view name) const {
    return entries_[index_of(name)].grad;
}
bool ParameterStore::decays(std::string_view name) const { return entries_[index_of(name)].decay; }

std::size_t ParameterStore::coordinate_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        n += e.value.size();
    }
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& e : entries_) {
        std::fill(e.grad.data().begin(), e.grad.data().end(), 0.0);
    }
}

bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.names_ != b.names_) {
        return false;
    }
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
        if (a.entries_[i].value != b.entries_[i].value || a.entries_[i].decay != b.entries_[i].decay) {
            return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------------------
// Tape

const DenseArray& Var::value() const {
    if (tape_ == nullptr) {
        throw ContractViolation("use of an unbound Var");
    }
    return tape_->value(*this);
}

double Var::scalar() const {
    const DenseArray& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
        throw ShapeError("expected a 1x1 value, got " + v.shape_string());
    }
    return v[0];
}

Var Tape::constant(DenseArray value) { return record(std::move(value), false, nullptr); }

Var Tape::variable(DenseArray value) { return record(std::move(value), true, nullptr); }

Var Tape::parameter(ParameterStore& store, std::string_view name) {
    for (const auto& b : bindings_) {
        if (b.store == &store && b.name == name) {
            return Var(this, b.node);
        }
    }
    Var v = variable(store.value(name));
    bindings_.push_back(Binding{&store, std::string(name), v.id()});
    return v;
}

Var Tape::record(DenseArray value, bool requires_grad, Backprop backprop) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    if (requires_grad) {
        node.backprop = std::move(backprop);
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(Var v) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) {
        throw ContractViolation("Var does not belong to this tape");
    }
}

const DenseArray& Tape::value(Var v) const {
    check_owner(v);
    return nodes_[v.id_].value;
}

bool Tape::requires_grad(Var v) const {
    check_owner(v);
    return nodes_[v.id_].requires_grad;
}

const DenseArray* Tape::grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id_];
    return n.has_grad ? &n.grad : nullptr;
}

DenseArray& Tape::grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = DenseArray(n.value.rows(), n.value.cols());
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::accumulate(std::size_t id, const DenseArray& contribution) {
    Node& n = nodes_[id];
    if (!n.requires_grad) {
        return;
    }
    if (!n.has_grad) {
        n.grad = contribution;
        n.has_grad = true;
        return;
    }
    auto dst = n.grad.data();
    auto src = contribution.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

void Tape::backward(Var loss) {
    check_owner(loss);
    const DenseArray& lv = nodes_[loss.id_].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw ShapeError("backward needs a scalar loss, got " + lv.shape_string());
    }
    if (backward_done_) {
        throw ContractViolation("backward already ran on this tape");
    }
    backward_done_ = true;
    if (!nodes_[loss.id_].requires_grad) {
        return;
    }
    grad_slot(loss.id_)[0] = 1.0;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.has_grad && n.backprop) {
            n.backprop(*this, n.grad);
        }
    }
    for (const auto& b : bindings_) {
        const Node& n = nodes_[b.node];
        if (!n.has_grad) {
            continue;
        }
        auto dst = b.store->grad(b.name).data();
        auto src = n.grad.data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] += src[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiable operations

namespace ad {
namespace {

Tape& common_tape(Var a, Var b) {
    if (a.tape() == nullptr || a.tape() != b.tape()) {
        throw ContractViolation("operands live on different tapes");
    }
    return *a.tape();
}

Tape& tape_of(Var a) {
    if (a.tape() == nullptr) {
        throw ContractViolation("use of an unbound Var");
    }
    return *a.tape();
}

void require_same_shape(const DenseArray& a, const DenseArray& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + " shape mismatch: " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

void require_scalar(const DenseArray& s, const char* op) {
    if (s.rows() != 1 || s.cols() != 1) {
        throw ShapeError(std::string(op) + " expects a 1x1 factor, got " + s.shape_string());
    }
}

DenseArray matmul_nt_values(const DenseArray& a, const DenseArray& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt shape mismatch: " + a.shape_string() + " x " + b.shape_string() +
                         "^T");
    }
    DenseArray out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.rows(); ++j) {
            out(i, j) = dot(a.row(i), b.row(j));
        }
    }
    return out;
}

// grad^T * a, i.e. the gradient of b in a * b^T.
DenseArray matmul_tn_values(const DenseArray& g, const DenseArray& a) {
    DenseArray out(g.cols(), a.cols());
    for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t i = 0; i < g.cols(); ++i) {
            const double gri = g(r, i);
            if (gri == 0.0) {
                continue;
            }
            for (std::size_t c = 0; c < a.cols(); ++c) {
                out(i, c) += gri * a(r, c);
            }
        }
    }
    return out;
}

} // namespace

Var matmul(Var a, Var b) {
    Tape& t = common_tape(a, b);
    DenseArray out = tmcir::matmul(a.value(), b.value());
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape& tp, const DenseArray& g) {
        if (tp.requires_grad(a)) {
            tp.accumulate(a.id(), matmul_nt_values(g, b.value()));
        }
        if (tp.requires_grad(b)) {
            tp.accumulate(b.id(), matmul_tn_values(a.value(), g));
        }
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = common_tape(a, b);
    DenseArray out = matmul_nt_values(a.value(), b.value());
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape& tp, const DenseArray& g) {
        if (tp.requires_grad(a)) {
            tp.accumulate(a.id(), tmcir::matmul(g, b.value()));
        }
        if (tp.requires_grad(b)) {
            tp.accumulate(b.id(), matmul_tn_values(g, a.value()));
        }
    });
}

Var transpose(Var a) {
    Tape& t = tape_of(a);
    return t.record(tmcir::transpose(a.value()), t.requires_grad(a), [a](Tape& tp, const DenseArray& g) {
        tp.accumulate(a.id(), tmcir::transpose(g));
    });
}

Var add(Var a, Var b) {
    Tape& t = common_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    DenseArray out = a.value();
    auto dst = out.data();
    auto src = b.value().data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape& tp, const DenseArray& g) {
        tp.accumulate(a.id(), g);
        tp.accumulate(b.id(), g);
    });
}

Var sub(Var a, Var b) {
    Tape& t = common_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    DenseArray out = a.value();
    auto dst = out.data();
    auto src = b.value().data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] -= src[i];
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape& tp, const DenseArray& g) {
        tp.accumulate(a.id(), g);
        if (tp.requires_grad(b)) {
            DenseArray neg = g;
            for (double& v : neg.data()) {
                v = -v;
            }
            tp.accumulate(b.id(), neg);
        }
    });
}

Var scale(Var a, double factor) {
    Tape& t = tape_of(a);
    DenseArray out = a.value();
    for (double& v : out.data()) {
        v *= factor;
    }
    return t.record(std::move(out), t.requires_grad(a), [a, factor](Tape& tp, const DenseArray& g) {
        DenseArray ga = g;
        for (double& v : ga.data()) {
            v *= factor;
        }
        tp.accumulate(a.id(), ga);
    });
}

Var add_const(Var a, double offset) {
    Tape& t = tape_of(a);
    DenseArray out = a.value();
    for (double& v : out.data()) {
        v += offset;
    }
    return t.record(std::move(out), t.requires_grad(a),
                    [a](Tape& tp, const DenseArray& g) { tp.accumulate(a.id(), g); });
}

Var add_row(Var a, Var row) {
    Tape& t = common_tape(a, row);
    const DenseArray& av = a.value();
    const DenseArray& rv = row.value();
    if (rv.rows() != 1 || rv.cols() != av.cols()) {
        throw ShapeError("add_row shape mismatch: " + av.shape_string() + " + " + rv.shape_string());
    }
    DenseArray out = av;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < out.cols(); ++c) {
            out(r, c) += rv(0, c);
        }
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(row);
    return t.record(std::move(out), rg, [a, row](Tape& tp, const DenseArray& g) {
        tp.accumulate(a.id(), g);
        if (tp.requires_grad(row)) {
            DenseArray gr(1, g.cols());
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    gr(0, c) += g(r, c);
                }
            }
            tp.accumulate(row.id(), gr);
        }
    });
}

Var mul_scalar(Var a, Var s) {
    Tape& t = common_tape(a, s);
    require_scalar(s.value(), "mul_scalar");
    const double sv = s.value()[0];
    DenseArray out = a.value();
    for (double& v : out.data()) {
        v *= sv;
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(s);
    return t.record(std::move(out), rg, [a, s](Tape& tp, const DenseArray& g) {
        const double sv = s.value()[0];
        if (tp.requires_grad(a)) {
            DenseArray ga = g;
            for (double& v : ga.data()) {
                v *= sv;
            }
            tp.accumulate(a.id(), ga);
        }
        if (tp.requires_grad(s)) {
            DenseArray gs(1, 1, dot(g.data(), a.value().data()));
            tp.accumulate(s.id(), gs);
        }
    });
}

Var div_scalar(Var a, Var s) {
    Tape& t = common_tape(a, s);
    require_scalar(s.value(), "div_scalar");
    const double sv = s.value()[0];
    if (sv == 0.0) {
        throw DegenerateInputError("division by a zero scalar");
    }
    DenseArray out = a.value();
    for (double& v : out.data()) {
        v /= sv;
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(s);
    return t.record(std::move(out), rg, [a, s](Tape& tp, const DenseArray& g) {
        const double sv = s.value()[0];
        if (tp.requires_grad(a)) {
            DenseArray ga = g;
            for (double& v : ga.data()) {
                v /= sv;
            }
            tp.accumulate(a.id(), ga);
        }
        if (tp.requires_grad(s)) {
            DenseArray gs(1, 1, -dot(g.data(), a.value().data()) / (sv * sv));
            tp.accumulate(s.id(), gs);
        }
    });
}

Var gather_rows(Var a, std::span<const std::size_t> indices) {
    Tape& t = tape_of(a);
    const DenseArray& av = a.value();
    DenseArray out(indices.size(), av.cols());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= av.rows()) {
            throw ShapeError("gather_rows index " + std::to_string(indices[k]) + " out of range for " +
                             av.shape_string());
        }
        std::copy_n(av.row(indices[k]).begin(), av.cols(), out.row(k).begin());
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return t.record(std::move(out), t.requires_grad(a),
                    [a, idx = std::move(idx)](Tape& tp, const DenseArray& g) {
                        DenseArray& ga = tp.grad_slot(a.id());
                        for (std::size_t k = 0; k < idx.size(); ++k) {
                            auto dst = ga.row(idx[k]);
                            auto src = g.row(k);
                            for (std::size_t c = 0; c < dst.size(); ++c) {
                                dst[c] += src[c];
                            }
                        }
                    });
}

Var row(Var a, std::size_t i) {
    const std::size_t idx[] = {i};
    return gather_rows(a, idx);
}

Var element(Var a, std::size_t i, std::size_t j) {
    Tape& t = tape_of(a);
    const DenseArray& av = a.value();
    if (i >= av.rows() || j >= av.cols()) {
        throw ShapeError("element (" + std::to_string(i) + "," + std::to_string(j) +
                         ") out of range for " + av.shape_string());
    }
    return t.record(DenseArray(1, 1, av(i, j)), t.requires_grad(a),
                    [a, i, j](Tape& tp, const DenseArray& g) { tp.grad_slot(a.id())(i, j) += g[0]; });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        throw EmptyInputError("concat_rows of no parts");
    }
    Tape& t = tape_of(parts.front());
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    bool rg = false;
    for (const Var& p : parts) {
        if (p.tape() != &t) {
            throw ContractViolation("operands live on different tapes");
        }
        if (p.cols() != cols) {
            throw ShapeError("concat_rows column mismatch: " + std::to_string(cols) + " vs " +
                             std::to_string(p.cols()));
        }
        rows += p.rows();
        rg = rg || t.requires_grad(p);
    }
    DenseArray out(rows, cols);
    std::size_t r0 = 0;
    for (const Var& p : parts) {
        const DenseArray& pv = p.value();
        std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r0 * cols));
        r0 += pv.rows();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return t.record(std::move(out), rg, [ps = std::move(ps)](Tape& tp, const DenseArray& g) {
        std::size_t r0 = 0;
        for (const Var& p : ps) {
            const std::size_t n = p.rows();
            if (tp.requires_grad(p)) {
                DenseArray gp(n, g.cols());
                std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(r0 * g.cols()), n * g.cols(),
                            gp.data().begin());
                tp.accumulate(p.id(), gp);
            }
            r0 += n;
        }
    });
}

Var l2_normalize_rows(Var x) {
    Tape& t = tape_of(x);
    const DenseArray& xv = x.value();
    std::vector<double> norms(xv.rows());
    DenseArray out = xv;
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        const double n = l2_norm(xv.row(r));
        if (!(n > kNormFloor)) {
            throw DegenerateInputError("cannot normalize row " + std::to_string(r) +
                                       ": norm below 1e-12");
        }
        norms[r] = n;
        for (double& v : out.row(r)) {
            v /= n;
        }
    }
    // dx = (g - y (g . y)) / |x|
    return t.record(std::move(out), t.requires_grad(x),
                    [x, norms = std::move(norms)](Tape& tp, const DenseArray& g) {
                        const DenseArray& xv = x.value();
                        DenseArray gx(xv.rows(), xv.cols());
                        for (std::size_t r = 0; r < xv.rows(); ++r) {
                            const double n = norms[r];
                            double gy = 0.0;
                            for (std::size_t c = 0; c < xv.cols(); ++c) {
                                gy += g(r, c) * xv(r, c) / n;
                            }
                            for (std::size_t c = 0; c < xv.cols(); ++c) {
                                gx(r, c) = (g(r, c) - gy * xv(r, c) / n) / n;
                            }
                        }
                        tp.accumulate(x.id(), gx);
                    });
}

Var mean_rows(Var x) {
    Tape& t = tape_of(x);
    DenseArray out = tmcir::mean_rows(x.value());
    return t.record(std::move(out), t.requires_grad(x), [x](Tape& tp, const DenseArray& g) {
        const std::size_t n = x.rows();
        const double inv = 1.0 / static_cast<double>(n);
        DenseArray gx(n, g.cols());
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) {
                gx(r, c) = g(0, c) * inv;
            }
        }
        tp.accumulate(x.id(), gx);
    });
}

Var cosine(Var u, Var v) {
    Tape& t = common_tape(u, v);
    const DenseArray& uv = u.value();
    const DenseArray& vv = v.value();
    if (uv.rows() != 1 || !uv.same_shape(vv)) {
        throw ShapeError("cosine expects two rows of equal length, got " + uv.shape_string() + " and " +
                         vv.shape_string());
    }
    const double nu = l2_norm(uv.data());
    const double nv = l2_norm(vv.data());
    if (!(nu > kNormFloor) || !(nv > kNormFloor)) {
        throw DegenerateInputError("cosine of a zero-norm vector");
    }
    const double c = dot(uv.data(), vv.data()) / (nu * nv);
    const bool rg = t.requires_grad(u) || t.requires_grad(v);
    // d/du = v/(|u||v|) - c u/|u|^2, symmetric in v.
    return t.record(DenseArray(1, 1, c), rg, [u, v, nu, nv, c](Tape& tp, const DenseArray& g) {
        const DenseArray& uv = u.value();
        const DenseArray& vv = v.value();
        const double gs = g[0];
        if (tp.requires_grad(u)) {
            DenseArray gu(1, uv.cols());
            for (std::size_t k = 0; k < uv.cols(); ++k) {
                gu[k] = gs * (vv[k] / (nu * nv) - c * uv[k] / (nu * nu));
            }
            tp.accumulate(u.id(), gu);
        }
        if (tp.requires_grad(v)) {
            DenseArray gv(1, vv.cols());
            for (std::size_t k = 0; k < vv.cols(); ++k) {
                gv[k] = gs * (uv[k] / (nu * nv) - c * vv[k] / (nv * nv));
            }
            tp.accumulate(v.id(), gv);
        }
    });
}

Var exp(Var a) {
    Tape& t = tape_of(a);
    DenseArray out = a.value();
    for (double& v : out.data()) {
        v = std::exp(v);
    }
    DenseArray saved = out;
    return t.record(std::move(out), t.requires_grad(a),
                    [a, saved = std::move(saved)](Tape& tp, const DenseArray& g) {
                        DenseArray ga = g;
                        for (std::size_t i = 0; i < ga.size(); ++i) {
                            ga[i] *= saved[i];
                        }
                        tp.accumulate(a.id(), ga);
                    });
}

Var log(Var a) {
    Tape& t = tape_of(a);
    DenseArray out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(out[i] > 0.0)) {
            throw DegenerateInputError("log of a non-positive value at index " + std::to_string(i));
        }
        out[i] = std::log(out[i]);
    }
    return t.record(std::move(out), t.requires_grad(a), [a](Tape& tp, const DenseArray& g) {
        DenseArray ga = g;
        const DenseArray& av = a.value();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            ga[i] /= av[i];
        }
        tp.accumulate(a.id(), ga);
    });
}

Var logsumexp_rows(Var a) {
    Tape& t = tape_of(a);
    const DenseArray& av = a.value();
    if (av.cols() == 0) {
        throw EmptyInputError("logsumexp over an empty row");
    }
    DenseArray out(av.rows(), 1);
    DenseArray soft(av.rows(), av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r) {
        const auto row = av.row(r);
        const double m = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (std::size_t c = 0; c < av.cols(); ++c) {
            soft(r, c) = std::exp(row[c] - m);
            s += soft(r, c);
        }
        for (std::size_t c = 0; c < av.cols(); ++c) {
            soft(r, c) /= s;
        }
        out(r, 0) = m + std::log(s);
    }
    return t.record(std::move(out), t.requires_grad(a),
                    [a, soft = std::move(soft)](Tape& tp, const DenseArray& g) {
                        DenseArray ga = soft;
                        for (std::size_t r = 0; r < ga.rows(); ++r) {
                            for (double& v : ga.row(r)) {
                                v *= g(r, 0);
                            }
                        }
                        tp.accumulate(a.id(), ga);
                    });
}

Var diagonal(Var a) {
    Tape& t = tape_of(a);
    const DenseArray& av = a.value();
    if (av.rows() != av.cols()) {
        throw ShapeError("diagonal of a non-square array " + av.shape_string());
    }
    DenseArray out(av.rows(), 1);
    for (std::size_t i = 0; i < av.rows(); ++i) {
        out(i, 0) = av(i, i);
    }
    return t.record(std::move(out), t.requires_grad(a), [a](Tape& tp, const DenseArray& g) {
        DenseArray& ga = tp.grad_slot(a.id());
        for (std::size_t i = 0; i < g.rows(); ++i) {
            ga(i, i) += g(i, 0);
        }
    });
}

Var sum_all(Var a) {
    Tape& t = tape_of(a);
    double s = 0.0;
    for (double v : a.value().data()) {
        s += v;
    }
    return t.record(DenseArray(1, 1, s), t.requires_grad(a), [a](Tape& tp, const DenseArray& g) {
        tp.accumulate(a.id(), DenseArray(a.rows(), a.cols(), g[0]));
    });
}

Var mean_all(Var a) {
    const std::size_t n = a.value().size();
    if (n == 0) {
        throw EmptyInputError("mean of an empty array");
    }
    return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

} // namespace ad

// ---------------------------------------------------------------------------
// Finite-difference verification

namespace {

double evaluate(ParameterStore& params, const LossBuilder& loss) {
    Tape tape;
    Var l = loss(tape, params);
    return l.scalar();
}

} // namespace

FdReport fd_check(ParameterStore& params, const LossBuilder& loss, const FdOptions& options) {
    if (!(options.step >= 1e-5 && options.step <= 1e-2)) {
        throw ContractViolation("finite-difference step must lie in [1e-5, 1e-2]");
    }
    params.zero_grad();
    {
        Tape tape;
        Var l = loss(tape, params);
        if (!std::isfinite(l.scalar())) {
            throw EvaluationError("loss is not finite at the unperturbed point");
        }
        tape.backward(l);
    }

    FdReport report;
    const double h = options.step;
    for (const std::string& name : params.names()) {
        if (!options.only.empty() &&
            std::find(options.only.begin(), options.only.end(), name) == options.only.end()) {
            continue;
        }
        const std::size_t n = params.value(name).size();
        for (std::size_t i = 0; i < n; ++i) {
            const double saved = params.value(name)[i];
            params.value(name)[i] = saved + h;
            const double fp = evaluate(params, loss);
            params.value(name)[i] = saved - h;
            const double fm = evaluate(params, loss);
            params.value(name)[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw EvaluationError("loss is not finite when perturbing " + name + "[" +
                                      std::to_string(i) + "]");
            }
            FdEntry e;
            e.parameter = name;
            e.index = i;
            e.analytic = params.grad(name)[i];
            e.numeric = (fp - fm) / (2.0 * h);
            const double denom =
                std::max({std::abs(e.analytic), std::abs(e.numeric), options.abs_floor});
            e.rel_error = std::abs(e.analytic - e.numeric) / denom;
            if (e.rel_error > report.max_rel_error || report.entries.empty()) {
                report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
                report.worst = report.entries.size();
            }
            report.entries.push_back(std::move(e));
        }
    }
    report.passed = report.max_rel_error <= options.tolerance;
    return report;
}

} // namespace tmcir
