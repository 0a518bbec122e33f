#pragma once

// Dense 2-D arrays of doubles and a tape that records operations on them for
// reverse-mode differentiation. Every differentiable operation used by the
// encoders, fusion module and losses lives here.

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tmcir {

/// Rows with Euclidean norm at or below this are rejected by normalizing ops.
inline constexpr double kNormFloor = 1e-12;

class DenseArray {
public:
    DenseArray() = default;
    DenseArray(std::size_t rows, std::size_t cols, double fill = 0.0);
    DenseArray(std::size_t rows, std::size_t cols, std::vector<double> data);

    static DenseArray from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static DenseArray row_vector(std::span<const double> values);
    static DenseArray identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool same_shape(const DenseArray& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }
    std::string shape_string() const;
    bool all_finite() const noexcept;

    friend bool operator==(const DenseArray&, const DenseArray&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Value-level operations. Sums run in ascending index order.
DenseArray matmul(const DenseArray& a, const DenseArray& b);
DenseArray transpose(const DenseArray& a);
DenseArray l2_normalize_rows(const DenseArray& x);
DenseArray mean_rows(const DenseArray& x);
double dot(std::span<const double> u, std::span<const double> v);
double l2_norm(std::span<const double> u);
double cosine(std::span<const double> u, std::span<const double> v);

/// Named trainable arrays with gradient slots, kept in insertion order.
class ParameterStore {
public:
    void add(std::string name, DenseArray value, bool decay = true);

    bool contains(std::string_view name) const;
    DenseArray& value(std::string_view name);
    const DenseArray& value(std::string_view name) const;
    DenseArray& grad(std::string_view name);
    const DenseArray& grad(std::string_view name) const;
    /// Whether weight decay applies to this parameter.
    bool decays(std::string_view name) const;

    const std::vector<std::string>& names() const noexcept { return names_; }
    std::size_t size() const noexcept { return names_.size(); }
    std::size_t coordinate_count() const;
    void zero_grad();

    friend bool operator==(const ParameterStore& a, const ParameterStore& b);

private:
    struct Entry {
        DenseArray value;
        DenseArray grad;
        bool decay = true;
    };
    std::size_t index_of(std::string_view name) const;

    std::vector<std::string> names_;
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const DenseArray& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    /// Value of a 1x1 node.
    double scalar() const;
    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Records operations in creation order, which is always a topological order.
/// One tape per training step; tapes are not shared across threads.
class Tape {
public:
    using Backprop = std::function<void(Tape&, const DenseArray& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Untracked leaf. Never receives a gradient.
    Var constant(DenseArray value);
    /// Tracked leaf whose gradient can be read back with grad().
    Var variable(DenseArray value);
    /// Tracked leaf bound to a store entry; backward() adds its gradient into
    /// store.grad(name). Binding the same name twice returns the same node.
    Var parameter(ParameterStore& store, std::string_view name);

    /// Appends an operation node. `backprop` runs only if some input is tracked.
    Var record(DenseArray value, bool requires_grad, Backprop backprop);

    void backward(Var loss);

    const DenseArray& value(Var v) const;
    bool requires_grad(Var v) const;
    /// Gradient after backward(); nullptr when the node received none.
    const DenseArray* grad(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Adds `contribution` into the gradient of node `id` if it is tracked.
    void accumulate(std::size_t id, const DenseArray& contribution);
    /// Gradient slot of node `id`, allocated on first use.
    DenseArray& grad_slot(std::size_t id);

private:
    struct Node {
        DenseArray value;
        DenseArray grad;
        bool has_grad = false;
        bool requires_grad = false;
        Backprop backprop;
    };
    struct Binding {
        ParameterStore* store;
        std::string name;
        std::size_t node;
    };

    void check_owner(Var v) const;

    std::deque<Node> nodes_;
    std::vector<Binding> bindings_;
    bool backward_done_ = false;
};

/// Differentiable operations. All operands must live on the same tape.
namespace ad {

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);
Var add_const(Var a, double offset);
/// Adds a 1 x cols row to every row of `a`.
Var add_row(Var a, Var row);
/// Multiplies every entry of `a` by the 1x1 node `s`.
Var mul_scalar(Var a, Var s);
/// Divides every entry of `a` by the 1x1 node `s`.
Var div_scalar(Var a, Var s);
Var gather_rows(Var a, std::span<const std::size_t> indices);
Var row(Var a, std::size_t i);
Var element(Var a, std::size_t i, std::size_t j);
Var concat_rows(std::span<const Var> parts);
Var l2_normalize_rows(Var x);
Var mean_rows(Var x);
Var cosine(Var u, Var v);
Var exp(Var a);
Var log(Var a);
/// Row-wise log-sum-exp with max subtraction; returns rows x 1.
Var logsumexp_rows(Var a);
/// Diagonal of a square array as n x 1.
Var diagonal(Var a);
Var sum_all(Var a);
Var mean_all(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double f) { return scale(a, f); }
inline Var operator*(double f, Var a) { return scale(a, f); }

} // namespace ad

struct FdOptions {
    double step = 1e-3;
    double tolerance = 1e-4;
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is zero compare on an absolute scale.
    double abs_floor = 1e-7;
    /// Restrict the check to these parameters; empty means all.
    std::vector<std::string> only;
};

struct FdEntry {
    std::string parameter;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct FdReport {
    std::vector<FdEntry> entries;
    double max_rel_error = 0.0;
    std::size_t worst = 0;
    bool passed = true;
};

using LossBuilder = std::function<Var(Tape&, ParameterStore&)>;

/// Compares the tape gradient of `loss` with central differences
/// (f(p+h) - f(p-h)) / 2h, coordinate by coordinate. Restores every
/// parameter value before returning. Leaves analytic gradients in `params`.
FdReport fd_check(ParameterStore& params, const LossBuilder& loss, const FdOptions& options = {});

} // namespace tmcir
