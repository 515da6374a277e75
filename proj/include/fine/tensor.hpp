#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fine/errors.hpp"

namespace fine {

class Tape;

std::string shape_str(const std::vector<int>& shape);

// Attention-stage attribution for multiply-accumulate accounting.
enum class AttnStage { none = 0, w_msa = 1, g_msa = 2, global_msa = 3 };
enum class MacKind { other = 0, projection = 1, attention = 2 };

struct MacCounts {
    long long projection = 0;
    long long attention = 0;
    long long other = 0;
    long long total() const { return projection + attention + other; }
};

// Per-pass multiply-accumulate counter. Attach one to a Tape before a
// forward pass; matmul reports m*k*n into the active (stage, kind) slot.
class FlopCounter {
public:
    void add(AttnStage stage, MacKind kind, long long macs) {
        MacCounts& c = per_stage_[static_cast<int>(stage)];
        switch (kind) {
            case MacKind::projection: c.projection += macs; break;
            case MacKind::attention: c.attention += macs; break;
            case MacKind::other: c.other += macs; break;
        }
    }
    const MacCounts& stage(AttnStage s) const { return per_stage_[static_cast<int>(s)]; }
    MacCounts summed() const {
        MacCounts t;
        for (const MacCounts& c : per_stage_) {
            t.projection += c.projection;
            t.attention += c.attention;
            t.other += c.other;
        }
        return t;
    }

private:
    MacCounts per_stage_[4];
};

// Dense row-major double tensor. Copies are shallow (storage is shared);
// every op allocates fresh storage for its result. A tensor is either a
// plain value (tape() == nullptr) or a handle to a node on a gradient tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> values);
    static Tensor scalar(double v) { return from({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const;

    // 2D conveniences (most of the attention math is on [rows, cols]).
    int rows() const { return shape_[0]; }
    int cols() const { return shape_[1]; }

    double* data() { return storage_->data(); }
    const double* data() const { return storage_->data(); }
    double at(std::size_t i) const { return (*storage_)[i]; }
    double at2(int r, int c) const { return (*storage_)[static_cast<std::size_t>(r) * shape_[1] + c]; }

    const std::shared_ptr<std::vector<double>>& storage() const { return storage_; }

    bool defined() const { return storage_ != nullptr; }
    bool on_tape() const { return tape_ != nullptr; }
    bool requires_grad() const { return on_tape(); }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    // Deep copy of the values as a plain (tape-free) tensor.
    Tensor detached_copy() const;

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> storage_;
    Tape* tape_ = nullptr;
    int node_ = -1;

    friend class Tape;
};

// Reverse-mode gradient tape. Nodes are recorded in execution order, which
// is a topological order of the dynamic graph; backward visits them once in
// reverse. One tape per forward pass; backward may run once per tape.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Register a leaf whose gradient will be tracked. Shares storage with
    // the given tensor.
    Tensor leaf(const Tensor& value);

    // Record a computed node. `back` receives this node's output gradient.
    Tensor make(std::vector<int> shape, std::vector<double> values,
                std::vector<int> parents,
                std::function<void(Tape&, const std::vector<double>&)> back);

    // Backpropagate from a scalar loss recorded on this tape. Errors if the
    // loss is not scalar, not on this tape, or backward already ran.
    void backward(const Tensor& loss);

    bool backward_done() const { return backward_done_; }

    // Gradient of a tape tensor after backward; zeros if the node did not
    // influence the loss.
    Tensor grad(const Tensor& t) const;

    // Gradient buffer for a node, allocated on first touch.
    std::vector<double>& grad_buf(int node);

    std::size_t node_count() const { return nodes_.size(); }

    // --- multiply-accumulate instrumentation (complexity audit) ---
    FlopCounter* counter = nullptr;
    AttnStage current_stage = AttnStage::none;
    MacKind current_kind = MacKind::other;
    void count_macs(long long macs) {
        if (counter) counter->add(current_stage, current_kind, macs);
    }

private:
    struct Node {
        std::vector<int> parents;
        std::function<void(Tape&, const std::vector<double>&)> back;
        std::size_t size = 0;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool backward_done_ = false;
};

// RAII stage/kind labels for the audit counter.
struct StageScope {
    StageScope(Tape* tape, AttnStage stage) : tape_(tape) {
        if (tape_) { saved_ = tape_->current_stage; tape_->current_stage = stage; }
    }
    ~StageScope() {
        if (tape_) tape_->current_stage = saved_;
    }
    Tape* tape_;
    AttnStage saved_ = AttnStage::none;
};

struct KindScope {
    KindScope(Tape* tape, MacKind kind) : tape_(tape) {
        if (tape_) { saved_ = tape_->current_kind; tape_->current_kind = kind; }
    }
    ~KindScope() {
        if (tape_) tape_->current_kind = saved_;
    }
    Tape* tape_;
    MacKind saved_ = MacKind::other;
};

// ---- operations ---------------------------------------------------------
// Each op works on plain tensors and on tape tensors; if any input is on a
// tape the result is recorded there with its backward rule. Mixing tensors
// from two different tapes is a contract error.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor gelu(const Tensor& x); // tanh approximation; backward matches it
Tensor log(const Tensor& x);

// Adds a length-c bias vector to every row of a [rows, c] tensor.
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

Tensor concat(int axis, const std::vector<Tensor>& parts);
std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int>& sizes);
Tensor reshape(const Tensor& x, std::vector<int> new_shape);

// Row selection on the leading axis; rows may repeat. Backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<int>& indices);
// Copy of `base` with `rows` written at the given (unique) indices.
Tensor scatter_rows(const Tensor& base, const std::vector<int>& indices, const Tensor& rows);

Tensor sum(const Tensor& x);  // -> [1]
Tensor mean(const Tensor& x); // -> [1]

} // namespace fine
