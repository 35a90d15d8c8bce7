#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace spectra {

/// Extents, outermost first; elements are stored row-major.
using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;       // empty until backward touches it
    std::uint64_t tape_epoch = 0;   // which tape this tensor last joined
    int tape_id = -1;
};

/// Grad buffer of an impl, allocated (zeroed) on first use.
std::vector<double>& grad_buffer(TensorImpl& impl);

}  // namespace detail

// Dense row-major f64 tensor. Value-semantic handle over shared storage:
// copies alias the same buffer, clone() deep-copies. A scalar has an empty
// shape and one element.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int dim() const;
    int extent(int axis) const;
    std::int64_t size() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    double value() const;  // requires size() == 1

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);

    bool has_grad() const;
    const std::vector<double>& grad() const;  // throws when absent
    void zero_grad();                         // allocates when requires_grad

    /// Deep copy, detached from any tape and without grads.
    Tensor clone() const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<detail::TensorImpl>& shared_impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Wengert list. Ops append nodes in execution order, so every node's input
// ids precede its output id; backward replays the list in reverse exactly
// once per forward.
class Tape {
public:
    explicit Tape(bool recording = true);

    bool recording() const { return recording_; }

    /// True when the tensor was last registered on this tape.
    bool owns(const Tensor& t) const;

    void record(const std::vector<Tensor>& inputs, const Tensor& output,
                std::function<void()> pull);

    // Populates grads of every requires_grad tensor reachable from loss.
    // loss must be a scalar produced on this tape; calling twice without a
    // fresh forward throws.
    void backward(const Tensor& loss);

    std::size_t num_nodes() const { return nodes_.size(); }
    bool spent() const { return spent_; }

    /// (input ids, output id) per node, for tests.
    std::vector<std::pair<std::vector<int>, int>> recorded_ids() const;

private:
    int ensure_id(const Tensor& t);

    struct Node {
        std::vector<int> input_ids;
        int output_id = -1;
        std::shared_ptr<detail::TensorImpl> output;
        std::function<void()> pull;
    };

    std::vector<Node> nodes_;
    std::uint64_t epoch_;
    int next_id_ = 0;
    bool recording_ = true;
    bool spent_ = false;
};

}  // namespace spectra
