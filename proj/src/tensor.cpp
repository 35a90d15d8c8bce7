#include "spectra/tensor.hpp"

#include <atomic>
#include <sstream>
#include <stdexcept>

namespace spectra {

namespace {

// Epochs distinguish tapes even when stack addresses get reused.
std::atomic<std::uint64_t> g_tape_epoch{1};

}  // namespace

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

std::vector<double>& grad_buffer(TensorImpl& impl) {
    if (impl.grad.empty()) {
        impl.grad.assign(impl.data.size(), 0.0);
    }
    return impl.grad;
}

}  // namespace detail

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    for (int e : shape) {
        if (e < 1) {
            throw std::invalid_argument("Tensor: extents must be positive, got " + shape_str(shape));
        }
    }
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->data.assign(static_cast<std::size_t>(numel(shape)), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (int e : shape) {
        if (e < 1) {
            throw std::invalid_argument("Tensor: extents must be positive, got " + shape_str(shape));
        }
    }
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("Tensor: " + shape_str(shape) + " does not match " +
                                    std::to_string(data.size()) + " values");
    }
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

int Tensor::dim() const { return static_cast<int>(impl_->shape.size()); }

int Tensor::extent(int axis) const {
    if (axis < 0 || axis >= dim()) {
        throw std::out_of_range("Tensor::extent: axis " + std::to_string(axis) + " of " + shape_str(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(impl_->data.size()); }

std::vector<double>& Tensor::data() { return impl_->data; }

const std::vector<double>& Tensor::data() const { return impl_->data; }

double Tensor::value() const {
    if (size() != 1) {
        throw std::logic_error("Tensor::value: tensor has " + std::to_string(size()) + " elements");
    }
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) {
        throw std::logic_error("Tensor::grad: no gradient present");
    }
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->requires_grad) {
        return;
    }
    impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::clone() const {
    if (!impl_) {
        return Tensor();
    }
    Tensor out;
    out.impl_ = std::make_shared<detail::TensorImpl>();
    out.impl_->shape = impl_->shape;
    out.impl_->data = impl_->data;
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
}

Tape::Tape(bool recording)
    : epoch_(g_tape_epoch.fetch_add(1)), recording_(recording) {}

bool Tape::owns(const Tensor& t) const {
    return t.defined() && t.impl()->tape_epoch == epoch_;
}

int Tape::ensure_id(const Tensor& t) {
    detail::TensorImpl* impl = t.impl();
    if (impl->tape_epoch != epoch_) {
        impl->tape_epoch = epoch_;
        impl->tape_id = next_id_++;
    }
    return impl->tape_id;
}

void Tape::record(const std::vector<Tensor>& inputs, const Tensor& output,
                  std::function<void()> pull) {
    if (!recording_) {
        return;
    }
    Node node;
    node.input_ids.reserve(inputs.size());
    for (const Tensor& in : inputs) {
        node.input_ids.push_back(ensure_id(in));
    }
    node.output_id = ensure_id(output);
    node.output = output.shared_impl();
    node.pull = std::move(pull);
    nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be a defined scalar");
    }
    if (spent_) {
        throw std::logic_error("backward: tape already consumed; run a new forward first");
    }
    if (!owns(loss)) {
        throw std::logic_error("backward: loss was not produced on this tape");
    }
    spent_ = true;
    detail::grad_buffer(*loss.impl())[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) {
            continue;  // no gradient flowed into this node's output
        }
        it->pull();
    }
}

std::vector<std::pair<std::vector<int>, int>> Tape::recorded_ids() const {
    std::vector<std::pair<std::vector<int>, int>> out;
    out.reserve(nodes_.size());
    for (const Node& n : nodes_) {
        out.emplace_back(n.input_ids, n.output_id);
    }
    return out;
}

}  // namespace spectra
