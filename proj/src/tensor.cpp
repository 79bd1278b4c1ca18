#include "pmi/tensor.hpp"

#include <cstring>
#include <sstream>

namespace pmi {

int64_t numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Shape strides_of(const Shape& shape) {
    Shape s(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        s[static_cast<size_t>(i)] = s[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
    return s;
}

void check_shape(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

Tensor::Tensor(Shape shape, DType dt) : shape_(std::move(shape)), dtype_(dt) {
    for (int64_t d : shape_)
        if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape_));
    numel_ = numel_of(shape_);
    if (dt == DType::F32)
        data_ = std::vector<float>(static_cast<size_t>(numel_), 0.0f);
    else
        data_ = std::vector<double>(static_cast<size_t>(numel_), 0.0);
}

Tensor Tensor::zeros(Shape shape, DType dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
    Tensor t(std::move(shape), dt);
    t.fill_(value);
    return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dt) {
    return from(std::move(shape), std::vector<double>(values), dt);
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values, DType dt) {
    Tensor t(std::move(shape), dt);
    if (t.numel() != static_cast<int64_t>(values.size()))
        throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(t.shape()));
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, values[static_cast<size_t>(i)]);
    return t;
}

double Tensor::get(int64_t flat) const {
    return dispatch(dtype_, [&](auto tag) -> double {
        using T = decltype(tag);
        return static_cast<double>(data<T>()[flat]);
    });
}

void Tensor::set(int64_t flat, double v) {
    dispatch(dtype_, [&](auto tag) {
        using T = decltype(tag);
        data<T>()[flat] = static_cast<T>(v);
        return 0;
    });
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    for (int64_t i = 0; i < numel_; ++i) out.set(i, get(i));
    return out;
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
    return dispatch(dtype_, [&](auto tag) {
        using T = decltype(tag);
        return std::memcmp(data<T>(), other.data<T>(), sizeof(T) * static_cast<size_t>(numel_)) == 0;
    });
}

bool Tensor::all_finite() const {
    // sum of v*0 stays 0 iff every v is finite; vectorizes cleanly
    return dispatch(dtype_, [&](auto tag) {
        using T = decltype(tag);
        const T* p = data<T>();
        T acc = T(0);
        for (int64_t i = 0; i < numel_; ++i) acc += p[i] * T(0);
        return acc == T(0);
    });
}

void Tensor::fill_(double v) {
    dispatch(dtype_, [&](auto tag) {
        using T = decltype(tag);
        T* p = data<T>();
        const T tv = static_cast<T>(v);
        for (int64_t i = 0; i < numel_; ++i) p[i] = tv;
        return 0;
    });
}

void Tensor::add_(const Tensor& other) {
    if (shape_ != other.shape_ || dtype_ != other.dtype_)
        throw DimensionError("add_: mismatched tensors " + shape_str(shape_) + " vs " + shape_str(other.shape_));
    dispatch(dtype_, [&](auto tag) {
        using T = decltype(tag);
        T* p = data<T>();
        const T* q = other.data<T>();
        for (int64_t i = 0; i < numel_; ++i) p[i] += q[i];
        return 0;
    });
}

}  // namespace pmi
