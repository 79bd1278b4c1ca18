#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <variant>
#include <vector>

#include "pmi/error.hpp"

namespace pmi {

enum class DType : uint8_t { F32 = 0, F64 = 1 };

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);
Shape strides_of(const Shape& shape);  // row-major, in elements

// Dense row-major array, f32 or f64. Values are plain data; gradient tracking
// lives in the autograd layer (ag::Node).
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, DType dt);

    static Tensor zeros(Shape shape, DType dt = DType::F32);
    static Tensor full(Shape shape, double value, DType dt = DType::F32);
    static Tensor scalar(double value, DType dt = DType::F32);
    static Tensor from(Shape shape, std::initializer_list<double> values, DType dt = DType::F32);
    static Tensor from(Shape shape, const std::vector<double>& values, DType dt = DType::F32);

    const Shape& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    int64_t numel() const { return numel_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    bool defined() const { return !std::holds_alternative<std::monostate>(data_); }

    template <class T>
    T* data() {
        return std::get<std::vector<T>>(data_).data();
    }
    template <class T>
    const T* data() const {
        return std::get<std::vector<T>>(data_).data();
    }

    // Slow generic element access (tests, IO, small tensors).
    double get(int64_t flat) const;
    void set(int64_t flat, double v);

    Tensor astype(DType dt) const;
    Tensor clone() const { return *this; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool bit_equal(const Tensor& other) const;
    bool all_finite() const;

    void fill_(double v);
    void add_(const Tensor& other);  // same shape/dtype, in place

  private:
    Shape shape_;
    DType dtype_{DType::F32};
    int64_t numel_{0};
    std::variant<std::monostate, std::vector<float>, std::vector<double>> data_;
};

template <class F>
auto dispatch(DType dt, F&& f) {
    if (dt == DType::F32) return f(float{});
    return f(double{});
}

void check_shape(bool cond, const std::string& msg);

}  // namespace pmi
