#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace metadenoise {

// Dense row-major n-d array. Images are {H,W,C}, conv kernels {kh,kw,Cin,Cout},
// biases {C}, scalars {1}.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::int64_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

    Tensor(std::vector<std::int64_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_))
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::int64_t> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t dim(std::size_t i) const { return shape_.at(i); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // rank-3 accessors for image-shaped tensors
    T& at(std::int64_t h, std::int64_t w, std::int64_t c) {
        return data_[static_cast<std::size_t>((h * shape_[1] + w) * shape_[2] + c)];
    }
    const T& at(std::int64_t h, std::int64_t w, std::int64_t c) const {
        return data_[static_cast<std::size_t>((h * shape_[1] + w) * shape_[2] + c)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min() const { return *std::min_element(data_.begin(), data_.end()); }
    T max() const { return *std::max_element(data_.begin(), data_.end()); }

    double sum() const {
        double s = 0;
        for (const T& v : data_) s += static_cast<double>(v);
        return s;
    }

    double mean() const { return size() > 0 ? sum() / static_cast<double>(size()) : 0.0; }

    void clamp_(T lo, T hi) {
        for (T& v : data_) v = std::min(hi, std::max(lo, v));
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '{';
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << '}';
        return os.str();
    }

private:
    static std::int64_t checked_numel(const std::vector<std::int64_t>& shape) {
        std::int64_t n = 1;
        for (std::int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::vector<std::int64_t> shape_;
    std::vector<T> data_;
};

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace metadenoise
