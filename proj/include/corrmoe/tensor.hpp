#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <string>
#include <vector>

namespace corrmoe::nn {

/// Allocator pinning buffers to a fixed 64-byte phase. SIMD kernels split
/// loops by pointer alignment, so malloc's 16-byte phase lets reduction
/// order — and thus low-order float bits — vary with heap history. Fixing
/// the phase keeps reruns of the same (config, seed) bit-identical.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  template <class U>
  struct rebind {
    using other = AlignedAllocator<U>;
  };

  T* allocate(std::size_t n) {
    if (n == 0) return nullptr;
    return static_cast<T*>(
        ::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
  }
  bool operator==(const AlignedAllocator&) const { return true; }
};

/// Dense rank-4 shape (batch, channels, items, neighbors). Feature maps
/// use k = 1; neighbor graphs carry k > 1. Axes of size 1 broadcast in
/// binary operations.
struct Shape {
  int b = 1, c = 1, n = 1, k = 1;

  long numel() const {
    return static_cast<long>(b) * c * static_cast<long>(n) * k;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Row-major (b, c, n, k) tensor of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(const Shape& s) : shape_(s), data_(s.numel(), 0.0) {}

  static Tensor zeros(const Shape& s) { return Tensor(s); }
  static Tensor full(const Shape& s, double v) {
    Tensor t(s);
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(double v) { return full({1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  long numel() const { return static_cast<long>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  long index(int b, int c, int n, int k) const {
    return ((static_cast<long>(b) * shape_.c + c) * shape_.n + n) * shape_.k +
           k;
  }
  double& at(int b, int c, int n, int k) { return data_[index(b, c, n, k)]; }
  double at(int b, int c, int n, int k) const {
    return data_[index(b, c, n, k)];
  }

  /// Flat accessors for elementwise loops.
  double& operator[](long i) { return data_[i]; }
  double operator[](long i) const { return data_[i]; }

  bool all_finite() const;
  double item() const;  // value of a scalar tensor; throws otherwise

 private:
  Shape shape_;
  std::vector<double, AlignedAllocator<double>> data_;
};

}  // namespace corrmoe::nn
