#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "patchlab/errors.hpp"

namespace patchlab::diffcore {

// Dense row-major tensor of doubles. Small enough here that value semantics
// are the right call; the autodiff graph shares tensors via shared_ptr.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::size_t size() const { return data_.size(); }
    bool is_scalar() const { return data_.size() == 1; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D accessors (rows x cols).
    int rows() const;
    int cols() const;
    double& at(int r, int c);
    double at(int r, int c) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    // Gradient buffer, allocated on demand; same extents as the data.
    bool requires_grad = false;
    std::vector<double> grad;
    void ensure_grad();
    void zero_grad();

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::size_t shape_size(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

// Snapshot format: header "TNS v1 <rank> <extents...>" on the first line,
// then whitespace-separated decimal values. Values round-trip bit-exactly.
void save_tensor_snapshot(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor_snapshot(const std::filesystem::path& path);

// C = A * B for 2-D tensors, plus the transposed variants backward needs.
// Accumulating forms: C (or the destination gradient) is added into.
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate);

}  // namespace patchlab::diffcore
