#include "patchlab/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace patchlab::diffcore {

std::size_t shape_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (const int e : shape) {
        if (e <= 0) throw DimensionError("tensor extent must be positive, got " + std::to_string(e));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

Tensor::Tensor(std::vector<int> shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
        throw DimensionError("data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_to_string(shape_));
    }
}

int Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows() needs a 2-D tensor, got " + shape_to_string(shape_));
    return shape_[0];
}

int Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols() needs a 2-D tensor, got " + shape_to_string(shape_));
    return shape_[1];
}

double& Tensor::at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
double Tensor::at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

bool Tensor::all_finite() const {
    for (const double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::ensure_grad() {
    if (grad.size() != data_.size()) grad.assign(data_.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) grad.assign(grad.size(), 0.0);
}

void save_tensor_snapshot(const Tensor& t, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    out << "TNS v1 " << t.rank();
    for (const int e : t.shape()) out << ' ' << e;
    out << '\n';
    char buf[40];
    for (std::size_t i = 0; i < t.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", t[i]);
        out << buf << (i + 1 == t.size() ? '\n' : ' ');
    }
    if (!out) throw FormatError("write failed: " + path.string());
}

Tensor load_tensor_snapshot(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open: " + path.string());
    std::string magic, version;
    int rank = -1;
    in >> magic >> version >> rank;
    if (magic != "TNS" || version != "v1" || rank < 0) {
        throw FormatError("bad snapshot header in " + path.string());
    }
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (int& e : shape) {
        if (!(in >> e)) throw FormatError("truncated shape in " + path.string());
    }
    const std::size_t n = shape_size(shape);
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(in >> data[i])) {
            throw FormatError("truncated values in " + path.string() + " at value index " +
                              std::to_string(i));
        }
    }
    return Tensor(std::move(shape), std::move(data));
}

void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    if (!accumulate) {
        for (int i = 0; i < m * n; ++i) c[i] = 0.0;
    }
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            if (accumulate) {
                crow[j] += acc;
            } else {
                crow[j] = acc;
            }
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
    if (!accumulate) {
        for (int i = 0; i < k * n; ++i) c[i] = 0.0;
    }
    for (int p = 0; p < m; ++p) {
        const double* arow = a + static_cast<std::size_t>(p) * k;
        const double* brow = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < k; ++i) {
            const double av = arow[i];
            double* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace patchlab::diffcore
