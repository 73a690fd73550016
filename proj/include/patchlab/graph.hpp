#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "patchlab/tensor.hpp"

namespace patchlab::diffcore {

using TensorPtr = std::shared_ptr<Tensor>;

// Precomputed sampling locations for bilinear_sample. One entry per output
// pixel; `inside` marks pixels whose source point has all four taps in
// bounds. The grid is data, not a differentiable input.
struct SampleGrid {
    int out_h = 0, out_w = 0;
    int src_h = 0, src_w = 0;
    std::vector<double> u;  // source x per output pixel, row-major
    std::vector<double> v;  // source y per output pixel
    std::vector<unsigned char> inside;
};

// Define-by-run reverse-mode tape over Tensor. A graph is built per forward
// pass, is single-threaded, and supports one scalar-rooted backward sweep.
// Parameters may be shared read-only across graphs running in parallel.
class Graph {
public:
    // Registers a tensor as a graph input. Rejects non-finite values.
    TensorPtr leaf(Tensor t, bool requires_grad = false);
    // Registers an existing tensor without copying. The tensor must stay
    // unmodified while the graph lives; if it requires grad, backward
    // accumulates into its grad buffer, so do not share it across graphs
    // running concurrently.
    TensorPtr leaf_shared(const TensorPtr& t);
    TensorPtr constant(double v) { return leaf(Tensor::scalar(v)); }

    // Elementwise; shapes must match exactly except that either side may be
    // a scalar (the only broadcast supported).
    TensorPtr add(const TensorPtr& a, const TensorPtr& b);
    TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
    TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
    TensorPtr scale(const TensorPtr& a, double s) { return mul(a, constant(s)); }

    TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
    TensorPtr leaky_relu(const TensorPtr& a, double slope);
    TensorPtr softmax_rows(const TensorPtr& a);
    TensorPtr log(const TensorPtr& a);
    TensorPtr sum(const TensorPtr& a);
    TensorPtr mean(const TensorPtr& a);
    TensorPtr squared_error(const TensorPtr& a, const TensorPtr& b);
    TensorPtr embedding_lookup(const TensorPtr& table, const std::vector<int>& ids);
    TensorPtr concat_rows(const std::vector<TensorPtr>& parts);
    TensorPtr concat_cols(const std::vector<TensorPtr>& parts);
    TensorPtr clamp(const TensorPtr& a, double lo, double hi);
    TensorPtr bilinear_sample(const TensorPtr& src, const SampleGrid& grid);

    // Structural kernels.
    TensorPtr reshape(const TensorPtr& a, std::vector<int> shape);
    TensorPtr transpose(const TensorPtr& a);
    // (H,W,C) -> (H/b * W/b, b*b*C), blocks row-major, within-block row-major.
    TensorPtr patchify(const TensorPtr& image, int block);

    // Fused losses.
    TensorPtr softmax_cross_entropy(const TensorPtr& logits, int target);
    // Total variation with sqrt(. + 1e-8) smoothing; terms only where both
    // the right and down neighbor exist, summed over channels.
    TensorPtr tv(const TensorPtr& patch);

    // Fills grads of every requires_grad tensor reachable from root.
    void backward(const TensorPtr& root);

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        const char* tag;
        TensorPtr out;
        std::vector<TensorPtr> inputs;
        std::function<void(Node&)> back;
    };
    std::vector<Node> nodes_;

    TensorPtr record(const char* tag, Tensor value, std::vector<TensorPtr> inputs,
                     std::function<void(Node&)> back);
};

// String-tag dispatch over the supported primitive set: add, subtract,
// elementwise-multiply, matrix-multiply, leaky-relu, softmax, log, sum,
// mean, squared-error, embedding-lookup, concatenate, bilinear-sample,
// clamp. Inputs are checked for finiteness here.
struct OpAttrs {
    double slope = 0.01;
    double lo = 0.0, hi = 1.0;
    int axis = 0;
    std::vector<int> ids;
    const SampleGrid* grid = nullptr;
};
TensorPtr forward_primitive(Graph& g, const std::string& tag, std::vector<TensorPtr> inputs,
                            const OpAttrs& attrs = {});

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8)
// for the scalar function realized by `f` at `x`.
double finite_difference_check(const std::function<TensorPtr(Graph&, const TensorPtr&)>& f,
                               const Tensor& x, double h);

}  // namespace patchlab::diffcore
