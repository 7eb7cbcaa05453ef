#pragma once

#include <vector>

#include "sparse_eta/common.hpp"
#include "sparse_eta/netgraph.hpp"

namespace sparse_eta::autodiff {

// Dense row-major matrix of doubles.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}

    double& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return a.size(); }

    static Mat scalar(double v) {
        Mat m(1, 1);
        m.a[0] = v;
        return m;
    }
    static Mat row(std::vector<double> v) {
        Mat m;
        m.rows = 1;
        m.cols = static_cast<int>(v.size());
        m.a = std::move(v);
        return m;
    }
    static Mat column(std::vector<double> v) {
        Mat m;
        m.rows = static_cast<int>(v.size());
        m.cols = 1;
        m.a = std::move(v);
        return m;
    }
};

// Dynamic tape recording one forward evaluation of a matrix expression.
// backward() walks the recorded graph once in reverse; a second backward on
// the same tape throws TapeConsumedError.
class Tape {
public:
    // Differentiable leaf (parameters, or staged inputs whose adjoint is
    // harvested for a second-stage backward).
    int leaf(Mat value);
    // Non-differentiable leaf.
    int constant(Mat value);

    int matmul(int a, int b);
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b); // elementwise
    int div(int a, int b); // elementwise
    int add_n(const std::vector<int>& ids);
    int add_rowvec(int m, int v); // v is 1 x C, broadcast over rows of m
    int relu(int a);
    int softplus(int a);
    int exp_(int a);
    int log_(int a);
    int clamp(int a, double lo, double hi);
    int scale(int a, double c);
    int add_const(int a, double c);
    int hconcat(const std::vector<int>& ids);
    int vconcat(const std::vector<int>& ids);
    int gather_rows(int a, std::vector<int> row_ids);
    // out[i] = sum_{j in N_i^rel} in[j] / c_{i,rel}; the message-passing
    // gather of the relational convolution.
    int rel_gather(int h, const netgraph::RelationalAdjacency* adj, int relation);
    int sum_all(int a); // 1x1

    const Mat& value(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    double scalar_value(int id) const { return nodes_[static_cast<size_t>(id)].val.a[0]; }

    void backward(int loss_id);
    // Reverse pass seeded with an arbitrary adjoint at `node`.
    void backward_from(int node, Mat seed);

    const Mat& adjoint(int id) const;
    bool consumed() const { return consumed_; }
    size_t num_nodes() const { return nodes_.size(); }

private:
    enum class Op {
        Leaf,
        Const,
        MatMul,
        Add,
        Sub,
        Mul,
        Div,
        AddN,
        AddRowVec,
        Relu,
        Softplus,
        Exp,
        Log,
        Clamp,
        Scale,
        AddConst,
        HConcat,
        VConcat,
        GatherRows,
        RelGather,
        SumAll,
    };

    struct Node {
        Op op;
        int a = -1;
        int b = -1;
        std::vector<int> ins;      // AddN / HConcat
        std::vector<int> row_ids;  // GatherRows
        double c0 = 0.0, c1 = 0.0; // Clamp bounds / Scale / AddConst
        const netgraph::RelationalAdjacency* adj = nullptr;
        int relation = -1;
        Mat val;
        Mat grad;
        bool needs_grad = false;
    };

    int push(Node n);
    Node& at(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& at(int id) const { return nodes_[static_cast<size_t>(id)]; }
    void accumulate(int id, const Mat& g);

    std::vector<Node> nodes_;
    bool consumed_ = false;
    bool ran_backward_ = false;
};

double softplus_scalar(double x);
double sigmoid_scalar(double x);

} // namespace sparse_eta::autodiff
