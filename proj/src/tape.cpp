#include "sparse_eta/tape.hpp"

#include <cmath>
#include <string>

namespace sparse_eta::autodiff {

namespace {

void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError("tape: " + what);
}

} // namespace

double softplus_scalar(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

int Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int Tape::leaf(Mat value) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(value);
    n.needs_grad = true;
    return push(std::move(n));
}

int Tape::constant(Mat value) {
    Node n;
    n.op = Op::Const;
    n.val = std::move(value);
    n.needs_grad = false;
    return push(std::move(n));
}

int Tape::matmul(int a, int b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require(A.cols == B.rows, "matmul shape mismatch");
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    n.val = Mat(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i) {
        for (int kk = 0; kk < A.cols; ++kk) {
            double aik = A.at(i, kk);
            if (aik == 0.0) continue;
            for (int j = 0; j < B.cols; ++j) {
                n.val.at(i, j) += aik * B.at(kk, j);
            }
        }
    }
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Tape::add(int a, int b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require(A.rows == B.rows && A.cols == B.cols, "add shape mismatch");
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    n.val = A;
    for (size_t i = 0; i < n.val.size(); ++i) n.val.a[i] += B.a[i];
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Tape::sub(int a, int b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require(A.rows == B.rows && A.cols == B.cols, "sub shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.a = a;
    n.b = b;
    n.val = A;
    for (size_t i = 0; i < n.val.size(); ++i) n.val.a[i] -= B.a[i];
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Tape::mul(int a, int b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require(A.rows == B.rows && A.cols == B.cols, "mul shape mismatch");
    Node n;
    n.op = Op::Mul;
    n.a = a;
    n.b = b;
    n.val = A;
    for (size_t i = 0; i < n.val.size(); ++i) n.val.a[i] *= B.a[i];
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Tape::div(int a, int b) {
    const Mat& A = value(a);
    const Mat& B = value(b);
    require(A.rows == B.rows && A.cols == B.cols, "div shape mismatch");
    Node n;
    n.op = Op::Div;
    n.a = a;
    n.b = b;
    n.val = A;
    for (size_t i = 0; i < n.val.size(); ++i) n.val.a[i] /= B.a[i];
    n.needs_grad = at(a).needs_grad || at(b).needs_grad;
    return push(std::move(n));
}

int Tape::add_n(const std::vector<int>& ids) {
    require(!ids.empty(), "add_n of nothing");
    Node n;
    n.op = Op::AddN;
    n.ins = ids;
    n.val = value(ids[0]);
    for (size_t k = 1; k < ids.size(); ++k) {
        const Mat& M = value(ids[k]);
        require(M.rows == n.val.rows && M.cols == n.val.cols, "add_n shape mismatch");
        for (size_t i = 0; i < n.val.size(); ++i) n.val.a[i] += M.a[i];
    }
    for (int id : ids) n.needs_grad = n.needs_grad || at(id).needs_grad;
    return push(std::move(n));
}

int Tape::add_rowvec(int m, int v) {
    const Mat& M = value(m);
    const Mat& V = value(v);
    require(V.rows == 1 && V.cols == M.cols, "add_rowvec shape mismatch");
    Node n;
    n.op = Op::AddRowVec;
    n.a = m;
    n.b = v;
    n.val = M;
    for (int i = 0; i < M.rows; ++i) {
        for (int j = 0; j < M.cols; ++j) n.val.at(i, j) += V.a[static_cast<size_t>(j)];
    }
    n.needs_grad = at(m).needs_grad || at(v).needs_grad;
    return push(std::move(n));
}

int Tape::relu(int a) {
    Node n;
    n.op = Op::Relu;
    n.a = a;
    n.val = value(a);
    for (auto& x : n.val.a) x = x > 0.0 ? x : 0.0;
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Tape::softplus(int a) {
    Node n;
    n.op = Op::Softplus;
    n.a = a;
    n.val = value(a);
    for (auto& x : n.val.a) x = softplus_scalar(x);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Tape::exp_(int a) {
    Node n;
    n.op = Op::Exp;
    n.a = a;
    n.val = value(a);
    for (auto& x : n.val.a) x = std::exp(x);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Tape::log_(int a) {
    Node n;
    n.op = Op::Log;
    n.a = a;
    n.val = value(a);
    for (auto& x : n.val.a) x = std::log(x);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Tape::clamp(int a, double lo, double hi) {
    Node n;
    n.op = Op::Clamp;
    n.a = a;
    n.c0 = lo;
    n.c1 = hi;
    n.val = value(a);
    for (auto& x : n.val.a) x = x < lo ? lo : (x > hi ? hi : x);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Tape::scale(int a, double c) {
    Node n;
    n.op = Op::Scale;
    n.a = a;
    n.c0 = c;
    n.val = value(a);
    for (auto& x : n.val.a) x *= c;
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Tape::add_const(int a, double c) {
    Node n;
    n.op = Op::AddConst;
    n.a = a;
    n.c0 = c;
    n.val = value(a);
    for (auto& x : n.val.a) x += c;
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Tape::hconcat(const std::vector<int>& ids) {
    require(!ids.empty(), "hconcat of nothing");
    int rows = value(ids[0]).rows;
    int cols = 0;
    for (int id : ids) {
        require(value(id).rows == rows, "hconcat row mismatch");
        cols += value(id).cols;
    }
    Node n;
    n.op = Op::HConcat;
    n.ins = ids;
    n.val = Mat(rows, cols);
    int off = 0;
    for (int id : ids) {
        const Mat& M = value(id);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < M.cols; ++j) n.val.at(i, off + j) = M.at(i, j);
        }
        off += M.cols;
    }
    for (int id : ids) n.needs_grad = n.needs_grad || at(id).needs_grad;
    return push(std::move(n));
}

int Tape::vconcat(const std::vector<int>& ids) {
    require(!ids.empty(), "vconcat of nothing");
    int cols = value(ids[0]).cols;
    int rows = 0;
    for (int id : ids) {
        require(value(id).cols == cols, "vconcat column mismatch");
        rows += value(id).rows;
    }
    Node n;
    n.op = Op::VConcat;
    n.ins = ids;
    n.val = Mat(rows, cols);
    int off = 0;
    for (int id : ids) {
        const Mat& M = value(id);
        for (int i = 0; i < M.rows; ++i) {
            for (int j = 0; j < cols; ++j) n.val.at(off + i, j) = M.at(i, j);
        }
        off += M.rows;
    }
    for (int id : ids) n.needs_grad = n.needs_grad || at(id).needs_grad;
    return push(std::move(n));
}

int Tape::gather_rows(int a, std::vector<int> row_ids) {
    const Mat& A = value(a);
    Node n;
    n.op = Op::GatherRows;
    n.a = a;
    n.val = Mat(static_cast<int>(row_ids.size()), A.cols);
    for (size_t i = 0; i < row_ids.size(); ++i) {
        int r = row_ids[i];
        require(r >= 0 && r < A.rows, "gather_rows index out of range");
        for (int j = 0; j < A.cols; ++j) n.val.at(static_cast<int>(i), j) = A.at(r, j);
    }
    n.row_ids = std::move(row_ids);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

int Tape::rel_gather(int h, const netgraph::RelationalAdjacency* adjacency, int relation) {
    const Mat& H = value(h);
    require(adjacency != nullptr, "rel_gather without adjacency");
    require(static_cast<size_t>(H.rows) == adjacency->num_vertices(), "rel_gather row mismatch");
    Node n;
    n.op = Op::RelGather;
    n.a = h;
    n.adj = adjacency;
    n.relation = relation;
    n.val = Mat(H.rows, H.cols);
    for (int i = 0; i < H.rows; ++i) {
        const auto& nb = adjacency->neighbors(i, relation);
        if (nb.empty()) continue;
        double inv_c = 1.0 / adjacency->norm_const(i, relation);
        for (int j : nb) {
            for (int c = 0; c < H.cols; ++c) n.val.at(i, c) += H.at(j, c);
        }
        for (int c = 0; c < H.cols; ++c) n.val.at(i, c) *= inv_c;
    }
    n.needs_grad = at(h).needs_grad;
    return push(std::move(n));
}

int Tape::sum_all(int a) {
    Node n;
    n.op = Op::SumAll;
    n.a = a;
    double s = 0.0;
    for (double x : value(a).a) s += x;
    n.val = Mat::scalar(s);
    n.needs_grad = at(a).needs_grad;
    return push(std::move(n));
}

void Tape::accumulate(int id, const Mat& g) {
    Node& n = at(id);
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = Mat(n.val.rows, n.val.cols);
    for (size_t i = 0; i < g.size(); ++i) n.grad.a[i] += g.a[i];
}

const Mat& Tape::adjoint(int id) const {
    const Node& n = at(id);
    require(ran_backward_, "adjoint requested before backward");
    static const Mat kEmpty;
    return n.grad.size() == 0 ? kEmpty : n.grad;
}

void Tape::backward(int loss_id) {
    const Mat& L = value(loss_id);
    require(L.rows == 1 && L.cols == 1, "backward target must be scalar");
    backward_from(loss_id, Mat::scalar(1.0));
}

void Tape::backward_from(int seed_node, Mat seed) {
    if (consumed_) throw TapeConsumedError("tape already consumed by a backward pass");
    consumed_ = true;
    ran_backward_ = true;
    {
        Node& n = at(seed_node);
        require(seed.rows == n.val.rows && seed.cols == n.val.cols, "seed shape mismatch");
        if (!n.needs_grad) return;
        n.grad = std::move(seed);
    }

    for (int id = seed_node; id >= 0; --id) {
        Node& n = at(id);
        if (!n.needs_grad || n.grad.size() == 0) continue;
        const Mat& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
            case Op::Const:
                break;
            case Op::MatMul: {
                const Mat& A = value(n.a);
                const Mat& B = value(n.b);
                if (at(n.a).needs_grad) {
                    Mat ga(A.rows, A.cols);
                    for (int i = 0; i < A.rows; ++i) {
                        for (int j = 0; j < B.cols; ++j) {
                            double gij = g.at(i, j);
                            if (gij == 0.0) continue;
                            for (int kk = 0; kk < A.cols; ++kk) {
                                ga.at(i, kk) += gij * B.at(kk, j);
                            }
                        }
                    }
                    accumulate(n.a, ga);
                }
                if (at(n.b).needs_grad) {
                    Mat gb(B.rows, B.cols);
                    for (int i = 0; i < A.rows; ++i) {
                        for (int kk = 0; kk < A.cols; ++kk) {
                            double aik = A.at(i, kk);
                            if (aik == 0.0) continue;
                            for (int j = 0; j < B.cols; ++j) {
                                gb.at(kk, j) += aik * g.at(i, j);
                            }
                        }
                    }
                    accumulate(n.b, gb);
                }
                break;
            }
            case Op::Add:
                accumulate(n.a, g);
                accumulate(n.b, g);
                break;
            case Op::Sub: {
                accumulate(n.a, g);
                if (at(n.b).needs_grad) {
                    Mat gb = g;
                    for (auto& x : gb.a) x = -x;
                    accumulate(n.b, gb);
                }
                break;
            }
            case Op::Mul: {
                if (at(n.a).needs_grad) {
                    Mat ga = g;
                    const Mat& B = value(n.b);
                    for (size_t i = 0; i < ga.size(); ++i) ga.a[i] *= B.a[i];
                    accumulate(n.a, ga);
                }
                if (at(n.b).needs_grad) {
                    Mat gb = g;
                    const Mat& A = value(n.a);
                    for (size_t i = 0; i < gb.size(); ++i) gb.a[i] *= A.a[i];
                    accumulate(n.b, gb);
                }
                break;
            }
            case Op::Div: {
                const Mat& A = value(n.a);
                const Mat& B = value(n.b);
                if (at(n.a).needs_grad) {
                    Mat ga = g;
                    for (size_t i = 0; i < ga.size(); ++i) ga.a[i] /= B.a[i];
                    accumulate(n.a, ga);
                }
                if (at(n.b).needs_grad) {
                    Mat gb = g;
                    for (size_t i = 0; i < gb.size(); ++i) {
                        gb.a[i] *= -A.a[i] / (B.a[i] * B.a[i]);
                    }
                    accumulate(n.b, gb);
                }
                break;
            }
            case Op::AddN:
                for (int in : n.ins) accumulate(in, g);
                break;
            case Op::AddRowVec: {
                accumulate(n.a, g);
                if (at(n.b).needs_grad) {
                    Mat gv(1, g.cols);
                    for (int i = 0; i < g.rows; ++i) {
                        for (int j = 0; j < g.cols; ++j) gv.a[static_cast<size_t>(j)] += g.at(i, j);
                    }
                    accumulate(n.b, gv);
                }
                break;
            }
            case Op::Relu: {
                const Mat& A = value(n.a);
                Mat ga = g;
                for (size_t i = 0; i < ga.size(); ++i) {
                    if (A.a[i] <= 0.0) ga.a[i] = 0.0;
                }
                accumulate(n.a, ga);
                break;
            }
            case Op::Softplus: {
                const Mat& A = value(n.a);
                Mat ga = g;
                for (size_t i = 0; i < ga.size(); ++i) ga.a[i] *= sigmoid_scalar(A.a[i]);
                accumulate(n.a, ga);
                break;
            }
            case Op::Exp: {
                Mat ga = g;
                for (size_t i = 0; i < ga.size(); ++i) ga.a[i] *= n.val.a[i];
                accumulate(n.a, ga);
                break;
            }
            case Op::Log: {
                const Mat& A = value(n.a);
                Mat ga = g;
                for (size_t i = 0; i < ga.size(); ++i) ga.a[i] /= A.a[i];
                accumulate(n.a, ga);
                break;
            }
            case Op::Clamp: {
                const Mat& A = value(n.a);
                Mat ga = g;
                for (size_t i = 0; i < ga.size(); ++i) {
                    if (A.a[i] <= n.c0 || A.a[i] >= n.c1) ga.a[i] = 0.0;
                }
                accumulate(n.a, ga);
                break;
            }
            case Op::Scale: {
                Mat ga = g;
                for (auto& x : ga.a) x *= n.c0;
                accumulate(n.a, ga);
                break;
            }
            case Op::AddConst:
                accumulate(n.a, g);
                break;
            case Op::HConcat: {
                int off = 0;
                for (int in : n.ins) {
                    const Mat& M = value(in);
                    if (at(in).needs_grad) {
                        Mat gi(M.rows, M.cols);
                        for (int i = 0; i < M.rows; ++i) {
                            for (int j = 0; j < M.cols; ++j) gi.at(i, j) = g.at(i, off + j);
                        }
                        accumulate(in, gi);
                    }
                    off += M.cols;
                }
                break;
            }
            case Op::VConcat: {
                int off = 0;
                for (int in : n.ins) {
                    const Mat& M = value(in);
                    if (at(in).needs_grad) {
                        Mat gi(M.rows, M.cols);
                        for (int i = 0; i < M.rows; ++i) {
                            for (int j = 0; j < M.cols; ++j) gi.at(i, j) = g.at(off + i, j);
                        }
                        accumulate(in, gi);
                    }
                    off += M.rows;
                }
                break;
            }
            case Op::GatherRows: {
                const Mat& A = value(n.a);
                Mat ga(A.rows, A.cols);
                for (size_t i = 0; i < n.row_ids.size(); ++i) {
                    int r = n.row_ids[i];
                    for (int j = 0; j < A.cols; ++j) {
                        ga.at(r, j) += g.at(static_cast<int>(i), j);
                    }
                }
                accumulate(n.a, ga);
                break;
            }
            case Op::RelGather: {
                const Mat& H = value(n.a);
                Mat gh(H.rows, H.cols);
                for (int i = 0; i < H.rows; ++i) {
                    const auto& nb = n.adj->neighbors(i, n.relation);
                    if (nb.empty()) continue;
                    double inv_c = 1.0 / n.adj->norm_const(i, n.relation);
                    for (int j : nb) {
                        for (int c = 0; c < H.cols; ++c) gh.at(j, c) += g.at(i, c) * inv_c;
                    }
                }
                accumulate(n.a, gh);
                break;
            }
            case Op::SumAll: {
                const Mat& A = value(n.a);
                Mat ga(A.rows, A.cols);
                for (auto& x : ga.a) x = g.a[0];
                accumulate(n.a, ga);
                break;
            }
        }
    }
}

} // namespace sparse_eta::autodiff
