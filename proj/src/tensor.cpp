#include "biasmap/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace biasmap {

namespace {

// All BLAS calls run single-threaded so results are bit-reproducible.
struct BlasSetup {
    BlasSetup() { openblas_set_num_threads(1); }
};
const BlasSetup blas_setup;

long shape_numel(const std::vector<int>& shape) {
    long n = 1;
    for (int d : shape) n *= d;
    return n;
}

// Expands one image {C,H,W} into a {C*KH*KW, OH*OW} patch matrix.
void im2col(const float* in, float* col, int C, int H, int W, int KH, int KW, int P, int OH,
            int OW) {
    for (int c = 0; c < C; ++c) {
        for (int kh = 0; kh < KH; ++kh) {
            for (int kw = 0; kw < KW; ++kw) {
                float* dst = col + (static_cast<long>(c) * KH * KW + kh * KW + kw) * OH * OW;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh + kh - P;
                    if (ih < 0 || ih >= H) {
                        std::memset(dst + static_cast<long>(oh) * OW, 0, sizeof(float) * OW);
                        continue;
                    }
                    const float* src = in + (static_cast<long>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow + kw - P;
                        dst[static_cast<long>(oh) * OW + ow] =
                            (iw < 0 || iw >= W) ? 0.0f : src[iw];
                    }
                }
            }
        }
    }
}

// Scatter-adds a {C*KH*KW, OH*OW} gradient matrix back onto one image.
void col2im_add(const float* col, float* in_grad, int C, int H, int W, int KH, int KW, int P,
                int OH, int OW) {
    for (int c = 0; c < C; ++c) {
        for (int kh = 0; kh < KH; ++kh) {
            for (int kw = 0; kw < KW; ++kw) {
                const float* src = col + (static_cast<long>(c) * KH * KW + kh * KW + kw) * OH * OW;
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh + kh - P;
                    if (ih < 0 || ih >= H) continue;
                    float* dst = in_grad + (static_cast<long>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow + kw - P;
                        if (iw >= 0 && iw < W) dst[iw] += src[static_cast<long>(oh) * OW + ow];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor::Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<long>(data.size())) {
        throw ShapeError("Tensor: shape " + biasmap::shape_str(shape) + " does not match buffer of " +
                         std::to_string(data.size()) + " elements");
    }
}

Tensor Tensor::zeros(std::vector<int> shape) {
    long n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
}

Tensor Tensor::full(std::vector<int> shape, float value) {
    long n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value));
}

long Tensor::numel() const { return static_cast<long>(data.size()); }

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return data[0];
}

std::string Tensor::shape_str() const { return biasmap::shape_str(shape); }

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '{';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << '}';
    return os.str();
}

enum class Op { leaf, conv2d, relu, maxpool2x2, flatten, dense, add, sub, scale, xent };

struct Tape::Node {
    Op op = Op::leaf;
    Tensor value;
    std::vector<float> grad;  // allocated lazily on first contribution
    bool requires_grad = false;
    int parent[3] = {-1, -1, -1};

    int pad = 0;
    float scale_factor = 1.0f;
    Reduction reduction = Reduction::sum;
    std::vector<int> aux_int;      // maxpool argmax indices / xent labels
    std::vector<float> aux_float;  // conv2d patch matrix (kept for weight grads) / xent probs
};

Tape::Tape() = default;
Tape::~Tape() = default;

Tape::Var Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Var v) {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
        throw std::logic_error("Tape: variable does not belong to this tape");
    return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
        throw std::logic_error("Tape: variable does not belong to this tape");
    return nodes_[v.id];
}

std::size_t Tape::size() const { return nodes_.size(); }

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::has_grad(Var v) const { return !node(v).grad.empty(); }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) throw std::logic_error("Tape::grad: no gradient recorded for this variable");
    return Tensor(n.value.shape, n.grad);
}

Tape::Var Tape::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

Tape::Var Tape::conv2d(Var xv, Var wv, Var bv, int pad) {
    const Tensor& x = value(xv);
    const Tensor& w = value(wv);
    const Tensor& b = value(bv);
    if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1 || pad < 0 ||
        x.shape[1] != w.shape[1] || b.shape[0] != w.shape[0]) {
        throw ShapeError("conv2d: incompatible shapes x=" + x.shape_str() + " w=" + w.shape_str() +
                         " b=" + b.shape_str() + " pad=" + std::to_string(pad));
    }
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int OC = w.shape[0], KH = w.shape[2], KW = w.shape[3];
    const int OH = H + 2 * pad - KH + 1, OW = W + 2 * pad - KW + 1;
    if (OH < 1 || OW < 1) {
        throw ShapeError("conv2d: kernel " + w.shape_str() + " with pad " + std::to_string(pad) +
                         " exceeds input " + x.shape_str());
    }
    const int kdim = C * KH * KW, plane = OH * OW;

    Node n;
    n.op = Op::conv2d;
    n.pad = pad;
    n.parent[0] = xv.id;
    n.parent[1] = wv.id;
    n.parent[2] = bv.id;
    n.requires_grad = requires_grad(xv) || requires_grad(wv) || requires_grad(bv);
    n.value = Tensor::zeros({N, OC, OH, OW});

    // The patch matrix is only kept when the weights need gradients.
    const bool keep_col = requires_grad(wv);
    if (keep_col) n.aux_float.resize(static_cast<std::size_t>(N) * kdim * plane);
    std::vector<float> scratch(keep_col ? 0 : static_cast<std::size_t>(kdim) * plane);

    for (int i = 0; i < N; ++i) {
        float* col = keep_col ? n.aux_float.data() + static_cast<long>(i) * kdim * plane
                              : scratch.data();
        im2col(x.data.data() + static_cast<long>(i) * C * H * W, col, C, H, W, KH, KW, pad, OH, OW);
        float* out = n.value.data.data() + static_cast<long>(i) * OC * plane;
        for (int oc = 0; oc < OC; ++oc) {
            float* row = out + static_cast<long>(oc) * plane;
            std::fill(row, row + plane, b.data[oc]);
        }
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, OC, plane, kdim, 1.0f,
                    w.data.data(), kdim, col, plane, 1.0f, out, plane);
    }
    return push(std::move(n));
}

Tape::Var Tape::relu(Var xv) {
    const Tensor& x = value(xv);
    Node n;
    n.op = Op::relu;
    n.parent[0] = xv.id;
    n.requires_grad = requires_grad(xv);
    n.value = x;
    for (float& v : n.value.data) v = v > 0.0f ? v : 0.0f;
    return push(std::move(n));
}

Tape::Var Tape::maxpool2x2(Var xv) {
    const Tensor& x = value(xv);
    if (x.rank() != 4 || x.shape[2] % 2 != 0 || x.shape[3] % 2 != 0) {
        throw ShapeError("maxpool2x2: input must be {N,C,H,W} with even H and W, got " +
                         x.shape_str());
    }
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int OH = H / 2, OW = W / 2;
    Node n;
    n.op = Op::maxpool2x2;
    n.parent[0] = xv.id;
    n.requires_grad = requires_grad(xv);
    n.value = Tensor::zeros({N, C, OH, OW});
    n.aux_int.resize(static_cast<std::size_t>(N) * C * OH * OW);
    for (long p = 0; p < static_cast<long>(N) * C; ++p) {
        const float* in = x.data.data() + p * H * W;
        float* out = n.value.data.data() + p * OH * OW;
        int* arg = n.aux_int.data() + p * OH * OW;
        for (int oh = 0; oh < OH; ++oh) {
            for (int ow = 0; ow < OW; ++ow) {
                // Scan in flat-index order; strict > keeps the first maximum.
                int best = (2 * oh) * W + 2 * ow;
                float bv = in[best];
                const int cands[3] = {(2 * oh) * W + 2 * ow + 1, (2 * oh + 1) * W + 2 * ow,
                                      (2 * oh + 1) * W + 2 * ow + 1};
                for (int c : cands) {
                    if (in[c] > bv) {
                        bv = in[c];
                        best = c;
                    }
                }
                out[oh * OW + ow] = bv;
                arg[oh * OW + ow] = static_cast<int>(p * H * W) + best;
            }
        }
    }
    return push(std::move(n));
}

Tape::Var Tape::flatten(Var xv) {
    const Tensor& x = value(xv);
    if (x.rank() != 4) throw ShapeError("flatten: input must be {N,C,H,W}, got " + x.shape_str());
    Node n;
    n.op = Op::flatten;
    n.parent[0] = xv.id;
    n.requires_grad = requires_grad(xv);
    n.value = Tensor({x.shape[0], x.shape[1] * x.shape[2] * x.shape[3]}, x.data);
    return push(std::move(n));
}

Tape::Var Tape::dense(Var xv, Var wv, Var bv) {
    const Tensor& x = value(xv);
    const Tensor& w = value(wv);
    const Tensor& b = value(bv);
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.shape[1] != w.shape[1] ||
        b.shape[0] != w.shape[0]) {
        throw ShapeError("dense: incompatible shapes x=" + x.shape_str() + " w=" + w.shape_str() +
                         " b=" + b.shape_str());
    }
    const int N = x.shape[0], D = x.shape[1], O = w.shape[0];
    Node n;
    n.op = Op::dense;
    n.parent[0] = xv.id;
    n.parent[1] = wv.id;
    n.parent[2] = bv.id;
    n.requires_grad = requires_grad(xv) || requires_grad(wv) || requires_grad(bv);
    n.value = Tensor::zeros({N, O});
    for (int i = 0; i < N; ++i) {
        std::memcpy(n.value.data.data() + static_cast<long>(i) * O, b.data.data(),
                    sizeof(float) * O);
    }
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, N, O, D, 1.0f, x.data.data(), D,
                w.data.data(), D, 1.0f, n.value.data.data(), O);
    return push(std::move(n));
}

Tape::Var Tape::add(Var av, Var bv) {
    const Tensor& a = value(av);
    const Tensor& b = value(bv);
    if (!a.same_shape(b))
        throw ShapeError("add: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Node n;
    n.op = Op::add;
    n.parent[0] = av.id;
    n.parent[1] = bv.id;
    n.requires_grad = requires_grad(av) || requires_grad(bv);
    n.value = a;
    for (long i = 0; i < a.numel(); ++i) n.value.data[i] += b.data[i];
    return push(std::move(n));
}

Tape::Var Tape::sub(Var av, Var bv) {
    const Tensor& a = value(av);
    const Tensor& b = value(bv);
    if (!a.same_shape(b))
        throw ShapeError("sub: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    Node n;
    n.op = Op::sub;
    n.parent[0] = av.id;
    n.parent[1] = bv.id;
    n.requires_grad = requires_grad(av) || requires_grad(bv);
    n.value = a;
    for (long i = 0; i < a.numel(); ++i) n.value.data[i] -= b.data[i];
    return push(std::move(n));
}

Tape::Var Tape::scale(Var av, float s) {
    Node n;
    n.op = Op::scale;
    n.parent[0] = av.id;
    n.scale_factor = s;
    n.requires_grad = requires_grad(av);
    n.value = value(av);
    for (float& v : n.value.data) v *= s;
    return push(std::move(n));
}

Tape::Var Tape::softmax_cross_entropy(Var lv, std::vector<int> labels, Reduction red) {
    const Tensor& logits = value(lv);
    if (logits.rank() != 2)
        throw ShapeError("softmax_cross_entropy: logits must be {N,K}, got " + logits.shape_str());
    const int N = logits.shape[0], K = logits.shape[1];
    if (static_cast<int>(labels.size()) != N) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(N));
    }
    for (int y : labels) {
        if (y < 0 || y >= K)
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) +
                                        " outside [0," + std::to_string(K) + ")");
    }
    Node n;
    n.op = Op::xent;
    n.parent[0] = lv.id;
    n.requires_grad = requires_grad(lv);
    n.reduction = red;
    n.aux_int = std::move(labels);
    n.aux_float.resize(static_cast<std::size_t>(N) * K);
    double total = 0.0;
    for (int i = 0; i < N; ++i) {
        const float* row = logits.data.data() + static_cast<long>(i) * K;
        double m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, static_cast<double>(row[k]));
        double sum = 0.0;
        for (int k = 0; k < K; ++k) sum += std::exp(row[k] - m);
        const double lse = m + std::log(sum);
        total += lse - row[n.aux_int[i]];
        float* probs = n.aux_float.data() + static_cast<long>(i) * K;
        for (int k = 0; k < K; ++k) probs[k] = static_cast<float>(std::exp(row[k] - lse));
    }
    if (red == Reduction::mean) total /= N;
    n.value = Tensor::scalar(static_cast<float>(total));
    return push(std::move(n));
}

void Tape::accumulate(int id, const std::vector<float>& contribution) {
    Node& p = nodes_[id];
    if (!p.requires_grad) return;
    if (p.grad.empty()) p.grad.assign(p.value.data.size(), 0.0f);
    for (std::size_t i = 0; i < contribution.size(); ++i) p.grad[i] += contribution[i];
}

void Tape::backward(Var loss) {
    Node& l = node(loss);
    if (nodes_.empty()) throw std::logic_error("backward: empty tape");
    if (backward_done_) throw std::logic_error("backward: tape already consumed; rebuild the forward pass");
    if (l.value.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + l.value.shape_str());
    backward_done_ = true;
    if (!l.requires_grad) return;  // nothing reachable wants gradients
    l.grad.assign(1, 1.0f);

    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.grad.empty() || n.op == Op::leaf) continue;
        switch (n.op) {
            case Op::conv2d: {
                Node& xp = nodes_[n.parent[0]];
                Node& wp = nodes_[n.parent[1]];
                Node& bp = nodes_[n.parent[2]];
                const Tensor& x = xp.value;
                const Tensor& w = wp.value;
                const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
                const int OC = w.shape[0], KH = w.shape[2], KW = w.shape[3];
                const int OH = H + 2 * n.pad - KH + 1, OW = W + 2 * n.pad - KW + 1;
                const int kdim = C * KH * KW, plane = OH * OW;
                if (xp.requires_grad) {
                    if (xp.grad.empty()) xp.grad.assign(xp.value.data.size(), 0.0f);
                    std::vector<float> dcol(static_cast<std::size_t>(kdim) * plane);
                    for (int img = 0; img < N; ++img) {
                        const float* dy = n.grad.data() + static_cast<long>(img) * OC * plane;
                        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, kdim, plane, OC, 1.0f,
                                    w.data.data(), kdim, dy, plane, 0.0f, dcol.data(), plane);
                        col2im_add(dcol.data(), xp.grad.data() + static_cast<long>(img) * C * H * W,
                                   C, H, W, KH, KW, n.pad, OH, OW);
                    }
                }
                if (wp.requires_grad) {
                    if (wp.grad.empty()) wp.grad.assign(wp.value.data.size(), 0.0f);
                    for (int img = 0; img < N; ++img) {
                        const float* dy = n.grad.data() + static_cast<long>(img) * OC * plane;
                        const float* col = n.aux_float.data() + static_cast<long>(img) * kdim * plane;
                        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, OC, kdim, plane, 1.0f,
                                    dy, plane, col, plane, 1.0f, wp.grad.data(), kdim);
                    }
                }
                if (bp.requires_grad) {
                    if (bp.grad.empty()) bp.grad.assign(bp.value.data.size(), 0.0f);
                    for (int img = 0; img < N; ++img) {
                        for (int oc = 0; oc < OC; ++oc) {
                            const float* dy = n.grad.data() + (static_cast<long>(img) * OC + oc) * plane;
                            float s = 0.0f;
                            for (int p = 0; p < plane; ++p) s += dy[p];
                            bp.grad[oc] += s;
                        }
                    }
                }
                break;
            }
            case Op::relu: {
                Node& xp = nodes_[n.parent[0]];
                if (!xp.requires_grad) break;
                if (xp.grad.empty()) xp.grad.assign(xp.value.data.size(), 0.0f);
                for (std::size_t k = 0; k < n.grad.size(); ++k) {
                    if (n.value.data[k] > 0.0f) xp.grad[k] += n.grad[k];
                }
                break;
            }
            case Op::maxpool2x2: {
                Node& xp = nodes_[n.parent[0]];
                if (!xp.requires_grad) break;
                if (xp.grad.empty()) xp.grad.assign(xp.value.data.size(), 0.0f);
                for (std::size_t k = 0; k < n.grad.size(); ++k) xp.grad[n.aux_int[k]] += n.grad[k];
                break;
            }
            case Op::flatten: {
                Node& xp = nodes_[n.parent[0]];
                if (!xp.requires_grad) break;
                if (xp.grad.empty()) xp.grad.assign(xp.value.data.size(), 0.0f);
                for (std::size_t k = 0; k < n.grad.size(); ++k) xp.grad[k] += n.grad[k];
                break;
            }
            case Op::dense: {
                Node& xp = nodes_[n.parent[0]];
                Node& wp = nodes_[n.parent[1]];
                Node& bp = nodes_[n.parent[2]];
                const int N = xp.value.shape[0], D = xp.value.shape[1], O = wp.value.shape[0];
                if (xp.requires_grad) {
                    if (xp.grad.empty()) xp.grad.assign(xp.value.data.size(), 0.0f);
                    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, N, D, O, 1.0f,
                                n.grad.data(), O, wp.value.data.data(), D, 1.0f, xp.grad.data(), D);
                }
                if (wp.requires_grad) {
                    if (wp.grad.empty()) wp.grad.assign(wp.value.data.size(), 0.0f);
                    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, O, D, N, 1.0f,
                                n.grad.data(), O, xp.value.data.data(), D, 1.0f, wp.grad.data(), D);
                }
                if (bp.requires_grad) {
                    if (bp.grad.empty()) bp.grad.assign(bp.value.data.size(), 0.0f);
                    for (int img = 0; img < N; ++img)
                        for (int o = 0; o < O; ++o) bp.grad[o] += n.grad[static_cast<long>(img) * O + o];
                }
                break;
            }
            case Op::add: {
                accumulate(n.parent[0], n.grad);
                accumulate(n.parent[1], n.grad);
                break;
            }
            case Op::sub: {
                accumulate(n.parent[0], n.grad);
                Node& bp = nodes_[n.parent[1]];
                if (bp.requires_grad) {
                    if (bp.grad.empty()) bp.grad.assign(bp.value.data.size(), 0.0f);
                    for (std::size_t k = 0; k < n.grad.size(); ++k) bp.grad[k] -= n.grad[k];
                }
                break;
            }
            case Op::scale: {
                Node& xp = nodes_[n.parent[0]];
                if (!xp.requires_grad) break;
                if (xp.grad.empty()) xp.grad.assign(xp.value.data.size(), 0.0f);
                for (std::size_t k = 0; k < n.grad.size(); ++k)
                    xp.grad[k] += n.scale_factor * n.grad[k];
                break;
            }
            case Op::xent: {
                Node& lp = nodes_[n.parent[0]];
                if (!lp.requires_grad) break;
                if (lp.grad.empty()) lp.grad.assign(lp.value.data.size(), 0.0f);
                const int N = lp.value.shape[0], K = lp.value.shape[1];
                const float gscale =
                    n.grad[0] * (n.reduction == Reduction::mean ? 1.0f / static_cast<float>(N) : 1.0f);
                for (int img = 0; img < N; ++img) {
                    const float* probs = n.aux_float.data() + static_cast<long>(img) * K;
                    float* dst = lp.grad.data() + static_cast<long>(img) * K;
                    const int y = n.aux_int[img];
                    for (int k = 0; k < K; ++k) {
                        dst[k] += gscale * (probs[k] - (k == y ? 1.0f : 0.0f));
                    }
                }
                break;
            }
            case Op::leaf:
                break;
        }
    }
}

}  // namespace biasmap
