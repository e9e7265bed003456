#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace biasmap {

// Raised when operator inputs do not satisfy the operator's shape contract.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major float tensor. A plain value type; gradient bookkeeping
// lives on the Tape, not here.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<float> d);

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, float value);
    static Tensor scalar(float value) { return Tensor({}, {value}); }

    long numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    bool is_scalar() const { return numel() == 1 && shape.empty(); }

    float item() const;

    std::string shape_str() const;
};

std::string shape_str(const std::vector<int>& shape);

enum class Reduction { sum, mean };

// Records forward operators and replays them in reverse for gradients.
// Fixed operator set: conv2d (stride 1, zero padding), maxpool2x2, relu,
// dense, flatten, softmax cross-entropy, and elementwise add/sub/scale.
// conv2d and dense are backed by BLAS sgemm internally; the operator
// contracts (and the test oracles) are independent of that choice.
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad);

    // x: {N,C,H,W}, w: {OC,C,KH,KW}, b: {OC}. Stride 1, zero padding `pad`.
    Var conv2d(Var x, Var w, Var b, int pad);
    Var relu(Var x);
    // x: {N,C,H,W} with even H and W. Ties go to the lowest flat index.
    Var maxpool2x2(Var x);
    // {N,C,H,W} -> {N, C*H*W}
    Var flatten(Var x);
    // x: {N,D}, w: {O,D}, b: {O} -> {N,O}
    Var dense(Var x, Var w, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, float s);
    // logits: {N,K}, labels: N entries in [0,K). Returns a scalar.
    Var softmax_cross_entropy(Var logits, std::vector<int> labels, Reduction red);

    const Tensor& value(Var v) const;
    // Gradient of the last backward() target with respect to `v`.
    // Only populated for requires-grad nodes reached by backward().
    Tensor grad(Var v) const;
    bool has_grad(Var v) const;
    bool requires_grad(Var v) const;

    // Reverse pass from a scalar loss. May be called once per tape.
    void backward(Var loss);

    std::size_t size() const;

private:
    struct Node;
    std::vector<Node> nodes_;
    bool backward_done_ = false;

    Var push(Node node);
    Node& node(Var v);
    const Node& node(Var v) const;
    void accumulate(int id, const std::vector<float>& contribution);
};

}  // namespace biasmap
