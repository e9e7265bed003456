#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "biasmap/tensor.hpp"

namespace biasmap {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointMeta {
    std::uint64_t seed = 0;
    int epochs = 0;
    std::string role = "clean";  // "clean" or "backdoor"
};

// Which class(es) the attack loss targets. `paired` descends
// J(target) - J(source).
struct LossSpec {
    enum class Kind { targeted, paired };
    Kind kind = Kind::targeted;
    int target = 0;
    int source = -1;
    void validate() const;
};

// conv(1->16,5x5,pad2) -> relu -> pool2 -> conv(16->32,5x5,pad2) -> relu
// -> pool2 -> flatten -> dense(1568->10).
class CnnModel {
public:
    Tensor conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b;

    // Deterministic uniform fan-in initialization (+-sqrt(1/fan_in)).
    static CnnModel init(std::uint64_t seed);

    static const char* fingerprint();
    long param_count() const;

    // Tape forward; x must be a {N,1,28,28} variable on `tape`. Parameters
    // enter the tape as leaves; `params_require_grad` controls whether the
    // backward pass computes weight gradients. When `param_vars` is given it
    // receives the parameter leaves in param_tensors() order.
    Tape::Var forward(Tape& tape, Tape::Var x, bool params_require_grad = false,
                      std::vector<Tape::Var>* param_vars = nullptr) const;

    // Inference without gradient bookkeeping. Accepts {1,28,28} (returns
    // {10}) or {N,1,28,28} (returns {N,10}).
    Tensor logits(const Tensor& x) const;
    int predict(const Tensor& image) const;
    std::vector<int> predict_batch(const Tensor& images) const;

    // Softmax cross-entropy of one image against category y.
    float loss_value(const Tensor& image, int y) const;

    // Flat little-endian parameter payload in a fixed order.
    std::vector<float> flat_params() const;
    void set_flat_params(const std::vector<float>& flat);

    // Mutable parameter list in payload order, for the trainer.
    std::vector<Tensor*> param_tensors();
    std::vector<const Tensor*> param_tensors() const;
};

// Gradient of the attack loss with respect to the input. Parameters are
// left untouched. Batched inputs use a summed loss, so each sample's
// gradient is identical to its single-sample computation.
Tensor grad_wrt_input(const CnnModel& m, const Tensor& x, const LossSpec& spec);

void save_checkpoint(const CnnModel& m, const CheckpointMeta& meta, const std::string& path);
struct LoadedCheckpoint {
    CnnModel model;
    CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace biasmap
