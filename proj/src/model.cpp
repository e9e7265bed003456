#include "biasmap/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "biasmap/rng.hpp"
#include "json.hpp"

namespace biasmap {

namespace {

constexpr char kFingerprint[] = "cnn28:conv5x5x1x16p2-pool2-conv5x5x16x32p2-pool2-fc1568x10";
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'B', 'M', 'C', 'K'};

Tensor uniform_init(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    for (float& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}

// Promotes {1,28,28} to a singleton batch; rejects anything else.
Tensor as_batch(const Tensor& x) {
    if (x.rank() == 3 && x.shape[0] == 1 && x.shape[1] == 28 && x.shape[2] == 28) {
        return Tensor({1, 1, 28, 28}, x.data);
    }
    if (x.rank() == 4 && x.shape[1] == 1 && x.shape[2] == 28 && x.shape[3] == 28) return x;
    throw ShapeError("CnnModel: expected {1,28,28} or {N,1,28,28} input, got " + x.shape_str());
}

}  // namespace

void LossSpec::validate() const {
    if (target < 0 || target > 9)
        throw std::invalid_argument("LossSpec: target category " + std::to_string(target) +
                                    " outside 0-9");
    if (kind == Kind::paired) {
        if (source < 0 || source > 9)
            throw std::invalid_argument("LossSpec: source category " + std::to_string(source) +
                                        " outside 0-9");
        if (source == target)
            throw std::invalid_argument("LossSpec: paired loss requires source != target");
    }
}

const char* CnnModel::fingerprint() { return kFingerprint; }

CnnModel CnnModel::init(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0xc44));
    CnnModel m;
    m.conv1_w = uniform_init({16, 1, 5, 5}, 1 * 5 * 5, rng);
    m.conv1_b = uniform_init({16}, 1 * 5 * 5, rng);
    m.conv2_w = uniform_init({32, 16, 5, 5}, 16 * 5 * 5, rng);
    m.conv2_b = uniform_init({32}, 16 * 5 * 5, rng);
    m.fc_w = uniform_init({10, 1568}, 1568, rng);
    m.fc_b = uniform_init({10}, 1568, rng);
    return m;
}

long CnnModel::param_count() const {
    long n = 0;
    for (const Tensor* t : param_tensors()) n += t->numel();
    return n;
}

std::vector<Tensor*> CnnModel::param_tensors() {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc_w, &fc_b};
}

std::vector<const Tensor*> CnnModel::param_tensors() const {
    return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc_w, &fc_b};
}

Tape::Var CnnModel::forward(Tape& tape, Tape::Var x, bool params_require_grad,
                            std::vector<Tape::Var>* param_vars) const {
    const bool rg = params_require_grad;
    auto c1w = tape.leaf(conv1_w, rg), c1b = tape.leaf(conv1_b, rg);
    auto c2w = tape.leaf(conv2_w, rg), c2b = tape.leaf(conv2_b, rg);
    auto fw = tape.leaf(fc_w, rg), fb = tape.leaf(fc_b, rg);
    if (param_vars) *param_vars = {c1w, c1b, c2w, c2b, fw, fb};
    auto h = tape.maxpool2x2(tape.relu(tape.conv2d(x, c1w, c1b, 2)));
    h = tape.maxpool2x2(tape.relu(tape.conv2d(h, c2w, c2b, 2)));
    return tape.dense(tape.flatten(h), fw, fb);
}

Tensor CnnModel::logits(const Tensor& x) const {
    const bool single = x.rank() == 3;
    Tape tape;
    auto out = forward(tape, tape.leaf(as_batch(x), false), false);
    Tensor result = tape.value(out);
    if (single) return Tensor({10}, result.data);
    return result;
}

int CnnModel::predict(const Tensor& image) const {
    const Tensor l = logits(image);
    return static_cast<int>(std::max_element(l.data.begin(), l.data.begin() + 10) - l.data.begin());
}

std::vector<int> CnnModel::predict_batch(const Tensor& images) const {
    const Tensor l = logits(as_batch(images));
    const int n = l.shape[0];
    std::vector<int> preds(n);
    for (int i = 0; i < n; ++i) {
        const float* row = l.data.data() + static_cast<long>(i) * 10;
        preds[i] = static_cast<int>(std::max_element(row, row + 10) - row);
    }
    return preds;
}

float CnnModel::loss_value(const Tensor& image, int y) const {
    if (y < 0 || y > 9)
        throw std::invalid_argument("loss_value: category " + std::to_string(y) + " outside 0-9");
    Tape tape;
    auto logits_var = forward(tape, tape.leaf(as_batch(image), false), false);
    auto loss = tape.softmax_cross_entropy(logits_var, {y}, Reduction::mean);
    return tape.value(loss).item();
}

Tensor grad_wrt_input(const CnnModel& m, const Tensor& x, const LossSpec& spec) {
    spec.validate();
    const bool single = x.rank() == 3;
    Tape tape;
    auto xv = tape.leaf(as_batch(x), true);
    auto logits_var = m.forward(tape, xv, false);
    const int n = tape.value(logits_var).shape[0];
    // Sum reduction keeps per-sample gradients independent of batch size.
    auto loss = tape.softmax_cross_entropy(logits_var, std::vector<int>(n, spec.target),
                                           Reduction::sum);
    if (spec.kind == LossSpec::Kind::paired) {
        auto source_loss = tape.softmax_cross_entropy(logits_var, std::vector<int>(n, spec.source),
                                                      Reduction::sum);
        loss = tape.sub(loss, source_loss);
    }
    tape.backward(loss);
    Tensor g = tape.grad(xv);
    if (single) return Tensor({1, 28, 28}, std::move(g.data));
    return g;
}

std::vector<float> CnnModel::flat_params() const {
    std::vector<float> flat;
    flat.reserve(param_count());
    for (const Tensor* t : param_tensors()) flat.insert(flat.end(), t->data.begin(), t->data.end());
    return flat;
}

void CnnModel::set_flat_params(const std::vector<float>& flat) {
    if (static_cast<long>(flat.size()) != param_count())
        throw CheckpointError("parameter payload has " + std::to_string(flat.size()) +
                              " floats, expected " + std::to_string(param_count()));
    std::size_t off = 0;
    for (Tensor* t : param_tensors()) {
        std::copy(flat.begin() + off, flat.begin() + off + t->numel(), t->data.begin());
        off += t->numel();
    }
}

void save_checkpoint(const CnnModel& m, const CheckpointMeta& meta, const std::string& path) {
    nlohmann::json header{{"version", kCheckpointVersion},
                          {"fingerprint", CnnModel::fingerprint()},
                          {"param_count", m.param_count()},
                          {"meta",
                           {{"seed", meta.seed}, {"epochs", meta.epochs}, {"role", meta.role}}}};
    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot write " + path);
    f.write(kCheckpointMagic, 4);
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    unsigned char lenb[4] = {static_cast<unsigned char>(hlen), static_cast<unsigned char>(hlen >> 8),
                             static_cast<unsigned char>(hlen >> 16),
                             static_cast<unsigned char>(hlen >> 24)};
    f.write(reinterpret_cast<char*>(lenb), 4);
    f.write(hs.data(), hs.size());
    const std::vector<float> flat = m.flat_params();
    f.write(reinterpret_cast<const char*>(flat.data()), flat.size() * sizeof(float));
    if (!f) throw CheckpointError("write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    char magic[4];
    unsigned char lenb[4];
    if (!f.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw CheckpointError(path + ": not a checkpoint file (bad magic)");
    if (!f.read(reinterpret_cast<char*>(lenb), 4))
        throw CheckpointError(path + ": truncated header");
    const std::uint32_t hlen =
        lenb[0] | (lenb[1] << 8) | (lenb[2] << 16) | (std::uint32_t(lenb[3]) << 24);
    std::string hs(hlen, '\0');
    if (!f.read(hs.data(), hlen)) throw CheckpointError(path + ": truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception&) {
        throw CheckpointError(path + ": corrupt header");
    }
    if (header.at("version").get<std::uint32_t>() != kCheckpointVersion)
        throw CheckpointError(path + ": unsupported checkpoint version " +
                              header.at("version").dump());
    if (header.at("fingerprint").get<std::string>() != CnnModel::fingerprint())
        throw CheckpointError(path + ": architecture fingerprint mismatch (got " +
                              header.at("fingerprint").get<std::string>() + ")");

    LoadedCheckpoint out{CnnModel::init(0), {}};
    const long count = header.at("param_count").get<long>();
    if (count != out.model.param_count())
        throw CheckpointError(path + ": parameter count mismatch");
    std::vector<float> flat(count);
    if (!f.read(reinterpret_cast<char*>(flat.data()), count * sizeof(float)))
        throw CheckpointError(path + ": corrupt payload (truncated)");
    f.peek();
    if (!f.eof()) throw CheckpointError(path + ": corrupt payload (trailing bytes)");
    out.model.set_flat_params(flat);
    const auto& meta = header.at("meta");
    out.meta.seed = meta.at("seed").get<std::uint64_t>();
    out.meta.epochs = meta.at("epochs").get<int>();
    out.meta.role = meta.at("role").get<std::string>();
    return out;
}

}  // namespace biasmap
