#include "biasmap/trainer.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace biasmap {

namespace {

// Gathers dataset samples into one {n,1,28,28} batch tensor.
Tensor gather_batch(const LabeledDataset& ds, const std::vector<int>& order, std::size_t begin,
                    std::size_t end, std::vector<int>* labels_out) {
    const int n = static_cast<int>(end - begin);
    Tensor batch = Tensor::zeros({n, 1, kImageRows, kImageCols});
    labels_out->resize(n);
    const long plane = kImageRows * kImageCols;
    for (int i = 0; i < n; ++i) {
        const int src = order[begin + i];
        std::copy(ds.images[src].data.begin(), ds.images[src].data.end(),
                  batch.data.begin() + i * plane);
        (*labels_out)[i] = ds.labels[src];
    }
    return batch;
}

struct MomentumState {
    std::vector<std::vector<float>> velocity;

    explicit MomentumState(const CnnModel& m) {
        for (const Tensor* t : m.param_tensors()) velocity.emplace_back(t->numel(), 0.0f);
    }

    void step(CnnModel& m, const std::vector<Tensor>& grads, float lr, float mu) {
        auto params = m.param_tensors();
        for (std::size_t p = 0; p < params.size(); ++p) {
            std::vector<float>& v = velocity[p];
            const std::vector<float>& g = grads[p].data;
            std::vector<float>& theta = params[p]->data;
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] = mu * v[i] + g[i];
                theta[i] -= lr * v[i];
            }
        }
    }
};

TrainResult run_epochs(CnnModel model, const LabeledDataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (ds.size() == 0) throw std::invalid_argument("train: empty dataset");

    TrainResult result{std::move(model), {}};
    MomentumState momentum(result.model);

    std::vector<int> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        long seen = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            std::vector<int> labels;
            Tensor batch = gather_batch(ds, order, begin, end, &labels);

            Tape tape;
            auto xv = tape.leaf(std::move(batch), false);
            std::vector<Tape::Var> param_vars;
            auto logits = result.model.forward(tape, xv, true, &param_vars);
            auto loss = tape.softmax_cross_entropy(logits, labels, Reduction::mean);
            const float batch_loss = tape.value(loss).item();
            if (!std::isfinite(batch_loss)) {
                throw TrainingDivergence("training diverged: non-finite loss in epoch " +
                                         std::to_string(epoch) + " at sample offset " +
                                         std::to_string(begin));
            }
            tape.backward(loss);

            std::vector<Tensor> grads;
            grads.reserve(param_vars.size());
            for (Tape::Var v : param_vars) grads.push_back(tape.grad(v));
            momentum.step(result.model, grads, cfg.learning_rate, cfg.momentum);

            epoch_loss += static_cast<double>(batch_loss) * static_cast<double>(end - begin);
            seen += static_cast<long>(end - begin);
        }
        result.history.push_back({epoch, "train", epoch_loss / seen, 0.0, ""});
    }
    return result;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (!(learning_rate >= 0.0f)) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
    if (!(momentum >= 0.0f && momentum < 1.0f))
        throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    if (role != "clean" && role != "finetune")
        throw std::invalid_argument("TrainConfig: role must be 'clean' or 'finetune'");
}

TrainResult train(const CnnModel& start, const LabeledDataset& ds, const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    return run_epochs(start, ds, cfg);
}

TrainResult finetune(const CnnModel& trained, const LabeledDataset& ds, const TrainConfig& cfg) {
    if (cfg.epochs == 0) return TrainResult{trained, {}};
    return run_epochs(trained, ds, cfg);
}

long ConfusionMatrix::total() const {
    long t = 0;
    for (const auto& row : counts)
        for (long c : row) t += c;
    return t;
}

long ConfusionMatrix::trace() const {
    long t = 0;
    for (int i = 0; i < kCategories; ++i) t += counts[i][i];
    return t;
}

std::array<long, kCategories> ConfusionMatrix::row_sums() const {
    std::array<long, kCategories> sums{};
    for (int i = 0; i < kCategories; ++i)
        for (int j = 0; j < kCategories; ++j) sums[i] += counts[i][j];
    return sums;
}

ConfusionMatrix confusion(const CnnModel& m, const LabeledDataset& ds) {
    ConfusionMatrix cm;
    const long plane = kImageRows * kImageCols;
    constexpr int kEvalBatch = 256;
    for (std::size_t begin = 0; begin < ds.size(); begin += kEvalBatch) {
        const std::size_t end = std::min(ds.size(), begin + kEvalBatch);
        Tensor batch = Tensor::zeros({static_cast<int>(end - begin), 1, kImageRows, kImageCols});
        for (std::size_t i = begin; i < end; ++i) {
            std::copy(ds.images[i].data.begin(), ds.images[i].data.end(),
                      batch.data.begin() + static_cast<long>(i - begin) * plane);
        }
        const std::vector<int> preds = m.predict_batch(batch);
        for (std::size_t i = begin; i < end; ++i) {
            cm.counts[ds.labels[i]][preds[i - begin]]++;
        }
    }
    return cm;
}

ConfusionMatrix confusion(const std::function<int(const Tensor&)>& predict,
                          const LabeledDataset& ds) {
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < ds.size(); ++i) cm.counts[ds.labels[i]][predict(ds.images[i])]++;
    return cm;
}

double attack_success_rate(const CnnModel& m, const LabeledDataset& poisoned_test, int target) {
    long poisoned = 0, hit = 0;
    constexpr int kEvalBatch = 256;
    std::vector<int> idx;
    for (std::size_t i = 0; i < poisoned_test.size(); ++i) {
        if (poisoned_test.provenance[i].poisoned) idx.push_back(static_cast<int>(i));
    }
    const long plane = kImageRows * kImageCols;
    for (std::size_t begin = 0; begin < idx.size(); begin += kEvalBatch) {
        const std::size_t end = std::min(idx.size(), begin + kEvalBatch);
        Tensor batch = Tensor::zeros({static_cast<int>(end - begin), 1, kImageRows, kImageCols});
        for (std::size_t i = begin; i < end; ++i) {
            const Tensor& img = poisoned_test.images[idx[i]];
            std::copy(img.data.begin(), img.data.end(),
                      batch.data.begin() + static_cast<long>(i - begin) * plane);
        }
        for (int p : m.predict_batch(batch)) {
            ++poisoned;
            if (p == target) ++hit;
        }
    }
    return poisoned == 0 ? 0.0 : static_cast<double>(hit) / poisoned;
}

MeanDigitMaps mean_digit_maps(const LabeledDataset& ds) {
    MeanDigitMaps out;
    std::array<std::vector<double>, kCategories> sums;
    for (auto& s : sums) s.assign(kImageRows * kImageCols, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int y = ds.labels[i];
        out.counts[y]++;
        const auto& px = ds.images[i].data;
        for (std::size_t p = 0; p < px.size(); ++p) sums[y][p] += px[p];
    }
    for (int c = 0; c < kCategories; ++c) {
        out.maps[c] = Tensor::zeros({1, kImageRows, kImageCols});
        if (out.counts[c] == 0) continue;
        for (std::size_t p = 0; p < sums[c].size(); ++p) {
            out.maps[c].data[p] = static_cast<float>(sums[c][p] / out.counts[c]);
        }
    }
    return out;
}

std::string history_to_jsonl(const std::vector<HistoryEntry>& history) {
    std::string out;
    for (const HistoryEntry& h : history) {
        nlohmann::json j{{"epoch", h.epoch}, {"split", h.split}, {"loss", h.loss},
                         {"accuracy", h.accuracy}};
        if (!h.note.empty()) j["note"] = h.note;
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace biasmap
