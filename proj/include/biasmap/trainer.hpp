#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "biasmap/data.hpp"
#include "biasmap/model.hpp"

namespace biasmap {

struct TrainingDivergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    int epochs = 3;
    int batch_size = 64;
    float learning_rate = 0.01f;
    float momentum = 0.9f;
    std::uint64_t seed = 0;
    std::string role = "clean";  // "clean" or "finetune"

    void validate() const;
};

struct HistoryEntry {
    int epoch = 0;
    std::string split;  // "train" or "test"
    double loss = 0.0;
    double accuracy = 0.0;
    std::string note;  // optional warning text
};

struct TrainResult {
    CnnModel model;
    std::vector<HistoryEntry> history;
};

// Row = true label, column = predicted label.
struct ConfusionMatrix {
    std::array<std::array<long, kCategories>, kCategories> counts{};

    long total() const;
    long trace() const;
    double accuracy() const { return total() == 0 ? 0.0 : static_cast<double>(trace()) / total(); }
    std::array<long, kCategories> row_sums() const;
};

// SGD with momentum: v <- mu*v + g; theta <- theta - lr*v. Deterministic
// given the seed; aborts on a non-finite batch loss.
TrainResult train(const CnnModel& start, const LabeledDataset& ds, const TrainConfig& cfg);

// Continues from an already-trained model. epochs == 0 returns a copy.
TrainResult finetune(const CnnModel& trained, const LabeledDataset& ds, const TrainConfig& cfg);

ConfusionMatrix confusion(const CnnModel& m, const LabeledDataset& ds);
// Generic variant used for oracle/stub classifiers in tests.
ConfusionMatrix confusion(const std::function<int(const Tensor&)>& predict,
                          const LabeledDataset& ds);

// Fraction of poisoned-provenance samples predicted as `target`.
double attack_success_rate(const CnnModel& m, const LabeledDataset& poisoned_test, int target);

struct MeanDigitMaps {
    std::array<Tensor, kCategories> maps;  // each {1,28,28}
    std::array<long, kCategories> counts{};
    bool empty(int category) const { return counts[category] == 0; }
};

MeanDigitMaps mean_digit_maps(const LabeledDataset& ds);

std::string history_to_jsonl(const std::vector<HistoryEntry>& history);

}  // namespace biasmap
