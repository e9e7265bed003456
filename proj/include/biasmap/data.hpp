#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "biasmap/rng.hpp"
#include "biasmap/tensor.hpp"

namespace biasmap {

// Raised for malformed IDX files; the message names the offending file.
struct IdxError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Where a sample came from. Poisoned samples carry the id of the trigger
// that produced them.
struct SampleOrigin {
    bool poisoned = false;
    std::uint32_t trigger_id = 0;
};

// Images are {1,28,28} with pixels in [0,1]; labels are digits 0-9.
struct LabeledDataset {
    std::vector<Tensor> images;
    std::vector<int> labels;
    std::vector<SampleOrigin> provenance;

    std::size_t size() const { return images.size(); }
    void push(Tensor image, int label, SampleOrigin origin = {});
    // Indices of samples whose label equals `category`.
    std::vector<int> indices_of_label(int category) const;
};

constexpr int kImageRows = 28;
constexpr int kImageCols = 28;
constexpr int kCategories = 10;

// Reads an IDX image/label file pair (gzipped or raw, detected by magic
// bytes). Pixels are scaled by 1/255; every sample starts pristine.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Writes raw (ungzipped) IDX files; byte-for-byte inverse of load_idx on
// data that originated from IDX bytes.
void save_idx(const LabeledDataset& ds, const std::string& images_path,
              const std::string& labels_path);

// n distinct indices into [0, size), deterministic for a fixed seed.
std::vector<int> sample_indices(std::size_t size, std::size_t n, std::uint64_t seed);

// Materialized without-replacement sample of n elements.
LabeledDataset sample_batch(const LabeledDataset& ds, std::size_t n, std::uint64_t seed);

// Deterministic stand-in for MNIST: antialiased vector digits with random
// affine jitter, centered like MNIST with blank borders. Used by the test
// suite and by `gen-data` when no real IDX files are supplied.
LabeledDataset synthesize_digits(int count, std::uint64_t seed);

}  // namespace biasmap
