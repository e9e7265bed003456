#include "biasmap/data.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace biasmap {

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IdxError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in, const std::string& path) {
    z_stream zs{};
    if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw IdxError("zlib init failed for " + path);
    std::vector<unsigned char> out;
    out.reserve(in.size() * 4);
    unsigned char buf[1 << 16];
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = buf;
        zs.avail_out = sizeof(buf);
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw IdxError("corrupt gzip stream in " + path);
        }
        out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
    }
    inflateEnd(&zs);
    return out;
}

// Loads raw bytes, transparently gunzipping when the gzip magic is present.
std::vector<unsigned char> read_idx_bytes(const std::string& path) {
    std::vector<unsigned char> bytes = read_file_bytes(path);
    if (bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b) return gunzip(bytes, path);
    return bytes;
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off) {
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

void write_be32(std::ofstream& f, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace

void LabeledDataset::push(Tensor image, int label, SampleOrigin origin) {
    images.push_back(std::move(image));
    labels.push_back(label);
    provenance.push_back(origin);
}

std::vector<int> LabeledDataset::indices_of_label(int category) const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == category) idx.push_back(static_cast<int>(i));
    }
    return idx;
}

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto ib = read_idx_bytes(images_path);
    const auto lb = read_idx_bytes(labels_path);

    if (ib.size() < 16) throw IdxError("truncated header in " + images_path);
    if (lb.size() < 8) throw IdxError("truncated header in " + labels_path);
    if (read_be32(ib, 0) != kImagesMagic)
        throw IdxError("magic mismatch in " + images_path + " (expected 0x00000803)");
    if (read_be32(lb, 0) != kLabelsMagic)
        throw IdxError("magic mismatch in " + labels_path + " (expected 0x00000801)");

    const std::uint32_t n_images = read_be32(ib, 4);
    const std::uint32_t rows = read_be32(ib, 8);
    const std::uint32_t cols = read_be32(ib, 12);
    const std::uint32_t n_labels = read_be32(lb, 4);
    if (n_images != n_labels) {
        throw IdxError("count mismatch: " + images_path + " has " + std::to_string(n_images) +
                       " images but " + labels_path + " has " + std::to_string(n_labels) +
                       " labels");
    }
    if (rows != kImageRows || cols != kImageCols) {
        throw IdxError(images_path + ": expected 28x28 images, got " + std::to_string(rows) + "x" +
                       std::to_string(cols));
    }
    const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
    if (ib.size() != 16 + pixels * n_images) throw IdxError("truncated payload in " + images_path);
    if (lb.size() != 8 + n_labels) throw IdxError("truncated payload in " + labels_path);

    LabeledDataset ds;
    ds.images.reserve(n_images);
    ds.labels.reserve(n_images);
    ds.provenance.assign(n_images, SampleOrigin{});
    for (std::uint32_t i = 0; i < n_images; ++i) {
        Tensor img = Tensor::zeros({1, kImageRows, kImageCols});
        const unsigned char* src = ib.data() + 16 + static_cast<std::size_t>(i) * pixels;
        for (std::size_t p = 0; p < pixels; ++p) img.data[p] = src[p] * (1.0f / 255.0f);
        const int label = lb[8 + i];
        if (label > 9) throw IdxError(labels_path + ": label " + std::to_string(label) + " outside 0-9");
        ds.images.push_back(std::move(img));
        ds.labels.push_back(label);
    }
    return ds;
}

void save_idx(const LabeledDataset& ds, const std::string& images_path,
              const std::string& labels_path) {
    std::ofstream fi(images_path, std::ios::binary);
    std::ofstream fl(labels_path, std::ios::binary);
    if (!fi) throw IdxError("cannot write " + images_path);
    if (!fl) throw IdxError("cannot write " + labels_path);
    const std::uint32_t n = static_cast<std::uint32_t>(ds.size());
    write_be32(fi, kImagesMagic);
    write_be32(fi, n);
    write_be32(fi, kImageRows);
    write_be32(fi, kImageCols);
    write_be32(fl, kLabelsMagic);
    write_be32(fl, n);
    std::vector<unsigned char> row(kImageRows * kImageCols);
    for (std::uint32_t i = 0; i < n; ++i) {
        const Tensor& img = ds.images[i];
        for (std::size_t p = 0; p < row.size(); ++p) {
            float v = img.data[p] * 255.0f;
            v = v < 0.0f ? 0.0f : (v > 255.0f ? 255.0f : v);
            row[p] = static_cast<unsigned char>(v + 0.5f);
        }
        fi.write(reinterpret_cast<char*>(row.data()), row.size());
        const unsigned char lab = static_cast<unsigned char>(ds.labels[i]);
        fl.write(reinterpret_cast<const char*>(&lab), 1);
    }
}

std::vector<int> sample_indices(std::size_t size, std::size_t n, std::uint64_t seed) {
    if (n > size) {
        throw std::invalid_argument("sample_indices: requested " + std::to_string(n) +
                                    " of " + std::to_string(size) + " samples");
    }
    std::vector<int> all(size);
    for (std::size_t i = 0; i < size; ++i) all[i] = static_cast<int>(i);
    Rng rng(seed);
    // Partial Fisher-Yates: the first n slots are the sample.
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng.next_below(size - i));
        std::swap(all[i], all[j]);
    }
    all.resize(n);
    return all;
}

LabeledDataset sample_batch(const LabeledDataset& ds, std::size_t n, std::uint64_t seed) {
    LabeledDataset out;
    for (int i : sample_indices(ds.size(), n, seed)) {
        out.push(ds.images[i], ds.labels[i], ds.provenance[i]);
    }
    return out;
}

}  // namespace biasmap
