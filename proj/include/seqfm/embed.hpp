#pragma once

#include <map>
#include <string>
#include <vector>

#include "seqfm/common.hpp"
#include "seqfm/mat.hpp"
#include "seqfm/rng.hpp"

namespace seqfm {

// Anything that maps an item id to a d_emb vector. Implemented by the
// trainable table, its quantized form, and the serving-side fetched view, so
// the model can run on any of them.
struct IdEmbSource {
    virtual ~IdEmbSource() = default;
    virtual int emb_dim() const = 0;
    virtual void lookup_id(u64 id, float* out) const = 0;
};

// Hash-sharded trainable embedding table: J sub-tables of R rows x d_sub.
// lookup(id) concatenates one row per sub-table, chosen by independent
// seeded hashes.
class HashedEmbeddingTable : public IdEmbSource {
public:
    HashedEmbeddingTable() = default;
    HashedEmbeddingTable(int num_subtables, int rows, int d_sub, u64 seed,
                         float init_stddev = 0.05f);
    // Reconstruction from explicit per-subtable seeds (checkpoint loading);
    // values start at zero.
    HashedEmbeddingTable(int rows, int d_sub, std::vector<u64> seeds);

    int num_subtables() const { return J_; }
    int rows() const { return R_; }
    int d_sub() const { return d_sub_; }
    int d_emb() const { return J_ * d_sub_; }
    const std::vector<u64>& seeds() const { return seeds_; }

    u32 hash_row(u64 id, int subtable) const;

    float* row(int subtable, u32 r) { return sub_[subtable].row(static_cast<int>(r)); }
    const float* row(int subtable, u32 r) const { return sub_[subtable].row(static_cast<int>(r)); }
    Mat& subtable(int j) { return sub_[j]; }
    const Mat& subtable(int j) const { return sub_[j]; }

    void lookup(u64 id, float* out) const; // out: d_emb floats
    Vec lookup(u64 id) const;

    int emb_dim() const override { return d_emb(); }
    void lookup_id(u64 id, float* out) const override { lookup(id, out); }

private:
    int J_ = 0, R_ = 0, d_sub_ = 0;
    std::vector<u64> seeds_;
    std::vector<Mat> sub_;
};

// Seeded row hash: avalanche mixer over (id, seed), reduced mod R.
u32 hash_id(u64 id, u64 seed, u32 rows);

// Sparse per-row gradient accumulation. Rows never looked up stay absent
// (exactly zero gradient).
class EmbeddingGradSink {
public:
    void accumulate(int subtable, u32 row, const float* grad, int d_sub);
    // Deterministic iteration order (sorted by key).
    const std::map<std::pair<int, u32>, Vec>& rows() const { return rows_; }
    void clear() { rows_.clear(); }
    bool empty() const { return rows_.empty(); }

    void accumulate_lookup_grad(const HashedEmbeddingTable& table, u64 id, const float* d_emb_grad);

private:
    std::map<std::pair<int, u32>, Vec> rows_;
};

// Post-training quantized table: per (subtable, row) packed n-bit codes plus
// fp16 scale/bias. Packed row payload is ceil(d_sub*b/8) + 4 bytes.
class QuantizedTable : public IdEmbSource {
public:
    QuantizedTable() = default;

    int bits() const { return bits_; }
    int num_subtables() const { return J_; }
    int rows() const { return R_; }
    int d_sub() const { return d_sub_; }
    int d_emb() const { return J_ * d_sub_; }
    const std::vector<u64>& seeds() const { return seeds_; }

    int code_bytes_per_row() const { return (d_sub_ * bits_ + 7) / 8; }
    int packed_row_bytes() const { return code_bytes_per_row() + 4; } // + scale + bias
    size_t payload_bytes() const {
        return static_cast<size_t>(J_) * R_ * packed_row_bytes();
    }

    const u8* packed_row(int subtable, u32 row) const;
    u8* packed_row(int subtable, u32 row);

    float scale(int subtable, u32 row) const;
    float bias(int subtable, u32 row) const;
    u32 code(int subtable, u32 row, int elem) const;

    void dequantize_row(int subtable, u32 row, float* out) const; // d_sub floats
    Vec dequantize_row(int subtable, u32 row) const;

    u32 hash_row(u64 id, int subtable) const { return hash_id(id, seeds_[subtable], static_cast<u32>(R_)); }
    void qlookup(u64 id, float* out) const; // d_emb floats
    Vec qlookup(u64 id) const;

    int emb_dim() const override { return d_emb(); }
    void lookup_id(u64 id, float* out) const override { qlookup(id, out); }

    const std::string& config_text() const { return config_text_; }
    void set_config_text(std::string text) { config_text_ = std::move(text); }

    friend QuantizedTable quantize(const HashedEmbeddingTable& table, int bits);
    friend QuantizedTable load_quantized(const std::string& path);

private:
    int bits_ = 0, J_ = 0, R_ = 0, d_sub_ = 0;
    std::vector<u64> seeds_;
    std::vector<u8> packed_; // J * R rows, packed_row_bytes() each
    std::string config_text_;
};

// Per-row min-max quantization: bias = min, scale = (max-min)/(2^b-1), both
// rounded through fp16 before codes are assigned; codes round to nearest
// (ties to even) and clamp. Degenerate rows store scale = 0.
QuantizedTable quantize(const HashedEmbeddingTable& table, int bits);

struct QuantErrorReport {
    double mean_relative_l2 = 0.0; // mean over rows of ||orig - deq|| / ||orig||
    size_t rows_measured = 0;
    size_t zero_norm_rows = 0; // excluded from the mean
};

QuantErrorReport quant_error(const HashedEmbeddingTable& table, const QuantizedTable& qtable);

// Binary "PQTB1" container; bit-exact round trip. An optional config trailer
// follows the packed rows.
void save_quantized(const QuantizedTable& qtable, const std::string& path);
QuantizedTable load_quantized(const std::string& path);

} // namespace seqfm
