#include "seqfm/embed.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "seqfm/fp16.hpp"

namespace seqfm {

u32 hash_id(u64 id, u64 seed, u32 rows) {
    SEQFM_CHECK(rows > 0, "hash_id: rows must be positive");
    return static_cast<u32>(mix64(id ^ mix64(seed)) % rows);
}

HashedEmbeddingTable::HashedEmbeddingTable(int num_subtables, int rows, int d_sub, u64 seed,
                                           float init_stddev)
    : J_(num_subtables), R_(rows), d_sub_(d_sub) {
    SEQFM_CHECK(J_ >= 1 && R_ >= 1 && d_sub_ >= 1, "HashedEmbeddingTable: bad shape");
    Rng rng(mix64(seed ^ 0x656d62ULL));
    seeds_.resize(J_);
    for (int j = 0; j < J_; j++) seeds_[j] = mix64(seed ^ (0x5eedULL + static_cast<u64>(j)));
    sub_.reserve(J_);
    for (int j = 0; j < J_; j++) sub_.push_back(Mat::gaussian(R_, d_sub_, rng, init_stddev));
}

HashedEmbeddingTable::HashedEmbeddingTable(int rows, int d_sub, std::vector<u64> seeds)
    : J_(static_cast<int>(seeds.size())), R_(rows), d_sub_(d_sub), seeds_(std::move(seeds)) {
    SEQFM_CHECK(J_ >= 1 && R_ >= 1 && d_sub_ >= 1, "HashedEmbeddingTable: bad shape");
    sub_.assign(static_cast<size_t>(J_), Mat(R_, d_sub_));
}

u32 HashedEmbeddingTable::hash_row(u64 id, int subtable) const {
    SEQFM_CHECK(subtable >= 0 && subtable < J_, "hash_row: subtable out of range");
    return hash_id(id, seeds_[subtable], static_cast<u32>(R_));
}

void HashedEmbeddingTable::lookup(u64 id, float* out) const {
    for (int j = 0; j < J_; j++) {
        const float* r = row(j, hash_row(id, j));
        std::memcpy(out + static_cast<size_t>(j) * d_sub_, r, sizeof(float) * d_sub_);
    }
}

Vec HashedEmbeddingTable::lookup(u64 id) const {
    Vec v(static_cast<size_t>(d_emb()));
    lookup(id, v.data());
    return v;
}

void EmbeddingGradSink::accumulate(int subtable, u32 row, const float* grad, int d_sub) {
    auto& v = rows_[{subtable, row}];
    if (v.empty()) v.assign(static_cast<size_t>(d_sub), 0.0f);
    for (int i = 0; i < d_sub; i++) v[i] += grad[i];
}

void EmbeddingGradSink::accumulate_lookup_grad(const HashedEmbeddingTable& table, u64 id,
                                               const float* d_emb_grad) {
    for (int j = 0; j < table.num_subtables(); j++) {
        accumulate(j, table.hash_row(id, j), d_emb_grad + static_cast<size_t>(j) * table.d_sub(),
                   table.d_sub());
    }
}

// ---------------------------------------------------------------------------
// Quantization

const u8* QuantizedTable::packed_row(int subtable, u32 row) const {
    return packed_.data() +
           (static_cast<size_t>(subtable) * R_ + row) * packed_row_bytes();
}

u8* QuantizedTable::packed_row(int subtable, u32 row) {
    return packed_.data() +
           (static_cast<size_t>(subtable) * R_ + row) * packed_row_bytes();
}

float QuantizedTable::scale(int subtable, u32 row) const {
    const u8* p = packed_row(subtable, row) + code_bytes_per_row();
    u16 bits;
    std::memcpy(&bits, p, 2);
    return half_to_float(bits);
}

float QuantizedTable::bias(int subtable, u32 row) const {
    const u8* p = packed_row(subtable, row) + code_bytes_per_row() + 2;
    u16 bits;
    std::memcpy(&bits, p, 2);
    return half_to_float(bits);
}

u32 QuantizedTable::code(int subtable, u32 row, int elem) const {
    const u8* p = packed_row(subtable, row);
    if (bits_ == 8) return p[elem];
    u8 byte = p[elem / 2];
    return (elem % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
}

void QuantizedTable::dequantize_row(int subtable, u32 row, float* out) const {
    float s = scale(subtable, row);
    float b = bias(subtable, row);
    for (int e = 0; e < d_sub_; e++) out[e] = static_cast<float>(code(subtable, row, e)) * s + b;
}

Vec QuantizedTable::dequantize_row(int subtable, u32 row) const {
    Vec v(static_cast<size_t>(d_sub_));
    dequantize_row(subtable, row, v.data());
    return v;
}

void QuantizedTable::qlookup(u64 id, float* out) const {
    for (int j = 0; j < J_; j++) dequantize_row(j, hash_row(id, j), out + static_cast<size_t>(j) * d_sub_);
}

Vec QuantizedTable::qlookup(u64 id) const {
    Vec v(static_cast<size_t>(d_emb()));
    qlookup(id, v.data());
    return v;
}

QuantizedTable quantize(const HashedEmbeddingTable& table, int bits) {
    SEQFM_CHECK(bits == 4 || bits == 8, "quantize: bits must be 4 or 8, got " << bits);

    QuantizedTable q;
    q.bits_ = bits;
    q.J_ = table.num_subtables();
    q.R_ = table.rows();
    q.d_sub_ = table.d_sub();
    q.seeds_ = table.seeds();
    q.packed_.assign(q.payload_bytes(), 0);

    const u32 max_code = (1u << bits) - 1;
    for (int j = 0; j < q.J_; j++) {
        for (u32 r = 0; r < static_cast<u32>(q.R_); r++) {
            const float* src = table.row(j, r);
            float lo = src[0], hi = src[0];
            for (int e = 0; e < q.d_sub_; e++) {
                SEQFM_CHECK(std::isfinite(src[e]), "quantize: non-finite value at subtable "
                                                       << j << " row " << r << " elem " << e);
                lo = std::min(lo, src[e]);
                hi = std::max(hi, src[e]);
            }
            // fp16-rounded bias/scale are what the codes are fitted against
            float bias = half_round(lo);
            float scale = half_round((hi - lo) / static_cast<float>(max_code));

            u8* dst = q.packed_row(j, r);
            if (scale > 0.0f) {
                for (int e = 0; e < q.d_sub_; e++) {
                    float t = (src[e] - bias) / scale;
                    long c = std::lrintf(t); // ties to even under default FP env
                    c = std::max(0L, std::min(static_cast<long>(max_code), c));
                    if (bits == 8) {
                        dst[e] = static_cast<u8>(c);
                    } else if (e % 2 == 0) {
                        dst[e / 2] = static_cast<u8>(c);
                    } else {
                        dst[e / 2] |= static_cast<u8>(c << 4);
                    }
                }
            } else {
                scale = 0.0f; // degenerate range sentinel; codes stay zero
            }
            u16 sb = float_to_half(scale);
            u16 bb = float_to_half(bias);
            std::memcpy(dst + q.code_bytes_per_row(), &sb, 2);
            std::memcpy(dst + q.code_bytes_per_row() + 2, &bb, 2);
        }
    }
    return q;
}

QuantErrorReport quant_error(const HashedEmbeddingTable& table, const QuantizedTable& qtable) {
    SEQFM_CHECK(table.num_subtables() == qtable.num_subtables() && table.rows() == qtable.rows() &&
                    table.d_sub() == qtable.d_sub(),
                "quant_error: table/qtable shape mismatch");
    QuantErrorReport rep;
    double sum = 0.0;
    Vec deq(static_cast<size_t>(table.d_sub()));
    for (int j = 0; j < table.num_subtables(); j++) {
        for (u32 r = 0; r < static_cast<u32>(table.rows()); r++) {
            const float* orig = table.row(j, r);
            double norm2 = 0.0;
            for (int e = 0; e < table.d_sub(); e++)
                norm2 += static_cast<double>(orig[e]) * orig[e];
            if (norm2 == 0.0) {
                rep.zero_norm_rows++;
                continue;
            }
            qtable.dequantize_row(j, r, deq.data());
            double err2 = 0.0;
            for (int e = 0; e < table.d_sub(); e++) {
                double d = static_cast<double>(orig[e]) - deq[e];
                err2 += d * d;
            }
            sum += std::sqrt(err2 / norm2);
            rep.rows_measured++;
        }
    }
    rep.mean_relative_l2 = rep.rows_measured ? sum / static_cast<double>(rep.rows_measured) : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// PQTB1 container

namespace {
constexpr char kMagic[5] = {'P', 'Q', 'T', 'B', '1'};
constexpr char kCfgMagic[4] = {'P', 'C', 'F', 'G'};
} // namespace

void save_quantized(const QuantizedTable& q, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    SEQFM_CHECK(f.good(), "cannot open " << path << " for writing");
    f.write(kMagic, sizeof(kMagic));
    u8 bits = static_cast<u8>(q.bits());
    u8 J = static_cast<u8>(q.num_subtables());
    u32 R = static_cast<u32>(q.rows());
    u16 d_sub = static_cast<u16>(q.d_sub());
    f.write(reinterpret_cast<const char*>(&bits), 1);
    f.write(reinterpret_cast<const char*>(&J), 1);
    f.write(reinterpret_cast<const char*>(&R), 4);
    f.write(reinterpret_cast<const char*>(&d_sub), 2);
    for (u64 s : q.seeds()) f.write(reinterpret_cast<const char*>(&s), 8);
    f.write(reinterpret_cast<const char*>(q.packed_row(0, 0)), static_cast<std::streamsize>(q.payload_bytes()));
    if (!q.config_text().empty()) {
        f.write(kCfgMagic, sizeof(kCfgMagic));
        u32 len = static_cast<u32>(q.config_text().size());
        f.write(reinterpret_cast<const char*>(&len), 4);
        f.write(q.config_text().data(), len);
    }
    SEQFM_CHECK(f.good(), "write failed for " << path);
}

QuantizedTable load_quantized(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    SEQFM_CHECK(f.good(), "cannot open " << path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    size_t pos = 0;
    auto need = [&](size_t n, const char* what) {
        SEQFM_CHECK(buf.size() - pos >= n, "quantized table file truncated while reading " << what);
    };
    need(sizeof(kMagic), "magic");
    SEQFM_CHECK(std::memcmp(buf.data(), kMagic, sizeof(kMagic)) == 0,
                "bad magic in quantized table file: " << path);
    pos += sizeof(kMagic);

    QuantizedTable q;
    auto rd = [&](void* dst, size_t n, const char* what) {
        need(n, what);
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    };
    u8 bits, J;
    u32 R;
    u16 d_sub;
    rd(&bits, 1, "bits");
    rd(&J, 1, "subtable count");
    rd(&R, 4, "row count");
    rd(&d_sub, 2, "sub dim");
    SEQFM_CHECK(bits == 4 || bits == 8, "quantized table: unsupported bit width " << int(bits));
    SEQFM_CHECK(J >= 1 && R >= 1 && d_sub >= 1, "quantized table: bad shape");
    q.bits_ = bits;
    q.J_ = J;
    q.R_ = static_cast<int>(R);
    q.d_sub_ = d_sub;
    q.seeds_.resize(J);
    for (int j = 0; j < J; j++) rd(&q.seeds_[j], 8, "hash seed");

    q.packed_.resize(q.payload_bytes());
    rd(q.packed_.data(), q.payload_bytes(), "packed rows");

    if (pos < buf.size()) {
        need(sizeof(kCfgMagic) + 4, "config trailer");
        SEQFM_CHECK(std::memcmp(buf.data() + pos, kCfgMagic, sizeof(kCfgMagic)) == 0,
                    "trailing bytes after packed rows are not a config trailer");
        pos += sizeof(kCfgMagic);
        u32 len;
        rd(&len, 4, "config length");
        need(len, "config text");
        q.config_text_.assign(buf.data() + pos, len);
        pos += len;
        SEQFM_CHECK(pos == buf.size(), "trailing bytes after config trailer");
    }
    return q;
}

} // namespace seqfm
