#pragma once

#include <string>
#include <vector>

#include "seqfm/common.hpp"
#include "seqfm/embed.hpp"
#include "seqfm/mat.hpp"
#include "seqfm/seqdata.hpp"

namespace seqfm {

// GELU (tanh form) and its derivative.
inline float gelu(float x) {
    const float c = 0.7978845608028654f; // sqrt(2/pi)
    float x3 = x * x * x;
    return 0.5f * x * (1.0f + std::tanh(c * (x + 0.044715f * x3)));
}

inline float gelu_grad(float x) {
    const float c = 0.7978845608028654f;
    float x2 = x * x;
    float t = std::tanh(c * (x + 0.044715f * x2 * x));
    float dt = (1.0f - t * t) * c * (1.0f + 3.0f * 0.044715f * x2);
    return 0.5f * (1.0f + t) + 0.5f * x * dt;
}

// Named trainable tensor with its gradient buffer.
struct Param {
    std::string name;
    Mat v;
    Mat g;

    Param() = default;
    Param(std::string n, int rows, int cols) : name(std::move(n)), v(rows, cols), g(rows, cols) {}

    void init_gaussian(Rng& rng, float stddev) {
        for (auto& x : v.a) x = static_cast<float>(rng.normal() * stddev);
    }
    void fill(float c) { std::fill(v.a.begin(), v.a.end(), c); }
    void zero_grad() { g.zero(); }
};

// y = x*W + b over rows. W: in x out, b: 1 x out.
void linear_forward(const Mat& x, const Param& w, const Param& b, Mat& y);
// Accumulates dW, db; writes dx (assign). x is the forward input.
void linear_backward(const Mat& x, Param& w, Param& b, const Mat& dy, Mat* dx);

// Row-wise layer norm with gain/bias, eps 1e-5. xhat and rstd are cached for
// the backward pass.
void layernorm_forward(const Mat& x, const Param& g, const Param& b, Mat& y, Mat* xhat, Vec* rstd);
// Accumulates into g.g / b.g; accumulates dx into dx_accum.
void layernorm_backward(const Mat& xhat, const Vec& rstd, Param& g, Param& b, const Mat& dy,
                        Mat& dx_accum);

// Row-wise l2 normalization with a tiny-norm guard; backward is the exact
// adjoint of y = x / max(||x||, eps).
void l2norm_rows(const Mat& y_pre, Mat& y_out, Vec* inv_norm);
void l2norm_backward_row(const float* y_hat, float inv_norm, const float* dy, float* dx_accum,
                         int n);

// Two-layer pointwise MLP ending in l2 normalization:
//   y = l2norm(W2^T gelu(W1^T x + b1) + b2)
struct MlpP {
    Param w1, b1, w2, b2;

    void init(const std::string& prefix, int d_in, int d_hidden, int d_out, Rng& rng);
    int d_in() const { return w1.v.rows; }
    int d_out() const { return w2.v.cols; }
};

struct MlpCache {
    Mat x;        // n x d_in
    Mat z1;       // n x hidden, pre-activation
    Mat a1;       // n x hidden
    Mat y;        // n x out, pre-norm
    Vec inv_norm; // n
};

void mlp_forward(const MlpP& p, const Mat& x, Mat& out, MlpCache* cache);
// Accumulates parameter grads, writes dx (assign).
void mlp_backward(MlpP& p, const MlpCache& cache, const Mat& dout, Mat& dx);

struct ModelConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int mlp_ratio = 4;
    int max_len = 160; // positional table size; longest token row count per forward
    int d_emb = 64;
    int n_actions = kActionCount;
    int n_surfaces = kSurfaceCount;
    enum class PosMode { Learned, None } pos_mode = PosMode::Learned;
    float dropout = 0.0f;

    int d_head() const { return d_model / n_heads; }
    int d_ff() const { return d_model * mlp_ratio; }
    void validate() const;

    std::string to_config_text() const;
    static ModelConfig from_config_text(const std::string& text);
};

struct LayerP {
    Param ln1_g, ln1_b;
    Param wq, bq, wk, bk, wv, bv, wo, bo;
    Param ln2_g, ln2_b;
    Param fw1, fb1, fw2, fb2;
};

// All trainable tensors except the hashed id table (which updates sparsely).
struct TransformerParams {
    ModelConfig cfg;
    std::vector<LayerP> layers;
    MlpP phi_in;   // d_emb -> d_model, input projection
    MlpP phi_out;  // d_model -> d_model, user-representation head
    MlpP psi;      // d_emb -> d_model, target-vector head
    Param action_emb;  // n_actions x d_emb
    Param surface_emb; // n_surfaces x d_emb
    Param pos_emb;     // max_len x d_emb (empty when pos_mode == None)
    Param log_tau;     // 1x1 learnable log-temperature

    void init(const ModelConfig& c, u64 seed, float tau_init = 0.05f);
    float tau() const { return std::exp(log_tau.v.at(0, 0)); }

    // Stable registration order; names are unique.
    std::vector<Param*> all_params();
    std::vector<const Param*> all_params() const;
    void zero_grads();
};

struct LayerCache {
    Mat x;       // layer input
    Mat xhat1;
    Vec rstd1;
    Mat q, k, v; // n x d_model, head h in columns [h*dh, (h+1)*dh)
    std::vector<Mat> probs; // per head, n x n (zero above diagonal)
    Mat ctx;
    Mat drop_attn, drop_ff; // scaled dropout masks; empty when dropout is off
    Mat x2;      // after attention residual
    Mat xhat2;
    Vec rstd2;
    Mat f1;      // FF pre-activation
    Mat f1a;     // gelu(f1)
};

struct ForwardCache {
    MlpCache phi_in;
    std::vector<LayerCache> layers;
    Mat x_final;
    MlpCache phi_out;
    int n = 0;
};

// Standalone masked multi-head attention. mask is n_q x n_k row-major bytes,
// nonzero = may attend. Errors when some query has no attendable key.
Mat attention(const Mat& Q, const Mat& K, const Mat& V, const std::vector<u8>& mask, int n_heads);

// One Pre-LN block: x_out = y + FF(LN2(y)), y = x_in + Attn(LN1(x_in)).
// Exposed so alternative execution paths share the exact numeric order.
void layer_forward(const LayerP& L, const ModelConfig& cfg, const Mat& x_in, Mat& x_out,
                   LayerCache& lc, bool record_probs, Rng* drop_rng, int layer_idx);

// Causal stack over prebuilt d_emb rows: phi_in -> n_layers Pre-LN blocks ->
// phi_out. Rows of H are unit-norm. cache may be null for inference;
// train_rng enables dropout when cfg.dropout > 0.
Mat forward_rows(const TransformerParams& p, const Mat& E, ForwardCache* cache,
                 Rng* train_rng = nullptr);
// Accumulates all parameter grads; returns dE.
Mat backward_rows(TransformerParams& p, const ForwardCache& cache, const Mat& dH);

// Raw per-token input embeddings: id + action + surface (+ position).
// Token i of the segment gets position pos_offset + i.
Mat segment_inputs(const TransformerParams& p, const IdEmbSource& ids, const Event* ev, int n,
                   int pos_offset = 0);
// Routes dE into the action/surface/pos tables and the id-row sink.
void segment_inputs_backward(TransformerParams& p, const HashedEmbeddingTable& table,
                             EmbeddingGradSink& sink, const Event* ev, int n, int pos_offset,
                             const Mat& dE);

// Convenience: H over the valid prefix of a segment.
Mat model_forward(const TransformerParams& p, const IdEmbSource& ids, const Segment& seg,
                  ForwardCache* cache = nullptr);

// psi target head over a single d_emb vector.
Vec psi_forward(const TransformerParams& p, const Vec& emb, MlpCache* cache = nullptr);

// ---------------------------------------------------------------------------
// Checkpoint container ("PFMC1"): config text + named fp32 blobs.

struct NamedBlobs {
    std::string config_text;
    std::vector<std::pair<std::string, Mat>> blobs;

    const Mat* find(const std::string& name) const;
};

void write_blob_file(const NamedBlobs& nb, const std::string& path);
NamedBlobs read_blob_file(const std::string& path);

// Model-level checkpoint: transformer params + hashed id table. extra_config
// lines are appended to the stored config text (run provenance).
// extra_blobs lets callers persist more tensors (e.g. ranking heads).
void save_checkpoint(const TransformerParams& p, const HashedEmbeddingTable& table,
                     const std::string& path, const std::string& extra_config = "",
                     const std::vector<std::pair<std::string, Mat>>& extra_blobs = {});

struct Checkpoint {
    TransformerParams params;
    HashedEmbeddingTable table;
    std::string config_text;
    std::vector<std::pair<std::string, Mat>> extra_blobs; // blobs not consumed by the model
};
Checkpoint load_checkpoint(const std::string& path);

} // namespace seqfm
