#include "seqfm/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "seqfm/kv.hpp"

namespace seqfm {

namespace {
constexpr float kLnEps = 1e-5f;
constexpr float kNormEps = 1e-12f;

void add_colsum(const Mat& dy, Param& b) {
    for (int i = 0; i < dy.rows; i++) {
        const float* r = dy.row(i);
        float* g = b.g.row(0);
        for (int j = 0; j < dy.cols; j++) g[j] += r[j];
    }
}

void check_finite(const Mat& x, int layer) {
    for (float v : x.a)
        SEQFM_CHECK(std::isfinite(v), "non-finite activation in layer " << layer);
}

// Inverted-dropout mask applied in place; mask entries are 0 or 1/(1-p).
void apply_dropout(Mat& x, Mat& mask_out, float p, Rng& rng) {
    mask_out = Mat(x.rows, x.cols);
    float keep_scale = 1.0f / (1.0f - p);
    for (size_t i = 0; i < x.a.size(); i++) {
        float m = rng.bernoulli(p) ? 0.0f : keep_scale;
        mask_out.a[i] = m;
        x.a[i] *= m;
    }
}

} // namespace

void linear_forward(const Mat& x, const Param& w, const Param& b, Mat& y) {
    matmul(x, w.v, y);
    for (int i = 0; i < y.rows; i++) axpy(1.0f, b.v.row(0), y.row(i), y.cols);
}

void linear_backward(const Mat& x, Param& w, Param& b, const Mat& dy, Mat* dx) {
    matmul_at_b_acc(x, dy, w.g);
    add_colsum(dy, b);
    if (dx) matmul_a_bt(dy, w.v, *dx);
}

void layernorm_forward(const Mat& x, const Param& g, const Param& b, Mat& y, Mat* xhat,
                       Vec* rstd) {
    int n = x.rows, d = x.cols;
    y = Mat(n, d);
    if (xhat) *xhat = Mat(n, d);
    if (rstd) rstd->assign(static_cast<size_t>(n), 0.0f);
    for (int i = 0; i < n; i++) {
        const float* xi = x.row(i);
        float mu = 0.0f;
        for (int j = 0; j < d; j++) mu += xi[j];
        mu /= static_cast<float>(d);
        float var = 0.0f;
        for (int j = 0; j < d; j++) {
            float c = xi[j] - mu;
            var += c * c;
        }
        var /= static_cast<float>(d);
        float rs = 1.0f / std::sqrt(var + kLnEps);
        float* yi = y.row(i);
        float* xh = xhat ? xhat->row(i) : nullptr;
        for (int j = 0; j < d; j++) {
            float h = (xi[j] - mu) * rs;
            if (xh) xh[j] = h;
            yi[j] = g.v.at(0, j) * h + b.v.at(0, j);
        }
        if (rstd) (*rstd)[i] = rs;
    }
}

void layernorm_backward(const Mat& xhat, const Vec& rstd, Param& g, Param& b, const Mat& dy,
                        Mat& dx_accum) {
    int n = xhat.rows, d = xhat.cols;
    for (int i = 0; i < n; i++) {
        const float* xh = xhat.row(i);
        const float* dyi = dy.row(i);
        float* dxi = dx_accum.row(i);
        float m1 = 0.0f, m2 = 0.0f;
        for (int j = 0; j < d; j++) {
            float dxh = dyi[j] * g.v.at(0, j);
            m1 += dxh;
            m2 += dxh * xh[j];
            g.g.at(0, j) += dyi[j] * xh[j];
            b.g.at(0, j) += dyi[j];
        }
        m1 /= static_cast<float>(d);
        m2 /= static_cast<float>(d);
        for (int j = 0; j < d; j++) {
            float dxh = dyi[j] * g.v.at(0, j);
            dxi[j] += rstd[i] * (dxh - m1 - xh[j] * m2);
        }
    }
}

void l2norm_rows(const Mat& y_pre, Mat& y_out, Vec* inv_norm) {
    int n = y_pre.rows, d = y_pre.cols;
    y_out = Mat(n, d);
    if (inv_norm) inv_norm->assign(static_cast<size_t>(n), 0.0f);
    for (int i = 0; i < n; i++) {
        float nrm = l2_norm(y_pre.row(i), d);
        float inv = 1.0f / std::max(nrm, kNormEps);
        for (int j = 0; j < d; j++) y_out.at(i, j) = y_pre.at(i, j) * inv;
        if (inv_norm) (*inv_norm)[i] = inv;
    }
}

void l2norm_backward_row(const float* y_pre, float inv_norm, const float* dout, float* dy_pre,
                         int n) {
    // adjoint of y_hat = y / max(||y||, eps); below eps the denominator is
    // constant so the second term vanishes (y_hat ~ 0 there anyway)
    float s = 0.0f;
    for (int j = 0; j < n; j++) s += (y_pre[j] * inv_norm) * dout[j];
    for (int j = 0; j < n; j++) dy_pre[j] = inv_norm * (dout[j] - (y_pre[j] * inv_norm) * s);
}

void MlpP::init(const std::string& prefix, int d_in, int d_hidden, int d_out, Rng& rng) {
    w1 = Param(prefix + ".w1", d_in, d_hidden);
    b1 = Param(prefix + ".b1", 1, d_hidden);
    w2 = Param(prefix + ".w2", d_hidden, d_out);
    b2 = Param(prefix + ".b2", 1, d_out);
    // He-scaled weights: the post-norm output direction must be dominated by
    // the input-dependent signal, or distinct inputs land on nearly collinear
    // unit vectors and contrastive logits degenerate
    w1.init_gaussian(rng, std::sqrt(2.0f / static_cast<float>(d_in)));
    w2.init_gaussian(rng, std::sqrt(2.0f / static_cast<float>(d_hidden)));
    // small bias noise keeps the pre-norm output away from the exact zero
    // vector even for all-zero inputs
    b1.init_gaussian(rng, 0.002f);
    b2.init_gaussian(rng, 0.002f);
}

void mlp_forward(const MlpP& p, const Mat& x, Mat& out, MlpCache* cache) {
    SEQFM_CHECK(x.cols == p.w1.v.rows, "mlp_forward: input dim " << x.cols << " expected "
                                                                 << p.w1.v.rows);
    Mat z1, a1, y;
    linear_forward(x, p.w1, p.b1, z1);
    a1 = Mat(z1.rows, z1.cols);
    for (size_t i = 0; i < z1.a.size(); i++) a1.a[i] = gelu(z1.a[i]);
    linear_forward(a1, p.w2, p.b2, y);
    Vec inv;
    l2norm_rows(y, out, &inv);
    if (cache) {
        cache->x = x;
        cache->z1 = std::move(z1);
        cache->a1 = std::move(a1);
        cache->y = std::move(y);
        cache->inv_norm = std::move(inv);
    }
}

void mlp_backward(MlpP& p, const MlpCache& cache, const Mat& dout, Mat& dx) {
    int n = dout.rows, d_out = dout.cols;
    Mat dy(n, d_out);
    for (int i = 0; i < n; i++)
        l2norm_backward_row(cache.y.row(i), cache.inv_norm[i], dout.row(i), dy.row(i), d_out);
    Mat da1;
    linear_backward(cache.a1, p.w2, p.b2, dy, &da1);
    Mat dz1(da1.rows, da1.cols);
    for (size_t i = 0; i < da1.a.size(); i++) dz1.a[i] = da1.a[i] * gelu_grad(cache.z1.a[i]);
    linear_backward(cache.x, p.w1, p.b1, dz1, &dx);
}

void ModelConfig::validate() const {
    SEQFM_CHECK(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0,
                "d_model " << d_model << " must be divisible by n_heads " << n_heads);
    SEQFM_CHECK(n_layers >= 0, "n_layers must be >= 0");
    SEQFM_CHECK(mlp_ratio >= 1, "mlp_ratio must be >= 1");
    SEQFM_CHECK(max_len >= 1, "max_len must be >= 1");
    SEQFM_CHECK(d_emb >= 1, "d_emb must be >= 1");
    SEQFM_CHECK(dropout >= 0.0f && dropout < 1.0f, "dropout must be in [0,1)");
}

std::string ModelConfig::to_config_text() const {
    std::ostringstream o;
    o << "model.d_model=" << d_model << "\n";
    o << "model.n_layers=" << n_layers << "\n";
    o << "model.n_heads=" << n_heads << "\n";
    o << "model.mlp_ratio=" << mlp_ratio << "\n";
    o << "model.max_len=" << max_len << "\n";
    o << "model.d_emb=" << d_emb << "\n";
    o << "model.n_actions=" << n_actions << "\n";
    o << "model.n_surfaces=" << n_surfaces << "\n";
    o << "model.pos_mode=" << (pos_mode == PosMode::Learned ? "learned" : "none") << "\n";
    o << "model.dropout=" << dropout << "\n";
    return o.str();
}

ModelConfig ModelConfig::from_config_text(const std::string& text) {
    auto kv = parse_kv_text(text);
    ModelConfig c;
    c.d_model = static_cast<int>(kv_get_int(kv, "model.d_model"));
    c.n_layers = static_cast<int>(kv_get_int(kv, "model.n_layers"));
    c.n_heads = static_cast<int>(kv_get_int(kv, "model.n_heads"));
    c.mlp_ratio = static_cast<int>(kv_get_int(kv, "model.mlp_ratio"));
    c.max_len = static_cast<int>(kv_get_int(kv, "model.max_len"));
    c.d_emb = static_cast<int>(kv_get_int(kv, "model.d_emb"));
    c.n_actions = static_cast<int>(kv_get_int(kv, "model.n_actions"));
    c.n_surfaces = static_cast<int>(kv_get_int(kv, "model.n_surfaces"));
    std::string pm = kv_get(kv, "model.pos_mode");
    SEQFM_CHECK(pm == "learned" || pm == "none", "unknown pos_mode '" << pm << "'");
    c.pos_mode = pm == "learned" ? PosMode::Learned : PosMode::None;
    c.dropout = static_cast<float>(kv_get_double(kv, "model.dropout"));
    c.validate();
    return c;
}

void TransformerParams::init(const ModelConfig& c, u64 seed, float tau_init) {
    c.validate();
    SEQFM_CHECK(tau_init > 0.0f, "tau_init must be positive");
    cfg = c;
    Rng rng(mix64(seed ^ 0x6d6f64656cULL));
    int d = c.d_model, dff = c.d_ff();

    layers.clear();
    layers.resize(static_cast<size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; l++) {
        LayerP& L = layers[l];
        std::string pre = "layer" + std::to_string(l) + ".";
        L.ln1_g = Param(pre + "ln1_g", 1, d);
        L.ln1_b = Param(pre + "ln1_b", 1, d);
        L.ln2_g = Param(pre + "ln2_g", 1, d);
        L.ln2_b = Param(pre + "ln2_b", 1, d);
        L.ln1_g.fill(1.0f);
        L.ln2_g.fill(1.0f);
        L.wq = Param(pre + "wq", d, d);
        L.bq = Param(pre + "bq", 1, d);
        L.wk = Param(pre + "wk", d, d);
        L.bk = Param(pre + "bk", 1, d);
        L.wv = Param(pre + "wv", d, d);
        L.bv = Param(pre + "bv", 1, d);
        L.wo = Param(pre + "wo", d, d);
        L.bo = Param(pre + "bo", 1, d);
        L.fw1 = Param(pre + "fw1", d, dff);
        L.fb1 = Param(pre + "fb1", 1, dff);
        L.fw2 = Param(pre + "fw2", dff, d);
        L.fb2 = Param(pre + "fb2", 1, d);
        for (Param* w : {&L.wq, &L.wk, &L.wv, &L.wo, &L.fw1, &L.fw2}) w->init_gaussian(rng, 0.02f);
    }
    phi_in.init("phi_in", c.d_emb, d, d, rng);
    phi_out.init("phi_out", d, d, d, rng);
    psi.init("psi", c.d_emb, d, d, rng);
    action_emb = Param("action_emb", c.n_actions, c.d_emb);
    surface_emb = Param("surface_emb", c.n_surfaces, c.d_emb);
    action_emb.init_gaussian(rng, 0.02f);
    surface_emb.init_gaussian(rng, 0.02f);
    if (c.pos_mode == ModelConfig::PosMode::Learned) {
        pos_emb = Param("pos_emb", c.max_len, c.d_emb);
        pos_emb.init_gaussian(rng, 0.02f);
    } else {
        pos_emb = Param();
    }
    log_tau = Param("log_tau", 1, 1);
    log_tau.v.at(0, 0) = std::log(tau_init);
}

std::vector<Param*> TransformerParams::all_params() {
    std::vector<Param*> out;
    out.push_back(&log_tau);
    out.push_back(&action_emb);
    out.push_back(&surface_emb);
    if (cfg.pos_mode == ModelConfig::PosMode::Learned) out.push_back(&pos_emb);
    for (MlpP* m : {&phi_in, &phi_out, &psi}) {
        out.push_back(&m->w1);
        out.push_back(&m->b1);
        out.push_back(&m->w2);
        out.push_back(&m->b2);
    }
    for (LayerP& L : layers) {
        for (Param* p : {&L.ln1_g, &L.ln1_b, &L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo,
                         &L.bo, &L.ln2_g, &L.ln2_b, &L.fw1, &L.fb1, &L.fw2, &L.fb2})
            out.push_back(p);
    }
    return out;
}

std::vector<const Param*> TransformerParams::all_params() const {
    auto mut = const_cast<TransformerParams*>(this)->all_params();
    return {mut.begin(), mut.end()};
}

void TransformerParams::zero_grads() {
    for (Param* p : all_params()) p->zero_grad();
}

Mat attention(const Mat& Q, const Mat& K, const Mat& V, const std::vector<u8>& mask,
              int n_heads) {
    int nq = Q.rows, nk = K.rows, d = Q.cols;
    SEQFM_CHECK(K.cols == d && V.cols == d && V.rows == nk, "attention: shape mismatch");
    SEQFM_CHECK(d % n_heads == 0, "attention: d not divisible by heads");
    SEQFM_CHECK(mask.size() == static_cast<size_t>(nq) * nk, "attention: mask size mismatch");
    int dh = d / n_heads;
    float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    Mat out(nq, d);
    Vec logits(static_cast<size_t>(nk));
    for (int h = 0; h < n_heads; h++) {
        int off = h * dh;
        for (int i = 0; i < nq; i++) {
            const u8* mrow = mask.data() + static_cast<size_t>(i) * nk;
            float mx = -std::numeric_limits<float>::infinity();
            int attendable = 0;
            for (int j = 0; j < nk; j++) {
                if (!mrow[j]) continue;
                float s = dot(Q.row(i) + off, K.row(j) + off, dh) * scale;
                logits[j] = s;
                mx = std::max(mx, s);
                attendable++;
            }
            SEQFM_CHECK(attendable > 0, "attention: query " << i << " has no attendable key");
            float denom = 0.0f;
            for (int j = 0; j < nk; j++)
                if (mrow[j]) denom += std::exp(logits[j] - mx);
            float* orow = out.row(i) + off;
            for (int j = 0; j < nk; j++) {
                if (!mrow[j]) continue;
                float pj = std::exp(logits[j] - mx) / denom;
                axpy(pj, V.row(j) + off, orow, dh);
            }
        }
    }
    return out;
}

// One Pre-LN block. Writes x_out; fills lc (probs only when record_probs).
void layer_forward(const LayerP& L, const ModelConfig& cfg, const Mat& x_in, Mat& x_out,
                   LayerCache& lc, bool record_probs, Rng* drop_rng, int layer_idx) {
    int n = x_in.rows, d = cfg.d_model, heads = cfg.n_heads, dh = cfg.d_head();
    float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    lc.x = x_in;
    Mat a;
    layernorm_forward(x_in, L.ln1_g, L.ln1_b, a, &lc.xhat1, &lc.rstd1);
    linear_forward(a, L.wq, L.bq, lc.q);
    linear_forward(a, L.wk, L.bk, lc.k);
    linear_forward(a, L.wv, L.bv, lc.v);

    lc.ctx = Mat(n, d);
    if (record_probs) {
        lc.probs.assign(static_cast<size_t>(heads), Mat(n, n));
    }
    Vec logits(static_cast<size_t>(n));
    for (int h = 0; h < heads; h++) {
        int off = h * dh;
        for (int i = 0; i < n; i++) {
            const float* qi = lc.q.row(i) + off;
            float mx = -std::numeric_limits<float>::infinity();
            for (int j = 0; j <= i; j++) {
                logits[j] = dot(qi, lc.k.row(j) + off, dh) * scale;
                mx = std::max(mx, logits[j]);
            }
            float denom = 0.0f;
            for (int j = 0; j <= i; j++) {
                logits[j] = std::exp(logits[j] - mx);
                denom += logits[j];
            }
            float inv = 1.0f / denom;
            float* crow = lc.ctx.row(i) + off;
            float* prow = record_probs ? lc.probs[h].row(i) : nullptr;
            for (int j = 0; j <= i; j++) {
                float pj = logits[j] * inv;
                if (prow) prow[j] = pj;
                axpy(pj, lc.v.row(j) + off, crow, dh);
            }
        }
    }

    Mat o;
    linear_forward(lc.ctx, L.wo, L.bo, o);
    bool drop = cfg.dropout > 0.0f && drop_rng;
    if (drop) apply_dropout(o, lc.drop_attn, cfg.dropout, *drop_rng);

    lc.x2 = x_in;
    for (size_t i = 0; i < o.a.size(); i++) lc.x2.a[i] += o.a[i];

    Mat m;
    layernorm_forward(lc.x2, L.ln2_g, L.ln2_b, m, &lc.xhat2, &lc.rstd2);
    linear_forward(m, L.fw1, L.fb1, lc.f1);
    lc.f1a = Mat(lc.f1.rows, lc.f1.cols);
    for (size_t i = 0; i < lc.f1.a.size(); i++) lc.f1a.a[i] = gelu(lc.f1.a[i]);
    Mat f2;
    linear_forward(lc.f1a, L.fw2, L.fb2, f2);
    if (drop) apply_dropout(f2, lc.drop_ff, cfg.dropout, *drop_rng);

    x_out = lc.x2;
    for (size_t i = 0; i < f2.a.size(); i++) x_out.a[i] += f2.a[i];
    check_finite(x_out, layer_idx);
}

namespace {

void layer_backward(LayerP& L, const ModelConfig& cfg, const LayerCache& lc, const Mat& dx_out,
                    Mat& dx_in) {
    int n = lc.x.rows, d = cfg.d_model, heads = cfg.n_heads, dh = cfg.d_head();
    float scale = 1.0f / std::sqrt(static_cast<float>(dh));

    // x_out = x2 + dropout(f2)
    Mat df2 = dx_out;
    if (lc.drop_ff.rows > 0)
        for (size_t i = 0; i < df2.a.size(); i++) df2.a[i] *= lc.drop_ff.a[i];

    // FF: f2 = fw2(gelu(fw1(m)))
    Mat da1;
    linear_backward(lc.f1a, L.fw2, L.fb2, df2, &da1);
    Mat df1(da1.rows, da1.cols);
    for (size_t i = 0; i < da1.a.size(); i++) df1.a[i] = da1.a[i] * gelu_grad(lc.f1.a[i]);
    // recompute m = g2 .* xhat2 + b2 for the weight gradient
    Mat m(n, d);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < d; j++)
            m.at(i, j) = L.ln2_g.v.at(0, j) * lc.xhat2.at(i, j) + L.ln2_b.v.at(0, j);
    Mat dm;
    linear_backward(m, L.fw1, L.fb1, df1, &dm);

    Mat dx2 = dx_out; // residual branch
    layernorm_backward(lc.xhat2, lc.rstd2, L.ln2_g, L.ln2_b, dm, dx2);

    // x2 = x + dropout(o)
    Mat do_ = dx2;
    if (lc.drop_attn.rows > 0)
        for (size_t i = 0; i < do_.a.size(); i++) do_.a[i] *= lc.drop_attn.a[i];

    Mat dctx;
    linear_backward(lc.ctx, L.wo, L.bo, do_, &dctx);

    Mat dq(n, d), dk(n, d), dv(n, d);
    Vec dp(static_cast<size_t>(n));
    for (int h = 0; h < heads; h++) {
        int off = h * dh;
        const Mat& P = lc.probs[h];
        for (int i = 0; i < n; i++) {
            const float* dctx_i = dctx.row(i) + off;
            const float* prow = P.row(i);
            float psum = 0.0f;
            for (int j = 0; j <= i; j++) {
                axpy(prow[j], dctx_i, dv.row(j) + off, dh);
                dp[j] = dot(dctx_i, lc.v.row(j) + off, dh);
                psum += prow[j] * dp[j];
            }
            float* dqi = dq.row(i) + off;
            const float* qi = lc.q.row(i) + off;
            for (int j = 0; j <= i; j++) {
                float ds = prow[j] * (dp[j] - psum) * scale;
                axpy(ds, lc.k.row(j) + off, dqi, dh);
                axpy(ds, qi, dk.row(j) + off, dh);
            }
        }
    }

    // recompute a = g1 .* xhat1 + b1
    Mat a(n, d);
    for (int i = 0; i < n; i++)
        for (int j = 0; j < d; j++)
            a.at(i, j) = L.ln1_g.v.at(0, j) * lc.xhat1.at(i, j) + L.ln1_b.v.at(0, j);
    Mat da, tmp;
    linear_backward(a, L.wq, L.bq, dq, &da);
    linear_backward(a, L.wk, L.bk, dk, &tmp);
    for (size_t i = 0; i < da.a.size(); i++) da.a[i] += tmp.a[i];
    linear_backward(a, L.wv, L.bv, dv, &tmp);
    for (size_t i = 0; i < da.a.size(); i++) da.a[i] += tmp.a[i];

    dx_in = dx2; // residual branch
    layernorm_backward(lc.xhat1, lc.rstd1, L.ln1_g, L.ln1_b, da, dx_in);
}

} // namespace

Mat forward_rows(const TransformerParams& p, const Mat& E, ForwardCache* cache, Rng* train_rng) {
    const ModelConfig& cfg = p.cfg;
    SEQFM_CHECK(E.cols == cfg.d_emb, "forward_rows: input dim " << E.cols << " expected "
                                                                << cfg.d_emb);
    int n = E.rows;
    if (cache) {
        cache->layers.assign(static_cast<size_t>(cfg.n_layers), LayerCache{});
        cache->n = n;
    }
    Mat x;
    mlp_forward(p.phi_in, E, x, cache ? &cache->phi_in : nullptr);

    LayerCache scratch;
    for (int l = 0; l < cfg.n_layers; l++) {
        LayerCache& lc = cache ? cache->layers[l] : scratch;
        Mat x_out;
        layer_forward(p.layers[l], cfg, x, x_out, lc, cache != nullptr, train_rng, l);
        x = std::move(x_out);
    }
    if (cache) cache->x_final = x;

    Mat H;
    mlp_forward(p.phi_out, x, H, cache ? &cache->phi_out : nullptr);
    return H;
}

Mat backward_rows(TransformerParams& p, const ForwardCache& cache, const Mat& dH) {
    Mat dx;
    mlp_backward(p.phi_out, cache.phi_out, dH, dx);
    for (int l = p.cfg.n_layers - 1; l >= 0; l--) {
        Mat dx_in;
        layer_backward(p.layers[l], p.cfg, cache.layers[l], dx, dx_in);
        dx = std::move(dx_in);
    }
    Mat dE;
    mlp_backward(p.phi_in, cache.phi_in, dx, dE);
    return dE;
}

Mat segment_inputs(const TransformerParams& p, const IdEmbSource& ids, const Event* ev, int n,
                   int pos_offset) {
    const ModelConfig& cfg = p.cfg;
    SEQFM_CHECK(ids.emb_dim() == cfg.d_emb, "segment_inputs: id source dim mismatch");
    Mat E(n, cfg.d_emb);
    for (int i = 0; i < n; i++) {
        int a = static_cast<int>(ev[i].action);
        int s = static_cast<int>(ev[i].surface);
        SEQFM_CHECK(a >= 0 && a < cfg.n_actions, "unknown action value " << a << " at token " << i);
        SEQFM_CHECK(s >= 0 && s < cfg.n_surfaces,
                    "unknown surface value " << s << " at token " << i);
        float* row = E.row(i);
        ids.lookup_id(ev[i].item_id, row);
        axpy(1.0f, p.action_emb.v.row(a), row, cfg.d_emb);
        axpy(1.0f, p.surface_emb.v.row(s), row, cfg.d_emb);
        if (cfg.pos_mode == ModelConfig::PosMode::Learned) {
            int pos = pos_offset + i;
            SEQFM_CHECK(pos < cfg.max_len,
                        "position " << pos << " exceeds max_len " << cfg.max_len);
            axpy(1.0f, p.pos_emb.v.row(pos), row, cfg.d_emb);
        }
    }
    return E;
}

void segment_inputs_backward(TransformerParams& p, const HashedEmbeddingTable& table,
                             EmbeddingGradSink& sink, const Event* ev, int n, int pos_offset,
                             const Mat& dE) {
    SEQFM_CHECK(dE.rows == n, "segment_inputs_backward: row count mismatch");
    for (int i = 0; i < n; i++) {
        const float* g = dE.row(i);
        sink.accumulate_lookup_grad(table, ev[i].item_id, g);
        axpy(1.0f, g, p.action_emb.g.row(static_cast<int>(ev[i].action)), p.cfg.d_emb);
        axpy(1.0f, g, p.surface_emb.g.row(static_cast<int>(ev[i].surface)), p.cfg.d_emb);
        if (p.cfg.pos_mode == ModelConfig::PosMode::Learned)
            axpy(1.0f, g, p.pos_emb.g.row(pos_offset + i), p.cfg.d_emb);
    }
}

Mat model_forward(const TransformerParams& p, const IdEmbSource& ids, const Segment& seg,
                  ForwardCache* cache) {
    Mat E = segment_inputs(p, ids, seg.events.data(), seg.valid, 0);
    return forward_rows(p, E, cache);
}

Vec psi_forward(const TransformerParams& p, const Vec& emb, MlpCache* cache) {
    SEQFM_CHECK(static_cast<int>(emb.size()) == p.cfg.d_emb, "psi_forward: dim mismatch");
    Mat x(1, p.cfg.d_emb);
    std::memcpy(x.row(0), emb.data(), emb.size() * sizeof(float));
    Mat out;
    mlp_forward(p.psi, x, out, cache);
    return Vec(out.row(0), out.row(0) + out.cols);
}

// ---------------------------------------------------------------------------
// PFMC1 blob container

namespace {
constexpr char kCkptMagic[5] = {'P', 'F', 'M', 'C', '1'};
}

const Mat* NamedBlobs::find(const std::string& name) const {
    for (const auto& [n, m] : blobs)
        if (n == name) return &m;
    return nullptr;
}

void write_blob_file(const NamedBlobs& nb, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    SEQFM_CHECK(f.good(), "cannot open " << path << " for writing");
    f.write(kCkptMagic, sizeof(kCkptMagic));
    u32 cfg_len = static_cast<u32>(nb.config_text.size());
    f.write(reinterpret_cast<const char*>(&cfg_len), 4);
    f.write(nb.config_text.data(), cfg_len);
    u32 count = static_cast<u32>(nb.blobs.size());
    f.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& [name, m] : nb.blobs) {
        SEQFM_CHECK(name.size() < 65536, "blob name too long");
        u16 nl = static_cast<u16>(name.size());
        f.write(reinterpret_cast<const char*>(&nl), 2);
        f.write(name.data(), nl);
        u32 r = static_cast<u32>(m.rows), c = static_cast<u32>(m.cols);
        f.write(reinterpret_cast<const char*>(&r), 4);
        f.write(reinterpret_cast<const char*>(&c), 4);
        f.write(reinterpret_cast<const char*>(m.a.data()),
                static_cast<std::streamsize>(m.a.size() * sizeof(float)));
    }
    SEQFM_CHECK(f.good(), "write failed for " << path);
}

NamedBlobs read_blob_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    SEQFM_CHECK(f.good(), "cannot open " << path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t pos = 0;
    auto rd = [&](void* dst, size_t n, const char* what) {
        SEQFM_CHECK(buf.size() - pos >= n, "checkpoint truncated while reading " << what);
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    };
    char magic[5];
    rd(magic, 5, "magic");
    SEQFM_CHECK(std::memcmp(magic, kCkptMagic, 5) == 0, "bad checkpoint magic in " << path);
    NamedBlobs nb;
    u32 cfg_len;
    rd(&cfg_len, 4, "config length");
    SEQFM_CHECK(buf.size() - pos >= cfg_len, "checkpoint truncated inside config text");
    nb.config_text.assign(buf.data() + pos, cfg_len);
    pos += cfg_len;
    u32 count;
    rd(&count, 4, "blob count");
    for (u32 b = 0; b < count; b++) {
        u16 nl;
        rd(&nl, 2, "blob name length");
        SEQFM_CHECK(buf.size() - pos >= nl, "checkpoint truncated inside blob name");
        std::string name(buf.data() + pos, nl);
        pos += nl;
        u32 r, c;
        rd(&r, 4, "blob rows");
        rd(&c, 4, "blob cols");
        Mat m(static_cast<int>(r), static_cast<int>(c));
        rd(m.a.data(), m.a.size() * sizeof(float), name.c_str());
        nb.blobs.emplace_back(std::move(name), std::move(m));
    }
    SEQFM_CHECK(pos == buf.size(), "trailing bytes after checkpoint blobs");
    return nb;
}

void save_checkpoint(const TransformerParams& p, const HashedEmbeddingTable& table,
                     const std::string& path, const std::string& extra_config,
                     const std::vector<std::pair<std::string, Mat>>& extra_blobs) {
    NamedBlobs nb;
    std::ostringstream cfg;
    cfg << p.cfg.to_config_text();
    cfg << "table.rows=" << table.rows() << "\n";
    cfg << "table.d_sub=" << table.d_sub() << "\n";
    cfg << "table.seeds=";
    for (int j = 0; j < table.num_subtables(); j++) {
        if (j) cfg << ",";
        cfg << "0x" << std::hex << table.seeds()[j] << std::dec;
    }
    cfg << "\n";
    if (!extra_config.empty()) cfg << extra_config;
    nb.config_text = cfg.str();
    for (const Param* prm : p.all_params()) nb.blobs.emplace_back(prm->name, prm->v);
    for (int j = 0; j < table.num_subtables(); j++)
        nb.blobs.emplace_back("id_table.sub" + std::to_string(j), table.subtable(j));
    for (const auto& eb : extra_blobs) nb.blobs.emplace_back(eb);
    write_blob_file(nb, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    NamedBlobs nb = read_blob_file(path);
    auto kv = parse_kv_text(nb.config_text);

    Checkpoint ck;
    ck.config_text = nb.config_text;
    ModelConfig cfg = ModelConfig::from_config_text(nb.config_text);
    ck.params.init(cfg, 0);

    int rows = static_cast<int>(kv_get_int(kv, "table.rows"));
    int d_sub = static_cast<int>(kv_get_int(kv, "table.d_sub"));
    std::vector<u64> seeds;
    {
        std::istringstream ss(kv_get(kv, "table.seeds"));
        std::string tok;
        while (std::getline(ss, tok, ',')) seeds.push_back(std::stoull(tok, nullptr, 0));
    }
    SEQFM_CHECK(!seeds.empty(), "checkpoint table.seeds is empty");
    ck.table = HashedEmbeddingTable(rows, d_sub, seeds);
    SEQFM_CHECK(ck.table.d_emb() == cfg.d_emb,
                "checkpoint table dim " << ck.table.d_emb() << " != model d_emb " << cfg.d_emb);

    std::vector<std::string> consumed;
    for (Param* prm : ck.params.all_params()) {
        const Mat* m = nb.find(prm->name);
        SEQFM_CHECK(m, "checkpoint missing parameter blob '" << prm->name << "'");
        SEQFM_CHECK(m->rows == prm->v.rows && m->cols == prm->v.cols,
                    "checkpoint blob '" << prm->name << "' has shape " << m->rows << "x" << m->cols
                                        << ", expected " << prm->v.rows << "x" << prm->v.cols);
        prm->v = *m;
        consumed.push_back(prm->name);
    }
    for (int j = 0; j < ck.table.num_subtables(); j++) {
        std::string name = "id_table.sub" + std::to_string(j);
        const Mat* m = nb.find(name);
        SEQFM_CHECK(m, "checkpoint missing blob '" << name << "'");
        SEQFM_CHECK(m->rows == rows && m->cols == d_sub, "checkpoint blob '" << name
                                                                             << "' shape mismatch");
        ck.table.subtable(j) = *m;
        consumed.push_back(name);
    }
    for (auto& [name, m] : nb.blobs) {
        bool used = false;
        for (const auto& c : consumed)
            if (c == name) {
                used = true;
                break;
            }
        if (!used) ck.extra_blobs.emplace_back(name, std::move(m));
    }
    return ck;
}

} // namespace seqfm
