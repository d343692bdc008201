#pragma once

// Transformer building blocks shared by the caption decoder, the base LLM
// and the two visual encoders.
//
// Every block exposes two numerically identical paths:
//   * a taped full-sequence forward used for training, and
//   * an incremental KV-cached step used for greedy decoding.
// Both accumulate reductions in the same index order, so a cached decode of
// a sequence reproduces the full forward bitwise. Tests rely on this.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "captok/optim.hpp"
#include "captok/param.hpp"
#include "captok/tensor.hpp"

namespace captok {

struct Linear {
    Tensor w;  // [in x out]
    Tensor b;  // [out]

    static Linear create(ParamSet& ps, const std::string& prefix, int in, int out, Rng& rng) {
        Linear l;
        l.w = Tensor::randn(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
        l.b = Tensor::zeros({out});
        l.w.set_requires_grad(true);
        l.b.set_requires_grad(true);
        ps.add(prefix + ".w", l.w);
        ps.add(prefix + ".b", l.b);
        return l;
    }

    Tensor forward(const Tensor& x) const { return add_rowwise(matmul(x, w), b); }

    int in_dim() const { return w.dim(0); }
    int out_dim() const { return w.dim(1); }

    // y_j = sum_i x_i w_ij + b_j, same accumulation order as matmul
    void forward_row(const double* x, double* y) const {
        const int in = in_dim(), out = out_dim();
        for (int j = 0; j < out; ++j) y[j] = 0.0;
        const double* pw = w.data().data();
        for (int i = 0; i < in; ++i) {
            const double xi = x[i];
            const double* wrow = pw + static_cast<size_t>(i) * out;
            for (int j = 0; j < out; ++j) y[j] += xi * wrow[j];
        }
        for (int j = 0; j < out; ++j) y[j] += b.data()[j];
    }
};

// Low-rank adapter around a base projection: y = x W + b + (alpha/r) (x A) B.
// B starts at zero so an adapted layer reproduces its base bitwise at init.
struct LoraAdapter {
    Tensor a;  // [in x r]
    Tensor b;  // [r x out]
    int rank = 0;
    double alpha = 1.0;

    static LoraAdapter create(ParamSet& ps, const std::string& prefix, int in, int out, int rank,
                              double alpha, Rng& rng) {
        if (rank < 1 || rank > std::min(in, out))
            throw ConfigError("lora rank " + std::to_string(rank) + " exceeds matrix dims " +
                              std::to_string(in) + "x" + std::to_string(out));
        LoraAdapter l;
        l.rank = rank;
        l.alpha = alpha;
        l.a = Tensor::randn(rng, {in, rank}, 1.0 / std::sqrt(static_cast<double>(in)));
        l.b = Tensor::zeros({rank, out});
        l.a.set_requires_grad(true);
        l.b.set_requires_grad(true);
        ps.add(prefix + ".lora_a", l.a);
        ps.add(prefix + ".lora_b", l.b);
        return l;
    }

    double scaling() const { return alpha / static_cast<double>(rank); }
};

// effective matrix W + (alpha/r) A B, materialized
inline Tensor lora_apply(const Tensor& w, const Tensor& a, const Tensor& b, double alpha,
                         int rank) {
    if (rank < 1 || a.cols() != rank || b.rows() != rank || a.rows() != w.rows() ||
        b.cols() != w.cols())
        throw ConfigError("lora_apply: rank/shape mismatch");
    return add(w, scale(matmul(a, b), alpha / static_cast<double>(rank)));
}

struct Projection {
    Linear base;
    std::optional<LoraAdapter> lora;

    Tensor forward(const Tensor& x) const {
        Tensor y = base.forward(x);
        if (lora)
            y = add(y, scale(matmul(matmul(x, lora->a), lora->b), lora->scaling()));
        return y;
    }

    void forward_row(const double* x, double* y, std::vector<double>& scratch) const {
        base.forward_row(x, y);
        if (!lora) return;
        const int in = base.in_dim(), out = base.out_dim(), r = lora->rank;
        scratch.assign(static_cast<size_t>(r) + out, 0.0);
        double* u = scratch.data();
        double* ub = u + r;
        const double* pa = lora->a.data().data();
        for (int i = 0; i < in; ++i) {
            const double xi = x[i];
            const double* arow = pa + static_cast<size_t>(i) * r;
            for (int j = 0; j < r; ++j) u[j] += xi * arow[j];
        }
        const double* pb = lora->b.data().data();
        for (int i = 0; i < r; ++i) {
            const double ui = u[i];
            const double* brow = pb + static_cast<size_t>(i) * out;
            for (int j = 0; j < out; ++j) ub[j] += ui * brow[j];
        }
        const double sc = lora->scaling();
        for (int j = 0; j < out; ++j) y[j] += sc * ub[j];
    }
};

struct LayerNorm {
    Tensor gain, bias;
    double eps = 1e-5;

    static LayerNorm create(ParamSet& ps, const std::string& prefix, int d, double eps = 1e-5) {
        LayerNorm ln;
        ln.eps = eps;
        ln.gain = Tensor::full({d}, 1.0, true);
        ln.bias = Tensor::zeros({d}, true);
        ps.add(prefix + ".gain", ln.gain);
        ps.add(prefix + ".bias", ln.bias);
        return ln;
    }

    Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }

    void forward_row(const double* x, double* y, int d) const {
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += x[j];
        m /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (x[j] - m) * (x[j] - m);
        var /= d;
        const double istd = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) y[j] = (x[j] - m) * istd * gain.data()[j] + bias.data()[j];
    }
};

struct Embedding {
    Tensor table;  // [V x d]
    std::optional<LoraAdapter> lora;

    static Embedding create(ParamSet& ps, const std::string& prefix, int vocab, int d, Rng& rng) {
        Embedding e;
        e.table = Tensor::randn(rng, {vocab, d}, 0.02, true);
        ps.add(prefix + ".table", e.table);
        return e;
    }

    Tensor forward(const std::vector<int>& ids) const {
        Tensor rows = take_rows(table, ids);
        if (lora)
            rows = add(rows, scale(matmul(take_rows(lora->a, ids), lora->b), lora->scaling()));
        return rows;
    }
    int vocab() const { return table.dim(0); }
    int dim() const { return table.dim(1); }
};

struct Attention {
    Projection q, k, v, o;
    int heads = 1;

    static Attention create(ParamSet& ps, const std::string& prefix, int d, int heads, Rng& rng) {
        if (heads < 1 || d % heads != 0)
            throw ConfigError("attention: head count must divide embed dim");
        Attention a;
        a.heads = heads;
        a.q.base = Linear::create(ps, prefix + ".q", d, d, rng);
        a.k.base = Linear::create(ps, prefix + ".k", d, d, rng);
        a.v.base = Linear::create(ps, prefix + ".v", d, d, rng);
        a.o.base = Linear::create(ps, prefix + ".o", d, d, rng);
        return a;
    }

    void add_lora(ParamSet& ps, const std::string& prefix, int rank, double alpha, Rng& rng) {
        const int d = q.base.in_dim();
        q.lora = LoraAdapter::create(ps, prefix + ".q", d, d, rank, alpha, rng);
        k.lora = LoraAdapter::create(ps, prefix + ".k", d, d, rank, alpha, rng);
        v.lora = LoraAdapter::create(ps, prefix + ".v", d, d, rank, alpha, rng);
        o.lora = LoraAdapter::create(ps, prefix + ".o", d, d, rank, alpha, rng);
    }

    Tensor forward(const Tensor& x, bool causal) const {
        const int d = q.base.in_dim();
        const int dh = d / heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        Tensor qx = q.forward(x), kx = k.forward(x), vx = v.forward(x);
        std::vector<Tensor> mixes;
        mixes.reserve(heads);
        for (int h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(qx, h * dh, dh);
            Tensor kh = slice_cols(kx, h * dh, dh);
            Tensor vh = slice_cols(vx, h * dh, dh);
            Tensor scores = scale(matmul(qh, transpose(kh)), sc);
            Tensor attn = causal ? causal_softmax(scores) : softmax_rows(scores);
            mixes.push_back(matmul(attn, vh));
        }
        return o.forward(concat_cols(mixes));
    }
};

// x + attn(ln1(x)); then + ffn(ln2(.)) with GELU, pre-norm, no dropout
struct TransformerBlock {
    LayerNorm ln1, ln2;
    Attention attn;
    Linear fc1, fc2;

    static TransformerBlock create(ParamSet& ps, const std::string& prefix, int d, int heads,
                                   int ffn, Rng& rng) {
        TransformerBlock b;
        b.ln1 = LayerNorm::create(ps, prefix + ".ln1", d);
        b.ln2 = LayerNorm::create(ps, prefix + ".ln2", d);
        b.attn = Attention::create(ps, prefix + ".attn", d, heads, rng);
        b.fc1 = Linear::create(ps, prefix + ".fc1", d, ffn, rng);
        b.fc2 = Linear::create(ps, prefix + ".fc2", ffn, d, rng);
        return b;
    }

    Tensor forward(const Tensor& x, bool causal) const {
        Tensor h = add(x, attn.forward(ln1.forward(x), causal));
        return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
    }
};

struct TransformerStack {
    std::vector<TransformerBlock> blocks;

    static TransformerStack create(ParamSet& ps, const std::string& prefix, int layers, int d,
                                   int heads, int ffn, Rng& rng) {
        TransformerStack s;
        for (int i = 0; i < layers; ++i)
            s.blocks.push_back(
                TransformerBlock::create(ps, prefix + ".block" + std::to_string(i), d, heads, ffn,
                                         rng));
        return s;
    }

    // returns residual states: [0] = input, [i] = after block i
    std::vector<Tensor> forward_states(const Tensor& x, bool causal) const {
        std::vector<Tensor> states;
        states.reserve(blocks.size() + 1);
        states.push_back(x);
        Tensor h = x;
        for (const auto& b : blocks) {
            h = b.forward(h, causal);
            states.push_back(h);
        }
        return states;
    }

    Tensor forward(const Tensor& x, bool causal) const {
        Tensor h = x;
        for (const auto& b : blocks) h = b.forward(h, causal);
        return h;
    }
};

// ---- incremental decoding ----

struct KvCache {
    // per layer, appended K/V rows of width d, flattened
    std::vector<std::vector<double>> k, v;
    int len = 0;

    void reset(size_t layers) {
        k.assign(layers, {});
        v.assign(layers, {});
        len = 0;
    }
};

struct StepTrace {
    std::vector<std::vector<double>> states;  // residual stream, [layers+1][d]
    std::vector<double> logits;               // filled when a head is attached
};

// Decoder-only transformer over externally assembled content embeddings.
// Positional embeddings are added internally; exceeding their table is a
// capacity error.
struct Decoder {
    Embedding tok;
    Tensor pos;  // [context x d]
    TransformerStack stack;
    Projection head;  // d -> V, logits = head(resid_L), no final norm
    int heads = 1;
    int context = 0;
    int embed_dim = 0;

    static Decoder create(ParamSet& ps, const std::string& prefix, int layers, int d, int heads,
                          int ffn, int vocab, int context, Rng& rng) {
        Decoder dec;
        dec.heads = heads;
        dec.context = context;
        dec.embed_dim = d;
        dec.tok = Embedding::create(ps, prefix + ".tok", vocab, d, rng);
        dec.pos = Tensor::randn(rng, {context, d}, 0.02, true);
        ps.add(prefix + ".pos", dec.pos);
        dec.stack = TransformerStack::create(ps, prefix, layers, d, heads, ffn, rng);
        dec.head.base = Linear::create(ps, prefix + ".head", d, vocab, rng);
        return dec;
    }

    int layers() const { return static_cast<int>(stack.blocks.size()); }
    int vocab() const { return tok.vocab(); }

    void check_capacity(int n, const char* what) const {
        if (n > context)
            throw CapacityError(std::string(what) + ": sequence of " + std::to_string(n) +
                                " exceeds context limit " + std::to_string(context));
    }

    struct Trace {
        std::vector<Tensor> states;  // [layers+1], each [N x d]
        Tensor logits;               // [N x V]
    };

    // full-sequence causal forward over content embeddings [N x d]
    Trace forward(const Tensor& content) const {
        const int n = content.rows();
        check_capacity(n, "decoder forward");
        std::vector<int> positions(n);
        for (int i = 0; i < n; ++i) positions[i] = i;
        Tensor x = add(content, take_rows(pos, positions));
        Trace tr;
        tr.states = stack.forward_states(x, /*causal=*/true);
        tr.logits = head.forward(tr.states.back());
        return tr;
    }

    // one cached step over a single content-embedding row
    StepTrace step(const std::vector<double>& content_row, KvCache& cache) const {
        const int d = embed_dim;
        if (static_cast<int>(content_row.size()) != d)
            throw ShapeError("decoder step: row width mismatch");
        if (cache.k.size() != stack.blocks.size()) cache.reset(stack.blocks.size());
        check_capacity(cache.len + 1, "decoder step");
        const int t = cache.len;
        StepTrace out;
        std::vector<double> x(d);
        for (int j = 0; j < d; ++j)
            x[j] = content_row[j] + pos.data()[static_cast<size_t>(t) * d + j];
        out.states.push_back(x);

        std::vector<double> ln(d), qr(d), kr(d), vr(d), mix(d), proj(d), scratch;
        const int dh = d / heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> attw;
        std::vector<double> ffn_mid;
        for (size_t li = 0; li < stack.blocks.size(); ++li) {
            const TransformerBlock& b = stack.blocks[li];
            b.ln1.forward_row(x.data(), ln.data(), d);
            b.attn.q.forward_row(ln.data(), qr.data(), scratch);
            b.attn.k.forward_row(ln.data(), kr.data(), scratch);
            b.attn.v.forward_row(ln.data(), vr.data(), scratch);
            cache.k[li].insert(cache.k[li].end(), kr.begin(), kr.end());
            cache.v[li].insert(cache.v[li].end(), vr.begin(), vr.end());
            const int n_ctx = t + 1;
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                attw.assign(n_ctx, 0.0);
                for (int s = 0; s < n_ctx; ++s) {
                    const double* krow = cache.k[li].data() + static_cast<size_t>(s) * d + off;
                    double acc = 0.0;
                    for (int i = 0; i < dh; ++i) acc += qr[off + i] * krow[i];
                    attw[s] = acc * sc;
                }
                detail::softmax_row(attw.data(), attw.data(), n_ctx, n_ctx);
                for (int j = 0; j < dh; ++j) {
                    double acc = 0.0;
                    for (int s = 0; s < n_ctx; ++s)
                        acc += attw[s] * cache.v[li][static_cast<size_t>(s) * d + off + j];
                    mix[off + j] = acc;
                }
            }
            b.attn.o.forward_row(mix.data(), proj.data(), scratch);
            for (int j = 0; j < d; ++j) x[j] += proj[j];
            b.ln2.forward_row(x.data(), ln.data(), d);
            ffn_mid.resize(static_cast<size_t>(b.fc1.out_dim()));
            b.fc1.forward_row(ln.data(), ffn_mid.data());
            for (double& v2 : ffn_mid)
                v2 = 0.5 * v2 * (1.0 + std::erf(v2 * 0.70710678118654752440));
            b.fc2.forward_row(ffn_mid.data(), proj.data());
            for (int j = 0; j < d; ++j) x[j] += proj[j];
            out.states.push_back(x);
        }
        out.logits.resize(static_cast<size_t>(head.base.out_dim()));
        head.forward_row(x.data(), out.logits.data(), scratch);
        cache.len += 1;
        return out;
    }
};

inline Tensor causal_self_attention(const Tensor& x, const Attention& attn) {
    return attn.forward(x, /*causal=*/true);
}

inline int argmax(const std::vector<double>& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = static_cast<int>(i);
    return best;
}

}  // namespace captok
