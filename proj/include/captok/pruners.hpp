#pragma once

// Token compressors. The base pruner is fixed-ratio adaptive average pooling
// applied per frame and per stream. The caption pruner is a small causal
// decoder conditioned on a segment's visual tokens: it greedily emits caption
// tokens until the stop symbol, and the tap-layer hidden state of each
// emitted token — pushed through the post projector — becomes one soft
// visual token. Caption length therefore adapts to scene content.

#include <string>
#include <vector>

#include "captok/encoders.hpp"
#include "captok/nn.hpp"

namespace captok {

struct BasePrunerConfig {
    int stride = 4;

    void validate() const {
        if (stride < 1) throw ConfigError("base pruner stride must be >= 1");
    }
};

inline int pooled_side(int grid_side, int stride) {
    if (grid_side < 1 || stride < 1) throw ConfigError("pooled_side: arguments must be >= 1");
    return (grid_side + stride - 1) / stride;
}

// Adaptive average pooling of one frame's token grid to side ceil(G/stride).
inline Tensor base_prune(const Tensor& frame_grid, int grid_side, int stride) {
    return adaptive_pool_grid(frame_grid, grid_side, pooled_side(grid_side, stride));
}

// Per-frame pooling over a (frames*G^2) x d stack.
inline Tensor base_prune_frames(const Tensor& tokens, int frames, int grid_side, int stride) {
    return detail::pool_frames(tokens, frames, grid_side, pooled_side(grid_side, stride));
}

// Pooled visual tokens per clip across both streams.
inline long pooled_tokens_per_clip(int image_grid, int video_grid, int stride,
                                   int frames = kNumFrames) {
    const long pi = pooled_side(image_grid, stride);
    const long pv = pooled_side(video_grid, stride);
    return frames * (pi * pi + pv * pv);
}

struct CapPrunerConfig {
    int layers = 4;
    int embed_dim = 64;
    int heads = 4;
    int max_tokens = 128;  // cap on emitted tokens per segment
    int tap_layer = 2;     // residual stream exported as soft tokens; default layers/2
    int prefix_stride = 1; // optional pooling of the conditioning tokens
    int context = 512;

    void validate() const {
        if (layers < 1) throw ConfigError("cap pruner layers must be >= 1");
        if (heads < 1 || embed_dim % heads != 0)
            throw ConfigError("cap pruner head count must divide embed_dim");
        if (max_tokens < 1) throw ConfigError("cap pruner max_tokens must be >= 1");
        if (tap_layer < 0 || tap_layer > layers)
            throw ConfigError("cap pruner tap_layer must lie in [0, layers]");
        if (prefix_stride < 1) throw ConfigError("cap pruner prefix_stride must be >= 1");
        if (context < 2) throw ConfigError("cap pruner context too small");
    }
};

enum class CapMode { FreeRunning, TeacherForced };

struct CompressedSegment {
    Tensor soft_tokens;            // n x d_llm, post-projector outputs
    std::vector<int> caption_ids;  // emitted ids, stop symbol excluded
    int length = 0;                // == caption_ids.size()
    int segment_index = 0;
    CapMode mode = CapMode::FreeRunning;
    bool truncated = false;  // teacher-forced gold exceeded max_tokens
};

struct CapPruner {
    Decoder dec;
    CapPrunerConfig cfg;
    int bos = 1;
    int eos = 2;

    static CapPruner create(ParamSet& ps, const std::string& prefix, const CapPrunerConfig& cfg,
                            int vocab, int bos, int eos, Rng& rng) {
        cfg.validate();
        CapPruner p;
        p.cfg = cfg;
        p.bos = bos;
        p.eos = eos;
        p.dec = Decoder::create(ps, prefix, cfg.layers, cfg.embed_dim, cfg.heads,
                                4 * cfg.embed_dim, vocab, cfg.context, rng);
        return p;
    }
};

// Residual-stream states after the indexed block (0 = embeddings+positional).
inline Tensor tap_hidden(const Decoder::Trace& trace, int layer) {
    const int top = static_cast<int>(trace.states.size()) - 1;
    if (layer < 0 || layer > top)
        throw ConfigError("tap layer " + std::to_string(layer) + " outside [0, " +
                          std::to_string(top) + "]");
    return trace.states[static_cast<size_t>(layer)];
}

namespace detail {

inline std::vector<double> tensor_row(const Tensor& t, int r) {
    const int c = t.cols();
    const double* p = t.data().data() + static_cast<size_t>(r) * c;
    return std::vector<double>(p, p + c);
}

inline std::vector<double> embedding_row(const Embedding& e, int id) {
    if (id < 0 || id >= e.vocab()) throw DataError("token id outside decoder vocabulary");
    std::vector<double> row = tensor_row(e.table, id);
    if (e.lora) {
        // same accumulation order as the tensor path, so both stay bitwise equal
        const int r = e.lora->rank, d = static_cast<int>(row.size());
        const double* pa = e.lora->a.data().data() + static_cast<size_t>(id) * r;
        const double* pb = e.lora->b.data().data();
        const double sc = e.lora->scaling();
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int k = 0; k < r; ++k) acc += pa[k] * pb[static_cast<size_t>(k) * d + j];
            row[j] += sc * acc;
        }
    }
    return row;
}

}  // namespace detail

// Greedy decode conditioned on the projected segment tokens. Deterministic in
// (weights, prefix); stops at the stop symbol or after max_tokens emissions.
// tap_override picks a different exported layer without touching the decode
// path, so emitted ids and length cannot depend on it.
inline CompressedSegment cap_prune_free_running(const CapPruner& p, const Tensor& prefix,
                                                const Mlp& post, int segment_index,
                                                int tap_override = -1) {
    const int tap_idx = tap_override < 0 ? p.cfg.tap_layer : tap_override;
    if (tap_idx > p.cfg.layers) throw ConfigError("tap layer override out of range");
    if (prefix.cols() != p.cfg.embed_dim)
        throw ShapeError("cap pruner prefix width does not match embed_dim");
    const int P = prefix.rows();
    p.dec.check_capacity(P + 1 + p.cfg.max_tokens, "cap pruner decode");

    KvCache cache;
    cache.reset(static_cast<size_t>(p.dec.layers()));
    for (int r = 0; r < P; ++r) p.dec.step(detail::tensor_row(prefix, r), cache);
    StepTrace tr = p.dec.step(detail::embedding_row(p.dec.tok, p.bos), cache);

    CompressedSegment out;
    out.segment_index = segment_index;
    out.mode = CapMode::FreeRunning;
    std::vector<double> tap_flat;
    while (true) {
        const int id = argmax(tr.logits);
        if (id == p.eos || static_cast<int>(out.caption_ids.size()) >= p.cfg.max_tokens) break;
        out.caption_ids.push_back(id);
        tr = p.dec.step(detail::embedding_row(p.dec.tok, id), cache);
        const auto& state = tr.states[static_cast<size_t>(tap_idx)];
        tap_flat.insert(tap_flat.end(), state.begin(), state.end());
    }
    out.length = static_cast<int>(out.caption_ids.size());
    Tensor tap = Tensor::from_vector({out.length, p.cfg.embed_dim}, std::move(tap_flat));
    out.soft_tokens = post.forward(tap);
    return out;
}

namespace detail {

// [prefix rows][BOS][gold...] as one embedded sequence.
inline Tensor caption_content(const CapPruner& p, const Tensor& prefix,
                              const std::vector<int>& gold) {
    std::vector<int> ids;
    ids.reserve(gold.size() + 1);
    ids.push_back(p.bos);
    ids.insert(ids.end(), gold.begin(), gold.end());
    return concat_rows({prefix, p.dec.tok.forward(ids)});
}

}  // namespace detail

// Single-pass hidden states against a gold caption; used during fine-tuning.
inline CompressedSegment cap_prune_teacher_forced(const CapPruner& p, const Tensor& prefix,
                                                  std::vector<int> gold, const Mlp& post,
                                                  int segment_index) {
    if (prefix.cols() != p.cfg.embed_dim)
        throw ShapeError("cap pruner prefix width does not match embed_dim");
    CompressedSegment out;
    out.segment_index = segment_index;
    out.mode = CapMode::TeacherForced;
    if (static_cast<int>(gold.size()) > p.cfg.max_tokens) {
        gold.resize(static_cast<size_t>(p.cfg.max_tokens));
        out.truncated = true;
    }
    const int P = prefix.rows();
    const int n = static_cast<int>(gold.size());
    Decoder::Trace tr = p.dec.forward(detail::caption_content(p, prefix, gold));
    Tensor tap = slice_rows(tap_hidden(tr, p.cfg.tap_layer), P + 1, n);
    out.soft_tokens = post.forward(tap);
    out.caption_ids = std::move(gold);
    out.length = n;
    return out;
}

// Cross-entropy over the gold ids plus the closing stop symbol; visual prefix
// positions carry no loss.
inline Tensor caption_loss(const CapPruner& p, const Tensor& prefix, std::vector<int> gold) {
    if (static_cast<int>(gold.size()) > p.cfg.max_tokens)
        gold.resize(static_cast<size_t>(p.cfg.max_tokens));
    const int P = prefix.rows();
    Decoder::Trace tr = p.dec.forward(detail::caption_content(p, prefix, gold));
    std::vector<int> targets(static_cast<size_t>(P), -1);
    targets.insert(targets.end(), gold.begin(), gold.end());
    targets.push_back(p.eos);
    return cross_entropy(tr.logits, targets, -1);
}

}  // namespace captok
