#pragma once

// Dual tiny visual encoders over symbolic frames: a frame encoder with no
// cross-frame mixing and a segment encoder attending across all four frames,
// plus the two-layer projectors that feed the caption pruner and the LLM.

#include <vector>

#include "captok/corpus.hpp"
#include "captok/nn.hpp"

namespace captok {

struct EncoderConfig {
    int image_grid = 8;  // output grid side per frame, image stream
    int video_grid = 4;  // output grid side per frame, video stream
    int embed_dim = 64;
    int layers = 2;
    int heads = 4;

    void validate() const {
        if (image_grid < 1 || video_grid < 1) throw ConfigError("encoder grids must be >= 1");
        if (layers < 1) throw ConfigError("encoder layers must be >= 1");
        if (heads < 1 || embed_dim % heads != 0)
            throw ConfigError("encoder head count must divide embed_dim");
    }
};

// Two-layer MLP with a GELU in between; used for all projectors.
struct Mlp {
    Linear fc1, fc2;

    static Mlp create(ParamSet& ps, const std::string& prefix, int in, int hidden, int out,
                      Rng& rng) {
        Mlp m;
        m.fc1 = Linear::create(ps, prefix + ".fc1", in, hidden, rng);
        m.fc2 = Linear::create(ps, prefix + ".fc2", hidden, out, rng);
        return m;
    }

    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

constexpr int kSymbolVocab = 1 + kNumShapes * kNumColors;  // 0 = empty cell

namespace detail {

inline Tensor embed_frame(const Embedding& sym, const std::vector<int>& cells) {
    for (int s : cells)
        if (s < 0 || s >= kSymbolVocab) throw DataError("cell symbol outside vocabulary");
    return take_rows(sym.table, cells);
}

// Pools a (frames*side^2) x d stack frame-by-frame to out_side^2 tokens each.
inline Tensor pool_frames(const Tensor& tokens, int frames, int side, int out_side) {
    if (tokens.rows() != frames * side * side)
        throw ShapeError("pool_frames: row count does not match frame grid");
    if (side == out_side) return tokens;
    std::vector<Tensor> pooled;
    for (int f = 0; f < frames; ++f)
        pooled.push_back(
            adaptive_pool_grid(slice_rows(tokens, f * side * side, side * side), side, out_side));
    return concat_rows(pooled);
}

}  // namespace detail

// Per-frame encoder: each frame is processed independently, so permuting
// frames permutes the output blocks and nothing else.
struct FrameEncoder {
    Embedding sym;
    Tensor pos;  // scene_grid^2 x d
    TransformerStack stack;
    int scene_grid = 8;
    int out_grid = 8;
    int embed_dim = 64;

    static FrameEncoder create(ParamSet& ps, const std::string& prefix, const EncoderConfig& cfg,
                               int scene_grid, Rng& rng) {
        cfg.validate();
        FrameEncoder e;
        e.scene_grid = scene_grid;
        e.out_grid = cfg.image_grid;
        e.embed_dim = cfg.embed_dim;
        e.sym = Embedding::create(ps, prefix + ".sym", kSymbolVocab, cfg.embed_dim, rng);
        e.pos = Tensor::randn(rng, {scene_grid * scene_grid, cfg.embed_dim}, 0.02, true);
        ps.add(prefix + ".pos", e.pos);
        e.stack = TransformerStack::create(ps, prefix + ".stack", cfg.layers, cfg.embed_dim,
                                           cfg.heads, 4 * cfg.embed_dim, rng);
        return e;
    }

    // frames: kFramesPerSegment rows of scene_grid^2 symbols -> (4*out_grid^2) x d
    Tensor encode(const std::vector<std::vector<int>>& frames) const {
        if (static_cast<int>(frames.size()) != kFramesPerSegment)
            throw ShapeError("frame encoder expects one segment of frames");
        std::vector<Tensor> blocks;
        for (const auto& cells : frames) {
            if (static_cast<int>(cells.size()) != scene_grid * scene_grid)
                throw ShapeError("frame cell count does not match scene grid");
            Tensor x = add(detail::embed_frame(sym, cells), pos);
            x = stack.forward(x, /*causal=*/false);
            blocks.push_back(x);
        }
        return detail::pool_frames(concat_rows(blocks), kFramesPerSegment, scene_grid, out_grid);
    }
};

// Segment encoder: one transformer over all four frames' cells jointly, so
// information flows across frames before per-frame pooling.
struct VideoEncoder {
    Embedding sym;
    Tensor pos;        // scene_grid^2 x d, shared across frames
    Tensor frame_pos;  // kFramesPerSegment x d
    TransformerStack stack;
    int scene_grid = 8;
    int out_grid = 4;
    int embed_dim = 64;

    static VideoEncoder create(ParamSet& ps, const std::string& prefix, const EncoderConfig& cfg,
                               int scene_grid, Rng& rng) {
        cfg.validate();
        VideoEncoder e;
        e.scene_grid = scene_grid;
        e.out_grid = cfg.video_grid;
        e.embed_dim = cfg.embed_dim;
        e.sym = Embedding::create(ps, prefix + ".sym", kSymbolVocab, cfg.embed_dim, rng);
        e.pos = Tensor::randn(rng, {scene_grid * scene_grid, cfg.embed_dim}, 0.02, true);
        ps.add(prefix + ".pos", e.pos);
        e.frame_pos = Tensor::randn(rng, {kFramesPerSegment, cfg.embed_dim}, 0.02, true);
        ps.add(prefix + ".frame_pos", e.frame_pos);
        e.stack = TransformerStack::create(ps, prefix + ".stack", cfg.layers, cfg.embed_dim,
                                           cfg.heads, 4 * cfg.embed_dim, rng);
        return e;
    }

    Tensor encode(const std::vector<std::vector<int>>& frames) const {
        if (static_cast<int>(frames.size()) != kFramesPerSegment)
            throw ShapeError("video encoder expects one segment of frames");
        std::vector<Tensor> blocks;
        for (int f = 0; f < kFramesPerSegment; ++f) {
            const auto& cells = frames[static_cast<size_t>(f)];
            if (static_cast<int>(cells.size()) != scene_grid * scene_grid)
                throw ShapeError("frame cell count does not match scene grid");
            Tensor x = add(detail::embed_frame(sym, cells), pos);
            std::vector<int> fidx(static_cast<size_t>(scene_grid * scene_grid), f);
            x = add(x, take_rows(frame_pos, fidx));
            blocks.push_back(x);
        }
        Tensor joint = stack.forward(concat_rows(blocks), /*causal=*/false);
        return detail::pool_frames(joint, kFramesPerSegment, scene_grid, out_grid);
    }
};

struct SegmentFeatures {
    Tensor image_tokens;  // (4*Gi^2) x d_enc
    Tensor video_tokens;  // (4*Gv^2) x d_enc
    int segment_index = 0;
};

}  // namespace captok
