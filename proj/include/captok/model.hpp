#pragma once

// The full model bundle: dual encoders, three projectors, the caption pruner
// and the LoRA-equipped base LLM, all registered in one ParamSet under
// stable dotted names so stage trainability can be expressed as globs.

#include <string>
#include <vector>

#include "captok/assembly.hpp"
#include "captok/corpus.hpp"
#include "captok/encoders.hpp"
#include "captok/pruners.hpp"
#include "captok/vocab.hpp"

namespace captok {

constexpr int kMaxQuestionTokens = 48;
constexpr int kMaxAnswerTokens = 4;

struct ModelConfig {
    int scene_grid = 8;
    EncoderConfig enc;
    BasePrunerConfig base;
    CapPrunerConfig cap;
    LlmConfig llm;
    LoraConfig lora;

    int base_tokens_per_segment() const {
        const int pi = pooled_side(enc.image_grid, base.stride);
        const int pv = pooled_side(enc.video_grid, base.stride);
        return kFramesPerSegment * (pi * pi + pv * pv);
    }
    int base_tokens_per_clip() const { return kNumSegments * base_tokens_per_segment(); }

    int cap_prefix_tokens() const {
        const int pi = pooled_side(enc.image_grid, cap.prefix_stride);
        const int pv = pooled_side(enc.video_grid, cap.prefix_stride);
        return kFramesPerSegment * (pi * pi + pv * pv);
    }

    void validate() const {
        if (scene_grid < 2) throw ConfigError("scene grid must be >= 2");
        enc.validate();
        base.validate();
        cap.validate();
        llm.validate();
        lora.validate();
        if (cap.context < cap_prefix_tokens() + 1 + cap.max_tokens)
            throw ConfigError("cap pruner context smaller than prefix + 1 + max_tokens");
        const int need = base_tokens_per_clip() + kNumSegments * cap.max_tokens +
                         kMaxQuestionTokens + kMaxAnswerTokens;
        if (llm.context < need)
            throw ConfigError("llm context " + std::to_string(llm.context) +
                              " smaller than worst-case prompt " + std::to_string(need));
    }

    uint64_t digest() const {
        std::string s;
        for (long v : {static_cast<long>(scene_grid), static_cast<long>(enc.image_grid),
                       static_cast<long>(enc.video_grid), static_cast<long>(enc.embed_dim),
                       static_cast<long>(enc.layers), static_cast<long>(enc.heads),
                       static_cast<long>(base.stride), static_cast<long>(cap.layers),
                       static_cast<long>(cap.embed_dim), static_cast<long>(cap.heads),
                       static_cast<long>(cap.max_tokens), static_cast<long>(cap.tap_layer),
                       static_cast<long>(cap.prefix_stride), static_cast<long>(cap.context),
                       static_cast<long>(llm.layers), static_cast<long>(llm.embed_dim),
                       static_cast<long>(llm.heads), static_cast<long>(llm.context),
                       static_cast<long>(lora.rank), static_cast<long>(Vocab::instance().size()),
                       static_cast<long>(lora.alpha * 1000.0)})
            s += std::to_string(v) + "|";
        return fnv1a64(s);
    }
};

struct Model {
    ModelConfig cfg;
    ParamSet params;
    FrameEncoder fenc;
    VideoEncoder venc;
    Mlp proj_v2cap;  // d_enc -> d_cap, feeds the caption pruner
    Mlp proj_v2llm;  // d_enc -> d_llm, feeds the base visual stream
    Mlp proj_post;   // d_cap -> d_llm, maps tap states into the LLM space
    CapPruner cap;
    BaseLlm llm;

    static Model init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(mix_seed(seed, 0xA110C8));
        const int V = Vocab::instance().size();
        const int bos = Vocab::instance().bos();
        const int eos = Vocab::instance().eos();
        m.fenc = FrameEncoder::create(m.params, "encoders.frame", cfg.enc, cfg.scene_grid, rng);
        m.venc = VideoEncoder::create(m.params, "encoders.video", cfg.enc, cfg.scene_grid, rng);
        m.proj_v2cap = Mlp::create(m.params, "proj.v2cap", cfg.enc.embed_dim, cfg.enc.embed_dim,
                                   cfg.cap.embed_dim, rng);
        m.proj_v2llm = Mlp::create(m.params, "proj.v2llm", cfg.enc.embed_dim, cfg.enc.embed_dim,
                                   cfg.llm.embed_dim, rng);
        m.proj_post = Mlp::create(m.params, "proj.post", cfg.cap.embed_dim, cfg.cap.embed_dim,
                                  cfg.llm.embed_dim, rng);
        m.cap = CapPruner::create(m.params, "cap", cfg.cap, V, bos, eos, rng);
        m.llm = BaseLlm::create(m.params, "llm", cfg.llm, V, rng);
        m.llm.add_lora(m.params, "llm", cfg.lora, rng);
        return m;
    }
};

inline std::vector<std::vector<int>> segment_frames(const ClipState& st, int segment) {
    if (segment < 0 || segment >= kNumSegments) throw ContractError("segment out of range");
    std::vector<std::vector<int>> out;
    for (int f = segment * kFramesPerSegment; f < (segment + 1) * kFramesPerSegment; ++f)
        out.push_back(st.frames[static_cast<size_t>(f)]);
    return out;
}

inline SegmentFeatures encode_segment(const Model& m, const ClipState& st, int segment) {
    const auto frames = segment_frames(st, segment);
    SegmentFeatures f;
    f.segment_index = segment;
    f.image_tokens = m.fenc.encode(frames);
    f.video_tokens = m.venc.encode(frames);
    return f;
}

// Conditioning tokens for the caption pruner: optionally pooled, image then
// video, projected into d_cap.
inline Tensor cap_prefix(const Model& m, const SegmentFeatures& f) {
    Tensor img = base_prune_frames(f.image_tokens, kFramesPerSegment, m.cfg.enc.image_grid,
                                   m.cfg.cap.prefix_stride);
    Tensor vid = base_prune_frames(f.video_tokens, kFramesPerSegment, m.cfg.enc.video_grid,
                                   m.cfg.cap.prefix_stride);
    return m.proj_v2cap.forward(concat_rows({img, vid}));
}

// Pooled visual tokens for one segment in the LLM space, image then video.
inline Tensor base_segment_tokens(const Model& m, const SegmentFeatures& f) {
    Tensor img = base_prune_frames(f.image_tokens, kFramesPerSegment, m.cfg.enc.image_grid,
                                   m.cfg.base.stride);
    Tensor vid = base_prune_frames(f.video_tokens, kFramesPerSegment, m.cfg.enc.video_grid,
                                   m.cfg.base.stride);
    return m.proj_v2llm.forward(concat_rows({img, vid}));
}

inline Tensor base_stream(const Model& m, const std::vector<SegmentFeatures>& feats) {
    if (static_cast<int>(feats.size()) != kNumSegments)
        throw ContractError("base_stream expects features for every segment");
    std::vector<Tensor> parts;
    for (const auto& f : feats) parts.push_back(base_segment_tokens(m, f));
    return concat_rows(parts);
}

inline std::vector<SegmentFeatures> encode_clip(const Model& m, const ClipState& st) {
    std::vector<SegmentFeatures> out;
    for (int s = 0; s < kNumSegments; ++s) out.push_back(encode_segment(m, st, s));
    return out;
}

inline std::vector<CompressedSegment> compress_clip_free_running(
    const Model& m, const std::vector<SegmentFeatures>& feats, int tap_override = -1) {
    std::vector<CompressedSegment> out;
    for (const auto& f : feats)
        out.push_back(cap_prune_free_running(m.cap, cap_prefix(m, f), m.proj_post,
                                             f.segment_index, tap_override));
    return out;
}

}  // namespace captok
