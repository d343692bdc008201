#pragma once

// Three-stage training pipeline.
//
//   stage 1   cross-modal pretrain: caption loss through the (frozen) LLM;
//             encoders and both visual projectors train.
//   stage 2a  caption-pruner pretrain: caption loss on the pruner itself;
//             pruner, its projector and the encoders train.
//   stage 2b  post-projector pretrain on the same alignment data; everything
//             else frozen.
//   stage 3   supervised fine-tuning on QA with teacher-forced captions;
//             LoRA adapters and all projectors train.
//
// Freezing is enforced mechanically: parameters outside the stage's
// trainable set are content-hashed before and after, and any drift is a
// contract violation. Sampling is a pure function of (seed, step), so a run
// resumed from a checkpoint continues bitwise identically.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "captok/checkpoint.hpp"
#include "captok/corpus.hpp"
#include "captok/model.hpp"
#include "captok/optim.hpp"

namespace captok {

enum class Stage { CrossModalPretrain, CapPrunerPretrain, PostPretrain, Sft };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::CrossModalPretrain: return "stage1_cross_modal";
        case Stage::CapPrunerPretrain: return "stage2a_cappruner";
        case Stage::PostPretrain: return "stage2b_post_projector";
        case Stage::Sft: return "stage3_sft";
    }
    return "?";
}

inline std::vector<std::string> default_trainable(Stage s) {
    switch (s) {
        case Stage::CrossModalPretrain:
            return {"encoders.*", "proj.v2cap.*", "proj.v2llm.*"};
        case Stage::CapPrunerPretrain: return {"cap.*", "proj.v2cap.*", "encoders.*"};
        case Stage::PostPretrain: return {"proj.post.*"};
        case Stage::Sft:
            return {"*.lora_a", "*.lora_b", "proj.post.*", "proj.v2llm.*", "proj.v2cap.*"};
    }
    return {};
}

// Parameters that a stage must never update, regardless of the requested
// trainable set. LLM and caption-decoder bases stay frozen after init; only
// LoRA adapters may move inside the LLM during fine-tuning.
inline bool must_be_frozen(Stage s, const std::string& name) {
    const bool is_lora = name.find(".lora_") != std::string::npos;
    auto in = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
    switch (s) {
        case Stage::CrossModalPretrain:
            return in("cap.") || in("llm.") || in("proj.post.");
        case Stage::CapPrunerPretrain:
            return in("llm.") || in("proj.post.") || in("proj.v2llm.");
        case Stage::PostPretrain: return !in("proj.post.");
        case Stage::Sft:
            if (in("encoders.") || in("cap.")) return true;
            if (in("llm.") && !is_lora) return true;
            return false;
    }
    return false;
}

struct StageSpec {
    Stage stage = Stage::CrossModalPretrain;
    std::vector<std::string> trainable;  // empty -> default_trainable(stage)
    int steps = 500;
    int batch = 4;
    double lr = 3e-4;
    double grad_clip = 1.0;  // global-norm clip, 0 disables
    uint64_t seed = 1;
    std::string scheme = "full";
};

struct StageIo {
    std::string dir;           // empty -> nothing written
    int checkpoint_every = 0;  // 0 -> final checkpoint only
};

struct StepMetrics {
    int step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct StageResult {
    std::vector<StepMetrics> metrics;
    double final_loss = 0.0;
};

// Deterministic train/holdout split over clip indices.
struct ClipSplit {
    std::vector<int> train, held;
};

inline ClipSplit split_clips(int num_clips, int holdout_every = 10) {
    ClipSplit sp;
    for (int i = 0; i < num_clips; ++i) {
        if (holdout_every >= 2 && i % holdout_every == holdout_every - 1)
            sp.held.push_back(i);
        else
            sp.train.push_back(i);
    }
    return sp;
}

// Pre-simulated clip states plus caption/QA indices, shared across stages.
struct TrainContext {
    const Corpus* corpus = nullptr;
    std::vector<ClipState> states;
    std::unordered_map<std::string, int> clip_index;
    std::vector<int> caption_at;  // clip*kNumSegments+segment -> caption record

    static TrainContext build(const Corpus& corpus) {
        TrainContext ctx;
        ctx.corpus = &corpus;
        ctx.states.reserve(corpus.clips.size());
        for (size_t i = 0; i < corpus.clips.size(); ++i) {
            ctx.states.push_back(simulate(corpus.clips[i]));
            ctx.clip_index[corpus.clips[i].clip_id] = static_cast<int>(i);
        }
        ctx.caption_at.assign(corpus.clips.size() * kNumSegments, -1);
        for (size_t c = 0; c < corpus.captions.size(); ++c) {
            const auto& rec = corpus.captions[c];
            auto it = ctx.clip_index.find(rec.clip_id);
            if (it == ctx.clip_index.end())
                throw DataError("caption references unknown clip " + rec.clip_id);
            ctx.caption_at[static_cast<size_t>(it->second) * kNumSegments + rec.segment] =
                static_cast<int>(c);
        }
        for (size_t i = 0; i < ctx.caption_at.size(); ++i)
            if (ctx.caption_at[i] < 0)
                throw DataError("corpus is missing a caption for clip " +
                                corpus.clips[i / kNumSegments].clip_id + " segment " +
                                std::to_string(i % kNumSegments));
        return ctx;
    }

    const CaptionRecord& caption(int clip, int segment) const {
        return corpus->captions[static_cast<size_t>(
            caption_at[static_cast<size_t>(clip) * kNumSegments + segment])];
    }
};

namespace train_detail {

inline void clip_gradients(ParamSet& params, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (auto& p : params.all()) {
        if (!p.trainable || !p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double sc = max_norm / norm;
    for (auto& p : params.all()) {
        if (!p.trainable || !p.tensor.has_grad()) continue;
        for (double& g : p.tensor.grad()) g *= sc;
    }
}

inline void check_contract_globs(Stage stage, const std::vector<std::string>& globs,
                                 const ParamSet& params) {
    for (const auto& p : params.all()) {
        bool matched = false;
        for (const auto& g : globs) matched = matched || ParamSet::glob_match(g, p.name);
        if (matched && must_be_frozen(stage, p.name))
            throw ContractError(std::string("trainable set for ") + stage_name(stage) +
                                " touches frozen parameter " + p.name);
    }
}

struct MetricsWriter {
    std::ofstream out;

    explicit MetricsWriter(const std::string& dir) {
        if (dir.empty()) return;
        std::filesystem::create_directories(dir);
        out.open(dir + "/metrics.csv", std::ios::app);
        if (!out) throw DataError("cannot write metrics in " + dir);
        if (out.tellp() == 0) out << "step,lr,loss\n";
    }
    void row(const StepMetrics& m) {
        if (!out.is_open()) return;
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%d,%.8g,%.10g\n", m.step, m.lr, m.loss);
        out << buf;
    }
};

// Common loop: per-sample taped losses, gradient accumulation, cosine decay.
inline StageResult run_loop(Model& m, const StageSpec& spec, long pool,
                            const std::function<Tensor(int sample, Rng& rng)>& sample_loss,
                            const StageIo& io, int start_step, AdamW* opt_in) {
    if (pool < 1) throw ConfigError(std::string(stage_name(spec.stage)) + ": empty sample pool");
    if (spec.steps < 1) throw ConfigError("stage steps must be >= 1");
    if (spec.batch < 1) throw ConfigError("stage batch must be >= 1");
    const std::vector<std::string> globs =
        spec.trainable.empty() ? default_trainable(spec.stage) : spec.trainable;
    check_contract_globs(spec.stage, globs, m.params);
    m.params.set_trainable(globs);
    const uint64_t frozen_before = m.params.content_hash(/*frozen_only=*/true);

    AdamW local_opt;
    AdamW& opt = opt_in ? *opt_in : local_opt;
    MetricsWriter metrics(io.dir);
    StageResult result;

    auto save = [&](int next_step, const char* name) {
        if (io.dir.empty()) return;
        std::map<std::string, std::string> meta = {
            {"stage", stage_name(spec.stage)},
            {"scheme", spec.scheme},
            {"seed", std::to_string(spec.seed)},
            {"next_step", std::to_string(next_step)},
        };
        save_checkpoint(io.dir + "/" + name, m.params, m.cfg.digest(), meta, &opt);
    };

    for (int step = start_step; step < spec.steps; ++step) {
        Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(step)));
        m.params.zero_grads();
        double loss_acc = 0.0;
        for (int b = 0; b < spec.batch; ++b) {
            const int sample = rng.randint(0, static_cast<int>(pool) - 1);
            Tape tape;
            Tensor loss = scale(sample_loss(sample, rng), 1.0 / spec.batch);
            tape.backward(loss);
            loss_acc += loss.item();
        }
        clip_gradients(m.params, spec.grad_clip);
        const double lr = cosine_lr(spec.lr, step, spec.steps);
        opt.step(m.params, lr);
        const StepMetrics row{step, lr, loss_acc};
        metrics.row(row);
        result.metrics.push_back(row);
        if (io.checkpoint_every > 0 && (step + 1) % io.checkpoint_every == 0 &&
            step + 1 < spec.steps) {
            char name[40];
            std::snprintf(name, sizeof(name), "step_%06d.bin", step + 1);
            save(step + 1, name);
        }
    }
    result.final_loss = result.metrics.empty() ? 0.0 : result.metrics.back().loss;

    const uint64_t frozen_after = m.params.content_hash(/*frozen_only=*/true);
    if (frozen_before != frozen_after)
        throw ContractError(std::string("frozen parameters changed during ") +
                            stage_name(spec.stage));
    save(spec.steps, "checkpoint.bin");
    return result;
}

// caption sample pools are (clip, segment) pairs over the training split
inline std::vector<std::pair<int, int>> caption_pool(const ClipSplit& split) {
    std::vector<std::pair<int, int>> pool;
    for (int c : split.train)
        for (int s = 0; s < kNumSegments; ++s) pool.emplace_back(c, s);
    return pool;
}

inline std::vector<int> text_with_bos(const Model& m, const std::vector<int>& tokens) {
    std::vector<int> ids;
    ids.reserve(tokens.size() + 1);
    ids.push_back(Vocab::instance().bos());
    ids.insert(ids.end(), tokens.begin(), tokens.end());
    (void)m;
    return ids;
}

// caption cross-entropy through the LLM over [visual prompt][BOS][caption]
inline Tensor llm_caption_loss(const Model& m, const Tensor& visual,
                               const std::vector<int>& caption) {
    Tensor content = concat_rows({visual, m.llm.dec.tok.forward(text_with_bos(m, caption))});
    Decoder::Trace tr = m.llm.dec.forward(content);
    std::vector<int> targets(static_cast<size_t>(visual.rows()), -1);
    targets.insert(targets.end(), caption.begin(), caption.end());
    targets.push_back(Vocab::instance().eos());
    return cross_entropy(tr.logits, targets, -1);
}

}  // namespace train_detail

inline StageResult run_stage1(Model& m, const TrainContext& ctx, const ClipSplit& split,
                              StageSpec spec, const StageIo& io = {}, int start_step = 0,
                              AdamW* opt = nullptr) {
    spec.stage = Stage::CrossModalPretrain;
    const auto pool = train_detail::caption_pool(split);
    auto loss = [&](int sample, Rng&) {
        const auto [clip, seg] = pool[static_cast<size_t>(sample)];
        SegmentFeatures f = encode_segment(m, ctx.states[static_cast<size_t>(clip)], seg);
        Tensor base = base_segment_tokens(m, f);
        return train_detail::llm_caption_loss(m, base, ctx.caption(clip, seg).tokens);
    };
    return train_detail::run_loop(m, spec, static_cast<long>(pool.size()), loss, io, start_step,
                                  opt);
}

inline StageResult run_stage2a(Model& m, const TrainContext& ctx, const ClipSplit& split,
                               StageSpec spec, const StageIo& io = {}, int start_step = 0,
                               AdamW* opt = nullptr) {
    spec.stage = Stage::CapPrunerPretrain;
    const auto pool = train_detail::caption_pool(split);
    auto loss = [&](int sample, Rng&) {
        const auto [clip, seg] = pool[static_cast<size_t>(sample)];
        SegmentFeatures f = encode_segment(m, ctx.states[static_cast<size_t>(clip)], seg);
        return caption_loss(m.cap, cap_prefix(m, f), ctx.caption(clip, seg).tokens);
    };
    return train_detail::run_loop(m, spec, static_cast<long>(pool.size()), loss, io, start_step,
                                  opt);
}

inline StageResult run_stage2b(Model& m, const TrainContext& ctx, const ClipSplit& split,
                               StageSpec spec, const StageIo& io = {}, int start_step = 0,
                               AdamW* opt = nullptr) {
    spec.stage = Stage::PostPretrain;
    const auto pool = train_detail::caption_pool(split);
    auto loss = [&](int sample, Rng&) {
        const auto [clip, seg] = pool[static_cast<size_t>(sample)];
        const auto& gold = ctx.caption(clip, seg).tokens;
        // Everything upstream of the post projector is frozen here, so tap
        // states and the base stream are computed untaped as constants.
        Tensor base, tap;
        {
            NoTape guard;
            SegmentFeatures f = encode_segment(m, ctx.states[static_cast<size_t>(clip)], seg);
            base = base_segment_tokens(m, f);
            std::vector<int> gold_cap = gold;
            if (static_cast<int>(gold_cap.size()) > m.cfg.cap.max_tokens)
                gold_cap.resize(static_cast<size_t>(m.cfg.cap.max_tokens));
            Tensor prefix = cap_prefix(m, f);
            Decoder::Trace tr =
                m.cap.dec.forward(detail::caption_content(m.cap, prefix, gold_cap));
            tap = slice_rows(tap_hidden(tr, m.cfg.cap.tap_layer), prefix.rows() + 1,
                             static_cast<int>(gold_cap.size()));
        }
        Tensor soft = m.proj_post.forward(tap);
        Tensor visual = soft.rows() > 0 ? concat_rows({base, soft}) : base;
        return train_detail::llm_caption_loss(m, visual, gold);
    };
    return train_detail::run_loop(m, spec, static_cast<long>(pool.size()), loss, io, start_step,
                                  opt);
}

inline StageResult run_stage3(Model& m, const TrainContext& ctx, const ClipSplit& split,
                              StageSpec spec, const StageIo& io = {}, int start_step = 0,
                              AdamW* opt = nullptr) {
    spec.stage = Stage::Sft;
    std::vector<int> qa_pool;
    {
        std::vector<bool> in_train(ctx.corpus->clips.size(), false);
        for (int c : split.train) in_train[static_cast<size_t>(c)] = true;
        for (size_t i = 0; i < ctx.corpus->qa.size(); ++i) {
            const int clip = ctx.clip_index.at(ctx.corpus->qa[i].clip_id);
            if (in_train[static_cast<size_t>(clip)]) qa_pool.push_back(static_cast<int>(i));
        }
    }
    // Encoders are frozen in this stage; their outputs are constants, so each
    // clip is encoded once and reused across the steps that draw it.
    std::unordered_map<int, std::vector<SegmentFeatures>> enc_cache;
    auto loss = [&](int sample, Rng&) {
        const QARecord& qa = ctx.corpus->qa[static_cast<size_t>(qa_pool[static_cast<size_t>(sample)])];
        const int clip = ctx.clip_index.at(qa.clip_id);
        auto cached = enc_cache.find(clip);
        if (cached == enc_cache.end()) {
            NoTape guard;
            std::vector<SegmentFeatures> fresh;
            for (int s = 0; s < kNumSegments; ++s)
                fresh.push_back(encode_segment(m, ctx.states[static_cast<size_t>(clip)], s));
            cached = enc_cache.emplace(clip, std::move(fresh)).first;
        }
        const std::vector<SegmentFeatures>& feats = cached->second;
        Tensor base = base_stream(m, feats);
        std::vector<CompressedSegment> segs;
        for (int s = 0; s < kNumSegments; ++s)
            segs.push_back(cap_prune_teacher_forced(m.cap, cap_prefix(m, feats[static_cast<size_t>(s)]),
                                                    ctx.caption(clip, s).tokens, m.proj_post, s));
        AssembledPrompt prompt = aggregate_tokens(m.llm, base, segs, prompt_tokens(qa));
        return answer_loss(m.llm, prompt.embedded, {answer_letter_token(qa)},
                           Vocab::instance().eos());
    };
    return train_detail::run_loop(m, spec, static_cast<long>(qa_pool.size()), loss, io,
                                  start_step, opt);
}

// Phase A (caption supervision) then phase B (post projector), with the
// knockout schemes expressible by skipping either phase.
struct Stage2Flags {
    bool skip_cappruner_pretrain = false;
    bool skip_post_pretrain = false;
};

inline void run_stage2(Model& m, const TrainContext& ctx, const ClipSplit& split,
                       StageSpec spec_a, StageSpec spec_b, const Stage2Flags& flags,
                       const StageIo& io_a = {}, const StageIo& io_b = {}) {
    if (!flags.skip_cappruner_pretrain) run_stage2a(m, ctx, split, spec_a, io_a);
    if (!flags.skip_post_pretrain) run_stage2b(m, ctx, split, spec_b, io_b);
}

}  // namespace captok
