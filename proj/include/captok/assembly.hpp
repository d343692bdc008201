#pragma once

// Prompt assembly and the tiny base LLM. Prompts concatenate the pooled
// visual stream, the per-segment soft caption tokens in temporal order, and
// the embedded question; span offsets are tracked exactly so token budgets
// can be audited per instance. Answers decode greedily as option letters.

#include <string>
#include <vector>

#include "captok/corpus.hpp"
#include "captok/nn.hpp"
#include "captok/pruners.hpp"

namespace captok {

struct LlmConfig {
    int layers = 6;
    int embed_dim = 96;
    int heads = 6;
    int context = 768;

    void validate() const {
        if (layers < 1) throw ConfigError("llm layers must be >= 1");
        if (heads < 1 || embed_dim % heads != 0)
            throw ConfigError("llm head count must divide embed_dim");
        if (context < 8) throw ConfigError("llm context too small");
    }
};

struct LoraConfig {
    int rank = 8;
    double alpha = 16.0;

    void validate() const {
        if (rank < 1) throw ConfigError("lora rank must be >= 1");
        if (alpha <= 0.0) throw ConfigError("lora alpha must be positive");
    }
};

struct BaseLlm {
    Decoder dec;
    LlmConfig cfg;

    static BaseLlm create(ParamSet& ps, const std::string& prefix, const LlmConfig& cfg,
                          int vocab, Rng& rng) {
        cfg.validate();
        BaseLlm m;
        m.cfg = cfg;
        m.dec = Decoder::create(ps, prefix, cfg.layers, cfg.embed_dim, cfg.heads,
                                4 * cfg.embed_dim, vocab, cfg.context, rng);
        return m;
    }

    // Low-rank adapters on every attention projection; bases stay untouched.
    void add_lora(ParamSet& ps, const std::string& prefix, const LoraConfig& lc, Rng& rng) {
        lc.validate();
        for (size_t i = 0; i < dec.stack.blocks.size(); ++i)
            dec.stack.blocks[i].attn.add_lora(ps, prefix + ".block" + std::to_string(i) + ".attn",
                                              lc.rank, lc.alpha, rng);
        // The unembedding head gets an adapter too: its base matrix stays
        // frozen, but answer tokens need a trainable route into vocab space.
        dec.head.lora = LoraAdapter::create(ps, prefix + ".head", dec.embed_dim, dec.vocab(),
                                            lc.rank, lc.alpha, rng);
    }
};

struct Span {
    std::string name;
    int offset = 0;
    int length = 0;
};

struct PromptLayout {
    std::vector<Span> spans;
    int total = 0;

    const Span& span(const std::string& name) const {
        for (const auto& s : spans)
            if (s.name == name) return s;
        throw ContractError("prompt layout has no span named " + name);
    }

    int visual_tokens() const {
        int n = 0;
        for (const auto& s : spans)
            if (s.name != "question") n += s.length;
        return n;
    }
};

struct AssembledPrompt {
    PromptLayout layout;
    Tensor embedded;  // total x d_llm
};

// [base tokens][cap seg0..seg3][question]; overflow reports the span that
// crossed the context limit.
inline AssembledPrompt aggregate_tokens(const BaseLlm& llm,
                                        const Tensor& base_tokens,
                                        const std::vector<CompressedSegment>& segments,
                                        const std::vector<int>& question_ids) {
    if (static_cast<int>(segments.size()) != kNumSegments)
        throw ContractError("aggregate_tokens expects one compressed segment per clip segment");
    AssembledPrompt out;
    std::vector<Tensor> parts;
    int offset = 0;
    auto push = [&](const std::string& name, const Tensor& t) {
        const int len = t.defined() ? t.rows() : 0;
        if (len > 0 && t.cols() != llm.cfg.embed_dim)
            throw ShapeError("prompt span " + name + " width does not match llm embed_dim");
        if (offset + len > llm.cfg.context)
            throw CapacityError("prompt span " + name + " overflows the llm context (" +
                                std::to_string(offset + len) + " > " +
                                std::to_string(llm.cfg.context) + ")");
        out.layout.spans.push_back({name, offset, len});
        if (len > 0) parts.push_back(t);
        offset += len;
    };
    push("base", base_tokens);
    for (int s = 0; s < kNumSegments; ++s) {
        const auto& seg = segments[static_cast<size_t>(s)];
        if (seg.segment_index != s) throw ContractError("compressed segments out of order");
        if (seg.length != static_cast<int>(seg.caption_ids.size()))
            throw ContractError("compressed segment length bookkeeping is inconsistent");
        push("cap" + std::to_string(s), seg.soft_tokens);
    }
    push("question", llm.dec.tok.forward(question_ids));
    out.layout.total = offset;
    out.embedded = concat_rows(parts);
    return out;
}

// Greedy decode after the assembled prompt; stop symbol excluded from output.
inline std::vector<int> answer_generate(const BaseLlm& llm, const Tensor& prompt, int eos,
                                        int max_answer_tokens) {
    if (prompt.rows() < 1) throw ContractError("answer_generate: empty prompt");
    llm.dec.check_capacity(prompt.rows() + max_answer_tokens, "answer decode");
    KvCache cache;
    cache.reset(static_cast<size_t>(llm.dec.layers()));
    StepTrace tr;
    for (int r = 0; r < prompt.rows(); ++r)
        tr = llm.dec.step(detail::tensor_row(prompt, r), cache);
    std::vector<int> out;
    while (static_cast<int>(out.size()) < max_answer_tokens) {
        const int id = argmax(tr.logits);
        if (id == eos) break;
        out.push_back(id);
        if (static_cast<int>(out.size()) == max_answer_tokens) break;
        tr = llm.dec.step(detail::embedding_row(llm.dec.tok, id), cache);
    }
    return out;
}

// Cross-entropy on [answer..., stop]; prompt positions carry no loss.
inline Tensor answer_loss(const BaseLlm& llm, const Tensor& prompt,
                          const std::vector<int>& answer_ids, int eos) {
    if (prompt.rows() < 1) throw ContractError("answer_loss: empty prompt");
    Tensor content = answer_ids.empty()
                         ? prompt
                         : concat_rows({prompt, llm.dec.tok.forward(answer_ids)});
    Decoder::Trace tr = llm.dec.forward(content);
    std::vector<int> targets(static_cast<size_t>(prompt.rows()) - 1, -1);
    targets.insert(targets.end(), answer_ids.begin(), answer_ids.end());
    targets.push_back(eos);
    return cross_entropy(tr.logits, targets, -1);
}

// Exact token match of the emitted answer against the four option letters;
// anything else counts as no prediction.
inline int predict_option(const std::vector<int>& emitted) {
    const Vocab& vb = Vocab::instance();
    static const char* letters[] = {"A", "B", "C", "D"};
    for (int i = 0; i < 4; ++i)
        if (emitted.size() == 1 && emitted[0] == vb.id(letters[i])) return i;
    return -1;
}

}  // namespace captok
