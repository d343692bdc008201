#pragma once

// Analytic transformer prefill FLOPs model and the two-pipeline comparison
// (single big-LLM prefill over all pooled tokens vs. pooled+compressed tokens
// plus the compressor's own autoregressive cost).
//
// Closed form, counting one multiply-add as 2 FLOPs, per layer over N tokens:
//   attention projections (Q,K,V,O):  8*N*d^2
//   attention scores + value mix:     4*N^2*d
//   feed-forward (up + down):         4*N*d*f
// plus the LM head once: 2*N*d*V.  The compressor's cached decode is charged
// as prefill over (prefix + emitted) tokens — an upper bound, documented.

#include <fstream>
#include <string>
#include <vector>

#include "captok/common.hpp"
#include "captok/config.hpp"
#include "captok/corpus.hpp"

namespace captok {

inline constexpr const char* kFlopsFormulaVersion = "prefill-maddpair-v1";

struct ArchProfile {
    std::string name;
    long layers = 0;
    long embed_dim = 0;
    long ffn_dim = 0;
    long vocab = 0;

    void validate() const {
        if (layers <= 0 || embed_dim <= 0 || ffn_dim <= 0 || vocab <= 0)
            throw ConfigError("architecture profile " + name + " has non-positive dims");
    }
};

inline double prefill_flops(const ArchProfile& a, long n_tokens) {
    a.validate();
    if (n_tokens < 0) throw ConfigError("token count must be >= 0");
    const double N = static_cast<double>(n_tokens);
    const double d = static_cast<double>(a.embed_dim);
    const double f = static_cast<double>(a.ffn_dim);
    const double L = static_cast<double>(a.layers);
    const double V = static_cast<double>(a.vocab);
    const double per_layer = 8.0 * N * d * d + 4.0 * N * N * d + 4.0 * N * d * f;
    return L * per_layer + 2.0 * N * d * V;
}

struct TokenPlan {
    long baseline_visual = 0;                      // pooled tokens, uncompressed pipeline
    long base = 0;                                 // pooled tokens kept alongside captions
    std::array<long, kNumSegments> cap{};          // emitted caption tokens per segment
    long text = 0;                                 // prompt text tokens (both pipelines)
    long cappruner_prefix = 0;                     // compressor visual prefix per segment
    long encoder_tokens = 0;                       // pre-pooling patch count (toggle)
    long answer_tokens = 0;                        // generated answer length (toggle)
    bool include_encoders = false;
    bool include_answer_decode = false;

    long cap_total() const {
        long n = 0;
        for (long c : cap) n += c;
        return n;
    }
    void validate() const {
        if (baseline_visual < 0 || base < 0 || text < 0 || cappruner_prefix < 0 ||
            encoder_tokens < 0 || answer_tokens < 0)
            throw ConfigError("token plan has negative counts");
        for (long c : cap)
            if (c < 0) throw ConfigError("token plan has negative cap length");
    }
};

struct PipelineProfiles {
    ArchProfile llm;
    ArchProfile cap_pruner;
    ArchProfile encoder;  // only consulted when the plan includes encoders
    bool has_encoder = false;
};

struct FlopsComponent {
    std::string name;
    double flops = 0.0;
};

struct PipelineCost {
    std::vector<FlopsComponent> parts;
    double total = 0.0;
};

struct FlopsReport {
    std::string formula_version = kFlopsFormulaVersion;
    TokenPlan plan;
    PipelineCost baseline;
    PipelineCost langdc;
    double ratio = 0.0;  // langdc.total / baseline.total
};

inline FlopsReport pipeline_flops(const PipelineProfiles& profiles, const TokenPlan& plan) {
    plan.validate();
    profiles.llm.validate();
    profiles.cap_pruner.validate();
    if (plan.include_encoders && !profiles.has_encoder)
        throw ConfigError("plan includes encoders but no encoder profile was given");

    FlopsReport rep;
    rep.plan = plan;

    const auto add = [](PipelineCost& cost, const std::string& name, double v) {
        cost.parts.push_back({name, v});
        cost.total += v;
    };
    const auto decode_cost = [&](long prompt, long answer) {
        // marginal cost of extending the prefill by the generated answer
        return prefill_flops(profiles.llm, prompt + answer) - prefill_flops(profiles.llm, prompt);
    };

    const long base_prompt = plan.baseline_visual + plan.text;
    add(rep.baseline, "llm_prefill", prefill_flops(profiles.llm, base_prompt));
    if (plan.include_encoders)
        add(rep.baseline, "encoders", prefill_flops(profiles.encoder, plan.encoder_tokens));
    if (plan.include_answer_decode)
        add(rep.baseline, "answer_decode", decode_cost(base_prompt, plan.answer_tokens));

    const long langdc_prompt = plan.base + plan.cap_total() + plan.text;
    add(rep.langdc, "llm_prefill", prefill_flops(profiles.llm, langdc_prompt));
    double cap_cost = 0.0;
    for (long c : plan.cap)
        cap_cost += prefill_flops(profiles.cap_pruner, plan.cappruner_prefix + c);
    add(rep.langdc, "cappruner_decode", cap_cost);
    if (plan.include_encoders)
        add(rep.langdc, "encoders", prefill_flops(profiles.encoder, plan.encoder_tokens));
    if (plan.include_answer_decode)
        add(rep.langdc, "answer_decode", decode_cost(langdc_prompt, plan.answer_tokens));

    if (rep.baseline.total <= 0.0)
        throw ConfigError("baseline pipeline cost is zero; check the token plan");
    rep.ratio = rep.langdc.total / rep.baseline.total;
    return rep;
}

// ---------------------------------------------------------------------------
// File IO

inline ArchProfile read_profile_section(FlatFile& f, const std::string& section) {
    ArchProfile a;
    a.name = f.get_string(section + ".name", section);
    a.layers = f.get_int(section + ".layers", 0);
    a.embed_dim = f.get_int(section + ".embed_dim", 0);
    a.ffn_dim = f.get_int(section + ".ffn_dim", 0);
    a.vocab = f.get_int(section + ".vocab", 0);
    a.validate();
    return a;
}

inline PipelineProfiles load_profiles(const std::string& path) {
    FlatFile f = FlatFile::parse_file(path);
    PipelineProfiles p;
    p.llm = read_profile_section(f, "llm");
    p.cap_pruner = read_profile_section(f, "cap_pruner");
    if (f.has("encoder.layers")) {
        p.encoder = read_profile_section(f, "encoder");
        p.has_encoder = true;
    }
    f.reject_unknown();
    return p;
}

inline TokenPlan load_plan(const std::string& path) {
    FlatFile f = FlatFile::parse_file(path);
    TokenPlan p;
    p.baseline_visual = f.get_int("plan.baseline_visual", 0);
    p.base = f.get_int("plan.base", 0);
    for (int s = 0; s < kNumSegments; ++s)
        p.cap[static_cast<size_t>(s)] = f.get_int("plan.cap" + std::to_string(s), 0);
    p.text = f.get_int("plan.text", 0);
    p.cappruner_prefix = f.get_int("plan.cappruner_prefix", 0);
    p.encoder_tokens = f.get_int("plan.encoder_tokens", 0);
    p.answer_tokens = f.get_int("plan.answer_tokens", 0);
    p.include_encoders = f.get_bool("plan.include_encoders", false);
    p.include_answer_decode = f.get_bool("plan.include_answer_decode", false);
    f.reject_unknown();
    p.validate();
    return p;
}

inline void write_report_csv(const std::string& path, const FlopsReport& rep) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "pipeline,component,flops\n";
    char buf[128];
    for (const auto& part : rep.baseline.parts) {
        std::snprintf(buf, sizeof(buf), "baseline,%s,%.6e\n", part.name.c_str(), part.flops);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "baseline,total,%.6e\n", rep.baseline.total);
    out << buf;
    for (const auto& part : rep.langdc.parts) {
        std::snprintf(buf, sizeof(buf), "langdc,%s,%.6e\n", part.name.c_str(), part.flops);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "langdc,total,%.6e\n", rep.langdc.total);
    out << buf;
    std::snprintf(buf, sizeof(buf), "ratio,langdc_over_baseline,%.6f\n", rep.ratio);
    out << buf;
    out << "formula," << rep.formula_version << ",0\n";
}

}  // namespace captok
