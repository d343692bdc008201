// Acceptance gate for the compression toolkit. Each criterion prints exactly
// one PASS/FAIL line on stdout; progress goes to stderr; the process exits
// non-zero if any criterion fails.
//
//   1  pooled-token arithmetic at reference grids; stream bookkeeping over
//      replayed evaluation logs
//   2  analytic prefill-cost ratio of the compressed pipeline at reference
//      scale
//   3  per-instance best-tradeoff selection vs exhaustive search
//   4  finite-difference gradient checks, adapter zero-init equivalence,
//      bitwise freeze contracts across the training phases
//   5  emitted caption length tracks segment richness on held-out clips after
//      caption pretraining
//   6  held-out QA accuracy after fine-tuning; full pipeline vs the
//      no-caption-pretraining knockout
//   7  mechanism invariants: length bounds, deterministic greedy decode,
//      free-running/teacher-forced state equivalence, export-layer length
//      invariance

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "captok/checkpoint.hpp"
#include "captok/config.hpp"
#include "captok/corpus.hpp"
#include "captok/evaluation.hpp"
#include "captok/flops.hpp"
#include "captok/model.hpp"
#include "captok/stats.hpp"
#include "captok/training.hpp"

using namespace captok;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double now_s() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

bool bytes_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// Criterion 1: pooled token counts and replayed-log bookkeeping

Outcome criterion1() {
    const struct {
        int stride;
        long want;
    } cases[] = {{2, 3328}, {4, 832}, {8, 208}, {16, 80}};
    std::ostringstream detail;
    detail << "pooled/clip";
    for (const auto& c : cases) {
        const long got = pooled_tokens_per_clip(24, 16, c.stride);
        detail << " s" << c.stride << "=" << got;
        if (got != c.want) return {false, detail.str() + " (expected " +
                                              std::to_string(c.want) + ")"};
    }

    // Replay a logged evaluation through the records file format: 832 pooled
    // tokens per instance plus caption streams averaging 236 must come back
    // as a mean of 1068 visual tokens.
    const fs::path dir = fs::temp_directory_path() / "captok_acceptance_c1";
    fs::create_directories(dir);
    std::vector<EvalRecord> logged;
    const char* kinds[] = {"existence", "count", "direction", "color"};
    for (int i = 0; i < 50; ++i) {
        EvalRecord r;
        r.instance_id = "c" + std::to_string(i / 4) + ":" + std::to_string(i % 4);
        r.kind = kinds[i % 4];
        r.predicted = i % 4;
        r.correct = (i % 2) == 0;
        r.base_tokens = 832;
        r.cap_lengths = (i % 2) == 0 ? std::array<int, kNumSegments>{55, 55, 55, 55}
                                     : std::array<int, kNumSegments>{63, 63, 63, 63};
        r.visual_tokens = r.base_tokens + r.total_cap();
        logged.push_back(r);
    }
    write_eval_records((dir / "records.jsonl").string(), logged);
    const auto replayed = read_eval_records((dir / "records.jsonl").string());
    const LengthStats st = length_stats(replayed);
    detail << "; replayed logs mean cap " << fmt(st.mean_cap, 1) << ", mean visual "
           << fmt(st.mean_visual, 1);
    if (st.mean_cap != 236.0 || st.mean_visual != 1068.0)
        return {false, detail.str() + " (expected 236/1068 exactly)"};
    return {true, detail.str()};
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic cost ratio at reference scale

Outcome criterion2() {
    PipelineProfiles profiles;
    profiles.llm = {"qwen2.5-3b", 36, 2048, 11008, 151936};
    profiles.cap_pruner = {"qwen2.5-0.5b", 24, 896, 4864, 151936};
    TokenPlan plan;
    plan.baseline_visual = 3328;
    plan.base = 832;
    plan.cap = {59, 59, 59, 59};
    plan.text = 128;
    plan.cappruner_prefix = 208;

    const FlopsReport rep = pipeline_flops(profiles, plan);
    std::ostringstream detail;
    detail << "baseline " << fmt(rep.baseline.total / 1e12, 2) << "T, compressed "
           << fmt(rep.langdc.total / 1e12, 2) << "T, ratio " << fmt(rep.ratio, 4)
           << " in [0.35, 0.65]";
    const bool ok = rep.ratio >= 0.35 && rep.ratio <= 0.65;
    return {ok, detail.str() + (ok ? "" : " VIOLATED")};
}

// ---------------------------------------------------------------------------
// Criterion 3: best-tradeoff selection vs exhaustive search

OracleResult brute_force_select(const CorrectnessMatrix& mx) {
    OracleResult res;
    const size_t rows = mx.instance_ids.size(), cols = mx.column_names.size();
    long ok = 0;
    double charged_sum = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        int best = -1;
        for (size_t c = 0; c < cols; ++c)
            if (mx.correct[r][c] &&
                (best < 0 || mx.tokens[r][c] < mx.tokens[r][static_cast<size_t>(best)]))
                best = static_cast<int>(c);
        if (best >= 0) {
            res.chosen.push_back(best);
            res.correct.push_back(1);
            res.charged.push_back(mx.tokens[r][static_cast<size_t>(best)]);
            ++ok;
        } else {
            size_t cheap = 0;
            for (size_t c = 1; c < cols; ++c)
                if (mx.tokens[r][c] < mx.tokens[r][cheap]) cheap = c;
            res.chosen.push_back(-1);
            res.correct.push_back(0);
            res.charged.push_back(mx.tokens[r][cheap]);
        }
        charged_sum += res.charged.back();
    }
    res.oracle_accuracy = static_cast<double>(ok) / static_cast<double>(rows);
    res.mean_tokens = charged_sum / static_cast<double>(rows);
    return res;
}

bool oracle_results_match(const OracleResult& a, const OracleResult& b) {
    return a.chosen == b.chosen && a.correct == b.correct && a.charged == b.charged &&
           std::fabs(a.oracle_accuracy - b.oracle_accuracy) < 1e-12 &&
           std::fabs(a.mean_tokens - b.mean_tokens) < 1e-9;
}

bool oracle_dominates_columns(const CorrectnessMatrix& mx, const OracleResult& res) {
    const size_t rows = mx.instance_ids.size(), cols = mx.column_names.size();
    for (size_t c = 0; c < cols; ++c) {
        long ok = 0;
        for (size_t r = 0; r < rows; ++r) ok += mx.correct[r][c] ? 1 : 0;
        if (res.oracle_accuracy + 1e-12 < static_cast<double>(ok) / static_cast<double>(rows))
            return false;
    }
    return true;
}

CorrectnessMatrix shape_matrix(int rows, int cols) {
    CorrectnessMatrix mx;
    for (int r = 0; r < rows; ++r) mx.instance_ids.push_back("i" + std::to_string(r));
    for (int c = 0; c < cols; ++c) mx.column_names.push_back("c" + std::to_string(c));
    mx.tokens.assign(static_cast<size_t>(rows), std::vector<int>(static_cast<size_t>(cols), 1));
    mx.correct.assign(static_cast<size_t>(rows),
                      std::vector<uint8_t>(static_cast<size_t>(cols), 0));
    return mx;
}

Outcome criterion3() {
    long exhaustive = 0, randomized = 0;
    // every correctness pattern for small shapes; costs carry deliberate ties
    for (int rows = 1; rows <= 12; ++rows) {
        for (int cols = 1; cols <= 5; ++cols) {
            const int cells = rows * cols;
            if (cells > 16) continue;
            CorrectnessMatrix mx = shape_matrix(rows, cols);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    mx.tokens[static_cast<size_t>(r)][static_cast<size_t>(c)] =
                        1 + (r * 7 + c * 13 + rows) % 5;
            for (long mask = 0; mask < (1L << cells); ++mask) {
                for (int i = 0; i < cells; ++i)
                    mx.correct[static_cast<size_t>(i / cols)][static_cast<size_t>(i % cols)] =
                        static_cast<uint8_t>((mask >> i) & 1);
                const OracleResult lib = oracle_select(mx);
                if (!oracle_results_match(lib, brute_force_select(mx)))
                    return {false, "mismatch vs brute force at " + std::to_string(rows) + "x" +
                                       std::to_string(cols) + " mask " + std::to_string(mask)};
                if (!oracle_dominates_columns(mx, lib))
                    return {false, "oracle accuracy below a column at " +
                                       std::to_string(rows) + "x" + std::to_string(cols)};
                ++exhaustive;
            }
        }
    }
    // random coverage of every shape up to 12x5, then large 200x4 matrices
    Rng rng(20240817);
    auto random_case = [&](int rows, int cols, int max_tokens) {
        CorrectnessMatrix mx = shape_matrix(rows, cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                mx.tokens[static_cast<size_t>(r)][static_cast<size_t>(c)] =
                    rng.randint(1, max_tokens);
                mx.correct[static_cast<size_t>(r)][static_cast<size_t>(c)] =
                    static_cast<uint8_t>(rng.randint(0, 1));
            }
        const OracleResult lib = oracle_select(mx);
        return oracle_results_match(lib, brute_force_select(mx)) &&
               oracle_dominates_columns(mx, lib);
    };
    for (int rows = 1; rows <= 12; ++rows)
        for (int cols = 1; cols <= 5; ++cols)
            for (int rep = 0; rep < 30; ++rep, ++randomized)
                if (!random_case(rows, cols, 6))
                    return {false, "random mismatch at " + std::to_string(rows) + "x" +
                                       std::to_string(cols)};
    for (int rep = 0; rep < 1000; ++rep, ++randomized)
        if (!random_case(200, 4, 500)) return {false, "random mismatch at 200x4"};

    return {true,
            std::to_string(exhaustive) + " exhaustive + " + std::to_string(randomized) +
                " random matrices match brute force; oracle >= every column accuracy"};
}

// ---------------------------------------------------------------------------
// Criterion 4: gradients, adapter zero-init, freeze contracts

struct FdReport {
    double max_rel = 0.0;
    std::string worst = "-";
    int checked = 0;
    bool missing_grad = false;
};

void fd_case(FdReport& rep, const std::string& name, const std::vector<Tensor>& leaves,
             const std::function<Tensor()>& f, double h = 1e-5) {
    std::vector<std::vector<double>> analytic;
    for (const auto& leaf : leaves) leaf.zero_grad();  // backward accumulates
    {
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
    }
    for (const auto& leaf : leaves) {
        if (!leaf.has_grad()) {
            rep.missing_grad = true;
            rep.worst = name + " (no gradient)";
            return;
        }
        analytic.push_back(leaf.grad());
    }
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor leaf = leaves[li];
        for (size_t i = 0; i < leaf.numel(); ++i) {
            const double keep = leaf.data()[i];
            leaf.data()[i] = keep + h;
            const double up = f().item();
            leaf.data()[i] = keep - h;
            const double dn = f().item();
            leaf.data()[i] = keep;
            const double numeric = (up - dn) / (2.0 * h);
            const double a = analytic[li][i];
            const double rel =
                std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
            if (rel > rep.max_rel) {
                rep.max_rel = rel;
                rep.worst = name;
            }
        }
    }
    ++rep.checked;
}

ModelConfig tiny_model_cfg() {
    ModelConfig cfg;
    cfg.scene_grid = 4;
    cfg.enc.image_grid = 2;
    cfg.enc.video_grid = 2;
    cfg.enc.embed_dim = 12;
    cfg.enc.layers = 1;
    cfg.enc.heads = 2;
    cfg.base.stride = 2;
    cfg.cap.layers = 2;
    cfg.cap.embed_dim = 12;
    cfg.cap.heads = 2;
    cfg.cap.max_tokens = 6;
    cfg.cap.tap_layer = 1;
    cfg.cap.prefix_stride = 1;
    cfg.cap.context = 48;
    cfg.llm.layers = 2;
    cfg.llm.embed_dim = 12;
    cfg.llm.heads = 2;
    cfg.llm.context = 128;
    cfg.lora.rank = 2;
    cfg.lora.alpha = 8.0;
    return cfg;
}

Corpus tiny_corpus(uint64_t seed = 9, int clips = 6, int grid = 4) {
    GenSpec spec;
    spec.seed = seed;
    spec.num_clips = clips;
    spec.richness = {1, 6};
    spec.grid = grid;
    return generate_corpus(spec);
}

FdReport run_fd_sweep() {
    FdReport rep;
    Rng rng(31);
    auto leafy = [&](std::vector<int> shape, double scale = 1.0) {
        return Tensor::randn(rng, std::move(shape), scale, /*requires_grad=*/true);
    };
    auto fixed = [&](std::vector<int> shape, double scale = 1.0) {
        return Tensor::randn(rng, std::move(shape), scale, /*requires_grad=*/false);
    };

    {
        Tensor a = leafy({3, 4}), b = leafy({3, 4}), w = fixed({3, 4});
        fd_case(rep, "add", {a, b}, [&] { return sum(mul(add(a, b), w)); });
        fd_case(rep, "sub", {a, b}, [&] { return sum(mul(sub(a, b), w)); });
        fd_case(rep, "mul", {a, b}, [&] { return sum(mul(mul(a, b), w)); });
        fd_case(rep, "scale", {a}, [&] { return sum(mul(scale(a, 1.7), w)); });
        fd_case(rep, "mean", {a}, [&] { return mean(mul(a, w)); });
        fd_case(rep, "transpose", {a},
                [&] { return sum(mul(transpose(a), transpose(w))); });
        fd_case(rep, "gelu", {a}, [&] { return sum(mul(gelu(a), w)); });
    }
    {
        // keep every element away from the kink so central differences hold
        Tensor x = leafy({3, 4});
        for (auto& v : x.data()) v += (v >= 0.0 ? 0.5 : -0.5);
        Tensor w = fixed({3, 4});
        fd_case(rep, "relu", {x}, [&] { return sum(mul(relu(x), w)); });
    }
    {
        Tensor x = leafy({3, 4}), b = leafy({4}), w = fixed({3, 4});
        fd_case(rep, "add_rowwise", {x, b}, [&] { return sum(mul(add_rowwise(x, b), w)); });
    }
    {
        Tensor a = leafy({3, 4}), b = leafy({4, 2}), w = fixed({3, 2});
        fd_case(rep, "matmul", {a, b}, [&] { return sum(mul(matmul(a, b), w)); });
    }
    {
        Tensor x = leafy({3, 5}), w = fixed({3, 5});
        fd_case(rep, "softmax_rows", {x}, [&] { return sum(mul(softmax_rows(x), w)); });
    }
    {
        Tensor s = leafy({4, 4}), w = fixed({4, 4});
        fd_case(rep, "causal_softmax", {s}, [&] { return sum(mul(causal_softmax(s), w)); });
    }
    {
        Tensor x = leafy({3, 5}), g = leafy({5}), b = leafy({5}), w = fixed({3, 5});
        fd_case(rep, "layer_norm", {x, g, b},
                [&] { return sum(mul(layer_norm(x, g, b), w)); });
    }
    {
        Tensor x = leafy({4, 3}), w = fixed({3, 3});
        // duplicated index exercises gradient accumulation
        fd_case(rep, "take_rows", {x},
                [&] { return sum(mul(take_rows(x, {2, 0, 2}), w)); });
    }
    {
        Tensor a = leafy({2, 3}), b = leafy({3, 3}), w = fixed({5, 3});
        fd_case(rep, "concat_rows", {a, b},
                [&] { return sum(mul(concat_rows({a, b}), w)); });
    }
    {
        Tensor a = leafy({2, 2}), b = leafy({2, 3}), w = fixed({2, 5});
        fd_case(rep, "concat_cols", {a, b},
                [&] { return sum(mul(concat_cols({a, b}), w)); });
    }
    {
        // fresh leaf per case: backward accumulates into existing gradients
        Tensor x = leafy({5, 4}), wr = fixed({2, 4});
        fd_case(rep, "slice_rows", {x}, [&] { return sum(mul(slice_rows(x, 1, 2), wr)); });
    }
    {
        Tensor x = leafy({5, 4}), wc = fixed({5, 2});
        fd_case(rep, "slice_cols", {x}, [&] { return sum(mul(slice_cols(x, 1, 2), wc)); });
    }
    {
        Tensor x = leafy({16, 3}), w = fixed({4, 3});
        fd_case(rep, "adaptive_pool_grid", {x},
                [&] { return sum(mul(adaptive_pool_grid(x, 4, 2), w)); });
    }
    {
        Tensor logits = leafy({4, 6});
        const std::vector<int> targets = {1, -1, 3, 0};  // one ignored position
        fd_case(rep, "cross_entropy", {logits},
                [&] { return cross_entropy(logits, targets, -1); });
    }
    {
        ParamSet ps;
        Attention attn = Attention::create(ps, "attn", 8, 2, rng);
        Tensor x = leafy({4, 8}), w = fixed({4, 8});
        fd_case(rep, "causal_self_attention",
                {x, attn.q.base.w, attn.v.base.w, attn.o.base.b},
                [&] { return sum(mul(causal_self_attention(x, attn), w)); });
    }
    {
        Tensor w0 = leafy({5, 6}), a = leafy({5, 2}), b = leafy({2, 6}), w = fixed({4, 6});
        Tensor x = fixed({4, 5});
        fd_case(rep, "lora_apply", {w0, a, b},
                [&] { return sum(mul(matmul(x, lora_apply(w0, a, b, 4.0, 2)), w)); });
    }
    {
        ParamSet ps;
        Mlp mlp = Mlp::create(ps, "mlp", 6, 10, 4, rng);
        Tensor x = leafy({3, 6}), w = fixed({3, 4});
        fd_case(rep, "mlp_forward", {x, mlp.fc1.w, mlp.fc2.b},
                [&] { return sum(mul(mlp.forward(x), w)); });
    }
    {
        // full answer path through the base decoder with active adapters
        ParamSet ps;
        Rng lrng(77);
        LlmConfig lc;
        lc.layers = 1;
        lc.embed_dim = 8;
        lc.heads = 2;
        lc.context = 16;
        BaseLlm llm = BaseLlm::create(ps, "llm", lc, /*vocab=*/11, lrng);
        LoraConfig lora;
        lora.rank = 2;
        lora.alpha = 4.0;
        llm.add_lora(ps, "llm", lora, lrng);
        Tensor lora_a, lora_b;
        bool found_a = false, found_b = false;
        for (const auto& p : ps.all()) {
            if (p.name.ends_with(".lora_b")) {
                Tensor t = p.tensor;  // shared handle; mutate in place
                for (auto& v : t.data()) v = 0.05;  // open the adapter path
                if (!found_b) {
                    lora_b = t;
                    found_b = true;
                }
            }
            if (!found_a && p.name.ends_with(".lora_a")) {
                lora_a = p.tensor;
                found_a = true;
            }
        }
        Tensor soft = leafy({3, 8}, 0.5);
        const std::vector<int> answer = {3};
        fd_case(rep, "llm_answer_loss", {soft, lora_a, lora_b, llm.dec.tok.table}, [&] {
            Tensor prompt = concat_rows({soft, llm.dec.tok.forward(std::vector<int>{4, 6})});
            return answer_loss(llm, prompt, answer, /*eos=*/2);
        });
    }
    {
        // scene encoding through pooling into the caption decoder's loss
        const Corpus corpus = tiny_corpus();
        const ClipState st = simulate(corpus.clips[0]);
        Model m = Model::init(tiny_model_cfg(), 5);
        std::vector<Tensor> leaves;
        for (const char* prefix : {"encoders.frame", "encoders.video", "proj.v2cap", "cap."}) {
            for (const auto& p : m.params.all()) {
                if (p.name.rfind(prefix, 0) == 0 && p.name.ends_with(".b") &&
                    p.tensor.numel() <= 16) {
                    leaves.push_back(p.tensor);
                    break;
                }
            }
        }
        const std::vector<int> gold = corpus.captions[0].tokens;
        fd_case(rep, "encoder_to_caption_loss", leaves, [&] {
            SegmentFeatures f = encode_segment(m, st, 0);
            return caption_loss(m.cap, cap_prefix(m, f), gold);
        });
    }
    return rep;
}

Outcome criterion4() {
    const FdReport fd = run_fd_sweep();
    if (fd.missing_grad) return {false, "gradient missing in " + fd.worst};
    if (!(fd.max_rel < 1e-4))
        return {false, "finite differences: max rel err " + fmt(fd.max_rel, 8) + " in " +
                           fd.worst + " (bound 1e-4)"};

    // Adapter zero-init: a decoder with freshly attached adapters must match a
    // bitwise-identical decoder without adapters, and zeroing the down
    // matrices of an initialized model must change nothing.
    {
        LlmConfig lc;
        lc.layers = 2;
        lc.embed_dim = 12;
        lc.heads = 2;
        lc.context = 32;
        ParamSet ps_plain, ps_lora;
        Rng r1(123), r2(123);
        BaseLlm plain = BaseLlm::create(ps_plain, "llm", lc, Vocab::instance().size(), r1);
        BaseLlm adapted = BaseLlm::create(ps_lora, "llm", lc, Vocab::instance().size(), r2);
        LoraConfig lora;
        lora.rank = 4;
        lora.alpha = 8.0;
        adapted.add_lora(ps_lora, "llm", lora, r2);
        for (const auto& p : ps_lora.all())
            if (p.name.ends_with(".lora_b"))
                for (double v : p.tensor.data())
                    if (v != 0.0) return {false, "adapter down matrix not zero-initialized"};
        const Tensor content = plain.dec.tok.forward(std::vector<int>{3, 5, 7, 4});
        if (!bytes_equal(plain.dec.forward(content).logits,
                         adapted.dec.forward(content).logits))
            return {false, "adapter zero-init forward differs from adapter-free decoder"};

        Model m = Model::init(tiny_model_cfg(), 3);
        const Tensor probe = m.llm.dec.tok.forward(std::vector<int>{3, 5, 7});
        const Tensor before = m.llm.dec.forward(probe).logits;
        for (const auto& p : m.params.all())
            if (p.name.ends_with(".lora_a")) {
                Tensor t = p.tensor;  // shared handle; mutate in place
                for (auto& v : t.data()) v = 0.0;
            }
        if (!bytes_equal(before, m.llm.dec.forward(probe).logits))
            return {false, "zeroing adapter up matrices changed a zero-init forward"};
    }

    // Freeze contracts, re-derived from independent snapshots for each phase.
    const Corpus corpus = tiny_corpus();
    const TrainContext ctx = TrainContext::build(corpus);
    const ClipSplit split = split_clips(static_cast<int>(corpus.clips.size()), 10);
    const struct {
        Stage stage;
        const char* name;
        std::function<void(Model&, StageSpec)> run;
    } phases[] = {
        {Stage::CrossModalPretrain, "stage1",
         [&](Model& m, StageSpec s) { run_stage1(m, ctx, split, s); }},
        {Stage::CapPrunerPretrain, "stage2a",
         [&](Model& m, StageSpec s) { run_stage2a(m, ctx, split, s); }},
        {Stage::PostPretrain, "stage2b",
         [&](Model& m, StageSpec s) { run_stage2b(m, ctx, split, s); }},
        {Stage::Sft, "stage3", [&](Model& m, StageSpec s) { run_stage3(m, ctx, split, s); }},
    };
    for (const auto& phase : phases) {
        Model m = Model::init(tiny_model_cfg(), 11);
        std::map<std::string, std::vector<double>> before;
        for (const auto& p : m.params.all()) before[p.name] = p.tensor.data();
        StageSpec spec;
        spec.stage = phase.stage;
        spec.steps = 3;
        spec.batch = 2;
        spec.lr = 3e-3;
        spec.seed = 5;
        phase.run(m, spec);
        int changed = 0;
        for (const auto& p : m.params.all()) {
            const auto& snap = before.at(p.name);
            const bool same = std::memcmp(snap.data(), p.tensor.data().data(),
                                          snap.size() * sizeof(double)) == 0;
            if (must_be_frozen(phase.stage, p.name) && !same)
                return {false, std::string("frozen parameter changed in ") + phase.name +
                                   ": " + p.name};
            if (!same) ++changed;
        }
        if (changed == 0)
            return {false, std::string("no parameter changed in ") + phase.name};
    }

    return {true, std::to_string(fd.checked) + " gradient graphs max rel err " +
                      fmt(fd.max_rel, 8) + "; adapter zero-init bitwise; freeze contracts "
                      "bitwise over 4 phases"};
}

// ---------------------------------------------------------------------------
// Shared trained pipeline for criteria 5-7

struct SharedState {
    bool ready = false;        // stages 1-2 done
    bool full_done = false;    // stage 3 done on the full model
    RunConfig cfg;
    Corpus corpus;
    std::optional<TrainContext> ctx;
    ClipSplit split;
    std::optional<Model> model;
    std::string stage1_ckpt;
    std::vector<double> lengths, richness;  // held-split pairs
};

std::string acceptance_config_path() {
    const char* env = std::getenv("CAPTOK_CONFIGS");
    const fs::path dir = env != nullptr ? fs::path(env) : fs::path("configs");
    return (dir / "acceptance.toml").string();
}

Outcome criterion5(SharedState& st) {
    const double t0 = now_s();
    st.cfg = RunConfig::from_file(acceptance_config_path());
    st.cfg.validate();
    std::cerr << "[acceptance] generating " << st.cfg.data_num_clips << " clips...\n";
    st.corpus = generate_corpus(st.cfg.gen_spec());
    st.ctx.emplace(TrainContext::build(st.corpus));
    st.split = split_clips(static_cast<int>(st.corpus.clips.size()),
                           static_cast<int>(st.cfg.holdout_every));
    st.model.emplace(Model::init(st.cfg.model, static_cast<uint64_t>(st.cfg.seed)));

    std::cerr << "[acceptance] stage 1 (" << st.cfg.stage1_steps << " steps)...\n";
    run_stage1(*st.model, *st.ctx, st.split, st.cfg.stage_spec(Stage::CrossModalPretrain));
    const fs::path tmp = fs::temp_directory_path() / "captok_acceptance_pipeline";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    st.stage1_ckpt = (tmp / "stage1.bin").string();
    save_checkpoint(st.stage1_ckpt, st.model->params, st.cfg.model.digest(),
                    {{"stage", "stage1"}});

    std::cerr << "[acceptance] stage 2 (" << st.cfg.stage2a_steps << "+"
              << st.cfg.stage2b_steps << " steps)...\n";
    run_stage2(*st.model, *st.ctx, st.split, st.cfg.stage_spec(Stage::CapPrunerPretrain),
               st.cfg.stage_spec(Stage::PostPretrain), Stage2Flags{});

    std::cerr << "[acceptance] measuring held-out caption lengths...\n";
    for (int clip : st.split.held) {
        const ClipState& state = st.ctx->states[static_cast<size_t>(clip)];
        const auto feats = encode_clip(*st.model, state);
        const auto segs = compress_clip_free_running(*st.model, feats);
        for (int s = 0; s < kNumSegments; ++s) {
            st.lengths.push_back(static_cast<double>(segs[static_cast<size_t>(s)].length));
            st.richness.push_back(static_cast<double>(
                segment_richness(st.corpus.clips[static_cast<size_t>(clip)], state, s)));
        }
    }
    st.ready = true;

    const auto [lo_len, hi_len] = std::minmax_element(st.lengths.begin(), st.lengths.end());
    if (*lo_len == *hi_len)
        return {false, "degenerate: every held caption has length " + fmt(*lo_len, 0) +
                           ", no length variation to correlate"};
    const double rho = spearman(st.richness, st.lengths);

    // equal-count thirds of the held sample, ordered by richness
    std::vector<size_t> order(st.richness.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return st.richness[a] < st.richness[b]; });
    double tercile_len[3] = {0, 0, 0};
    long tercile_n[3] = {0, 0, 0};
    for (size_t i = 0; i < order.size(); ++i) {
        const size_t t = std::min<size_t>(2, i * 3 / order.size());
        tercile_len[t] += st.lengths[order[i]];
        ++tercile_n[t];
    }
    for (int t = 0; t < 3; ++t) tercile_len[t] /= std::max(1L, tercile_n[t]);

    std::ostringstream detail;
    detail << "held pairs " << st.lengths.size() << ", spearman(len, richness) " << fmt(rho, 3)
           << " (need >= 0.6), tercile mean lengths " << fmt(tercile_len[0], 2) << " < "
           << fmt(tercile_len[1], 2) << " < " << fmt(tercile_len[2], 2) << " ["
           << fmt(now_s() - t0, 0) << "s]";
    const bool ok = rho >= 0.6 && tercile_len[0] < tercile_len[1] &&
                    tercile_len[1] < tercile_len[2];
    return {ok, detail.str()};
}

Outcome criterion6(SharedState& st) {
    if (!st.ready) return {false, "pipeline unavailable (stage 1-2 training failed)"};
    const double t0 = now_s();
    EvalOptions opts;
    opts.max_answer_tokens = static_cast<int>(st.cfg.eval_max_answer_tokens);

    std::cerr << "[acceptance] stage 3, full scheme (" << st.cfg.stage3_steps
              << " steps)...\n";
    run_stage3(*st.model, *st.ctx, st.split, st.cfg.stage_spec(Stage::Sft));
    st.full_done = true;
    const double acc_full = accuracy(evaluate(*st.model, *st.ctx, st.split.held, opts));

    auto knockout = [&](const Stage2Flags& flags, const char* label) {
        std::cerr << "[acceptance] knockout scheme " << label << "...\n";
        Model m = Model::init(st.cfg.model, static_cast<uint64_t>(st.cfg.seed));
        load_checkpoint(st.stage1_ckpt, m.params, st.cfg.model.digest());
        StageSpec sa = st.cfg.stage_spec(Stage::CapPrunerPretrain);
        StageSpec sb = st.cfg.stage_spec(Stage::PostPretrain);
        sa.scheme = sb.scheme = label;
        run_stage2(m, *st.ctx, st.split, sa, sb, flags);
        StageSpec s3 = st.cfg.stage_spec(Stage::Sft);
        s3.scheme = label;
        run_stage3(m, *st.ctx, st.split, s3);
        return accuracy(evaluate(m, *st.ctx, st.split.held, opts));
    };
    const double acc_no_cap = knockout({true, false}, "no_cappruner_pretrain");
    const double acc_no_post = knockout({false, true}, "no_post_pretrain");

    std::ostringstream detail;
    detail << "held QA accuracy: full " << fmt(acc_full, 4) << " (need >= 0.80, chance 0.25), "
           << "no_cappruner_pretrain " << fmt(acc_no_cap, 4) << ", no_post_pretrain "
           << fmt(acc_no_post, 4) << " [" << fmt(now_s() - t0, 0) << "s]";
    const bool ok = acc_full >= 0.80 && acc_full >= acc_no_cap;
    return {ok, detail.str()};
}

// ---------------------------------------------------------------------------
// Criterion 7: mechanism invariants

Outcome criterion7(SharedState& st) {
    std::vector<std::string> notes;

    // Length bounds, decode determinism and export-layer invariance, on
    // untrained models across seeds and on the trained pipeline if available.
    auto probe_model = [&](const Model& m, const Corpus& corpus,
                           const std::vector<int>& clips,
                           const std::vector<ClipState>& states) -> std::string {
        for (int clip : clips) {
            const ClipState& state = states[static_cast<size_t>(clip)];
            const auto feats = encode_clip(m, state);
            const auto first = compress_clip_free_running(m, feats);
            const auto again = compress_clip_free_running(m, feats);
            for (int s = 0; s < kNumSegments; ++s) {
                const auto& seg = first[static_cast<size_t>(s)];
                if (seg.length < 0 || seg.length > m.cfg.cap.max_tokens ||
                    m.cfg.cap.max_tokens > 128)
                    return "length " + std::to_string(seg.length) + " outside [0, " +
                           std::to_string(m.cfg.cap.max_tokens) + "] for " +
                           corpus.clips[static_cast<size_t>(clip)].clip_id;
                if (static_cast<int>(seg.caption_ids.size()) != seg.length)
                    return "length bookkeeping mismatch";
                const auto& re = again[static_cast<size_t>(s)];
                if (seg.caption_ids != re.caption_ids ||
                    !bytes_equal(seg.soft_tokens, re.soft_tokens))
                    return "greedy decode not deterministic";
            }
            for (int k = 0; k <= m.cfg.cap.layers; ++k) {
                const auto tapped = compress_clip_free_running(m, feats, k);
                for (int s = 0; s < kNumSegments; ++s)
                    if (tapped[static_cast<size_t>(s)].caption_ids !=
                        first[static_cast<size_t>(s)].caption_ids)
                        return "export layer " + std::to_string(k) + " changed emitted ids";
            }
        }
        return "";
    };

    {
        const Corpus corpus = tiny_corpus(17, 4);
        std::vector<ClipState> states;
        for (const auto& c : corpus.clips) states.push_back(simulate(c));
        int probed = 0;
        for (uint64_t seed : {1ull, 2ull, 3ull}) {
            Model m = Model::init(tiny_model_cfg(), seed);
            const std::string err = probe_model(m, corpus, {0, 1, 2, 3}, states);
            if (!err.empty())
                return {false, "untrained model seed " + std::to_string(seed) + ": " + err};
            ++probed;
        }
        notes.push_back(std::to_string(probed) + " untrained models over 4 clips ok");
    }
    if (st.ready && st.model.has_value()) {
        std::vector<int> held_sample(st.split.held.begin(),
                                     st.split.held.begin() +
                                         std::min<size_t>(6, st.split.held.size()));
        const std::string err =
            probe_model(*st.model, st.corpus, held_sample, st.ctx->states);
        if (!err.empty()) return {false, "trained model: " + err};
        double max_len = 0.0;
        for (double v : st.lengths) max_len = std::max(max_len, v);
        if (max_len > st.cfg.model.cap.max_tokens)
            return {false, "held-split length exceeded the configured cap"};
        notes.push_back("trained model over " + std::to_string(held_sample.size()) +
                        " held clips ok (max held length " + fmt(max_len, 0) + ")");
    } else {
        notes.push_back("trained model unavailable");
    }

    // Free-running vs teacher-forced state equivalence on a decoder overfitted
    // to a single caption: once greedy decode emits the caption, forcing the
    // same ids must reproduce the exported soft tokens bitwise.
    {
        ParamSet dec_ps, post_ps;
        Rng rng(47);
        CapPrunerConfig cc;
        cc.layers = 2;
        cc.embed_dim = 16;
        cc.heads = 2;
        cc.max_tokens = 6;
        cc.tap_layer = 1;
        cc.prefix_stride = 1;
        cc.context = 64;
        CapPruner pruner = CapPruner::create(dec_ps, "cap", cc, /*vocab=*/12, 1, 2, rng);
        Mlp post = Mlp::create(post_ps, "post", 16, 16, 8, rng);
        const Tensor prefix = Tensor::randn(rng, {4, 16}, 1.0, false);
        const std::vector<int> gold = {5, 7, 9, 4};

        AdamW opt;
        bool emitted = false;
        int steps = 0;
        for (; steps < 600 && !emitted; ++steps) {
            dec_ps.zero_grads();
            {
                Tape tape;
                Tensor loss = caption_loss(pruner, prefix, gold);
                tape.backward(loss);
            }
            opt.step(dec_ps, 5e-3);
            if (steps % 20 == 19)
                emitted = cap_prune_free_running(pruner, prefix, post, 0).caption_ids == gold;
        }
        if (!emitted)
            return {false, "single-caption overfit did not reach the gold caption in 600 "
                           "steps"};
        const CompressedSegment free = cap_prune_free_running(pruner, prefix, post, 0);
        const CompressedSegment forced =
            cap_prune_teacher_forced(pruner, prefix, free.caption_ids, post, 0);
        if (free.caption_ids != gold) return {false, "overfit decode drifted off the caption"};
        if (forced.length != free.length ||
            !bytes_equal(forced.soft_tokens, free.soft_tokens))
            return {false, "teacher-forced states differ from free-running states"};
        notes.push_back("overfit in " + std::to_string(steps) +
                        " steps; forced/free soft tokens bitwise equal");
    }

    std::string detail;
    for (size_t i = 0; i < notes.size(); ++i)
        detail += (i != 0 ? "; " : "") + notes[i];
    return {true, detail};
}

}  // namespace

int main() {
    std::cout << "acceptance gate (7 criteria)\n";
    SharedState st;
    int failures = 0;
    const auto run_criterion = [&](int id, const char* name,
                                   const std::function<Outcome()>& f) {
        const double t0 = now_s();
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << name
                  << ": " << o.detail;
        if (o.detail.find("[") == std::string::npos)
            std::cout << " [" << fmt(now_s() - t0, 1) << "s]";
        std::cout << "\n" << std::flush;
        if (!o.pass) ++failures;
    };

    run_criterion(1, "token arithmetic", [] { return criterion1(); });
    run_criterion(2, "prefill cost ratio", [] { return criterion2(); });
    run_criterion(3, "best-tradeoff selection", [] { return criterion3(); });
    run_criterion(4, "numerics and contracts", [] { return criterion4(); });
    run_criterion(5, "length tracks richness", [&] { return criterion5(st); });
    run_criterion(6, "end-task accuracy", [&] { return criterion6(st); });
    run_criterion(7, "mechanism invariants", [&] { return criterion7(st); });

    if (failures == 0)
        std::cout << "acceptance: all 7 criteria passed\n";
    else
        std::cout << "acceptance: " << failures << " of 7 criteria FAILED\n";
    return failures == 0 ? 0 : 1;
}
