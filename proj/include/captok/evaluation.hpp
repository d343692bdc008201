#pragma once

// Evaluation harness: exact-match multiple-choice scoring with per-instance
// token bookkeeping, the per-instance best-tradeoff selector over several
// compression configurations, and compressed-length statistics (CSV + SVG).

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "captok/corpus.hpp"
#include "captok/model.hpp"
#include "captok/stats.hpp"
#include "captok/training.hpp"

namespace captok {

struct EvalRecord {
    std::string instance_id;  // clip_id + ":" + per-clip question ordinal
    std::string kind;
    int predicted = -1;  // option index, -1 when nothing matched
    bool correct = false;
    int base_tokens = 0;
    std::array<int, kNumSegments> cap_lengths{};
    int visual_tokens = 0;  // base_tokens + sum of cap_lengths

    int total_cap() const {
        int n = 0;
        for (int v : cap_lengths) n += v;
        return n;
    }
};

struct EvalOptions {
    int max_answer_tokens = kMaxAnswerTokens;
    bool use_base = true;     // drop the pooled stream from the prompt when false
    bool use_cap = true;      // drop the compressed stream from the prompt when false
    int tap_override = -1;    // export a different decoder layer; -1 = configured
};

// Deterministic evaluation of the free-running pipeline over whole clips;
// per-clip features and compressed segments are shared by that clip's
// questions.
inline std::vector<EvalRecord> evaluate(const Model& m, const TrainContext& ctx,
                                        const std::vector<int>& clip_indices,
                                        const EvalOptions& opts = {}) {
    std::unordered_map<int, std::vector<int>> qa_by_clip;
    for (size_t i = 0; i < ctx.corpus->qa.size(); ++i)
        qa_by_clip[ctx.clip_index.at(ctx.corpus->qa[i].clip_id)].push_back(static_cast<int>(i));

    const int eos = Vocab::instance().eos();
    std::vector<EvalRecord> out;
    for (int clip : clip_indices) {
        auto it = qa_by_clip.find(clip);
        if (it == qa_by_clip.end()) continue;
        const ClipState& st = ctx.states[static_cast<size_t>(clip)];
        const auto feats = encode_clip(m, st);
        Tensor base = opts.use_base ? base_stream(m, feats)
                                    : Tensor::zeros({0, m.cfg.llm.embed_dim});
        auto segs = compress_clip_free_running(m, feats, opts.tap_override);
        if (!opts.use_cap)
            for (auto& seg : segs) {
                seg.soft_tokens = Tensor::zeros({0, m.cfg.llm.embed_dim});
                seg.caption_ids.clear();
                seg.length = 0;
            }
        int ordinal = 0;
        for (int qi : it->second) {
            const QARecord& qa = ctx.corpus->qa[static_cast<size_t>(qi)];
            AssembledPrompt prompt = aggregate_tokens(m.llm, base, segs, prompt_tokens(qa));
            const auto emitted =
                answer_generate(m.llm, prompt.embedded, eos, opts.max_answer_tokens);
            EvalRecord rec;
            rec.instance_id = qa.clip_id + ":" + std::to_string(ordinal++);
            rec.kind = qa.kind;
            rec.predicted = predict_option(emitted);
            rec.correct = rec.predicted == qa.correct;
            rec.base_tokens = base.rows();
            for (int s = 0; s < kNumSegments; ++s)
                rec.cap_lengths[static_cast<size_t>(s)] = segs[static_cast<size_t>(s)].length;
            rec.visual_tokens = prompt.layout.visual_tokens();
            if (rec.visual_tokens != rec.base_tokens + rec.total_cap())
                throw ContractError("token bookkeeping mismatch for " + rec.instance_id);
            out.push_back(std::move(rec));
        }
    }
    return out;
}

inline double accuracy(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw DataError("accuracy: no records");
    long ok = 0;
    for (const auto& r : records) ok += r.correct ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Per-instance best-tradeoff selection across compression configurations

struct CorrectnessMatrix {
    std::vector<std::string> instance_ids;       // rows
    std::vector<std::string> column_names;       // configurations
    std::vector<std::vector<int>> tokens;        // [row][col]
    std::vector<std::vector<uint8_t>> correct;   // [row][col]

    void validate() const {
        if (instance_ids.empty() || column_names.empty())
            throw DataError("correctness matrix is empty");
        if (tokens.size() != instance_ids.size() || correct.size() != instance_ids.size())
            throw DataError("correctness matrix is not rectangular");
        for (size_t r = 0; r < tokens.size(); ++r)
            if (tokens[r].size() != column_names.size() ||
                correct[r].size() != column_names.size())
                throw DataError("correctness matrix is not rectangular");
    }
};

struct OracleResult {
    std::vector<int> chosen;       // column index, -1 when no column was correct
    std::vector<uint8_t> correct;  // per instance
    std::vector<int> charged;      // token count charged per instance
    double oracle_accuracy = 0.0;
    double mean_tokens = 0.0;
};

// Per instance: among correct columns pick the fewest-token one; instances
// wrong everywhere count as incorrect and are charged the cheapest column.
inline OracleResult oracle_select(const CorrectnessMatrix& mx) {
    mx.validate();
    OracleResult res;
    const size_t rows = mx.instance_ids.size(), cols = mx.column_names.size();
    long n_ok = 0;
    double token_sum = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        int best = -1;
        for (size_t c = 0; c < cols; ++c) {
            if (!mx.correct[r][c]) continue;
            if (best < 0 || mx.tokens[r][c] < mx.tokens[r][static_cast<size_t>(best)])
                best = static_cast<int>(c);
        }
        int charged;
        if (best >= 0) {
            charged = mx.tokens[r][static_cast<size_t>(best)];
            ++n_ok;
        } else {
            charged = mx.tokens[r][0];
            for (size_t c = 1; c < cols; ++c) charged = std::min(charged, mx.tokens[r][c]);
        }
        res.chosen.push_back(best);
        res.correct.push_back(best >= 0 ? 1 : 0);
        res.charged.push_back(charged);
        token_sum += charged;
    }
    res.oracle_accuracy = static_cast<double>(n_ok) / static_cast<double>(rows);
    res.mean_tokens = token_sum / static_cast<double>(rows);
    return res;
}

// Joins per-run record files into a matrix; instance sets must agree.
inline CorrectnessMatrix build_matrix(const std::vector<std::vector<EvalRecord>>& runs,
                                      const std::vector<std::string>& names) {
    if (runs.empty() || runs.size() != names.size())
        throw DataError("build_matrix: need one name per run");
    CorrectnessMatrix mx;
    mx.column_names = names;
    for (const auto& rec : runs[0]) mx.instance_ids.push_back(rec.instance_id);
    std::vector<std::unordered_map<std::string, const EvalRecord*>> index(runs.size());
    for (size_t c = 0; c < runs.size(); ++c)
        for (const auto& rec : runs[c]) index[c][rec.instance_id] = &rec;
    for (const auto& id : mx.instance_ids) {
        std::vector<int> toks;
        std::vector<uint8_t> ok;
        for (size_t c = 0; c < runs.size(); ++c) {
            auto it = index[c].find(id);
            if (it == index[c].end())
                throw DataError("run " + names[c] + " is missing instance " + id);
            toks.push_back(it->second->visual_tokens);
            ok.push_back(it->second->correct ? 1 : 0);
        }
        mx.tokens.push_back(std::move(toks));
        mx.correct.push_back(std::move(ok));
    }
    mx.validate();
    return mx;
}

// ---------------------------------------------------------------------------
// Length statistics

struct LengthStats {
    std::vector<long> histogram;  // count by total compressed length per instance
    std::map<std::string, double> mean_visual_by_kind;
    std::map<std::string, double> mean_cap_by_kind;
    double mean_cap = 0.0;
    double mean_visual = 0.0;
};

inline LengthStats length_stats(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw DataError("length_stats: no records");
    LengthStats st;
    std::map<std::string, std::pair<double, long>> vis, cap;
    double cap_sum = 0.0, vis_sum = 0.0;
    for (const auto& r : records) {
        const int c = r.total_cap();
        if (c >= static_cast<int>(st.histogram.size()))
            st.histogram.resize(static_cast<size_t>(c) + 1, 0);
        ++st.histogram[static_cast<size_t>(c)];
        vis[r.kind].first += r.visual_tokens;
        vis[r.kind].second += 1;
        cap[r.kind].first += c;
        cap[r.kind].second += 1;
        cap_sum += c;
        vis_sum += r.visual_tokens;
    }
    for (const auto& [k, p] : vis) st.mean_visual_by_kind[k] = p.first / p.second;
    for (const auto& [k, p] : cap) st.mean_cap_by_kind[k] = p.first / p.second;
    st.mean_cap = cap_sum / static_cast<double>(records.size());
    st.mean_visual = vis_sum / static_cast<double>(records.size());
    return st;
}

inline void write_histogram_csv(const std::string& path, const std::vector<long>& histogram) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "cap_length,count\n";
    for (size_t i = 0; i < histogram.size(); ++i) out << i << "," << histogram[i] << "\n";
}

inline std::vector<long> read_histogram_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "cap_length,count")
        throw DataError(path + ": bad histogram header");
    std::vector<long> out;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw DataError(path + " line " + std::to_string(lineno) + ": expected two columns");
        const size_t idx = std::stoul(line.substr(0, comma));
        const long count = std::stol(line.substr(comma + 1));
        if (idx != out.size())
            throw DataError(path + " line " + std::to_string(lineno) + ": non-contiguous bins");
        out.push_back(count);
    }
    return out;
}

// Minimal self-contained bar chart of the length histogram.
inline void write_lengths_svg(const std::string& path, const std::vector<long>& histogram) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    const int W = 720, H = 360, ml = 48, mb = 32, mt = 16, mr = 16;
    long peak = 1;
    for (long c : histogram) peak = std::max(peak, c);
    const double bw =
        static_cast<double>(W - ml - mr) / static_cast<double>(std::max<size_t>(histogram.size(), 1));
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\">\n";
    out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    for (size_t i = 0; i < histogram.size(); ++i) {
        const double h =
            static_cast<double>(histogram[i]) / static_cast<double>(peak) * (H - mt - mb);
        out << "<rect x=\"" << ml + bw * static_cast<double>(i) << "\" y=\"" << H - mb - h
            << "\" width=\"" << std::max(bw - 1.0, 0.5) << "\" height=\"" << h
            << "\" fill=\"steelblue\"/>\n";
    }
    out << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
        << H - mb << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"" << H - 8
        << "\" font-size=\"12\" text-anchor=\"middle\">compressed tokens per instance</text>\n";
    out << "<text x=\"12\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 12 "
        << H / 2 << ")\" text-anchor=\"middle\">instances</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 4
        << "\" font-size=\"10\" text-anchor=\"end\">" << peak << "</text>\n";
    out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Record file round-trip

inline void write_eval_records(const std::string& path, const std::vector<EvalRecord>& records) {
    using nlohmann::json;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << json{{"schema", "eval_records"}, {"version", 1}}.dump() << "\n";
    for (const auto& r : records) {
        json caps = json::array();
        for (int c : r.cap_lengths) caps.push_back(c);
        out << json{{"instance", r.instance_id}, {"kind", r.kind},
                    {"predicted", r.predicted},  {"correct", r.correct},
                    {"base_tokens", r.base_tokens}, {"cap_lengths", caps},
                    {"visual_tokens", r.visual_tokens}}
                   .dump()
            << "\n";
    }
}

inline std::vector<EvalRecord> read_eval_records(const std::string& path) {
    std::vector<EvalRecord> out;
    detail::read_jsonl(path, "eval_records", 1, [&](const nlohmann::json& j) {
        EvalRecord r;
        r.instance_id = j.at("instance").get<std::string>();
        r.kind = j.at("kind").get<std::string>();
        r.predicted = j.at("predicted").get<int>();
        r.correct = j.at("correct").get<bool>();
        r.base_tokens = j.at("base_tokens").get<int>();
        const auto caps = j.at("cap_lengths").get<std::vector<int>>();
        if (caps.size() != kNumSegments) throw DataError("wrong cap_lengths arity");
        for (size_t i = 0; i < caps.size(); ++i) r.cap_lengths[i] = caps[i];
        r.visual_tokens = j.at("visual_tokens").get<int>();
        if (r.visual_tokens != r.base_tokens + r.total_cap())
            throw DataError("token bookkeeping mismatch for " + r.instance_id);
        out.push_back(std::move(r));
    });
    return out;
}

// summary.csv: overall plus per-kind accuracy and token means
inline void write_summary_csv(const std::string& path, const std::vector<EvalRecord>& records) {
    const LengthStats st = length_stats(records);
    std::map<std::string, std::pair<long, long>> kind_acc;  // correct, total
    for (const auto& r : records) {
        kind_acc[r.kind].second += 1;
        if (r.correct) kind_acc[r.kind].first += 1;
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "kind,instances,accuracy,mean_visual_tokens,mean_cap_tokens\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), "all,%zu,%.6f,%.3f,%.3f\n", records.size(),
                  accuracy(records), st.mean_visual, st.mean_cap);
    out << buf;
    for (const auto& [kind, counts] : kind_acc) {
        std::snprintf(buf, sizeof(buf), "%s,%ld,%.6f,%.3f,%.3f\n", kind.c_str(), counts.second,
                      static_cast<double>(counts.first) / static_cast<double>(counts.second),
                      st.mean_visual_by_kind.at(kind), st.mean_cap_by_kind.at(kind));
        out << buf;
    }
}

}  // namespace captok
