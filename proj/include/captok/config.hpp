#pragma once

// Flat key-value run configuration: a small TOML subset ([section] headers,
// dotted keys, ints/floats/bools/quoted strings, # comments). Every key is
// documented with its default in RunConfig; unknown keys are rejected by name.

#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "captok/common.hpp"
#include "captok/corpus.hpp"
#include "captok/model.hpp"
#include "captok/training.hpp"

namespace captok {

class FlatFile {
public:
    static FlatFile parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    static FlatFile parse(const std::string& text, const std::string& origin = "<string>") {
        FlatFile f;
        f.origin_ = origin;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string s = strip(strip_comment(line));
            if (s.empty()) continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw ConfigError(origin + " line " + std::to_string(lineno) +
                                      ": unterminated section header");
                section = strip(s.substr(1, s.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + " line " + std::to_string(lineno) +
                                      ": empty section name");
                continue;
            }
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + " line " + std::to_string(lineno) +
                                  ": expected key = value");
            std::string key = strip(s.substr(0, eq));
            std::string value = strip(s.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + " line " + std::to_string(lineno) + ": empty key");
            if (!section.empty()) key = section + "." + key;
            if (f.values_.count(key))
                throw ConfigError(origin + " line " + std::to_string(lineno) +
                                  ": duplicate key " + key);
            f.values_[key] = value;
            f.order_.push_back(key);
        }
        return f;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    long get_int(const std::string& key, long fallback) {
        if (!has(key)) return fallback;
        const std::string& v = touch(key);
        try {
            size_t pos = 0;
            const long r = std::stol(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError(origin_ + ": key " + key + " expects an integer, got '" + v + "'");
        }
    }

    double get_double(const std::string& key, double fallback) {
        if (!has(key)) return fallback;
        const std::string& v = touch(key);
        try {
            size_t pos = 0;
            const double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError(origin_ + ": key " + key + " expects a number, got '" + v + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) {
        if (!has(key)) return fallback;
        const std::string& v = touch(key);
        if (v == "true") return true;
        if (v == "false") return false;
        throw ConfigError(origin_ + ": key " + key + " expects true/false, got '" + v + "'");
    }

    std::string get_string(const std::string& key, const std::string& fallback) {
        if (!has(key)) return fallback;
        std::string v = touch(key);
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"')
            v = v.substr(1, v.size() - 2);
        return v;
    }

    // Call after reading all recognized keys; anything untouched is unknown.
    void reject_unknown() const {
        for (const auto& key : order_)
            if (!consumed_.count(key))
                throw ConfigError(origin_ + ": unknown config key " + key);
    }

    const std::vector<std::string>& keys() const { return order_; }
    const std::string& raw(const std::string& key) const { return values_.at(key); }

private:
    const std::string& touch(const std::string& key) {
        consumed_.insert(key);
        return values_.at(key);
    }
    static std::string strip_comment(const std::string& s) {
        bool quoted = false;
        for (size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') quoted = !quoted;
            if (s[i] == '#' && !quoted) return s.substr(0, i);
        }
        return s;
    }
    static std::string strip(const std::string& s) {
        size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    std::string origin_;
    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
    std::set<std::string> consumed_;
};

// Every run-level knob with its default. Parsing rejects unrecognized keys.
struct RunConfig {
    long seed = 1;

    ModelConfig model;  // carries encoder/pruner/llm/lora defaults

    long data_num_clips = 200;
    long richness_min = RichnessRange{}.lo;
    long richness_max = RichnessRange{}.hi;

    long stage1_steps = 500, stage1_batch = 4;
    double stage1_lr = 3e-4;
    long stage2a_steps = 500, stage2a_batch = 4;
    double stage2a_lr = 3e-4;
    long stage2b_steps = 200, stage2b_batch = 4;
    double stage2b_lr = 3e-4;
    long stage3_steps = 800, stage3_batch = 4;
    double stage3_lr = 3e-4;

    double grad_clip = 1.0;
    long checkpoint_every = 0;  // 0 = final checkpoint only
    long holdout_every = 10;    // every Nth clip goes to the eval split

    long eval_max_answer_tokens = kMaxAnswerTokens;

    static RunConfig from_flat(FlatFile& f) {
        RunConfig c;
        c.seed = f.get_int("seed", c.seed);

        c.model.scene_grid = static_cast<int>(f.get_int("model.scene_grid", c.model.scene_grid));
        c.model.enc.image_grid =
            static_cast<int>(f.get_int("model.image_grid", c.model.enc.image_grid));
        c.model.enc.video_grid =
            static_cast<int>(f.get_int("model.video_grid", c.model.enc.video_grid));
        c.model.enc.embed_dim =
            static_cast<int>(f.get_int("model.embed_dim", c.model.enc.embed_dim));
        c.model.enc.layers =
            static_cast<int>(f.get_int("model.encoder_layers", c.model.enc.layers));
        c.model.enc.heads = static_cast<int>(f.get_int("model.encoder_heads", c.model.enc.heads));

        c.model.base.stride =
            static_cast<int>(f.get_int("base_pruner.stride", c.model.base.stride));

        c.model.cap.layers = static_cast<int>(f.get_int("cap_pruner.layers", c.model.cap.layers));
        c.model.cap.embed_dim =
            static_cast<int>(f.get_int("cap_pruner.embed_dim", c.model.cap.embed_dim));
        c.model.cap.heads = static_cast<int>(f.get_int("cap_pruner.heads", c.model.cap.heads));
        c.model.cap.max_tokens =
            static_cast<int>(f.get_int("cap_pruner.max_tokens", c.model.cap.max_tokens));
        c.model.cap.tap_layer =
            static_cast<int>(f.get_int("cap_pruner.tap_layer", c.model.cap.tap_layer));
        c.model.cap.prefix_stride =
            static_cast<int>(f.get_int("cap_pruner.prefix_stride", c.model.cap.prefix_stride));
        c.model.cap.context =
            static_cast<int>(f.get_int("cap_pruner.context", c.model.cap.context));

        c.model.llm.layers = static_cast<int>(f.get_int("llm.layers", c.model.llm.layers));
        c.model.llm.embed_dim =
            static_cast<int>(f.get_int("llm.embed_dim", c.model.llm.embed_dim));
        c.model.llm.heads = static_cast<int>(f.get_int("llm.heads", c.model.llm.heads));
        c.model.llm.context = static_cast<int>(f.get_int("llm.context", c.model.llm.context));

        c.model.lora.rank = static_cast<int>(f.get_int("lora.rank", c.model.lora.rank));
        c.model.lora.alpha = f.get_double("lora.alpha", c.model.lora.alpha);

        c.data_num_clips = f.get_int("data.num_clips", c.data_num_clips);
        c.richness_min = f.get_int("data.richness_min", c.richness_min);
        c.richness_max = f.get_int("data.richness_max", c.richness_max);

        c.stage1_steps = f.get_int("stage1.steps", c.stage1_steps);
        c.stage1_batch = f.get_int("stage1.batch", c.stage1_batch);
        c.stage1_lr = f.get_double("stage1.lr", c.stage1_lr);
        c.stage2a_steps = f.get_int("stage2a.steps", c.stage2a_steps);
        c.stage2a_batch = f.get_int("stage2a.batch", c.stage2a_batch);
        c.stage2a_lr = f.get_double("stage2a.lr", c.stage2a_lr);
        c.stage2b_steps = f.get_int("stage2b.steps", c.stage2b_steps);
        c.stage2b_batch = f.get_int("stage2b.batch", c.stage2b_batch);
        c.stage2b_lr = f.get_double("stage2b.lr", c.stage2b_lr);
        c.stage3_steps = f.get_int("stage3.steps", c.stage3_steps);
        c.stage3_batch = f.get_int("stage3.batch", c.stage3_batch);
        c.stage3_lr = f.get_double("stage3.lr", c.stage3_lr);

        c.grad_clip = f.get_double("train.grad_clip", c.grad_clip);
        c.checkpoint_every = f.get_int("train.checkpoint_every", c.checkpoint_every);
        c.holdout_every = f.get_int("train.holdout_every", c.holdout_every);

        c.eval_max_answer_tokens =
            f.get_int("eval.max_answer_tokens", c.eval_max_answer_tokens);

        f.reject_unknown();
        c.validate();
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        FlatFile f = FlatFile::parse_file(path);
        return from_flat(f);
    }

    void validate() const {
        model.validate();
        if (data_num_clips <= 0) throw ConfigError("data.num_clips must be positive");
        if (richness_min < 1 || richness_max < richness_min)
            throw ConfigError("data.richness range is invalid");
        for (auto [steps, batch, lr, name] :
             {std::tuple{stage1_steps, stage1_batch, stage1_lr, "stage1"},
              std::tuple{stage2a_steps, stage2a_batch, stage2a_lr, "stage2a"},
              std::tuple{stage2b_steps, stage2b_batch, stage2b_lr, "stage2b"},
              std::tuple{stage3_steps, stage3_batch, stage3_lr, "stage3"}}) {
            if (steps < 0) throw ConfigError(std::string(name) + ".steps must be >= 0");
            if (batch <= 0) throw ConfigError(std::string(name) + ".batch must be positive");
            if (lr <= 0) throw ConfigError(std::string(name) + ".lr must be positive");
        }
        if (grad_clip <= 0) throw ConfigError("train.grad_clip must be positive");
        if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
        if (holdout_every < 2) throw ConfigError("train.holdout_every must be >= 2");
        if (eval_max_answer_tokens < 1)
            throw ConfigError("eval.max_answer_tokens must be positive");
    }

    GenSpec gen_spec() const {
        GenSpec g;
        g.seed = static_cast<uint64_t>(seed);
        g.num_clips = static_cast<int>(data_num_clips);
        g.richness = {static_cast<int>(richness_min), static_cast<int>(richness_max)};
        g.grid = model.scene_grid;
        return g;
    }

    StageSpec stage_spec(Stage st) const {
        StageSpec s;
        s.stage = st;
        s.seed = static_cast<uint64_t>(seed);
        s.grad_clip = grad_clip;
        switch (st) {
            case Stage::CrossModalPretrain:
                s.steps = static_cast<int>(stage1_steps);
                s.batch = static_cast<int>(stage1_batch);
                s.lr = stage1_lr;
                break;
            case Stage::CapPrunerPretrain:
                s.steps = static_cast<int>(stage2a_steps);
                s.batch = static_cast<int>(stage2a_batch);
                s.lr = stage2a_lr;
                break;
            case Stage::PostPretrain:
                s.steps = static_cast<int>(stage2b_steps);
                s.batch = static_cast<int>(stage2b_batch);
                s.lr = stage2b_lr;
                break;
            case Stage::Sft:
                s.steps = static_cast<int>(stage3_steps);
                s.batch = static_cast<int>(stage3_batch);
                s.lr = stage3_lr;
                break;
        }
        return s;
    }

    // Full snapshot: every documented key with its effective value.
    void write_snapshot(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("cannot write " + path);
        out << "seed = " << seed << "\n\n";
        out << "[model]\n";
        out << "scene_grid = " << model.scene_grid << "\n";
        out << "image_grid = " << model.enc.image_grid << "\n";
        out << "video_grid = " << model.enc.video_grid << "\n";
        out << "embed_dim = " << model.enc.embed_dim << "\n";
        out << "encoder_layers = " << model.enc.layers << "\n";
        out << "encoder_heads = " << model.enc.heads << "\n\n";
        out << "[base_pruner]\n";
        out << "stride = " << model.base.stride << "\n\n";
        out << "[cap_pruner]\n";
        out << "layers = " << model.cap.layers << "\n";
        out << "embed_dim = " << model.cap.embed_dim << "\n";
        out << "heads = " << model.cap.heads << "\n";
        out << "max_tokens = " << model.cap.max_tokens << "\n";
        out << "tap_layer = " << model.cap.tap_layer << "\n";
        out << "prefix_stride = " << model.cap.prefix_stride << "\n";
        out << "context = " << model.cap.context << "\n\n";
        out << "[llm]\n";
        out << "layers = " << model.llm.layers << "\n";
        out << "embed_dim = " << model.llm.embed_dim << "\n";
        out << "heads = " << model.llm.heads << "\n";
        out << "context = " << model.llm.context << "\n\n";
        out << "[lora]\n";
        out << "rank = " << model.lora.rank << "\n";
        out << "alpha = " << model.lora.alpha << "\n\n";
        out << "[data]\n";
        out << "num_clips = " << data_num_clips << "\n";
        out << "richness_min = " << richness_min << "\n";
        out << "richness_max = " << richness_max << "\n\n";
        const auto stage_block = [&](const char* name, long steps, long batch, double lr) {
            out << "[" << name << "]\n";
            out << "steps = " << steps << "\n";
            out << "batch = " << batch << "\n";
            out << "lr = " << lr << "\n\n";
        };
        stage_block("stage1", stage1_steps, stage1_batch, stage1_lr);
        stage_block("stage2a", stage2a_steps, stage2a_batch, stage2a_lr);
        stage_block("stage2b", stage2b_steps, stage2b_batch, stage2b_lr);
        stage_block("stage3", stage3_steps, stage3_batch, stage3_lr);
        out << "[train]\n";
        out << "grad_clip = " << grad_clip << "\n";
        out << "checkpoint_every = " << checkpoint_every << "\n";
        out << "holdout_every = " << holdout_every << "\n\n";
        out << "[eval]\n";
        out << "max_answer_tokens = " << eval_max_answer_tokens << "\n";
    }
};

}  // namespace captok
