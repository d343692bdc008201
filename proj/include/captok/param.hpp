#pragma once

#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include "captok/common.hpp"
#include "captok/tensor.hpp"

namespace captok {

// A named, optionally trainable tensor. Names use module.layer.weight style
// paths and must be unique within a bundle.
struct Parameter {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

class ParamSet {
public:
    Parameter& add(const std::string& name, Tensor t, bool trainable = true) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        index_[name] = params_.size();
        params_.push_back(Parameter{name, std::move(t), trainable});
        return params_.back();
    }

    Parameter& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter: " + name);
        return params_[it->second];
    }
    const Parameter& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("unknown parameter: " + name);
        return params_[it->second];
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }
    size_t size() const { return params_.size(); }

    void zero_grads() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    // glob match with '*' wildcards, e.g. "llm.lora.*" or "*.bias"
    static bool glob_match(const std::string& pat, const std::string& s) {
        size_t p = 0, i = 0, star = std::string::npos, mark = 0;
        while (i < s.size()) {
            if (p < pat.size() && (pat[p] == s[i])) {
                ++p;
                ++i;
            } else if (p < pat.size() && pat[p] == '*') {
                star = p++;
                mark = i;
            } else if (star != std::string::npos) {
                p = star + 1;
                i = ++mark;
            } else {
                return false;
            }
        }
        while (p < pat.size() && pat[p] == '*') ++p;
        return p == pat.size();
    }

    // Marks parameters matching any glob trainable, everything else frozen.
    void set_trainable(const std::vector<std::string>& globs) {
        for (auto& p : params_) {
            bool on = false;
            for (const auto& g : globs) on = on || glob_match(g, p.name);
            p.trainable = on;
        }
    }

    uint64_t content_hash(bool frozen_only = false) const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : params_) {
            if (frozen_only && p.trainable) continue;
            h ^= fnv1a64(p.name);
            h *= 0x100000001b3ULL;
            for (double v : p.tensor.data()) {
                uint64_t bits;
                static_assert(sizeof(bits) == sizeof(v));
                std::memcpy(&bits, &v, sizeof(bits));
                h ^= bits;
                h *= 0x100000001b3ULL;
            }
        }
        return h;
    }

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace captok
