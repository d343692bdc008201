#pragma once

// Shared token vocabulary covering caption, question and answer text.
// Roughly a third of the entries are connective/filler words; those are
// tagged so caption supervision can be stripped down to content tokens.

#include <string>
#include <unordered_map>
#include <vector>

#include "captok/common.hpp"

namespace captok {

enum class TokenKind { Special, Content, Filler };

class Vocab {
public:
    static const Vocab& instance() {
        static Vocab v;
        return v;
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    int id(const std::string& text) const {
        auto it = index_.find(text);
        if (it == index_.end()) throw DataError("vocab: unknown token \"" + text + "\"");
        return it->second;
    }

    const std::string& text(int id) const {
        if (id < 0 || id >= size()) throw DataError("vocab: id out of range");
        return tokens_[static_cast<size_t>(id)].first;
    }

    TokenKind kind(int id) const {
        if (id < 0 || id >= size()) throw DataError("vocab: id out of range");
        return tokens_[static_cast<size_t>(id)].second;
    }

    bool is_filler(int id) const { return kind(id) == TokenKind::Filler; }

    std::vector<int> ids(const std::vector<std::string>& words) const {
        std::vector<int> out;
        out.reserve(words.size());
        for (const auto& w : words) out.push_back(id(w));
        return out;
    }

    std::string render(const std::vector<int>& token_ids) const {
        std::string s;
        for (size_t i = 0; i < token_ids.size(); ++i) {
            if (i) s += ' ';
            s += text(token_ids[i]);
        }
        return s;
    }

    // reserved ids
    int pad() const { return 0; }
    int bos() const { return 1; }
    int eos() const { return 2; }
    int sep() const { return 3; }

private:
    Vocab() {
        auto add = [this](const std::string& t, TokenKind k) {
            index_[t] = static_cast<int>(tokens_.size());
            tokens_.emplace_back(t, k);
        };
        add("<pad>", TokenKind::Special);
        add("<bos>", TokenKind::Special);
        add("<eos>", TokenKind::Special);
        add("<sep>", TokenKind::Special);
        for (const char* w : {"red", "green", "blue", "yellow", "purple", "orange"})
            add(w, TokenKind::Content);
        for (const char* w : {"circle", "square", "triangle", "star"}) add(w, TokenKind::Content);
        for (const char* w : {"moves", "left", "right", "up", "down", "appears", "vanishes"})
            add(w, TokenKind::Content);
        for (const char* w : {"empty", "scene", "top", "bottom", "center"})
            add(w, TokenKind::Content);
        for (const char* w : {"zero", "one", "two", "three", "four", "five", "six", "seven",
                              "eight", "nine"})
            add(w, TokenKind::Content);
        for (const char* w : {"A", "B", "C", "D"}) add(w, TokenKind::Content);
        for (const char* w : {"yes", "no", "never"}) add(w, TokenKind::Content);
        for (const char* w : {"is", "there", "how", "many", "what", "which", "direction", "did",
                              "any", "objects", "move", "color", "?"})
            add(w, TokenKind::Content);
        for (const char* w : {"a", "an", "and", "also", "then", "some", "the", "in", "it",
                              "seems", "maybe"})
            add(w, TokenKind::Filler);
    }

    std::vector<std::pair<std::string, TokenKind>> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace captok
