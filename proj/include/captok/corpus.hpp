#pragma once

// Synthetic clip corpus: symbolic grid videos with a registry of entities and
// timed events, plus per-segment reference captions and multiple-choice QA.
// Clips are fully determined by (seed, richness range, grid); files store the
// registry and events only, frames are rebuilt on read.

#include <array>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "captok/common.hpp"
#include "captok/vocab.hpp"

namespace captok {

constexpr int kNumFrames = 16;
constexpr int kNumSegments = 4;
constexpr int kFramesPerSegment = kNumFrames / kNumSegments;
constexpr int kTeacherTokenCap = 100;

enum class Shape { Circle = 0, Square, Triangle, Star };
enum class Color { Red = 0, Green, Blue, Yellow, Purple, Orange };
enum class EventKind { MoveLeft = 0, MoveRight, MoveUp, MoveDown, Appear, Disappear };

constexpr int kNumShapes = 4;
constexpr int kNumColors = 6;

inline const char* shape_name(Shape s) {
    static const char* names[] = {"circle", "square", "triangle", "star"};
    return names[static_cast<int>(s)];
}

inline const char* color_name(Color c) {
    static const char* names[] = {"red", "green", "blue", "yellow", "purple", "orange"};
    return names[static_cast<int>(c)];
}

inline const char* event_name(EventKind k) {
    static const char* names[] = {"move_left", "move_right", "move_up",
                                  "move_down", "appear",    "disappear"};
    return names[static_cast<int>(k)];
}

inline Shape parse_shape(const std::string& s) {
    for (int i = 0; i < kNumShapes; ++i)
        if (s == shape_name(static_cast<Shape>(i))) return static_cast<Shape>(i);
    throw DataError("unknown shape \"" + s + "\"");
}

inline Color parse_color(const std::string& s) {
    for (int i = 0; i < kNumColors; ++i)
        if (s == color_name(static_cast<Color>(i))) return static_cast<Color>(i);
    throw DataError("unknown color \"" + s + "\"");
}

inline EventKind parse_event(const std::string& s) {
    for (int i = 0; i < 6; ++i)
        if (s == event_name(static_cast<EventKind>(i))) return static_cast<EventKind>(i);
    throw DataError("unknown event kind \"" + s + "\"");
}

inline bool is_move(EventKind k) {
    return k == EventKind::MoveLeft || k == EventKind::MoveRight || k == EventKind::MoveUp ||
           k == EventKind::MoveDown;
}

// (drow, dcol) for a move kind.
inline std::pair<int, int> move_delta(EventKind k) {
    switch (k) {
        case EventKind::MoveLeft: return {0, -1};
        case EventKind::MoveRight: return {0, 1};
        case EventKind::MoveUp: return {-1, 0};
        case EventKind::MoveDown: return {1, 0};
        default: throw ContractError("move_delta: not a move event");
    }
}

struct Entity {
    int id = 0;
    Shape shape = Shape::Circle;
    Color color = Color::Red;
    int row = 0;  // position when first visible
    int col = 0;
    bool start_visible = true;

    bool operator==(const Entity&) const = default;
};

struct MotionEvent {
    int entity_id = 0;
    EventKind kind = EventKind::MoveLeft;
    int frame_index = 0;

    bool operator==(const MotionEvent&) const = default;
};

struct Clip {
    std::string clip_id;
    int grid = 8;
    int richness = 0;  // #entities + 2 * #events, by construction
    std::vector<Entity> entities;
    std::vector<MotionEvent> events;  // stored in application order

    bool operator==(const Clip&) const = default;
};

// Per-frame state after replaying events; frame t reflects all events with
// frame_index <= t.
struct ClipState {
    int grid = 8;
    std::vector<std::array<std::pair<int, int>, kNumFrames>> pos;  // [entity][frame]
    std::vector<std::array<bool, kNumFrames>> vis;
    std::vector<std::vector<int>> frames;  // [frame][grid*grid], 0 empty else 1+symbol

    bool visible_in_segment(int entity, int segment) const {
        for (int f = segment * kFramesPerSegment; f < (segment + 1) * kFramesPerSegment; ++f)
            if (vis[static_cast<size_t>(entity)][static_cast<size_t>(f)]) return true;
        return false;
    }

    bool visible_anywhere(int entity) const {
        for (int f = 0; f < kNumFrames; ++f)
            if (vis[static_cast<size_t>(entity)][static_cast<size_t>(f)]) return true;
        return false;
    }

    int first_visible_frame_in_segment(int entity, int segment) const {
        for (int f = segment * kFramesPerSegment; f < (segment + 1) * kFramesPerSegment; ++f)
            if (vis[static_cast<size_t>(entity)][static_cast<size_t>(f)]) return f;
        return -1;
    }
};

inline int cell_symbol(const Entity& e) {
    return 1 + static_cast<int>(e.shape) * kNumColors + static_cast<int>(e.color);
}

// Replays a clip's event list, validating structural invariants along the way.
// Throws DataError (with the clip id) on any violation; used both after
// generation and when loading corpora from disk.
inline ClipState simulate(const Clip& clip) {
    const int G = clip.grid;
    const int n = static_cast<int>(clip.entities.size());
    auto fail = [&](const std::string& what) {
        throw DataError("clip " + clip.clip_id + ": " + what);
    };
    if (G < 2) fail("grid side must be >= 2");
    if (n == 0) fail("clip has no entities");
    std::unordered_set<int> ids;
    for (const auto& e : clip.entities) {
        if (e.id < 0 || e.id >= n || !ids.insert(e.id).second) fail("entity ids must be 0..n-1");
        if (e.row < 0 || e.row >= G || e.col < 0 || e.col >= G)
            fail("entity position out of bounds");
    }
    std::vector<const Entity*> by_id(static_cast<size_t>(n));
    for (const auto& e : clip.entities) by_id[static_cast<size_t>(e.id)] = &e;

    if (clip.richness != n + 2 * static_cast<int>(clip.events.size()))
        fail("richness does not equal #entities + 2*#events");

    std::vector<std::pair<int, int>> cur(static_cast<size_t>(n));
    std::vector<bool> alive(static_cast<size_t>(n), false);
    std::vector<bool> ever(static_cast<size_t>(n), false);
    std::vector<int> cells(static_cast<size_t>(G * G), -1);
    auto cell_at = [&](int r, int c) -> int& { return cells[static_cast<size_t>(r * G + c)]; };
    for (const auto& e : clip.entities) {
        cur[static_cast<size_t>(e.id)] = {e.row, e.col};
        if (e.start_visible) {
            if (cell_at(e.row, e.col) != -1) fail("two entities share a starting cell");
            cell_at(e.row, e.col) = e.id;
            alive[static_cast<size_t>(e.id)] = ever[static_cast<size_t>(e.id)] = true;
        }
    }

    ClipState st;
    st.grid = G;
    st.pos.resize(static_cast<size_t>(n));
    st.vis.resize(static_cast<size_t>(n));
    st.frames.assign(kNumFrames, {});
    size_t next_event = 0;
    int last_frame = 0;
    for (const auto& ev : clip.events) {
        if (ev.frame_index < last_frame) fail("events out of chronological order");
        last_frame = ev.frame_index;
    }
    for (int f = 0; f < kNumFrames; ++f) {
        while (next_event < clip.events.size() &&
               clip.events[next_event].frame_index == f) {
            const auto& ev = clip.events[next_event];
            if (ev.frame_index < 1 || ev.frame_index >= kNumFrames)
                fail("event frame index out of range");
            if (ev.entity_id < 0 || ev.entity_id >= n) fail("event references unknown entity");
            const size_t e = static_cast<size_t>(ev.entity_id);
            if (is_move(ev.kind)) {
                if (!alive[e]) fail("move event on a hidden entity");
                auto [dr, dc] = move_delta(ev.kind);
                const int nr = cur[e].first + dr, nc = cur[e].second + dc;
                if (nr < 0 || nr >= G || nc < 0 || nc >= G) fail("move leaves the grid");
                if (cell_at(nr, nc) != -1) fail("move into an occupied cell");
                cell_at(cur[e].first, cur[e].second) = -1;
                cell_at(nr, nc) = ev.entity_id;
                cur[e] = {nr, nc};
            } else if (ev.kind == EventKind::Appear) {
                if (alive[e] || ever[e]) fail("appear event on an already-visible entity");
                const auto& ent = *by_id[e];
                if (cell_at(ent.row, ent.col) != -1) fail("appear into an occupied cell");
                cur[e] = {ent.row, ent.col};
                cell_at(ent.row, ent.col) = ev.entity_id;
                alive[e] = ever[e] = true;
            } else {
                if (!alive[e]) fail("disappear event on a hidden entity");
                cell_at(cur[e].first, cur[e].second) = -1;
                alive[e] = false;
            }
            ++next_event;
        }
        st.frames[static_cast<size_t>(f)].assign(static_cast<size_t>(G * G), 0);
        for (int e = 0; e < n; ++e) {
            st.pos[static_cast<size_t>(e)][static_cast<size_t>(f)] = cur[static_cast<size_t>(e)];
            st.vis[static_cast<size_t>(e)][static_cast<size_t>(f)] = alive[static_cast<size_t>(e)];
            if (alive[static_cast<size_t>(e)]) {
                const auto [r, c] = cur[static_cast<size_t>(e)];
                st.frames[static_cast<size_t>(f)][static_cast<size_t>(r * G + c)] =
                    cell_symbol(*by_id[static_cast<size_t>(e)]);
            }
        }
    }
    if (next_event != clip.events.size()) fail("event frame index out of range");
    for (int e = 0; e < n; ++e)
        if (!st.visible_anywhere(e)) fail("entity never becomes visible");
    return st;
}

// ---------------------------------------------------------------------------
// Generation

struct RichnessRange {
    int lo = 1;
    int hi = 24;
};

namespace detail {

// One generation attempt; returns nullopt if event placement got stuck.
inline std::optional<Clip> attempt_clip(Rng& rng, const std::string& clip_id, int grid,
                                        int richness) {
    const int G = grid;
    const int cells_total = G * G;
    const int max_events = (richness - 1) / 2;
    int min_events = 0;
    if (richness - cells_total > 0) min_events = (richness - cells_total + 1) / 2;
    if (min_events > max_events) throw DataError("richness " + std::to_string(richness) +
                                                 " infeasible on a " + std::to_string(G) + "x" +
                                                 std::to_string(G) + " grid");
    const int n_events = rng.randint(min_events, max_events);
    const int n_entities = richness - 2 * n_events;

    // Entity registry: colors/shapes uniform, distinct starting cells.
    std::vector<int> cell_order(static_cast<size_t>(cells_total));
    for (int i = 0; i < cells_total; ++i) cell_order[static_cast<size_t>(i)] = i;
    rng.shuffle(cell_order);
    Clip clip;
    clip.clip_id = clip_id;
    clip.grid = G;
    clip.richness = richness;
    for (int i = 0; i < n_entities; ++i) {
        Entity e;
        e.id = i;
        e.shape = static_cast<Shape>(rng.randint(0, kNumShapes - 1));
        e.color = static_cast<Color>(rng.randint(0, kNumColors - 1));
        e.row = cell_order[static_cast<size_t>(i)] / G;
        e.col = cell_order[static_cast<size_t>(i)] % G;
        e.start_visible = true;
        clip.entities.push_back(e);
    }

    // Draw event kinds (moves weighted up) and frames, then decide which
    // entities start hidden: one per appear event, taken from the back.
    std::vector<int> kind_cat;  // 0 move, 1 appear, 2 disappear
    for (int i = 0; i < n_events; ++i) {
        const int d = rng.randint(0, 9);
        kind_cat.push_back(d < 6 ? 0 : (d < 8 ? 1 : 2));
    }
    int appear_quota = 0;
    for (int& c : kind_cat) {
        if (c == 1) {
            if (appear_quota + 1 > n_entities - 1)
                c = 0;  // keep at least one start-visible entity
            else
                ++appear_quota;
        }
    }
    std::vector<int> hidden_pool;  // entity ids, consumed in order by appears
    for (int i = 0; i < appear_quota; ++i) {
        const int id = n_entities - 1 - i;
        clip.entities[static_cast<size_t>(id)].start_visible = false;
        hidden_pool.push_back(id);
    }

    struct Draft {
        int frame;
        int cat;
        int order;
    };
    std::vector<Draft> drafts;
    for (int i = 0; i < n_events; ++i)
        drafts.push_back({rng.randint(1, kNumFrames - 1), kind_cat[static_cast<size_t>(i)], i});
    std::sort(drafts.begin(), drafts.end(), [](const Draft& a, const Draft& b) {
        if (a.frame != b.frame) return a.frame < b.frame;
        if (a.cat != b.cat) return a.cat < b.cat;  // appears, then moves? see below
        return a.order < b.order;
    });
    // Within a frame, apply appears first so freshly revealed entities can be
    // moved by later events in the same frame.
    std::stable_sort(drafts.begin(), drafts.end(), [](const Draft& a, const Draft& b) {
        if (a.frame != b.frame) return a.frame < b.frame;
        auto rank = [](int cat) { return cat == 1 ? 0 : (cat == 0 ? 1 : 2); };
        return rank(a.cat) < rank(b.cat);
    });

    // Live simulation with fallbacks between event categories.
    std::vector<std::pair<int, int>> cur(clip.entities.size());
    std::vector<bool> alive(clip.entities.size(), false);
    std::vector<int> cells(static_cast<size_t>(cells_total), -1);
    for (const auto& e : clip.entities) {
        cur[static_cast<size_t>(e.id)] = {e.row, e.col};
        if (e.start_visible) {
            cells[static_cast<size_t>(e.row * G + e.col)] = e.id;
            alive[static_cast<size_t>(e.id)] = true;
        }
    }
    size_t next_hidden = 0;
    std::vector<int> appear_frame(clip.entities.size(), -1);

    auto try_move = [&](int frame) -> std::optional<MotionEvent> {
        std::vector<int> candidates;
        for (size_t e = 0; e < alive.size(); ++e)
            if (alive[e]) candidates.push_back(static_cast<int>(e));
        rng.shuffle(candidates);
        for (int e : candidates) {
            std::vector<int> dirs = {0, 1, 2, 3};
            rng.shuffle(dirs);
            for (int d : dirs) {
                const auto kind = static_cast<EventKind>(d);
                auto [dr, dc] = move_delta(kind);
                const int nr = cur[static_cast<size_t>(e)].first + dr;
                const int nc = cur[static_cast<size_t>(e)].second + dc;
                if (nr < 0 || nr >= G || nc < 0 || nc >= G) continue;
                if (cells[static_cast<size_t>(nr * G + nc)] != -1) continue;
                cells[static_cast<size_t>(cur[static_cast<size_t>(e)].first * G +
                                          cur[static_cast<size_t>(e)].second)] = -1;
                cells[static_cast<size_t>(nr * G + nc)] = e;
                cur[static_cast<size_t>(e)] = {nr, nc};
                return MotionEvent{e, kind, frame};
            }
        }
        return std::nullopt;
    };
    auto try_appear = [&](int frame) -> std::optional<MotionEvent> {
        if (next_hidden >= hidden_pool.size()) return std::nullopt;
        const int e = hidden_pool[next_hidden];
        auto& ent = clip.entities[static_cast<size_t>(e)];
        if (cells[static_cast<size_t>(ent.row * G + ent.col)] != -1) {
            std::vector<int> free_cells;
            for (int c = 0; c < cells_total; ++c)
                if (cells[static_cast<size_t>(c)] == -1) free_cells.push_back(c);
            if (free_cells.empty()) return std::nullopt;
            const int c = free_cells[static_cast<size_t>(
                rng.randint(0, static_cast<int>(free_cells.size()) - 1))];
            ent.row = c / G;
            ent.col = c % G;
        }
        ++next_hidden;
        cells[static_cast<size_t>(ent.row * G + ent.col)] = e;
        cur[static_cast<size_t>(e)] = {ent.row, ent.col};
        alive[static_cast<size_t>(e)] = true;
        appear_frame[static_cast<size_t>(e)] = frame;
        return MotionEvent{e, EventKind::Appear, frame};
    };
    auto try_disappear = [&](int frame) -> std::optional<MotionEvent> {
        // A frame's rendered state reflects all events up to and including it,
        // so an entity that appears and disappears within one frame would never
        // be visible at all; exclude same-frame appearances.
        std::vector<int> candidates;
        for (size_t e = 0; e < alive.size(); ++e)
            if (alive[e] && appear_frame[e] != frame) candidates.push_back(static_cast<int>(e));
        if (candidates.empty()) return std::nullopt;
        const int e = candidates[static_cast<size_t>(
            rng.randint(0, static_cast<int>(candidates.size()) - 1))];
        cells[static_cast<size_t>(cur[static_cast<size_t>(e)].first * G +
                                  cur[static_cast<size_t>(e)].second)] = -1;
        alive[static_cast<size_t>(e)] = false;
        return MotionEvent{e, EventKind::Disappear, frame};
    };

    for (const auto& d : drafts) {
        std::optional<MotionEvent> ev;
        if (d.cat == 0)
            ev = try_move(d.frame);
        else if (d.cat == 1)
            ev = try_appear(d.frame);
        else
            ev = try_disappear(d.frame);
        if (!ev && d.cat != 0) ev = try_move(d.frame);
        if (!ev && d.cat != 2) ev = try_disappear(d.frame);
        if (!ev) return std::nullopt;
        clip.events.push_back(*ev);
    }
    if (next_hidden != hidden_pool.size()) return std::nullopt;  // an appear fell through
    return clip;
}

}  // namespace detail

inline Clip generate_clip(uint64_t seed, RichnessRange range, int grid = 8,
                          const std::string& clip_id_hint = "") {
    if (range.lo < 1 || range.hi < range.lo)
        throw ConfigError("richness range must satisfy 1 <= lo <= hi");
    Rng rng(seed);
    const std::string clip_id =
        clip_id_hint.empty() ? ("c" + hex64(seed)) : clip_id_hint;
    const int richness = rng.randint(range.lo, range.hi);
    for (int attempt = 0; attempt < 32; ++attempt) {
        auto clip = detail::attempt_clip(rng, clip_id, grid, richness);
        if (clip) {
            simulate(*clip);  // re-validate via the reference replay
            return *clip;
        }
    }
    throw DataError("clip generation did not converge for richness " +
                    std::to_string(richness) + " on a " + std::to_string(grid) + "x" +
                    std::to_string(grid) + " grid");
}

// ---------------------------------------------------------------------------
// Captions

struct CaptionRecord {
    std::string clip_id;
    int segment = 0;
    std::vector<int> raw_tokens;  // full caption, fillers included
    std::vector<int> tokens;      // supervision targets after filtering, <= 100

    bool operator==(const CaptionRecord&) const = default;
};

// Drops connective/filler tokens, preserving order.
inline std::vector<int> filter_supervision(const std::vector<int>& raw) {
    const Vocab& v = Vocab::instance();
    std::vector<int> out;
    for (int id : raw)
        if (!v.is_filler(id)) out.push_back(id);
    return out;
}

inline int segment_richness(const Clip& clip, const ClipState& st, int segment) {
    int entities = 0;
    for (size_t e = 0; e < clip.entities.size(); ++e)
        if (st.visible_in_segment(static_cast<int>(e), segment)) ++entities;
    int events = 0;
    for (const auto& ev : clip.events)
        if (ev.frame_index / kFramesPerSegment == segment) ++events;
    return entities + 2 * events;
}

namespace detail {

inline std::vector<std::string> region_words(int row, int col, int grid) {
    std::vector<std::string> out;
    if (3 * row < grid)
        out.push_back("top");
    else if (3 * (grid - 1 - row) < grid)
        out.push_back("bottom");
    if (3 * col < grid)
        out.push_back("left");
    else if (3 * (grid - 1 - col) < grid)
        out.push_back("right");
    if (out.empty()) out.push_back("center");
    return out;
}

inline const char* article_for(Color c) { return c == Color::Orange ? "an" : "a"; }

}  // namespace detail

// Rule-based reference caption for one segment: entity clauses in reading
// order, then event clauses in chronological order.
inline CaptionRecord teacher_caption(const Clip& clip, const ClipState& st, int segment) {
    if (segment < 0 || segment >= kNumSegments) throw ContractError("segment out of range");
    const Vocab& vb = Vocab::instance();
    CaptionRecord rec;
    rec.clip_id = clip.clip_id;
    rec.segment = segment;
    std::vector<std::string> words;

    struct Vis {
        int row, col, id;
    };
    std::vector<Vis> present;
    for (const auto& e : clip.entities) {
        const int f0 = st.first_visible_frame_in_segment(e.id, segment);
        if (f0 < 0) continue;
        const auto [r, c] = st.pos[static_cast<size_t>(e.id)][static_cast<size_t>(f0)];
        present.push_back({r, c, e.id});
    }
    std::sort(present.begin(), present.end(), [](const Vis& a, const Vis& b) {
        if (a.row != b.row) return a.row < b.row;
        if (a.col != b.col) return a.col < b.col;
        return a.id < b.id;
    });

    if (present.empty()) {
        words = {"an", "empty", "scene"};
    } else {
        bool first = true;
        for (const auto& p : present) {
            const Entity& e = clip.entities[static_cast<size_t>(p.id)];
            if (!first) words.push_back("and");
            first = false;
            words.push_back(detail::article_for(e.color));
            words.push_back(color_name(e.color));
            words.push_back(shape_name(e.shape));
            words.push_back("in");
            for (const auto& w : detail::region_words(p.row, p.col, clip.grid))
                words.push_back(w);
        }
        for (const auto& ev : clip.events) {
            if (ev.frame_index / kFramesPerSegment != segment) continue;
            const Entity& e = clip.entities[static_cast<size_t>(ev.entity_id)];
            words.push_back("and");
            words.push_back(is_move(ev.kind) ? "then" : "also");
            words.push_back(color_name(e.color));
            words.push_back(shape_name(e.shape));
            switch (ev.kind) {
                case EventKind::MoveLeft:
                    words.push_back("moves");
                    words.push_back("left");
                    break;
                case EventKind::MoveRight:
                    words.push_back("moves");
                    words.push_back("right");
                    break;
                case EventKind::MoveUp:
                    words.push_back("moves");
                    words.push_back("up");
                    break;
                case EventKind::MoveDown:
                    words.push_back("moves");
                    words.push_back("down");
                    break;
                case EventKind::Appear: words.push_back("appears"); break;
                case EventKind::Disappear: words.push_back("vanishes"); break;
            }
        }
    }
    for (const auto& w : words) rec.raw_tokens.push_back(vb.id(w));
    rec.tokens = filter_supervision(rec.raw_tokens);
    if (rec.tokens.size() > kTeacherTokenCap) rec.tokens.resize(kTeacherTokenCap);
    return rec;
}

// ---------------------------------------------------------------------------
// Multiple-choice QA

struct QARecord {
    std::string clip_id;
    std::string kind;                     // existence | count | direction | color
    std::vector<int> question;            // token ids
    std::array<std::vector<int>, 4> options;
    int correct = 0;

    bool operator==(const QARecord&) const = default;
};

namespace detail {

inline const char* digit_word(int n) {
    static const char* names[] = {"zero", "one", "two",   "three", "four",
                                  "five", "six", "seven", "eight", "nine"};
    if (n < 0 || n > 9) throw ContractError("digit_word: out of range");
    return names[n];
}

// Places `answer` among distractors at a seeded position; returns the record
// options plus the correct index.
inline void lay_out_options(Rng& rng, const std::vector<std::vector<std::string>>& pool,
                            size_t answer_idx, QARecord& rec) {
    if (pool.size() != 4) throw ContractError("option pool must have 4 entries");
    std::vector<int> order = {0, 1, 2, 3};
    rng.shuffle(order);
    const Vocab& vb = Vocab::instance();
    for (int slot = 0; slot < 4; ++slot) {
        const auto& words = pool[static_cast<size_t>(order[static_cast<size_t>(slot)])];
        rec.options[static_cast<size_t>(slot)] = vb.ids(words);
        if (static_cast<size_t>(order[static_cast<size_t>(slot)]) == answer_idx)
            rec.correct = slot;
    }
}

}  // namespace detail

// Deterministic multiple-choice questions over the full clip; at least four
// per clip, spanning existence / count / direction / color when answerable.
inline std::vector<QARecord> generate_qa(const Clip& clip, const ClipState& st, uint64_t seed) {
    Rng rng(seed);
    const Vocab& vb = Vocab::instance();
    std::vector<QARecord> out;

    std::vector<int> visible_ids;
    for (const auto& e : clip.entities)
        if (st.visible_anywhere(e.id)) visible_ids.push_back(e.id);
    if (visible_ids.empty()) throw ContractError("clip with no visible entity");

    std::array<std::array<int, kNumShapes>, kNumColors> combo_count{};
    for (int id : visible_ids) {
        const Entity& e = clip.entities[static_cast<size_t>(id)];
        ++combo_count[static_cast<size_t>(static_cast<int>(e.color))]
                     [static_cast<size_t>(static_cast<int>(e.shape))];
    }
    auto color_total = [&](int c) {
        int t = 0;
        for (int s = 0; s < kNumShapes; ++s) t += combo_count[static_cast<size_t>(c)][static_cast<size_t>(s)];
        return t;
    };

    auto existence_question = [&](Color c, Shape s, bool present) {
        QARecord rec;
        rec.clip_id = clip.clip_id;
        rec.kind = "existence";
        rec.question = vb.ids({"is", "there", detail::article_for(c), color_name(c),
                               shape_name(s), "?"});
        detail::lay_out_options(rng, {{"yes"}, {"no"}, {"maybe"}, {"never"}},
                                present ? 0 : 1, rec);
        return rec;
    };
    auto count_question = [&](std::optional<Color> c, int count) {
        QARecord rec;
        rec.clip_id = clip.clip_id;
        rec.kind = "count";
        rec.question = c ? vb.ids({"how", "many", color_name(*c), "objects", "?"})
                         : vb.ids({"how", "many", "objects", "?"});
        std::vector<int> values = {count};
        while (values.size() < 4) {
            const int v = rng.randint(std::max(0, count - 3), std::min(9, count + 3));
            if (std::find(values.begin(), values.end(), v) == values.end()) values.push_back(v);
        }
        std::vector<std::vector<std::string>> pool;
        for (int v : values) pool.push_back({detail::digit_word(v)});
        detail::lay_out_options(rng, pool, 0, rec);
        return rec;
    };

    // 1. existence, positive: a (color, shape) combination that is present.
    {
        const int pick = visible_ids[static_cast<size_t>(
            rng.randint(0, static_cast<int>(visible_ids.size()) - 1))];
        const Entity& e = clip.entities[static_cast<size_t>(pick)];
        out.push_back(existence_question(e.color, e.shape, true));
    }
    // 2. existence, negative: an absent combination, when one exists.
    {
        std::vector<std::pair<int, int>> absent;
        for (int c = 0; c < kNumColors; ++c)
            for (int s = 0; s < kNumShapes; ++s)
                if (combo_count[static_cast<size_t>(c)][static_cast<size_t>(s)] == 0)
                    absent.emplace_back(c, s);
        if (!absent.empty()) {
            const auto [c, s] = absent[static_cast<size_t>(
                rng.randint(0, static_cast<int>(absent.size()) - 1))];
            out.push_back(existence_question(static_cast<Color>(c), static_cast<Shape>(s), false));
        }
    }
    // 3. count over a color (answer must fit a single digit word).
    {
        std::vector<int> countable;
        for (int c = 0; c < kNumColors; ++c)
            if (color_total(c) >= 1 && color_total(c) <= 9) countable.push_back(c);
        if (countable.empty())
            for (int c = 0; c < kNumColors; ++c)
                if (color_total(c) <= 9) countable.push_back(c);
        if (!countable.empty()) {
            const int c = countable[static_cast<size_t>(
                rng.randint(0, static_cast<int>(countable.size()) - 1))];
            out.push_back(count_question(static_cast<Color>(c), color_total(c)));
        }
    }
    // 4. direction of the first move of an unambiguous mover.
    {
        std::vector<int> movers;
        for (int id : visible_ids) {
            const Entity& e = clip.entities[static_cast<size_t>(id)];
            if (combo_count[static_cast<size_t>(static_cast<int>(e.color))]
                           [static_cast<size_t>(static_cast<int>(e.shape))] != 1)
                continue;
            for (const auto& ev : clip.events)
                if (ev.entity_id == id && is_move(ev.kind)) {
                    movers.push_back(id);
                    break;
                }
        }
        if (!movers.empty()) {
            const int id = movers[static_cast<size_t>(
                rng.randint(0, static_cast<int>(movers.size()) - 1))];
            const Entity& e = clip.entities[static_cast<size_t>(id)];
            EventKind first = EventKind::MoveLeft;
            for (const auto& ev : clip.events)
                if (ev.entity_id == id && is_move(ev.kind)) {
                    first = ev.kind;
                    break;
                }
            QARecord rec;
            rec.clip_id = clip.clip_id;
            rec.kind = "direction";
            rec.question = vb.ids({"which", "direction", "did", "the", color_name(e.color),
                                   shape_name(e.shape), "move", "?"});
            const std::vector<std::vector<std::string>> pool = {
                {"left"}, {"right"}, {"up"}, {"down"}};
            size_t answer = 0;
            if (first == EventKind::MoveRight) answer = 1;
            if (first == EventKind::MoveUp) answer = 2;
            if (first == EventKind::MoveDown) answer = 3;
            detail::lay_out_options(rng, pool, answer, rec);
            out.push_back(rec);
        }
    }
    // 5. color of the only entity of some shape.
    {
        std::vector<int> unique_shapes;
        for (int s = 0; s < kNumShapes; ++s) {
            int total = 0;
            for (int c = 0; c < kNumColors; ++c)
                total += combo_count[static_cast<size_t>(c)][static_cast<size_t>(s)];
            if (total == 1) unique_shapes.push_back(s);
        }
        if (!unique_shapes.empty()) {
            const int s = unique_shapes[static_cast<size_t>(
                rng.randint(0, static_cast<int>(unique_shapes.size()) - 1))];
            Color answer_color = Color::Red;
            for (int id : visible_ids) {
                const Entity& e = clip.entities[static_cast<size_t>(id)];
                if (static_cast<int>(e.shape) == s) answer_color = e.color;
            }
            QARecord rec;
            rec.clip_id = clip.clip_id;
            rec.kind = "color";
            rec.question =
                vb.ids({"what", "color", "is", "the", shape_name(static_cast<Shape>(s)), "?"});
            std::vector<int> colors = {static_cast<int>(answer_color)};
            while (colors.size() < 4) {
                const int c = rng.randint(0, kNumColors - 1);
                if (std::find(colors.begin(), colors.end(), c) == colors.end())
                    colors.push_back(c);
            }
            std::vector<std::vector<std::string>> pool;
            for (int c : colors) pool.push_back({color_name(static_cast<Color>(c))});
            detail::lay_out_options(rng, pool, 0, rec);
            out.push_back(rec);
        }
    }
    // Top up with total-count and per-color count questions until >= 4.
    if (out.size() < 4) {
        const int total = static_cast<int>(visible_ids.size());
        if (total <= 9) out.push_back(count_question(std::nullopt, total));
    }
    for (int c = 0; out.size() < 4 && c < kNumColors; ++c) {
        bool seen = false;
        for (const auto& rec : out)
            if (rec.kind == "count" && !rec.question.empty() &&
                rec.question[2] == vb.id(color_name(static_cast<Color>(c))) &&
                rec.question.size() == 5)
                seen = true;
        if (!seen && color_total(c) <= 9)
            out.push_back(count_question(static_cast<Color>(c), color_total(c)));
    }
    if (out.size() < 4) throw ContractError("could not assemble four questions for clip");
    return out;
}

// Question plus inline lettered options, e.g. "... ? <sep> A yes <sep> B no ...".
inline std::vector<int> prompt_tokens(const QARecord& rec) {
    const Vocab& vb = Vocab::instance();
    std::vector<int> out = rec.question;
    static const char* letters[] = {"A", "B", "C", "D"};
    for (int i = 0; i < 4; ++i) {
        out.push_back(vb.sep());
        out.push_back(vb.id(letters[i]));
        for (int t : rec.options[static_cast<size_t>(i)]) out.push_back(t);
    }
    return out;
}

inline int answer_letter_token(const QARecord& rec) {
    static const char* letters[] = {"A", "B", "C", "D"};
    return Vocab::instance().id(letters[rec.correct]);
}

// ---------------------------------------------------------------------------
// Corpus container and jsonl round-trip

struct Corpus {
    int grid = 8;
    std::vector<Clip> clips;
    std::vector<CaptionRecord> captions;  // kNumSegments per clip, in clip order
    std::vector<QARecord> qa;

    const Clip& clip_by_id(const std::string& id) const {
        for (const auto& c : clips)
            if (c.clip_id == id) return c;
        throw DataError("unknown clip id " + id);
    }
};

struct GenSpec {
    uint64_t seed = 1;
    int num_clips = 100;
    RichnessRange richness;
    int grid = 8;
};

inline Corpus generate_corpus(const GenSpec& spec) {
    if (spec.num_clips < 1) throw ConfigError("num_clips must be >= 1");
    Corpus corpus;
    corpus.grid = spec.grid;
    for (int i = 0; i < spec.num_clips; ++i) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "c%06d", i);
        const uint64_t clip_seed = mix_seed(spec.seed, static_cast<uint64_t>(i));
        Clip clip = generate_clip(clip_seed, spec.richness, spec.grid, idbuf);
        ClipState st = simulate(clip);
        for (int s = 0; s < kNumSegments; ++s)
            corpus.captions.push_back(teacher_caption(clip, st, s));
        auto qa = generate_qa(clip, st, mix_seed(clip_seed, 0x9a));
        corpus.qa.insert(corpus.qa.end(), qa.begin(), qa.end());
        corpus.clips.push_back(std::move(clip));
    }
    return corpus;
}

namespace detail {

using json = nlohmann::json;

inline json clip_to_json(const Clip& c) {
    json entities = json::array();
    for (const auto& e : c.entities)
        entities.push_back({{"id", e.id},
                            {"shape", shape_name(e.shape)},
                            {"color", color_name(e.color)},
                            {"row", e.row},
                            {"col", e.col},
                            {"start_visible", e.start_visible}});
    json events = json::array();
    for (const auto& ev : c.events)
        events.push_back({{"entity", ev.entity_id},
                          {"kind", event_name(ev.kind)},
                          {"frame", ev.frame_index}});
    return {{"clip_id", c.clip_id},
            {"grid", c.grid},
            {"richness", c.richness},
            {"entities", entities},
            {"events", events}};
}

inline Clip clip_from_json(const json& j) {
    Clip c;
    c.clip_id = j.at("clip_id").get<std::string>();
    c.grid = j.at("grid").get<int>();
    c.richness = j.at("richness").get<int>();
    for (const auto& je : j.at("entities")) {
        Entity e;
        e.id = je.at("id").get<int>();
        e.shape = parse_shape(je.at("shape").get<std::string>());
        e.color = parse_color(je.at("color").get<std::string>());
        e.row = je.at("row").get<int>();
        e.col = je.at("col").get<int>();
        e.start_visible = je.at("start_visible").get<bool>();
        c.entities.push_back(e);
    }
    for (const auto& jv : j.at("events")) {
        MotionEvent ev;
        ev.entity_id = jv.at("entity").get<int>();
        ev.kind = parse_event(jv.at("kind").get<std::string>());
        ev.frame_index = jv.at("frame").get<int>();
        c.events.push_back(ev);
    }
    return c;
}

template <typename Fn>
inline void read_jsonl(const std::string& path, const std::string& schema, int version,
                       Fn&& per_record) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    int lineno = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        try {
            if (!saw_header) {
                if (j.value("schema", "") != schema)
                    throw DataError("expected schema \"" + schema + "\"");
                if (j.value("version", -1) != version)
                    throw DataError("unsupported version");
                saw_header = true;
                continue;
            }
            per_record(j);
        } catch (const json::exception& e) {
            throw DataError(path + " line " + std::to_string(lineno) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!saw_header) throw DataError(path + ": missing header line");
}

}  // namespace detail

inline void write_corpus(const std::string& dir, const Corpus& corpus) {
    using detail::json;
    {
        std::ofstream out(dir + "/clips.jsonl");
        if (!out) throw DataError("cannot write " + dir + "/clips.jsonl");
        out << json{{"schema", "clips"}, {"version", 1}, {"grid", corpus.grid}}.dump() << "\n";
        for (const auto& c : corpus.clips) out << detail::clip_to_json(c).dump() << "\n";
    }
    {
        std::ofstream out(dir + "/captions.jsonl");
        if (!out) throw DataError("cannot write " + dir + "/captions.jsonl");
        out << json{{"schema", "captions"}, {"version", 1}}.dump() << "\n";
        for (const auto& r : corpus.captions)
            out << json{{"clip_id", r.clip_id},
                        {"segment", r.segment},
                        {"raw_tokens", r.raw_tokens},
                        {"tokens", r.tokens}}
                       .dump()
                << "\n";
    }
    {
        std::ofstream out(dir + "/qa.jsonl");
        if (!out) throw DataError("cannot write " + dir + "/qa.jsonl");
        out << json{{"schema", "qa"}, {"version", 1}}.dump() << "\n";
        for (const auto& r : corpus.qa) {
            json options = json::array();
            for (const auto& o : r.options) options.push_back(o);
            out << json{{"clip_id", r.clip_id},
                        {"kind", r.kind},
                        {"question", r.question},
                        {"options", options},
                        {"correct", r.correct}}
                       .dump()
                << "\n";
        }
    }
}

inline Corpus read_corpus(const std::string& dir) {
    using detail::json;
    Corpus corpus;
    {
        std::ifstream in(dir + "/clips.jsonl");
        if (!in) throw DataError("cannot open " + dir + "/clips.jsonl");
        std::string header;
        if (!std::getline(in, header)) throw DataError(dir + "/clips.jsonl: empty file");
        try {
            corpus.grid = json::parse(header).at("grid").get<int>();
        } catch (const json::exception& e) {
            throw DataError(dir + "/clips.jsonl line 1: " + std::string(e.what()));
        }
    }
    detail::read_jsonl(dir + "/clips.jsonl", "clips", 1, [&](const json& j) {
        Clip c = detail::clip_from_json(j);
        simulate(c);  // full structural validation
        corpus.clips.push_back(std::move(c));
    });
    std::unordered_set<std::string> ids;
    for (const auto& c : corpus.clips) {
        if (!ids.insert(c.clip_id).second) throw DataError("duplicate clip id " + c.clip_id);
    }
    detail::read_jsonl(dir + "/captions.jsonl", "captions", 1, [&](const json& j) {
        CaptionRecord r;
        r.clip_id = j.at("clip_id").get<std::string>();
        if (!ids.count(r.clip_id)) throw DataError("caption references unknown clip " + r.clip_id);
        r.segment = j.at("segment").get<int>();
        if (r.segment < 0 || r.segment >= kNumSegments)
            throw DataError("caption segment out of range");
        r.raw_tokens = j.at("raw_tokens").get<std::vector<int>>();
        r.tokens = j.at("tokens").get<std::vector<int>>();
        if (r.tokens.size() > kTeacherTokenCap)
            throw DataError("caption exceeds the supervision cap");
        const Vocab& vb = Vocab::instance();
        for (int t : r.raw_tokens) vb.text(t);
        for (int t : r.tokens) vb.text(t);
        corpus.captions.push_back(std::move(r));
    });
    detail::read_jsonl(dir + "/qa.jsonl", "qa", 1, [&](const json& j) {
        QARecord r;
        r.clip_id = j.at("clip_id").get<std::string>();
        if (!ids.count(r.clip_id)) throw DataError("question references unknown clip " + r.clip_id);
        r.kind = j.at("kind").get<std::string>();
        r.question = j.at("question").get<std::vector<int>>();
        const auto& opts = j.at("options");
        if (!opts.is_array() || opts.size() != 4) throw DataError("question needs 4 options");
        for (size_t i = 0; i < 4; ++i) r.options[i] = opts[i].get<std::vector<int>>();
        r.correct = j.at("correct").get<int>();
        if (r.correct < 0 || r.correct > 3) throw DataError("correct option index out of range");
        corpus.qa.push_back(std::move(r));
    });
    return corpus;
}

}  // namespace captok
