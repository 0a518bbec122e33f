#include "tmcir/synthetic_world.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "config_json.hpp"
#include "tmcir/errors.hpp"
#include "tmcir/rng.hpp"

namespace tmcir {

using json = nlohmann::ordered_json;

std::string_view split_name(Split s) {
    switch (s) {
    case Split::Train:
        return "train";
    case Split::Val:
        return "val";
    case Split::Test:
        return "test";
    }
    return "train";
}

Split parse_split(std::string_view name) {
    if (name == "train") {
        return Split::Train;
    }
    if (name == "val") {
        return Split::Val;
    }
    if (name == "test") {
        return Split::Test;
    }
    throw ParseError("unknown split '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// WorldConfig

void WorldConfig::validate() const {
    if (height == 0 || width == 0) {
        throw ConfigError("config: grid height and width must be positive");
    }
    if (n_shapes < 2 || n_colors < 2) {
        throw ConfigError("config: need at least 2 shapes and 2 colors so every edit changes a cell");
    }
    if (!(p_noise >= 0.0 && p_noise <= 1.0)) {
        throw ConfigError("config: p_noise must lie in [0, 1]");
    }
    if (subset_size < 1 || subset_size + 1 > attribute_count()) {
        throw ConfigError("config: subset_size must be in [1, n_shapes * n_colors - 1]");
    }
    const std::size_t vocab = 3 + height + width + n_shapes + n_colors;
    if (vocab > Vocabulary::kMaxSize) {
        throw ConfigError("config: instruction vocabulary of " + std::to_string(vocab) +
                          " tokens exceeds " + std::to_string(Vocabulary::kMaxSize));
    }
}

json to_json(const WorldConfig& cfg) {
    json j;
    j["height"] = cfg.height;
    j["width"] = cfg.width;
    j["n_shapes"] = cfg.n_shapes;
    j["n_colors"] = cfg.n_colors;
    j["n_triplets"] = cfg.n_triplets;
    j["p_noise"] = cfg.p_noise;
    j["subset_size"] = cfg.subset_size;
    return j;
}

WorldConfig world_config_from_json(const json& j) {
    using detail::read_key;
    using detail::reject_unknown;
    reject_unknown(j, {"height", "width", "n_shapes", "n_colors", "n_triplets", "p_noise", "subset_size"},
                   "world");
    WorldConfig cfg;
    read_key(j, "height", cfg.height, "world");
    read_key(j, "width", cfg.width, "world");
    read_key(j, "n_shapes", cfg.n_shapes, "world");
    read_key(j, "n_colors", cfg.n_colors, "world");
    read_key(j, "n_triplets", cfg.n_triplets, "world");
    read_key(j, "p_noise", cfg.p_noise, "world");
    read_key(j, "subset_size", cfg.subset_size, "world");
    return cfg;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(const WorldConfig& cfg)
    : height_(cfg.height), width_(cfg.width), n_shapes_(cfg.n_shapes), n_colors_(cfg.n_colors),
      size_(3 + cfg.height + cfg.width + cfg.n_shapes + cfg.n_colors) {}

std::vector<int> Vocabulary::render(const Edit& edit) const {
    if (edit.row >= height_ || edit.col >= width_) {
        throw InstructionError("edit cell (" + std::to_string(edit.row) + "," + std::to_string(edit.col) +
                               ") outside the grid");
    }
    const bool color = edit.attribute == EditAttribute::Color;
    const std::size_t range = color ? n_colors_ : n_shapes_;
    if (edit.value < 0 || static_cast<std::size_t>(edit.value) >= range) {
        throw InstructionError("edit value " + std::to_string(edit.value) + " out of range");
    }
    return {0, row_base() + static_cast<int>(edit.row), col_base() + static_cast<int>(edit.col),
            color ? 1 : 2, (color ? color_base() : shape_base()) + edit.value};
}

Edit Vocabulary::parse(std::span<const int> ids) const {
    if (ids.size() != kInstructionLength) {
        throw InstructionError("instruction must have " + std::to_string(kInstructionLength) + " tokens, got " +
                               std::to_string(ids.size()));
    }
    auto in = [](int v, int lo, std::size_t n) { return v >= lo && v < lo + static_cast<int>(n); };
    if (ids[0] != 0) {
        throw InstructionError("instruction must start with 'set'");
    }
    if (!in(ids[1], row_base(), height_) || !in(ids[2], col_base(), width_)) {
        throw InstructionError("malformed cell reference in instruction");
    }
    Edit e;
    e.row = static_cast<std::size_t>(ids[1] - row_base());
    e.col = static_cast<std::size_t>(ids[2] - col_base());
    if (ids[3] == 1 && in(ids[4], color_base(), n_colors_)) {
        e.attribute = EditAttribute::Color;
        e.value = ids[4] - color_base();
    } else if (ids[3] == 2 && in(ids[4], shape_base(), n_shapes_)) {
        e.attribute = EditAttribute::Shape;
        e.value = ids[4] - shape_base();
    } else {
        throw InstructionError("malformed attribute/value pair in instruction");
    }
    return e;
}

std::string Vocabulary::token_name(int id) const {
    if (id == 0) {
        return "set";
    }
    if (id == 1) {
        return "color";
    }
    if (id == 2) {
        return "shape";
    }
    if (id >= row_base() && id < col_base()) {
        return "row_" + std::to_string(id - row_base());
    }
    if (id >= col_base() && id < shape_base()) {
        return "col_" + std::to_string(id - col_base());
    }
    if (id >= shape_base() && id < color_base()) {
        return "shape_" + std::to_string(id - shape_base());
    }
    if (id >= color_base() && id < static_cast<int>(size_)) {
        return "color_" + std::to_string(id - color_base());
    }
    throw InstructionError("token id " + std::to_string(id) + " outside the vocabulary");
}

// ---------------------------------------------------------------------------
// Oracle and corruption

AttributeGrid apply_edit(const AttributeGrid& reference, const Edit& edit) {
    if (edit.row >= reference.height || edit.col >= reference.width) {
        throw InstructionError("edit cell (" + std::to_string(edit.row) + "," + std::to_string(edit.col) +
                               ") outside a " + std::to_string(reference.height) + "x" +
                               std::to_string(reference.width) + " grid");
    }
    AttributeGrid out = reference;
    Cell& cell = out.at(edit.row, edit.col);
    if (edit.attribute == EditAttribute::Color) {
        cell.color = edit.value;
    } else {
        cell.shape = edit.value;
    }
    return out;
}

AttributeGrid apply_instruction(const AttributeGrid& reference, const Instruction& instruction) {
    return apply_edit(reference, instruction.edit);
}

namespace {

Cell random_cell(Rng& rng, std::size_t n_shapes, std::size_t n_colors) {
    Cell c;
    c.shape = static_cast<int>(rng.uniform_index(n_shapes));
    c.color = static_cast<int>(rng.uniform_index(n_colors));
    return c;
}

AttributeGrid random_grid(Rng& rng, const WorldConfig& cfg) {
    AttributeGrid g(cfg.height, cfg.width);
    for (Cell& c : g.cells) {
        c = random_cell(rng, cfg.n_shapes, cfg.n_colors);
    }
    return g;
}

} // namespace

AttributeGrid corrupt_target(const AttributeGrid& target, std::size_t edit_cell, double p_noise,
                             std::uint64_t seed, std::size_t n_shapes, std::size_t n_colors) {
    Rng rng(seed);
    AttributeGrid out = target;
    for (std::size_t k = 0; k < out.size(); ++k) {
        if (k == edit_cell) {
            continue;
        }
        if (rng.uniform() < p_noise) {
            out.cells[k] = random_cell(rng, n_shapes, n_colors);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Generation

std::vector<const TripletSample*> Dataset::split(Split s) const {
    std::vector<const TripletSample*> out;
    for (const auto& t : triplets) {
        if (t.split == s) {
            out.push_back(&t);
        }
    }
    return out;
}

std::vector<const Candidate*> Dataset::candidates_in(Split s) const {
    std::vector<const Candidate*> out;
    for (const auto& c : candidates) {
        if (c.split == s) {
            out.push_back(&c);
        }
    }
    return out;
}

namespace {

// Deduplicating candidate builder for one split.
class CandidatePool {
public:
    CandidatePool(std::vector<Candidate>& out, Split split) : out_(out), split_(split) {}

    std::size_t add(const AttributeGrid& grid) {
        auto it = ids_.find(grid);
        if (it != ids_.end()) {
            return it->second;
        }
        Candidate c;
        c.id = out_.size();
        c.split = split_;
        c.grid = grid;
        out_.push_back(std::move(c));
        ids_.emplace(grid, out_.back().id);
        return out_.back().id;
    }

    void mark_distractor(std::size_t candidate, std::size_t query) {
        out_[candidate].distractor_for.push_back(query);
    }

private:
    std::vector<Candidate>& out_;
    Split split_;
    std::map<AttributeGrid, std::size_t> ids_;
};

} // namespace

Dataset generate_dataset(const WorldConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const Vocabulary vocab(cfg);
    Rng rng(seed);

    Dataset ds;
    ds.config = cfg;
    ds.seed = seed;
    ds.triplets.reserve(cfg.n_triplets);
    for (std::size_t i = 0; i < cfg.n_triplets; ++i) {
        TripletSample t;
        t.id = i;
        t.reference = random_grid(rng, cfg);
        Edit e;
        e.row = rng.uniform_index(cfg.height);
        e.col = rng.uniform_index(cfg.width);
        e.attribute = rng.uniform_index(2) == 0 ? EditAttribute::Color : EditAttribute::Shape;
        const Cell& old = t.reference.at(e.row, e.col);
        const bool color = e.attribute == EditAttribute::Color;
        const int current = color ? old.color : old.shape;
        // Draw among the values that differ from the current one.
        int v = static_cast<int>(rng.uniform_index((color ? cfg.n_colors : cfg.n_shapes) - 1));
        e.value = v >= current ? v + 1 : v;
        t.instruction.edit = e;
        t.instruction.token_ids = vocab.render(e);
        t.pseudo_target = apply_instruction(t.reference, t.instruction);
        t.target = corrupt_target(t.pseudo_target, e.row * cfg.width + e.col, cfg.p_noise, rng.next_u64(),
                                  cfg.n_shapes, cfg.n_colors);
        t.noisy_target = t.target;
        ds.triplets.push_back(std::move(t));
    }

    const std::size_t n = cfg.n_triplets;
    const std::size_t n_train = n * 8 / 10;
    const std::size_t n_val = n / 10;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    rng.shuffle(order);
    for (std::size_t k = 0; k < n; ++k) {
        ds.triplets[order[k]].split = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Val : Split::Test);
    }

    const std::size_t n_distractors = cfg.subset_size - 1;
    const std::size_t n_attr = cfg.attribute_count();
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        CandidatePool pool(ds.candidates, s);
        for (const auto& t : ds.triplets) {
            if (t.split == s) {
                pool.add(t.reference);
                pool.add(t.target);
            }
        }
        if (s == Split::Train) {
            continue;
        }
        for (const auto& t : ds.triplets) {
            if (t.split != s) {
                continue;
            }
            // Distractors change only the edited cell; alternatives sharing
            // one attribute with the truth come first.
            const Edit& e = t.instruction.edit;
            const std::size_t k = e.row * cfg.width + e.col;
            const Cell truth = t.target.cells[k];
            std::vector<Cell> alts;
            for (std::size_t a = 0; a < n_attr; ++a) {
                const Cell c{static_cast<int>(a / cfg.n_colors), static_cast<int>(a % cfg.n_colors)};
                if (c != truth) {
                    alts.push_back(c);
                }
            }
            rng.shuffle(alts);
            std::stable_partition(alts.begin(), alts.end(),
                                  [&](const Cell& c) { return c.shape == truth.shape || c.color == truth.color; });
            std::size_t made = 0;
            for (const Cell& c : alts) {
                if (made == n_distractors) {
                    break;
                }
                AttributeGrid g = t.target;
                g.cells[k] = c;
                if (g == t.reference) {
                    continue;
                }
                ++made;
                pool.mark_distractor(pool.add(g), t.id);
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// JSON lines

namespace {

json grid_to_json(const AttributeGrid& g) {
    json a = json::array();
    for (const Cell& c : g.cells) {
        a.push_back(json::array({c.shape, c.color}));
    }
    return a;
}

json edit_to_json(const Edit& e) {
    json j;
    j["row"] = e.row;
    j["col"] = e.col;
    j["attr"] = e.attribute == EditAttribute::Color ? "color" : "shape";
    j["value"] = e.value;
    return j;
}

json header_to_json(const DatasetHeader& h) {
    json j;
    j["format"] = kWorldFormat;
    j["seed"] = h.seed;
    j["config"] = to_json(h.config);
    return j;
}

struct LineError {
    std::size_t line;
    std::string what;
};

[[noreturn]] void fail(std::size_t line, const std::string& what) {
    throw ParseError("line " + std::to_string(line) + ": " + what);
}

const json& field(const json& j, const char* key, std::size_t line) {
    auto it = j.find(key);
    if (it == j.end()) {
        fail(line, std::string("missing key '") + key + "'");
    }
    return *it;
}

template <typename T>
T field_as(const json& j, const char* key, std::size_t line) {
    try {
        return field(j, key, line).get<T>();
    } catch (const json::exception& e) {
        fail(line, std::string("bad value for '") + key + "': " + e.what());
    }
}

AttributeGrid grid_from_json(const json& a, std::size_t h, std::size_t w, const WorldConfig& cfg,
                             std::size_t line) {
    if (!a.is_array() || a.size() != h * w) {
        fail(line, "grid must be an array of " + std::to_string(h * w) + " cells");
    }
    AttributeGrid g(h, w);
    for (std::size_t k = 0; k < a.size(); ++k) {
        const json& c = a[k];
        if (!c.is_array() || c.size() != 2 || !c[0].is_number_integer() || !c[1].is_number_integer()) {
            fail(line, "cell " + std::to_string(k) + " must be [shape, color]");
        }
        g.cells[k] = Cell{c[0].get<int>(), c[1].get<int>()};
        if (g.cells[k].shape < 0 || static_cast<std::size_t>(g.cells[k].shape) >= cfg.n_shapes ||
            g.cells[k].color < 0 || static_cast<std::size_t>(g.cells[k].color) >= cfg.n_colors) {
            fail(line, "cell " + std::to_string(k) + " attribute out of range");
        }
    }
    return g;
}

DatasetHeader read_header(std::istream& in, std::size_t& line_no) {
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError("line 1: missing header");
    }
    line_no = 1;
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        fail(1, std::string("header is not JSON: ") + e.what());
    }
    if (!j.is_object() || field_as<std::string>(j, "format", 1) != kWorldFormat) {
        fail(1, "unsupported format, expected " + std::string(kWorldFormat));
    }
    DatasetHeader h;
    h.seed = field_as<std::uint64_t>(j, "seed", 1);
    try {
        h.config = world_config_from_json(field(j, "config", 1));
    } catch (const ConfigError& e) {
        fail(1, e.what());
    }
    return h;
}

json parse_line(const std::string& line, std::size_t line_no) {
    try {
        json j = json::parse(line);
        if (!j.is_object()) {
            fail(line_no, "expected a JSON object");
        }
        return j;
    } catch (const json::exception& e) {
        fail(line_no, std::string("malformed JSON: ") + e.what());
    }
}

} // namespace

void write_triplets(std::ostream& out, const DatasetHeader& header, std::span<const TripletSample> triplets) {
    out << header_to_json(header).dump() << '\n';
    for (const auto& t : triplets) {
        json j;
        j["id"] = t.id;
        j["h"] = t.reference.height;
        j["w"] = t.reference.width;
        j["ref"] = grid_to_json(t.reference);
        j["ins"] = t.instruction.token_ids;
        j["edit"] = edit_to_json(t.instruction.edit);
        j["tgt"] = grid_to_json(t.target);
        j["pseudo"] = grid_to_json(t.pseudo_target);
        j["noisy"] = grid_to_json(t.noisy_target);
        j["split"] = split_name(t.split);
        out << j.dump() << '\n';
    }
}

std::vector<TripletSample> read_triplets(std::istream& in, DatasetHeader& header) {
    std::size_t line_no = 0;
    header = read_header(in, line_no);
    const Vocabulary vocab(header.config);
    std::vector<TripletSample> out;
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const json j = parse_line(line, line_no);
        TripletSample t;
        t.id = field_as<std::size_t>(j, "id", line_no);
        const auto h = field_as<std::size_t>(j, "h", line_no);
        const auto w = field_as<std::size_t>(j, "w", line_no);
        if (h != header.config.height || w != header.config.width) {
            fail(line_no, "grid size differs from the header config");
        }
        t.reference = grid_from_json(field(j, "ref", line_no), h, w, header.config, line_no);
        t.instruction.token_ids = field_as<std::vector<int>>(j, "ins", line_no);
        try {
            t.instruction.edit = vocab.parse(t.instruction.token_ids);
        } catch (const InstructionError& e) {
            fail(line_no, e.what());
        }
        const json& ej = field(j, "edit", line_no);
        Edit e;
        e.row = field_as<std::size_t>(ej, "row", line_no);
        e.col = field_as<std::size_t>(ej, "col", line_no);
        const auto attr = field_as<std::string>(ej, "attr", line_no);
        if (attr != "color" && attr != "shape") {
            fail(line_no, "edit.attr must be color or shape");
        }
        e.attribute = attr == "color" ? EditAttribute::Color : EditAttribute::Shape;
        e.value = field_as<int>(ej, "value", line_no);
        if (!(e == t.instruction.edit)) {
            fail(line_no, "edit does not match the instruction tokens");
        }
        t.target = grid_from_json(field(j, "tgt", line_no), h, w, header.config, line_no);
        t.pseudo_target = grid_from_json(field(j, "pseudo", line_no), h, w, header.config, line_no);
        t.noisy_target = grid_from_json(field(j, "noisy", line_no), h, w, header.config, line_no);
        try {
            t.split = parse_split(field_as<std::string>(j, "split", line_no));
        } catch (const ParseError& e) {
            fail(line_no, e.what());
        }
        out.push_back(std::move(t));
    }
    return out;
}

void write_candidates(std::ostream& out, const DatasetHeader& header, std::span<const Candidate> candidates) {
    out << header_to_json(header).dump() << '\n';
    for (const auto& c : candidates) {
        json j;
        j["cid"] = c.id;
        j["split"] = split_name(c.split);
        j["grid"] = grid_to_json(c.grid);
        j["distractor_for"] = c.distractor_for;
        out << j.dump() << '\n';
    }
}

std::vector<Candidate> read_candidates(std::istream& in, DatasetHeader& header) {
    std::size_t line_no = 0;
    header = read_header(in, line_no);
    std::vector<Candidate> out;
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const json j = parse_line(line, line_no);
        Candidate c;
        c.id = field_as<std::size_t>(j, "cid", line_no);
        try {
            c.split = parse_split(field_as<std::string>(j, "split", line_no));
        } catch (const ParseError& e) {
            fail(line_no, e.what());
        }
        c.grid = grid_from_json(field(j, "grid", line_no), header.config.height, header.config.width,
                                header.config, line_no);
        c.distractor_for = field_as<std::vector<std::size_t>>(j, "distractor_for", line_no);
        out.push_back(std::move(c));
    }
    return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::ios_base::failure("cannot open " + path.string() + " for writing");
    }
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::ios_base::failure("cannot open " + path.string());
    }
    return in;
}

} // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
    auto out = open_out(path);
    write_triplets(out, DatasetHeader{dataset.config, dataset.seed}, dataset.triplets);
}

Dataset read_dataset(const std::filesystem::path& path) {
    auto in = open_in(path);
    DatasetHeader h;
    Dataset ds;
    ds.triplets = read_triplets(in, h);
    ds.config = h.config;
    ds.seed = h.seed;
    return ds;
}

void write_dataset_dir(const std::filesystem::path& dir, const Dataset& dataset) {
    std::filesystem::create_directories(dir);
    const DatasetHeader header{dataset.config, dataset.seed};
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        std::vector<TripletSample> part;
        for (const auto& t : dataset.triplets) {
            if (t.split == s) {
                part.push_back(t);
            }
        }
        auto out = open_out(dir / (std::string(split_name(s)) + ".jsonl"));
        write_triplets(out, header, part);
    }
    auto out = open_out(dir / "candidates.jsonl");
    write_candidates(out, header, dataset.candidates);
}

Dataset read_dataset_dir(const std::filesystem::path& dir) {
    Dataset ds;
    bool first = true;
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
        auto in = open_in(dir / (std::string(split_name(s)) + ".jsonl"));
        DatasetHeader h;
        auto part = read_triplets(in, h);
        if (first) {
            ds.config = h.config;
            ds.seed = h.seed;
            first = false;
        } else if (!(h.config == ds.config) || h.seed != ds.seed) {
            throw ParseError(std::string(split_name(s)) + ".jsonl: header differs from train.jsonl");
        }
        for (auto& t : part) {
            if (t.split != s) {
                throw ParseError(std::string(split_name(s)) + ".jsonl: triplet " + std::to_string(t.id) +
                                 " belongs to split " + std::string(split_name(t.split)));
            }
            ds.triplets.push_back(std::move(t));
        }
    }
    std::sort(ds.triplets.begin(), ds.triplets.end(),
              [](const TripletSample& a, const TripletSample& b) { return a.id < b.id; });
    auto in = open_in(dir / "candidates.jsonl");
    DatasetHeader h;
    ds.candidates = read_candidates(in, h);
    return ds;
}

} // namespace tmcir
