#pragma once

// Desk-scale composed-retrieval world: attribute grids stand in for images,
// templated edit instructions for relative captions, and a deterministic edit
// oracle for the diffusion model that renders pseudo targets.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace tmcir {

struct Cell {
    int shape = 0;
    int color = 0;
    friend auto operator<=>(const Cell&, const Cell&) = default;
};

struct AttributeGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    /// Row-major, height * width entries.
    std::vector<Cell> cells;

    AttributeGrid() = default;
    AttributeGrid(std::size_t h, std::size_t w) : height(h), width(w), cells(h * w) {}

    std::size_t size() const noexcept { return cells.size(); }
    Cell& at(std::size_t r, std::size_t c) { return cells[r * width + c]; }
    const Cell& at(std::size_t r, std::size_t c) const { return cells[r * width + c]; }

    friend auto operator<=>(const AttributeGrid&, const AttributeGrid&) = default;
};

enum class EditAttribute { Color, Shape };

struct Edit {
    std::size_t row = 0;
    std::size_t col = 0;
    EditAttribute attribute = EditAttribute::Color;
    int value = 0;
    friend bool operator==(const Edit&, const Edit&) = default;
};

struct Instruction {
    std::vector<int> token_ids;
    Edit edit;
    friend bool operator==(const Instruction&, const Instruction&) = default;
};

enum class Split { Train, Val, Test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct WorldConfig {
    std::size_t height = 4;
    std::size_t width = 4;
    std::size_t n_shapes = 5;
    std::size_t n_colors = 6;
    std::size_t n_triplets = 2560;
    double p_noise = 0.3;
    /// Truth plus distractors per evaluation query.
    std::size_t subset_size = 6;

    std::size_t cells() const noexcept { return height * width; }
    std::size_t attribute_count() const noexcept { return n_shapes * n_colors; }
    /// Throws ConfigError when the world cannot be generated.
    void validate() const;

    friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

nlohmann::ordered_json to_json(const WorldConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
WorldConfig world_config_from_json(const nlohmann::ordered_json& j);

/// Closed instruction vocabulary:
///   set | color | shape | row_<r> | col_<c> | shape_<k> | color_<k>
/// An edit renders as [set, row_r, col_c, color|shape, value].
class Vocabulary {
public:
    static constexpr std::size_t kMaxSize = 64;
    static constexpr std::size_t kInstructionLength = 5;

    explicit Vocabulary(const WorldConfig& cfg);

    std::size_t size() const noexcept { return size_; }
    std::vector<int> render(const Edit& edit) const;
    /// Throws InstructionError on anything render() cannot produce.
    Edit parse(std::span<const int> token_ids) const;
    std::string token_name(int id) const;

private:
    int row_base() const { return 3; }
    int col_base() const { return 3 + static_cast<int>(height_); }
    int shape_base() const { return col_base() + static_cast<int>(width_); }
    int color_base() const { return shape_base() + static_cast<int>(n_shapes_); }

    std::size_t height_;
    std::size_t width_;
    std::size_t n_shapes_;
    std::size_t n_colors_;
    std::size_t size_;
};

struct TripletSample {
    std::size_t id = 0;
    AttributeGrid reference;
    Instruction instruction;
    AttributeGrid target;
    AttributeGrid pseudo_target;
    /// "Real" supervision image: the retrieval target with its nuisance cells.
    AttributeGrid noisy_target;
    Split split = Split::Train;

    friend bool operator==(const TripletSample&, const TripletSample&) = default;
};

struct Candidate {
    std::size_t id = 0;
    Split split = Split::Train;
    AttributeGrid grid;
    /// Triplet ids whose evaluation subset holds this grid as a distractor.
    std::vector<std::size_t> distractor_for;

    friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct Dataset {
    WorldConfig config;
    std::uint64_t seed = 0;
    std::vector<TripletSample> triplets;
    std::vector<Candidate> candidates;

    std::vector<const TripletSample*> split(Split s) const;
    std::vector<const Candidate*> candidates_in(Split s) const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// The pseudo-target oracle: changes exactly the edited attribute of one cell.
AttributeGrid apply_instruction(const AttributeGrid& reference, const Instruction& instruction);
AttributeGrid apply_edit(const AttributeGrid& reference, const Edit& edit);

/// Re-draws every cell other than `edit_cell` (row-major index) with
/// probability `p_noise`, deterministically under `seed`.
AttributeGrid corrupt_target(const AttributeGrid& target, std::size_t edit_cell, double p_noise,
                             std::uint64_t seed, std::size_t n_shapes, std::size_t n_colors);

/// Triplets split 8:1:1, candidate pool per split (references and targets,
/// deduplicated). Each validation and test query adds subset_size - 1
/// distractors: its target with the edited cell set to another attribute
/// pair, never equal to the query's reference.
Dataset generate_dataset(const WorldConfig& cfg, std::uint64_t seed);

// JSON-lines persistence. Every file starts with the header object
// {"format":"tmcir-world/1","seed":...,"config":{...}}.
inline constexpr std::string_view kWorldFormat = "tmcir-world/1";

struct DatasetHeader {
    WorldConfig config;
    std::uint64_t seed = 0;
};

void write_triplets(std::ostream& out, const DatasetHeader& header, std::span<const TripletSample> triplets);
std::vector<TripletSample> read_triplets(std::istream& in, DatasetHeader& header);
void write_candidates(std::ostream& out, const DatasetHeader& header, std::span<const Candidate> candidates);
std::vector<Candidate> read_candidates(std::istream& in, DatasetHeader& header);

/// Single file holding the header and every triplet; candidates are rebuilt
/// on read only by the directory form.
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

/// train.jsonl, val.jsonl, test.jsonl and candidates.jsonl under `dir`.
void write_dataset_dir(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset_dir(const std::filesystem::path& dir);

} // namespace tmcir
