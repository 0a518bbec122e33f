#include "tmcir/training.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>

#include "tmcir/errors.hpp"
#include "tmcir/losses.hpp"
#include "tmcir/rng.hpp"
#include "tmcir/token_fusion.hpp"

namespace tmcir {

using json = nlohmann::ordered_json;

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kEncoderInitTag = 1;
constexpr std::uint64_t kProjectionInitTag = 2;
constexpr std::uint64_t kAlignShuffleTag = 11;
constexpr std::uint64_t kFuseShuffleTag = 12;

} // namespace

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    if (total_steps == 0) {
        return base_lr;
    }
    if (step >= total_steps) {
        return 0.0;
    }
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---------------------------------------------------------------------------
// AdamW

AdamW::AdamW(const ParameterStore& store, std::vector<std::string> trainable, AdamWConfig cfg) : cfg_(cfg) {
    state_.names = std::move(trainable);
    for (const auto& name : state_.names) {
        const DenseArray& p = store.value(name);
        state_.m.emplace_back(p.rows(), p.cols());
        state_.v.emplace_back(p.rows(), p.cols());
    }
}

void AdamW::step(ParameterStore& store, double lr) {
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t k = 0; k < state_.names.size(); ++k) {
        const std::string& name = state_.names[k];
        DenseArray& p = store.value(name);
        const DenseArray& g = store.grad(name);
        DenseArray& m = state_.m[k];
        DenseArray& v = state_.v[k];
        const double wd = store.decays(name) ? cfg_.weight_decay : 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p[i]);
        }
    }
}

void AdamW::restore(OptimizerState state) {
    if (state.names != state_.names || state.m.size() != state_.m.size() || state.v.size() != state_.v.size()) {
        throw ShapeError("optimizer state covers a different parameter set");
    }
    for (std::size_t k = 0; k < state_.m.size(); ++k) {
        if (!state.m[k].same_shape(state_.m[k]) || !state.v[k].same_shape(state_.v[k])) {
            throw ShapeError("optimizer moments for " + state_.names[k] + " have shape " +
                             state.m[k].shape_string() + ", expected " + state_.m[k].shape_string());
        }
    }
    state_ = std::move(state);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'T', 'M', 'C', '1'};
const std::string kMomentPrefix1 = "adam.m/";
const std::string kMomentPrefix2 = "adam.v/";
const std::string kStepName = "meta/step";
const std::string kConfigName = "meta/config_json";

void put_u32(std::string& out, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((x >> (8 * i)) & 0xffu));
    }
}

void put_f64(std::string& out, double x) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &x, sizeof bits);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
    }
}

void put_array(std::string& out, const std::string& name, const DenseArray& a) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(a.rows()));
    put_u32(out, static_cast<std::uint32_t>(a.cols()));
    for (double x : a.data()) {
        put_f64(out, x);
    }
}

std::uint32_t crc32_of(std::string_view bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    bool done() const { return pos_ == bytes_.size(); }

    std::uint32_t u32() {
        need(4);
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i) {
            x |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return x;
    }

    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        double x = 0.0;
        std::memcpy(&x, &bits, sizeof x);
        return x;
    }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
        }
    }

    std::string_view bytes_;
    std::size_t pos_ = 0;
};

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

} // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    for (const auto& name : ckpt.params.names()) {
        put_array(out, name, ckpt.params.value(name));
    }
    const OptimizerState& opt = ckpt.optimizer;
    for (std::size_t k = 0; k < opt.names.size(); ++k) {
        put_array(out, kMomentPrefix1 + opt.names[k], opt.m[k]);
        put_array(out, kMomentPrefix2 + opt.names[k], opt.v[k]);
    }
    put_array(out, kStepName, DenseArray(1, 1, static_cast<double>(opt.step)));
    DenseArray config(1, ckpt.config_json.size());
    for (std::size_t i = 0; i < ckpt.config_json.size(); ++i) {
        config[i] = static_cast<double>(static_cast<unsigned char>(ckpt.config_json[i]));
    }
    put_array(out, kConfigName, config);
    put_u32(out, crc32_of(out));
    return out;
}

std::uint32_t checkpoint_checksum(std::string_view bytes) {
    if (bytes.size() < 4) {
        throw CheckpointError("checkpoint shorter than its checksum");
    }
    return Reader(bytes.substr(bytes.size() - 4)).u32();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
    if (bytes.size() < 12 || bytes.substr(0, 4) != std::string_view(kMagic, 4)) {
        throw CheckpointError("not a checkpoint: bad magic");
    }
    const std::string_view body = bytes.substr(0, bytes.size() - 4);
    if (crc32_of(body) != checkpoint_checksum(bytes)) {
        throw CheckpointError("checkpoint checksum mismatch");
    }
    Reader r(body);
    r.take(4);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    bool have_step = false;
    while (!r.done()) {
        const std::uint32_t len = r.u32();
        std::string name(r.take(len));
        const std::size_t rows = r.u32();
        const std::size_t cols = r.u32();
        DenseArray a(rows, cols);
        for (double& x : a.data()) {
            x = r.f64();
        }
        if (starts_with(name, kMomentPrefix1)) {
            ckpt.optimizer.names.push_back(name.substr(kMomentPrefix1.size()));
            ckpt.optimizer.m.push_back(std::move(a));
        } else if (starts_with(name, kMomentPrefix2)) {
            const std::string base = name.substr(kMomentPrefix2.size());
            if (ckpt.optimizer.names.size() != ckpt.optimizer.v.size() + 1 ||
                ckpt.optimizer.names.back() != base) {
                throw CheckpointError("second moment " + base + " out of order");
            }
            ckpt.optimizer.v.push_back(std::move(a));
        } else if (name == kStepName) {
            ckpt.optimizer.step = static_cast<std::size_t>(a[0]);
            have_step = true;
        } else if (name == kConfigName) {
            ckpt.config_json.reserve(a.size());
            for (double x : a.data()) {
                ckpt.config_json.push_back(static_cast<char>(static_cast<unsigned char>(x)));
            }
        } else {
            if (ckpt.params.contains(name)) {
                throw CheckpointError("duplicate array " + name);
            }
            const bool decay = name != param::kLogTemp;
            ckpt.params.add(std::move(name), std::move(a), decay);
        }
    }
    if (!have_step || ckpt.optimizer.m.size() != ckpt.optimizer.v.size()) {
        throw CheckpointError("checkpoint is missing optimizer metadata");
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::ios_base::failure("cannot open " + tmp.string() + " for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            throw std::ios_base::failure("write to " + tmp.string() + " failed");
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::ios_base::failure("cannot open checkpoint " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize_checkpoint(ss.str());
}

void require_compatible(const ParameterStore& expected, const ParameterStore& loaded) {
    std::string problems;
    for (const auto& name : expected.names()) {
        if (!loaded.contains(name)) {
            problems += " " + name + " (missing)";
        } else if (!loaded.value(name).same_shape(expected.value(name))) {
            problems += " " + name + " (" + loaded.value(name).shape_string() + " vs expected " +
                        expected.value(name).shape_string() + ")";
        }
    }
    if (!problems.empty()) {
        throw ShapeError("checkpoint does not fit the configuration:" + problems);
    }
}

// ---------------------------------------------------------------------------
// Training loops

ParameterStore initial_parameters(const RunConfig& cfg, bool with_projection) {
    ParameterStore store;
    const EncoderShape shape = EncoderShape::for_world(cfg.world, cfg.fusion.dim);
    init_encoders(store, shape, derive_seed(cfg.train_seed, kEncoderInitTag));
    store.add(std::string(param::kLogTemp), DenseArray(1, 1, std::log(cfg.loss.temperature)), false);
    if (with_projection) {
        init_projection(store, cfg.fusion.dim, derive_seed(cfg.train_seed, kProjectionInitTag));
    }
    return store;
}

void write_step_log(std::ostream& out, const StepLog& e) {
    json j;
    j["step"] = e.step;
    j["stage"] = e.stage;
    j["loss"] = e.loss;
    j["lr"] = e.lr;
    j["temp"] = e.temp;
    out << j.dump() << '\n';
}

namespace {

// A batch of one is not degenerate: its loss is exactly zero by construction.
bool rows_identical(const DenseArray& x) {
    if (x.rows() < 2) {
        return false;
    }
    for (std::size_t r = 1; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            if (x(r, c) != x(0, c)) {
                return false;
            }
        }
    }
    return true;
}

const AttributeGrid& stage1_image(const TripletSample& t, Supervision s) {
    return s == Supervision::Pseudo ? t.pseudo_target : t.noisy_target;
}

struct StageSpec {
    int stage = 1;
    std::size_t epochs = 0;
    std::size_t batch_size = 2;
    double lr = 0.0;
    double weight_decay = 0.0;
    std::size_t checkpoint_every = 0;
    std::uint64_t shuffle_seed = 0;
};

using BatchLoss = std::function<Var(Tape&, ParameterStore&, std::span<const TripletSample* const>)>;
using TempReader = std::function<double(const ParameterStore&)>;

TrainResult run_stage(const Dataset& data, ParameterStore store, const std::vector<std::string>& trainable,
                      const StageSpec& spec, const BatchLoss& batch_loss, const TempReader& temp,
                      const std::string& config_json, const TrainHooks& hooks) {
    const auto train = data.split(Split::Train);
    if (train.empty()) {
        throw EmptyInputError("training split is empty");
    }
    AdamW opt(store, trainable, AdamWConfig{0.9, 0.999, 1e-8, spec.weight_decay});
    const std::size_t per_epoch = train.size() / spec.batch_size;
    const std::size_t total = per_epoch * spec.epochs;
    Rng rng(spec.shuffle_seed);

    TrainResult result;
    auto snapshot = [&]() { return Checkpoint{store, opt.state(), config_json}; };

    std::size_t step = 0;
    std::vector<std::size_t> order(train.size());
    std::vector<const TripletSample*> batch(spec.batch_size);
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        rng.shuffle(order);
        for (std::size_t b = 0; b < per_epoch; ++b) {
            for (std::size_t k = 0; k < spec.batch_size; ++k) {
                batch[k] = train[order[b * spec.batch_size + k]];
            }
            const double lr = cosine_lr(step, total, spec.lr);
            const auto abort = [&](const std::string& why) {
                return TrainingAbort("stage " + std::to_string(spec.stage) + " step " + std::to_string(step) +
                                     " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                                     "): " + why + ", lr " + std::to_string(lr) + ", temp " +
                                     std::to_string(temp(store)));
            };
            Tape tape;
            Var loss;
            // Diverged parameters surface as degenerate norms or off-sphere rows
            // before the loss itself goes non-finite.
            try {
                loss = batch_loss(tape, store, batch);
            } catch (const DegenerateInputError& e) {
                throw abort(e.what());
            } catch (const ContractViolation& e) {
                throw abort(e.what());
            }
            if (!loss.valid()) {
                ++result.skipped_steps;
                ++step;
                continue;
            }
            const double value = loss.scalar();
            if (!std::isfinite(value)) {
                throw abort("non-finite loss " + std::to_string(value));
            }
            store.zero_grad();
            tape.backward(loss);
            opt.step(store, lr);
            StepLog entry{step, spec.stage, value, lr, temp(store)};
            if (hooks.on_step) {
                hooks.on_step(entry);
            }
            result.log.push_back(entry);
            ++step;
            if (spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0 && hooks.on_checkpoint) {
                hooks.on_checkpoint(snapshot());
            }
        }
    }
    result.checkpoint = snapshot();
    return result;
}

std::vector<std::string> encoder_names() {
    return {std::string(param::kCellEmbedding), std::string(param::kVisualMixWeight),
            std::string(param::kVisualMixBias),  std::string(param::kVocabEmbedding),
            std::string(param::kTextMixWeight),  std::string(param::kTextMixBias)};
}

} // namespace

Var alignment_batch_loss(Tape& tape, ParameterStore& store, const EncoderShape& shape,
                         std::span<const TripletSample* const> batch, Supervision supervision) {
    const Encoders enc(store, shape);
    std::vector<Var> text;
    std::vector<Var> image;
    for (const TripletSample* t : batch) {
        text.push_back(enc.pooled_text(tape, t->instruction.token_ids));
        image.push_back(enc.pooled_visual(tape, stage1_image(*t, supervision)));
    }
    Var q = ad::concat_rows(text);
    Var k = ad::concat_rows(image);
    if (rows_identical(q.value()) || rows_identical(k.value())) {
        return {};
    }
    LossConfig lc;
    lc.learnable = true;
    return infonce(q, k, temperature_node(tape, store, lc));
}

Var fusion_batch_loss(Tape& tape, ParameterStore& store, const EncoderShape& shape,
                      std::span<const TripletSample* const> batch, const RunConfig& cfg) {
    const Encoders enc(store, shape);
    std::vector<Var> queries;
    std::vector<Var> targets;
    for (const TripletSample* t : batch) {
        const TokenSequence v = enc.encode_visual(tape, t->reference);
        const TokenSequence m = enc.encode_text(tape, t->instruction.token_ids);
        queries.push_back(cfg.fuse.use_fusion ? compose_query(tape, store, v, m, cfg.fusion)
                                              : compose_query_no_fusion(tape, store, v, m));
        targets.push_back(enc.pooled_visual(tape, t->target));
    }
    return infonce(ad::concat_rows(queries), ad::concat_rows(targets),
                   tape.constant(DenseArray(1, 1, cfg.loss.temperature)), cfg.loss.printed_denominator);
}

TrainResult train_alignment(const Dataset& data, const RunConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    const EncoderShape shape = EncoderShape::for_world(data.config, cfg.fusion.dim);
    ParameterStore store = initial_parameters(cfg, false);
    std::vector<std::string> trainable = encoder_names();
    trainable.emplace_back(param::kLogTemp);
    StageSpec spec{1,      cfg.align.epochs, cfg.align.batch_size, cfg.align.lr, cfg.align.weight_decay,
                   cfg.align.checkpoint_every, derive_seed(cfg.train_seed, kAlignShuffleTag)};
    const Supervision sup = cfg.align.supervision;
    return run_stage(
        data, std::move(store), trainable, spec,
        [&](Tape& tape, ParameterStore& s, std::span<const TripletSample* const> batch) {
            return alignment_batch_loss(tape, s, shape, batch, sup);
        },
        [](const ParameterStore& s) { return std::exp(s.value(param::kLogTemp)[0]); }, to_json(cfg).dump(),
        hooks);
}

TrainResult train_fusion(const Dataset& data, const std::optional<Checkpoint>& init, const RunConfig& cfg,
                         const TrainHooks& hooks) {
    cfg.validate();
    const EncoderShape shape = EncoderShape::for_world(data.config, cfg.fusion.dim);
    ParameterStore store;
    if (init) {
        require_compatible(initial_parameters(cfg, false), init->params);
        store = init->params;
        if (!store.contains(param::kProjectionWeight)) {
            init_projection(store, cfg.fusion.dim, derive_seed(cfg.train_seed, kProjectionInitTag));
        }
    } else {
        store = initial_parameters(cfg, true);
    }
    std::vector<std::string> trainable;
    if (cfg.fuse.train_encoders) {
        trainable = encoder_names();
    }
    trainable.emplace_back(param::kProjectionWeight);
    trainable.emplace_back(param::kProjectionBias);
    StageSpec spec{2,      cfg.fuse.epochs, cfg.fuse.batch_size, cfg.fuse.lr, cfg.fuse.weight_decay,
                   cfg.fuse.checkpoint_every, derive_seed(cfg.train_seed, kFuseShuffleTag)};
    const double temp = cfg.loss.temperature;
    return run_stage(
        data, std::move(store), trainable, spec,
        [&](Tape& tape, ParameterStore& s, std::span<const TripletSample* const> batch) {
            return fusion_batch_loss(tape, s, shape, batch, cfg);
        },
        [temp](const ParameterStore&) { return temp; }, to_json(cfg).dump(), hooks);
}

} // namespace tmcir
