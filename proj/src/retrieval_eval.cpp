#include "tmcir/retrieval_eval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <thread>

#include "tmcir/encoders.hpp"
#include "tmcir/errors.hpp"
#include "tmcir/token_fusion.hpp"

namespace tmcir {

using json = nlohmann::ordered_json;

std::optional<std::size_t> CandidateIndex::find(const AttributeGrid& grid) const {
    auto it = rows_by_grid.find(grid);
    if (it == rows_by_grid.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::size_t eval_threads() {
    if (const char* env = std::getenv("TMCIR_THREADS")) {
        char* end = nullptr;
        const long n = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && n > 0) {
            return static_cast<std::size_t>(n);
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

// Runs fn(i) for i in [0, n) over a fixed chunking; each i writes only its own slot.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
    const std::size_t threads = std::min(eval_threads(), std::max<std::size_t>(n, 1));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

} // namespace

CandidateIndex build_index(std::span<const Candidate* const> candidates, ParameterStore& params,
                           const EncoderShape& shape) {
    CandidateIndex index;
    std::vector<const Candidate*> unique;
    for (const Candidate* c : candidates) {
        if (index.rows_by_grid.emplace(c->grid, unique.size()).second) {
            unique.push_back(c);
            index.ids.push_back(c->id);
        }
    }
    index.embeddings = DenseArray(unique.size(), shape.d);
    const Encoders enc(params, shape);
    parallel_for(unique.size(), [&](std::size_t r) {
        Tape tape;
        const DenseArray& f = enc.pooled_visual(tape, unique[r]->grid).value();
        std::copy(f.data().begin(), f.data().end(), index.embeddings.row(r).begin());
    });
    return index;
}

std::vector<std::size_t> rank_query(std::span<const double> query, const CandidateIndex& index,
                                    std::span<const std::size_t> exclude) {
    if (query.size() != index.embeddings.cols()) {
        throw ShapeError("query width " + std::to_string(query.size()) + " vs index width " +
                         std::to_string(index.embeddings.cols()));
    }
    std::vector<double> score(index.size());
    for (std::size_t r = 0; r < index.size(); ++r) {
        score[r] = dot(query, index.embeddings.row(r));
    }
    std::vector<std::size_t> order;
    order.reserve(index.size());
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (std::find(exclude.begin(), exclude.end(), r) == exclude.end()) {
            order.push_back(r);
        }
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (score[a] != score[b]) {
            return score[a] > score[b];
        }
        return index.ids[a] < index.ids[b];
    });
    return order;
}

namespace {

std::size_t rank_of(const std::vector<std::size_t>& ranking, std::size_t truth, std::size_t query) {
    auto it = std::find(ranking.begin(), ranking.end(), truth);
    if (it == ranking.end()) {
        throw EvaluationError("query " + std::to_string(query) + ": truth missing from its ranking");
    }
    return static_cast<std::size_t>(it - ranking.begin()) + 1;
}

} // namespace

double recall_at_k(std::span<const std::vector<std::size_t>> rankings, std::span<const std::size_t> truths,
                   std::size_t k) {
    if (k == 0) {
        throw ContractViolation("recall cut-off must be at least 1");
    }
    if (rankings.size() != truths.size()) {
        throw ShapeError("rankings and truths differ in count");
    }
    if (rankings.empty()) {
        throw EmptyInputError("recall over zero queries");
    }
    std::size_t hits = 0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        hits += rank_of(rankings[q], truths[q], q) <= k ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(rankings.size());
}

double subset_recall_at_k(std::span<const std::vector<std::size_t>> rankings,
                          std::span<const std::vector<std::size_t>> subsets, std::span<const std::size_t> truths,
                          std::size_t k) {
    if (rankings.size() != subsets.size() || rankings.size() != truths.size()) {
        throw ShapeError("rankings, subsets and truths differ in count");
    }
    std::vector<std::vector<std::size_t>> restricted(rankings.size());
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        const auto& subset = subsets[q];
        if (std::find(subset.begin(), subset.end(), truths[q]) == subset.end()) {
            throw EvaluationError("query " + std::to_string(q) + ": truth is not in its subset");
        }
        for (std::size_t r : rankings[q]) {
            if (std::find(subset.begin(), subset.end(), r) != subset.end()) {
                restricted[q].push_back(r);
            }
        }
    }
    return recall_at_k(restricted, truths, k);
}

json EvalReport::to_json() const {
    json j;
    j["config"] = config;
    j["seed"] = seed;
    json r = json::object();
    for (auto [k, v] : recall) {
        r[std::to_string(k)] = v;
    }
    j["recall"] = r;
    json s = json::object();
    for (auto [k, v] : subset_recall) {
        s[std::to_string(k)] = v;
    }
    j["subset_recall"] = s;
    if (wall_ms) {
        j["wall_ms"] = *wall_ms;
    }
    return j;
}

DenseArray query_embedding(ParameterStore& params, const EncoderShape& shape, const TripletSample& t,
                           const RunConfig& cfg) {
    Tape tape;
    const Encoders enc(params, shape);
    const TokenSequence v = enc.encode_visual(tape, t.reference);
    const TokenSequence m = enc.encode_text(tape, t.instruction.token_ids);
    Var q = cfg.fuse.use_fusion ? compose_query(tape, params, v, m, cfg.fusion)
                                : compose_query_no_fusion(tape, params, v, m);
    return q.value();
}

EvalReport evaluate(const Dataset& data, ParameterStore& params, const RunConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    const EncoderShape shape = EncoderShape::for_world(data.config, cfg.fusion.dim);
    require_compatible(initial_parameters(cfg, true), params);

    const Split split = cfg.eval.split;
    const auto queries = data.split(split);
    if (queries.empty()) {
        throw EvaluationError(std::string("split ") + std::string(split_name(split)) + " has no queries");
    }
    const auto gallery = data.candidates_in(split);
    const CandidateIndex index = build_index(gallery, params, shape);

    std::map<std::size_t, std::vector<std::size_t>> distractors;
    for (const Candidate* c : gallery) {
        for (std::size_t q : c->distractor_for) {
            if (auto row = index.find(c->grid)) {
                distractors[q].push_back(*row);
            }
        }
    }

    std::vector<std::size_t> truths(queries.size());
    std::vector<std::size_t> refs(queries.size());
    std::vector<std::vector<std::size_t>> subsets(queries.size());
    for (std::size_t q = 0; q < queries.size(); ++q) {
        const TripletSample& t = *queries[q];
        const auto truth = index.find(t.target);
        const auto ref = index.find(t.reference);
        if (!truth || !ref) {
            throw EvaluationError("query " + std::to_string(t.id) + ": reference or target missing from the " +
                                  std::string(split_name(split)) + " gallery");
        }
        truths[q] = *truth;
        refs[q] = *ref;
        subsets[q] = {*truth};
        for (std::size_t r : distractors[t.id]) {
            if (std::find(subsets[q].begin(), subsets[q].end(), r) == subsets[q].end()) {
                subsets[q].push_back(r);
            }
        }
    }

    std::vector<std::vector<std::size_t>> rankings(queries.size());
    parallel_for(queries.size(), [&](std::size_t q) {
        const DenseArray e = query_embedding(params, shape, *queries[q], cfg);
        const std::size_t exclude[] = {refs[q]};
        rankings[q] = rank_query(e.row(0), index, exclude);
    });

    EvalReport report;
    report.config = to_json(cfg);
    report.seed = cfg.train_seed;
    report.queries = queries.size();
    report.gallery = index.size();
    for (std::size_t k : cfg.eval.ks) {
        report.recall[k] = recall_at_k(rankings, truths, k);
    }
    for (std::size_t k : cfg.eval.subset_ks) {
        report.subset_recall[k] = subset_recall_at_k(rankings, subsets, truths, k);
    }
    report.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return report;
}

// ---------------------------------------------------------------------------
// Ablations

std::string_view ablation_name(AblationKind k) {
    switch (k) {
    case AblationKind::ThresholdSweep:
        return "threshold_sweep";
    case AblationKind::NoFusion:
        return "no_fusion";
    case AblationKind::PseudoVsReal:
        return "pseudo_vs_real";
    case AblationKind::PretrainedVsFinetuned:
        return "pretrained_vs_finetuned";
    }
    return "threshold_sweep";
}

AblationKind parse_ablation(std::string_view name) {
    for (AblationKind k : {AblationKind::ThresholdSweep, AblationKind::NoFusion, AblationKind::PseudoVsReal,
                           AblationKind::PretrainedVsFinetuned}) {
        if (ablation_name(k) == name) {
            return k;
        }
    }
    throw ConfigError("config: unknown ablation kind '" + std::string(name) + "'");
}

std::vector<AblationVariant> ablation_variants(AblationKind kind, const RunConfig& base) {
    std::vector<AblationVariant> out;
    switch (kind) {
    case AblationKind::ThresholdSweep:
        for (double tau : kSweepThresholds) {
            RunConfig c = base;
            c.fusion.threshold = tau;
            char name[32];
            std::snprintf(name, sizeof name, "tau=%.1f", tau);
            out.push_back({name, c, false});
        }
        break;
    case AblationKind::NoFusion: {
        RunConfig full = base;
        full.fuse.use_fusion = true;
        RunConfig plain = base;
        plain.fuse.use_fusion = false;
        out.push_back({"full", full, false});
        out.push_back({"no_fusion", plain, false});
        break;
    }
    case AblationKind::PseudoVsReal: {
        RunConfig pseudo = base;
        pseudo.align.supervision = Supervision::Pseudo;
        RunConfig real = base;
        real.align.supervision = Supervision::Real;
        out.push_back({"pseudo", pseudo, false});
        out.push_back({"real", real, false});
        break;
    }
    case AblationKind::PretrainedVsFinetuned:
        out.push_back({"finetuned", base, false});
        out.push_back({"pretrained", base, true});
        break;
    }
    return out;
}

namespace {

std::string stage1_key(const RunConfig& c) {
    json j;
    j["train_seed"] = c.train_seed;
    j["world"] = to_json(c.world);
    j["align"] = to_json(c)["align"];
    j["dim"] = c.fusion.dim;
    j["temperature"] = c.loss.temperature;
    return j.dump();
}

} // namespace

std::vector<AblationOutcome> run_ablation(AblationKind kind, const RunConfig& base, const Dataset& data,
                                          const std::function<void(const std::string&)>& progress) {
    std::map<std::string, Checkpoint> stage1;
    std::vector<AblationOutcome> outcomes;
    for (auto& variant : ablation_variants(kind, base)) {
        AblationOutcome outcome{variant, std::nullopt, {}};
        try {
            std::optional<Checkpoint> init;
            if (!variant.from_scratch) {
                const std::string key = stage1_key(variant.config);
                auto it = stage1.find(key);
                if (it == stage1.end()) {
                    if (progress) {
                        progress(variant.name + ": stage 1");
                    }
                    it = stage1.emplace(key, train_alignment(data, variant.config).checkpoint).first;
                }
                init = it->second;
            }
            if (progress) {
                progress(variant.name + ": stage 2");
            }
            TrainResult trained = train_fusion(data, init, variant.config);
            outcome.report = evaluate(data, trained.checkpoint.params, variant.config);
            outcome.report->wall_ms.reset();
        } catch (const std::exception& e) {
            outcome.error = e.what();
        }
        outcomes.push_back(std::move(outcome));
    }
    return outcomes;
}

std::string ablation_csv(std::span<const AblationOutcome> outcomes) {
    std::ostringstream out;
    out << "variant,tau,R@1,R@5,R@10,R@50,Rs@1,Rs@2,Rs@3\n";
    auto cell = [](const std::map<std::size_t, double>& m, std::size_t k) {
        auto it = m.find(k);
        if (it == m.end()) {
            return std::string();
        }
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", it->second);
        return std::string(buf);
    };
    for (const auto& o : outcomes) {
        if (!o.report) {
            continue;
        }
        char tau[32];
        std::snprintf(tau, sizeof tau, "%.2f", o.variant.config.fusion.threshold);
        out << o.variant.name << ',' << tau;
        for (std::size_t k : {1, 5, 10, 50}) {
            out << ',' << cell(o.report->recall, k);
        }
        for (std::size_t k : {1, 2, 3}) {
            out << ',' << cell(o.report->subset_recall, k);
        }
        out << '\n';
    }
    return out.str();
}

} // namespace tmcir
