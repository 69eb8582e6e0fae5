#include "diffattack/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "diffattack/errors.hpp"
#include "diffattack/training.hpp"

namespace diffattack {

std::vector<Tensor*> DecoderParams::tensors() {
    auto out = score_net.tensors();
    out.push_back(&speaker_table);
    return out;
}

std::vector<const Tensor*> DecoderParams::tensors() const {
    auto out = score_net.tensors();
    out.push_back(&speaker_table);
    return out;
}

void DecoderParams::validate() const {
    score_net.validate();
    const std::size_t d = feature_dim();
    if (speaker_table.rank() != 2) throw ShapeError("speaker table must be a matrix");
    if (score_net.input_dim() != 2 * d + embedding_dim() + 2) {
        throw ShapeError("score net input " + std::to_string(score_net.input_dim()) + " does not match 2*" +
                         std::to_string(d) + " + " + std::to_string(embedding_dim()) + " + 2");
    }
}

DecoderParams init_decoder(std::size_t feature_dim, std::size_t n_speakers, std::size_t embedding_dim,
                           std::span<const std::size_t> hidden, Rng& rng) {
    std::vector<std::size_t> sizes{2 * feature_dim + embedding_dim + 2};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(feature_dim);
    DecoderParams p;
    p.score_net = init_mlp(sizes, rng);
    p.speaker_table = rng.normal_tensor({n_speakers, embedding_dim}, 0.1);
    return p;
}

namespace {

struct TimeFeatures {
    Tensor columns;       // [n, 2]: t, lambda_t
    Tensor inv_sqrt_lam;  // [n]
};

TimeFeatures time_features(std::span<const double> t, const NoiseSchedule& sched) {
    TimeFeatures f{Tensor({t.size(), 2}), Tensor({t.size()})};
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double lam = lambda_at(sched, t[i]);
        if (!(lam > 0.0)) throw ContractError("score_forward at t=" + std::to_string(t[i]) + " has lambda_t = 0");
        f.columns(i, 0) = t[i];
        f.columns(i, 1) = lam;
        f.inv_sqrt_lam[i] = 1.0 / std::sqrt(lam);
    }
    return f;
}

void check_inputs(const DecoderParams& params, const Tensor& x_t, const Tensor& xbar0,
                  std::span<const std::size_t> speakers, std::span<const double> t) {
    require_same_shape(x_t, xbar0, "score_forward");
    if (x_t.cols() != params.feature_dim()) throw ShapeError("score_forward: feature width mismatch");
    if (speakers.size() != x_t.rows() || t.size() != x_t.rows()) {
        throw ShapeError("score_forward: need one speaker id and one time per row");
    }
    for (auto s : speakers)
        if (s >= params.n_speakers()) throw ContractError("score_forward: unknown speaker " + std::to_string(s));
}

}  // namespace

Tensor score_forward(const DecoderParams& params, const Tensor& x_t, const Tensor& xbar0,
                     std::span<const std::size_t> speakers, std::span<const double> t, const NoiseSchedule& sched) {
    check_inputs(params, x_t, xbar0, speakers, t);
    const TimeFeatures tf = time_features(t, sched);
    Tensor emb({speakers.size(), params.embedding_dim()});
    for (std::size_t i = 0; i < speakers.size(); ++i) {
        auto src = params.speaker_table.row(speakers[i]);
        std::copy(src.begin(), src.end(), emb.row(i).begin());
    }
    const Tensor parts[] = {x_t, xbar0, emb, tf.columns};
    Tensor out = mlp_forward(params.score_net, concat_cols(std::span<const Tensor>(parts)));
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (double& v : out.row(i)) v *= tf.inv_sqrt_lam[i];
    return out;
}

std::vector<Var> DecoderVars::flat() const {
    auto out = net.flat();
    out.push_back(speaker_table);
    return out;
}

DecoderVars bind(Graph& graph, const DecoderParams& params, bool requires_grad) {
    params.validate();
    DecoderVars v;
    v.net = bind(graph, params.score_net, requires_grad);
    v.speaker_table = graph.leaf(params.speaker_table, requires_grad);
    return v;
}

Var score_forward(const DecoderParams& params, const DecoderVars& vars, Var x_t, const Tensor& xbar0,
                  std::span<const std::size_t> speakers, std::span<const double> t, const NoiseSchedule& sched) {
    check_inputs(params, x_t.value(), xbar0, speakers, t);
    Graph& g = *x_t.graph;
    const TimeFeatures tf = time_features(t, sched);
    const Var parts[] = {x_t, g.constant(xbar0), gather_rows(vars.speaker_table, speakers), g.constant(tf.columns)};
    Var raw = mlp_forward(params.score_net, vars.net, concat_cols(std::span<const Var>(parts)));
    return scale_rows(raw, tf.inv_sqrt_lam);
}

std::vector<Tensor> gradients(const Graph& graph, const DecoderVars& vars) {
    std::vector<Tensor> out;
    for (Var v : vars.flat()) out.push_back(graph.grad(v));
    return out;
}

DiffusedBatch diffuse_batch(const DecoderBatch& batch, const NoiseSchedule& sched, Rng& rng, double t_min) {
    require_same_shape(batch.x0, batch.xbar0, "diffuse_batch");
    const std::size_t n = batch.size(), d = batch.x0.cols();
    DiffusedBatch out{{}, Tensor({n}), Tensor({n, d}), Tensor({n, d}), Tensor({n, d})};
    for (std::size_t i = 0; i < n; ++i) {
        const double t = rng.uniform(t_min, 1.0);
        const Tensor x0 = Tensor::vector({batch.x0.row(i).begin(), batch.x0.row(i).end()});
        const Tensor bar = Tensor::vector({batch.xbar0.row(i).begin(), batch.xbar0.row(i).end()});
        const ForwardDraw draw = forward_sample(x0, bar, t, sched, rng, t_min);
        out.t.push_back(t);
        out.lambda[i] = draw.lambda_t;
        std::copy(draw.x_t.raw().begin(), draw.x_t.raw().end(), out.x_t.row(i).begin());
        std::copy(draw.mu_t.raw().begin(), draw.mu_t.raw().end(), out.mu_t.row(i).begin());
        std::copy(draw.true_score.raw().begin(), draw.true_score.raw().end(), out.true_score.row(i).begin());
    }
    return out;
}

double weighted_score_error(const Tensor& score, const Tensor& target, const Tensor& lambda) {
    require_same_shape(score, target, "weighted_score_error");
    double total = 0.0;
    for (std::size_t i = 0; i < score.rows(); ++i) {
        double e = 0.0;
        auto s = score.row(i);
        auto r = target.row(i);
        for (std::size_t j = 0; j < s.size(); ++j) e += (s[j] - r[j]) * (s[j] - r[j]);
        total += lambda[i] * e;
    }
    return total / static_cast<double>(score.rows());
}

Var weighted_score_error(Var score, const Tensor& target, const Tensor& lambda) {
    require_same_shape(score.value(), target, "weighted_score_error");
    Graph& g = *score.graph;
    Var per_row = row_sq_norms(sub(score, g.constant(target)));
    return mean(mul(per_row, g.constant(lambda)));
}

double dsm_loss(const DecoderParams& params, const DecoderBatch& batch, const NoiseSchedule& sched, Rng& rng,
                double t_min) {
    const DiffusedBatch db = diffuse_batch(batch, sched, rng, t_min);
    const Tensor s = score_forward(params, db.x_t, batch.xbar0, batch.speakers, db.t, sched);
    return weighted_score_error(s, db.true_score, db.lambda);
}

void TrainVariant::validate() const {
    if (w_spk < 0 || w_adv < 0) throw ConfigError("variant weights must be >= 0");
    if (kind == VariantKind::adv_constraint) pgd.validate();
}

std::string variant_name(VariantKind kind) {
    switch (kind) {
        case VariantKind::vanilla: return "vanilla";
        case VariantKind::spk_constraint: return "spk";
        case VariantKind::adv_constraint: return "adv";
    }
    return "?";
}

VariantKind parse_variant(const std::string& name) {
    if (name == "vanilla") return VariantKind::vanilla;
    if (name == "spk") return VariantKind::spk_constraint;
    if (name == "adv") return VariantKind::adv_constraint;
    throw ConfigError("unknown variant '" + name + "' (expected vanilla, spk or adv)");
}

void to_json(nlohmann::json& j, const TrainVariant& v) {
    j = {{"kind", variant_name(v.kind)},
         {"w_spk", v.w_spk},
         {"w_adv", v.w_adv},
         {"pgd", v.pgd},
         {"gate_input", v.gate_input == GateInput::model_estimate ? "model_estimate" : "forward_sample"}};
}

namespace {

Tensor row_of(const Tensor& m, std::size_t i) { return Tensor({1, m.cols()}, {m.row(i).begin(), m.row(i).end()}); }

}  // namespace

StepMetrics gated_training_step(DecoderParams& params, AdamState& opt, const DecoderBatch& batch,
                                const SpeakerClassifier& classifier, const TrainVariant& variant,
                                const NoiseSchedule& sched, Rng& rng, double t_min) {
    if (batch.size() == 0) throw ContractError("gated_training_step: empty batch");
    const DiffusedBatch db = diffuse_batch(batch, sched, rng, t_min);
    const std::size_t n = batch.size();
    StepMetrics m;

    Tensor target = db.true_score;
    if (variant.kind == VariantKind::adv_constraint) {
        Tensor probe = db.x_t;
        if (variant.gate_input == GateInput::model_estimate) {
            const Tensor s = score_forward(params, db.x_t, batch.xbar0, batch.speakers, db.t, sched);
            for (std::size_t i = 0; i < n; ++i) {
                auto p = probe.row(i);
                auto sr = s.row(i);
                for (std::size_t j = 0; j < p.size(); ++j) p[j] += db.lambda[i] * sr[j];
            }
        }
        std::size_t fired = 0;
        double delta_sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const Tensor p = row_of(probe, i);
            const std::size_t y = batch.speakers[i];
            if (classifier.is_target(p, y)) continue;
            ++fired;
            const PgdResult r = pgd_attack(classifier, p, y, variant.pgd);
            ++m.pgd_calls;
            const double norm = perturbation_norm(r.delta, variant.pgd.norm);
            if (norm > variant.pgd.epsilon) {
                throw ContractError("pgd perturbation norm " + std::to_string(norm) + " exceeds budget " +
                                    std::to_string(variant.pgd.epsilon));
            }
            m.max_delta_norm = std::max(m.max_delta_norm, norm);
            delta_sq += squared_norm(r.delta.raw());
            const Tensor shifted = row_of(db.mu_t, i) + r.delta;
            const Tensor adv = analytic_score(row_of(db.x_t, i), shifted, db.lambda[i]);
            std::copy(adv.raw().begin(), adv.raw().end(), target.row(i).begin());
        }
        m.gate_rate = static_cast<double>(fired) / static_cast<double>(n);
        m.adv = delta_sq / static_cast<double>(n);
    }

    Graph g;
    const DecoderVars vars = bind(g, params);
    Var s = score_forward(params, vars, g.constant(db.x_t), batch.xbar0, batch.speakers, db.t, sched);
    Var loss = weighted_score_error(s, target, db.lambda);
    m.dsm = loss.value().item();
    if (variant.kind == VariantKind::spk_constraint) {
        Var implied_mean = add(g.constant(db.x_t), scale_rows(s, db.lambda));
        Var ce = cross_entropy(classifier.logits(g, implied_mean), batch.speakers);
        m.spk = ce.value().item();
        loss = add(loss, scale(ce, variant.w_spk));
    }
    m.loss = loss.value().item() + variant.w_adv * m.adv;
    g.backward(loss);
    auto ptrs = params.tensors();
    adam_step(ptrs, gradients(g, vars), opt);
    return m;
}

void to_json(nlohmann::json& j, const DecoderHyper& h) {
    j = {{"hidden", h.hidden},
         {"embedding_dim", h.embedding_dim},
         {"steps", h.steps},
         {"batch", h.batch},
         {"learning_rate", h.learning_rate},
         {"log_every", h.log_every},
         {"t_min", h.t_min}};
}

void from_json(const nlohmann::json& j, DecoderHyper& h) {
    DecoderHyper d;
    h.hidden = j.value("hidden", d.hidden);
    h.embedding_dim = j.value("embedding_dim", d.embedding_dim);
    h.steps = j.value("steps", d.steps);
    h.batch = j.value("batch", d.batch);
    h.learning_rate = j.value("learning_rate", d.learning_rate);
    h.log_every = j.value("log_every", d.log_every);
    h.t_min = j.value("t_min", d.t_min);
}

DecoderTraining train_decoder(const Dataset& ds, const SpeakerClassifier& classifier, const TrainVariant& variant,
                              const DecoderHyper& hyper, const NoiseSchedule& sched, Rng& rng) {
    variant.validate();
    const FrameSet train = flatten(ds.train);
    if (train.labels.empty()) throw ContractError("train_decoder: empty training set");
    if (classifier.n_classes() != ds.world.n_speakers()) {
        throw ContractError("train_decoder: classifier has " + std::to_string(classifier.n_classes()) +
                            " classes, world has " + std::to_string(ds.world.n_speakers()) + " speakers");
    }
    DecoderTraining out;
    out.params = init_decoder(ds.world.feature_dim(), ds.world.n_speakers(), hyper.embedding_dim, hyper.hidden, rng);
    const auto ptrs = out.params.tensors();
    AdamState opt = AdamState::for_params(std::vector<const Tensor*>(ptrs.begin(), ptrs.end()),
                                          AdamConfig{.learning_rate = hyper.learning_rate});
    MetricsRecord acc;
    std::size_t in_window = 0;
    for (std::size_t step = 0; step < hyper.steps; ++step) {
        const auto idx = sample_batch(train.labels.size(), hyper.batch, rng);
        DecoderBatch batch{take_rows(train.x, idx), take_rows(train.xbar0, idx), {}};
        for (auto i : idx) batch.speakers.push_back(train.labels[i]);
        StepMetrics m;
        try {
            m = gated_training_step(out.params, opt, batch, classifier, variant, sched, rng, hyper.t_min);
        } catch (const DivergenceError& e) {
            throw DivergenceError(std::string("decoder training diverged: ") + e.what(), step);
        }
        if (!std::isfinite(m.loss)) throw DivergenceError("decoder loss is non-finite", step);
        out.max_delta_norm = std::max(out.max_delta_norm, m.max_delta_norm);
        out.pgd_calls += m.pgd_calls;
        acc.loss += m.loss;
        acc.dsm += m.dsm;
        acc.spk += m.spk;
        acc.adv += m.adv;
        acc.gate_rate += m.gate_rate;
        if (++in_window == hyper.log_every || step + 1 == hyper.steps) {
            const double k = static_cast<double>(in_window);
            out.history.push_back({step + 1, acc.loss / k, acc.dsm / k, acc.spk / k, acc.adv / k, acc.gate_rate / k});
            acc = {};
            in_window = 0;
        }
    }
    return out;
}

Tensor convert(const DecoderParams& decoder, const EncoderParams& encoder, const Tensor& x_src,
               std::size_t target_speaker, const ReverseConfig& reverse, const NoiseSchedule& sched, Rng& rng) {
    if (target_speaker >= decoder.n_speakers()) {
        throw ContractError("convert: unknown target speaker " + std::to_string(target_speaker));
    }
    const Tensor xbar0 = encode(encoder, x_src);
    Tensor x1 = xbar0;
    for (double& v : x1.raw()) v += rng.normal();
    const std::vector<std::size_t> speakers(xbar0.rows(), target_speaker);
    std::vector<double> times(xbar0.rows());
    auto score = [&](const Tensor& x, double t) {
        std::fill(times.begin(), times.end(), t);
        return score_forward(decoder, x, xbar0, speakers, times, sched);
    };
    return reverse_integrate(score, xbar0, reverse, sched, rng, std::move(x1));
}

Checkpoint to_checkpoint(const DecoderParams& params) {
    Checkpoint c;
    c.module = "decoder";
    put_mlp(c, "score_net", params.score_net);
    c.put("speaker_table", params.speaker_table);
    return c;
}

DecoderParams decoder_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.module != "decoder") throw FormatError("expected a decoder checkpoint, got '" + ckpt.module + "'");
    DecoderParams p{get_mlp(ckpt, "score_net"), ckpt.get("speaker_table")};
    try {
        p.validate();
    } catch (const ShapeError& e) {
        throw FormatError(std::string("decoder checkpoint: ") + e.what());
    }
    return p;
}

}  // namespace diffattack
