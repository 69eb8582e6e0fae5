#include <doctest.h>

#include <cmath>
#include <utility>
#include <vector>

#include "diffattack/checkpoint.hpp"
#include "diffattack/decoder.hpp"
#include "diffattack/errors.hpp"
#include "diffattack/pgd.hpp"
#include "diffattack/training.hpp"
#include "fd.hpp"

using namespace diffattack;

namespace {

const NoiseSchedule kSched{};

struct Fixture {
    Dataset ds;
    ClassifierParams classifier;
    EncoderParams encoder;
    DecoderTraining vanilla;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture x;
        WorldConfig c;
        c.seed = 31;
        Rng rng(1);
        x.ds = make_dataset(generate_world(c), 20, 0.8, rng);
        x.classifier = train_classifier(x.ds, ClassifierHyper{}, rng).params;
        x.encoder = train_encoder(x.ds, EncoderHyper{}, rng).params;
        const MlpSpeakerClassifier victim(x.classifier);
        x.vanilla = train_decoder(x.ds, victim, TrainVariant::vanilla(), DecoderHyper{}, kSched, rng);
        return x;
    }();
    return f;
}

DecoderBatch batch_of(const Dataset& ds, std::size_t n) {
    const FrameSet f = flatten(ds.train);
    DecoderBatch b;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i * 7 % f.labels.size());
    b.x0 = take_rows(f.x, idx);
    b.xbar0 = take_rows(f.xbar0, idx);
    for (auto i : idx) b.speakers.push_back(f.labels[i]);
    return b;
}

// Two classes with logits [w.x, -w.x].
class LinearPair final : public SpeakerClassifier {
  public:
    explicit LinearPair(Tensor w) : w_(w.reshaped({w.size(), 1})) {}
    std::size_t n_classes() const override { return 2; }
    Tensor logits(const Tensor& x) const override {
        const Tensor a = matmul(x, w_);
        const Tensor parts[] = {a, a * -1.0};
        return concat_cols(std::span<const Tensor>(parts));
    }
    Var logits(Graph& g, Var x) const override {
        Var a = matmul(x, g.constant(w_));
        const Var parts[] = {a, scale(a, -1.0)};
        return concat_cols(std::span<const Var>(parts));
    }

  private:
    Tensor w_;
};

class AlwaysTarget final : public SpeakerClassifier {
  public:
    explicit AlwaysTarget(const SpeakerClassifier& inner) : inner_(inner) {}
    std::size_t n_classes() const override { return inner_.n_classes(); }
    Tensor logits(const Tensor& x) const override { return inner_.logits(x); }
    Var logits(Graph& g, Var x) const override { return inner_.logits(g, x); }
    bool is_target(const Tensor&, std::size_t) const override { return true; }

  private:
    const SpeakerClassifier& inner_;
};

DecoderHyper short_hyper() {
    DecoderHyper h;
    h.steps = 60;
    h.log_every = 20;
    return h;
}

}  // namespace

TEST_CASE("pgd") {
    const LinearPair lin(Tensor::vector({1.0, -2.0, 0.5}));
    const Tensor x = Tensor::matrix({{1.0, -1.0, 0.0}});  // w.x = 3, so class 0 wins

    SUBCASE("already at the target stops immediately") {
        const auto r = pgd_attack(lin, x, 0, PgdConfig{});
        CHECK(r.iterations == 0);
        CHECK(r.success);
        CHECK(max_abs(r.delta.raw()) == 0.0);
    }
    SUBCASE("target margin grows with every iteration") {
        double prev = -1e300;
        for (std::size_t k = 1; k <= 6; ++k) {
            PgdConfig cfg{4.0, 0.2, k};
            const auto r = pgd_attack(lin, x, 1, cfg);
            const Tensor l = lin.logits(x + r.delta);
            const double margin = l(0, 1) - l(0, 0);
            CHECK(margin > prev);
            prev = margin;
            if (r.success) break;
        }
    }
    SUBCASE("the budget holds on random instances in both norms") {
        Rng rng(3);
        const MlpSpeakerClassifier victim(fixture().classifier);
        for (int trial = 0; trial < 30; ++trial) {
            const Tensor z = rng.normal_tensor({1 + rng.index(4), 16}, 2.0);
            for (auto norm : {PgdNorm::max_norm, PgdNorm::euclidean}) {
                PgdConfig cfg{rng.uniform(0.01, 1.0), 0.3, 8, norm};
                const auto r = pgd_attack(victim, z, rng.index(10), cfg);
                CHECK(perturbation_norm(r.delta, norm) <= cfg.epsilon);
            }
        }
    }
    SUBCASE("zero budget gives a zero perturbation") {
        const auto r = pgd_attack(lin, x, 1, PgdConfig{0.0, 0.1, 5});
        CHECK(max_abs(r.delta.raw()) == 0.0);
        CHECK_FALSE(r.success);
    }
    SUBCASE("bad config") {
        CHECK_THROWS_AS(pgd_attack(lin, x, 1, PgdConfig{-1.0, 0.1, 5}), ConfigError);
        CHECK_THROWS_AS(pgd_attack(lin, x, 2, PgdConfig{}), ContractError);
    }
}

TEST_CASE("score network") {
    const auto& f = fixture();
    const auto& p = f.vanilla.params;
    const DecoderBatch b = batch_of(f.ds, 6);
    const std::vector<double> t{0.05, 0.2, 0.4, 0.6, 0.8, 1.0};

    const Tensor s = score_forward(p, b.x0, b.xbar0, b.speakers, t, kSched);
    CHECK(s.all_finite());

    SUBCASE("speaker embedding is live") {
        std::vector<std::size_t> other = b.speakers;
        for (auto& v : other) v = (v + 1) % 10;
        const Tensor s2 = score_forward(p, b.x0, b.xbar0, other, t, kSched);
        CHECK(max_abs((s2 - s).raw()) > 1e-3);
    }
    SUBCASE("gradient with respect to x_t") {
        Rng rng(2);
        const Tensor probe = rng.normal_tensor(s.shape());
        Graph g;
        const DecoderVars vars = bind(g, p, false);
        Var x = g.leaf(b.x0);
        g.backward(sum(mul(score_forward(p, vars, x, b.xbar0, b.speakers, t, kSched), g.constant(probe))));
        const Tensor numeric = fdcheck::numeric_grad(
            [&](const Tensor& xv) {
                return dot(score_forward(p, xv, b.xbar0, b.speakers, t, kSched).raw(), probe.raw());
            },
            b.x0);
        CHECK(fdcheck::rel_error(g.grad(x), numeric) < 1e-4);
    }
    SUBCASE("taped and plain forward agree") {
        Graph g;
        const DecoderVars vars = bind(g, p, false);
        Var v = score_forward(p, vars, g.constant(b.x0), b.xbar0, b.speakers, t, kSched);
        CHECK(fdcheck::rel_error(v.value(), s) < 1e-14);
    }
    SUBCASE("unknown speaker") {
        std::vector<std::size_t> bad = b.speakers;
        bad[0] = 10;
        CHECK_THROWS_AS(score_forward(p, b.x0, b.xbar0, bad, t, kSched), ContractError);
    }
}

TEST_CASE("score-matching loss") {
    const DecoderBatch b = batch_of(fixture().ds, 64);
    Rng rng(4);
    double zero_loss = 0.0;
    const int reps = 50;
    for (int r = 0; r < reps; ++r) {
        const DiffusedBatch db = diffuse_batch(b, kSched, rng);
        CHECK(weighted_score_error(db.true_score, db.true_score, db.lambda) == 0.0);
        zero_loss += weighted_score_error(Tensor::zeros(db.true_score.shape()), db.true_score, db.lambda) / reps;
    }
    // lambda ||z / sqrt(lambda)||^2 = ||z||^2, expectation d = 16
    CHECK(zero_loss == doctest::Approx(16.0).epsilon(0.03));
}

TEST_CASE("vanilla training") {
    const auto& f = fixture();
    const auto& h = f.vanilla.history;
    REQUIRE(h.size() >= 2);
    CHECK(h.back().dsm < 0.5 * h.front().dsm);
    CHECK(f.vanilla.pgd_calls == 0);

    SUBCASE("checkpoint round trip reproduces the validation loss") {
        const DecoderBatch b = batch_of(f.ds, 64);
        const auto back = decoder_from_checkpoint(checkpoint_from_json(to_json(to_checkpoint(f.vanilla.params)),
                                                                       "decoder"));
        Rng r1(8), r2(8);
        CHECK(dsm_loss(back, b, kSched, r1) == dsm_loss(f.vanilla.params, b, kSched, r2));
    }
}

TEST_CASE("adversarial-constraint training") {
    const auto& f = fixture();
    const MlpSpeakerClassifier victim(f.classifier);
    PgdConfig pgd;
    const auto adv = TrainVariant::adv_constraint(pgd, 1.0);
    Rng rng(6);
    DecoderHyper h;
    h.steps = 1500;
    const auto trained = train_decoder(f.ds, victim, adv, h, kSched, rng);
    for (const auto& m : trained.history) {
        CHECK(m.gate_rate >= 0.0);
        CHECK(m.gate_rate <= 1.0);
    }
    CHECK(trained.history.back().gate_rate < trained.history.front().gate_rate);
    CHECK(trained.pgd_calls > 0);
    CHECK(trained.max_delta_norm <= pgd.epsilon);
}

TEST_CASE("degenerate gates reproduce vanilla training bit for bit") {
    const auto& f = fixture();
    const MlpSpeakerClassifier victim(f.classifier);
    Rng r0(9);
    const auto vanilla = train_decoder(f.ds, victim, TrainVariant::vanilla(), short_hyper(), kSched, r0);
    const std::string reference = serialize(to_checkpoint(vanilla.params));

    SUBCASE("zero budget") {
        PgdConfig pgd;
        pgd.epsilon = 0.0;
        Rng r(9);
        const auto adv = train_decoder(f.ds, victim, TrainVariant::adv_constraint(pgd, 1.0), short_hyper(), kSched, r);
        CHECK(serialize(to_checkpoint(adv.params)) == reference);
        CHECK(adv.max_delta_norm == 0.0);
    }
    SUBCASE("classifier that always agrees") {
        const AlwaysTarget stub(victim);
        Rng r(9);
        const auto adv =
            train_decoder(f.ds, stub, TrainVariant::adv_constraint(PgdConfig{}, 1.0), short_hyper(), kSched, r);
        CHECK(serialize(to_checkpoint(adv.params)) == reference);
        CHECK(adv.pgd_calls == 0);
    }
    SUBCASE("a real budget changes the result") {
        Rng r(9);
        const auto adv =
            train_decoder(f.ds, victim, TrainVariant::adv_constraint(PgdConfig{}, 1.0), short_hyper(), kSched, r);
        CHECK(serialize(to_checkpoint(adv.params)) != reference);
    }
}

TEST_CASE("speaker-constraint step reports its cross entropy") {
    const auto& f = fixture();
    const MlpSpeakerClassifier victim(f.classifier);
    DecoderParams p = f.vanilla.params;
    auto opt = AdamState::for_params(std::as_const(p).tensors());
    Rng rng(3);
    const auto m = gated_training_step(p, opt, batch_of(f.ds, 32), victim, TrainVariant::spk_constraint(1.0), kSched,
                                       rng);
    CHECK(m.spk > 0.0);
    CHECK(m.loss == doctest::Approx(m.dsm + m.spk));
    CHECK(m.gate_rate == 0.0);
}

TEST_CASE("convert") {
    const auto& f = fixture();
    const MlpSpeakerClassifier victim(f.classifier);
    const ReverseConfig rev;

    SUBCASE("same stream, same output") {
        Rng a(5), b(5);
        const auto& u = f.ds.test[0];
        CHECK(convert(f.vanilla.params, f.encoder, u.x, 3, rev, kSched, a).raw() ==
              convert(f.vanilla.params, f.encoder, u.x, 3, rev, kSched, b).raw());
    }
    SUBCASE("converting to the source speaker keeps the identity") {
        Rng rng(6);
        std::size_t hits = 0;
        for (const auto& u : f.ds.test) {
            const Tensor out = convert(f.vanilla.params, f.encoder, u.x, u.speaker_id, rev, kSched, rng);
            hits += victim.is_target(out, u.speaker_id);
        }
        CHECK(static_cast<double>(hits) / f.ds.test.size() >= 0.9);
    }
    SUBCASE("generated speaker means recover the offsets") {
        // E[xbar0] = 0, so a speaker's true frame mean is its offset
        Rng rng(7);
        for (std::size_t s : {0, 4}) {
            Tensor mean = Tensor::zeros({16});
            std::size_t n = 0;
            while (n < 1000) {
                for (const auto& u : f.ds.test) {
                    const Tensor out = convert(f.vanilla.params, f.encoder, u.x, s, rev, kSched, rng);
                    for (std::size_t i = 0; i < out.rows(); ++i) {
                        for (std::size_t j = 0; j < 16; ++j) mean[j] += out(i, j);
                        ++n;
                    }
                }
            }
            mean *= 1.0 / static_cast<double>(n);
            const Tensor& b = f.ds.world.speaker(s).offset;
            CHECK(std::sqrt(squared_norm((mean - b).raw()) / squared_norm(b.raw())) < 0.1);
        }
    }
}
