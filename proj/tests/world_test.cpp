#include <doctest.h>

#include <cmath>
#include <string>

#include "diffattack/errors.hpp"
#include "diffattack/world.hpp"

using namespace diffattack;

namespace {

WorldConfig cfg_with_seed(std::uint64_t seed) {
    WorldConfig c;
    c.seed = seed;
    return c;
}

}  // namespace

TEST_CASE("generate_world") {
    SUBCASE("same seed gives identical speakers") {
        const World a = generate_world(cfg_with_seed(4)), b = generate_world(cfg_with_seed(4));
        REQUIRE(a.n_speakers() == b.n_speakers());
        for (std::size_t s = 0; s < a.n_speakers(); ++s) {
            CHECK(a.speakers[s].offset.raw() == b.speakers[s].offset.raw());
            CHECK(a.speakers[s].warp.raw() == b.speakers[s].warp.raw());
        }
        CHECK(a.fingerprint() == b.fingerprint());
        CHECK(a.fingerprint() != generate_world(cfg_with_seed(5)).fingerprint());
    }
    SUBCASE("no offset and no warp renders every speaker alike") {
        WorldConfig c = cfg_with_seed(1);
        c.offset_scale = 0.0;
        c.warp_strength = 0.0;
        c.obs_noise = 0.0;
        const World w = generate_world(c);
        Rng r(2);
        const Tensor content = r.normal_tensor({3, c.content_dim});
        Rng r1(9), r2(9);
        for (std::size_t s = 1; s < w.n_speakers(); ++s) {
            CHECK(w.render(0, content, r1).raw() == w.render(s, content, r2).raw());
        }
    }
    SUBCASE("pairwise offset distances concentrate near offset_scale sqrt(2d)") {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const World w = generate_world(cfg_with_seed(seed));
            for (std::size_t a = 0; a < w.n_speakers(); ++a) {
                for (std::size_t b = a + 1; b < w.n_speakers(); ++b) {
                    sum += std::sqrt(squared_norm((w.speakers[a].offset - w.speakers[b].offset).raw()));
                    ++n;
                }
            }
        }
        // E||z|| for z ~ N(0, 2 I_16) is sqrt(2) * 3.943, about 1.5% below sqrt(32)
        CHECK(sum / n == doctest::Approx(std::sqrt(32.0)).epsilon(0.05));
    }
    SUBCASE("content projection has unit columns") {
        const World w = generate_world(cfg_with_seed(3));
        const Tensor gram = matmul(transpose(w.content_projection), w.content_projection);
        for (std::size_t i = 0; i < gram.rows(); ++i) CHECK(gram(i, i) == doctest::Approx(1.0));
    }
    SUBCASE("invalid config") {
        WorldConfig c;
        c.n_speakers = 1;
        CHECK_THROWS_AS(generate_world(c), ConfigError);
        c = WorldConfig{};
        c.obs_noise = -1;
        CHECK_THROWS_AS(generate_world(c), ConfigError);
    }
}

TEST_CASE("synth_utterance") {
    WorldConfig c = cfg_with_seed(6);
    SUBCASE("noise-free unwarped frames are average plus offset") {
        c.obs_noise = 0.0;
        c.warp_strength = 0.0;
        const World w = generate_world(c);
        Rng rng(1);
        const Utterance u = synth_utterance(w, 3, rng);
        const Tensor diff = u.x - u.xbar0;
        for (std::size_t i = 0; i < u.frames(); ++i) {
            for (std::size_t j = 0; j < c.feature_dim; ++j) CHECK(diff(i, j) == doctest::Approx(w.speakers[3].offset[j]));
        }
    }
    SUBCASE("same speaker, different stream") {
        const World w = generate_world(c);
        Rng r1(1), r2(2);
        const Utterance a = synth_utterance(w, 2, r1), b = synth_utterance(w, 2, r2);
        CHECK(a.speaker_id == b.speaker_id);
        CHECK(a.content.raw() != b.content.raw());
    }
    SUBCASE("speaker mean converges to its offset") {
        const World w = generate_world(c);
        Rng rng(3);
        Tensor mean = Tensor::zeros({c.feature_dim});
        const int n = 4000;
        for (int i = 0; i < n; ++i) {
            const Utterance u = synth_utterance(w, 1, rng);
            for (std::size_t j = 0; j < c.feature_dim; ++j) mean[j] += u.x(0, j) / n;
        }
        // each coordinate has variance about 1/4 per draw (unit content through a unit-column projection)
        for (std::size_t j = 0; j < c.feature_dim; ++j) CHECK(std::abs(mean[j] - w.speakers[1].offset[j]) < 0.05);
    }
    SUBCASE("unknown speaker") {
        const World w = generate_world(c);
        Rng rng(1);
        CHECK_THROWS_AS(synth_utterance(w, 10, rng), std::out_of_range);
    }
}

TEST_CASE("make_dataset") {
    const World w = generate_world(cfg_with_seed(8));
    Rng rng(1);
    const Dataset ds = make_dataset(w, 10, 0.8, rng);
    CHECK(ds.train.size() == 80);
    CHECK(ds.test.size() == 20);
    for (std::size_t s = 0; s < 10; ++s) {
        std::size_t tr = 0, te = 0;
        for (const auto& u : ds.train) tr += u.speaker_id == s;
        for (const auto& u : ds.test) te += u.speaker_id == s;
        CHECK(tr == 8);
        CHECK(te == 2);
    }
    // disjoint: no test utterance repeats a training one
    for (const auto& t : ds.test) {
        for (const auto& u : ds.train) CHECK(t.content.raw() != u.content.raw());
    }
    Rng r2(1);
    CHECK_THROWS_AS(make_dataset(w, 2, 0.9, r2), ContractError);
    CHECK_THROWS_AS(make_dataset(w, 10, 1.0, r2), ContractError);
}

TEST_CASE("dataset serialization") {
    const World w = generate_world(cfg_with_seed(8));
    Rng rng(1);
    const Dataset ds = make_dataset(w, 5, 0.6, rng);
    const std::string text = serialize_dataset(ds);
    const Dataset back = parse_dataset(text);
    CHECK(serialize_dataset(back) == text);
    CHECK(back.world.fingerprint() == w.fingerprint());
    REQUIRE(back.test.size() == ds.test.size());
    CHECK(back.test[1].x.raw() == ds.test[1].x.raw());

    SUBCASE("errors name the line and field") {
        std::string broken = text;
        const auto second = broken.find('\n') + 1;
        broken.replace(broken.find("\"speaker_id\"", second), 12, "\"speaker_xx\"");
        try {
            parse_dataset(broken);
            FAIL("expected a format error");
        } catch (const FormatError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 2") != std::string::npos);
            CHECK(msg.find("speaker_id") != std::string::npos);
        }
    }
    SUBCASE("version mismatch") {
        std::string broken = text;
        broken.replace(broken.find("\"format_version\":1"), 18, "\"format_version\":9");
        CHECK_THROWS_AS(parse_dataset(broken), FormatError);
    }
}
