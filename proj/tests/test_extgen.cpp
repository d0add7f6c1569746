#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "segnet/extgen.hpp"
#include "segnet/gradcheck.hpp"
#include "segnet/objective.hpp"

using namespace segnet;

namespace {

ModelConfig extgen_config() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.d_ff = 8;
    cfg.char_dim = 4;
    cfg.char_width = 3;
    cfg.rel_clip = 4;
    cfg.vocab_size = 24;
    cfg.max_len = 32;
    cfg.max_sent = 8;
    cfg.src_budget = 32;
    cfg.dropout = 0.0;
    cfg.seed = 21;
    cfg.finalize();
    return cfg;
}

struct Toy {
    ModelConfig cfg = extgen_config();
    Vocab vocab;
    std::vector<std::string> src_tokens{"alpha", "beta", "gamma", "alpha", "segnetoov"};
    TokenFeatures src;

    Toy() {
        std::vector<Document> docs(1);
        docs[0].tokens = {"alpha", "beta", "gamma", "delta", "epsilon", "zeta"};
        vocab = Vocab::build(docs, cfg.vocab_size); // "segnetoov" stays out of vocabulary
        cfg.vocab_size = vocab.size();              // models project onto the built vocabulary
        std::vector<std::string> tags(src_tokens.size(), "NOUN");
        std::vector<int> segs{0, 0, 0, 1, 1};
        src = source_features(src_tokens, tags, segs, vocab, cfg);
    }
};

} // namespace

TEST_CASE("encode shapes and determinism") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;

    auto outs = model.encode(toy.src, rt);
    REQUIRE(outs.size() == toy.cfg.layers);
    for (const auto& o : outs) {
        CHECK(o.rows() == toy.src_tokens.size());
        CHECK(o.cols() == toy.cfg.d_model);
    }
    auto outs2 = model.encode(toy.src, rt);
    for (std::size_t i = 0; i < outs.back().size(); ++i)
        CHECK(outs.back().values()[i] == outs2.back().values()[i]);

    TokenFeatures one = toy.src;
    one.words.resize(1);
    one.tags.resize(1);
    one.positions.resize(1);
    one.segments.resize(1);
    one.chars.resize(1);
    auto o1 = model.encode(one, rt);
    CHECK(o1.back().rows() == 1);
}

TEST_CASE("overlength input is a contract error") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    TokenFeatures big;
    for (std::size_t i = 0; i < toy.cfg.max_len + 1; ++i) {
        big.words.push_back(1);
        big.tags.push_back(0);
        big.positions.push_back(static_cast<int>(std::min(i, toy.cfg.max_len - 1)));
        big.segments.push_back(0);
        big.chars.push_back(char_ids_of("x", toy.cfg.char_width));
    }
    CHECK_THROWS_AS(model.encode(big, rt), ContractError);
    CHECK_THROWS_AS(model.encode(TokenFeatures{}, rt), ContractError);
}

TEST_CASE("segment embedding is trainable (gradient flows)") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    rt.train = true;
    model.params.zero_grad();
    auto outs = model.encode(toy.src, rt);
    mean_all(mul(outs.back(), outs.back())).backward();
    Real s = 0;
    for (Real g : model.params.at("embed.segment").array.grad()) s += std::abs(g);
    CHECK(s > Real(0));
}

TEST_CASE("extract_probs head behavior") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    auto enc = model.encode(toy.src, rt);

    SECTION("zero weights give one half") {
        for (auto* name : {"extractor.w1", "extractor.b1", "extractor.w2", "extractor.b2"})
            for (auto& v : model.params.at(name).array.values()) v = 0;
        auto p = model.extract_probs(enc.back(), rt);
        for (std::size_t i = 0; i < p.rows(); ++i)
            CHECK_THAT(p.at(i, 0), Catch::Matchers::WithinAbs(0.5, 1e-12));
    }
    SECTION("large positive bias saturates toward one") {
        model.params.at("extractor.b2").array.values()[0] = Real(50);
        auto p = model.extract_probs(enc.back(), rt);
        for (std::size_t i = 0; i < p.rows(); ++i) CHECK(p.at(i, 0) > Real(0.999));
    }
    SECTION("probabilities lie in (0,1)") {
        auto p = model.extract_probs(enc.back(), rt);
        for (std::size_t i = 0; i < p.rows(); ++i) {
            CHECK(p.at(i, 0) > Real(0));
            CHECK(p.at(i, 0) < Real(1));
        }
    }
}

TEST_CASE("extract_spans run assembly") {
    std::vector<std::string> toks{"a", "b", "c", "d"};
    std::vector<int> segs{0, 0, 0, 0};

    auto spans = extract_spans({0.9, 0.9, 0.1, 0.8}, toks, segs);
    REQUIRE(spans.size() == 2);
    CHECK(spans[0].tokens == std::vector<std::string>{"a", "b"});
    CHECK(spans[0].span == Span{0, 2});
    CHECK(spans[1].tokens == std::vector<std::string>{"d"});

    CHECK(extract_spans({0.2, 0.3, 0.4, 0.4}, toks, segs).empty());

    // run crossing a sentence boundary splits into two phrases
    std::vector<int> segs2{0, 0, 1, 1};
    auto crossing = extract_spans({0.9, 0.9, 0.9, 0.9}, toks, segs2);
    REQUIRE(crossing.size() == 2);
    CHECK(crossing[0].tokens == std::vector<std::string>{"a", "b"});
    CHECK(crossing[1].tokens == std::vector<std::string>{"c", "d"});

    // stem duplicates keep the first occurrence
    std::vector<std::string> dup{"model", "x", "models"};
    auto dedup = extract_spans({0.9, 0.1, 0.9}, dup, {0, 0, 0});
    REQUIRE(dedup.size() == 1);
    CHECK(dedup[0].tokens == std::vector<std::string>{"model"});
}

TEST_CASE("informed copy mixture contracts") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    auto enc = model.encode(toy.src, rt);
    Rng rng(3);
    Tensor h = Tensor::rand_uniform(rng, 2, toy.cfg.d_model, -1, 1);

    SECTION("fully blocked collapses to the generation softmax bit-for-bit") {
        CopyContext copy = make_copy_context(enc.back(), toy.src_tokens,
                                             std::vector<std::uint8_t>(5, 1), toy.vocab);
        auto out = model.output_heads(h, h, copy, rt);
        Tensor p_gen = softmax_rows(add_row(matmul(h, model.wv), model.bv));
        REQUIRE(out.final_dist.cols() == p_gen.cols());
        for (std::size_t i = 0; i < p_gen.size(); ++i)
            CHECK(out.final_dist.values()[i] == p_gen.values()[i]);
        for (std::size_t t = 0; t < 2; ++t) CHECK(out.gate.at(t, 0) == Real(0));
    }
    SECTION("blocked positions contribute exactly zero") {
        std::vector<std::uint8_t> blocked{1, 0, 1, 0, 0};
        CopyContext copy = make_copy_context(enc.back(), toy.src_tokens, blocked, toy.vocab);
        auto out = model.output_heads(h, h, copy, rt);
        for (std::size_t t = 0; t < 2; ++t) {
            CHECK(out.copy_weights.at(t, 0) == Real(0));
            CHECK(out.copy_weights.at(t, 2) == Real(0));
        }
    }
    SECTION("saturated gate with one unblocked token puts all mass on it") {
        model.params.at("copy.bu").array.values()[0] = Real(200);
        std::vector<std::uint8_t> blocked{1, 0, 1, 1, 1}; // only "beta" copyable
        CopyContext copy = make_copy_context(enc.back(), toy.src_tokens, blocked, toy.vocab);
        auto out = model.output_heads(h, h, copy, rt);
        const int beta_id = toy.vocab.id("beta");
        for (std::size_t t = 0; t < 2; ++t)
            CHECK_THAT(out.final_dist.at(t, static_cast<std::size_t>(beta_id)),
                       Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    SECTION("distribution sums to one under random blocking") {
        Rng sweep(99);
        for (int rep = 0; rep < 100; ++rep) {
            ModelConfig cfg = toy.cfg;
            cfg.seed = 1000 + static_cast<std::uint64_t>(rep);
            ExtGenModel m(cfg);
            std::vector<std::uint8_t> blocked(5);
            for (auto& b : blocked) b = sweep.uniform() < 0.4 ? 1 : 0;
            CopyContext copy = make_copy_context(m.encode(toy.src, rt).back(), toy.src_tokens,
                                                 blocked, toy.vocab);
            Tensor hr = Tensor::rand_uniform(sweep, 1, cfg.d_model, -1, 1);
            auto out = m.output_heads(hr, hr, copy, rt);
            Real s = 0;
            for (std::size_t v = 0; v < out.final_dist.cols(); ++v) {
                CHECK(out.final_dist.at(0, v) >= Real(0));
                s += out.final_dist.at(0, v);
            }
            CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
        }
    }
    SECTION("repeated source tokens aggregate copy mass") {
        // uniform copy scores: zero bilinear weight
        for (auto& v : model.params.at("copy.watt").array.values()) v = 0;
        std::vector<std::uint8_t> blocked(5, 0);
        CopyContext copy = make_copy_context(enc.back(), toy.src_tokens, blocked, toy.vocab);
        auto out = model.output_heads(h, h, copy, rt);
        // "alpha" occurs twice among five positions: copy share 2/5
        const int alpha_id = toy.vocab.id("alpha");
        const Real gate = out.gate.at(0, 0);
        Tensor p_gen = softmax_rows(add_row(matmul(h, model.wv), model.bv));
        const Real expect =
            (Real(1) - gate) * p_gen.at(0, static_cast<std::size_t>(alpha_id)) +
            gate * Real(0.4);
        CHECK_THAT(out.final_dist.at(0, static_cast<std::size_t>(alpha_id)),
                   Catch::Matchers::WithinAbs(expect, 1e-9));
    }
    SECTION("out-of-vocabulary source words are reachable only through copying") {
        std::vector<std::uint8_t> blocked(5, 0);
        CopyContext copy = make_copy_context(enc.back(), toy.src_tokens, blocked, toy.vocab);
        REQUIRE(copy.oov_words == std::vector<std::string>{"segnetoov"});
        const int ext = copy.ext_token_id("segnetoov", toy.vocab);
        CHECK(ext == static_cast<int>(toy.vocab.size()));
        auto out = model.output_heads(h, h, copy, rt);
        CHECK(out.final_dist.cols() == toy.vocab.size() + 1);
        CHECK(out.final_dist.at(0, static_cast<std::size_t>(ext)) > Real(0));
    }
}

TEST_CASE("tag head reads the intermediate layer, vocab head the top") {
    Toy toy;
    ExtGenModel model(toy.cfg); // pos_tag_layer = 1 of 2
    REQUIRE(model.cfg.pos_tag_layer == 1);
    Runtime rt;
    std::vector<int> in_words{Vocab::kBosId, toy.vocab.id("alpha")};
    std::vector<std::vector<int>> in_chars{char_ids_of(kBosTok, toy.cfg.char_width),
                                           char_ids_of("alpha", toy.cfg.char_width)};
    std::vector<std::uint8_t> blocked(5, 0);

    auto base = model.teacher_forced_forward(toy.src, in_words, in_chars, blocked,
                                             toy.src_tokens, toy.vocab, rt);
    // perturb a decoder layer-2 parameter (above the tag layer)
    model.params.at("decoder.layer1.ff.w1").array.values()[0] += Real(4);
    auto mod = model.teacher_forced_forward(toy.src, in_words, in_chars, blocked,
                                            toy.src_tokens, toy.vocab, rt);
    Real tag_diff = 0, vocab_diff = 0;
    for (std::size_t i = 0; i < base.steps.tag_dist.size(); ++i)
        tag_diff += std::abs(base.steps.tag_dist.values()[i] - mod.steps.tag_dist.values()[i]);
    for (std::size_t i = 0; i < base.steps.final_dist.size(); ++i)
        vocab_diff +=
            std::abs(base.steps.final_dist.values()[i] - mod.steps.final_dist.values()[i]);
    CHECK(tag_diff == Real(0));
    CHECK(vocab_diff > Real(0));
}

TEST_CASE("teacher-forced forward matches sequential decode steps") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    Rng rng(55);

    for (int rep = 0; rep < 5; ++rep) {
        // random target prefix over vocabulary + the OOV source word
        std::vector<std::string> all = {"alpha", "beta", "gamma", "delta", "segnetoov", kSepTok};
        std::vector<std::string> target_in{kBosTok};
        for (std::size_t t = 0; t < 3 + rng.below(3); ++t)
            target_in.push_back(all[rng.below(all.size())]);

        std::vector<int> in_words;
        std::vector<std::vector<int>> in_chars;
        for (const auto& tok : target_in) {
            in_words.push_back(toy.vocab.id(tok));
            in_chars.push_back(char_ids_of(tok, toy.cfg.char_width));
        }
        std::vector<std::uint8_t> blocked(5, 0);
        blocked[static_cast<std::size_t>(rng.below(5))] = 1;

        auto par = model.teacher_forced_forward(toy.src, in_words, in_chars, blocked,
                                                toy.src_tokens, toy.vocab, rt);

        auto enc = model.encode(toy.src, rt);
        CopyContext copy = make_copy_context(enc.back(), toy.src_tokens, blocked, toy.vocab);
        ExtGenSession session(model, enc, copy);
        for (std::size_t t = 0; t < target_in.size(); ++t) {
            auto so = session.step(target_in[t], toy.vocab);
            for (std::size_t v = 0; v < so.final_dist.cols(); ++v)
                CHECK_THAT(so.final_dist.at(0, v),
                           Catch::Matchers::WithinAbs(par.steps.final_dist.at(t, v), 1e-6));
            for (std::size_t v = 0; v < so.tag_dist.cols(); ++v)
                CHECK_THAT(so.tag_dist.at(0, v),
                           Catch::Matchers::WithinAbs(par.steps.tag_dist.at(t, v), 1e-6));
        }
    }
}

TEST_CASE("teacher forcing respects causality") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    std::vector<std::string> t1{kBosTok, "alpha", "beta"};
    std::vector<std::string> t2{kBosTok, "alpha", "gamma"}; // differs at the last position
    auto feats = [&](const std::vector<std::string>& toks) {
        std::pair<std::vector<int>, std::vector<std::vector<int>>> out;
        for (const auto& tok : toks) {
            out.first.push_back(toy.vocab.id(tok));
            out.second.push_back(char_ids_of(tok, toy.cfg.char_width));
        }
        return out;
    };
    auto [w1, c1] = feats(t1);
    auto [w2, c2] = feats(t2);
    std::vector<std::uint8_t> blocked(5, 0);
    auto r1 = model.teacher_forced_forward(toy.src, w1, c1, blocked, toy.src_tokens, toy.vocab, rt);
    auto r2 = model.teacher_forced_forward(toy.src, w2, c2, blocked, toy.src_tokens, toy.vocab, rt);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t v = 0; v < r1.steps.final_dist.cols(); ++v)
            CHECK(r1.steps.final_dist.at(t, v) == r2.steps.final_dist.at(t, v));
}

TEST_CASE("full-model gradient check through copy and coverage") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    rt.train = true;

    std::vector<std::string> target{kBosTok, "alpha", "segnetoov", "delta"};
    std::vector<int> in_words;
    std::vector<std::vector<int>> in_chars;
    for (std::size_t t = 0; t + 1 < target.size(); ++t) {
        in_words.push_back(toy.vocab.id(target[t]));
        in_chars.push_back(char_ids_of(target[t], toy.cfg.char_width));
    }
    std::vector<std::uint8_t> blocked{0, 1, 0, 0, 0}; // partial blocking keeps the gate live
    std::vector<std::uint8_t> gold_extract{0, 1, 0, 0, 0};

    auto loss_fn = [&]() -> Tensor {
        auto fwd = model.teacher_forced_forward(toy.src, in_words, in_chars, blocked,
                                                toy.src_tokens, toy.vocab, rt);
        CopyContext ctx = make_copy_context(fwd.encoder_layers.back(), toy.src_tokens, blocked,
                                            toy.vocab);
        std::vector<int> out_ids;
        std::vector<int> out_tags;
        for (std::size_t t = 1; t < target.size(); ++t) {
            out_ids.push_back(ctx.ext_token_id(target[t], toy.vocab));
            out_tags.push_back(tag_id("NOUN"));
        }
        auto l_e = weighted_bce(fwd.extract, gold_extract, model.cfg.loss.omega_extractor);
        auto l_w = nll_sequence(fwd.steps.final_dist, out_ids);
        auto l_tag = nll_sequence(fwd.steps.tag_dist, out_tags);
        return combine_losses(l_e, l_w.loss, l_tag.loss, model.cfg.loss).l_eg;
    };

    auto rep = grad_check(loss_fn, model.params.trainable(), 1e-6, 1e-4);
    INFO(rep.summary());
    CHECK(rep.passed);
}

TEST_CASE("extractor head matches the raw arithmetic") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    // overwrite the head with a tiny hand-traceable configuration in the
    // first two dimensions; the rest is zeroed
    for (const char* n : {"extractor.w1", "extractor.b1", "extractor.w2", "extractor.b2"})
        for (auto& v : model.params.at(n).array.values()) v = 0;
    auto& w1 = model.params.at("extractor.w1").array;
    w1.at(0, 0) = Real(0.5);
    w1.at(1, 0) = Real(0.2);
    w1.at(0, 1) = Real(-0.1);
    w1.at(1, 1) = Real(0.4);
    auto& b1 = model.params.at("extractor.b1").array;
    b1.at(0, 0) = Real(0.1);
    b1.at(0, 1) = Real(-0.2);
    auto& w2 = model.params.at("extractor.w2").array;
    w2.at(0, 0) = Real(0.8);
    w2.at(1, 0) = Real(-0.6);
    model.params.at("extractor.b2").array.at(0, 0) = Real(0.05);

    Tensor o(1, toy.cfg.d_model);
    o.at(0, 0) = Real(0.3);
    o.at(0, 1) = Real(-0.7);
    auto p = model.extract_probs(o, rt);

    const double h0 = std::tanh(0.3 * 0.5 + (-0.7) * 0.2 + 0.1);
    const double h1 = std::tanh(0.3 * -0.1 + (-0.7) * 0.4 - 0.2);
    const double logit = h0 * 0.8 + h1 * -0.6 + 0.05;
    const double expect = 1.0 / (1.0 + std::exp(-logit));
    CHECK_THAT(p.item(), Catch::Matchers::WithinAbs(expect, 1e-12));
}

TEST_CASE("the copy gate reads decoder state first, context second") {
    Toy toy;
    ExtGenModel model(toy.cfg);
    Runtime rt;
    auto enc = model.encode(toy.src, rt);
    std::vector<std::uint8_t> blocked(5, 0);
    CopyContext ctx = make_copy_context(enc.back(), toy.src_tokens, blocked, toy.vocab);
    Rng rng(17);
    Tensor h = Tensor::rand_uniform(rng, 1, toy.cfg.d_model, -1, 1);
    const std::size_t d = toy.cfg.d_model;

    auto& wu = model.params.at("copy.wu").array;
    for (auto& v : wu.values()) v = 0;

    // a second context whose encoder rows are shifted (Tensor copies share
    // storage, so rebuild the buffer rather than mutating through the copy)
    CopyContext ctx2 = ctx;
    {
        std::vector<Real> shifted = ctx.encoder_top.values();
        for (auto& v : shifted) v += Real(0.5);
        ctx2.encoder_top = Tensor::from_vector(ctx.encoder_top.rows(),
                                               ctx.encoder_top.cols(), std::move(shifted));
    }

    // weight only the first half: the gate must track h and ignore context
    for (std::size_t j = 0; j < d; ++j) wu.at(j, 0) = Real(0.3);
    auto g1 = model.output_heads(h, h, ctx, rt).gate.item();
    auto g2 = model.output_heads(h, h, ctx2, rt).gate.item();
    CHECK(g1 == g2);
    double manual = 0;
    for (std::size_t j = 0; j < d; ++j) manual += 0.3 * double(h.at(0, j));
    CHECK_THAT(double(g1), Catch::Matchers::WithinAbs(1.0 / (1.0 + std::exp(-manual)), 1e-9));

    // weight only the second half: now context changes must move the gate
    for (auto& v : wu.values()) v = 0;
    for (std::size_t j = d; j < 2 * d; ++j) wu.at(j, 0) = Real(0.3);
    auto g3 = model.output_heads(h, h, ctx, rt).gate.item();
    auto g4 = model.output_heads(h, h, ctx2, rt).gate.item();
    CHECK(g3 != g4);
}
