#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "segnet/objective.hpp"

using namespace segnet;

namespace {

ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_ff = 32;
    cfg.char_dim = 8;
    cfg.char_width = 3;
    cfg.rel_clip = 4;
    cfg.vocab_size = 64;
    cfg.max_len = 64;
    cfg.max_sent = 16;
    cfg.src_budget = 64;
    cfg.dropout = 0.1;
    cfg.seed = 5;
    cfg.optim.lr = 3e-3;
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 60;
    cfg.finalize();
    return cfg;
}

} // namespace

TEST_CASE("weighted_bce frozen values") {
    SECTION("p=0.5 y=1") {
        auto l = weighted_bce(Tensor::column({0.5}), {1}, 1.0);
        CHECK_THAT(l.item(), Catch::Matchers::WithinAbs(std::log(2.0), 1e-9));
        auto l2 = weighted_bce(Tensor::column({0.5}), {1}, 2.0);
        CHECK_THAT(l2.item(), Catch::Matchers::WithinAbs(2 * std::log(2.0), 1e-9));
    }
    SECTION("hand-computed mixed batch") {
        auto l = weighted_bce(Tensor::column({0.9, 0.1}), {1, 0}, 0.7);
        const double expect = -(0.7 * std::log(0.9) + std::log(0.9)) / 2.0;
        CHECK_THAT(l.item(), Catch::Matchers::WithinAbs(expect, 1e-9));
        CHECK_THAT(l.item(), Catch::Matchers::WithinAbs(0.0896, 2e-4));
    }
    SECTION("omega=1 equals the unweighted loss") {
        Rng rng(8);
        auto p = Tensor::rand_uniform(rng, 6, 1, 0.05, 0.95);
        std::vector<std::uint8_t> y{1, 0, 1, 1, 0, 0};
        double manual = 0;
        for (std::size_t i = 0; i < 6; ++i) {
            const double pi = p.at(i, 0);
            manual += y[i] ? -std::log(pi) : -std::log(1 - pi);
        }
        manual /= 6.0;
        CHECK_THAT(weighted_bce(p, y, 1.0).item(), Catch::Matchers::WithinAbs(manual, 1e-9));
    }
    SECTION("extreme probabilities are clamped, not infinite") {
        auto l = weighted_bce(Tensor::column({0.0, 1.0}), {1, 0}, 1.0);
        CHECK(std::isfinite(static_cast<double>(l.item())));
    }
}

TEST_CASE("nll_sequence frozen values") {
    SECTION("certain target costs zero") {
        auto d = Tensor::from({{0, 1, 0}});
        CHECK(nll_sequence(d, {1}).loss.item() == Real(0));
    }
    SECTION("two half-probability steps") {
        auto d = Tensor::from({{0.5, 0.5}, {0.5, 0.5}});
        CHECK_THAT(nll_sequence(d, {0, 1}).loss.item(),
                   Catch::Matchers::WithinAbs(2 * std::log(2.0), 1e-9));
    }
    SECTION("uniform over ten, three steps") {
        Tensor d(3, 10, Real(0.1));
        CHECK_THAT(nll_sequence(d, {3, 7, 0}).loss.item(),
                   Catch::Matchers::WithinAbs(3 * std::log(10.0), 1e-9));
    }
    SECTION("unreachable target clamps with a warning count") {
        auto d = Tensor::from({{0.5, 0.5}});
        auto r = nll_sequence(d, {5}); // beyond the distribution width
        CHECK(r.clamped == 1);
        CHECK(std::isfinite(static_cast<double>(r.loss.item())));
        CHECK(r.loss.item() > Real(20)); // -log(1e-12)
    }
}

TEST_CASE("combine_losses weighting") {
    auto e = Tensor::scalar(2), w = Tensor::scalar(4), tg = Tensor::scalar(8);
    LossWeights lw;

    SECTION("alpha=1 makes L_g the word loss") {
        lw.alpha = 1.0;
        auto c = combine_losses(e, w, tg, lw);
        CHECK(c.l_g.item() == Real(4));
    }
    SECTION("beta=0.5 averages extraction and generation") {
        lw.alpha = 1.0;
        lw.beta = 0.5;
        auto c = combine_losses(e, Tensor::scalar(4), tg, lw);
        CHECK_THAT(c.l_eg.item(), Catch::Matchers::WithinAbs(3.0, 1e-12));
    }
    SECTION("published weights") {
        lw.alpha = 0.7;
        auto c = combine_losses(e, Tensor::scalar(1), Tensor::scalar(2), lw);
        CHECK_THAT(c.l_g.item(), Catch::Matchers::WithinAbs(1.3, 1e-12));
    }
    SECTION("linearity: doubling inputs doubles outputs") {
        auto c1 = combine_losses(e, w, tg, lw);
        auto c2 = combine_losses(scale(e, 2), scale(w, 2), scale(tg, 2), lw);
        CHECK_THAT(c2.l_g.item(), Catch::Matchers::WithinAbs(2 * c1.l_g.item(), 1e-12));
        CHECK_THAT(c2.l_eg.item(), Catch::Matchers::WithinAbs(2 * c1.l_eg.item(), 1e-12));
    }
    SECTION("non-finite input aborts") {
        auto bad = Tensor::scalar(std::numeric_limits<Real>::quiet_NaN());
        CHECK_THROWS_AS(combine_losses(bad, w, tg, lw), NumericError);
    }
}

TEST_CASE("adam optimizer") {
    SECTION("one step on a quadratic bowl reduces the loss") {
        ParameterStore ps;
        auto& p = ps.add("x", Tensor::row({3.0, -2.0}));
        Adam opt({&p}, 1e-4);
        auto loss = [&] { return sum_all(mul(p.array, p.array)); };
        const double before = loss().item();
        opt.zero_grad();
        loss().backward();
        opt.step();
        CHECK(loss().item() < before);
    }
    SECTION("global norm clipping scales a norm-10 gradient to 1") {
        ParameterStore ps;
        auto& a = ps.add("a", Tensor::row({0.0, 0.0}));
        auto& b = ps.add("b", Tensor::row({0.0}));
        Adam opt({&a, &b}, 1e-3);
        a.array.grad() = {Real(6), Real(0)};
        b.array.grad() = {Real(8)};
        const double norm = opt.clip(1.0);
        CHECK_THAT(norm, Catch::Matchers::WithinAbs(10.0, 1e-12));
        CHECK_THAT(opt.global_grad_norm(), Catch::Matchers::WithinAbs(1.0, 1e-12));
        CHECK_THAT(static_cast<double>(a.array.grad()[0]),
                   Catch::Matchers::WithinAbs(0.6, 1e-12));
    }
    SECTION("gradients below the threshold pass through unchanged") {
        ParameterStore ps;
        auto& a = ps.add("a", Tensor::row({0.0}));
        Adam opt({&a}, 1e-3);
        a.array.grad() = {Real(0.5)};
        opt.clip(1.0);
        CHECK(a.array.grad()[0] == Real(0.5));
    }
}

TEST_CASE("plateau schedule halves on regression and stops on patience") {
    ParameterStore ps;
    ps.add("x", Tensor::scalar(1));
    Adam opt(ps.trainable(), 1.0);
    PlateauSchedule sched(opt, ps, /*higher_is_better=*/true, 3);

    CHECK_FALSE(sched.observe(0.5, 1));
    CHECK(opt.lr() == 1.0);
    CHECK_FALSE(sched.observe(0.4, 2)); // drop -> halve
    CHECK(opt.lr() == 0.5);
    CHECK_FALSE(sched.observe(0.45, 3)); // below best, not below previous
    CHECK(opt.lr() == 0.5);
    CHECK(sched.observe(0.41, 4)); // third stale evaluation in a row -> stop
    CHECK(opt.lr() == 0.25);
    CHECK(sched.best() == 0.5);
    CHECK(sched.best_epoch() == 1);
}

TEST_CASE("plateau schedule restores the best parameters") {
    ParameterStore ps;
    auto& p = ps.add("x", Tensor::scalar(1));
    Adam opt(ps.trainable(), 1.0);
    PlateauSchedule sched(opt, ps, true, 5);
    sched.observe(0.9, 1); // snapshot at value 1
    p.array.values()[0] = Real(42);
    sched.observe(0.1, 2);
    sched.restore_best();
    CHECK(p.array.values()[0] == Real(1));
}

TEST_CASE("selector overfits a separable toy task") {
    auto cfg = micro_config();
    RuleTagger tagger;

    // salient sentences carry the marker word
    std::vector<Document> docs;
    for (int d = 0; d < 6; ++d) {
        RawExample raw;
        raw.id = "toy" + std::to_string(d);
        raw.body = "the keystone concept appears here. plain filler text sits here. "
                   "another keystone concept line. nothing important at all.";
        raw.keyphrases = {"keystone concept"};
        docs.push_back(preprocess(raw, tagger));
    }
    Vocab vocab = Vocab::build(docs, cfg.vocab_size);
    cfg.vocab_size = vocab.size();
    cfg.optim.epochs = 40;
    SelectorModel model(cfg);

    auto result = train_selector(model, docs, docs, vocab, /*target_metric=*/0.99);
    CHECK_FALSE(result.aborted);
    const double f1 = selector_micro_f1(model, docs, vocab);
    CHECK(f1 >= 0.95);

    // training sentences score on the correct side of 0.5
    for (std::size_t s = 0; s < docs[0].sentences.size(); ++s) {
        const double p = model.score_sentence(docs[0], s, vocab);
        if (docs[0].salience[s])
            CHECK(p >= 0.5);
        else
            CHECK(p < 0.5);
    }
}

TEST_CASE("extractor-generator overfits a small corpus") {
    auto cfg = micro_config();
    cfg.optim.epochs = 300;
    cfg.optim.lr = 3e-3;
    cfg.dropout = 0.0;
    RuleTagger tagger;

    const std::vector<std::string> nouns = {"engine", "matrix", "kernel", "tensor",
                                            "cache",  "socket", "parser", "lexer"};
    std::vector<Document> docs;
    for (int d = 0; d < 6; ++d) {
        RawExample raw;
        raw.id = "doc" + std::to_string(d);
        const std::string a = nouns[d % nouns.size()];
        const std::string b = nouns[(d + 3) % nouns.size()];
        raw.body = "the " + a + " " + b + " design works well. some unrelated filler sentence.";
        raw.keyphrases = {a + " " + b, "fast " + a};
        docs.push_back(preprocess(raw, tagger));
        REQUIRE(docs.back().present.size() == 1);
        REQUIRE(docs.back().absent.size() == 1);
    }
    Vocab vocab = Vocab::build(docs, cfg.vocab_size);
    cfg.vocab_size = vocab.size();
    ExtGenModel model(cfg);

    auto result = train_extgen(model, docs, docs, vocab, tagger, /*target_loss=*/0.03);
    CHECK_FALSE(result.aborted);
    REQUIRE_FALSE(result.log.empty());
    CHECK(result.log.back().l_eg < 0.4);

    // extraction recovers the gold labels on the training set
    Runtime rt;
    std::size_t wrong = 0, exact = 0;
    for (const auto& doc : docs) {
        auto ex = make_extgen_example(doc, vocab, tagger, cfg);
        auto enc = model.encode(ex.src, rt);
        auto probs = model.extract_probs(enc.back(), rt);
        for (std::size_t t = 0; t < ex.gold_extract.size(); ++t) {
            const bool pred = probs.at(t, 0) >= Real(0.5);
            if (pred != (ex.gold_extract[t] != 0)) ++wrong;
        }
        // sequential greedy decoding reproduces the absent phrase
        CopyContext ctx = make_copy_context(enc.back(), ex.src_tokens, ex.gold_extract, vocab);
        ExtGenSession session(model, enc, ctx);
        std::vector<std::string> decoded;
        std::string input = kBosTok;
        for (int step = 0; step < 10; ++step) {
            auto so = session.step(input, vocab);
            std::size_t best = 0;
            for (std::size_t v = 1; v < so.final_dist.cols(); ++v)
                if (so.final_dist.at(0, v) > so.final_dist.at(0, best)) best = v;
            const std::string w = ctx.ext_word(static_cast<int>(best), vocab);
            if (w == kEosTok) break;
            decoded.push_back(w);
            input = w;
        }
        std::vector<std::string> want = doc.absent[0];
        if (decoded == want) ++exact;
    }
    CHECK(wrong == 0);
    CHECK(exact >= 5);
}

TEST_CASE("an absurd learning rate degrades gracefully") {
    // loss clamping keeps even a blown-up model finite; the plateau
    // schedule then stops training and the best checkpoint is restored
    auto cfg = micro_config();
    cfg.optim.epochs = 40;
    cfg.optim.lr = 1e18;
    RuleTagger tagger;
    RawExample raw;
    raw.id = "solo";
    raw.body = "alpha beta gamma here.";
    raw.keyphrases = {"alpha beta", "other phrase"};
    std::vector<Document> docs{preprocess(raw, tagger)};
    Vocab vocab = Vocab::build(docs, cfg.vocab_size);
    cfg.vocab_size = vocab.size();
    ExtGenModel model(cfg);
    auto result = train_extgen(model, docs, docs, vocab, tagger);
    CHECK_FALSE(result.aborted);
    CHECK(result.log.size() < cfg.optim.epochs); // patience stopped it
    for (std::size_t i = 0; i < model.params.size(); ++i)
        for (Real v : model.params[i].array.values()) REQUIRE(std::isfinite(double(v)));
    // the restored best validation belongs to the first (pre-blow-up) epoch
    CHECK(result.best_epoch == 1);
}

TEST_CASE("training is deterministic for a fixed seed") {
    auto cfg = micro_config();
    cfg.optim.epochs = 3;
    RuleTagger tagger;
    std::vector<Document> docs;
    for (int d = 0; d < 3; ++d) {
        RawExample raw;
        raw.id = "det" + std::to_string(d);
        raw.body = "alpha beta gamma works. delta filler here.";
        raw.keyphrases = {"alpha beta", "hidden phrase"};
        docs.push_back(preprocess(raw, tagger));
    }
    Vocab vocab = Vocab::build(docs, cfg.vocab_size);
    cfg.vocab_size = vocab.size();

    auto run = [&]() {
        ExtGenModel model(cfg);
        return train_extgen(model, docs, docs, vocab, tagger);
    };
    auto r1 = run();
    auto r2 = run();
    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].l_eg == r2.log[i].l_eg);
        CHECK(r1.log[i].l_w == r2.log[i].l_w);
        CHECK(r1.log[i].val_metric == r2.log[i].val_metric);
    }
}

TEST_CASE("overlong gold targets truncate to whole phrases at the decode limit") {
    auto cfg = micro_config();
    cfg.decode_max_len = 8;
    RuleTagger tagger;
    RawExample raw;
    raw.id = "long";
    raw.body = "alpha beta gamma delta here.";
    raw.keyphrases = {"one two three", "four five six", "seven eight nine", "ten eleven twelve"};
    std::vector<Document> docs{preprocess(raw, tagger)};
    Vocab vocab = Vocab::build(docs, cfg.vocab_size);
    cfg.vocab_size = vocab.size();
    REQUIRE(docs[0].absent.size() == 4); // 4 phrases -> 12 tokens + seps, over the limit

    auto ex = make_extgen_example(docs[0], vocab, tagger, cfg);
    // emitted sequence (dec_out) must fit the decode budget and end with eos
    CHECK(ex.dec_out_tokens.size() <= cfg.decode_max_len);
    CHECK(ex.dec_out_tokens.back() == kEosTok);
    // and contain only whole phrases: count separators + phrase lengths
    std::size_t phrase_len = 0, phrases = 1;
    for (const auto& tok : ex.dec_out_tokens) {
        if (tok == kSepTok) { CHECK(phrase_len == 3); phrase_len = 0; ++phrases; }
        else if (tok != kEosTok) ++phrase_len;
    }
    CHECK(phrase_len == 3);
    CHECK(phrases == 2);
}

TEST_CASE("training handles documents lacking absent or present phrases") {
    auto cfg = micro_config();
    cfg.optim.epochs = 60;
    RuleTagger tagger;
    std::vector<Document> docs;
    {
        RawExample raw; // present only: the decoder target is <bos> <eos>
        raw.id = "present-only";
        raw.body = "the alpha beta method works fine. filler sentence sits here.";
        raw.keyphrases = {"alpha beta"};
        docs.push_back(preprocess(raw, tagger));
        REQUIRE(docs.back().absent.empty());
    }
    {
        RawExample raw; // absent only: no extraction positives anywhere
        raw.id = "absent-only";
        raw.body = "completely unrelated cover text. nothing matches here.";
        raw.keyphrases = {"hidden gamma notion"};
        docs.push_back(preprocess(raw, tagger));
        REQUIRE(docs.back().present.empty());
    }
    Vocab vocab = Vocab::build(docs, cfg.vocab_size);
    cfg.vocab_size = vocab.size();
    ExtGenModel model(cfg);
    auto result = train_extgen(model, docs, docs, vocab, tagger, 0.05);
    CHECK_FALSE(result.aborted);
    REQUIRE_FALSE(result.log.empty());
    CHECK(result.log.back().l_eg < 1.0);

    // decoding the present-only document ends immediately
    Runtime rt;
    auto ex = make_extgen_example(docs[0], vocab, tagger, cfg);
    auto enc = model.encode(ex.src, rt);
    CopyContext ctx = make_copy_context(enc.back(), ex.src_tokens, ex.gold_extract, vocab);
    ExtGenSession session(model, enc, ctx);
    auto so = session.step(kBosTok, vocab);
    std::size_t best = 0;
    for (std::size_t v = 1; v < so.final_dist.cols(); ++v)
        if (so.final_dist.at(0, v) > so.final_dist.at(0, best)) best = v;
    CHECK(static_cast<int>(best) == Vocab::kEosId);
}
