#include <catch2/catch_amalgamated.hpp>

#include "segnet/gradcheck.hpp"
#include "segnet/objective.hpp"
#include "segnet/selector.hpp"

using namespace segnet;

namespace {

ModelConfig selector_config() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.d_ff = 8;
    cfg.char_dim = 4;
    cfg.char_width = 3;
    cfg.rel_clip = 4;
    cfg.vocab_size = 32;
    cfg.max_len = 32;
    cfg.max_sent = 8;
    cfg.src_budget = 32;
    cfg.dropout = 0.0;
    cfg.seed = 11;
    cfg.finalize();
    return cfg;
}

Document doc_from_text(const std::string& body, std::vector<std::string> keyphrases = {}) {
    RawExample raw;
    raw.id = "d";
    raw.body = body;
    raw.keyphrases = std::move(keyphrases);
    return preprocess(raw, RuleTagger{});
}

Vocab vocab_of(const std::vector<Document>& docs, std::size_t size = 64) {
    return Vocab::build(docs, size);
}

} // namespace

TEST_CASE("score_sentence yields probabilities and is pure in eval mode") {
    auto cfg = selector_config();
    SelectorModel model(cfg);
    auto doc = doc_from_text("Deep models learn features. Shallow ones do not.");
    Vocab vocab = vocab_of({doc});

    const double p0 = model.score_sentence(doc, 0, vocab);
    CHECK(p0 > 0.0);
    CHECK(p0 < 1.0);
    CHECK(model.score_sentence(doc, 0, vocab) == p0);
    CHECK(model.score_sentence(doc, 1, vocab) > 0.0);
}

TEST_CASE("empty sentences are a contract error") {
    auto cfg = selector_config();
    SelectorModel model(cfg);
    Runtime rt;
    CHECK_THROWS_AS(model.sentence_vector(TokenFeatures{}, rt), ContractError);
}

TEST_CASE("single-token sentence pools to equal max and mean halves") {
    auto cfg = selector_config();
    SelectorModel model(cfg);
    auto doc = doc_from_text("word");
    Vocab vocab = vocab_of({doc});
    Runtime rt;
    auto pooled = model.sentence_vector(model.sentence_features(doc, 0, vocab), rt);
    REQUIRE(pooled.cols() == 2 * cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_model; ++j)
        CHECK_THAT(pooled.at(0, j),
                   Catch::Matchers::WithinAbs(pooled.at(0, j + cfg.d_model), 1e-12));
}

TEST_CASE("select_sentences budget logic") {
    SECTION("greedy skip at the budget") {
        std::vector<std::size_t> lens{80, 80, 80};
        std::vector<double> probs{1.0, 1.0, 1.0};
        auto sel = select_sentences(lens, probs, 200);
        CHECK(sel == std::vector<std::size_t>{0, 1});
    }
    SECTION("a later short sentence may still fit") {
        std::vector<std::size_t> lens{150, 100, 40};
        std::vector<double> probs{0.9, 0.9, 0.9};
        auto sel = select_sentences(lens, probs, 200);
        CHECK(sel == std::vector<std::size_t>{0, 2});
    }
    SECTION("fallback to leading sentences when nothing qualifies") {
        std::vector<std::size_t> lens{50, 60, 120};
        std::vector<double> probs{0.0, 0.0, 0.0};
        auto sel = select_sentences(lens, probs, 200);
        CHECK(sel == std::vector<std::size_t>{0, 1});
    }
    SECTION("oracle labels on the reference document select the documented sentence set") {
        auto raws = jsonl::read_raw(std::string(SEGNET_TEST_DATA_DIR) + "/elearning.jsonl");
        auto doc = preprocess(raws[0], RuleTagger{});
        auto sel = gold_selection(doc, 200);
        CHECK(sel == std::vector<std::size_t>{0, 1, 2, 3, 5, 7, 10});
        std::size_t total = 0;
        for (auto s : sel) total += doc.sentence_words(s);
        CHECK(total <= 200);
    }
}

TEST_CASE("selection invariants over randomized documents") {
    Rng rng(404);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t n = 1 + rng.below(12);
        std::vector<std::size_t> lens(n);
        std::vector<double> probs(n);
        for (std::size_t i = 0; i < n; ++i) {
            lens[i] = 1 + rng.below(120);
            probs[i] = rng.uniform();
        }
        const double t1 = rng.uniform(0.1, 0.6);
        const double t2 = t1 + rng.uniform(0.0, 0.4);
        auto sel = select_sentences(lens, probs, 200, t1);
        std::size_t total = 0;
        for (std::size_t i = 0; i < sel.size(); ++i) {
            total += lens[sel[i]];
            if (i) CHECK(sel[i] > sel[i - 1]);
        }
        CHECK(total <= 200);
        // raising the threshold never adds a sentence to the candidate set
        for (std::size_t s = 0; s < n; ++s)
            if (probs[s] >= t2) CHECK(probs[s] >= t1);
    }
}

TEST_CASE("selection metrics") {
    SECTION("perfect selection") {
        auto m = selection_metrics({{0, 2}}, {{1, 0, 1}});
        CHECK(m.precision == 1.0);
        CHECK(m.recall == 1.0);
        CHECK(m.f1 == 1.0);
    }
    SECTION("disjoint non-empty sets score zero") {
        auto m = selection_metrics({{0}}, {{0, 1}});
        CHECK(m.precision == 0.0);
        CHECK(m.recall == 0.0);
        CHECK(m.f1 == 0.0);
    }
    SECTION("hand-counted overlap") {
        // selected {0,1,2}, gold {1,2,5}
        auto m = selection_metrics({{0, 1, 2}}, {{0, 1, 1, 0, 0, 1}});
        CHECK_THAT(m.precision, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
        CHECK_THAT(m.recall, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
    }
    SECTION("zero denominators give zero") {
        auto m = selection_metrics({{}}, {{0, 0}});
        CHECK(m.precision == 0.0);
        CHECK(m.recall == 0.0);
    }
}

TEST_CASE("selector end-to-end gradient check") {
    auto cfg = selector_config();
    SelectorModel model(cfg);
    auto doc = doc_from_text("Alpha beta gamma delta. Epsilon zeta eta.");
    Vocab vocab = vocab_of({doc});

    Runtime rt;
    rt.train = true; // batch statistics in batch norm, no dropout, no updates
    std::vector<std::uint8_t> labels{1, 0};

    auto loss_fn = [&]() -> Tensor {
        auto v0 = model.sentence_vector(model.sentence_features(doc, 0, vocab), rt);
        auto v1 = model.sentence_vector(model.sentence_features(doc, 1, vocab), rt);
        auto probs = model.classify(concat_rows({v0, v1}), rt);
        return weighted_bce(probs, labels, model.cfg.loss.omega_selector);
    };

    auto rep = grad_check(loss_fn, model.params.trainable(), 1e-6, 1e-4);
    INFO(rep.summary());
    CHECK(rep.passed);
}
