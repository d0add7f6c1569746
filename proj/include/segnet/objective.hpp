#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "segnet/extgen.hpp"
#include "segnet/selector.hpp"

namespace segnet {

// ------------------------------------------------------------------ losses

// -(1/N) sum [ w*y*log p + (1-y)*log(1-p) ], probabilities clamped to
// [eps, 1-eps].
inline Tensor weighted_bce(const Tensor& probs, const std::vector<std::uint8_t>& labels,
                           double omega, Real eps = Real(1e-7)) {
    if (probs.cols() != 1 || probs.rows() != labels.size())
        throw ContractError("weighted_bce: probs must be [Nx1] aligned with labels");
    const std::size_t n = labels.size();
    Tensor w_pos(n, 1), w_neg(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        w_pos.at(i, 0) = labels[i] ? static_cast<Real>(omega) : Real(0);
        w_neg.at(i, 0) = labels[i] ? Real(0) : Real(1);
    }
    Tensor p = clamp(probs, eps, Real(1) - eps);
    Tensor one_minus(n, 1, Real(1));
    Tensor term = add(mul(w_pos, log_op(p)), mul(w_neg, log_op(sub(one_minus, p))));
    return neg(mean_all(term));
}

struct NllResult {
    Tensor loss;              // sum over steps of -log p(target)
    std::size_t clamped = 0;  // targets whose probability hit the floor
};

// Sum (not mean) of negative log-likelihoods. A target id outside the
// distribution's width (an uncopyable out-of-vocabulary word) has
// probability zero and is clamped at eps with a warning count.
inline NllResult nll_sequence(const Tensor& dists, const std::vector<int>& targets,
                              Real eps = Real(1e-12)) {
    if (dists.rows() != targets.size())
        throw ContractError("nll_sequence: one distribution row per target required");
    const std::size_t t_steps = targets.size();
    NllResult res;
    std::vector<int> safe(t_steps);
    Tensor valid(t_steps, 1);
    for (std::size_t t = 0; t < t_steps; ++t) {
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= dists.cols()) {
            safe[t] = 0;
            valid.at(t, 0) = Real(0);
            ++res.clamped;
        } else {
            safe[t] = targets[t];
            valid.at(t, 0) = Real(1);
        }
    }
    Tensor picked = mul(pick_per_row(dists, safe), valid);
    for (std::size_t t = 0; t < t_steps; ++t)
        if (valid.at(t, 0) == Real(1) && picked.at(t, 0) < eps) ++res.clamped;
    res.loss = neg(sum_all(log_op(clamp(picked, eps, Real(1)))));
    return res;
}

struct CombinedLoss {
    Tensor l_g;
    Tensor l_eg;
};

// L_g = alpha*L_w + (1-alpha)*L_tag; L_eg = beta*L_e + (1-beta)*L_g.
inline CombinedLoss combine_losses(const Tensor& l_e, const Tensor& l_w, const Tensor& l_tag,
                                   const LossWeights& w) {
    for (const Tensor* t : {&l_e, &l_w, &l_tag})
        if (!std::isfinite(static_cast<double>(t->item())))
            throw NumericError("non-finite loss component; aborting training");
    CombinedLoss out;
    out.l_g = add(scale(l_w, static_cast<Real>(w.alpha)),
                  scale(l_tag, static_cast<Real>(1.0 - w.alpha)));
    out.l_eg = add(scale(l_e, static_cast<Real>(w.beta)),
                   scale(out.l_g, static_cast<Real>(1.0 - w.beta)));
    return out;
}

// --------------------------------------------------------------- optimizer

// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
class Adam {
public:
    Adam(std::vector<Parameter*> params, double lr)
        : params_(std::move(params)), lr_(lr) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->array.size(), Real(0));
            v_[i].assign(params_[i]->array.size(), Real(0));
        }
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

    double global_grad_norm() const {
        double s = 0;
        for (Parameter* p : params_)
            for (Real g : p->array.grad()) s += static_cast<double>(g) * g;
        return std::sqrt(s);
    }

    // scales gradients so the global norm never exceeds max_norm
    double clip(double max_norm) {
        const double norm = global_grad_norm();
        if (norm > max_norm && norm > 0) {
            const Real f = static_cast<Real>(max_norm / norm);
            for (Parameter* p : params_)
                for (Real& g : p->array.grad()) g *= f;
        }
        return norm;
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(0.9, double(t_));
        const double bc2 = 1.0 - std::pow(0.999, double(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& vals = params_[i]->array.values();
            auto& grads = params_[i]->array.grad();
            for (std::size_t j = 0; j < vals.size(); ++j) {
                const double g = grads[j];
                m_[i][j] = static_cast<Real>(0.9 * m_[i][j] + 0.1 * g);
                v_[i][j] = static_cast<Real>(0.999 * v_[i][j] + 0.001 * g * g);
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                vals[j] -= static_cast<Real>(lr_ * mhat / (std::sqrt(vhat) + 1e-8));
            }
        }
    }

    void zero_grad() {
        for (Parameter* p : params_) p->array.zero_grad();
    }

private:
    std::vector<Parameter*> params_;
    double lr_;
    std::vector<std::vector<Real>> m_, v_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------- training

struct EpochLog {
    std::size_t epoch = 0;
    double l_e = 0, l_w = 0, l_tag = 0, l_g = 0, l_eg = 0;
    double val_metric = 0;
    double lr = 0;
    std::size_t clamped = 0; // target probabilities that hit the floor
};

struct TrainResult {
    std::vector<EpochLog> log;
    bool aborted = false;
    std::size_t best_epoch = 0;
    double best_val = 0;
};

inline std::vector<std::vector<Real>> snapshot(const ParameterStore& ps) {
    std::vector<std::vector<Real>> out(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) out[i] = ps[i].array.values();
    return out;
}

inline void restore_values(ParameterStore& ps, const std::vector<std::vector<Real>>& snap) {
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].array.values() = snap[i];
}

// Plateau schedule shared by both trainers: halve the learning rate when
// the validation metric regresses against the previous evaluation, stop
// when it has not improved on the best for `patience` evaluations, keep
// the best-validation parameters.
class PlateauSchedule {
public:
    PlateauSchedule(Adam& opt, ParameterStore& ps, bool higher_is_better, std::size_t patience)
        : opt_(&opt), ps_(&ps), higher_better_(higher_is_better), patience_(patience) {}

    bool observe(double val, std::size_t epoch) {
        const bool improved_best =
            !has_best_ || (higher_better_ ? val > best_ : val < best_);
        if (has_prev_ && (higher_better_ ? val < prev_ : val > prev_))
            opt_->set_lr(opt_->lr() / 2.0);
        prev_ = val;
        has_prev_ = true;
        if (improved_best) {
            best_ = val;
            best_epoch_ = epoch;
            has_best_ = true;
            stale_ = 0;
            best_params_ = snapshot(*ps_);
        } else {
            ++stale_;
        }
        return stale_ >= patience_; // true = stop
    }

    void restore_best() {
        if (has_best_ && !best_params_.empty()) restore_values(*ps_, best_params_);
    }

    double best() const { return best_; }
    std::size_t best_epoch() const { return best_epoch_; }
    bool has_best() const { return has_best_; }

private:
    Adam* opt_;
    ParameterStore* ps_;
    bool higher_better_;
    std::size_t patience_;
    double prev_ = 0, best_ = 0;
    bool has_prev_ = false, has_best_ = false;
    std::size_t stale_ = 0, best_epoch_ = 0;
    std::vector<std::vector<Real>> best_params_;
};

// ------------------------------------------------------- selector training

struct SentenceInstance {
    std::size_t doc = 0;
    std::size_t sentence = 0;
    std::uint8_t label = 0;
};

inline std::vector<SentenceInstance> sentence_instances(const std::vector<Document>& docs) {
    std::vector<SentenceInstance> out;
    for (std::size_t d = 0; d < docs.size(); ++d)
        for (std::size_t s = 0; s < docs[d].sentences.size(); ++s)
            if (docs[d].sentences[s].first < docs[d].sentences[s].second)
                out.push_back({d, s, docs[d].salience[s]});
    return out;
}

// micro-F1 of thresholded sentence classification
inline double selector_micro_f1(const SelectorModel& model, const std::vector<Document>& docs,
                                const Vocab& vocab, double threshold = 0.5) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (const auto& doc : docs)
        for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
            if (doc.sentences[s].first >= doc.sentences[s].second) continue;
            const bool pred = model.score_sentence(doc, s, vocab) >= threshold;
            const bool gold = doc.salience[s] != 0;
            if (pred && gold) ++tp;
            else if (pred) ++fp;
            else if (gold) ++fn;
        }
    const double p = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    const double r = tp + fn ? double(tp) / double(tp + fn) : 0.0;
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

inline TrainResult train_selector(SelectorModel& model, const std::vector<Document>& train_docs,
                                  const std::vector<Document>& val_docs, const Vocab& vocab,
                                  double target_metric = 0.0) {
    const ModelConfig& cfg = model.cfg;
    Adam opt(model.params.trainable(), cfg.optim.lr);
    PlateauSchedule sched(opt, model.params, /*higher_is_better=*/true, cfg.optim.patience);
    Rng rng(cfg.seed ^ 0x5e1ec70aull);
    TrainResult result;

    auto instances = sentence_instances(train_docs);
    if (instances.empty()) throw DataError("selector training: no sentences");

    for (std::size_t epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
        rng.shuffle(instances);
        double epoch_loss = 0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < instances.size(); start += cfg.optim.batch_size) {
            const std::size_t end = std::min(instances.size(), start + cfg.optim.batch_size);
            Runtime rt;
            rt.train = true;
            rt.dropout_rate = static_cast<Real>(cfg.dropout);
            rt.rng = &rng;
            rt.bn_update = true;
            std::vector<Tensor> pooled;
            std::vector<std::uint8_t> labels;
            pooled.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& inst = instances[i];
                pooled.push_back(model.sentence_vector(
                    model.sentence_features(train_docs[inst.doc], inst.sentence, vocab), rt));
                labels.push_back(inst.label);
            }
            Tensor probs = model.classify(concat_rows(pooled), rt);
            Tensor loss = weighted_bce(probs, labels, cfg.loss.omega_selector);
            if (!std::isfinite(static_cast<double>(loss.item()))) {
                result.aborted = true;
                sched.restore_best();
                return result;
            }
            opt.zero_grad();
            loss.backward();
            if (!std::isfinite(opt.global_grad_norm())) {
                result.aborted = true;
                sched.restore_best();
                return result;
            }
            opt.clip(cfg.optim.clip_norm);
            opt.step();
            epoch_loss += static_cast<double>(loss.item());
            ++batches;
        }
        const double val = selector_micro_f1(model, val_docs, vocab);
        EpochLog log;
        log.epoch = epoch;
        log.l_e = epoch_loss / std::max<std::size_t>(1, batches);
        log.val_metric = val;
        log.lr = opt.lr();
        result.log.push_back(log);
        const bool stop = sched.observe(val, epoch);
        if (stop) break;
        if (target_metric > 0 && val >= target_metric) break;
    }
    sched.restore_best();
    result.best_epoch = sched.best_epoch();
    result.best_val = sched.best();
    return result;
}

// ------------------------------------------------- extractor-generator training

// Everything fixed about one training document, precomputed once.
struct ExtGenExample {
    TokenFeatures src;
    std::vector<std::string> src_tokens;
    std::vector<std::uint8_t> gold_extract;  // also the training-time copy block
    std::vector<int> dec_in_words;           // target[:-1] as vocabulary ids
    std::vector<std::vector<int>> dec_in_chars;
    std::vector<std::string> dec_out_tokens; // target[1:] surface forms
    std::vector<int> dec_out_tags;           // aligned tag ids
};

inline ExtGenExample make_extgen_example(const Document& doc, const Vocab& vocab,
                                         const RuleTagger& tagger, const ModelConfig& cfg) {
    ExtGenExample ex;
    auto sel = build_selected_input(doc, gold_selection(doc, cfg.src_budget));
    if (sel.tokens.empty())
        throw DataError("document " + doc.id + " yields an empty selection");
    ex.src = source_features(sel.tokens, sel.tags, sel.segment_ids, vocab, cfg);
    ex.src_tokens = sel.tokens;
    ex.gold_extract = sel.extract_labels;

    DecoderTarget tgt = build_decoder_target(doc, tagger);
    if (tgt.tokens.size() > cfg.decode_max_len + 2) {
        // keep whole leading phrases that fit the decode limit
        std::vector<std::pair<std::size_t, std::size_t>> ranges;
        std::size_t start = 1;
        for (std::size_t t = 1; t + 1 < tgt.tokens.size(); ++t)
            if (tgt.tokens[t] == kSepTok) {
                ranges.emplace_back(start, t);
                start = t + 1;
            }
        ranges.emplace_back(start, tgt.tokens.size() - 1);
        std::vector<std::string> toks{kBosTok}, tags{"SPECIAL"};
        std::size_t used = 1; // room for <eos>
        for (auto [s, e] : ranges) {
            const std::size_t need = (toks.size() > 1 ? 1 : 0) + (e - s);
            if (used + need > cfg.decode_max_len) break;
            if (toks.size() > 1) {
                toks.push_back(kSepTok);
                tags.push_back("SPECIAL");
            }
            for (std::size_t t = s; t < e; ++t) {
                toks.push_back(tgt.tokens[t]);
                tags.push_back(tgt.tags[t]);
            }
            used += need;
        }
        toks.push_back(kEosTok);
        tags.push_back("SPECIAL");
        tgt.tokens = std::move(toks);
        tgt.tags = std::move(tags);
    }
    for (std::size_t t = 0; t + 1 < tgt.tokens.size(); ++t) {
        ex.dec_in_words.push_back(vocab.id(tgt.tokens[t]));
        ex.dec_in_chars.push_back(char_ids_of(tgt.tokens[t], cfg.char_width));
    }
    for (std::size_t t = 1; t < tgt.tokens.size(); ++t) {
        ex.dec_out_tokens.push_back(tgt.tokens[t]);
        ex.dec_out_tags.push_back(tgt.tags[t] == "SPECIAL" ? special_tag_id()
                                                           : tag_id(tgt.tags[t]));
    }
    return ex;
}

struct ExtGenLosses {
    Tensor l_e, l_w, l_tag, l_g, l_eg;
    std::size_t clamped = 0;
};

inline ExtGenLosses extgen_document_loss(const ExtGenModel& model, const ExtGenExample& ex,
                                         const Vocab& vocab, const Runtime& rt) {
    auto fwd = model.teacher_forced_forward(ex.src, ex.dec_in_words, ex.dec_in_chars,
                                            ex.gold_extract, ex.src_tokens, vocab, rt);
    ExtGenLosses out;
    out.l_e = weighted_bce(fwd.extract, ex.gold_extract, model.cfg.loss.omega_extractor);

    // build the copy-extended target ids against this document's OOV list
    CopyContext ctx = make_copy_context(fwd.encoder_layers.back(), ex.src_tokens,
                                        ex.gold_extract, vocab);
    std::vector<int> out_ids;
    out_ids.reserve(ex.dec_out_tokens.size());
    for (const auto& tok : ex.dec_out_tokens) out_ids.push_back(ctx.ext_token_id(tok, vocab));

    auto nll_w = nll_sequence(fwd.steps.final_dist, out_ids);
    auto nll_tag = nll_sequence(fwd.steps.tag_dist, ex.dec_out_tags);
    out.clamped = nll_w.clamped + nll_tag.clamped;
    auto combined = combine_losses(out.l_e, nll_w.loss, nll_tag.loss, model.cfg.loss);
    out.l_w = nll_w.loss;
    out.l_tag = nll_tag.loss;
    out.l_g = combined.l_g;
    out.l_eg = combined.l_eg;
    return out;
}

inline TrainResult train_extgen(ExtGenModel& model, const std::vector<Document>& train_docs,
                                const std::vector<Document>& val_docs, const Vocab& vocab,
                                const RuleTagger& tagger, double target_loss = -1.0) {
    const ModelConfig& cfg = model.cfg;
    if (target_loss < 0) target_loss = cfg.optim.target_loss;
    Adam opt(model.params.trainable(), cfg.optim.lr);
    PlateauSchedule sched(opt, model.params, /*higher_is_better=*/false, cfg.optim.patience);
    Rng rng(cfg.seed ^ 0xe6c9a11eull);
    TrainResult result;

    std::vector<ExtGenExample> examples;
    examples.reserve(train_docs.size());
    for (const auto& d : train_docs) examples.push_back(make_extgen_example(d, vocab, tagger, cfg));
    std::vector<ExtGenExample> val_examples;
    val_examples.reserve(val_docs.size());
    for (const auto& d : val_docs) val_examples.push_back(make_extgen_example(d, vocab, tagger, cfg));
    if (examples.empty()) throw DataError("extractor-generator training: no documents");

    auto validation_loss = [&]() {
        NoGradGuard ng;
        Runtime rt; // eval mode
        double total = 0;
        for (const auto& ex : val_examples)
            total += static_cast<double>(extgen_document_loss(model, ex, vocab, rt).l_eg.item());
        return total / std::max<std::size_t>(1, val_examples.size());
    };

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
        rng.shuffle(order);
        EpochLog log;
        log.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.optim.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.optim.batch_size);
            Runtime rt;
            rt.train = true;
            rt.dropout_rate = static_cast<Real>(cfg.dropout);
            rt.rng = &rng;
            std::vector<Tensor> doc_losses;
            double b_e = 0, b_w = 0, b_tag = 0, b_g = 0;
            try {
                for (std::size_t i = start; i < end; ++i) {
                    auto losses = extgen_document_loss(model, examples[order[i]], vocab, rt);
                    doc_losses.push_back(losses.l_eg);
                    log.clamped += losses.clamped;
                    b_e += static_cast<double>(losses.l_e.item());
                    b_w += static_cast<double>(losses.l_w.item());
                    b_tag += static_cast<double>(losses.l_tag.item());
                    b_g += static_cast<double>(losses.l_g.item());
                }
            } catch (const NumericError&) {
                result.aborted = true;
                sched.restore_best();
                return result;
            }
            Tensor batch_loss = scale(
                doc_losses.size() == 1 ? doc_losses[0] : sum_all(concat_cols(doc_losses)),
                Real(1) / static_cast<Real>(doc_losses.size()));
            if (!std::isfinite(static_cast<double>(batch_loss.item()))) {
                result.aborted = true;
                sched.restore_best();
                return result;
            }
            opt.zero_grad();
            batch_loss.backward();
            if (!std::isfinite(opt.global_grad_norm())) {
                result.aborted = true;
                sched.restore_best();
                return result;
            }
            opt.clip(cfg.optim.clip_norm);
            opt.step();
            const double n = static_cast<double>(doc_losses.size());
            log.l_e += b_e / n;
            log.l_w += b_w / n;
            log.l_tag += b_tag / n;
            log.l_g += b_g / n;
            log.l_eg += static_cast<double>(batch_loss.item());
            ++batches;
        }
        const double bd = std::max<std::size_t>(1, batches);
        log.l_e /= bd;
        log.l_w /= bd;
        log.l_tag /= bd;
        log.l_g /= bd;
        log.l_eg /= bd;
        log.val_metric = validation_loss();
        log.lr = opt.lr();
        result.log.push_back(log);
        const bool stop = sched.observe(log.val_metric, epoch);
        if (stop) break;
        if (target_loss > 0 && log.l_eg < target_loss) break;
    }
    sched.restore_best();
    result.best_epoch = sched.best_epoch();
    result.best_val = sched.best();
    return result;
}

// ------------------------------------------------------------- metrics CSV

inline void write_selector_csv(const std::string& path, const TrainResult& r) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write metrics log: " + path);
    os << "epoch,loss,val_f1,lr\n";
    for (const auto& e : r.log)
        os << e.epoch << "," << ModelConfig::num(e.l_e) << "," << ModelConfig::num(e.val_metric)
           << "," << ModelConfig::num(e.lr) << "\n";
}

inline void write_extgen_csv(const std::string& path, const TrainResult& r) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write metrics log: " + path);
    os << "epoch,l_e,l_w,l_tag,l_g,l_eg,val_l_eg,lr\n";
    for (const auto& e : r.log)
        os << e.epoch << "," << ModelConfig::num(e.l_e) << "," << ModelConfig::num(e.l_w) << ","
           << ModelConfig::num(e.l_tag) << "," << ModelConfig::num(e.l_g) << ","
           << ModelConfig::num(e.l_eg) << "," << ModelConfig::num(e.val_metric) << ","
           << ModelConfig::num(e.lr) << "\n";
}

} // namespace segnet
