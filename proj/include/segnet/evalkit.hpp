#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "segnet/corpus.hpp"
#include "segnet/stemmer.hpp"

namespace segnet {

// Phrase lists are compared by per-token stem sequences. Predictions are
// normalized with the same pipeline as gold before matching.
inline std::vector<std::string> normalize_phrase(const std::string& phrase) {
    return tokenize(phrase);
}

// match flag per prediction; each gold phrase matches at most one
// prediction. Inputs must be deduplicated by stemmed identity.
inline std::vector<bool> match_sets(const std::vector<std::vector<std::string>>& predicted,
                                    const std::vector<std::vector<std::string>>& gold) {
    auto keys = [](const std::vector<std::vector<std::string>>& phrases) {
        std::vector<std::string> out;
        out.reserve(phrases.size());
        for (const auto& p : phrases) out.push_back(stem_key(p));
        return out;
    };
    const auto pk = keys(predicted);
    const auto gk = keys(gold);
    for (const auto& ks : {pk, gk}) {
        std::set<std::string> seen;
        for (const auto& k : ks)
            if (!seen.insert(k).second)
                throw ContractError("match_sets: inputs must be stem-deduplicated (" + k + ")");
    }
    std::vector<bool> used(gk.size(), false);
    std::vector<bool> matched(pk.size(), false);
    for (std::size_t i = 0; i < pk.size(); ++i)
        for (std::size_t j = 0; j < gk.size(); ++j)
            if (!used[j] && pk[i] == gk[j]) {
                used[j] = true;
                matched[i] = true;
                break;
            }
    return matched;
}

struct PRF {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
};

// Deterministic guaranteed-wrong padding phrases; the reserved bracket
// tokens never occur in any corpus, so padding can never match.
inline std::vector<std::string> wrong_answer(std::size_t i) {
    return {"<wrong-" + std::to_string(i) + ">"};
}

// F1 at cutoff k for one document. k == 0 means k = M (all predictions);
// k == 5 truncates or pads with wrong answers. Recall divides by |gold|.
inline PRF f1_at_k(std::vector<std::vector<std::string>> predicted,
                   const std::vector<std::vector<std::string>>& gold, std::size_t k,
                   bool recall_min_k = false) {
    if (gold.empty()) throw ContractError("f1_at_k: empty gold set (skip the document)");
    if (k > 0) {
        if (predicted.size() > k) predicted.resize(k);
        std::size_t pad = 0;
        while (predicted.size() < k) predicted.push_back(wrong_answer(pad++));
    }
    const auto matched = match_sets(predicted, gold);
    const std::size_t hits = static_cast<std::size_t>(
        std::count(matched.begin(), matched.end(), true));
    PRF out;
    const std::size_t denom_p = predicted.size();
    const std::size_t denom_r = recall_min_k && k > 0 ? std::min(gold.size(), k) : gold.size();
    out.precision = denom_p ? double(hits) / double(denom_p) : 0.0;
    out.recall = denom_r ? double(hits) / double(denom_r) : 0.0;
    out.f1 = out.precision + out.recall > 0
                 ? 2 * out.precision * out.recall / (out.precision + out.recall)
                 : 0.0;
    return out;
}

struct SplitScores {
    PRF at_m, at_5;
    double count_mae = 0;
    double avg_predicted = 0;
    std::size_t documents = 0; // documents with a non-empty gold split
};

struct DocPhrases {
    std::vector<std::vector<std::string>> predicted;
    std::vector<std::vector<std::string>> gold;
};

// Macro average over documents; documents whose gold split is empty are
// excluded from that split's average. Counts feed the MAE over all
// documents (an empty gold set still counts toward MAE).
inline SplitScores score_split(const std::vector<DocPhrases>& docs, bool recall_min_k = false) {
    SplitScores s;
    double mae = 0, avg = 0;
    for (const auto& d : docs) {
        mae += std::abs(double(d.predicted.size()) - double(d.gold.size()));
        avg += double(d.predicted.size());
        if (d.gold.empty()) continue;
        const PRF m = f1_at_k(d.predicted, d.gold, 0, recall_min_k);
        const PRF five = f1_at_k(d.predicted, d.gold, 5, recall_min_k);
        s.at_m.precision += m.precision;
        s.at_m.recall += m.recall;
        s.at_m.f1 += m.f1;
        s.at_5.precision += five.precision;
        s.at_5.recall += five.recall;
        s.at_5.f1 += five.f1;
        ++s.documents;
    }
    if (s.documents) {
        const double n = double(s.documents);
        s.at_m.precision /= n;
        s.at_m.recall /= n;
        s.at_m.f1 /= n;
        s.at_5.precision /= n;
        s.at_5.recall /= n;
        s.at_5.f1 /= n;
    }
    if (!docs.empty()) {
        s.count_mae = mae / double(docs.size());
        s.avg_predicted = avg / double(docs.size());
    }
    return s;
}

struct CountMae {
    double mae = 0;
    double avg_predicted = 0;
};

inline CountMae count_mae(const std::vector<std::size_t>& predicted_counts,
                          const std::vector<std::size_t>& gold_counts) {
    if (predicted_counts.empty() || predicted_counts.size() != gold_counts.size())
        throw ContractError("count_mae: empty corpus or mismatched counts");
    CountMae out;
    for (std::size_t i = 0; i < predicted_counts.size(); ++i) {
        out.mae += std::abs(double(predicted_counts[i]) - double(gold_counts[i]));
        out.avg_predicted += double(predicted_counts[i]);
    }
    out.mae /= double(predicted_counts.size());
    out.avg_predicted /= double(predicted_counts.size());
    return out;
}

struct EvalReport {
    SplitScores present, absent;
    bool has_present = false, has_absent = false;

    std::string table() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(3);
        os << "split    F1@M    P@M     R@M     F1@5    P@5     R@5     MAE     avg#   docs\n";
        auto row = [&](const char* name, const SplitScores& s) {
            os << std::left << std::setw(8) << name << std::right;
            os << std::setw(7) << s.at_m.f1 << " " << std::setw(7) << s.at_m.precision << " "
               << std::setw(7) << s.at_m.recall << " " << std::setw(7) << s.at_5.f1 << " "
               << std::setw(7) << s.at_5.precision << " " << std::setw(7) << s.at_5.recall << " "
               << std::setw(7) << s.count_mae << " " << std::setw(6) << s.avg_predicted << " "
               << std::setw(5) << s.documents << "\n";
        };
        if (has_present) row("present", present);
        if (has_absent) row("absent", absent);
        return os.str();
    }
};

} // namespace segnet
