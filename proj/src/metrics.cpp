#include "mism/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "mism/error.hpp"
#include "mism/tokenize.hpp"

namespace mism {

namespace {

void check_aligned(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
    if (candidates.size() != references.size()) {
        throw ContractError("metric inputs are misaligned: " + std::to_string(candidates.size()) +
                            " candidates vs " + std::to_string(references.size()) + " references");
    }
}

std::string join_ngram(const Tokens& tokens, size_t start, size_t n) {
    std::string key;
    for (size_t i = 0; i < n; ++i) {
        if (i) {
            key += '\x1f';
        }
        key += tokens[start + i];
    }
    return key;
}

int64_t lcs_length(const Tokens& a, const Tokens& b) {
    const size_t la = a.size(), lb = b.size();
    std::vector<int64_t> prev(lb + 1, 0), cur(lb + 1, 0);
    for (size_t i = 1; i <= la; ++i) {
        for (size_t j = 1; j <= lb; ++j) {
            if (a[i - 1] == b[j - 1]) {
                cur[j] = prev[j - 1] + 1;
            } else {
                cur[j] = std::max(prev[j], cur[j - 1]);
            }
        }
        std::swap(prev, cur);
    }
    return prev[lb];
}

}  // namespace

NGramStats NGramStats::from_tokens(const Tokens& tokens, int64_t max_n) {
    NGramStats s;
    s.counts.resize(static_cast<size_t>(max_n));
    for (int64_t n = 1; n <= max_n; ++n) {
        auto& m = s.counts[static_cast<size_t>(n - 1)];
        if (static_cast<int64_t>(tokens.size()) < n) {
            continue;
        }
        for (size_t start = 0; start + static_cast<size_t>(n) <= tokens.size(); ++start) {
            ++m[join_ngram(tokens, start, static_cast<size_t>(n))];
        }
    }
    return s;
}

nlohmann::json MetricReport::to_json() const {
    return nlohmann::json{
        {"cider", cider}, {"bleu4", bleu4}, {"rouge_l", rouge_l}, {"n_examples", n_examples}};
}

double bleu4(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
             bool smoothing) {
    check_aligned(candidates, references);
    constexpr int64_t kMaxN = 4;
    std::vector<int64_t> matched(kMaxN, 0), total(kMaxN, 0);
    int64_t cand_len = 0, ref_len = 0;
    for (size_t ex = 0; ex < candidates.size(); ++ex) {
        const Tokens& cand = candidates[ex];
        const Tokens& ref = references[ex];
        cand_len += static_cast<int64_t>(cand.size());
        ref_len += static_cast<int64_t>(ref.size());
        const NGramStats cs = NGramStats::from_tokens(cand, kMaxN);
        const NGramStats rs = NGramStats::from_tokens(ref, kMaxN);
        for (int64_t n = 1; n <= kMaxN; ++n) {
            const auto& cm = cs.counts[static_cast<size_t>(n - 1)];
            const auto& rm = rs.counts[static_cast<size_t>(n - 1)];
            for (const auto& [gram, count] : cm) {
                total[static_cast<size_t>(n - 1)] += count;
                auto it = rm.find(gram);
                if (it != rm.end()) {
                    matched[static_cast<size_t>(n - 1)] += std::min(count, it->second);
                }
            }
        }
    }
    double log_sum = 0.0;
    for (int64_t n = 1; n <= kMaxN; ++n) {
        double num = static_cast<double>(matched[static_cast<size_t>(n - 1)]);
        double den = static_cast<double>(total[static_cast<size_t>(n - 1)]);
        if (smoothing && n >= 2) {
            num += 1.0;
            den += 1.0;
        }
        if (num <= 0.0 || den <= 0.0) {
            return 0.0;
        }
        log_sum += std::log(num / den);
    }
    if (cand_len == 0) {
        return 0.0;
    }
    const double bp =
        cand_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return bp * std::exp(log_sum / static_cast<double>(kMaxN));
}

double rouge_l(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
               double beta) {
    check_aligned(candidates, references);
    if (candidates.empty()) {
        throw ContractError("rouge_l: empty corpus");
    }
    const double beta2 = beta * beta;
    std::vector<double> scores;
    scores.reserve(candidates.size());
    for (size_t ex = 0; ex < candidates.size(); ++ex) {
        const Tokens& cand = candidates[ex];
        const Tokens& ref = references[ex];
        if (cand.empty() || ref.empty()) {
            scores.push_back(0.0);
            continue;
        }
        const double lcs = static_cast<double>(lcs_length(cand, ref));
        if (lcs == 0.0) {
            scores.push_back(0.0);
            continue;
        }
        const double r = lcs / static_cast<double>(ref.size());
        const double p = lcs / static_cast<double>(cand.size());
        scores.push_back((1.0 + beta2) * r * p / (r + beta2 * p));
    }
    // Value-ordered summation keeps the corpus mean independent of example order.
    std::sort(scores.begin(), scores.end());
    double sum = 0.0;
    for (double s : scores) {
        sum += s;
    }
    return sum / static_cast<double>(candidates.size());
}

double cider_d(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
               double sigma) {
    check_aligned(candidates, references);
    if (candidates.empty()) {
        throw ContractError("cider_d: empty corpus");
    }
    for (const Tokens& ref : references) {
        if (ref.empty()) {
            throw ContractError("cider_d: empty reference caption");
        }
    }
    constexpr int64_t kMaxN = 4;
    const double n_docs = static_cast<double>(references.size());

    // Document frequencies over the reference set only.
    std::vector<std::map<std::string, int64_t>> df(kMaxN);
    std::vector<NGramStats> ref_stats;
    ref_stats.reserve(references.size());
    for (const Tokens& ref : references) {
        NGramStats rs = NGramStats::from_tokens(ref, kMaxN);
        for (int64_t n = 0; n < kMaxN; ++n) {
            for (const auto& [gram, count] : rs.counts[static_cast<size_t>(n)]) {
                ++df[static_cast<size_t>(n)][gram];
            }
        }
        ref_stats.push_back(std::move(rs));
    }
    auto idf = [&](int64_t n, const std::string& gram) {
        auto it = df[static_cast<size_t>(n)].find(gram);
        const double d = it == df[static_cast<size_t>(n)].end()
                             ? 1.0
                             : std::max<double>(1.0, static_cast<double>(it->second));
        return std::log(n_docs) - std::log(d);
    };

    std::vector<double> example_scores;
    example_scores.reserve(candidates.size());
    for (size_t ex = 0; ex < candidates.size(); ++ex) {
        const NGramStats cs = NGramStats::from_tokens(candidates[ex], kMaxN);
        const NGramStats& rs = ref_stats[ex];
        const double len_delta = static_cast<double>(candidates[ex].size()) -
                                 static_cast<double>(references[ex].size());
        const double penalty = std::exp(-(len_delta * len_delta) / (2.0 * sigma * sigma));
        double example_sum = 0.0;
        for (int64_t n = 0; n < kMaxN; ++n) {
            const auto& cm = cs.counts[static_cast<size_t>(n)];
            const auto& rm = rs.counts[static_cast<size_t>(n)];
            double dot = 0.0, cand_norm2 = 0.0, ref_norm2 = 0.0;
            for (const auto& [gram, count] : cm) {
                const double w = static_cast<double>(count) * idf(n, gram);
                cand_norm2 += w * w;
            }
            for (const auto& [gram, count] : rm) {
                const double w = static_cast<double>(count) * idf(n, gram);
                ref_norm2 += w * w;
            }
            for (const auto& [gram, count] : cm) {
                auto it = rm.find(gram);
                if (it == rm.end()) {
                    continue;
                }
                const double i = idf(n, gram);
                // Candidate counts are clipped to the reference count.
                dot += std::min(static_cast<double>(count), static_cast<double>(it->second)) * i *
                       static_cast<double>(it->second) * i;
            }
            if (cand_norm2 > 0.0 && ref_norm2 > 0.0) {
                example_sum += penalty * dot / (std::sqrt(cand_norm2) * std::sqrt(ref_norm2));
            }
        }
        example_scores.push_back(10.0 * example_sum / static_cast<double>(kMaxN));
    }
    std::sort(example_scores.begin(), example_scores.end());
    double corpus_sum = 0.0;
    for (double s : example_scores) {
        corpus_sum += s;
    }
    return corpus_sum / static_cast<double>(candidates.size());
}

MetricReport score_corpus(const std::vector<std::string>& candidate_texts,
                          const std::vector<std::string>& reference_texts,
                          bool smooth_bleu) {
    if (candidate_texts.size() != reference_texts.size()) {
        throw ContractError("score_corpus: misaligned candidate/reference lists");
    }
    std::vector<Tokens> cands, refs;
    cands.reserve(candidate_texts.size());
    refs.reserve(reference_texts.size());
    for (const std::string& t : candidate_texts) {
        cands.push_back(split_lower_tokens(t));
    }
    for (const std::string& t : reference_texts) {
        refs.push_back(split_lower_tokens(t));
    }
    MetricReport report;
    report.n_examples = static_cast<int64_t>(cands.size());
    report.cider = cider_d(cands, refs);
    report.bleu4 = bleu4(cands, refs, smooth_bleu);
    report.rouge_l = rouge_l(cands, refs);
    return report;
}

}  // namespace mism
