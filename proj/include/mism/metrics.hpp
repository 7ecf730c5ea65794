#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace mism {

using Tokens = std::vector<std::string>;

// Per-order n-gram counts for one sentence, plus the corpus document
// frequencies used for IDF. IDF always comes from the reference side of the
// evaluation corpus.
struct NGramStats {
    // counts[n-1]: multiset of n-grams (joined with '\x1f') -> count
    std::vector<std::map<std::string, int64_t>> counts;
    static NGramStats from_tokens(const Tokens& tokens, int64_t max_n = 4);
};

struct MetricReport {
    double cider = 0.0;    // 0..10
    double bleu4 = 0.0;    // 0..1
    double rouge_l = 0.0;  // 0..1
    int64_t n_examples = 0;

    nlohmann::json to_json() const;
};

// Corpus-level BLEU-4: geometric mean of modified n-gram precisions times the
// brevity penalty; exactly zero when any precision is zero unless smoothing
// (add-one on n >= 2) is requested.
double bleu4(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
             bool smoothing = false);

// Mean per-example LCS F-measure with beta = 1.2.
double rouge_l(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
               double beta = 1.2);

// CIDEr-D: per order 1..4, clipped TF-IDF cosine similarity times a gaussian
// length penalty (sigma = 6); 10 x mean over orders, averaged over examples.
double cider_d(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
               double sigma = 6.0);

// Tokenizes both sides (lowercase whitespace) and runs all three metrics.
MetricReport score_corpus(const std::vector<std::string>& candidate_texts,
                          const std::vector<std::string>& reference_texts,
                          bool smooth_bleu = false);

}  // namespace mism
