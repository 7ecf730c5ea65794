#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mism/model.hpp"
#include "mism/tokenize.hpp"

namespace mism {

struct Hypothesis {
    std::vector<int> ids;  // includes the leading BOS
    double log_prob = 0.0;
    bool finished = false;  // last id is EOS, or the length cap was reached
};

// A next-token distribution abstracted away from the transformer so decoding
// can be tested against exhaustive enumeration on toy models.
struct StepModel {
    int64_t vocab_size = 0;
    int bos_id = 0;
    int eos_id = 0;
    // Natural-log probabilities over the vocabulary given the prefix
    // (prefix[0] is bos_id).
    std::function<std::vector<double>(const std::vector<int>&)> next_log_probs;
};

// Beam search with a finished pool shared across widths 1..beam: each width
// runs the standard pass (expand each live hypothesis over the full
// vocabulary, keep the top `width` by summed log-probability, move
// EOS-terminated picks to the pool, stop when no live hypothesis remains or
// the content length reaches max_content_len, at which point capped
// hypotheses count as finished). Sharing the pool makes widening the beam a
// monotone improvement; a plain top-k pass does not have that property.
// Ties break toward the lexicographically smaller token sequence, which
// prefers lower token ids and then shorter hypotheses.
Hypothesis beam_search(const StepModel& model, int beam, int64_t max_content_len,
                       bool length_normalize = false);

// Repeated argmax; equivalent to beam_search with beam == 1.
Hypothesis greedy_decode(const StepModel& model, int64_t max_content_len);

// Wraps the transformer decoder into a StepModel over a fixed encoding.
StepModel make_step_model(const Tensor& encoder_output, const ModelParameters& params,
                          const ModelConfig& config);

// Full beam-search captioning of one size-normalized group.
std::string generate_caption(const ImageGroup& group, const ModelParameters& params,
                             const ModelConfig& config, const Vocab& vocab, int beam,
                             bool length_normalize = false);

}  // namespace mism
