#include "mism/decode.hpp"

#include <algorithm>
#include <map>

#include "mism/error.hpp"

namespace mism {

namespace {

// Higher log-prob first; ties prefer the lexicographically smaller token
// sequence (lower token id, then shorter hypothesis).
bool better_than(const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) {
        return a.log_prob > b.log_prob;
    }
    return std::lexicographical_compare(a.ids.begin(), a.ids.end(), b.ids.begin(), b.ids.end());
}

double compare_score(const Hypothesis& h, bool length_normalize) {
    if (!length_normalize) {
        return h.log_prob;
    }
    const int64_t content = static_cast<int64_t>(h.ids.size()) - 1;
    return h.log_prob / static_cast<double>(std::max<int64_t>(1, content));
}

}  // namespace

namespace {

// One standard top-k pass at a fixed width, appending every finish (EOS or
// length cap) to the shared pool. Per-prefix log-probs are memoized so the
// narrower passes share forward computations with the wider ones.
void beam_pass(const StepModel& model, int width, int64_t max_content_len,
               std::map<std::vector<int>, std::vector<double>>& memo,
               std::vector<Hypothesis>& pool) {
    auto log_probs = [&](const std::vector<int>& prefix) -> const std::vector<double>& {
        auto it = memo.find(prefix);
        if (it == memo.end()) {
            std::vector<double> logp = model.next_log_probs(prefix);
            if (static_cast<int64_t>(logp.size()) != model.vocab_size) {
                throw ContractError("beam_search: step model returned wrong vocab size");
            }
            it = memo.emplace(prefix, std::move(logp)).first;
        }
        return it->second;
    };
    std::vector<Hypothesis> live = {Hypothesis{{model.bos_id}, 0.0, false}};
    for (int64_t step = 0; step < max_content_len && !live.empty(); ++step) {
        std::vector<Hypothesis> candidates;
        candidates.reserve(live.size() * static_cast<size_t>(model.vocab_size));
        for (const Hypothesis& h : live) {
            const std::vector<double>& logp = log_probs(h.ids);
            for (int v = 0; v < static_cast<int>(model.vocab_size); ++v) {
                Hypothesis next;
                next.ids = h.ids;
                next.ids.push_back(v);
                next.log_prob = h.log_prob + logp[static_cast<size_t>(v)];
                candidates.push_back(std::move(next));
            }
        }
        const size_t keep = std::min<size_t>(static_cast<size_t>(width), candidates.size());
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<int64_t>(keep),
                          candidates.end(), better_than);
        candidates.resize(keep);
        live.clear();
        for (Hypothesis& h : candidates) {
            if (h.ids.back() == model.eos_id) {
                h.finished = true;
                pool.push_back(std::move(h));
            } else {
                live.push_back(std::move(h));
            }
        }
    }
    // Hypotheses that hit the length cap count as finished without EOS.
    for (Hypothesis& h : live) {
        h.finished = true;
        pool.push_back(std::move(h));
    }
}

}  // namespace

Hypothesis beam_search(const StepModel& model, int beam, int64_t max_content_len,
                       bool length_normalize) {
    if (beam < 1) {
        throw ContractError("beam_search: beam must be >= 1");
    }
    if (model.vocab_size < 1 || !model.next_log_probs) {
        throw ContractError("beam_search: incomplete step model");
    }
    std::map<std::vector<int>, std::vector<double>> memo;
    std::vector<Hypothesis> pool;
    for (int width = 1; width <= beam; ++width) {
        beam_pass(model, width, max_content_len, memo, pool);
    }
    const Hypothesis* best = nullptr;
    for (const Hypothesis& h : pool) {
        if (best == nullptr) {
            best = &h;
            continue;
        }
        const double hs = compare_score(h, length_normalize);
        const double bs = compare_score(*best, length_normalize);
        if (hs > bs || (hs == bs && better_than(h, *best))) {
            best = &h;
        }
    }
    return *best;
}

Hypothesis greedy_decode(const StepModel& model, int64_t max_content_len) {
    Hypothesis h{{model.bos_id}, 0.0, false};
    for (int64_t step = 0; step < max_content_len; ++step) {
        const std::vector<double> logp = model.next_log_probs(h.ids);
        int best = 0;
        for (int v = 1; v < static_cast<int>(logp.size()); ++v) {
            if (logp[static_cast<size_t>(v)] > logp[static_cast<size_t>(best)]) {
                best = v;
            }
        }
        h.ids.push_back(best);
        h.log_prob += logp[static_cast<size_t>(best)];
        if (best == model.eos_id) {
            break;
        }
    }
    h.finished = true;
    return h;
}

StepModel make_step_model(const Tensor& encoder_output, const ModelParameters& params,
                          const ModelConfig& config) {
    StepModel m;
    m.vocab_size = config.vocab_size;
    m.bos_id = Vocab::bos_id;
    m.eos_id = Vocab::eos_id;
    m.next_log_probs = [encoder_output, &params, &config](const std::vector<int>& prefix) {
        NoGradScope no_grad;
        Tensor logits = decode_step(encoder_output, prefix, params, config);
        Tensor logp = log_softmax(logits, 0);
        return logp.values();
    };
    return m;
}

std::string generate_caption(const ImageGroup& group, const ModelParameters& params,
                             const ModelConfig& config, const Vocab& vocab, int beam,
                             bool length_normalize) {
    NoGradScope no_grad;
    const std::vector<EncoderFeature> features =
        build_encoder_features(group, config.feature, aggregation_params(params));
    Tensor enc = encode(features, params, config);
    const StepModel step = make_step_model(enc, params, config);
    const Hypothesis best = beam_search(step, beam, config.max_len, length_normalize);
    return decode_tokens(best.ids, vocab);
}

}  // namespace mism
