#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace mism {

using TokenSeq = std::vector<int>;

// Wordpiece-style vocabulary. Ids are dense and stable across save/load;
// the four reserved ids are never reassigned. Continuation pieces carry a
// "##" prefix.
struct Vocab {
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int> token_to_id;

    int size() const { return static_cast<int>(id_to_token.size()); }
    int id_of(const std::string& token) const;  // -1 when absent
    const std::string& token_of(int id) const;  // DataError on unknown id

    // UTF-8 lines "token<TAB>id", reserved tokens first.
    std::string serialize() const;
    static Vocab deserialize(const std::string& text);
    void save(const std::string& path) const;
    static Vocab load(const std::string& path);
};

// Builds a vocabulary from lowercased whitespace tokens: whole words with
// count >= min_freq are kept; rarer words contribute subword pieces
// (prefixes and "##" continuations) that must themselves reach min_freq.
Vocab train_vocab(const std::vector<std::string>& corpus, int64_t min_freq = 10,
                  int64_t max_vocab = 50000);

// Lowercase, whitespace-split, greedy longest-match segmentation; content is
// truncated to max_len pieces and framed with BOS/EOS. Uncoverable words
// become single UNK tokens.
TokenSeq encode_text(const std::string& text, const Vocab& vocab, int64_t max_len = 32);

// Inverse of encode_text for in-vocab text: drops frame/PAD tokens, rejoins
// "##" pieces, renders UNK as "<unk>".
std::string decode_tokens(const TokenSeq& seq, const Vocab& vocab);

// Lowercased whitespace tokens; shared by the tokenizer and the metrics.
std::vector<std::string> split_lower_tokens(const std::string& text);

}  // namespace mism
