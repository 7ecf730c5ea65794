#include "mism/tokenize.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "mism/error.hpp"

namespace mism {

namespace {

constexpr int64_t kMaxPieceLen = 12;

const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>"};

}  // namespace

std::vector<std::string> split_lower_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) {
        out.push_back(cur);
    }
    return out;
}

int Vocab::id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? -1 : it->second;
}

const std::string& Vocab::token_of(int id) const {
    if (id < 0 || id >= size()) {
        throw DataError("unknown token id " + std::to_string(id));
    }
    return id_to_token[static_cast<size_t>(id)];
}

std::string Vocab::serialize() const {
    std::ostringstream out;
    for (int i = 0; i < size(); ++i) {
        out << id_to_token[static_cast<size_t>(i)] << '\t' << i << '\n';
    }
    return out.str();
}

Vocab Vocab::deserialize(const std::string& text) {
    Vocab v;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        const size_t tab = line.rfind('\t');
        if (tab == std::string::npos) {
            throw DataError("vocab line " + std::to_string(line_no) + ": missing tab separator");
        }
        const std::string token = line.substr(0, tab);
        const int id = std::stoi(line.substr(tab + 1));
        if (id != v.size()) {
            throw DataError("vocab line " + std::to_string(line_no) + ": ids must be dense");
        }
        v.id_to_token.push_back(token);
        v.token_to_id[token] = id;
    }
    for (size_t i = 0; i < kReserved.size(); ++i) {
        if (v.size() <= static_cast<int>(i) || v.id_to_token[i] != kReserved[i]) {
            throw DataError("vocab is missing reserved token '" + kReserved[i] + "' at id " +
                            std::to_string(i));
        }
    }
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot open vocab file for writing: " + path);
    }
    out << serialize();
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open vocab file: " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return deserialize(buf.str());
}

Vocab train_vocab(const std::vector<std::string>& corpus, int64_t min_freq, int64_t max_vocab) {
    if (corpus.empty()) {
        throw DataError("train_vocab: corpus is empty");
    }
    std::map<std::string, int64_t> word_counts;
    for (const std::string& line : corpus) {
        for (const std::string& w : split_lower_tokens(line)) {
            ++word_counts[w];
        }
    }
    if (word_counts.empty()) {
        throw DataError("train_vocab: corpus contains no tokens");
    }

    // Whole words meeting the frequency threshold keep their surface form.
    std::vector<std::pair<std::string, int64_t>> whole;
    std::map<std::string, int64_t> initial_pieces;
    std::map<std::string, int64_t> cont_pieces;
    for (const auto& [word, count] : word_counts) {
        if (count >= min_freq) {
            whole.emplace_back(word, count);
            continue;
        }
        // Below-threshold words supply the subword inventory: every substring
        // (length-capped) weighted by the word's count, split by position
        // into word-initial and continuation pieces.
        const int64_t len = static_cast<int64_t>(word.size());
        for (int64_t start = 0; start < len; ++start) {
            const int64_t max_l = std::min(kMaxPieceLen, len - start);
            for (int64_t l = 1; l <= max_l; ++l) {
                const std::string piece = word.substr(static_cast<size_t>(start),
                                                      static_cast<size_t>(l));
                if (start == 0) {
                    initial_pieces[piece] += count;
                } else {
                    cont_pieces[piece] += count;
                }
            }
        }
    }

    auto by_count_then_lex = [](const std::pair<std::string, int64_t>& a,
                                const std::pair<std::string, int64_t>& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    };
    std::sort(whole.begin(), whole.end(), by_count_then_lex);

    Vocab v;
    for (const std::string& r : kReserved) {
        v.token_to_id[r] = v.size();
        v.id_to_token.push_back(r);
    }
    auto try_add = [&](const std::string& token) {
        if (v.size() >= max_vocab) {
            return;
        }
        if (v.token_to_id.count(token)) {
            return;
        }
        v.token_to_id[token] = v.size();
        v.id_to_token.push_back(token);
    };
    for (const auto& [word, count] : whole) {
        try_add(word);
    }
    std::vector<std::pair<std::string, int64_t>> pieces;
    for (const auto& [piece, count] : initial_pieces) {
        if (count >= min_freq) {
            pieces.emplace_back(piece, count);
        }
    }
    std::sort(pieces.begin(), pieces.end(), by_count_then_lex);
    for (const auto& [piece, count] : pieces) {
        try_add(piece);
    }
    pieces.clear();
    for (const auto& [piece, count] : cont_pieces) {
        if (count >= min_freq) {
            pieces.emplace_back("##" + piece, count);
        }
    }
    std::sort(pieces.begin(), pieces.end(), by_count_then_lex);
    for (const auto& [piece, count] : pieces) {
        try_add(piece);
    }
    return v;
}

namespace {

// Greedy longest match; returns empty when the word cannot be covered.
std::vector<int> segment_word(const std::string& word, const Vocab& vocab) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos < word.size()) {
        const std::string prefix = pos == 0 ? "" : "##";
        int found = -1;
        size_t found_len = 0;
        for (size_t l = word.size() - pos; l >= 1; --l) {
            const int id = vocab.id_of(prefix + word.substr(pos, l));
            if (id >= 0) {
                found = id;
                found_len = l;
                break;
            }
        }
        if (found < 0) {
            return {};
        }
        out.push_back(found);
        pos += found_len;
    }
    return out;
}

}  // namespace

TokenSeq encode_text(const std::string& text, const Vocab& vocab, int64_t max_len) {
    std::vector<int> content;
    for (const std::string& word : split_lower_tokens(text)) {
        const int whole = vocab.id_of(word);
        if (whole >= 0) {
            content.push_back(whole);
            continue;
        }
        std::vector<int> pieces = segment_word(word, vocab);
        if (pieces.empty()) {
            content.push_back(Vocab::unk_id);
        } else {
            content.insert(content.end(), pieces.begin(), pieces.end());
        }
    }
    if (static_cast<int64_t>(content.size()) > max_len) {
        content.resize(static_cast<size_t>(max_len));
    }
    TokenSeq seq;
    seq.reserve(content.size() + 2);
    seq.push_back(Vocab::bos_id);
    seq.insert(seq.end(), content.begin(), content.end());
    seq.push_back(Vocab::eos_id);
    return seq;
}

std::string decode_tokens(const TokenSeq& seq, const Vocab& vocab) {
    std::string out;
    for (int id : seq) {
        if (id == Vocab::bos_id || id == Vocab::eos_id || id == Vocab::pad_id) {
            continue;
        }
        const std::string& token = vocab.token_of(id);
        if (token.size() > 2 && token.compare(0, 2, "##") == 0) {
            out += token.substr(2);
        } else {
            if (!out.empty()) {
                out += ' ';
            }
            out += token;
        }
    }
    return out;
}

}  // namespace mism
