#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "speechlm/vocab.hpp"

namespace speechlm {

// Deterministic invertible text->audio token codec. Every content text token
// maps to a fixed random sequence of `rate` content audio tokens; the table is
// a pure function of (text_size, audio_size, rate, seed) and injective, so
// decoding fixed-length blocks is unambiguous. Stands in for a real semantic
// speech tokenizer and gives exact ground truth for speech-text alignment.
class ToyCodec {
  public:
    ToyCodec(const JointVocabulary& vocab, int rate, uint64_t seed);

    const JointVocabulary& vocab() const { return vocab_; }
    int rate() const { return rate_; }
    uint64_t seed() const { return seed_; }

    // length-rate audio row for a content text id
    const std::vector<int>& row(int text_id) const;

    // concatenated rows; output length = rate * |text_ids|
    std::vector<int> encode(const std::vector<int>& text_ids) const;

    struct DecodeResult {
        std::vector<int> text;       // greedily matched prefix
        size_t undecoded_tail = 0;   // audio tokens left after the matched prefix
        bool clean() const { return undecoded_tail == 0; }
    };

    // Strips trailing audio_pad/audio_eoa, then matches length-rate blocks
    // left to right; stops at the first unmatched block.
    DecodeResult decode(const std::vector<int>& audio_ids) const;

  private:
    JointVocabulary vocab_;
    int rate_;
    uint64_t seed_;
    std::vector<std::vector<int>> table_;       // indexed by text id, empty for specials
    std::map<std::vector<int>, int> reverse_;
};

}  // namespace speechlm
