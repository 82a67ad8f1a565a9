#include "speechlm/toy_codec.hpp"

#include "speechlm/errors.hpp"
#include "speechlm/rng.hpp"

namespace speechlm {

ToyCodec::ToyCodec(const JointVocabulary& vocab, int rate, uint64_t seed)
    : vocab_(vocab), rate_(rate), seed_(seed) {
    if (rate_ < 1) throw InvalidArgument("codec rate must be >= 1");

    std::vector<int> pool = vocab_.content_audio_ids();
    if (pool.empty()) throw InvalidArgument("no content audio ids available for the codec");

    Rng rng(seed_);
    table_.resize(vocab_.text_size());
    for (int id = 0; id < vocab_.text_size(); ++id) {
        if (vocab_.is_special_text(id)) continue;
        // rejection-resample until the row is unique; keeps the table injective
        std::vector<int> row(rate_);
        do {
            for (int j = 0; j < rate_; ++j)
                row[j] = pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
        } while (reverse_.count(row) != 0);
        reverse_[row] = id;
        table_[id] = row;
    }
}

const std::vector<int>& ToyCodec::row(int text_id) const {
    if (text_id < 0 || text_id >= vocab_.text_size() || table_[text_id].empty())
        throw InvalidArgument("no codec row for text id " + std::to_string(text_id));
    return table_[text_id];
}

std::vector<int> ToyCodec::encode(const std::vector<int>& text_ids) const {
    std::vector<int> out;
    out.reserve(text_ids.size() * rate_);
    for (int id : text_ids) {
        if (!vocab_.is_content_text(id))
            throw InvalidArgument("cannot encode non-content text id " + std::to_string(id));
        const auto& r = table_[id];
        out.insert(out.end(), r.begin(), r.end());
    }
    return out;
}

ToyCodec::DecodeResult ToyCodec::decode(const std::vector<int>& audio_ids) const {
    size_t end = audio_ids.size();
    while (end > 0 && (audio_ids[end - 1] == vocab_.specials().audio_pad ||
                       audio_ids[end - 1] == vocab_.specials().audio_eoa))
        --end;

    DecodeResult res;
    size_t pos = 0;
    std::vector<int> block(rate_);
    while (pos + rate_ <= end) {
        std::copy(audio_ids.begin() + pos, audio_ids.begin() + pos + rate_, block.begin());
        auto it = reverse_.find(block);
        if (it == reverse_.end()) break;
        res.text.push_back(it->second);
        pos += rate_;
    }
    res.undecoded_tail = end - pos;
    return res;
}

}  // namespace speechlm
