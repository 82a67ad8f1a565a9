#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace speechlm {

// Special token ids. Text specials live in [0, text_size), audio specials in
// [text_size, text_size + audio_size).
struct SpecialTokens {
    int text_pad = 0;
    int text_eos = 1;
    int sys = 2;
    int hist = 3;
    int input = 4;
    int answer = 5;
    int audio_pad = -1;  // absolute ids; -1 = default placement at audio_base + 0/1
    int audio_eoa = -1;
};

// Joint vocabulary over text and audio tokens: text ids occupy [0, text_size),
// audio ids occupy [text_size, joint_size). The two ranges partition the id
// space exactly.
class JointVocabulary {
  public:
    JointVocabulary() : JointVocabulary(64, 256) {}
    JointVocabulary(int text_size, int audio_size);
    JointVocabulary(int text_size, int audio_size, const SpecialTokens& specials);

    int text_size() const { return text_size_; }
    int audio_size() const { return audio_size_; }
    int joint_size() const { return text_size_ + audio_size_; }
    int audio_base() const { return text_size_; }

    const SpecialTokens& specials() const { return sp_; }

    bool is_text(int id) const { return id >= 0 && id < text_size_; }
    bool is_audio(int id) const { return id >= text_size_ && id < joint_size(); }
    bool is_special_text(int id) const;
    bool is_special_audio(int id) const;
    bool is_content_text(int id) const { return is_text(id) && !is_special_text(id); }
    bool is_content_audio(int id) const { return is_audio(id) && !is_special_audio(id); }

    // id relative to the audio slice, in [0, audio_size)
    int audio_local(int id) const { return id - text_size_; }
    int audio_global(int local) const { return local + text_size_; }

    std::vector<int> content_text_ids() const;
    std::vector<int> content_audio_ids() const;

    bool operator==(const JointVocabulary& o) const {
        return text_size_ == o.text_size_ && audio_size_ == o.audio_size_ &&
               sp_.text_pad == o.sp_.text_pad && sp_.text_eos == o.sp_.text_eos &&
               sp_.sys == o.sp_.sys && sp_.hist == o.sp_.hist && sp_.input == o.sp_.input &&
               sp_.answer == o.sp_.answer && sp_.audio_pad == o.sp_.audio_pad &&
               sp_.audio_eoa == o.sp_.audio_eoa;
    }

  private:
    void validate() const;

    int text_size_;
    int audio_size_;
    SpecialTokens sp_;
};

// The vocabulary/codec spec file (JSON, schema-versioned, fixed field names:
// text_size, audio_size, specials, codec_rate, codec_seed).
struct VocabCodecConfig {
    int text_size = 64;
    int audio_size = 256;
    SpecialTokens specials;  // audio specials filled relative to text_size on build
    int codec_rate = 15;
    uint64_t codec_seed = 1234;

    JointVocabulary build_vocab() const;

    std::string to_json_string() const;
    static VocabCodecConfig from_json_string(const std::string& text);
    void save(const std::string& path) const;
    static VocabCodecConfig load(const std::string& path);
};

}  // namespace speechlm
