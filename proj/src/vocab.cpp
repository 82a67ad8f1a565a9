#include "speechlm/vocab.hpp"

#include <fstream>
#include <set>

#include "json.hpp"
#include "speechlm/errors.hpp"

namespace speechlm {

JointVocabulary::JointVocabulary(int text_size, int audio_size)
    : JointVocabulary(text_size, audio_size, SpecialTokens{}) {}

JointVocabulary::JointVocabulary(int text_size, int audio_size, const SpecialTokens& specials)
    : text_size_(text_size), audio_size_(audio_size), sp_(specials) {
    if (sp_.audio_pad < 0) sp_.audio_pad = text_size_ + 0;
    if (sp_.audio_eoa < 0) sp_.audio_eoa = text_size_ + 1;
    validate();
}

void JointVocabulary::validate() const {
    if (text_size_ < 7 || audio_size_ < 3)
        throw InvalidArgument("vocabulary too small to hold special tokens and content");
    std::set<int> ids = {sp_.text_pad, sp_.text_eos, sp_.sys, sp_.hist, sp_.input, sp_.answer,
                         sp_.audio_pad, sp_.audio_eoa};
    if (ids.size() != 8) throw InvalidArgument("special token ids must be distinct");
    for (int id : {sp_.text_pad, sp_.text_eos, sp_.sys, sp_.hist, sp_.input, sp_.answer})
        if (!is_text(id)) throw InvalidArgument("text special token outside text range");
    for (int id : {sp_.audio_pad, sp_.audio_eoa})
        if (!is_audio(id)) throw InvalidArgument("audio special token outside audio range");
}

bool JointVocabulary::is_special_text(int id) const {
    return id == sp_.text_pad || id == sp_.text_eos || id == sp_.sys || id == sp_.hist ||
           id == sp_.input || id == sp_.answer;
}

bool JointVocabulary::is_special_audio(int id) const {
    return id == sp_.audio_pad || id == sp_.audio_eoa;
}

std::vector<int> JointVocabulary::content_text_ids() const {
    std::vector<int> out;
    for (int id = 0; id < text_size_; ++id)
        if (!is_special_text(id)) out.push_back(id);
    return out;
}

std::vector<int> JointVocabulary::content_audio_ids() const {
    std::vector<int> out;
    for (int id = text_size_; id < joint_size(); ++id)
        if (!is_special_audio(id)) out.push_back(id);
    return out;
}

JointVocabulary VocabCodecConfig::build_vocab() const {
    return JointVocabulary(text_size, audio_size, specials);
}

std::string VocabCodecConfig::to_json_string() const {
    JointVocabulary v = build_vocab();  // resolves default special placement
    const SpecialTokens& sp = v.specials();
    nlohmann::ordered_json j;
    j["schema"] = 1;
    j["text_size"] = text_size;
    j["audio_size"] = audio_size;
    j["specials"] = {{"text_pad", sp.text_pad}, {"text_eos", sp.text_eos},
                     {"sys", sp.sys},           {"hist", sp.hist},
                     {"input", sp.input},       {"answer", sp.answer},
                     {"audio_pad", sp.audio_pad}, {"audio_eoa", sp.audio_eoa}};
    j["codec_rate"] = codec_rate;
    j["codec_seed"] = codec_seed;
    return j.dump(2) + "\n";
}

VocabCodecConfig VocabCodecConfig::from_json_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedInput(std::string("vocab spec is not valid JSON: ") + e.what());
    }
    VocabCodecConfig cfg;
    try {
        if (j.value("schema", 1) != 1) throw MalformedInput("unsupported vocab spec schema");
        cfg.text_size = j.at("text_size").get<int>();
        cfg.audio_size = j.at("audio_size").get<int>();
        cfg.codec_rate = j.at("codec_rate").get<int>();
        cfg.codec_seed = j.at("codec_seed").get<uint64_t>();
        if (j.contains("specials")) {
            const auto& s = j["specials"];
            cfg.specials.text_pad = s.at("text_pad").get<int>();
            cfg.specials.text_eos = s.at("text_eos").get<int>();
            cfg.specials.sys = s.at("sys").get<int>();
            cfg.specials.hist = s.at("hist").get<int>();
            cfg.specials.input = s.at("input").get<int>();
            cfg.specials.answer = s.at("answer").get<int>();
            cfg.specials.audio_pad = s.at("audio_pad").get<int>();
            cfg.specials.audio_eoa = s.at("audio_eoa").get<int>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw MalformedInput(std::string("vocab spec missing field: ") + e.what());
    }
    cfg.build_vocab();  // validate now
    return cfg;
}

void VocabCodecConfig::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorruptFile("cannot open for write: " + path);
    out << to_json_string();
}

VocabCodecConfig VocabCodecConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFile("cannot open: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_string(text);
}

}  // namespace speechlm
