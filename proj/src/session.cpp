#include "speechlm/session.hpp"

#include <fstream>

#include "json.hpp"
#include "speechlm/errors.hpp"

namespace speechlm {

BuiltPrompt build_prompt(const std::vector<int>& system_tokens,
                         const std::vector<TextPair>& history, const Mat& input_features,
                         const JointVocabulary& vocab, int max_positions, int round_index) {
    const SpecialTokens& sp = vocab.specials();
    auto check_text = [&](int id, const char* what) {
        if (!vocab.is_content_text(id))
            throw InvalidArgument(std::string(what) + " token " + std::to_string(id) +
                                  " is not a content text id");
    };

    BuiltPrompt bp;
    auto& in = bp.inputs;

    bp.layout.sys_begin = in.size();
    in.push_back(PromptText{sp.sys});
    for (int id : system_tokens) {
        check_text(id, "system");
        in.push_back(PromptText{id});
    }
    bp.layout.sys_end = in.size();

    bp.layout.hist_begin = in.size();
    if (!history.empty()) {
        in.push_back(PromptText{sp.hist});
        for (const auto& [user, assistant] : history) {
            for (int id : user) {
                check_text(id, "history user");
                in.push_back(PromptText{id});
            }
            for (int id : assistant) {
                check_text(id, "history assistant");
                in.push_back(PromptText{id});
            }
        }
    }
    bp.layout.hist_end = in.size();

    bp.layout.input_begin = in.size();
    in.push_back(PromptText{sp.input});
    for (int r = 0; r < input_features.rows; ++r) {
        SpeechFeature f;
        f.vec.assign(input_features.row(r), input_features.row(r) + input_features.cols);
        in.push_back(std::move(f));
    }
    bp.layout.input_end = in.size();

    bp.layout.answer_pos = in.size();
    in.push_back(PromptText{sp.answer});

    if (static_cast<int>(in.size()) > max_positions)
        throw CapacityError("round " + std::to_string(round_index) + " prompt needs " +
                            std::to_string(in.size()) + " positions, max is " +
                            std::to_string(max_positions));
    return bp;
}

void DialogueSession::clear_cache() {
    cache = KVCache{};
    cached_prefix.clear();
}

void DialogueSession::set_system(std::vector<int> tokens) {
    system_tokens = std::move(tokens);
    clear_cache();
}

size_t prefix_reuse_len(const DialogueSession& session, std::span<const StepInput> new_prompt) {
    size_t n = std::min(session.cached_prefix.size(), new_prompt.size());
    n = std::min(n, session.cache.len);  // never trust a prefix the cache does not hold
    size_t i = 0;
    while (i < n && session.cached_prefix[i] == new_prompt[i]) ++i;
    return i;
}

TurnResult run_turn(DialogueSession& session, const std::vector<int>& user_audio_tokens,
                    const Model& model, const SpeechFrontend& frontend, const ToyCodec& codec,
                    const DecodeConfig& cfg, bool use_cache) {
    if (user_audio_tokens.empty()) throw InvalidArgument("empty user input; turn rejected");
    ToyCodec::DecodeResult transcription = codec.decode(user_audio_tokens);
    if (!transcription.clean())
        throw MalformedInput("undecodable user audio (unmatched tail of " +
                             std::to_string(transcription.undecoded_tail) +
                             " tokens); turn rejected");

    Mat feats = frontend.encode(user_audio_tokens);
    BuiltPrompt bp = build_prompt(session.system_tokens, session.history, feats,
                                  model.config().vocab, model.config().max_positions,
                                  session.round_index);

    TurnResult res;
    res.user_text = transcription.text;
    res.prompt_len = bp.inputs.size();

    std::vector<StepInput> fed;
    if (use_cache) {
        if (session.cache.layers == 0)
            session.cache.init(model.config().layers, model.config().model_dim);
        size_t reuse = prefix_reuse_len(session, bp.inputs);
        if (reuse >= bp.inputs.size()) reuse = bp.inputs.size() - 1;  // decoder needs >= 1 new position
        session.cache.truncate(reuse);
        session.cached_prefix.resize(reuse);
        res.reuse_len = reuse;
        std::span<const StepInput> suffix(bp.inputs.data() + reuse, bp.inputs.size() - reuse);
        res.response = decode(model, suffix, cfg, &session.cache, &fed);
        session.cached_prefix.assign(bp.inputs.begin(), bp.inputs.end());
        session.cached_prefix.insert(session.cached_prefix.end(), fed.begin(), fed.end());
    } else {
        res.response = decode(model, bp.inputs, cfg, nullptr, nullptr);
        res.reuse_len = 0;
    }

    session.history.emplace_back(res.user_text, res.response.text);
    session.round_index += 1;
    return res;
}

void write_transcript(const std::string& path, const std::vector<TranscriptEntry>& entries) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open for write: " + path);
    for (const auto& e : entries) {
        nlohmann::ordered_json j;
        j["round"] = e.round;
        j["user_text"] = e.user_text;
        j["assistant_text"] = e.assistant_text;
        j["reuse_len"] = e.reuse_len;
        j["steps"] = e.steps;
        f << j.dump() << "\n";
    }
}

}  // namespace speechlm
