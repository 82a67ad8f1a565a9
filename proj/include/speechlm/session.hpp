#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "speechlm/decoding.hpp"
#include "speechlm/frontend.hpp"
#include "speechlm/model.hpp"
#include "speechlm/toy_codec.hpp"

namespace speechlm {

// index ranges of the prompt regions inside the StepInput sequence
struct PromptLayout {
    size_t sys_begin = 0, sys_end = 0;      // [SYS] marker + system tokens
    size_t hist_begin = 0, hist_end = 0;    // [HIST] marker + flattened pairs; empty at round 0
    size_t input_begin = 0, input_end = 0;  // [INPUT] marker + speech feature rows
    size_t answer_pos = 0;                  // [ANSWER] marker, always last
};

struct BuiltPrompt {
    std::vector<StepInput> inputs;
    PromptLayout layout;
};

using TextPair = std::pair<std::vector<int>, std::vector<int>>;  // (user, assistant) text

// <System> <History> <Input> <Answer>. History is text-only: completed rounds
// enter as flattened (user, assistant) token pairs; only the current round is
// speech features.
BuiltPrompt build_prompt(const std::vector<int>& system_tokens,
                         const std::vector<TextPair>& history, const Mat& input_features,
                         const JointVocabulary& vocab, int max_positions, int round_index);

struct DialogueSession {
    std::vector<int> system_tokens;
    std::vector<TextPair> history;  // length == round_index
    int round_index = 0;

    // prefix cache: the kv cache plus exactly the inputs it encodes
    KVCache cache;
    std::vector<StepInput> cached_prefix;

    void clear_cache();
    // any system-prompt mutation invalidates the whole cached prefix
    void set_system(std::vector<int> tokens);
};

// longest common prefix between what the cache encodes and the new prompt;
// the decoder recomputes only positions beyond it
size_t prefix_reuse_len(const DialogueSession& session, std::span<const StepInput> new_prompt);

struct TurnResult {
    std::vector<int> user_text;  // toy-codec transcription of the user audio
    TokenStreamPair response;
    size_t reuse_len = 0;
    size_t prompt_len = 0;
};

// One dialogue round: transcribe the user audio, assemble the prompt, decode
// with prefix reuse (or from scratch when use_cache is false), then promote
// the round's text into history. A rejected turn leaves the session untouched.
TurnResult run_turn(DialogueSession& session, const std::vector<int>& user_audio_tokens,
                    const Model& model, const SpeechFrontend& frontend, const ToyCodec& codec,
                    const DecodeConfig& cfg, bool use_cache = true);

struct TranscriptEntry {
    int round = 0;
    std::vector<int> user_text;
    std::vector<int> assistant_text;
    size_t reuse_len = 0;
    int steps = 0;
};

// line-delimited JSON {round, user_text, assistant_text, reuse_len, steps}
void write_transcript(const std::string& path, const std::vector<TranscriptEntry>& entries);

}  // namespace speechlm
