#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speechlm/model.hpp"

namespace speechlm {

struct DecodeConfig {
    double repetition_penalty = 1.2;
    int max_response_steps = 64;
    int chunk_size = 30;  // audio tokens per streaming packet
    enum class PenaltyStreams { kText, kAudio, kBoth };
    PenaltyStreams apply_penalty_to = PenaltyStreams::kBoth;
};

// Parallel response streams. text holds content tokens (text_eos excluded),
// audio holds the flat token stream truncated at audio_eoa (eoa excluded).
struct TokenStreamPair {
    std::vector<int> text;
    std::vector<int> audio;
    bool text_ended = false;
    bool audio_ended = false;
    bool truncated = false;         // stopped without seeing audio_eoa
    bool context_overflow = false;  // ran out of positions; output is partial
    int steps = 0;                  // decode steps taken
};

struct AudioPacket {
    std::vector<int> tokens;
    int emitted_at_step = 0;  // 1-based step at which the packet completed
    int packet_index = 0;
};

// For every id already generated in this slice: positive logits divided by
// gamma, non-positive multiplied by gamma. history holds local indices into
// the slice; duplicates are applied once.
void apply_repetition_penalty(std::span<double> logits, const std::vector<int>& history,
                              double gamma);

// Greedy parallel decoding: per step, penalized argmax over the text slice
// plus per-slot penalized argmax over the group logits; both fed back. Stops
// at audio_eoa or max_response_steps. If cache is null a scratch cache is
// used; a warm cache must already hold exactly the tokens before `prompt`.
// fed_inputs_out, when given, receives the response StepInputs that were fed
// back (what the cache now contains beyond the prompt).
TokenStreamPair decode(const Model& model, std::span<const StepInput> prompt,
                       const DecodeConfig& cfg, KVCache* cache = nullptr,
                       std::vector<StepInput>* fed_inputs_out = nullptr);

// Reference path: full forward from scratch every step, no state carried
// over. Must produce exactly the same streams as decode().
TokenStreamPair decode_recompute(const Model& model, std::span<const StepInput> prompt,
                                 const DecodeConfig& cfg);

// Teacher-forced probe: runs the real decode loop (real forwards, real stop
// machinery) but overrides the selections with the given content streams, so
// step counts can be measured on fixed data. eos/eoa are appended implicitly.
TokenStreamPair decode_forced(const Model& model, std::span<const StepInput> prompt,
                              const DecodeConfig& cfg, const std::vector<int>& forced_text,
                              const std::vector<int>& forced_audio);

struct StreamResult {
    std::vector<AudioPacket> packets;
    TokenStreamPair final_pair;
};

// decode() plus packetization: a packet is emitted as soon as chunk_size
// audio tokens accumulate; the last packet may be short. Concatenated packet
// tokens equal decode()'s audio stream.
StreamResult stream_decode(const Model& model, std::span<const StepInput> prompt,
                           const DecodeConfig& cfg);

// steps until the first streaming packet is full: ceil(chunk_size / group_size)
int first_packet_steps(int chunk_size, int group_size);

// ---- toy vocoder -----------------------------------------------------------

// Fixed waveform samples emitted per semantic token.
constexpr int kSamplesPerToken = 40;
constexpr int kVocoderSampleRate = 8000;

// Deterministic per-(token, speaker) samples. Token content stays recoverable
// no matter the speaker; only the texture changes with speaker_prompt_id.
std::vector<int16_t> toy_vocoder(const std::vector<int>& audio_tokens, int speaker_prompt_id);

// Inverse of the content channel: token ids back out of a toy waveform.
std::vector<int> vocoder_recover_tokens(const std::vector<int16_t>& samples);

// 16-bit PCM mono WAV
void write_wav(const std::string& path, const std::vector<int16_t>& samples,
               int sample_rate = kVocoderSampleRate);
std::vector<int16_t> read_wav(const std::string& path);

// line-delimited JSON {packet_index, emitted_at_step, n_tokens}
void write_packet_trace(const std::string& path, const std::vector<AudioPacket>& packets);

}  // namespace speechlm
