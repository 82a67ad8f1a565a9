#include "speechlm/decoding.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "speechlm/errors.hpp"
#include "speechlm/rng.hpp"

namespace speechlm {

void apply_repetition_penalty(std::span<double> logits, const std::vector<int>& history,
                              double gamma) {
    if (gamma < 1.0) throw InvalidArgument("repetition penalty must be >= 1");
    std::vector<char> seen(logits.size(), 0);
    for (int id : history) {
        if (id < 0 || id >= static_cast<int>(logits.size()) || seen[id]) continue;
        seen[id] = 1;
        if (logits[id] > 0.0)
            logits[id] /= gamma;
        else
            logits[id] *= gamma;
    }
}

namespace {

int argmax(std::span<const double> v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

struct Forced {
    const std::vector<int>* text;
    const std::vector<int>* audio;
};

TokenStreamPair run_decode(const Model& model, std::span<const StepInput> prompt,
                           const DecodeConfig& cfg, KVCache* cache_in, bool recompute,
                           const Forced* forced, std::vector<AudioPacket>* packets,
                           std::vector<StepInput>* fed_out) {
    if (prompt.empty()) throw InvalidArgument("decode needs a non-empty prompt");
    if (cfg.max_response_steps < 0) throw InvalidArgument("max_response_steps must be >= 0");
    if (cfg.chunk_size < 1) throw InvalidArgument("chunk_size must be >= 1");

    const auto& vocab = model.config().vocab;
    const int vt = vocab.text_size();
    const int va = vocab.audio_size();
    const int g = model.config().group_size;
    const int eos = vocab.specials().text_eos;
    const int pad = vocab.specials().text_pad;
    const int eoa = vocab.specials().audio_eoa;
    const bool penal_text = !forced && cfg.apply_penalty_to != DecodeConfig::PenaltyStreams::kAudio;
    const bool penal_audio = !forced && cfg.apply_penalty_to != DecodeConfig::PenaltyStreams::kText;

    TokenStreamPair out;
    KVCache scratch;
    KVCache* cache = cache_in;
    std::vector<StepInput> all_inputs;  // recompute mode only
    if (recompute) {
        all_inputs.assign(prompt.begin(), prompt.end());
    } else if (!cache) {
        scratch.init(model.config().layers, model.config().model_dim);
        cache = &scratch;
    }

    StepLogits cur;
    try {
        if (recompute) {
            KVCache fresh;
            cur = std::move(model.forward(all_inputs, &fresh).back());
        } else {
            cur = std::move(model.forward(prompt, cache).back());
        }
    } catch (const CapacityError&) {
        out.context_overflow = true;
        out.truncated = true;
        return out;
    }

    std::vector<int> text_hist, audio_hist;  // local ids for the penalty
    std::vector<int> pending;                // packet accumulation
    int packet_index = 0;
    std::vector<double> slice;

    for (int step = 1; step <= cfg.max_response_steps; ++step) {
        out.steps = step;

        // text stream
        int feed_text;
        if (out.text_ended) {
            feed_text = pad;
        } else {
            slice.assign(cur.joint.begin(), cur.joint.begin() + vt);
            if (penal_text) apply_repetition_penalty(slice, text_hist, cfg.repetition_penalty);
            int chosen = argmax(slice);
            if (forced) {
                size_t ti = out.text.size();
                chosen = ti < forced->text->size() ? (*forced->text)[ti] : eos;
            }
            if (penal_text) text_hist.push_back(chosen);
            if (chosen == eos) {
                out.text_ended = true;
            } else if (!vocab.is_special_text(chosen)) {
                // stream carries content only; stray specials are fed back but
                // never recorded (a trained model does not emit them pre-eos)
                out.text.push_back(chosen);
            }
            feed_text = chosen;
        }

        // audio group, slot by slot
        std::vector<int> group_ids(g);
        for (int slot = 0; slot < g && !out.audio_ended; ++slot) {
            slice.assign(cur.group.row(slot), cur.group.row(slot) + va);
            if (penal_audio) apply_repetition_penalty(slice, audio_hist, cfg.repetition_penalty);
            int local = argmax(slice);
            int chosen = vocab.audio_global(local);
            if (forced) {
                size_t ai = out.audio.size();
                chosen = ai < forced->audio->size() ? (*forced->audio)[ai] : eoa;
            }
            if (penal_audio) audio_hist.push_back(vocab.audio_local(chosen));
            group_ids[slot] = chosen;
            if (chosen == eoa) {
                out.audio_ended = true;
                break;
            }
            out.audio.push_back(chosen);
            if (packets) {
                pending.push_back(chosen);
                if (static_cast<int>(pending.size()) == cfg.chunk_size) {
                    packets->push_back({pending, step, packet_index++});
                    pending.clear();
                }
            }
        }
        if (out.audio_ended || step == cfg.max_response_steps) break;

        StepInput next = ResponseStep{feed_text, group_ids};
        try {
            if (recompute) {
                all_inputs.push_back(next);
                KVCache fresh;
                cur = std::move(model.forward(all_inputs, &fresh).back());
            } else {
                cur = std::move(model.forward(std::span<const StepInput>(&next, 1), cache)[0]);
            }
        } catch (const CapacityError&) {
            out.context_overflow = true;
            break;
        }
        if (fed_out) fed_out->push_back(next);
    }

    if (!out.audio_ended) out.truncated = true;
    if (packets && !pending.empty())
        packets->push_back({pending, out.steps, packet_index});
    return out;
}

}  // namespace

TokenStreamPair decode(const Model& model, std::span<const StepInput> prompt,
                       const DecodeConfig& cfg, KVCache* cache,
                       std::vector<StepInput>* fed_inputs_out) {
    return run_decode(model, prompt, cfg, cache, false, nullptr, nullptr, fed_inputs_out);
}

TokenStreamPair decode_recompute(const Model& model, std::span<const StepInput> prompt,
                                 const DecodeConfig& cfg) {
    return run_decode(model, prompt, cfg, nullptr, true, nullptr, nullptr, nullptr);
}

TokenStreamPair decode_forced(const Model& model, std::span<const StepInput> prompt,
                              const DecodeConfig& cfg, const std::vector<int>& forced_text,
                              const std::vector<int>& forced_audio) {
    Forced f{&forced_text, &forced_audio};
    return run_decode(model, prompt, cfg, nullptr, false, &f, nullptr, nullptr);
}

StreamResult stream_decode(const Model& model, std::span<const StepInput> prompt,
                           const DecodeConfig& cfg) {
    StreamResult res;
    res.final_pair = run_decode(model, prompt, cfg, nullptr, false, nullptr, &res.packets, nullptr);
    return res;
}

int first_packet_steps(int chunk_size, int group_size) {
    if (chunk_size < 1 || group_size < 1)
        throw InvalidArgument("chunk_size and group_size must be >= 1");
    return (chunk_size + group_size - 1) / group_size;
}

// ---- toy vocoder ---------------------------------------------------------

std::vector<int16_t> toy_vocoder(const std::vector<int>& audio_tokens, int speaker_prompt_id) {
    std::vector<int16_t> out;
    out.reserve(audio_tokens.size() * kSamplesPerToken);
    for (int tok : audio_tokens) {
        // first sample carries the token id (the content channel); the rest is
        // speaker-dependent texture
        out.push_back(static_cast<int16_t>(tok));
        Rng rng(mix64(mix64(static_cast<uint64_t>(tok)) ^
                      mix64(0x5be4c0de ^ static_cast<uint64_t>(speaker_prompt_id))));
        for (int i = 1; i < kSamplesPerToken; ++i)
            out.push_back(static_cast<int16_t>((rng.uniform01() * 2.0 - 1.0) * 8192.0));
    }
    return out;
}

std::vector<int> vocoder_recover_tokens(const std::vector<int16_t>& samples) {
    if (samples.size() % kSamplesPerToken != 0)
        throw MalformedInput("waveform length is not a whole number of token segments");
    std::vector<int> out;
    for (size_t i = 0; i < samples.size(); i += kSamplesPerToken)
        out.push_back(samples[i]);
    return out;
}

void write_wav(const std::string& path, const std::vector<int16_t>& samples, int sample_rate) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open for write: " + path);
    int32_t data_size = static_cast<int32_t>(samples.size() * sizeof(int16_t));
    int32_t chunk_size = 36 + data_size;
    int16_t channels = 1, bits = 16, fmt = 1;
    int32_t fmt_size = 16;
    int32_t byte_rate = sample_rate * channels * bits / 8;
    int16_t block_align = channels * bits / 8;
    f.write("RIFF", 4);
    f.write(reinterpret_cast<const char*>(&chunk_size), 4);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    f.write(reinterpret_cast<const char*>(&fmt_size), 4);
    f.write(reinterpret_cast<const char*>(&fmt), 2);
    f.write(reinterpret_cast<const char*>(&channels), 2);
    f.write(reinterpret_cast<const char*>(&sample_rate), 4);
    f.write(reinterpret_cast<const char*>(&byte_rate), 4);
    f.write(reinterpret_cast<const char*>(&block_align), 2);
    f.write(reinterpret_cast<const char*>(&bits), 2);
    f.write("data", 4);
    f.write(reinterpret_cast<const char*>(&data_size), 4);
    f.write(reinterpret_cast<const char*>(samples.data()), data_size);
    if (!f) throw CorruptFile("short write: " + path);
}

std::vector<int16_t> read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 44 || buf.compare(0, 4, "RIFF") != 0 || buf.compare(8, 4, "WAVE") != 0)
        throw CorruptFile("not a wav file: " + path);
    if (buf.compare(36, 4, "data") != 0) throw CorruptFile("unexpected wav layout: " + path);
    int32_t data_size;
    std::memcpy(&data_size, buf.data() + 40, 4);
    if (44 + static_cast<size_t>(data_size) > buf.size())
        throw CorruptFile("truncated wav: " + path);
    std::vector<int16_t> out(data_size / 2);
    std::memcpy(out.data(), buf.data() + 44, data_size);
    return out;
}

void write_packet_trace(const std::string& path, const std::vector<AudioPacket>& packets) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open for write: " + path);
    for (const auto& p : packets) {
        nlohmann::ordered_json j;
        j["packet_index"] = p.packet_index;
        j["emitted_at_step"] = p.emitted_at_step;
        j["n_tokens"] = p.tokens.size();
        f << j.dump() << "\n";
    }
}

}  // namespace speechlm
