#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "speechlm/decoding.hpp"
#include "speechlm/errors.hpp"
#include "speechlm/rng.hpp"

using namespace speechlm;

namespace {

ModelConfig tiny_config(int group_size = 3) {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.model_dim = 16;
    cfg.heads = 2;
    cfg.max_positions = 160;
    cfg.group_size = group_size;
    cfg.vocab = JointVocabulary(16, 24);
    cfg.init_seed = 7;
    return cfg;
}

std::vector<StepInput> random_prompt(const ModelConfig& cfg, Rng& rng, int len) {
    std::vector<StepInput> out;
    auto text_pool = cfg.vocab.content_text_ids();
    out.push_back(PromptText{cfg.vocab.specials().sys});
    for (int i = 1; i + 1 < len; ++i) {
        if (rng.uniform01() < 0.5) {
            SpeechFeature f;
            f.vec.resize(cfg.model_dim);
            for (auto& x : f.vec) x = rng.normal();
            out.push_back(std::move(f));
        } else {
            out.push_back(PromptText{text_pool[rng.uniform_int(0, (int)text_pool.size() - 1)]});
        }
    }
    out.push_back(PromptText{cfg.vocab.specials().answer});
    return out;
}

}  // namespace

TEST_CASE("repetition penalty: identity at gamma=1 and the divide/multiply rule") {
    std::vector<double> logits = {2.0, -1.0, 0.5, 0.0};
    auto copy = logits;
    apply_repetition_penalty(copy, {0, 1, 3}, 1.0);
    CHECK(copy == logits);

    copy = logits;
    apply_repetition_penalty(copy, {0, 1, 1, 3}, 1.2);  // duplicate id applied once
    CHECK(copy[0] == doctest::Approx(2.0 / 1.2).epsilon(1e-12));
    CHECK(copy[0] == doctest::Approx(1.6667).epsilon(1e-3));
    CHECK(copy[1] == doctest::Approx(-1.2).epsilon(1e-12));
    CHECK(copy[2] == 0.5);          // unseen id untouched
    CHECK(copy[3] == 0.0);          // zero counts as non-positive: 0 * gamma = 0
    CHECK_THROWS_AS(apply_repetition_penalty(copy, {0}, 0.9), InvalidArgument);
}

TEST_CASE("first_packet_steps is the ceiling and rejects zeros") {
    CHECK(first_packet_steps(30, 3) == 10);
    CHECK(first_packet_steps(30, 1) == 30);
    CHECK(first_packet_steps(1, 1) == 1);
    CHECK(first_packet_steps(31, 3) == 11);
    CHECK(first_packet_steps(3, 30) == 1);  // G >= chunk: one step fills a chunk
    CHECK_THROWS_AS(first_packet_steps(0, 3), InvalidArgument);
    CHECK_THROWS_AS(first_packet_steps(30, 0), InvalidArgument);
}

TEST_CASE("max_response_steps=0 returns empty streams with the truncation flag") {
    ModelConfig cfg = tiny_config();
    Model m = Model::init(cfg);
    Rng rng(3);
    auto prompt = random_prompt(cfg, rng, 6);
    DecodeConfig dc;
    dc.max_response_steps = 0;
    TokenStreamPair out = decode(m, prompt, dc);
    CHECK(out.text.empty());
    CHECK(out.audio.empty());
    CHECK(out.truncated);
    CHECK(out.steps == 0);
}

TEST_CASE("cached decode equals full-recompute decode token for token") {
    ModelConfig cfg = tiny_config();
    Model m = Model::init(cfg);
    Rng rng(5);
    DecodeConfig dc;
    dc.max_response_steps = 12;
    for (int trial = 0; trial < 10; ++trial) {
        auto prompt = random_prompt(cfg, rng, rng.uniform_int(4, 10));
        TokenStreamPair a = decode(m, prompt, dc);
        TokenStreamPair b = decode_recompute(m, prompt, dc);
        CHECK(a.text == b.text);
        CHECK(a.audio == b.audio);
        CHECK(a.steps == b.steps);
        CHECK(a.truncated == b.truncated);
    }
}

TEST_CASE("gamma=1 decode equals plain greedy decode") {
    ModelConfig cfg = tiny_config();
    Model m = Model::init(cfg);
    Rng rng(7);
    auto prompt = random_prompt(cfg, rng, 8);
    DecodeConfig no_penalty;
    no_penalty.repetition_penalty = 1.0;
    no_penalty.max_response_steps = 10;
    DecodeConfig off;
    off.repetition_penalty = 1.0;
    off.max_response_steps = 10;
    off.apply_penalty_to = DecodeConfig::PenaltyStreams::kText;  // any stream split, gamma=1
    TokenStreamPair a = decode(m, prompt, no_penalty);
    TokenStreamPair b = decode(m, prompt, off);
    CHECK(a.text == b.text);
    CHECK(a.audio == b.audio);
}

TEST_CASE("streaming packets reassemble to the batch audio stream") {
    ModelConfig cfg = tiny_config();
    Model m = Model::init(cfg);
    Rng rng(11);
    DecodeConfig dc;
    dc.max_response_steps = 20;
    dc.chunk_size = 5;
    SUBCASE("chunk larger than the group") { dc.chunk_size = 5; }
    SUBCASE("chunk smaller than the group: several packets per step") { dc.chunk_size = 2; }
    for (int trial = 0; trial < 6; ++trial) {
        auto prompt = random_prompt(cfg, rng, rng.uniform_int(4, 9));
        StreamResult sr = stream_decode(m, prompt, dc);
        TokenStreamPair plain = decode(m, prompt, dc);
        std::vector<int> glued;
        for (size_t p = 0; p < sr.packets.size(); ++p) {
            const AudioPacket& pk = sr.packets[p];
            CHECK(pk.packet_index == (int)p);
            glued.insert(glued.end(), pk.tokens.begin(), pk.tokens.end());
            if (p + 1 < sr.packets.size()) {
                CHECK((int)pk.tokens.size() == dc.chunk_size);  // only the last may be short
                // latency law for full packets
                CHECK(pk.emitted_at_step ==
                      (int)(((p + 1) * dc.chunk_size + cfg.group_size - 1) / cfg.group_size));
            }
            if (p > 0) CHECK(pk.emitted_at_step >= sr.packets[p - 1].emitted_at_step);
        }
        CHECK(glued == plain.audio);
    }
}

TEST_CASE("first packet timing matches the latency law") {
    // teacher-forced decode with a long scripted stream: packets appear at
    // ceil(chunk/G) regardless of model quality
    for (int g : {1, 2, 3, 4, 5}) {
        ModelConfig cfg = tiny_config(g);
        Model m = Model::init(cfg);
        Rng rng(13);
        auto prompt = random_prompt(cfg, rng, 5);
        auto audio_pool = cfg.vocab.content_audio_ids();
        std::vector<int> forced_audio(60);
        for (auto& a : forced_audio) a = audio_pool[rng.uniform_int(0, (int)audio_pool.size() - 1)];
        std::vector<int> forced_text = {cfg.vocab.content_text_ids()[0]};

        DecodeConfig dc;
        dc.chunk_size = 30;
        dc.max_response_steps = 100;
        // reuse the forced path through stream collection: emulate via decode_forced + law check
        TokenStreamPair out = decode_forced(m, prompt, dc, forced_text, forced_audio);
        CHECK(out.audio == forced_audio);
        CHECK(out.steps == (int)((forced_audio.size() + 1 + g - 1) / g));  // +1 for eoa
        CHECK(first_packet_steps(dc.chunk_size, g) == (30 + g - 1) / g);
    }
}

TEST_CASE("no audio token after eoa appears in the stream") {
    // force eoa mid-group: the trailing slots of that group are dropped
    ModelConfig cfg = tiny_config(3);
    Model m = Model::init(cfg);
    Rng rng(17);
    auto prompt = random_prompt(cfg, rng, 5);
    auto audio_pool = cfg.vocab.content_audio_ids();
    std::vector<int> forced_audio(7);  // 7 % 3 != 0 -> eoa lands mid-group
    for (auto& a : forced_audio) a = audio_pool[rng.uniform_int(0, (int)audio_pool.size() - 1)];
    DecodeConfig dc;
    dc.max_response_steps = 50;
    TokenStreamPair out = decode_forced(m, prompt, dc, {cfg.vocab.content_text_ids()[1]}, forced_audio);
    CHECK(out.audio == forced_audio);
    CHECK(out.audio_ended);
    CHECK_FALSE(out.truncated);
    CHECK(out.steps == 3);  // ceil(8 / 3)
}

TEST_CASE("context overflow flags partial output instead of throwing") {
    ModelConfig cfg = tiny_config();
    cfg.max_positions = 12;
    Model m = Model::init(cfg);
    Rng rng(19);
    auto prompt = random_prompt(cfg, rng, 10);
    auto audio_pool = cfg.vocab.content_audio_ids();
    std::vector<int> forced_audio(100);
    for (auto& a : forced_audio) a = audio_pool[rng.uniform_int(0, (int)audio_pool.size() - 1)];
    DecodeConfig dc;
    dc.max_response_steps = 50;
    TokenStreamPair out =
        decode_forced(m, prompt, dc, {cfg.vocab.content_text_ids()[0]}, forced_audio);
    CHECK(out.context_overflow);
    CHECK(out.truncated);
    CHECK_FALSE(out.audio.empty());  // partial output is kept
    CHECK(out.steps <= 3);
}

TEST_CASE("toy vocoder decouples content from speaker") {
    JointVocabulary v(16, 24);
    auto pool = v.content_audio_ids();
    std::vector<int> tokens = {pool[0], pool[5], pool[1], pool[5]};
    auto wave_a = toy_vocoder(tokens, 1);
    auto wave_b = toy_vocoder(tokens, 2);
    CHECK(wave_a.size() == tokens.size() * kSamplesPerToken);
    CHECK(wave_a != wave_b);  // timbre varies
    CHECK(vocoder_recover_tokens(wave_a) == tokens);  // content does not
    CHECK(vocoder_recover_tokens(wave_b) == tokens);
    CHECK(toy_vocoder({}, 1).empty());
}

TEST_CASE("wav files roundtrip") {
    std::vector<int16_t> samples = {0, 100, -100, 32767, -32768, 5};
    auto path = std::filesystem::temp_directory_path() / "speechlm_wav_test.wav";
    write_wav(path.string(), samples, 8000);
    CHECK(read_wav(path.string()) == samples);
    std::filesystem::remove(path);
}

TEST_CASE("packet trace is one json object per packet") {
    std::vector<AudioPacket> packets = {{{1, 2, 3}, 1, 0}, {{4, 5}, 2, 1}};
    auto path = std::filesystem::temp_directory_path() / "speechlm_trace_test.jsonl";
    write_packet_trace(path.string(), packets);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    CHECK(line == "{\"packet_index\":0,\"emitted_at_step\":1,\"n_tokens\":3}");
    std::getline(f, line);
    CHECK(line == "{\"packet_index\":1,\"emitted_at_step\":2,\"n_tokens\":2}");
    std::filesystem::remove(path);
}
