#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "speechlm/errors.hpp"
#include "speechlm/rng.hpp"
#include "speechlm/session.hpp"

using namespace speechlm;

namespace {

struct Fixture {
    ModelConfig mc;
    Model model;
    ToyCodec codec;
    SpeechFrontend frontend;
    DecodeConfig dc;

    Fixture()
        : mc(make_config()),
          model(Model::init(mc)),
          codec(mc.vocab, 4, 17),
          frontend(mc.vocab, make_frontend_config(), mc.model_dim),
          dc(make_decode_config()) {}

    static ModelConfig make_config() {
        ModelConfig cfg;
        cfg.layers = 2;
        cfg.model_dim = 16;
        cfg.heads = 2;
        cfg.max_positions = 192;
        cfg.group_size = 3;
        cfg.vocab = JointVocabulary(16, 24);
        cfg.init_seed = 7;
        return cfg;
    }
    static FrontendConfig make_frontend_config() {
        FrontendConfig fc;
        fc.feature_dim = 6;
        fc.stack = 2;
        fc.pad_to_tokens = 12;  // up to 3 text tokens at rate 4
        fc.seed = 5;
        return fc;
    }
    static DecodeConfig make_decode_config() {
        DecodeConfig dc;
        dc.max_response_steps = 10;
        return dc;
    }

    std::vector<int> user_audio(std::initializer_list<int> content_idx) const {
        auto pool = mc.vocab.content_text_ids();
        std::vector<int> text;
        for (int i : content_idx) text.push_back(pool[i]);
        return codec.encode(text);
    }
};

}  // namespace

TEST_CASE("round-0 prompt layout: sys + input + answer, no history region") {
    Fixture fx;
    const auto& sp = fx.mc.vocab.specials();
    Mat feats = fx.frontend.encode(fx.user_audio({0, 1}));
    BuiltPrompt bp = build_prompt({}, {}, feats, fx.mc.vocab, fx.mc.max_positions, 0);

    REQUIRE(bp.inputs.size() == 1 + 1 + (size_t)feats.rows + 1);
    CHECK(std::get<PromptText>(bp.inputs[0]).token == sp.sys);
    CHECK(bp.layout.hist_begin == bp.layout.hist_end);  // empty at round 0
    CHECK(std::get<PromptText>(bp.inputs[bp.layout.input_begin]).token == sp.input);
    for (size_t i = bp.layout.input_begin + 1; i < bp.layout.input_end; ++i)
        CHECK(std::holds_alternative<SpeechFeature>(bp.inputs[i]));
    CHECK(bp.layout.answer_pos == bp.inputs.size() - 1);
    CHECK(std::get<PromptText>(bp.inputs.back()).token == sp.answer);

    // determinism
    BuiltPrompt again = build_prompt({}, {}, feats, fx.mc.vocab, fx.mc.max_positions, 0);
    CHECK(again.inputs == bp.inputs);
}

TEST_CASE("history appears verbatim, in order, and stays text-only") {
    Fixture fx;
    auto pool = fx.mc.vocab.content_text_ids();
    std::vector<TextPair> history = {
        {{pool[0], pool[1]}, {pool[2]}},
        {{pool[3]}, {pool[4], pool[5]}},
    };
    Mat feats = fx.frontend.encode(fx.user_audio({6}));
    BuiltPrompt bp = build_prompt({pool[7]}, history, feats, fx.mc.vocab, fx.mc.max_positions, 2);

    const auto& sp = fx.mc.vocab.specials();
    std::vector<int> hist_tokens;
    for (size_t i = bp.layout.hist_begin; i < bp.layout.hist_end; ++i) {
        REQUIRE(std::holds_alternative<PromptText>(bp.inputs[i]));
        hist_tokens.push_back(std::get<PromptText>(bp.inputs[i]).token);
    }
    std::vector<int> want = {sp.hist, pool[0], pool[1], pool[2], pool[3], pool[4], pool[5]};
    CHECK(hist_tokens == want);

    // the history region contains zero audio-range ids
    for (size_t i = bp.layout.hist_begin; i < bp.layout.hist_end; ++i)
        CHECK(fx.mc.vocab.is_text(std::get<PromptText>(bp.inputs[i]).token));
}

TEST_CASE("prompt overflow names the offending round") {
    Fixture fx;
    Mat feats = fx.frontend.encode(fx.user_audio({0}));
    std::vector<TextPair> history;
    auto pool = fx.mc.vocab.content_text_ids();
    std::vector<int> lots(200, pool[0]);
    history.emplace_back(lots, lots);
    try {
        build_prompt({}, history, feats, fx.mc.vocab, fx.mc.max_positions, 7);
        FAIL("expected CapacityError");
    } catch (const CapacityError& e) {
        CHECK(std::string(e.what()).find("round 7") != std::string::npos);
    }
}

TEST_CASE("run_turn rejects empty or undecodable input without touching the session") {
    Fixture fx;
    DialogueSession session;
    CHECK_THROWS_AS(
        run_turn(session, {}, fx.model, fx.frontend, fx.codec, fx.dc), InvalidArgument);

    std::vector<int> garbage = {fx.mc.vocab.audio_base() + 2, fx.mc.vocab.audio_base() + 3};
    CHECK_THROWS_AS(
        run_turn(session, garbage, fx.model, fx.frontend, fx.codec, fx.dc), MalformedInput);
    CHECK(session.round_index == 0);
    CHECK(session.history.empty());
    CHECK(session.cache.len == 0);
}

TEST_CASE("three scripted rounds: transcripts, reuse growth, text-only history") {
    Fixture fx;
    DialogueSession session;
    std::vector<std::vector<int>> turns = {fx.user_audio({0, 1}), fx.user_audio({2}),
                                           fx.user_audio({3, 4})};
    std::vector<TurnResult> results;
    for (const auto& audio : turns)
        results.push_back(run_turn(session, audio, fx.model, fx.frontend, fx.codec, fx.dc));

    CHECK(session.round_index == 3);
    REQUIRE(session.history.size() == 3);
    CHECK(session.history[0].first == fx.codec.decode(turns[0]).text);
    CHECK(session.history[1].first == fx.codec.decode(turns[1]).text);
    CHECK(results[0].reuse_len == 0);  // first round: nothing cached yet
    // later rounds reuse at least the system region and all shared history
    CHECK(results[1].reuse_len >= 1);
    CHECK(results[2].reuse_len > results[1].reuse_len);

    // reuse covers everything up to the previous input region: prompt minus
    // input tail minus the new history pair
    Mat feats = fx.frontend.encode(turns[2]);
    BuiltPrompt round2 = build_prompt(session.system_tokens,
                                      {session.history.begin(), session.history.begin() + 2},
                                      feats, fx.mc.vocab, fx.mc.max_positions, 2);
    size_t input_tail = round2.inputs.size() - round2.layout.input_begin;
    size_t new_pair = session.history[1].first.size() + session.history[1].second.size();
    CHECK(results[2].reuse_len >= round2.inputs.size() - input_tail - new_pair - 1);
}

TEST_CASE("prefix reuse decodes exactly like a cold cache, round by round") {
    Fixture fx;
    DialogueSession cached, cold;
    std::vector<std::vector<int>> turns = {fx.user_audio({1}), fx.user_audio({2, 0}),
                                           fx.user_audio({5})};
    for (const auto& audio : turns) {
        TurnResult a = run_turn(cached, audio, fx.model, fx.frontend, fx.codec, fx.dc, true);
        TurnResult b = run_turn(cold, audio, fx.model, fx.frontend, fx.codec, fx.dc, false);
        CHECK(a.response.text == b.response.text);
        CHECK(a.response.audio == b.response.audio);
        CHECK(a.response.steps == b.response.steps);
        CHECK(a.user_text == b.user_text);
    }
    // and against full cache invalidation mid-session: identical outputs
    DialogueSession warm, invalidated;
    for (size_t r = 0; r < turns.size(); ++r) {
        if (r == 2) invalidated.clear_cache();
        TurnResult a = run_turn(invalidated, turns[r], fx.model, fx.frontend, fx.codec, fx.dc);
        TurnResult b = run_turn(warm, turns[r], fx.model, fx.frontend, fx.codec, fx.dc);
        CHECK(a.response.text == b.response.text);
        CHECK(a.response.audio == b.response.audio);
        if (r == 2) CHECK(a.reuse_len == 0);
    }
}

TEST_CASE("system prompt mutation clears the cache") {
    Fixture fx;
    DialogueSession session;
    run_turn(session, fx.user_audio({0}), fx.model, fx.frontend, fx.codec, fx.dc);
    CHECK(session.cache.len > 0);
    session.set_system({fx.mc.vocab.content_text_ids()[3]});
    CHECK(session.cache.len == 0);
    CHECK(session.cached_prefix.empty());
    CHECK(prefix_reuse_len(session, std::vector<StepInput>{PromptText{0}}) == 0);
}

TEST_CASE("context growth per round depends on text lengths only") {
    // two codecs with different rates: same text, different audio lengths
    Fixture fx;
    ToyCodec fat(fx.mc.vocab, 6, 17);  // rate 6 instead of 4
    FrontendConfig fc = Fixture::make_frontend_config();
    fc.pad_to_tokens = 18;  // still 3 text tokens max at rate 6
    SpeechFrontend fat_frontend(fx.mc.vocab, fc, fx.mc.model_dim);

    auto pool = fx.mc.vocab.content_text_ids();
    std::vector<std::vector<int>> texts = {{pool[0], pool[1]}, {pool[2]}, {pool[3], pool[4]}};

    // the growth law has no audio term: delta = |user text| + |assistant
    // text| (+1 once, when the history marker first appears); the speech
    // input region is a fixed pad_to_tokens/stack block every round
    auto check_growth = [&](const ToyCodec& codec, const SpeechFrontend& fe) {
        DialogueSession session;
        size_t prev_len = 0;
        size_t input_region = (size_t)fe.frames_per_input() + 1;  // marker + feature rows
        for (size_t r = 0; r < texts.size(); ++r) {
            TurnResult res = run_turn(session, codec.encode(texts[r]), fx.model, fe, codec, fx.dc);
            if (r > 0) {
                long delta = (long)res.prompt_len - (long)prev_len;
                long want = (long)(session.history[r - 1].first.size() +
                                   session.history[r - 1].second.size()) +
                            (r == 1 ? 1 : 0);
                CHECK(delta == want);
            }
            // prompt = sys marker + history + fixed input region + answer marker
            CHECK(res.prompt_len >= input_region + 2);
            prev_len = res.prompt_len;
        }
    };
    check_growth(fx.codec, fx.frontend);   // rate-4 audio
    check_growth(fat, fat_frontend);       // rate-6 audio: same law, longer audio
}

TEST_CASE("transcript file carries the documented fields") {
    std::vector<TranscriptEntry> entries = {{0, {7, 8}, {9}, 0, 4}, {1, {7}, {9, 9}, 12, 5}};
    auto path = std::filesystem::temp_directory_path() / "speechlm_transcript_test.jsonl";
    write_transcript(path.string(), entries);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    CHECK(line ==
          "{\"round\":0,\"user_text\":[7,8],\"assistant_text\":[9],\"reuse_len\":0,\"steps\":4}");
    std::getline(f, line);
    CHECK(line ==
          "{\"round\":1,\"user_text\":[7],\"assistant_text\":[9,9],\"reuse_len\":12,\"steps\":5}");
    std::filesystem::remove(path);
}
