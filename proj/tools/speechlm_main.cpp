// Operator surface: data generation, training, single-shot inference,
// multi-round chat, evaluation, and first-packet latency tables.
//
// Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime.

#include <omp.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "speechlm/data.hpp"
#include "speechlm/decoding.hpp"
#include "speechlm/errors.hpp"
#include "speechlm/eval.hpp"
#include "speechlm/frontend.hpp"
#include "speechlm/model.hpp"
#include "speechlm/session.hpp"
#include "speechlm/toy_codec.hpp"
#include "speechlm/training.hpp"

using json = nlohmann::ordered_json;
using namespace speechlm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

json default_settings() {
    json j;
    j["vocab_codec"] = {{"schema", 1},     {"text_size", 64},  {"audio_size", 256},
                        {"codec_rate", 15}, {"codec_seed", 1234}};
    j["frontend"] = {{"feature_dim", 16}, {"stack", 5}, {"pad_to_tokens", 90},
                     {"rate_hz", 50},     {"seed", 42}};
    j["model"] = {{"layers", 2},        {"model_dim", 128},  {"heads", 4},
                  {"max_positions", 256}, {"group_size", 3}, {"group_head", "logit_map"},
                  {"init_seed", 1},     {"ffn_mult", 4}};
    j["train"] = json::parse(TrainConfig{}.to_json_string());
    j["decode"] = {{"repetition_penalty", 1.2},
                   {"max_response_steps", 64},
                   {"chunk_size", 30},
                   {"apply_penalty_to", "both"}};
    return j;
}

void deep_merge(json& base, const json& overlay) {
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object())
            deep_merge(base[it.key()], *it);
        else
            base[it.key()] = *it;
    }
}

struct Settings {
    VocabCodecConfig vocab_codec;
    FrontendConfig frontend;
    ModelConfig model;
    TrainConfig train;
    DecodeConfig decode;
    json effective;
};

Settings settings_from_json(const json& merged) {
    Settings s;
    s.effective = merged;
    const json& vc = merged.at("vocab_codec");
    s.vocab_codec = VocabCodecConfig::from_json_string(vc.dump());

    const json& fc = merged.at("frontend");
    s.frontend.feature_dim = fc.value("feature_dim", 16);
    s.frontend.stack = fc.value("stack", 5);
    s.frontend.pad_to_tokens = fc.value("pad_to_tokens", 90);
    s.frontend.rate_hz = fc.value("rate_hz", 50);
    s.frontend.seed = fc.value("seed", (uint64_t)42);

    const json& mc = merged.at("model");
    s.model.layers = mc.value("layers", 2);
    s.model.model_dim = mc.value("model_dim", 128);
    s.model.heads = mc.value("heads", 4);
    s.model.max_positions = mc.value("max_positions", 256);
    s.model.group_size = mc.value("group_size", 3);
    std::string gh = mc.value("group_head", std::string("logit_map"));
    if (gh == "logit_map")
        s.model.group_head = GroupHeadMode::kLogitMap;
    else if (gh == "hidden_state")
        s.model.group_head = GroupHeadMode::kHiddenState;
    else
        throw ConfigError("unknown group_head mode: " + gh);
    s.model.init_seed = mc.value("init_seed", (uint64_t)1);
    s.model.ffn_mult = mc.value("ffn_mult", 4);
    s.model.vocab = s.vocab_codec.build_vocab();
    s.model.validate();

    s.train = TrainConfig::from_json_string(merged.at("train").dump());

    const json& dc = merged.at("decode");
    s.decode.repetition_penalty = dc.value("repetition_penalty", 1.2);
    s.decode.max_response_steps = dc.value("max_response_steps", 64);
    s.decode.chunk_size = dc.value("chunk_size", 30);
    std::string pen = dc.value("apply_penalty_to", std::string("both"));
    if (pen == "both")
        s.decode.apply_penalty_to = DecodeConfig::PenaltyStreams::kBoth;
    else if (pen == "text")
        s.decode.apply_penalty_to = DecodeConfig::PenaltyStreams::kText;
    else if (pen == "audio")
        s.decode.apply_penalty_to = DecodeConfig::PenaltyStreams::kAudio;
    else
        throw ConfigError("unknown apply_penalty_to: " + pen);
    return s;
}

json load_json_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open for write: " + path);
    f << text;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoi(item));
    }
    return out;
}

// effective settings = defaults <- config file <- individual flag overrides
json merged_settings(const std::optional<std::string>& config_path, const json& flag_overrides) {
    json j = default_settings();
    if (config_path) deep_merge(j, load_json_file(*config_path));
    deep_merge(j, flag_overrides);
    return j;
}

void echo_config(const std::string& outdir, const json& effective) {
    std::filesystem::create_directories(outdir);
    write_text_file(outdir + "/config.json", effective.dump(2) + "\n");
}

// ---- subcommand bodies -----------------------------------------------------

struct GenArgs {
    std::string out;
    std::optional<std::string> config;
    std::optional<std::string> vocab_spec;
    std::optional<std::string> write_vocab_spec;
    int n = 1000;
    std::string mix = "echo=1.0";
    int min_len = 1, max_len = 5;
    uint64_t seed = 0;
};

TaskMix parse_mix(const std::string& text) {
    TaskMix mix{0.0, 0.0, 0.0};
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("bad mix entry: " + item);
        std::string key = item.substr(0, eq);
        double value = std::stod(item.substr(eq + 1));
        if (key == "echo")
            mix.echo = value;
        else if (key == "transform")
            mix.transform = value;
        else if (key == "carry")
            mix.carry = value;
        else
            throw ConfigError("unknown task family in mix: " + key);
    }
    return mix;
}

int cmd_gen_data(const GenArgs& args) {
    VocabCodecConfig vc;
    TaskMix mix;
    try {
        if (args.vocab_spec) {
            vc = VocabCodecConfig::load(*args.vocab_spec);
        } else {
            // only the vocab/codec section matters here
            json merged = merged_settings(args.config, json::object());
            vc = VocabCodecConfig::from_json_string(merged.at("vocab_codec").dump());
        }
        mix = parse_mix(args.mix);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        GenConfig gc;
        gc.n_records = args.n;
        gc.mix = mix;
        gc.min_len = args.min_len;
        gc.max_len = args.max_len;
        gc.seed = args.seed;
        JointVocabulary vocab = vc.build_vocab();
        auto records = gen_corpus(gc, vocab);
        save_corpus(args.out, records);
        if (args.write_vocab_spec) vc.save(*args.write_vocab_spec);
        CorpusStats st = corpus_stats(records);
        std::cout << "wrote " << st.records << " records (" << st.turns << " turns) to "
                  << args.out << "\n"
                  << "families: echo=" << st.echo << " transform=" << st.transform
                  << " carry=" << st.carry << "\n"
                  << "mean turns=" << st.mean_turns << " mean user len=" << st.mean_user_len
                  << " mean answer len=" << st.mean_answer_len << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

struct TrainArgs {
    std::string corpus;
    std::string outdir;
    std::optional<std::string> config;
    json overrides = json::object();
};

int cmd_train(const TrainArgs& args) {
    Settings s;
    std::vector<DialogueRecord> records;
    try {
        s = settings_from_json(merged_settings(args.config, args.overrides));
        records = load_corpus(args.corpus);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        echo_config(args.outdir, s.effective);
        ToyCodec codec(s.model.vocab, s.vocab_codec.codec_rate, s.vocab_codec.codec_seed);
        SpeechFrontend frontend(s.model.vocab, s.frontend, s.model.model_dim);
        Model model = Model::init(s.model);
        TrainResult res = train_on_corpus(s.train, model, records, frontend, codec, args.outdir,
                                          s.effective.dump());
        std::cout << "steps run: " << res.steps_run << "\n"
                  << "best val loss: " << res.best_val_loss << " at step " << res.best_step
                  << "\n"
                  << "best val text accuracy: " << res.best_val_text_acc << "\n"
                  << "checkpoint: " << res.checkpoint_path << "\n"
                  << "metrics: " << res.metrics_path << "\n";
        if (res.diverged) {
            std::cerr << "training diverged (non-finite loss); last good checkpoint kept\n";
            return kExitRuntime;
        }
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

struct LoadedModel {
    Settings settings;
    Model model;
    uint64_t step = 0;
};

LoadedModel load_model(const std::string& ckpt_path) {
    uint64_t step = 0;
    std::string extra;
    Model model = Model::load_checkpoint(ckpt_path, &step, &extra);
    if (extra.empty()) throw ConfigError("checkpoint has no embedded run config: " + ckpt_path);
    json merged = default_settings();
    deep_merge(merged, json::parse(extra));
    Settings s = settings_from_json(merged);
    if (!(s.model == model.config()))
        throw ConfigError("checkpoint architecture disagrees with its embedded config");
    return LoadedModel{std::move(s), std::move(model), step};
}

struct InferArgs {
    std::string ckpt;
    std::string outdir;
    std::string text;
    bool packet_trace = false;
    bool wav = false;
    int speaker = 0;
    std::optional<int> chunk;
    std::optional<int> max_steps;
    std::optional<double> penalty;
};

int cmd_infer(const InferArgs& args) {
    std::optional<LoadedModel> lm;
    std::vector<int> user_text;
    try {
        lm.emplace(load_model(args.ckpt));
        user_text = parse_int_list(args.text);
        if (user_text.empty()) throw ConfigError("--text must name at least one content text id");
        for (int id : user_text)
            if (!lm->settings.model.vocab.is_content_text(id))
                throw ConfigError("--text id " + std::to_string(id) +
                                  " is not a content text id");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        Settings& s = lm->settings;
        if (args.chunk) s.decode.chunk_size = *args.chunk;
        if (args.max_steps) s.decode.max_response_steps = *args.max_steps;
        if (args.penalty) s.decode.repetition_penalty = *args.penalty;
        echo_config(args.outdir, s.effective);

        ToyCodec codec(s.model.vocab, s.vocab_codec.codec_rate, s.vocab_codec.codec_seed);
        SpeechFrontend frontend(s.model.vocab, s.frontend, s.model.model_dim);
        std::vector<int> user_audio = codec.encode(user_text);
        Mat feats = frontend.encode(user_audio);
        BuiltPrompt bp = build_prompt({}, {}, feats, s.model.vocab, s.model.max_positions, 0);

        StreamResult sr = stream_decode(lm->model, bp.inputs, s.decode);
        const TokenStreamPair& out = sr.final_pair;

        json j;
        j["user_text"] = user_text;
        j["text"] = out.text;
        j["audio"] = out.audio;
        j["steps"] = out.steps;
        j["text_ended"] = out.text_ended;
        j["audio_ended"] = out.audio_ended;
        j["truncated"] = out.truncated;
        j["context_overflow"] = out.context_overflow;
        j["asr_wer"] = asr_wer(out.audio, out.text, codec);
        write_text_file(args.outdir + "/response.json", j.dump(2) + "\n");

        if (args.packet_trace) write_packet_trace(args.outdir + "/packets.jsonl", sr.packets);
        if (args.wav)
            write_wav(args.outdir + "/response.wav", toy_vocoder(out.audio, args.speaker));

        std::cout << "steps=" << out.steps << " text_tokens=" << out.text.size()
                  << " audio_tokens=" << out.audio.size()
                  << " asr_wer=" << j["asr_wer"].get<double>() << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

struct ChatArgs {
    std::string ckpt;
    std::string outdir;
    std::optional<std::string> script;
    int rounds = 0;  // 0 = all script lines
    bool no_cache = false;
};

int cmd_chat(const ChatArgs& args) {
    std::optional<LoadedModel> lm;
    std::vector<std::vector<int>> turns;
    try {
        lm.emplace(load_model(args.ckpt));
        std::istream* in = &std::cin;
        std::ifstream file;
        if (args.script) {
            file.open(*args.script);
            if (!file) throw ConfigError("cannot open script: " + *args.script);
            in = &file;
        }
        std::string line;
        while (std::getline(*in, line)) {
            if (line.empty()) continue;
            turns.push_back(parse_int_list(line));
        }
        if (turns.empty()) throw ConfigError("no user turns given");
        if (args.rounds > 0 && (int)turns.size() > args.rounds) turns.resize(args.rounds);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        Settings& s = lm->settings;
        echo_config(args.outdir, s.effective);
        ToyCodec codec(s.model.vocab, s.vocab_codec.codec_rate, s.vocab_codec.codec_seed);
        SpeechFrontend frontend(s.model.vocab, s.frontend, s.model.model_dim);

        DialogueSession session;
        std::vector<TranscriptEntry> transcript;
        for (size_t r = 0; r < turns.size(); ++r) {
            std::vector<int> audio = codec.encode(turns[r]);
            TurnResult res =
                run_turn(session, audio, lm->model, frontend, codec, s.decode, !args.no_cache);
            TranscriptEntry e;
            e.round = static_cast<int>(r);
            e.user_text = res.user_text;
            e.assistant_text = res.response.text;
            e.reuse_len = res.reuse_len;
            e.steps = res.response.steps;
            transcript.push_back(std::move(e));
            std::cout << "round " << r << ": user=" << turns[r].size()
                      << " tokens, assistant=" << res.response.text.size()
                      << " tokens, reuse_len=" << res.reuse_len
                      << ", steps=" << res.response.steps << "\n";
        }
        write_transcript(args.outdir + "/transcript.jsonl", transcript);
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

struct EvalArgs {
    std::string manifest;
    std::string report = "report.json";
    std::string judge_score = "3";
};

int cmd_eval(const EvalArgs& args) {
    std::vector<EvalSample> samples;
    try {
        samples = load_manifest(args.manifest);
        if (samples.empty()) throw ConfigError("manifest is empty: " + args.manifest);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        StubJudge judge(args.judge_score);
        EvalReport rep = score_manifest(samples, judge);
        write_report(args.report, rep);
        for (const auto& [name, score] : rep.datasets)
            std::cout << name << ": " << score << "\n";
        std::cout << "overall: " << rep.overall << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

struct LatencyArgs {
    int chunk = 30;
    std::string groups = "1,2,3,4,5";
};

int cmd_latency(const LatencyArgs& args) {
    std::vector<int> groups;
    try {
        groups = parse_int_list(args.groups);
        if (groups.empty()) throw ConfigError("--groups must name at least one group size");
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        std::cout << "chunk_size=" << args.chunk << "\n";
        std::string csv;
        for (size_t i = 0; i < groups.size(); ++i) {
            int steps = first_packet_steps(args.chunk, groups[i]);
            std::cout << "G=" << groups[i] << " first_packet_steps=" << steps << "\n";
            if (i) csv += ",";
            csv += std::to_string(steps);
        }
        std::cout << "steps: " << csv << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale parallel audio-text dialogue model"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "OpenMP thread count (0 = runtime default)");

    GenArgs gen;
    auto* sc_gen = app.add_subcommand("gen-data", "generate a synthetic dialogue corpus");
    sc_gen->add_option("--out", gen.out, "corpus output path (jsonl)")->required();
    std::string gen_config, gen_vocab, gen_write_vocab;
    sc_gen->add_option("--config", gen_config, "settings json");
    sc_gen->add_option("--vocab-spec", gen_vocab, "vocabulary/codec spec json");
    sc_gen->add_option("--write-vocab-spec", gen_write_vocab, "emit the effective vocab spec");
    sc_gen->add_option("--n", gen.n, "number of records");
    sc_gen->add_option("--mix", gen.mix, "task mix, e.g. echo=0.8,transform=0.1,carry=0.1");
    sc_gen->add_option("--min-len", gen.min_len, "min user utterance length (text tokens)");
    sc_gen->add_option("--max-len", gen.max_len, "max user utterance length (text tokens)");
    sc_gen->add_option("--seed", gen.seed, "corpus seed");

    TrainArgs tr;
    auto* sc_train = app.add_subcommand("train", "single-stage training on a corpus");
    sc_train->add_option("--corpus", tr.corpus, "corpus jsonl")->required();
    sc_train->add_option("--outdir", tr.outdir, "run directory")->required();
    std::string tr_config;
    sc_train->add_option("--config", tr_config, "settings json");
    int tr_steps = 0, tr_warmup = -1, tr_batch = 0, tr_validate = 0;
    double tr_lr = 0.0, tr_lt = -1.0, tr_la = -1.0, tr_valfrac = 0.0;
    std::string tr_mode;
    uint64_t tr_seed = 0;
    auto* tr_seed_opt = sc_train->add_option("--seed", tr_seed, "training seed");
    sc_train->add_option("--steps", tr_steps, "total steps");
    sc_train->add_option("--warmup", tr_warmup, "warmup steps");
    sc_train->add_option("--batch", tr_batch, "batch size");
    sc_train->add_option("--lr", tr_lr, "peak learning rate");
    sc_train->add_option("--mode", tr_mode, "s2s | asr | tts");
    sc_train->add_option("--lambda-text", tr_lt, "text loss weight");
    sc_train->add_option("--lambda-audio", tr_la, "audio loss weight");
    sc_train->add_option("--validate-every", tr_validate, "validation period");
    sc_train->add_option("--val-fraction", tr_valfrac, "held-out fraction");

    InferArgs inf;
    auto* sc_infer = app.add_subcommand("infer", "decode one response for a user utterance");
    sc_infer->add_option("--ckpt", inf.ckpt, "checkpoint path")->required();
    sc_infer->add_option("--outdir", inf.outdir, "output directory")->required();
    sc_infer->add_option("--text", inf.text, "user text tokens, comma separated")->required();
    sc_infer->add_flag("--packet-trace", inf.packet_trace, "write packets.jsonl");
    sc_infer->add_flag("--wav", inf.wav, "write response.wav through the toy vocoder");
    sc_infer->add_option("--speaker", inf.speaker, "speaker prompt id for the vocoder");
    int inf_chunk = 0, inf_max_steps = 0;
    double inf_penalty = 0.0;
    sc_infer->add_option("--chunk", inf_chunk, "streaming chunk size");
    sc_infer->add_option("--max-steps", inf_max_steps, "max response steps");
    sc_infer->add_option("--penalty", inf_penalty, "repetition penalty");

    ChatArgs chat;
    auto* sc_chat = app.add_subcommand("chat", "scripted multi-round dialogue");
    sc_chat->add_option("--ckpt", chat.ckpt, "checkpoint path")->required();
    sc_chat->add_option("--outdir", chat.outdir, "output directory")->required();
    std::string chat_script;
    sc_chat->add_option(
        "--script", chat_script,
        "user turns file, one comma-separated token line per turn (stdin if absent)");
    sc_chat->add_option("--rounds", chat.rounds, "limit the number of rounds");
    sc_chat->add_flag("--no-cache", chat.no_cache, "disable prefix kv-cache reuse");

    EvalArgs ev;
    auto* sc_eval = app.add_subcommand("eval", "score an evaluation manifest");
    sc_eval->add_option("--manifest", ev.manifest, "samples jsonl")->required();
    sc_eval->add_option("--report", ev.report, "report output path");
    sc_eval->add_option("--judge-score", ev.judge_score, "stub judge fixed score");

    LatencyArgs lat;
    auto* sc_latency = app.add_subcommand("latency", "first-packet step table");
    sc_latency->add_option("--chunk", lat.chunk, "streaming chunk size");
    sc_latency->add_option("--groups", lat.groups, "group sizes, comma separated");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    if (threads > 0) omp_set_num_threads(threads);

    if (*sc_gen) {
        if (!gen_config.empty()) gen.config = gen_config;
        if (!gen_vocab.empty()) gen.vocab_spec = gen_vocab;
        if (!gen_write_vocab.empty()) gen.write_vocab_spec = gen_write_vocab;
        return cmd_gen_data(gen);
    }
    if (*sc_train) {
        if (!tr_config.empty()) tr.config = tr_config;
        json& ov = tr.overrides;
        ov["train"] = json::object();
        if (tr_steps > 0) ov["train"]["total_steps"] = tr_steps;
        if (tr_warmup >= 0) ov["train"]["warmup_steps"] = tr_warmup;
        if (tr_batch > 0) ov["train"]["batch_size"] = tr_batch;
        if (tr_lr > 0) ov["train"]["peak_lr"] = tr_lr;
        if (!tr_mode.empty()) ov["train"]["mode"] = tr_mode;
        if (tr_lt >= 0) ov["train"]["lambda_text"] = tr_lt;
        if (tr_la >= 0) ov["train"]["lambda_audio"] = tr_la;
        if (tr_validate > 0) ov["train"]["validate_every"] = tr_validate;
        if (tr_valfrac > 0) ov["train"]["val_fraction"] = tr_valfrac;
        if (tr_seed_opt->count() > 0) ov["train"]["seed"] = tr_seed;
        return cmd_train(tr);
    }
    if (*sc_infer) {
        if (inf_chunk > 0) inf.chunk = inf_chunk;
        if (inf_max_steps > 0) inf.max_steps = inf_max_steps;
        if (inf_penalty > 0) inf.penalty = inf_penalty;
        return cmd_infer(inf);
    }
    if (*sc_chat) {
        if (!chat_script.empty()) chat.script = chat_script;
        return cmd_chat(chat);
    }
    if (*sc_eval) return cmd_eval(ev);
    if (*sc_latency) return cmd_latency(lat);
    return kExitUsage;
}
