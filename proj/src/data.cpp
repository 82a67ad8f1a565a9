#include "speechlm/data.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "speechlm/errors.hpp"
#include "speechlm/grouping.hpp"
#include "speechlm/rng.hpp"
#include "speechlm/session.hpp"

namespace speechlm {

namespace {
std::vector<int> random_content_tokens(Rng& rng, const std::vector<int>& pool, int len) {
    std::vector<int> out(len);
    for (int i = 0; i < len; ++i)
        out[i] = pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
    return out;
}
}  // namespace

std::vector<DialogueRecord> gen_corpus(const GenConfig& cfg, const JointVocabulary& vocab) {
    double sum = cfg.mix.echo + cfg.mix.transform + cfg.mix.carry;
    if (cfg.mix.echo < 0 || cfg.mix.transform < 0 || cfg.mix.carry < 0 ||
        std::abs(sum - 1.0) > 1e-9)
        throw InvalidArgument("task mix fractions must be non-negative and sum to 1");
    if (cfg.n_records < 1) throw InvalidArgument("n_records must be >= 1");
    if (cfg.min_len < 1 || cfg.max_len < cfg.min_len)
        throw InvalidArgument("need 1 <= min_len <= max_len");

    std::vector<int> pool = vocab.content_text_ids();
    Rng rng(mix64(cfg.seed ^ 0x636f72707573ULL));
    std::vector<DialogueRecord> out;
    out.reserve(cfg.n_records);
    for (int n = 0; n < cfg.n_records; ++n) {
        DialogueRecord rec;
        rec.id = n;
        double u = rng.uniform01();
        int len = rng.uniform_int(cfg.min_len, cfg.max_len);
        std::vector<int> user = random_content_tokens(rng, pool, len);
        if (u < cfg.mix.echo) {
            rec.family = "echo";
            rec.turns.push_back({user, user});
        } else if (u < cfg.mix.echo + cfg.mix.transform) {
            rec.family = "transform";
            std::vector<int> rev(user.rbegin(), user.rend());
            rec.turns.push_back({user, rev});
        } else {
            rec.family = "carry";
            rec.turns.push_back({user, user});
            int len2 = rng.uniform_int(cfg.min_len, cfg.max_len);
            std::vector<int> user2 = random_content_tokens(rng, pool, len2);
            // the second answer echoes the first turn's opening token
            rec.turns.push_back({user2, {user.front()}});
        }
        out.push_back(std::move(rec));
    }
    return out;
}

std::pair<std::vector<DialogueRecord>, std::vector<DialogueRecord>> split(
    const std::vector<DialogueRecord>& records, double val_fraction, uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw InvalidArgument("val_fraction must be in (0, 1)");
    size_t n = records.size();
    size_t n_val = static_cast<size_t>(std::floor(n * val_fraction));
    if (n_val == 0 || n_val == n)
        throw InvalidArgument("too few records for a non-empty train/val split");

    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(mix64(seed ^ 0x73706c6974ULL));
    rng.shuffle(idx);

    std::pair<std::vector<DialogueRecord>, std::vector<DialogueRecord>> out;
    for (size_t i = 0; i < n; ++i)
        (i < n_val ? out.second : out.first).push_back(records[idx[i]]);
    return out;
}

void save_corpus(const std::string& path, const std::vector<DialogueRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open for write: " + path);
    for (const auto& rec : records) {
        nlohmann::ordered_json j;
        j["schema"] = 1;
        j["id"] = rec.id;
        j["family"] = rec.family;
        nlohmann::ordered_json turns = nlohmann::ordered_json::array();
        for (const auto& t : rec.turns)
            turns.push_back({{"user", t.user}, {"assistant", t.assistant}});
        j["turns"] = std::move(turns);
        f << j.dump() << "\n";
    }
}

std::vector<DialogueRecord> load_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open: " + path);
    std::vector<DialogueRecord> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw MalformedInput("corpus line " + std::to_string(lineno) + ": " + e.what());
        }
        if (j.value("schema", 1) != 1)
            throw MalformedInput("corpus line " + std::to_string(lineno) + ": unknown schema");
        DialogueRecord rec;
        try {
            rec.id = j.at("id").get<int64_t>();
            rec.family = j.at("family").get<std::string>();
            for (const auto& t : j.at("turns")) {
                DialogueTurn turn;
                turn.user = t.at("user").get<std::vector<int>>();
                turn.assistant = t.at("assistant").get<std::vector<int>>();
                rec.turns.push_back(std::move(turn));
            }
        } catch (const nlohmann::json::exception& e) {
            throw MalformedInput("corpus line " + std::to_string(lineno) + ": " + e.what());
        }
        if (rec.turns.empty())
            throw MalformedInput("corpus line " + std::to_string(lineno) + ": record has no turns");
        out.push_back(std::move(rec));
    }
    return out;
}

CorpusStats corpus_stats(const std::vector<DialogueRecord>& records) {
    CorpusStats st;
    st.records = records.size();
    size_t user_tokens = 0, answer_tokens = 0;
    for (const auto& rec : records) {
        st.turns += rec.turns.size();
        if (rec.family == "echo") ++st.echo;
        if (rec.family == "transform") ++st.transform;
        if (rec.family == "carry") ++st.carry;
        for (const auto& t : rec.turns) {
            user_tokens += t.user.size();
            answer_tokens += t.assistant.size();
        }
    }
    if (st.records) st.mean_turns = static_cast<double>(st.turns) / st.records;
    if (st.turns) {
        st.mean_user_len = static_cast<double>(user_tokens) / st.turns;
        st.mean_answer_len = static_cast<double>(answer_tokens) / st.turns;
    }
    return st;
}

Sample make_sample(const DialogueRecord& record, int turn_index, const ModelConfig& mc,
                   const SpeechFrontend& frontend, const ToyCodec& codec) {
    if (turn_index < 0 || turn_index >= static_cast<int>(record.turns.size()))
        throw InvalidArgument("turn index out of range");
    const JointVocabulary& vocab = mc.vocab;
    const auto& turn = record.turns[turn_index];

    std::vector<TextPair> history;
    for (int t = 0; t < turn_index; ++t)
        history.emplace_back(record.turns[t].user, record.turns[t].assistant);

    std::vector<int> user_audio = codec.encode(turn.user);
    Mat feats = frontend.encode(user_audio);
    BuiltPrompt bp = build_prompt({}, history, feats, vocab, mc.max_positions, turn_index);

    std::vector<int> answer_audio = codec.encode(turn.assistant);
    answer_audio.push_back(vocab.specials().audio_eoa);
    GroupedAudio grouped = group_tokens(answer_audio, mc.group_size, vocab);

    int text_real = static_cast<int>(turn.assistant.size()) + 1;  // answer + eos
    int steps = std::max(static_cast<int>(grouped.groups.size()), text_real);

    Sample s;
    s.prompt_len = static_cast<int>(bp.inputs.size());
    s.text_targets.resize(steps, vocab.specials().text_pad);
    s.text_mask.assign(steps, 0);
    for (int i = 0; i < static_cast<int>(turn.assistant.size()); ++i) {
        s.text_targets[i] = turn.assistant[i];
        s.text_mask[i] = 1;
    }
    s.text_targets[turn.assistant.size()] = vocab.specials().text_eos;
    s.text_mask[turn.assistant.size()] = 1;

    std::vector<int> pad_group(mc.group_size, vocab.specials().audio_pad);
    s.audio_targets.assign(steps, pad_group);
    s.audio_mask.assign(steps, std::vector<uint8_t>(mc.group_size, 0));
    for (int i = 0; i < static_cast<int>(grouped.groups.size()); ++i) {
        s.audio_targets[i] = grouped.groups[i];
        for (int slot = 0; slot < mc.group_size; ++slot) {
            size_t flat = static_cast<size_t>(i) * mc.group_size + slot;
            if (flat < answer_audio.size()) s.audio_mask[i][slot] = 1;
        }
    }

    s.inputs = std::move(bp.inputs);
    s.inputs.reserve(s.inputs.size() + steps - 1);
    for (int i = 0; i + 1 < steps; ++i)
        s.inputs.push_back(ResponseStep{s.text_targets[i], s.audio_targets[i]});

    if (static_cast<int>(s.inputs.size()) > mc.max_positions)
        throw CapacityError("collated sample needs " + std::to_string(s.inputs.size()) +
                            " positions, max is " + std::to_string(mc.max_positions));
    return s;
}

CollateResult collate(const std::vector<DialogueRecord>& records, const ModelConfig& mc,
                      const SpeechFrontend& frontend, const ToyCodec& codec,
                      const CollateOptions& opts) {
    CollateResult res;
    for (const auto& rec : records)
        for (int t = 0; t < static_cast<int>(rec.turns.size()); ++t) {
            try {
                res.samples.push_back(make_sample(rec, t, mc, frontend, codec));
            } catch (const CapacityError&) {
                if (opts.on_overflow == CollateOptions::OnOverflow::kError) throw;
                ++res.skipped;
            }
        }
    return res;
}

TrainResult train_on_corpus(const TrainConfig& cfg, Model& model,
                            const std::vector<DialogueRecord>& records,
                            const SpeechFrontend& frontend, const ToyCodec& codec,
                            const std::string& outdir, const std::string& run_config_json) {
    auto [train_recs, val_recs] = split(records, cfg.val_fraction, cfg.seed);
    CollateOptions opts;
    opts.on_overflow = CollateOptions::OnOverflow::kError;
    std::vector<Sample> train_samples =
        collate(train_recs, model.config(), frontend, codec, opts).samples;
    std::vector<Sample> val_samples =
        collate(val_recs, model.config(), frontend, codec, opts).samples;
    return train(cfg, model, train_samples, val_samples, outdir, run_config_json);
}

}  // namespace speechlm
