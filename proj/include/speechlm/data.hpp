#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "speechlm/frontend.hpp"
#include "speechlm/toy_codec.hpp"
#include "speechlm/training.hpp"

namespace speechlm {

struct DialogueTurn {
    std::vector<int> user;
    std::vector<int> assistant;
};

struct DialogueRecord {
    int64_t id = 0;
    std::string family;  // echo | transform | carry
    std::vector<DialogueTurn> turns;
};

struct TaskMix {
    double echo = 1.0;
    double transform = 0.0;
    double carry = 0.0;  // multi-turn-carry
};

struct GenConfig {
    int n_records = 1000;
    TaskMix mix;
    int min_len = 1;  // user utterance length in text tokens
    int max_len = 5;
    uint64_t seed = 0;
};

// Synthetic dialogue corpus. echo answers repeat the question token for
// token; transform answers reverse it; carry records have two turns where the
// second answer echoes the first turn's first user token (exercising the
// text-history pathway).
std::vector<DialogueRecord> gen_corpus(const GenConfig& cfg, const JointVocabulary& vocab);

// disjoint, exhaustive, deterministic; val gets floor(n * fraction) records
std::pair<std::vector<DialogueRecord>, std::vector<DialogueRecord>> split(
    const std::vector<DialogueRecord>& records, double val_fraction, uint64_t seed);

// corpus file: line-delimited JSON, one record per line, schema-versioned
void save_corpus(const std::string& path, const std::vector<DialogueRecord>& records);
std::vector<DialogueRecord> load_corpus(const std::string& path);

struct CorpusStats {
    size_t records = 0;
    size_t turns = 0;
    double mean_turns = 0.0;
    double mean_user_len = 0.0;
    double mean_answer_len = 0.0;
    size_t echo = 0, transform = 0, carry = 0;
};
CorpusStats corpus_stats(const std::vector<DialogueRecord>& records);

struct CollateOptions {
    enum class OnOverflow { kError, kSkip };
    OnOverflow on_overflow = OnOverflow::kError;
};

// One training sample per dialogue turn: earlier turns become text history,
// the current turn's user audio becomes speech features, and the assistant
// text/audio become the parallel targets (audio = toy_encode(text) + eoa,
// grouped; text padded with text_pad to the step count).
Sample make_sample(const DialogueRecord& record, int turn_index, const ModelConfig& mc,
                   const SpeechFrontend& frontend, const ToyCodec& codec);

struct CollateResult {
    std::vector<Sample> samples;
    size_t skipped = 0;  // overflowing samples, when on_overflow == kSkip
};
CollateResult collate(const std::vector<DialogueRecord>& records, const ModelConfig& mc,
                      const SpeechFrontend& frontend, const ToyCodec& codec,
                      const CollateOptions& opts = {});

// split + collate + train, end to end
TrainResult train_on_corpus(const TrainConfig& cfg, Model& model,
                            const std::vector<DialogueRecord>& records,
                            const SpeechFrontend& frontend, const ToyCodec& codec,
                            const std::string& outdir, const std::string& run_config_json = "");

}  // namespace speechlm
