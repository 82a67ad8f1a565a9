#pragma once

#include <map>
#include <string>
#include <vector>

#include "speechlm/toy_codec.hpp"

namespace speechlm {

// (substitutions + insertions + deletions) / max(1, |reference|); can exceed 1
double wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);
double wer_tokens(const std::vector<int>& reference, const std::vector<int>& hypothesis);

// lowercase, strip punctuation, collapse whitespace; idempotent
std::string normalize_text(const std::string& text);
std::vector<std::string> split_words(const std::string& text);  // normalizes first

// 100 * (1 - WER) for WER <= 0.5, else 0
double repeat_sample_score(double wer_value);

// 100 * alpha * (1 - mean WER over samples with WER <= 0.5), where alpha is
// the fraction of such samples; 0 when every sample fails the cutoff
double repeat_dataset_score(const std::vector<double>& sample_wers);

// speech-text alignment: decode the generated audio through the toy codec and
// take the WER of the decoded tokens against the generated text tokens
double asr_wer(const std::vector<int>& generated_audio, const std::vector<int>& generated_text,
               const ToyCodec& codec);

// unweighted mean over dataset scores
double overall_score(const std::vector<double>& dataset_scores);

// ---- judge prompts ----------------------------------------------------------

enum class JudgeMode { kOpen, kSemiOpen, kQa, kMultiRound };
JudgeMode judge_mode_from_name(const std::string& name);

struct EvalRound {
    std::string question, answer, reference;
};

struct EvalSample {
    std::string id;
    std::string dataset;
    std::string mode;  // open | semi-open | qa | multi-round | repeat
    std::string question;
    std::string reference_text;
    std::string hypothesis_text;
    std::vector<EvalRound> rounds;  // multi-round only
};

// byte-exact template instantiation; throws InvalidArgument when a required
// slot is missing for the mode
std::string render_judge_prompt(const EvalSample& sample, JudgeMode mode);

// external judge behind an interface; only a deterministic stub ships here
struct JudgeClient {
    virtual ~JudgeClient() = default;
    virtual std::string evaluate(const std::string& prompt) = 0;
};

// Fixed deterministic replies: answers "Yes" when the prompt asks for Yes/No,
// otherwise the configured score string.
struct StubJudge : JudgeClient {
    explicit StubJudge(std::string fixed_score = "3") : fixed_score_(std::move(fixed_score)) {}
    std::string evaluate(const std::string& prompt) override;

  private:
    std::string fixed_score_;
};

// 1..5 -> 20..100; qa replies map Yes -> 100, No -> 0
double judge_reply_to_score(const std::string& reply, JudgeMode mode);

// ---- manifest / report -------------------------------------------------------

std::vector<EvalSample> load_manifest(const std::string& path);

struct EvalReport {
    std::map<std::string, double> datasets;
    double overall = 0.0;
};

EvalReport score_manifest(const std::vector<EvalSample>& samples, JudgeClient& judge);
void write_report(const std::string& path, const EvalReport& report);

}  // namespace speechlm
