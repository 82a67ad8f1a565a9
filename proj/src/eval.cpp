#include "speechlm/eval.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "speechlm/errors.hpp"

namespace speechlm {

namespace {
template <typename T>
double wer_impl(const std::vector<T>& ref, const std::vector<T>& hyp) {
    size_t m = ref.size(), n = hyp.size();
    std::vector<size_t> prev(n + 1), cur(n + 1);
    for (size_t j = 0; j <= n; ++j) prev[j] = j;
    for (size_t i = 1; i <= m; ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= n; ++j) {
            size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return static_cast<double>(prev[n]) / std::max<size_t>(1, m);
}
}  // namespace

double wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
    return wer_impl(reference, hypothesis);
}

double wer_tokens(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
    return wer_impl(reference, hypothesis);
}

std::string normalize_text(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool in_space = true;  // swallow leading whitespace
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            out.push_back(static_cast<char>(std::tolower(c)));
            in_space = false;
        } else if (std::isspace(c)) {
            if (!in_space) out.push_back(' ');
            in_space = true;
        }
        // punctuation and anything else: dropped
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream in(normalize_text(text));
    std::vector<std::string> out;
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

double repeat_sample_score(double wer_value) {
    if (wer_value < 0.0) throw InvalidArgument("wer cannot be negative");
    return wer_value <= 0.5 ? 100.0 * (1.0 - wer_value) : 0.0;
}

double repeat_dataset_score(const std::vector<double>& sample_wers) {
    if (sample_wers.empty()) throw InvalidArgument("repeat_dataset_score needs samples");
    size_t passing = 0;
    double sum = 0.0;
    for (double w : sample_wers) {
        if (w < 0.0) throw InvalidArgument("wer cannot be negative");
        if (w <= 0.5) {
            ++passing;
            sum += w;
        }
    }
    if (passing == 0) return 0.0;
    double alpha = static_cast<double>(passing) / sample_wers.size();
    double mean_passing = sum / passing;
    return 100.0 * alpha * (1.0 - mean_passing);
}

double asr_wer(const std::vector<int>& generated_audio, const std::vector<int>& generated_text,
               const ToyCodec& codec) {
    ToyCodec::DecodeResult dec = codec.decode(generated_audio);
    return wer_tokens(generated_text, dec.text);
}

double overall_score(const std::vector<double>& dataset_scores) {
    if (dataset_scores.empty()) throw InvalidArgument("overall_score needs at least one dataset");
    double sum = 0.0;
    for (double s : dataset_scores) sum += s;
    return sum / dataset_scores.size();
}

// ---- judge prompts ----------------------------------------------------------

JudgeMode judge_mode_from_name(const std::string& name) {
    if (name == "open") return JudgeMode::kOpen;
    if (name == "semi-open") return JudgeMode::kSemiOpen;
    if (name == "qa") return JudgeMode::kQa;
    if (name == "multi-round") return JudgeMode::kMultiRound;
    throw InvalidArgument("unknown judge mode: " + name);
}

namespace {

const char* kOpenTemplate =
    "I need your help to evaluate the performance of several models in the speech interaction scenario. The models will receive a speech input from the user, which they need to understand and respond to with a speech output.\n"
    "Your task is to rate the model’s responses based on the provided user input transcription [Instruction] and the model’s output transcription [Response].\n"
    "\n"
    "Please evaluate the response on a scale of 1 to 5:\n"
    "1 point: The response is largely irrelevant, incorrect, or fails to address the user’s query. It may be off-topic or provide incorrect information.\n"
    "2 points: The response is somewhat relevant but lacks accuracy or completeness. It may only partially answer the user’s question or include extraneous information.\n"
    "3 points: The response is relevant and mostly accurate, but it may lack conciseness or include unnecessary details that don’t contribute to the main point.\n"
    "4 points: The response is relevant, accurate, and concise, providing a clear answer to the user’s question without unnecessary elaboration.\n"
    "5 points: The response is exceptionally relevant, accurate, and to the point. It directly addresses the user’s query in a highly effective and efficient manner, providing exactly the information needed.\n"
    "\n"
    "Below are the transcription of user’s instruction and models’ response:\n"
    "### [Instruction]\n"
    "{question}\n"
    "\n"
    "### [Response]\n"
    "{answer}\n"
    "\n"
    "After evaluating, please output the score only without anything else.\n"
    "You don’t need to provide any explanations.";

const char* kSemiOpenTemplate =
    "I need your help to evaluate the performance of several models in the speech interaction scenario. The models will receive a speech input from the user, which they need to understand and respond to with a speech output.\n"
    "Your task is to rate the model’s responses based on the provided user input transcription [Instruction], the model’s output transcription [Response] and some suggested answers [Reference].\n"
    "The model's response doesn't necessarily have to be identical to the suggested answers, as long as it aligns with the question and is reasonable.\n"
    "\n"
    "Please evaluate the response on a scale of 1 to 5:\n"
    "1 point: The response is largely irrelevant, incorrect, or fails to address the user's query. It may be off-topic or provide incorrect information. The response does not align with the question in any meaningful way.\n"
    "2 points: The response is somewhat relevant but lacks accuracy, completeness, or coherence. It may partially address the query but introduces unnecessary information or deviates from the core issue. The response may not align well with the suggested answer but still provides some value.\n"
    "3 points: The response is relevant and mostly accurate, but may lack conciseness or clarity. It addresses the question reasonably, but there might be slight deviations in approach or content. While it may not strictly align with the suggested answer, it still effectively addresses the core of the query.\n"
    "4 points: The response is relevant, accurate, and concise. It provides a clear answer to the user’s question and avoids unnecessary details. While it may not exactly mirror the suggested answer, it effectively addresses the user's query in a logical and well-reasoned manner.\n"
    "5 points: The response is exceptionally relevant, accurate, and concise. It directly addresses the user's query in the most efficient manner, providing exactly the information needed. The response may differ from the suggested answer in phrasing or approach but still aligns perfectly with the intent of the query, demonstrating a high level of reasoning and clarity.\n"
    "\n"
    "Below are the transcription of user’s instruction, models’ response and the reference answer:\n"
    "### [Instruction]\n"
    "{question}\n"
    "\n"
    "### [Response]\n"
    "{answer}\n"
    "\n"
    "### [Reference]\n"
    "{reference}\n"
    "\n"
    "After evaluating, please output the score only without anything else.\n"
    "You don’t need to provide any explanations.";

const char* kQaTemplate =
    "I need your help to evaluate the performance of several models in the speech interaction scenario. The models will receive a speech input from the user, which they need to understand and respond to with a speech output.\n"
    "Your task is to rate the model’s responses based on the provided user input transcription [Question], the model’s output transcription [Response] and the correct answer [Reference].\n"
    "\n"
    "Below are the transcription of user’s instruction, models’ response and the reference answer:\n"
    "### [Question]\n"
    "{question}\n"
    "\n"
    "### [Response]\n"
    "{answer}\n"
    "\n"
    "### [Reference]\n"
    "{reference}\n"
    "\n"
    "Is the model’s response correct based on the question and reference answer?\n"
    "Please only output a single \"Yes\" or \"No\". Do not output anything else.";

const char* kMultiRoundIntro =
    "I need your help to evaluate the performance of several models in the multi-round speech interaction scenario. The models will receive a speech input from the user, which they need to understand and respond to with a speech output.\n"
    "Your task is to rate the model’s multi-round responses based on the provided user input transcription [Instruction], the model’s output transcription [Response] and some suggested answers [Reference].\n"
    "The model's response doesn't necessarily have to be identical to the suggested answers, as long as it aligns with the question and is reasonable.\n"
    "\n"
    "Please evaluate the response on a scale of 1 to 5:\n"
    "1 point: Responses are irrelevant or nonsensical. Or responses ignore previous turns, leading to confusion or irrelevance.\n"
    "2 points: Some answers are relevant but many lack detail or completeness. Frequently loses track of the conversation, with responses that are not aligned with earlier turns.\n"
    "3 points: Responses are mostly relevant and coherent, though occasional lapses in depth. The model follows the conversation, but may occasionally forget important details from earlier turns.\n"
    "4 points: Responses are clear, relevant, and detailed. Generally keeps track of the conversation, with minor lapses.\n"
    "5 points: Responses are clear, relevant, and detailed. Flawlessly integrates context across all rounds, ensuring natural conversation flow, creating an engaging experience.\n"
    "\n"
    "Below are the transcription of user’s instruction, models’ response and the reference answer:\n";

const char* kMultiRoundOutro =
    "\nPlease output only one score for the whole conversation without anything else.\n"
    "You don’t need to provide any explanations.";

void replace_slot(std::string& text, const std::string& slot, const std::string& value) {
    size_t pos = text.find(slot);
    while (pos != std::string::npos) {
        text.replace(pos, slot.size(), value);
        pos = text.find(slot, pos + value.size());
    }
}

void require_slot(const std::string& value, const char* what, const char* mode) {
    if (value.empty())
        throw InvalidArgument(std::string("sample is missing the required ") + what + " for " +
                              mode + " mode");
}

}  // namespace

std::string render_judge_prompt(const EvalSample& sample, JudgeMode mode) {
    std::string out;
    switch (mode) {
        case JudgeMode::kOpen:
            require_slot(sample.question, "question", "open");
            require_slot(sample.hypothesis_text, "answer", "open");
            out = kOpenTemplate;
            replace_slot(out, "{question}", sample.question);
            replace_slot(out, "{answer}", sample.hypothesis_text);
            return out;
        case JudgeMode::kSemiOpen:
            require_slot(sample.question, "question", "semi-open");
            require_slot(sample.hypothesis_text, "answer", "semi-open");
            require_slot(sample.reference_text, "reference", "semi-open");
            out = kSemiOpenTemplate;
            replace_slot(out, "{question}", sample.question);
            replace_slot(out, "{answer}", sample.hypothesis_text);
            replace_slot(out, "{reference}", sample.reference_text);
            return out;
        case JudgeMode::kQa:
            require_slot(sample.question, "question", "qa");
            require_slot(sample.hypothesis_text, "answer", "qa");
            require_slot(sample.reference_text, "reference", "qa");
            out = kQaTemplate;
            replace_slot(out, "{question}", sample.question);
            replace_slot(out, "{answer}", sample.hypothesis_text);
            replace_slot(out, "{reference}", sample.reference_text);
            return out;
        case JudgeMode::kMultiRound: {
            if (sample.rounds.empty())
                throw InvalidArgument("multi-round sample has no rounds");
            out = kMultiRoundIntro;
            for (size_t r = 0; r < sample.rounds.size(); ++r) {
                const EvalRound& round = sample.rounds[r];
                require_slot(round.question, "question", "multi-round");
                require_slot(round.answer, "answer", "multi-round");
                require_slot(round.reference, "reference", "multi-round");
                std::string n = std::to_string(r + 1);
                if (r > 0) out += "\n";
                out += "### [Round_" + n + "]\n";
                out += "### [Instruction]\n" + round.question + "\n";
                out += "### [Response]\n" + round.answer + "\n";
                out += "### [Reference]\n" + round.reference + "\n";
            }
            out += kMultiRoundOutro;
            return out;
        }
    }
    throw InvalidArgument("unknown judge mode");
}

std::string StubJudge::evaluate(const std::string& prompt) {
    if (prompt.find("Please only output a single \"Yes\" or \"No\".") != std::string::npos)
        return "Yes";
    return fixed_score_;
}

double judge_reply_to_score(const std::string& reply, JudgeMode mode) {
    std::string t = reply;
    t.erase(0, t.find_first_not_of(" \t\r\n"));
    size_t end = t.find_last_not_of(" \t\r\n");
    t.erase(end == std::string::npos ? 0 : end + 1);
    if (mode == JudgeMode::kQa) {
        std::string lower;
        for (char c : t) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        if (lower.rfind("yes", 0) == 0) return 100.0;
        if (lower.rfind("no", 0) == 0) return 0.0;
        throw MalformedInput("qa judge reply is not Yes/No: " + reply);
    }
    try {
        double s = std::stod(t);
        if (s < 1.0 || s > 5.0) throw MalformedInput("judge score out of 1..5: " + reply);
        return s * 20.0;
    } catch (const std::exception&) {
        throw MalformedInput("cannot parse judge score: " + reply);
    }
}

// ---- manifest / report -------------------------------------------------------

std::vector<EvalSample> load_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open: " + path);
    std::vector<EvalSample> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw MalformedInput("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
        EvalSample s;
        s.id = j.value("id", std::to_string(lineno));
        s.dataset = j.value("dataset", "default");
        s.mode = j.value("mode", "repeat");
        s.question = j.value("question", "");
        s.reference_text = j.value("reference", "");
        s.hypothesis_text = j.value("hypothesis", "");
        if (j.contains("rounds"))
            for (const auto& r : j["rounds"]) {
                EvalRound round;
                round.question = r.value("question", "");
                round.answer = r.value("answer", "");
                round.reference = r.value("reference", "");
                s.rounds.push_back(std::move(round));
            }
        out.push_back(std::move(s));
    }
    return out;
}

EvalReport score_manifest(const std::vector<EvalSample>& samples, JudgeClient& judge) {
    if (samples.empty()) throw InvalidArgument("empty manifest");
    // keep dataset order stable: first appearance wins
    std::vector<std::string> dataset_order;
    std::map<std::string, std::vector<const EvalSample*>> by_dataset;
    for (const auto& s : samples) {
        if (!by_dataset.count(s.dataset)) dataset_order.push_back(s.dataset);
        by_dataset[s.dataset].push_back(&s);
    }

    EvalReport rep;
    std::vector<double> scores;
    for (const auto& name : dataset_order) {
        const auto& group = by_dataset[name];
        double score;
        if (group.front()->mode == "repeat") {
            std::vector<double> wers;
            for (const EvalSample* s : group)
                wers.push_back(wer(split_words(s->reference_text), split_words(s->hypothesis_text)));
            score = repeat_dataset_score(wers);
        } else {
            JudgeMode mode = judge_mode_from_name(group.front()->mode);
            double sum = 0.0;
            for (const EvalSample* s : group)
                sum += judge_reply_to_score(judge.evaluate(render_judge_prompt(*s, mode)), mode);
            score = sum / group.size();
        }
        rep.datasets[name] = score;
        scores.push_back(score);
    }
    rep.overall = overall_score(scores);
    return rep;
}

void write_report(const std::string& path, const EvalReport& report) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CorruptFile("cannot open for write: " + path);
    nlohmann::ordered_json j;
    nlohmann::ordered_json ds;
    for (const auto& [name, score] : report.datasets) ds[name] = score;
    j["datasets"] = std::move(ds);
    j["overall"] = report.overall;
    f << j.dump(2) << "\n";
}

}  // namespace speechlm
