#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "speechlm/model.hpp"

namespace speechlm {

// s2s is the single-stage speech-to-speech objective; asr/tts are the
// pre-training ablation modes realized as loss masks over the same
// architecture (asr keeps only the text-stream loss, tts only the audio one).
enum class TrainMode { kSpeechToSpeech, kAsr, kTts };

std::string train_mode_name(TrainMode mode);
TrainMode train_mode_from_name(const std::string& name);

struct TrainConfig {
    double peak_lr = 1e-4;
    int warmup_steps = 1000;
    int total_steps = 10000;
    int batch_size = 16;
    double lambda_text = 1.0;
    double lambda_audio = 1.0;
    TrainMode mode = TrainMode::kSpeechToSpeech;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
    int validate_every = 1000;
    double val_fraction = 0.01;
    uint64_t seed = 0;

    void validate() const;
    std::string to_json_string() const;
    static TrainConfig from_json_string(const std::string& text);
};

// One training example: the full input sequence (prompt plus response steps
// shifted right by one) and the parallel targets. Position prompt_len-1 (the
// answer marker) predicts target index 0.
struct Sample {
    std::vector<StepInput> inputs;
    int prompt_len = 0;
    std::vector<int> text_targets;                 // [steps]
    std::vector<std::vector<int>> audio_targets;   // [steps][G], global ids
    std::vector<uint8_t> text_mask;                // 1 on real (non-pad) targets
    std::vector<std::vector<uint8_t>> audio_mask;  // [steps][G]
    int target_steps() const { return static_cast<int>(text_targets.size()); }
};

struct Batch {
    std::vector<Sample> samples;
};

struct LossStats {
    double loss_text = 0.0;
    double loss_audio = 0.0;
    double loss_total = 0.0;
    double text_accuracy = 0.0;
    double audio_accuracy = 0.0;
    size_t text_tokens = 0;   // unmasked text targets in the batch
    size_t audio_tokens = 0;  // unmasked audio targets in the batch
};

// Weighted masked cross-entropy over the parallel streams: text over the text
// logit slice, audio per group slot over the group logits, each normalized by
// its own unmasked-target count. loss_total = lambda_text * loss_text +
// lambda_audio * loss_audio, with the inactive stream zeroed in asr/tts mode.
LossStats compute_loss(const Model& model, const Batch& batch, const TrainConfig& cfg);

// same, accumulating flat parameter gradients into grads
LossStats loss_and_grads(const Model& model, const Batch& batch, const TrainConfig& cfg,
                         std::vector<double>& grads);

// linear 0 -> peak over warmup_steps, then linear peak -> 0 at total_steps;
// beyond total_steps clamps to 0
double lr_schedule(const TrainConfig& cfg, int step);

struct AdamState {
    std::vector<double> m, v;
    long t = 0;
    void init(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }
};

// decoupled weight decay: applied to the parameters directly, not through the
// gradients; throws InvalidArgument on non-finite gradients (step aborted)
void optimizer_step(std::vector<double>& params, const std::vector<double>& grads,
                    AdamState& state, double lr, const TrainConfig& cfg);

// Central finite differences of the total loss against analytic gradients on
// n_coords sampled coordinates; returns the max relative error. Pass
// analytic_override to check someone else's gradients (negative controls).
double grad_check(Model& model, const Batch& batch, const TrainConfig& cfg, int n_coords,
                  double eps, uint64_t seed,
                  const std::vector<double>* analytic_override = nullptr);

struct TrainResult {
    double best_val_loss = std::numeric_limits<double>::infinity();
    int best_step = -1;
    double best_val_text_acc = 0.0;
    double best_val_audio_acc = 0.0;
    bool diverged = false;
    int steps_run = 0;
    std::string checkpoint_path;
    std::string metrics_path;
};

// The single-stage loop: shuffled batches, warmup+decay schedule, metrics as
// line-delimited JSON {step, lr, loss_text, loss_audio, loss_total, val_loss?},
// checkpoint saved on every new validation-loss minimum. Deterministic under a
// fixed seed (kernels are order-fixed, so this holds for any thread count).
TrainResult train(const TrainConfig& cfg, Model& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const std::string& outdir,
                  const std::string& run_config_json = "");

}  // namespace speechlm
