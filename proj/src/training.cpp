#include "speechlm/training.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "speechlm/errors.hpp"
#include "speechlm/kernels.hpp"
#include "speechlm/rng.hpp"

namespace speechlm {

std::string train_mode_name(TrainMode mode) {
    switch (mode) {
        case TrainMode::kSpeechToSpeech: return "s2s";
        case TrainMode::kAsr: return "asr";
        case TrainMode::kTts: return "tts";
    }
    return "s2s";
}

TrainMode train_mode_from_name(const std::string& name) {
    if (name == "s2s") return TrainMode::kSpeechToSpeech;
    if (name == "asr") return TrainMode::kAsr;
    if (name == "tts") return TrainMode::kTts;
    throw InvalidArgument("unknown train mode: " + name);
}

void TrainConfig::validate() const {
    if (peak_lr <= 0.0) throw InvalidArgument("peak_lr must be positive");
    if (warmup_steps < 0 || total_steps < 1 || warmup_steps > total_steps)
        throw InvalidArgument("need 0 <= warmup_steps <= total_steps, total_steps >= 1");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (lambda_text < 0.0 || lambda_audio < 0.0) throw InvalidArgument("loss weights must be >= 0");
    if (validate_every < 1) throw InvalidArgument("validate_every must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw InvalidArgument("val_fraction must be in (0, 1)");
}

std::string TrainConfig::to_json_string() const {
    nlohmann::ordered_json j;
    j["peak_lr"] = peak_lr;
    j["warmup_steps"] = warmup_steps;
    j["total_steps"] = total_steps;
    j["batch_size"] = batch_size;
    j["lambda_text"] = lambda_text;
    j["lambda_audio"] = lambda_audio;
    j["mode"] = train_mode_name(mode);
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["epsilon"] = epsilon;
    j["weight_decay"] = weight_decay;
    j["validate_every"] = validate_every;
    j["val_fraction"] = val_fraction;
    j["seed"] = seed;
    return j.dump();
}

TrainConfig TrainConfig::from_json_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedInput(std::string("train config is not valid JSON: ") + e.what());
    }
    TrainConfig c;
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lambda_text = j.value("lambda_text", c.lambda_text);
    c.lambda_audio = j.value("lambda_audio", c.lambda_audio);
    if (j.contains("mode")) c.mode = train_mode_from_name(j["mode"].get<std::string>());
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.validate_every = j.value("validate_every", c.validate_every);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

namespace {

void validate_sample(const Sample& s, const ModelConfig& mc) {
    int steps = s.target_steps();
    if (steps < 1) throw InvalidBatch("sample has no target steps");
    if (s.prompt_len < 1 || static_cast<int>(s.inputs.size()) != s.prompt_len + steps - 1)
        throw InvalidBatch("sample input length does not match prompt_len + steps - 1");
    if (static_cast<int>(s.text_mask.size()) != steps ||
        static_cast<int>(s.audio_targets.size()) != steps ||
        static_cast<int>(s.audio_mask.size()) != steps)
        throw InvalidBatch("sample target/mask arrays disagree on length");
    for (int i = 0; i < steps; ++i)
        if (static_cast<int>(s.audio_targets[i].size()) != mc.group_size ||
            static_cast<int>(s.audio_mask[i].size()) != mc.group_size)
            throw InvalidBatch("audio target group width != G");
}

// log-sum-exp over a row; also reports the argmax
double log_sum_exp(const double* x, int n, int* argmax_out) {
    double mx = x[0];
    int am = 0;
    for (int j = 1; j < n; ++j)
        if (x[j] > mx) {
            mx = x[j];
            am = j;
        }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    if (argmax_out) *argmax_out = am;
    return mx + std::log(sum);
}

LossStats loss_impl(const Model& model, const Batch& batch, const TrainConfig& cfg,
                    std::vector<double>* grads) {
    if (batch.samples.empty()) throw InvalidBatch("empty batch");
    const ModelConfig& mc = model.config();
    const JointVocabulary& vocab = mc.vocab;
    const int vt = vocab.text_size();
    const int va = vocab.audio_size();
    const int vj = vocab.joint_size();
    const int g = mc.group_size;
    const int d = mc.model_dim;
    const bool text_active = cfg.mode != TrainMode::kTts;
    const bool audio_active = cfg.mode != TrainMode::kAsr;
    const bool literal_head = mc.group_head == GroupHeadMode::kLogitMap;

    size_t n_text = 0, n_audio = 0;
    for (const Sample& s : batch.samples) {
        validate_sample(s, mc);
        for (int i = 0; i < s.target_steps(); ++i) {
            if (s.text_mask[i]) ++n_text;
            for (int slot = 0; slot < g; ++slot)
                if (s.audio_mask[i][slot]) ++n_audio;
        }
    }
    if (text_active && n_text == 0) throw InvalidBatch("active text stream has no unmasked targets");
    if (audio_active && n_audio == 0)
        throw InvalidBatch("active audio stream has no unmasked targets");

    double sum_text_nll = 0.0, sum_audio_nll = 0.0;
    size_t text_correct = 0, audio_correct = 0;
    const double* p = model.params().data();
    double* gp = grads ? grads->data() : nullptr;
    const ParamLayout& lay = model.layout();

    for (const Sample& s : batch.samples) {
        const int steps = s.target_steps();
        const int loss_start = s.prompt_len - 1;
        TrainTape tape = model.forward_train(s.inputs, loss_start);

        Mat d_joint;
        if (grads) d_joint = Mat(steps, vj);

        std::vector<int> audio_rows;
        for (int i = 0; i < steps; ++i) {
            const double* jrow = tape.joint_logits.row(i);
            if (text_active && s.text_mask[i]) {
                int target = s.text_targets[i];
                if (target < 0 || target >= vt) throw InvalidBatch("text target out of range");
                int am;
                double lse = log_sum_exp(jrow, vt, &am);
                sum_text_nll += lse - jrow[target];
                if (am == target) ++text_correct;
                if (grads) {
                    double scale = cfg.lambda_text / static_cast<double>(n_text);
                    double* drow = d_joint.row(i);
                    for (int j = 0; j < vt; ++j) {
                        double soft = std::exp(jrow[j] - lse);
                        drow[j] += scale * (soft - (j == target ? 1.0 : 0.0));
                    }
                }
            }
            if (audio_active) {
                for (int slot = 0; slot < g; ++slot)
                    if (s.audio_mask[i][slot]) {
                        audio_rows.push_back(i);
                        break;
                    }
            }
        }

        Mat d_head_in;  // hidden-state head only
        if (!audio_rows.empty()) {
            const int n_rows = static_cast<int>(audio_rows.size());
            const int in_dim = literal_head ? va : d;
            Mat head_in(n_rows, in_dim);
            for (int r = 0; r < n_rows; ++r) {
                int i = audio_rows[r];
                const double* src = literal_head ? tape.joint_logits.row(i) + vocab.audio_base()
                                                 : tape.hidden.row(i);
                std::memcpy(head_in.row(r), src, sizeof(double) * in_dim);
            }
            Mat lg(n_rows, g * va);
            kernels::matmul(head_in.data(), p + lay.w_group, lg.data(), n_rows, in_dim, g * va);
            kernels::add_bias_rows(lg.data(), p + lay.b_group, n_rows, g * va);

            Mat dlg;
            if (grads) dlg = Mat(n_rows, g * va);
            for (int r = 0; r < n_rows; ++r) {
                int i = audio_rows[r];
                for (int slot = 0; slot < g; ++slot) {
                    if (!s.audio_mask[i][slot]) continue;
                    const double* row = lg.row(r) + static_cast<size_t>(slot) * va;
                    int target_local = vocab.audio_local(s.audio_targets[i][slot]);
                    if (target_local < 0 || target_local >= va)
                        throw InvalidBatch("audio target out of range");
                    int am;
                    double lse = log_sum_exp(row, va, &am);
                    sum_audio_nll += lse - row[target_local];
                    if (am == target_local) ++audio_correct;
                    if (grads) {
                        double scale = cfg.lambda_audio / static_cast<double>(n_audio);
                        double* drow = dlg.row(r) + static_cast<size_t>(slot) * va;
                        for (int j = 0; j < va; ++j) {
                            double soft = std::exp(row[j] - lse);
                            drow[j] = scale * (soft - (j == target_local ? 1.0 : 0.0));
                        }
                    }
                }
            }
            if (grads) {
                kernels::matmul_at_acc(head_in.data(), dlg.data(), gp + lay.w_group, n_rows,
                                       in_dim, g * va);
                kernels::colsum_acc(dlg.data(), gp + lay.b_group, n_rows, g * va);
                Mat dh(n_rows, in_dim);
                kernels::matmul_bt(dlg.data(), p + lay.w_group, dh.data(), n_rows, g * va, in_dim);
                if (literal_head) {
                    for (int r = 0; r < n_rows; ++r) {
                        double* drow = d_joint.row(audio_rows[r]) + vocab.audio_base();
                        const double* src = dh.row(r);
                        for (int j = 0; j < va; ++j) drow[j] += src[j];
                    }
                } else {
                    d_head_in = std::move(dh);
                }
            }
        }

        if (grads) {
            kernels::matmul_at_acc(tape.hidden.data(), d_joint.data(), gp + lay.w_out, steps, d,
                                   vj);
            kernels::colsum_acc(d_joint.data(), gp + lay.b_out, steps, vj);
            Mat d_hidden(steps, d);
            kernels::matmul_bt(d_joint.data(), p + lay.w_out, d_hidden.data(), steps, vj, d);
            if (!literal_head && d_head_in.rows > 0) {
                for (int r = 0; r < d_head_in.rows; ++r) {
                    double* drow = d_hidden.row(audio_rows[r]);
                    const double* src = d_head_in.row(r);
                    for (int j = 0; j < d; ++j) drow[j] += src[j];
                }
            }
            model.backward_train(s.inputs, tape, d_hidden, *grads);
        }
    }

    LossStats st;
    st.text_tokens = n_text;
    st.audio_tokens = n_audio;
    st.loss_text = text_active ? sum_text_nll / static_cast<double>(n_text) : 0.0;
    st.loss_audio = audio_active ? sum_audio_nll / static_cast<double>(n_audio) : 0.0;
    st.loss_total = cfg.lambda_text * st.loss_text + cfg.lambda_audio * st.loss_audio;
    st.text_accuracy = n_text ? static_cast<double>(text_correct) / n_text : 0.0;
    st.audio_accuracy = n_audio ? static_cast<double>(audio_correct) / n_audio : 0.0;
    return st;
}

}  // namespace

LossStats compute_loss(const Model& model, const Batch& batch, const TrainConfig& cfg) {
    return loss_impl(model, batch, cfg, nullptr);
}

LossStats loss_and_grads(const Model& model, const Batch& batch, const TrainConfig& cfg,
                         std::vector<double>& grads) {
    if (grads.size() != model.param_count()) grads.assign(model.param_count(), 0.0);
    return loss_impl(model, batch, cfg, &grads);
}

double lr_schedule(const TrainConfig& cfg, int step) {
    if (step < 0) throw InvalidArgument("negative step");
    if (step > cfg.total_steps) return 0.0;
    if (step <= cfg.warmup_steps)
        return cfg.warmup_steps == 0 ? cfg.peak_lr
                                     : cfg.peak_lr * step / static_cast<double>(cfg.warmup_steps);
    return cfg.peak_lr * (cfg.total_steps - step) /
           static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

void optimizer_step(std::vector<double>& params, const std::vector<double>& grads,
                    AdamState& state, double lr, const TrainConfig& cfg) {
    if (params.size() != grads.size() || state.m.size() != params.size() ||
        state.v.size() != params.size())
        throw InvalidArgument("optimizer buffers disagree on size");

    bool bad = false;
#pragma omp parallel for schedule(static) reduction(| : bad)
    for (long long i = 0; i < static_cast<long long>(grads.size()); ++i)
        bad = bad | !std::isfinite(grads[i]);
    if (bad) throw InvalidArgument("non-finite gradient; optimizer step aborted");

    state.t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(params.size()); ++i) {
        double gi = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * gi;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * gi * gi;
        double mhat = state.m[i] / bc1;
        double vhat = state.v[i] / bc2;
        // decoupled decay: straight off the parameter, not through the gradient
        params[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.epsilon)) + lr * cfg.weight_decay * params[i];
    }
}

double grad_check(Model& model, const Batch& batch, const TrainConfig& cfg, int n_coords,
                  double eps, uint64_t seed, const std::vector<double>* analytic_override) {
    std::vector<double> analytic;
    if (analytic_override) {
        analytic = *analytic_override;
    } else {
        analytic.assign(model.param_count(), 0.0);
        loss_and_grads(model, batch, cfg, analytic);
    }
    if (analytic.size() != model.param_count())
        throw InvalidArgument("analytic gradient size mismatch");

    Rng rng(seed);
    std::vector<double>& params = model.params();
    double max_rel = 0.0;
    for (int c = 0; c < n_coords; ++c) {
        size_t idx = rng.next_u64() % params.size();
        double orig = params[idx];
        params[idx] = orig + eps;
        double lp = compute_loss(model, batch, cfg).loss_total;
        params[idx] = orig - eps;
        double lm = compute_loss(model, batch, cfg).loss_total;
        params[idx] = orig;
        double numeric = (lp - lm) / (2.0 * eps);
        // Denominator floor: central differences resolve gradients down to
        // roughly machine_eps * |loss| / eps; below 1e-4 the comparison would
        // measure cancellation noise instead of the backward pass.
        double rel = std::abs(numeric - analytic[idx]) /
                     std::max(std::abs(numeric) + std::abs(analytic[idx]), 1e-4);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

TrainResult train(const TrainConfig& cfg, Model& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set, const std::string& outdir,
                  const std::string& run_config_json) {
    cfg.validate();
    if (train_set.empty()) throw InvalidArgument("empty training set");
    std::filesystem::create_directories(outdir + "/ckpt");

    TrainResult res;
    res.metrics_path = outdir + "/metrics.jsonl";
    std::ofstream metrics(res.metrics_path, std::ios::binary);
    if (!metrics) throw CorruptFile("cannot open for write: " + res.metrics_path);
    std::string ckpt_path = outdir + "/ckpt/best.ckpt";

    AdamState opt;
    opt.init(model.param_count());
    std::vector<double> grads(model.param_count(), 0.0);
    Rng rng(mix64(cfg.seed ^ 0x747261696eULL));

    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();  // trigger a shuffle on first use

    Batch val_batch;
    val_batch.samples = val_set;

    for (int step = 1; step <= cfg.total_steps; ++step) {
        Batch batch;
        batch.samples.reserve(cfg.batch_size);
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.samples.push_back(train_set[order[cursor++]]);
        }

        double lr = lr_schedule(cfg, step);
        std::fill(grads.begin(), grads.end(), 0.0);
        LossStats stats = loss_and_grads(model, batch, cfg, grads);
        res.steps_run = step;
        if (!std::isfinite(stats.loss_total)) {
            res.diverged = true;
            break;
        }
        try {
            optimizer_step(model.params(), grads, opt, lr, cfg);
        } catch (const InvalidArgument&) {
            res.diverged = true;
            break;
        }

        nlohmann::ordered_json line;
        line["step"] = step;
        line["lr"] = lr;
        line["loss_text"] = stats.loss_text;
        line["loss_audio"] = stats.loss_audio;
        line["loss_total"] = stats.loss_total;
        if (!val_set.empty() && (step % cfg.validate_every == 0 || step == cfg.total_steps)) {
            LossStats vs = compute_loss(model, val_batch, cfg);
            line["val_loss"] = vs.loss_total;
            if (vs.loss_total < res.best_val_loss) {
                res.best_val_loss = vs.loss_total;
                res.best_step = step;
                res.best_val_text_acc = vs.text_accuracy;
                res.best_val_audio_acc = vs.audio_accuracy;
                model.save_checkpoint(ckpt_path, static_cast<uint64_t>(step), run_config_json);
                res.checkpoint_path = ckpt_path;
            }
        }
        metrics << line.dump() << "\n";
    }

    if (res.checkpoint_path.empty() && !res.diverged) {
        model.save_checkpoint(ckpt_path, static_cast<uint64_t>(res.steps_run), run_config_json);
        res.checkpoint_path = ckpt_path;
    }
    return res;
}

}  // namespace speechlm
