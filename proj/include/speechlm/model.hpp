#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "speechlm/mat.hpp"
#include "speechlm/vocab.hpp"

namespace speechlm {

// Two readings of "project the audio logits into group-sized logits":
// kLogitMap maps the audio logit slice |V_a| -> G*|V_a| (the literal one,
// default); kHiddenState maps the final hidden state model_dim -> G*|V_a|.
enum class GroupHeadMode { kLogitMap, kHiddenState };

struct ModelConfig {
    int layers = 2;
    int model_dim = 128;
    int heads = 4;
    int max_positions = 256;
    int group_size = 3;
    JointVocabulary vocab;
    GroupHeadMode group_head = GroupHeadMode::kLogitMap;
    uint64_t init_seed = 1;
    int ffn_mult = 4;

    int head_dim() const { return model_dim / heads; }
    int ffn_dim() const { return model_dim * ffn_mult; }
    void validate() const;
    bool operator==(const ModelConfig& o) const;

    std::string to_json_string() const;
    static ModelConfig from_json_string(const std::string& text);
};

// ---- per-position inputs -------------------------------------------------

// Already-projected encoder feature row (model_dim wide).
struct SpeechFeature {
    std::vector<double> vec;
    bool operator==(const SpeechFeature&) const = default;
};

// One text token of the prompt template.
struct PromptText {
    int token = 0;
    bool operator==(const PromptText&) const = default;
};

// One parallel step of the response: a text token plus a group of audio ids.
struct ResponseStep {
    int text_token = 0;
    std::vector<int> audio_group;
    bool operator==(const ResponseStep&) const = default;
};

using StepInput = std::variant<SpeechFeature, PromptText, ResponseStep>;

// ---- per-position outputs ------------------------------------------------

struct StepLogits {
    std::vector<double> joint;  // [joint_size]; text slice [0, V_t), audio slice after
    Mat group;                  // [G, V_a], row g = distribution for group slot g
};

// ---- kv cache --------------------------------------------------------------

// Per-layer attention keys/values of an already-processed prefix. Owned by a
// single decoding session; appending one position bumps len by one in every
// layer. truncate() drops the tail, which is how cross-round prefix reuse
// rewinds to the shared history.
struct KVCache {
    int layers = 0;
    int dim = 0;
    size_t len = 0;
    std::vector<std::vector<double>> k, v;  // per layer, len*dim doubles

    void init(int n_layers, int model_dim);
    void truncate(size_t new_len);
    bool empty() const { return len == 0; }
};

// ---- parameters ------------------------------------------------------------

struct TensorSpec {
    enum class Kind { kWeight, kBias, kGamma };
    std::string name;
    size_t offset = 0;
    int rows = 0;
    int cols = 0;
    Kind kind = Kind::kWeight;
    size_t count() const { return static_cast<size_t>(rows) * cols; }
};

struct LayerOffsets {
    size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    size_t ln2_g, ln2_b, w1, b1, w2, b2;
};

// Offsets of every named tensor inside the flat parameter vector. Pure
// function of the config, so checkpoints can be validated against it.
struct ParamLayout {
    std::vector<TensorSpec> tensors;
    size_t tok_emb = 0, pos_emb = 0;
    std::vector<LayerOffsets> layer;
    size_t lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0, w_group = 0, b_group = 0;
    size_t total = 0;

    static ParamLayout build(const ModelConfig& cfg);
};

// ---- activation tape for training ------------------------------------------

// Everything the backward pass needs. Final norm and joint logits are only
// materialized from loss_start on; earlier rows get gradient exclusively
// through attention.
struct TrainTape {
    int seq_len = 0;
    int loss_start = 0;
    struct LayerTape {
        Mat x_in;                                // [S, D] residual stream entering the block
        Mat ln1_out;                             // [S, D]
        std::vector<double> ln1_mean, ln1_rstd;  // [S]
        Mat q, k, v;                             // [S, D]
        std::vector<Mat> probs;                  // per head [S, S], rows causal
        Mat ctx;                                 // [S, D] attention mix before out-proj
        Mat x_mid;                               // [S, D] after attention residual
        Mat ln2_out;                             // [S, D]
        std::vector<double> ln2_mean, ln2_rstd;
        Mat ffn_pre;                             // [S, F]
        Mat ffn_act;                             // [S, F]
    };
    std::vector<LayerTape> layers;
    Mat x_final;                          // [S, D]
    Mat hidden;                           // [S - loss_start, D] final-norm rows
    std::vector<double> lnf_mean, lnf_rstd;
    Mat joint_logits;                     // [S - loss_start, joint_size]
};

// ---- the model --------------------------------------------------------------

class Model {
  public:
    explicit Model(const ModelConfig& cfg);  // zero-initialized parameters
    static Model init(const ModelConfig& cfg);  // seeded init, deterministic

    const ModelConfig& config() const { return cfg_; }
    const ParamLayout& layout() const { return layout_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    size_t param_count() const { return layout_.total; }

    // Aggregated input embedding for one position: speech rows pass through,
    // prompt text gets its token embedding, response steps get text embedding
    // plus the mean of the group's audio embeddings; learned position
    // embedding added in all cases.
    std::vector<double> embed_step(const StepInput& input, size_t position) const;

    // Incremental forward: appends the new inputs to the cache (a scratch
    // cache if null) and returns logits for each new position. With a warm
    // cache only the new positions are computed, bitwise identical to a full
    // recompute because every reduction runs in the same order.
    std::vector<StepLogits> forward(std::span<const StepInput> inputs, KVCache* cache) const;

    // group-sized logits for one position, mode per config
    Mat group_head(const double* hidden_row, const double* joint_row) const;

    // training-path forward that records activations
    TrainTape forward_train(std::span<const StepInput> inputs, int loss_start) const;

    // Backprop through final norm, blocks and embeddings given the gradient
    // on the final-norm output rows [S - loss_start, D]. The logit-level
    // backward (output head, group head, losses) lives in the training
    // module; grads is the flat gradient vector, accumulated into.
    void backward_train(std::span<const StepInput> inputs, const TrainTape& tape,
                        const Mat& d_hidden, std::vector<double>& grads) const;

    // checkpoint: magic + version + config JSON + named f64 blobs + checksum
    void save_checkpoint(const std::string& path, uint64_t step,
                         const std::string& extra_config_json = "") const;
    struct LoadedCheckpoint {
        ModelConfig config;
        uint64_t step = 0;
        std::string extra_config_json;
        std::vector<double> params;
    };
    static LoadedCheckpoint read_checkpoint(const std::string& path);
    static Model load_checkpoint(const std::string& path, uint64_t* step_out = nullptr,
                                 std::string* extra_json_out = nullptr);
    // loads and insists the stored architecture matches `expected`
    static Model load_checkpoint_expect(const std::string& path, const ModelConfig& expected);

  private:
    ModelConfig cfg_;
    ParamLayout layout_;
    std::vector<double> params_;
};

}  // namespace speechlm
