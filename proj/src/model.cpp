#include "speechlm/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "speechlm/errors.hpp"
#include "speechlm/kernels.hpp"
#include "speechlm/rng.hpp"

namespace speechlm {

// ---- config ----------------------------------------------------------------

void ModelConfig::validate() const {
    if (layers < 1) throw InvalidArgument("layers must be >= 1");
    if (model_dim < 1 || heads < 1 || model_dim % heads != 0)
        throw InvalidArgument("model_dim must be a positive multiple of heads");
    if (group_size < 1) throw InvalidArgument("group_size must be >= 1");
    if (max_positions < 2) throw InvalidArgument("max_positions too small");
    if (ffn_mult < 1) throw InvalidArgument("ffn_mult must be >= 1");
}

bool ModelConfig::operator==(const ModelConfig& o) const {
    return layers == o.layers && model_dim == o.model_dim && heads == o.heads &&
           max_positions == o.max_positions && group_size == o.group_size &&
           vocab == o.vocab && group_head == o.group_head && init_seed == o.init_seed &&
           ffn_mult == o.ffn_mult;
}

std::string ModelConfig::to_json_string() const {
    const SpecialTokens& sp = vocab.specials();
    nlohmann::ordered_json j;
    j["layers"] = layers;
    j["model_dim"] = model_dim;
    j["heads"] = heads;
    j["max_positions"] = max_positions;
    j["group_size"] = group_size;
    j["group_head"] = group_head == GroupHeadMode::kLogitMap ? "logit_map" : "hidden_state";
    j["init_seed"] = init_seed;
    j["ffn_mult"] = ffn_mult;
    j["vocab"] = {{"text_size", vocab.text_size()},
                  {"audio_size", vocab.audio_size()},
                  {"specials",
                   {{"text_pad", sp.text_pad},
                    {"text_eos", sp.text_eos},
                    {"sys", sp.sys},
                    {"hist", sp.hist},
                    {"input", sp.input},
                    {"answer", sp.answer},
                    {"audio_pad", sp.audio_pad},
                    {"audio_eoa", sp.audio_eoa}}}};
    return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedInput(std::string("model config is not valid JSON: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg.layers = j.at("layers").get<int>();
        cfg.model_dim = j.at("model_dim").get<int>();
        cfg.heads = j.at("heads").get<int>();
        cfg.max_positions = j.at("max_positions").get<int>();
        cfg.group_size = j.at("group_size").get<int>();
        std::string gh = j.at("group_head").get<std::string>();
        if (gh == "logit_map")
            cfg.group_head = GroupHeadMode::kLogitMap;
        else if (gh == "hidden_state")
            cfg.group_head = GroupHeadMode::kHiddenState;
        else
            throw MalformedInput("unknown group_head mode: " + gh);
        cfg.init_seed = j.at("init_seed").get<uint64_t>();
        cfg.ffn_mult = j.value("ffn_mult", 4);
        const auto& v = j.at("vocab");
        SpecialTokens sp;
        const auto& s = v.at("specials");
        sp.text_pad = s.at("text_pad").get<int>();
        sp.text_eos = s.at("text_eos").get<int>();
        sp.sys = s.at("sys").get<int>();
        sp.hist = s.at("hist").get<int>();
        sp.input = s.at("input").get<int>();
        sp.answer = s.at("answer").get<int>();
        sp.audio_pad = s.at("audio_pad").get<int>();
        sp.audio_eoa = s.at("audio_eoa").get<int>();
        cfg.vocab = JointVocabulary(v.at("text_size").get<int>(), v.at("audio_size").get<int>(), sp);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedInput(std::string("model config missing field: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---- kv cache ----------------------------------------------------------------

void KVCache::init(int n_layers, int model_dim) {
    layers = n_layers;
    dim = model_dim;
    len = 0;
    k.assign(n_layers, {});
    v.assign(n_layers, {});
}

void KVCache::truncate(size_t new_len) {
    if (new_len > len) throw InvalidArgument("cannot truncate cache to a longer length");
    for (int l = 0; l < layers; ++l) {
        k[l].resize(new_len * dim);
        v[l].resize(new_len * dim);
    }
    len = new_len;
}

// ---- parameter layout ---------------------------------------------------------

namespace {
size_t add_tensor(ParamLayout& lay, const std::string& name, int rows, int cols,
                  TensorSpec::Kind kind) {
    TensorSpec spec;
    spec.name = name;
    spec.offset = lay.total;
    spec.rows = rows;
    spec.cols = cols;
    spec.kind = kind;
    lay.tensors.push_back(spec);
    lay.total += spec.count();
    return spec.offset;
}
}  // namespace

ParamLayout ParamLayout::build(const ModelConfig& cfg) {
    cfg.validate();
    using K = TensorSpec::Kind;
    ParamLayout lay;
    int d = cfg.model_dim;
    int f = cfg.ffn_dim();
    int vj = cfg.vocab.joint_size();
    int va = cfg.vocab.audio_size();
    int g = cfg.group_size;

    lay.tok_emb = add_tensor(lay, "tok_emb", vj, d, K::kWeight);
    lay.pos_emb = add_tensor(lay, "pos_emb", cfg.max_positions, d, K::kWeight);
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        LayerOffsets off;
        off.ln1_g = add_tensor(lay, p + "ln1_g", 1, d, K::kGamma);
        off.ln1_b = add_tensor(lay, p + "ln1_b", 1, d, K::kBias);
        off.wq = add_tensor(lay, p + "wq", d, d, K::kWeight);
        off.bq = add_tensor(lay, p + "bq", 1, d, K::kBias);
        off.wk = add_tensor(lay, p + "wk", d, d, K::kWeight);
        off.bk = add_tensor(lay, p + "bk", 1, d, K::kBias);
        off.wv = add_tensor(lay, p + "wv", d, d, K::kWeight);
        off.bv = add_tensor(lay, p + "bv", 1, d, K::kBias);
        off.wo = add_tensor(lay, p + "wo", d, d, K::kWeight);
        off.bo = add_tensor(lay, p + "bo", 1, d, K::kBias);
        off.ln2_g = add_tensor(lay, p + "ln2_g", 1, d, K::kGamma);
        off.ln2_b = add_tensor(lay, p + "ln2_b", 1, d, K::kBias);
        off.w1 = add_tensor(lay, p + "w1", d, f, K::kWeight);
        off.b1 = add_tensor(lay, p + "b1", 1, f, K::kBias);
        off.w2 = add_tensor(lay, p + "w2", f, d, K::kWeight);
        off.b2 = add_tensor(lay, p + "b2", 1, d, K::kBias);
        lay.layer.push_back(off);
    }
    lay.lnf_g = add_tensor(lay, "lnf_g", 1, d, K::kGamma);
    lay.lnf_b = add_tensor(lay, "lnf_b", 1, d, K::kBias);
    lay.w_out = add_tensor(lay, "w_out", d, vj, K::kWeight);
    lay.b_out = add_tensor(lay, "b_out", 1, vj, K::kBias);
    int group_in = cfg.group_head == GroupHeadMode::kLogitMap ? va : d;
    lay.w_group = add_tensor(lay, "w_group", group_in, g * va, K::kWeight);
    lay.b_group = add_tensor(lay, "b_group", 1, g * va, K::kBias);
    return lay;
}

// ---- model ----------------------------------------------------------------------

Model::Model(const ModelConfig& cfg)
    : cfg_(cfg), layout_(ParamLayout::build(cfg)), params_(layout_.total, 0.0) {}

Model Model::init(const ModelConfig& cfg) {
    Model m(cfg);
    Rng rng(cfg.init_seed);
    for (const TensorSpec& t : m.layout_.tensors) {
        double* p = m.params_.data() + t.offset;
        switch (t.kind) {
            case TensorSpec::Kind::kWeight:
                for (size_t i = 0; i < t.count(); ++i) p[i] = rng.normal() * 0.02;
                break;
            case TensorSpec::Kind::kBias:
                break;  // already zero
            case TensorSpec::Kind::kGamma:
                for (size_t i = 0; i < t.count(); ++i) p[i] = 1.0;
                break;
        }
    }
    return m;
}

std::vector<double> Model::embed_step(const StepInput& input, size_t position) const {
    if (position >= static_cast<size_t>(cfg_.max_positions))
        throw CapacityError("position " + std::to_string(position) + " exceeds max_positions");
    int d = cfg_.model_dim;
    const double* tok = params_.data() + layout_.tok_emb;
    std::vector<double> out(d, 0.0);

    if (const auto* f = std::get_if<SpeechFeature>(&input)) {
        if (static_cast<int>(f->vec.size()) != d)
            throw InvalidArgument("speech feature width != model_dim");
        std::copy(f->vec.begin(), f->vec.end(), out.begin());
    } else if (const auto* t = std::get_if<PromptText>(&input)) {
        if (!cfg_.vocab.is_text(t->token))
            throw InvalidArgument("prompt token " + std::to_string(t->token) + " not in text range");
        const double* e = tok + static_cast<size_t>(t->token) * d;
        std::copy(e, e + d, out.begin());
    } else {
        const auto& r = std::get<ResponseStep>(input);
        if (!cfg_.vocab.is_text(r.text_token))
            throw InvalidArgument("response text token not in text range");
        if (static_cast<int>(r.audio_group.size()) != cfg_.group_size)
            throw InvalidArgument("response audio group size != G");
        const double* e = tok + static_cast<size_t>(r.text_token) * d;
        std::copy(e, e + d, out.begin());
        double inv_g = 1.0 / cfg_.group_size;
        for (int id : r.audio_group) {
            if (!cfg_.vocab.is_audio(id))
                throw InvalidArgument("group id " + std::to_string(id) + " not in audio range");
            const double* a = tok + static_cast<size_t>(id) * d;
            for (int j = 0; j < d; ++j) out[j] += inv_g * a[j];
        }
    }

    const double* pos = params_.data() + layout_.pos_emb + position * d;
    for (int j = 0; j < d; ++j) out[j] += pos[j];
    return out;
}

Mat Model::group_head(const double* hidden_row, const double* joint_row) const {
    int va = cfg_.vocab.audio_size();
    int g = cfg_.group_size;
    Mat out(g, va);
    const double* w = params_.data() + layout_.w_group;
    const double* b = params_.data() + layout_.b_group;
    if (cfg_.group_head == GroupHeadMode::kLogitMap) {
        const double* audio_slice = joint_row + cfg_.vocab.audio_base();
        kernels::matmul(audio_slice, w, out.data(), 1, va, g * va);
    } else {
        kernels::matmul(hidden_row, w, out.data(), 1, cfg_.model_dim, g * va);
    }
    for (size_t i = 0; i < out.size(); ++i) out.v[i] += b[i];
    return out;
}

// attention for new rows [0,S) at global offset c_old over cache rows;
// probs (if given) receives [S, c_old+S] causal rows per head
namespace {
void attend(const Mat& q, const std::vector<double>& kcache, const std::vector<double>& vcache,
            size_t c_old, int heads, int head_dim, Mat& ctx, std::vector<Mat>* probs) {
    int s = q.rows;
    int d = q.cols;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    long long work = static_cast<long long>(s) * heads;
#pragma omp parallel for schedule(static)
    for (long long t = 0; t < work; ++t) {
        int i = static_cast<int>(t / heads);
        int h = static_cast<int>(t % heads);
        size_t n_ctx = c_old + i + 1;
        const double* qi = q.row(i) + h * head_dim;
        std::vector<double> scores(n_ctx);
        for (size_t j = 0; j < n_ctx; ++j) {
            const double* kj = kcache.data() + j * d + h * head_dim;
            double acc = 0.0;
            for (int e = 0; e < head_dim; ++e) acc += qi[e] * kj[e];
            scores[j] = acc * inv_sqrt;
        }
        double mx = scores[0];
        for (size_t j = 1; j < n_ctx; ++j) mx = std::max(mx, scores[j]);
        double sum = 0.0;
        for (size_t j = 0; j < n_ctx; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            sum += scores[j];
        }
        double inv = 1.0 / sum;
        for (size_t j = 0; j < n_ctx; ++j) scores[j] *= inv;

        double* out = ctx.row(i) + h * head_dim;
        std::fill(out, out + head_dim, 0.0);
        for (size_t j = 0; j < n_ctx; ++j) {
            const double* vj = vcache.data() + j * d + h * head_dim;
            for (int e = 0; e < head_dim; ++e) out[e] += scores[j] * vj[e];
        }
        if (probs) {
            double* prow = (*probs)[h].row(i);
            std::copy(scores.begin(), scores.end(), prow);
        }
    }
}
}  // namespace

std::vector<StepLogits> Model::forward(std::span<const StepInput> inputs, KVCache* cache) const {
    KVCache scratch;
    if (!cache) {
        scratch.init(cfg_.layers, cfg_.model_dim);
        cache = &scratch;
    } else if (cache->layers == 0) {
        cache->init(cfg_.layers, cfg_.model_dim);
    }
    if (cache->layers != cfg_.layers || cache->dim != cfg_.model_dim)
        throw InvalidArgument("cache shape does not match the model");

    size_t c_old = cache->len;
    int s = static_cast<int>(inputs.size());
    if (c_old + s > static_cast<size_t>(cfg_.max_positions))
        throw CapacityError("sequence of " + std::to_string(c_old + s) +
                            " positions exceeds max_positions=" +
                            std::to_string(cfg_.max_positions));
    if (s == 0) return {};

    int d = cfg_.model_dim;
    int f = cfg_.ffn_dim();
    const double* p = params_.data();

    Mat x(s, d);
    for (int i = 0; i < s; ++i) {
        std::vector<double> e = embed_step(inputs[i], c_old + i);
        std::copy(e.begin(), e.end(), x.row(i));
    }

    Mat ln(s, d), q(s, d), kk(s, d), vv(s, d), ctx(s, d), proj(s, d), ffn_pre(s, f), ffn_act(s, f);
    std::vector<double> mean(s), rstd(s);
    for (int l = 0; l < cfg_.layers; ++l) {
        const LayerOffsets& off = layout_.layer[l];
        kernels::layer_norm(x.data(), p + off.ln1_g, p + off.ln1_b, ln.data(), mean.data(),
                            rstd.data(), s, d);
        kernels::matmul(ln.data(), p + off.wq, q.data(), s, d, d);
        kernels::add_bias_rows(q.data(), p + off.bq, s, d);
        kernels::matmul(ln.data(), p + off.wk, kk.data(), s, d, d);
        kernels::add_bias_rows(kk.data(), p + off.bk, s, d);
        kernels::matmul(ln.data(), p + off.wv, vv.data(), s, d, d);
        kernels::add_bias_rows(vv.data(), p + off.bv, s, d);

        cache->k[l].insert(cache->k[l].end(), kk.v.begin(), kk.v.end());
        cache->v[l].insert(cache->v[l].end(), vv.v.begin(), vv.v.end());

        attend(q, cache->k[l], cache->v[l], c_old, cfg_.heads, cfg_.head_dim(), ctx, nullptr);

        kernels::matmul(ctx.data(), p + off.wo, proj.data(), s, d, d);
        kernels::add_bias_rows(proj.data(), p + off.bo, s, d);
        for (size_t i = 0; i < x.size(); ++i) x.v[i] += proj.v[i];

        kernels::layer_norm(x.data(), p + off.ln2_g, p + off.ln2_b, ln.data(), mean.data(),
                            rstd.data(), s, d);
        kernels::matmul(ln.data(), p + off.w1, ffn_pre.data(), s, d, f);
        kernels::add_bias_rows(ffn_pre.data(), p + off.b1, s, f);
        kernels::gelu(ffn_pre.data(), ffn_act.data(), ffn_pre.size());
        kernels::matmul(ffn_act.data(), p + off.w2, proj.data(), s, f, d);
        kernels::add_bias_rows(proj.data(), p + off.b2, s, d);
        for (size_t i = 0; i < x.size(); ++i) x.v[i] += proj.v[i];
    }
    cache->len = c_old + s;

    Mat hidden(s, d);
    kernels::layer_norm(x.data(), p + layout_.lnf_g, p + layout_.lnf_b, hidden.data(),
                        mean.data(), rstd.data(), s, d);
    int vj = cfg_.vocab.joint_size();
    Mat joint(s, vj);
    kernels::matmul(hidden.data(), p + layout_.w_out, joint.data(), s, d, vj);
    kernels::add_bias_rows(joint.data(), p + layout_.b_out, s, vj);

    std::vector<StepLogits> out(s);
    for (int i = 0; i < s; ++i) {
        out[i].joint.assign(joint.row(i), joint.row(i) + vj);
        out[i].group = group_head(hidden.row(i), joint.row(i));
    }
    return out;
}

TrainTape Model::forward_train(std::span<const StepInput> inputs, int loss_start) const {
    int s = static_cast<int>(inputs.size());
    if (s == 0) throw InvalidArgument("empty input sequence");
    if (loss_start < 0 || loss_start >= s) throw InvalidArgument("loss_start out of range");
    if (s > cfg_.max_positions)
        throw CapacityError("sequence of " + std::to_string(s) + " positions exceeds max_positions");

    int d = cfg_.model_dim;
    int f = cfg_.ffn_dim();
    const double* p = params_.data();

    TrainTape tape;
    tape.seq_len = s;
    tape.loss_start = loss_start;
    tape.layers.resize(cfg_.layers);

    Mat x(s, d);
    for (int i = 0; i < s; ++i) {
        std::vector<double> e = embed_step(inputs[i], i);
        std::copy(e.begin(), e.end(), x.row(i));
    }

    for (int l = 0; l < cfg_.layers; ++l) {
        const LayerOffsets& off = layout_.layer[l];
        auto& lt = tape.layers[l];
        lt.x_in = x;
        lt.ln1_out = Mat(s, d);
        lt.ln1_mean.resize(s);
        lt.ln1_rstd.resize(s);
        kernels::layer_norm(x.data(), p + off.ln1_g, p + off.ln1_b, lt.ln1_out.data(),
                            lt.ln1_mean.data(), lt.ln1_rstd.data(), s, d);
        lt.q = Mat(s, d);
        lt.k = Mat(s, d);
        lt.v = Mat(s, d);
        kernels::matmul(lt.ln1_out.data(), p + off.wq, lt.q.data(), s, d, d);
        kernels::add_bias_rows(lt.q.data(), p + off.bq, s, d);
        kernels::matmul(lt.ln1_out.data(), p + off.wk, lt.k.data(), s, d, d);
        kernels::add_bias_rows(lt.k.data(), p + off.bk, s, d);
        kernels::matmul(lt.ln1_out.data(), p + off.wv, lt.v.data(), s, d, d);
        kernels::add_bias_rows(lt.v.data(), p + off.bv, s, d);

        lt.probs.assign(cfg_.heads, Mat(s, s));
        lt.ctx = Mat(s, d);
        attend(lt.q, lt.k.v, lt.v.v, 0, cfg_.heads, cfg_.head_dim(), lt.ctx, &lt.probs);

        Mat proj(s, d);
        kernels::matmul(lt.ctx.data(), p + off.wo, proj.data(), s, d, d);
        kernels::add_bias_rows(proj.data(), p + off.bo, s, d);
        for (size_t i = 0; i < x.size(); ++i) x.v[i] += proj.v[i];
        lt.x_mid = x;

        lt.ln2_out = Mat(s, d);
        lt.ln2_mean.resize(s);
        lt.ln2_rstd.resize(s);
        kernels::layer_norm(x.data(), p + off.ln2_g, p + off.ln2_b, lt.ln2_out.data(),
                            lt.ln2_mean.data(), lt.ln2_rstd.data(), s, d);
        lt.ffn_pre = Mat(s, f);
        kernels::matmul(lt.ln2_out.data(), p + off.w1, lt.ffn_pre.data(), s, d, f);
        kernels::add_bias_rows(lt.ffn_pre.data(), p + off.b1, s, f);
        lt.ffn_act = Mat(s, f);
        kernels::gelu(lt.ffn_pre.data(), lt.ffn_act.data(), lt.ffn_pre.size());
        kernels::matmul(lt.ffn_act.data(), p + off.w2, proj.data(), s, f, d);
        kernels::add_bias_rows(proj.data(), p + off.b2, s, d);
        for (size_t i = 0; i < x.size(); ++i) x.v[i] += proj.v[i];
    }
    tape.x_final = x;

    int sl = s - loss_start;
    tape.hidden = Mat(sl, d);
    tape.lnf_mean.resize(sl);
    tape.lnf_rstd.resize(sl);
    kernels::layer_norm(x.row(loss_start), p + layout_.lnf_g, p + layout_.lnf_b,
                        tape.hidden.data(), tape.lnf_mean.data(), tape.lnf_rstd.data(), sl, d);
    int vj = cfg_.vocab.joint_size();
    tape.joint_logits = Mat(sl, vj);
    kernels::matmul(tape.hidden.data(), p + layout_.w_out, tape.joint_logits.data(), sl, d, vj);
    kernels::add_bias_rows(tape.joint_logits.data(), p + layout_.b_out, sl, vj);
    return tape;
}

namespace {
// attention backward for one layer; parallel across heads (disjoint slices)
void attend_backward(const Mat& dctx, const TrainTape::LayerTape& lt, int heads, int head_dim,
                     Mat& dq, Mat& dk, Mat& dv) {
    int s = dctx.rows;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
#pragma omp parallel for schedule(static)
    for (int h = 0; h < heads; ++h) {
        const Mat& pm = lt.probs[h];
        std::vector<double> dpr(s);
        for (int i = 0; i < s; ++i) {
            const double* dci = dctx.row(i) + h * head_dim;
            const double* prow = pm.row(i);
            // raw prob grads over the causal range
            for (int j = 0; j <= i; ++j) {
                const double* vj = lt.v.row(j) + h * head_dim;
                double acc = 0.0;
                for (int e = 0; e < head_dim; ++e) acc += dci[e] * vj[e];
                dpr[j] = acc;
            }
            double rowdot = 0.0;
            for (int j = 0; j <= i; ++j) rowdot += prow[j] * dpr[j];
            double* dqi = dq.row(i) + h * head_dim;
            const double* qi = lt.q.row(i) + h * head_dim;
            for (int j = 0; j <= i; ++j) {
                double ds = prow[j] * (dpr[j] - rowdot) * inv_sqrt;
                const double* kj = lt.k.row(j) + h * head_dim;
                double* dkj = dk.row(j) + h * head_dim;
                double* dvj = dv.row(j) + h * head_dim;
                for (int e = 0; e < head_dim; ++e) {
                    dqi[e] += ds * kj[e];
                    dkj[e] += ds * qi[e];
                    dvj[e] += prow[j] * dci[e];
                }
            }
        }
    }
}
}  // namespace

void Model::backward_train(std::span<const StepInput> inputs, const TrainTape& tape,
                           const Mat& d_hidden, std::vector<double>& grads) const {
    int s = tape.seq_len;
    int d = cfg_.model_dim;
    int f = cfg_.ffn_dim();
    int sl = s - tape.loss_start;
    const double* p = params_.data();
    double* gp = grads.data();

    // final norm backward into the residual stream (rows before loss_start
    // receive gradient only through attention below)
    Mat dx(s, d);
    kernels::layer_norm_backward(d_hidden.data(), tape.x_final.row(tape.loss_start),
                                 p + layout_.lnf_g, tape.lnf_mean.data(), tape.lnf_rstd.data(),
                                 dx.row(tape.loss_start), gp + layout_.lnf_g, gp + layout_.lnf_b,
                                 sl, d);

    Mat dtmp(s, d), dln(s, d), dffn_act(s, f), dffn_pre(s, f), dctx(s, d);
    Mat dq(s, d), dk(s, d), dv(s, d);
    for (int l = cfg_.layers - 1; l >= 0; --l) {
        const LayerOffsets& off = layout_.layer[l];
        const auto& lt = tape.layers[l];

        // ffn branch; dx currently holds the block-output gradient
        kernels::matmul_at_acc(lt.ffn_act.data(), dx.data(), gp + off.w2, s, f, d);
        kernels::colsum_acc(dx.data(), gp + off.b2, s, d);
        kernels::matmul_bt(dx.data(), p + off.w2, dffn_act.data(), s, d, f);
        kernels::gelu_backward(dffn_act.data(), lt.ffn_pre.data(), dffn_pre.data(),
                               lt.ffn_pre.size());
        kernels::matmul_at_acc(lt.ln2_out.data(), dffn_pre.data(), gp + off.w1, s, d, f);
        kernels::colsum_acc(dffn_pre.data(), gp + off.b1, s, f);
        kernels::matmul_bt(dffn_pre.data(), p + off.w1, dln.data(), s, f, d);
        kernels::layer_norm_backward(dln.data(), lt.x_mid.data(), p + off.ln2_g,
                                     lt.ln2_mean.data(), lt.ln2_rstd.data(), dtmp.data(),
                                     gp + off.ln2_g, gp + off.ln2_b, s, d);
        for (size_t i = 0; i < dx.size(); ++i) dx.v[i] += dtmp.v[i];  // now grad on x_mid

        // attention branch
        kernels::matmul_at_acc(lt.ctx.data(), dx.data(), gp + off.wo, s, d, d);
        kernels::colsum_acc(dx.data(), gp + off.bo, s, d);
        kernels::matmul_bt(dx.data(), p + off.wo, dctx.data(), s, d, d);

        std::fill(dq.v.begin(), dq.v.end(), 0.0);
        std::fill(dk.v.begin(), dk.v.end(), 0.0);
        std::fill(dv.v.begin(), dv.v.end(), 0.0);
        attend_backward(dctx, lt, cfg_.heads, cfg_.head_dim(), dq, dk, dv);

        kernels::matmul_at_acc(lt.ln1_out.data(), dq.data(), gp + off.wq, s, d, d);
        kernels::colsum_acc(dq.data(), gp + off.bq, s, d);
        kernels::matmul_at_acc(lt.ln1_out.data(), dk.data(), gp + off.wk, s, d, d);
        kernels::colsum_acc(dk.data(), gp + off.bk, s, d);
        kernels::matmul_at_acc(lt.ln1_out.data(), dv.data(), gp + off.wv, s, d, d);
        kernels::colsum_acc(dv.data(), gp + off.bv, s, d);

        kernels::matmul_bt(dq.data(), p + off.wq, dln.data(), s, d, d);
        kernels::matmul_bt(dk.data(), p + off.wk, dtmp.data(), s, d, d);
        for (size_t i = 0; i < dln.size(); ++i) dln.v[i] += dtmp.v[i];
        kernels::matmul_bt(dv.data(), p + off.wv, dtmp.data(), s, d, d);
        for (size_t i = 0; i < dln.size(); ++i) dln.v[i] += dtmp.v[i];

        kernels::layer_norm_backward(dln.data(), lt.x_in.data(), p + off.ln1_g,
                                     lt.ln1_mean.data(), lt.ln1_rstd.data(), dtmp.data(),
                                     gp + off.ln1_g, gp + off.ln1_b, s, d);
        for (size_t i = 0; i < dx.size(); ++i) dx.v[i] += dtmp.v[i];  // grad on x_in
    }

    // embedding backward; serial on purpose (scatter-add determinism)
    double* dtok = gp + layout_.tok_emb;
    double* dpos = gp + layout_.pos_emb;
    for (int i = 0; i < s; ++i) {
        const double* row = dx.row(i);
        double* dp = dpos + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) dp[j] += row[j];
        if (const auto* t = std::get_if<PromptText>(&inputs[i])) {
            double* dt = dtok + static_cast<size_t>(t->token) * d;
            for (int j = 0; j < d; ++j) dt[j] += row[j];
        } else if (const auto* r = std::get_if<ResponseStep>(&inputs[i])) {
            double* dt = dtok + static_cast<size_t>(r->text_token) * d;
            for (int j = 0; j < d; ++j) dt[j] += row[j];
            double inv_g = 1.0 / cfg_.group_size;
            for (int id : r->audio_group) {
                double* da = dtok + static_cast<size_t>(id) * d;
                for (int j = 0; j < d; ++j) da[j] += inv_g * row[j];
            }
        }
        // speech features are produced by the fixed frontend; no parameter grad
    }
}

// ---- checkpoint io -----------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'S', 'L', 'M', 'C', 'K', 'P', 'T', '1'};

uint64_t fnv1a(const char* p, size_t n) {
    uint64_t h = 1469598103934665603ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(p[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
void put(std::string& buf, const T& v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::string& buf, size_t& pos) {
    if (pos + sizeof(T) > buf.size()) throw CorruptFile("checkpoint truncated");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}
}  // namespace

void Model::save_checkpoint(const std::string& path, uint64_t step,
                            const std::string& extra_config_json) const {
    std::string buf;
    buf.append(kCkptMagic, 8);
    put<uint32_t>(buf, 1);  // version
    std::string cfg_json = cfg_.to_json_string();
    put<uint32_t>(buf, static_cast<uint32_t>(cfg_json.size()));
    buf.append(cfg_json);
    put<uint32_t>(buf, static_cast<uint32_t>(extra_config_json.size()));
    buf.append(extra_config_json);
    put<uint64_t>(buf, step);
    put<uint32_t>(buf, static_cast<uint32_t>(layout_.tensors.size()));
    for (const TensorSpec& t : layout_.tensors) {
        put<uint16_t>(buf, static_cast<uint16_t>(t.name.size()));
        buf.append(t.name);
        put<uint32_t>(buf, static_cast<uint32_t>(t.rows));
        put<uint32_t>(buf, static_cast<uint32_t>(t.cols));
        buf.append(reinterpret_cast<const char*>(params_.data() + t.offset),
                   t.count() * sizeof(double));
    }
    uint64_t checksum = fnv1a(buf.data(), buf.size());
    put<uint64_t>(buf, checksum);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorruptFile("cannot open for write: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CorruptFile("short write: " + path);
}

Model::LoadedCheckpoint Model::read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFile("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 + 8 || std::memcmp(buf.data(), kCkptMagic, 8) != 0)
        throw CorruptFile("bad checkpoint magic: " + path);
    uint64_t stored_sum;
    std::memcpy(&stored_sum, buf.data() + buf.size() - 8, 8);
    if (fnv1a(buf.data(), buf.size() - 8) != stored_sum)
        throw CorruptFile("checkpoint checksum mismatch (truncated or corrupt): " + path);

    size_t pos = 8;
    uint32_t version = get<uint32_t>(buf, pos);
    if (version != 1) throw CorruptFile("unsupported checkpoint version");
    uint32_t cfg_len = get<uint32_t>(buf, pos);
    if (pos + cfg_len > buf.size()) throw CorruptFile("checkpoint truncated");
    std::string cfg_json = buf.substr(pos, cfg_len);
    pos += cfg_len;
    uint32_t extra_len = get<uint32_t>(buf, pos);
    if (pos + extra_len > buf.size()) throw CorruptFile("checkpoint truncated");

    LoadedCheckpoint out;
    out.extra_config_json = buf.substr(pos, extra_len);
    pos += extra_len;
    out.config = ModelConfig::from_json_string(cfg_json);
    out.step = get<uint64_t>(buf, pos);

    ParamLayout lay = ParamLayout::build(out.config);
    out.params.assign(lay.total, 0.0);
    uint32_t n_tensors = get<uint32_t>(buf, pos);
    if (n_tensors != lay.tensors.size()) throw CorruptFile("checkpoint tensor count mismatch");
    for (const TensorSpec& t : lay.tensors) {
        uint16_t name_len = get<uint16_t>(buf, pos);
        if (pos + name_len > buf.size()) throw CorruptFile("checkpoint truncated");
        std::string name = buf.substr(pos, name_len);
        pos += name_len;
        uint32_t rows = get<uint32_t>(buf, pos);
        uint32_t cols = get<uint32_t>(buf, pos);
        if (name != t.name || rows != static_cast<uint32_t>(t.rows) ||
            cols != static_cast<uint32_t>(t.cols))
            throw CorruptFile("checkpoint tensor " + name + " does not match the stored config");
        size_t bytes = t.count() * sizeof(double);
        if (pos + bytes > buf.size()) throw CorruptFile("checkpoint truncated");
        std::memcpy(out.params.data() + t.offset, buf.data() + pos, bytes);
        pos += bytes;
    }
    return out;
}

Model Model::load_checkpoint(const std::string& path, uint64_t* step_out,
                             std::string* extra_json_out) {
    LoadedCheckpoint ck = read_checkpoint(path);
    if (step_out) *step_out = ck.step;
    if (extra_json_out) *extra_json_out = ck.extra_config_json;
    Model m(ck.config);
    m.params_ = std::move(ck.params);
    return m;
}

Model Model::load_checkpoint_expect(const std::string& path, const ModelConfig& expected) {
    LoadedCheckpoint ck = read_checkpoint(path);
    if (!(ck.config == expected))
        throw ConfigError("checkpoint architecture does not match the requested config");
    Model m(ck.config);
    m.params_ = std::move(ck.params);
    return m;
}

}  // namespace speechlm
