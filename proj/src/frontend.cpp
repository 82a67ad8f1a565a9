#include "speechlm/frontend.hpp"

#include <cstring>
#include <fstream>

#include "speechlm/errors.hpp"
#include "speechlm/kernels.hpp"
#include "speechlm/rng.hpp"

namespace speechlm {

StackedFeatures stack_frames(const FeatureSequence& features, int k) {
    if (k < 1) throw InvalidArgument("stack factor must be >= 1");
    int n = features.frames.rows;
    int d = features.frames.cols;
    if (n < k) throw InvalidArgument("need at least k frames to stack");

    StackedFeatures out;
    out.stack = k;
    int n_out = n / k;
    out.frames = Mat(n_out, k * d);
    for (int i = 0; i < n_out; ++i) {
        double* dst = out.frames.row(i);
        for (int j = 0; j < k; ++j)
            std::memcpy(dst + static_cast<size_t>(j) * d, features.frames.row(i * k + j),
                        sizeof(double) * d);
    }
    return out;
}

Projector Projector::seeded(int in_dim, int out_dim, uint64_t seed) {
    Projector p;
    p.in_dim = in_dim;
    p.out_dim = out_dim;
    p.weight = Mat(in_dim, out_dim);
    p.bias.assign(out_dim, 0.0);
    Rng rng(mix64(seed ^ 0x70726f6aULL));  // "proj"
    double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (auto& w : p.weight.v) w = rng.normal() * scale;
    return p;
}

Mat project(const StackedFeatures& stacked, const Projector& proj) {
    if (stacked.frames.cols != proj.in_dim)
        throw InvalidArgument("projector input width mismatch: " +
                              std::to_string(stacked.frames.cols) + " vs " +
                              std::to_string(proj.in_dim));
    Mat out(stacked.frames.rows, proj.out_dim);
    kernels::matmul(stacked.frames.data(), proj.weight.data(), out.data(),
                    stacked.frames.rows, proj.in_dim, proj.out_dim);
    kernels::add_bias_rows(out.data(), proj.bias.data(), out.rows, out.cols);
    return out;
}

FeatureSequence synth_features(const std::vector<int>& audio_tokens,
                               const JointVocabulary& vocab, const FrontendConfig& cfg) {
    if (static_cast<int>(audio_tokens.size()) > cfg.pad_to_tokens)
        throw CapacityError("utterance longer than the configured pad length");
    FeatureSequence out;
    out.rate_hz = cfg.rate_hz;
    out.frames = Mat(cfg.pad_to_tokens, cfg.feature_dim);
    for (size_t i = 0; i < audio_tokens.size(); ++i) {
        int tok = audio_tokens[i];
        if (!vocab.is_audio(tok))
            throw InvalidArgument("synth_features: id " + std::to_string(tok) +
                                  " is not an audio token");
        Rng rng(mix64(cfg.seed * 0x9e3779b97f4a7c15ULL + static_cast<uint64_t>(tok)));
        double* row = out.frames.row(static_cast<int>(i));
        for (int j = 0; j < cfg.feature_dim; ++j) row[j] = rng.normal();
    }
    return out;
}

namespace {
constexpr char kFeatMagic[8] = {'S', 'L', 'M', 'F', 'E', 'A', 'T', '1'};
}

void save_features(const std::string& path, const FeatureSequence& features) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorruptFile("cannot open for write: " + path);
    out.write(kFeatMagic, 8);
    uint32_t version = 1;
    uint32_t n = static_cast<uint32_t>(features.frames.rows);
    uint32_t d = static_cast<uint32_t>(features.frames.cols);
    uint32_t rate = static_cast<uint32_t>(features.rate_hz);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&n), 4);
    out.write(reinterpret_cast<const char*>(&d), 4);
    out.write(reinterpret_cast<const char*>(&rate), 4);
    out.write(reinterpret_cast<const char*>(features.frames.data()),
              static_cast<std::streamsize>(features.frames.size() * sizeof(double)));
}

FeatureSequence load_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptFile("cannot open: " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kFeatMagic, 8) != 0)
        throw CorruptFile("bad feature file magic: " + path);
    uint32_t version = 0, n = 0, d = 0, rate = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&n), 4);
    in.read(reinterpret_cast<char*>(&d), 4);
    in.read(reinterpret_cast<char*>(&rate), 4);
    if (!in || version != 1) throw CorruptFile("bad feature file header: " + path);
    FeatureSequence out;
    out.rate_hz = static_cast<int>(rate);
    out.frames = Mat(static_cast<int>(n), static_cast<int>(d));
    in.read(reinterpret_cast<char*>(out.frames.data()),
            static_cast<std::streamsize>(out.frames.size() * sizeof(double)));
    if (!in) throw CorruptFile("truncated feature file: " + path);
    return out;
}

SpeechFrontend::SpeechFrontend(const JointVocabulary& vocab, const FrontendConfig& cfg,
                               int model_dim)
    : vocab_(vocab), cfg_(cfg),
      proj_(Projector::seeded(cfg.feature_dim * cfg.stack, model_dim, cfg.seed)) {
    if (cfg_.pad_to_tokens < cfg_.stack)
        throw InvalidArgument("pad_to_tokens must be >= stack factor");
}

Mat SpeechFrontend::encode(const std::vector<int>& audio_tokens) const {
    FeatureSequence feats = synth_features(audio_tokens, vocab_, cfg_);
    StackedFeatures stacked = stack_frames(feats, cfg_.stack);
    return project(stacked, proj_);
}

}  // namespace speechlm
