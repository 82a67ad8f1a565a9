#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "speechlm/mat.hpp"
#include "speechlm/vocab.hpp"

namespace speechlm {

// 50 Hz feature stream extracted from user speech. At desk scale a
// deterministic per-token synthesizer stands in for a real encoder; the
// interface is what a real adapter would expose.
struct FeatureSequence {
    Mat frames;       // [N, d]
    int rate_hz = 50;

    // padded duration; N = rate_hz * seconds by construction
    double seconds() const { return static_cast<double>(frames.rows) / rate_hz; }
};

struct StackedFeatures {
    Mat frames;  // [N', k*d], row i = concat of k consecutive input rows
    int stack = 1;
};

// Concatenates every k consecutive frames along the feature dim.
// N' = N // k; trailing remainder frames are dropped.
StackedFeatures stack_frames(const FeatureSequence& features, int k);

// Fixed linear projector to the model embedding width.
struct Projector {
    int in_dim = 0;
    int out_dim = 0;
    Mat weight;               // [in_dim, out_dim]
    std::vector<double> bias; // [out_dim]

    static Projector seeded(int in_dim, int out_dim, uint64_t seed);
};

// row-wise affine map; output [N', out_dim]
Mat project(const StackedFeatures& stacked, const Projector& proj);

struct FrontendConfig {
    int feature_dim = 16;    // d
    int stack = 5;           // k
    int pad_to_tokens = 90;  // every utterance zero-padded to this many frames
    int rate_hz = 50;
    uint64_t seed = 42;
};

// One frame per audio token (deterministic per-token pattern), zero-padded to
// pad_to_tokens frames.
FeatureSequence synth_features(const std::vector<int>& audio_tokens,
                               const JointVocabulary& vocab, const FrontendConfig& cfg);

// Flat binary feature file: magic, version, N, d, rate, then row-major
// little-endian 64-bit floats.
void save_features(const std::string& path, const FeatureSequence& features);
FeatureSequence load_features(const std::string& path);

// Whole input pathway bundled: synth -> stack -> project. The projector is a
// fixed seeded transform; swapping in a real trained encoder adapter only
// replaces this class.
class SpeechFrontend {
  public:
    SpeechFrontend(const JointVocabulary& vocab, const FrontendConfig& cfg, int model_dim);

    const FrontendConfig& config() const { return cfg_; }
    int model_dim() const { return proj_.out_dim; }
    int frames_per_input() const { return cfg_.pad_to_tokens / cfg_.stack; }

    // [pad_to_tokens // k, model_dim] embedding rows for one utterance
    Mat encode(const std::vector<int>& audio_tokens) const;

  private:
    JointVocabulary vocab_;
    FrontendConfig cfg_;
    Projector proj_;
};

}  // namespace speechlm
