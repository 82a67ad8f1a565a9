#pragma once

#include <vector>

#include "speechlm/vocab.hpp"

namespace speechlm {

// Audio-token sequence regrouped into fixed-size groups of group_size ids.
// The tail is padded with audio_pad; original_length remembers the
// pre-padding token count so nothing is lost on the way back.
struct GroupedAudio {
    std::vector<std::vector<int>> groups;
    int group_size = 1;
    size_t original_length = 0;
};

// [s0, s1, ...] -> [[s0..s_{G-1}], [s_G..], ...], tail padded with audio_pad.
// Group count is ceil(T / G); for T divisible by G that is exactly T / G.
GroupedAudio group_tokens(const std::vector<int>& tokens, int group_size,
                          const JointVocabulary& vocab);

// Concatenates groups and truncates to original_length (drops tail padding).
std::vector<int> ungroup_tokens(const GroupedAudio& grouped);

}  // namespace speechlm
