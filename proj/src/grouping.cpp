#include "speechlm/grouping.hpp"

#include "speechlm/errors.hpp"

namespace speechlm {

GroupedAudio group_tokens(const std::vector<int>& tokens, int group_size,
                          const JointVocabulary& vocab) {
    if (group_size < 1) throw InvalidArgument("group_size must be >= 1");
    if (tokens.empty()) throw InvalidArgument("cannot group an empty token sequence");

    GroupedAudio out;
    out.group_size = group_size;
    out.original_length = tokens.size();
    size_t n_groups = (tokens.size() + group_size - 1) / group_size;
    out.groups.resize(n_groups);
    for (size_t g = 0; g < n_groups; ++g) {
        auto& grp = out.groups[g];
        grp.resize(group_size, vocab.specials().audio_pad);
        for (int j = 0; j < group_size; ++j) {
            size_t src = g * group_size + j;
            if (src < tokens.size()) grp[j] = tokens[src];
        }
    }
    return out;
}

std::vector<int> ungroup_tokens(const GroupedAudio& grouped) {
    for (const auto& g : grouped.groups)
        if (static_cast<int>(g.size()) != grouped.group_size)
            throw MalformedInput("group size mismatch inside GroupedAudio");
    size_t capacity = grouped.groups.size() * grouped.group_size;
    if (grouped.original_length > capacity)
        throw MalformedInput("original_length exceeds grouped capacity");

    std::vector<int> out;
    out.reserve(grouped.original_length);
    for (const auto& g : grouped.groups)
        for (int id : g) {
            if (out.size() == grouped.original_length) return out;
            out.push_back(id);
        }
    return out;
}

}  // namespace speechlm
