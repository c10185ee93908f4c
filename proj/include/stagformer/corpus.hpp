#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace stagformer {

// Deterministic English-like prose of exactly `bytes` bytes: a small
// grammar over a Zipf-weighted lexicon, grouped into paragraphs.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

}  // namespace stagformer
