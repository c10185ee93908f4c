#include "stagformer/corpus.hpp"

#include <array>
#include <cctype>
#include <random>
#include <string_view>
#include <vector>

namespace stagformer {

namespace {

constexpr std::array<std::string_view, 12> kDeterminers = {"the", "a", "every", "this", "that", "one",
                                                          "some", "no", "each", "another", "our", "their"};
constexpr std::array<std::string_view, 40> kNouns = {
    "river",  "city",    "engine",  "garden", "teacher", "window", "market", "signal", "letter",  "forest",
    "doctor", "machine", "harbor",  "story",  "winter",  "bridge", "farmer", "lamp",   "village", "student",
    "road",   "island",  "soldier", "song",   "kitchen", "train",  "mirror", "storm",  "painter", "library",
    "horse",  "valley",  "captain", "clock",  "morning", "friend", "tower",  "field",  "wire",    "house"};
constexpr std::array<std::string_view, 30> kVerbs = {
    "watched", "carried", "built",   "found",   "followed", "opened",  "crossed", "remembered", "painted", "heard",
    "moved",   "lifted",  "visited", "changed", "measured", "counted", "closed",  "answered",   "kept",    "left",
    "reached", "pulled",  "saved",   "showed",  "studied",  "turned",  "wrote",   "drew",       "met",     "named"};
constexpr std::array<std::string_view, 24> kAdjectives = {
    "old",   "quiet", "bright", "small", "heavy", "distant", "green",  "broken", "careful", "warm", "narrow", "silver",
    "early", "empty", "strong", "young", "cold",  "gentle",  "famous", "bitter", "simple",  "dark", "long",   "clear"};
constexpr std::array<std::string_view, 12> kPrepositions = {"near",   "under", "over", "behind", "across", "beside",
                                                           "toward", "past",  "into", "through", "along",  "around"};
constexpr std::array<std::string_view, 10> kAdverbs = {"slowly", "again",  "quickly", "never",  "often",
                                                      "still",  "nearly", "always",  "softly", "later"};
constexpr std::array<std::string_view, 8> kConnectives = {"and", "but", "because", "while",
                                                         "so",  "when", "although", "until"};

class Writer {
 public:
  explicit Writer(std::uint64_t seed) : rng_(seed) {}

  template <std::size_t N>
  std::string_view pick(const std::array<std::string_view, N>& words) {
    // Zipf-like: weight 1 / (rank + 1).
    static const std::vector<double> weights = [] {
      std::vector<double> w(N);
      for (std::size_t i = 0; i < N; ++i) w[i] = 1.0 / static_cast<double>(i + 1);
      return w;
    }();
    std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
    return words[dist(rng_)];
  }

  bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }

  void noun_phrase(std::string& out) {
    out += pick(kDeterminers);
    out += ' ';
    if (chance(0.45)) {
      out += pick(kAdjectives);
      out += ' ';
    }
    out += pick(kNouns);
  }

  void clause(std::string& out) {
    noun_phrase(out);
    out += ' ';
    if (chance(0.2)) {
      out += pick(kAdverbs);
      out += ' ';
    }
    out += pick(kVerbs);
    out += ' ';
    noun_phrase(out);
    if (chance(0.5)) {
      out += ' ';
      out += pick(kPrepositions);
      out += ' ';
      noun_phrase(out);
    }
  }

  std::string sentence() {
    std::string s;
    clause(s);
    while (chance(0.35)) {
      s += chance(0.5) ? ", " : " ";
      s += pick(kConnectives);
      s += ' ';
      clause(s);
    }
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    s += chance(0.1) ? "?" : ".";
    return s;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  Writer writer(seed);
  std::string text;
  text.reserve(bytes + 256);
  std::size_t in_paragraph = 0;
  while (text.size() < bytes) {
    if (in_paragraph > 0) text += ' ';
    text += writer.sentence();
    if (++in_paragraph >= 4 && writer.chance(0.3)) {
      text += "\n\n";
      in_paragraph = 0;
    }
  }
  text.resize(bytes);
  return text;
}

}  // namespace stagformer
