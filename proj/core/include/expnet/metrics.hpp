#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace expnet {

/// A caption as a list of words.
using Caption = std::vector<std::string>;

inline constexpr int kMaxNGram = 4;
inline constexpr double kCiderSigma = 6.0;

/// n-gram -> count, one map per n = 1..4. Keys are the words joined by a
/// single space.
using NGramCounts = std::array<std::map<std::string, int>, kMaxNGram>;

NGramCounts count_ngrams(const Caption& words, int max_n = kMaxNGram);

/// Document frequencies over a reference corpus (one entry per image, an
/// n-gram counted once per image no matter how many refs contain it).
struct NGramStats {
  std::map<std::string, int> document_frequency;
  std::size_t corpus_size = 0;

  /// log(corpus_size / max(1, df(gram))).
  double idf(const std::string& gram) const;
};

/// `corpus[i]` is the reference set of image i. Empty corpus is a ContractError.
NGramStats build_idf(const std::vector<std::vector<Caption>>& corpus);

/// CIDEr-D in [0, 10]: mean over n = 1..4 of the reference-averaged, length
/// penalized (sigma = 6), clipped tf-idf cosine, times 10. Empty candidate
/// scores 0.
double cider_d(const Caption& candidate, const std::vector<Caption>& refs, const NGramStats& stats);

/// Sentence BLEU-n: clipped n-gram precisions combined by geometric mean,
/// closest-reference brevity penalty, no smoothing.
double bleu_n(const Caption& candidate, const std::vector<Caption>& refs, int n);

/// Corpus BLEU-n with counts pooled over all candidates.
double corpus_bleu(const std::vector<Caption>& candidates, const std::vector<std::vector<Caption>>& refs, int n);

/// Whitespace split.
Caption split_words(std::string_view text);
std::string join_words(const Caption& words);

}  // namespace expnet
