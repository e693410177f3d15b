#include "expnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>
#include <sstream>

#include "expnet/errors.hpp"

namespace expnet {

NGramCounts count_ngrams(const Caption& words, int max_n) {
  NGramCounts counts;
  const int limit = std::min(max_n, kMaxNGram);
  for (int n = 1; n <= limit; ++n) {
    if (words.size() < static_cast<std::size_t>(n)) break;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= words.size(); ++i) {
      std::string gram = words[i];
      for (int k = 1; k < n; ++k) gram += ' ' + words[i + static_cast<std::size_t>(k)];
      ++counts[static_cast<std::size_t>(n - 1)][gram];
    }
  }
  return counts;
}

double NGramStats::idf(const std::string& gram) const {
  auto it = document_frequency.find(gram);
  const double df = it == document_frequency.end() ? 0.0 : static_cast<double>(it->second);
  return std::log(static_cast<double>(corpus_size)) - std::log(std::max(1.0, df));
}

NGramStats build_idf(const std::vector<std::vector<Caption>>& corpus) {
  if (corpus.empty()) throw ContractError("build_idf needs a non-empty reference corpus");
  NGramStats stats;
  stats.corpus_size = corpus.size();
  for (const auto& refs : corpus) {
    std::set<std::string> seen;
    for (const auto& ref : refs) {
      for (const auto& per_n : count_ngrams(ref)) {
        for (const auto& [gram, count] : per_n) seen.insert(gram);
      }
    }
    for (const auto& gram : seen) ++stats.document_frequency[gram];
  }
  return stats;
}

namespace {

struct TfIdfVector {
  std::array<std::map<std::string, double>, kMaxNGram> weight;
  std::array<double, kMaxNGram> norm{};
  double length = 0.0;
};

TfIdfVector tfidf(const Caption& words, const NGramStats& stats) {
  TfIdfVector v;
  const auto counts = count_ngrams(words);
  for (int n = 0; n < kMaxNGram; ++n) {
    double sq = 0.0;
    for (const auto& [gram, tf] : counts[static_cast<std::size_t>(n)]) {
      const double w = static_cast<double>(tf) * stats.idf(gram);
      v.weight[static_cast<std::size_t>(n)][gram] = w;
      sq += w * w;
    }
    v.norm[static_cast<std::size_t>(n)] = std::sqrt(sq);
  }
  v.length = static_cast<double>(words.size());
  return v;
}

std::array<double, kMaxNGram> similarity(const TfIdfVector& cand, const TfIdfVector& ref) {
  std::array<double, kMaxNGram> val{};
  const double delta = cand.length - ref.length;
  const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
  for (std::size_t n = 0; n < kMaxNGram; ++n) {
    for (const auto& [gram, w] : cand.weight[n]) {
      auto it = ref.weight[n].find(gram);
      if (it == ref.weight[n].end()) continue;
      val[n] += std::min(w, it->second) * it->second;
    }
    if (cand.norm[n] != 0.0 && ref.norm[n] != 0.0) val[n] /= cand.norm[n] * ref.norm[n];
    val[n] *= penalty;
  }
  return val;
}

// Largest count of `gram` in any single reference.
int max_ref_count(const std::vector<NGramCounts>& ref_counts, std::size_t n, const std::string& gram) {
  int best = 0;
  for (const auto& rc : ref_counts) {
    auto it = rc[n].find(gram);
    if (it != rc[n].end()) best = std::max(best, it->second);
  }
  return best;
}

std::size_t closest_ref_length(std::size_t cand_len, const std::vector<Caption>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = [&](std::size_t len) { return len > cand_len ? len - cand_len : cand_len - len; };
    if (d(r.size()) < d(best) || (d(r.size()) == d(best) && r.size() < best)) best = r.size();
  }
  return best;
}

struct BleuCounts {
  std::vector<double> matched, total;
  double cand_len = 0.0, ref_len = 0.0;
};

void accumulate_bleu(const Caption& candidate, const std::vector<Caption>& refs, int n, BleuCounts& acc) {
  std::vector<NGramCounts> ref_counts;
  for (const auto& r : refs) ref_counts.push_back(count_ngrams(r, n));
  const auto cand = count_ngrams(candidate, n);
  for (int k = 0; k < n; ++k) {
    for (const auto& [gram, c] : cand[static_cast<std::size_t>(k)]) {
      acc.matched[static_cast<std::size_t>(k)] +=
          std::min(c, max_ref_count(ref_counts, static_cast<std::size_t>(k), gram));
      acc.total[static_cast<std::size_t>(k)] += c;
    }
  }
  acc.cand_len += static_cast<double>(candidate.size());
  acc.ref_len += static_cast<double>(closest_ref_length(candidate.size(), refs));
}

double finish_bleu(const BleuCounts& acc, int n) {
  if (acc.cand_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    if (acc.total[i] == 0.0 || acc.matched[i] == 0.0) return 0.0;
    log_sum += std::log(acc.matched[i] / acc.total[i]);
  }
  const double bp = acc.cand_len > acc.ref_len ? 1.0 : std::exp(1.0 - acc.ref_len / acc.cand_len);
  return bp * std::exp(log_sum / n);
}

void check_bleu_args(int n) {
  if (n < 1 || n > kMaxNGram) throw ConfigError("BLEU order must be in 1..4");
}

}  // namespace

double cider_d(const Caption& candidate, const std::vector<Caption>& refs, const NGramStats& stats) {
  if (candidate.empty() || refs.empty()) return 0.0;
  const auto cand = tfidf(candidate, stats);
  std::array<double, kMaxNGram> total{};
  for (const auto& ref : refs) {
    const auto sim = similarity(cand, tfidf(ref, stats));
    for (std::size_t n = 0; n < kMaxNGram; ++n) total[n] += sim[n];
  }
  double mean = 0.0;
  for (double v : total) mean += v;
  mean /= kMaxNGram;
  return mean / static_cast<double>(refs.size()) * 10.0;
}

double bleu_n(const Caption& candidate, const std::vector<Caption>& refs, int n) {
  check_bleu_args(n);
  if (refs.empty()) return 0.0;
  BleuCounts acc{std::vector<double>(static_cast<std::size_t>(n)), std::vector<double>(static_cast<std::size_t>(n))};
  accumulate_bleu(candidate, refs, n, acc);
  return finish_bleu(acc, n);
}

double corpus_bleu(const std::vector<Caption>& candidates, const std::vector<std::vector<Caption>>& refs, int n) {
  check_bleu_args(n);
  if (candidates.size() != refs.size()) throw DimensionError("corpus_bleu: candidate/reference count mismatch");
  BleuCounts acc{std::vector<double>(static_cast<std::size_t>(n)), std::vector<double>(static_cast<std::size_t>(n))};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!refs[i].empty()) accumulate_bleu(candidates[i], refs[i], n, acc);
  }
  return finish_bleu(acc, n);
}

Caption split_words(std::string_view text) {
  Caption out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::string join_words(const Caption& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

}  // namespace expnet
