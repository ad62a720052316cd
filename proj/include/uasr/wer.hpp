// Word error rate: minimum-edit-distance alignment over words with unit
// costs, counts recovered by a backtrace that prefers substitution over
// deletion over insertion among minimal alignments.
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "uasr/errors.hpp"

namespace uasr {

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct WerCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  double wer = 0.0;

  std::size_t edits() const { return substitutions + deletions + insertions; }
};

inline WerCounts wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  std::size_t r = ref.size(), h = hyp.size();
  std::vector<std::vector<std::size_t>> d(r + 1, std::vector<std::size_t>(h + 1, 0));
  for (std::size_t i = 0; i <= r; ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= h; ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= r; ++i) {
    for (std::size_t j = 1; j <= h; ++j) {
      std::size_t sub = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      std::size_t del = d[i - 1][j] + 1;
      std::size_t ins = d[i][j - 1] + 1;
      d[i][j] = std::min({sub, del, ins});
    }
  }
  WerCounts out;
  std::size_t i = r, j = h;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && ref[i - 1] == hyp[j - 1] && d[i][j] == d[i - 1][j - 1]) {
      --i;
      --j;
    } else if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1) {
      ++out.substitutions;
      --i;
      --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      ++out.deletions;
      --i;
    } else {
      ++out.insertions;
      --j;
    }
  }
  out.wer = static_cast<double>(out.edits()) / static_cast<double>(std::max<std::size_t>(1, r));
  return out;
}

inline WerCounts wer(const std::string& ref_text, const std::string& hyp_text) {
  return wer(split_words(ref_text), split_words(hyp_text));
}

}  // namespace uasr
