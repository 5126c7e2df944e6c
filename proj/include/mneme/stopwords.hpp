#pragma once

#include <set>
#include <string>

namespace mneme {

// Fixed stopword list used by subset matching: articles, pronouns,
// prepositions, conjunctions, auxiliaries. Lowercase surfaces.
inline const std::set<std::string>& stopwords() {
  static const std::set<std::string> words = {
      "a",    "an",    "the",   "and",  "or",    "but",   "if",    "then",
      "than", "that",  "this",  "these", "those", "he",    "she",   "it",
      "they", "them",  "him",   "her",  "his",   "hers",  "its",   "their",
      "we",   "us",    "our",   "you",  "your",  "i",     "me",    "my",
      "of",   "in",    "on",    "at",   "by",    "for",   "with",  "from",
      "to",   "into",  "onto",  "over", "under", "near",  "was",   "is",
      "are",  "were",  "be",    "been", "being", "as",    "so",    "too",
      "not",  "no"};
  return words;
}

inline std::string lowercase(const std::string& s) {
  std::string r = s;
  for (char& c : r)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return r;
}

}  // namespace mneme
