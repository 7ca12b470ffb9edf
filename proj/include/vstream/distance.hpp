#pragma once

#include <cmath>
#include <cstddef>
#include <span>

namespace vstream {

// Squared Euclidean distance accumulated in double, in index order. The
// summation order is fixed so that d(a, b) and d(b, a) are bit-identical and
// cached values agree with fresh ones.
template <typename A, typename B>
double squared_distance(std::span<const A> a, std::span<const B> b) {
  double acc = 0.0;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

// Cosine similarity; 0 when either vector has zero norm.
template <typename A, typename B>
double cosine_similarity(std::span<const A> a, std::span<const B> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    double x = static_cast<double>(a[i]);
    double y = static_cast<double>(b[i]);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace vstream
