#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "glg/errors.hpp"

namespace glg {

// Dense row-major matrix of doubles. Deliberately minimal: the library only
// needs element access and a few reductions; anything heavier lives in the
// test oracles.
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool same_shape(const Grid& other) const {
    return rows == other.rows && cols == other.cols;
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline double frobenius_sq(const Grid& g) {
  double s = 0.0;
  for (double v : g.data) s += v * v;
  return s;
}

// Grayscale image: square pixel grid plus the value range the pixels are
// declared to live in (unit interval for 8-bit images mapped by value/255).
struct ImageGrid {
  Grid values;
  std::pair<double, double> declared_range{0.0, 1.0};

  ImageGrid() = default;
  explicit ImageGrid(Grid g, std::pair<double, double> range = {0.0, 1.0})
      : values(std::move(g)), declared_range(range) {}
  ImageGrid(std::size_t side, double fill = 0.0) : values(side, side, fill) {}

  std::size_t width() const { return values.cols; }
  std::size_t height() const { return values.rows; }

  // Copy with pixel values clamped into the declared range.  Used for display
  // output and for range-referenced scoring; never applied implicitly.
  ImageGrid clipped_to_range() const {
    ImageGrid out = *this;
    for (double& v : out.values.data) {
      if (v < declared_range.first) v = declared_range.first;
      if (v > declared_range.second) v = declared_range.second;
    }
    return out;
  }
};

inline void require_square(const ImageGrid& image, const char* what) {
  if (image.width() != image.height() || image.width() == 0)
    throw dimension_error(std::string(what) + ": image must be square and non-empty");
  if (!image.values.all_finite())
    throw dimension_error(std::string(what) + ": image contains non-finite values");
}

}  // namespace glg
