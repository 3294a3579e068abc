#pragma once

#include <vector>

namespace fflab {

/// A dot annotation in image pixel coordinates. Pixel (col, row) covers
/// [col, col + 1) x [row, row + 1).
struct Point {
  double x = 0.0;
  double y = 0.0;
};

using PointSet = std::vector<Point>;

}  // namespace fflab
