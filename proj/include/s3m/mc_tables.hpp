#pragma once

namespace s3m::geom {

extern const int kMcEdgeCorners[12][2];
extern const int kMcTriTable[256][16];

}  // namespace s3m::geom
