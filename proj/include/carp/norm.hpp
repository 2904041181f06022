#pragma once

#include <vector>

#include "carp/tensor.hpp"

namespace carp {

/// Per-dimension min/max normalization to [-1,1]. Constant dimensions map
/// to 0 and back to their constant.
struct NormStats {
    std::vector<float> min, max;

    static NormStats fit(const std::vector<std::vector<float>>& rows, int dims) {
        NormStats s;
        s.min.assign(dims, 0.0f);
        s.max.assign(dims, 0.0f);
        bool first = true;
        for (const auto& r : rows) {
            for (int d = 0; d < dims; ++d) {
                if (first) {
                    s.min[d] = s.max[d] = r[d];
                } else {
                    s.min[d] = std::min(s.min[d], r[d]);
                    s.max[d] = std::max(s.max[d], r[d]);
                }
            }
            first = false;
        }
        return s;
    }

    int dims() const { return static_cast<int>(min.size()); }

    float normalize(float x, int d) const {
        float range = max[d] - min[d];
        if (range <= 0.0f) return 0.0f;
        return 2.0f * (x - min[d]) / range - 1.0f;
    }

    float denormalize(float y, int d) const {
        float range = max[d] - min[d];
        if (range <= 0.0f) return min[d];
        return min[d] + (y + 1.0f) * 0.5f * range;
    }
};

}  // namespace carp
