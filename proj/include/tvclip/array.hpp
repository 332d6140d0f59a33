#pragma once

// Dense row-major multi-dimensional arrays. Everything that flows through
// the gradient tape, the parameter store, or the checkpoint files is one
// of these. Real is float (training) or double (gradient certification).

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tvclip {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative extent in shape");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename Real>
struct Array {
    Shape shape;
    std::vector<Real> data;

    Array() = default;
    explicit Array(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), Real(0)) {}
    Array(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape))
            throw std::invalid_argument("array data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    int rows() const { return shape.size() == 2 ? shape[0] : throw_rank2(); }
    int cols() const { return shape.size() == 2 ? shape[1] : throw_rank2(); }

    Real& operator()(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    Real operator()(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    bool all_finite() const {
        for (Real v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    int throw_rank2() const { throw std::logic_error("array is not rank-2: " + shape_str(shape)); }
};

template <typename Real>
Array<Real> full(Shape s, Real v) {
    Array<Real> a(std::move(s));
    std::fill(a.data.begin(), a.data.end(), v);
    return a;
}

template <typename Real, typename Other>
Array<Real> cast_array(const Array<Other>& a) {
    Array<Real> out(a.shape);
    for (size_t i = 0; i < a.data.size(); ++i) out.data[i] = static_cast<Real>(a.data[i]);
    return out;
}

// FNV-1a over the raw byte representation; used for freeze-mask audits and
// dataset regeneration checks.
inline std::uint64_t fnv1a(const void* bytes, size_t n, std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace tvclip
