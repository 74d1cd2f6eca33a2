#include "mmaptune/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace mmaptune {

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    int64_t total = 1;
    for (int d : shape_) {
        if (d <= 0) {
            throw ShapeError("tensor dimensions must be positive, got " + shape_str());
        }
        total *= d;
    }
    if (shape_.empty()) {
        throw ShapeError("tensor rank must be at least 1");
    }
    data_.assign(static_cast<size_t>(total), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values) : Tensor(std::move(shape)) {
    if (static_cast<int64_t>(values.size()) != size()) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str());
    }
    data_ = std::move(values);
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (shape_ != other.shape_) {
        return false;
    }
    return std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

void Tensor::require_matrix(const std::string& who) const {
    if (rank() != 2) {
        throw ShapeError(who + ": expected a 2-D tensor, got shape " + shape_str());
    }
}

void Tensor::require_vector(const std::string& who) const {
    if (rank() != 1) {
        throw ShapeError(who + ": expected a 1-D tensor, got shape " + shape_str());
    }
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

Tensor kron(const Tensor& a, const Tensor& b) {
    a.require_matrix("kron lhs");
    b.require_matrix("kron rhs");
    const int p = a.rows(), q = a.cols(), r = b.rows(), s = b.cols();
    Tensor out({p * r, q * s});
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < q; ++j) {
            const double aij = a.at(i, j);
            for (int k = 0; k < r; ++k) {
                for (int l = 0; l < s; ++l) {
                    out.at(i * r + k, j * s + l) = aij * b.at(k, l);
                }
            }
        }
    }
    return out;
}

double Rng::uniform() {
    // 53 high bits -> [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

int Rng::uniform_int(int lo, int hi) {
    if (hi < lo) {
        throw ContractError("uniform_int: empty range");
    }
    const uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    // Rejection sampling keeps the draw unbiased.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int>(x % span);
}

Rng Rng::fork(uint64_t label) const {
    return Rng(mix_seed(seed_, label));
}

uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL + b * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace mmaptune
