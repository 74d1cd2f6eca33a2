#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmaptune {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};
struct ParseError : DataError {
    ParseError(const std::string& msg, int line)
        : DataError(msg + " (line " + std::to_string(line) + ")"), line(line) {}
    int line;
};

/// Dense row-major tensor of doubles. Dimensions must be positive; a
/// default-constructed tensor is the only empty state.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    // 2-D accessors; rank checked by the caller via require_matrix().
    int rows() const { return shape_[0]; }
    int cols() const { return shape_[1]; }
    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    /// Bitwise equality (shape and every double, compared by bits).
    bool bit_equal(const Tensor& other) const;

    void require_matrix(const std::string& who) const;
    void require_vector(const std::string& who) const;

    std::string shape_str() const;

  private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

/// Kronecker product of two matrices: out[i*r+k, j*s+l] = a[i,j] * b[k,l].
Tensor kron(const Tensor& a, const Tensor& b);

/// Deterministic random stream. Built on the standard-mandated mt19937_64
/// sequence with explicit bit-to-double conversion, so identical seeds give
/// bit-identical draws on every platform.
class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

    uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    /// Standard normal via Box-Muller (two uniforms per draw, no caching).
    double normal();
    double normal(double stddev) { return normal() * stddev; }
    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(uniform_int(0, i))]);
        }
    }

    /// Independent child stream; the label keeps sibling streams decoupled.
    Rng fork(uint64_t label) const;

  private:
    uint64_t seed_;
    std::mt19937_64 engine_;
};

/// splitmix64 mix step; used for deriving stream seeds.
uint64_t mix_seed(uint64_t a, uint64_t b);

}  // namespace mmaptune
