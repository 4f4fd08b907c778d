#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace unisot {

struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct degenerate_error : std::domain_error {
    using std::domain_error::domain_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major tensor of 64-bit reals.
struct Tensor {
    std::vector<int> dims;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> d) : dims(std::move(d)), data(count(dims), 0.0) {}
    Tensor(std::vector<int> d, std::vector<double> v) : dims(std::move(d)), data(std::move(v)) {
        if (count(dims) != static_cast<int64_t>(data.size()))
            throw shape_error("tensor: dims/data mismatch");
    }

    static int64_t count(const std::vector<int>& d) {
        int64_t n = 1;
        for (int e : d) {
            if (e < 0) throw shape_error("tensor: negative extent");
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> d) { return Tensor(std::move(d)); }
    static Tensor full(std::vector<int> d, double v) {
        Tensor t(std::move(d));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor row(std::vector<double> v) {
        int n = static_cast<int>(v.size());
        return Tensor({n}, std::move(v));
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims.at(static_cast<size_t>(i)); }

    // 2-d accessors; a rank-1 tensor is treated as a single row.
    int rows() const { return rank() >= 2 ? dims[0] : 1; }
    int cols() const { return rank() >= 2 ? dims[1] : (rank() == 1 ? dims[0] : 1); }

    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }
    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor& operator+=(const Tensor& o) {
        if (!same_shape(o)) throw shape_error("tensor +=: shape mismatch");
        for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }

    double max_abs_diff(const Tensor& o) const {
        if (!same_shape(o)) throw shape_error("max_abs_diff: shape mismatch");
        double m = 0.0;
        for (size_t i = 0; i < data.size(); ++i) m = std::max(m, std::fabs(data[i] - o.data[i]));
        return m;
    }
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (int i = 0; i < t.rank(); ++i) s += (i ? "x" : "") + std::to_string(t.dims[i]);
    return s + "]";
}

// c = a(n x k) * b(k x m)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    int n = a.rows(), k = a.cols(), k2 = b.rows(), m = b.cols();
    if (k != k2) throw shape_error("matmul: inner dims " + shape_str(a) + " vs " + shape_str(b));
    Tensor c({n, m});
    for (int i = 0; i < n; ++i) {
        const double* ai = a.data.data() + static_cast<size_t>(i) * k;
        double* ci = c.data.data() + static_cast<size_t>(i) * m;
        for (int t = 0; t < k; ++t) {
            double av = ai[t];
            if (av == 0.0) continue;
            const double* bt = b.data.data() + static_cast<size_t>(t) * m;
            for (int j = 0; j < m; ++j) ci[j] += av * bt[j];
        }
    }
    return c;
}

// c = a(n x k) * b(m x k)^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    int n = a.rows(), k = a.cols(), m = b.rows();
    if (k != b.cols()) throw shape_error("matmul_nt: inner dims");
    Tensor c({n, m});
    for (int i = 0; i < n; ++i) {
        const double* ai = a.data.data() + static_cast<size_t>(i) * k;
        for (int j = 0; j < m; ++j) {
            const double* bj = b.data.data() + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += ai[t] * bj[t];
            c.at(i, j) = s;
        }
    }
    return c;
}

// c = a(k x n)^T * b(k x m)
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    int k = a.rows(), n = a.cols(), m = b.cols();
    if (k != b.rows()) throw shape_error("matmul_tn: inner dims");
    Tensor c({n, m});
    for (int t = 0; t < k; ++t) {
        const double* at = a.data.data() + static_cast<size_t>(t) * n;
        const double* bt = b.data.data() + static_cast<size_t>(t) * m;
        for (int i = 0; i < n; ++i) {
            double av = at[i];
            if (av == 0.0) continue;
            double* ci = c.data.data() + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) ci[j] += av * bt[j];
        }
    }
    return c;
}

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw shape_error("dot: size mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

}  // namespace unisot
