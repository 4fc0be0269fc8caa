#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "partdistill/geom.hpp"
#include "partdistill/matrix.hpp"
#include "partdistill/parallel.hpp"
#include "partdistill/rng.hpp"

namespace partdistill {

namespace detail {

/// Eigenvalues of a symmetric 3x3, descending. Analytic (trigonometric)
/// method; inputs here are point covariances so conditioning is mild.
inline std::array<double, 3> symmetric_eigenvalues(const std::array<double, 6>& m) {
  // m = [a00, a01, a02, a11, a12, a22]
  const double a = m[0], b = m[3], c = m[5], d = m[1], e = m[4], f = m[2];
  const double p1 = d * d + f * f + e * e;
  if (p1 < 1e-300) {
    std::array<double, 3> eig = {a, b, c};
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
  }
  const double q = (a + b + c) / 3.0;
  const double p2 = (a - q) * (a - q) + (b - q) * (b - q) + (c - q) * (c - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  const double inv_p = 1.0 / p;
  // B = (A - qI)/p, r = det(B)/2
  const double b00 = (a - q) * inv_p, b11 = (b - q) * inv_p, b22 = (c - q) * inv_p;
  const double b01 = d * inv_p, b02 = f * inv_p, b12 = e * inv_p;
  double r = b00 * (b11 * b22 - b12 * b12) - b01 * (b01 * b22 - b12 * b02) +
             b02 * (b01 * b12 - b11 * b02);
  r *= 0.5;
  r = std::clamp(r, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double e1 = q + 2.0 * p * std::cos(phi);
  const double e3 = q + 2.0 * p * std::cos(phi + 2.0 * 3.141592653589793 / 3.0);
  const double e2 = 3.0 * q - e1 - e3;
  return {e1, e2, e3};
}

/// Unit eigenvector for the given eigenvalue, via the largest cross product
/// of rows of (A - lambda I); falls back to +z when the matrix is isotropic.
inline Vec3 symmetric_eigenvector(const std::array<double, 6>& m, double lambda) {
  const Vec3 r0{m[0] - lambda, m[1], m[2]};
  const Vec3 r1{m[1], m[3] - lambda, m[4]};
  const Vec3 r2{m[2], m[4], m[5] - lambda};
  const Vec3 c01 = r0.cross(r1), c02 = r0.cross(r2), c12 = r1.cross(r2);
  const double n01 = c01.dot(c01), n02 = c02.dot(c02), n12 = c12.dot(c12);
  Vec3 best = c01;
  double best_n = n01;
  if (n02 > best_n) { best = c02; best_n = n02; }
  if (n12 > best_n) { best = c12; best_n = n12; }
  if (best_n < 1e-24) return {0.0, 0.0, 1.0};
  return best * (1.0 / std::sqrt(best_n));
}

}  // namespace detail

/// Frozen hand-crafted per-point features: raw coordinates, multi-scale
/// neighborhood statistics, and random Fourier features of position.
struct EncoderConfig {
  std::vector<double> neighborhood_radii{0.05, 0.1, 0.2};
  int fourier_features = 32;
  std::uint64_t fourier_seed = 17;

  int output_dim() const {
    return 3 + 9 * static_cast<int>(neighborhood_radii.size()) + 2 * fourier_features;
  }
  void validate() const {
    double prev = 0.0;
    for (double r : neighborhood_radii) {
      if (r <= prev) throw std::runtime_error("encoder: radii must be positive and strictly increasing");
      prev = r;
    }
    if (fourier_features < 0) throw std::runtime_error("encoder: negative fourier_features");
  }
};

/// Per-radius block layout: [log1p(count), centroid offset xyz, eigenvalues
/// descending, |normal . radial|, |normal . z|]. Empty neighborhoods yield a
/// zero block. Deterministic in (shape, config).
inline Matrix encode_points(const PointCloudShape& shape, const EncoderConfig& config) {
  config.validate();
  const std::size_t n = shape.num_points();
  const auto num_radii = config.neighborhood_radii.size();
  const int dim = config.output_dim();
  Matrix features(n, static_cast<std::size_t>(dim));

  std::vector<Vec3> fourier_dirs(static_cast<std::size_t>(config.fourier_features));
  {
    Rng rng(config.fourier_seed);
    for (auto& w : fourier_dirs) w = {rng.normal(), rng.normal(), rng.normal()};
  }
  std::vector<double> radius_sq(num_radii);
  for (std::size_t k = 0; k < num_radii; ++k)
    radius_sq[k] = config.neighborhood_radii[k] * config.neighborhood_radii[k];

  parallel_for(n, [&](std::size_t i) {
    const Vec3 p = shape.points[i];
    double* out = features.row(i);
    out[0] = p.x; out[1] = p.y; out[2] = p.z;

    // Raw moments per radius: count, sum, and the six unique entries of
    // sum of outer products.
    std::vector<double> count(num_radii, 0.0);
    std::vector<Vec3> sum(num_radii);
    std::vector<std::array<double, 6>> m2(num_radii, {0, 0, 0, 0, 0, 0});
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const Vec3 q = shape.points[j];
      const Vec3 d = q - p;
      const double dist_sq = d.dot(d);
      for (std::size_t k = 0; k < num_radii; ++k) {
        if (dist_sq > radius_sq[k]) continue;
        count[k] += 1.0;
        sum[k] = sum[k] + q;
        m2[k][0] += q.x * q.x; m2[k][1] += q.x * q.y; m2[k][2] += q.x * q.z;
        m2[k][3] += q.y * q.y; m2[k][4] += q.y * q.z; m2[k][5] += q.z * q.z;
      }
    }
    for (std::size_t k = 0; k < num_radii; ++k) {
      double* block = out + 3 + 9 * k;
      if (count[k] == 0.0) {
        std::fill(block, block + 9, 0.0);
        continue;
      }
      const double inv = 1.0 / count[k];
      const double radius = config.neighborhood_radii[k];
      const Vec3 mu = sum[k] * inv;
      block[0] = std::log1p(count[k]);
      // Offsets in radius units and eigenvalues in squared-radius units keep
      // every block at O(1); raw local covariances sit at 1e-4 and would be
      // invisible next to the coordinate features.
      block[1] = (mu.x - p.x) / radius;
      block[2] = (mu.y - p.y) / radius;
      block[3] = (mu.z - p.z) / radius;
      std::array<double, 6> cov;
      cov[0] = m2[k][0] * inv - mu.x * mu.x;
      cov[1] = m2[k][1] * inv - mu.x * mu.y;
      cov[2] = m2[k][2] * inv - mu.x * mu.z;
      cov[3] = m2[k][3] * inv - mu.y * mu.y;
      cov[4] = m2[k][4] * inv - mu.y * mu.z;
      cov[5] = m2[k][5] * inv - mu.z * mu.z;
      const std::array<double, 3> eig = detail::symmetric_eigenvalues(cov);
      const double inv_r2 = 1.0 / (radius * radius);
      block[4] = eig[0] * inv_r2; block[5] = eig[1] * inv_r2; block[6] = eig[2] * inv_r2;
      const Vec3 normal = detail::symmetric_eigenvector(cov, eig[2]);
      const double pn = p.norm();
      block[7] = pn > 1e-12 ? std::abs(normal.dot(p) / pn) : 0.0;
      block[8] = std::abs(normal.z);
    }
    double* fourier = out + 3 + 9 * num_radii;
    for (std::size_t f = 0; f < fourier_dirs.size(); ++f) {
      const double t = fourier_dirs[f].dot(p);
      fourier[2 * f] = std::sin(t);
      fourier[2 * f + 1] = std::cos(t);
    }
  });
  return features;
}

struct DenseLayer {
  Matrix weights;            // in x out
  std::vector<double> bias;  // out
};

struct HeadGradients {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> bias;
};

/// Four dense layers with ReLU between them and a softmax output row per
/// point. Adam moments live beside the parameters.
class DistillHead {
 public:
  DistillHead() = default;

  DistillHead(int input_dim, int output_dim, std::uint64_t seed,
              std::vector<int> hidden = {128, 128, 64}) {
    Rng rng(seed);
    std::vector<int> widths;
    widths.push_back(input_dim);
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(output_dim);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      DenseLayer layer;
      const auto fan_in = static_cast<std::size_t>(widths[l]);
      const auto fan_out = static_cast<std::size_t>(widths[l + 1]);
      layer.weights = Matrix(fan_in, fan_out);
      // Hidden layers use the Xavier-uniform bound. The output layer starts
      // at 5% of it: softmax begins near uniform and the first optimizer
      // steps fit a linear probe on stable random features instead of
      // fighting an arbitrary initial labeling, which is what makes the
      // short shared epoch budget workable.
      const bool output_layer = l + 2 == widths.size();
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)) *
                           (output_layer ? 0.05 : 1.0);
      for (std::size_t i = 0; i < layer.weights.size(); ++i)
        layer.weights.data()[i] = rng.uniform(-bound, bound);
      // Small nonzero bias init keeps dead ReLU rows off the exact kink,
      // where the loss is not differentiable.
      layer.bias.resize(fan_out);
      for (double& b : layer.bias) b = rng.uniform(-0.1 * bound, 0.1 * bound);
      layers_.push_back(std::move(layer));
    }
    reset_moments();
  }

  std::size_t num_layers() const { return layers_.size(); }
  const DenseLayer& layer(std::size_t l) const { return layers_[l]; }
  DenseLayer& layer(std::size_t l) { return layers_[l]; }
  long step_count() const { return step_; }
  int input_dim() const { return static_cast<int>(layers_.front().weights.rows()); }
  int output_dim() const { return static_cast<int>(layers_.back().weights.cols()); }

  friend bool operator==(const DistillHead& a, const DistillHead& b) {
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t l = 0; l < a.layers_.size(); ++l)
      if (!(a.layers_[l].weights == b.layers_[l].weights && a.layers_[l].bias == b.layers_[l].bias))
        return false;
    return true;
  }

  struct ForwardCache {
    std::vector<Matrix> activations;  // per layer input, post-ReLU
    Matrix output;                    // softmax rows
  };

  ForwardCache forward_cached(const Matrix& input) const {
    if (static_cast<int>(input.cols()) != input_dim())
      throw std::runtime_error("head_forward: feature width " + std::to_string(input.cols()) +
                               " != expected " + std::to_string(input_dim()));
    ForwardCache cache;
    cache.activations.reserve(layers_.size());
    Matrix current = input;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      cache.activations.push_back(current);
      Matrix z;
      matmul(current, layers_[l].weights, z);
      const std::vector<double>& bias = layers_[l].bias;
      for (std::size_t i = 0; i < z.rows(); ++i) {
        double* zi = z.row(i);
        for (std::size_t j = 0; j < z.cols(); ++j) zi[j] += bias[j];
      }
      if (l + 1 < layers_.size()) {
        for (std::size_t k = 0; k < z.size(); ++k) z.data()[k] = std::max(0.0, z.data()[k]);
      } else {
        softmax_rows_inplace(z);
      }
      current = std::move(z);
    }
    cache.output = std::move(current);
    return cache;
  }

  /// Gradients of a scalar loss wrt all parameters, given dLoss/dOutput.
  HeadGradients backward(const ForwardCache& cache, const Matrix& output_grad) const {
    if (!output_grad.same_shape(cache.output))
      throw std::runtime_error("head_backward: gradient shape mismatch");
    HeadGradients grads;
    grads.weights.resize(layers_.size());
    grads.bias.resize(layers_.size());

    // Softmax rows: dz_j = y_j * (g_j - sum_k g_k y_k).
    Matrix delta(output_grad.rows(), output_grad.cols());
    for (std::size_t i = 0; i < delta.rows(); ++i) {
      const double* y = cache.output.row(i);
      const double* g = output_grad.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < delta.cols(); ++j) dot += g[j] * y[j];
      double* d = delta.row(i);
      for (std::size_t j = 0; j < delta.cols(); ++j) d[j] = y[j] * (g[j] - dot);
    }

    for (std::size_t l = layers_.size(); l-- > 0;) {
      matmul_at_b(cache.activations[l], delta, grads.weights[l]);
      grads.bias[l].assign(delta.cols(), 0.0);
      for (std::size_t i = 0; i < delta.rows(); ++i) {
        const double* d = delta.row(i);
        for (std::size_t j = 0; j < delta.cols(); ++j) grads.bias[l][j] += d[j];
      }
      if (l == 0) break;
      Matrix upstream;
      matmul_a_bt(delta, layers_[l].weights, upstream);
      // ReLU mask: the cached activation is max(0, z), so a > 0 <=> z > 0.
      const Matrix& act = cache.activations[l];
      for (std::size_t k = 0; k < upstream.size(); ++k)
        if (act.data()[k] <= 0.0) upstream.data()[k] = 0.0;
      delta = std::move(upstream);
    }
    return grads;
  }

  /// Standard Adam with bias correction; rejects non-finite gradients.
  void adam_step(const HeadGradients& grads, double lr, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8) {
    if (grads.weights.size() != layers_.size() || grads.bias.size() != layers_.size())
      throw std::runtime_error("adam_step: gradient layer count mismatch");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (!grads.weights[l].same_shape(layers_[l].weights) ||
          grads.bias[l].size() != layers_[l].bias.size())
        throw std::runtime_error("adam_step: gradient shape mismatch");
      for (std::size_t k = 0; k < grads.weights[l].size(); ++k)
        if (!std::isfinite(grads.weights[l].data()[k]))
          throw std::runtime_error("adam_step: divergence (non-finite gradient)");
      for (double g : grads.bias[l])
        if (!std::isfinite(g)) throw std::runtime_error("adam_step: divergence (non-finite gradient)");
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      AdamState& st = adam_[l];
      double* w = layers_[l].weights.data();
      const double* gw = grads.weights[l].data();
      for (std::size_t k = 0; k < layers_[l].weights.size(); ++k) {
        st.m_w[k] = beta1 * st.m_w[k] + (1.0 - beta1) * gw[k];
        st.v_w[k] = beta2 * st.v_w[k] + (1.0 - beta2) * gw[k] * gw[k];
        w[k] -= lr * (st.m_w[k] / bc1) / (std::sqrt(st.v_w[k] / bc2) + eps);
      }
      for (std::size_t k = 0; k < layers_[l].bias.size(); ++k) {
        st.m_b[k] = beta1 * st.m_b[k] + (1.0 - beta1) * grads.bias[l][k];
        st.v_b[k] = beta2 * st.v_b[k] + (1.0 - beta2) * grads.bias[l][k] * grads.bias[l][k];
        layers_[l].bias[k] -= lr * (st.m_b[k] / bc1) / (std::sqrt(st.v_b[k] / bc2) + eps);
      }
    }
  }

  static void softmax_rows_inplace(Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double* row = m.row(i);
      double max_v = row[0];
      for (std::size_t j = 1; j < m.cols(); ++j) max_v = std::max(max_v, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < m.cols(); ++j) {
        row[j] = std::exp(row[j] - max_v);
        sum += row[j];
      }
      const double inv = 1.0 / sum;
      for (std::size_t j = 0; j < m.cols(); ++j) row[j] *= inv;
    }
  }

 private:
  struct AdamState {
    std::vector<double> m_w, v_w, m_b, v_b;
  };

  void reset_moments() {
    adam_.clear();
    for (const DenseLayer& layer : layers_) {
      AdamState st;
      st.m_w.assign(layer.weights.size(), 0.0);
      st.v_w.assign(layer.weights.size(), 0.0);
      st.m_b.assign(layer.bias.size(), 0.0);
      st.v_b.assign(layer.bias.size(), 0.0);
      adam_.push_back(std::move(st));
    }
  }

  std::vector<DenseLayer> layers_;
  std::vector<AdamState> adam_;
  long step_ = 0;
};

inline Matrix head_forward(const DistillHead& head, const Matrix& features) {
  return head.forward_cached(features).output;
}

/// Frozen encoder + trainable head, with per-shape feature caching. Features
/// may also be injected from .feat files in place of the built-in encoder.
struct StudentModel {
  EncoderConfig encoder;
  DistillHead head;
  std::map<std::string, Matrix> feature_cache;

  const Matrix& features_for(const PointCloudShape& shape) {
    auto it = feature_cache.find(shape.shape_id);
    if (it != feature_cache.end()) return it->second;
    return feature_cache.emplace(shape.shape_id, encode_points(shape, encoder)).first->second;
  }
};

// .feat binary format: header N and E as 64-bit little-endian unsigned, then
// N*E 32-bit little-endian IEEE floats, row-major.

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_features(const Matrix& features, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_features: cannot open " + path);
  detail::write_u64_le(out, features.rows());
  detail::write_u64_le(out, features.cols());
  for (std::size_t k = 0; k < features.size(); ++k) {
    const float f = static_cast<float>(features.data()[k]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    unsigned char bytes[4];
    for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
  if (!out) throw std::runtime_error("save_features: write failed for " + path);
}

inline Matrix load_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_features: cannot open " + path);
  const std::uint64_t rows = detail::read_u64_le(in);
  const std::uint64_t cols = detail::read_u64_le(in);
  if (!in || rows == 0 || cols == 0 || rows > (1ULL << 32) || cols > (1ULL << 20))
    throw std::runtime_error("load_features: bad header in " + path);
  Matrix features(rows, cols);
  for (std::size_t k = 0; k < features.size(); ++k) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    if (!in) throw std::runtime_error("load_features: truncated data in " + path);
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    features.data()[k] = static_cast<double>(f);
  }
  return features;
}

}  // namespace partdistill
