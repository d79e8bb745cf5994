#pragma once

// Embedding translation from a probe space (dim N) into a reference space
// (dim M): a learned affine map trained on negative cosine similarity, its
// closed-form least-squares counterpart, and the orthonormal (Kabsch)
// solution for unit-norm embeddings of equal dimension.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "pairguard/binary_io.hpp"
#include "pairguard/embedding.hpp"
#include "pairguard/errors.hpp"
#include "pairguard/rng.hpp"

namespace pairguard {

enum class MapKind : std::uint8_t { Affine = 0, Rotation = 1 };

/// e_trs = W * e_prb + c. For Rotation maps W is the square orthonormal R
/// and c is zero.
class TranslationMap {
 public:
  static TranslationMap affine(Matrix weights, Vector bias) {
    if (bias.size() != weights.rows()) {
      fail(ErrorCode::DimMismatch, "bias length " + std::to_string(bias.size()) +
                                       " does not match " + std::to_string(weights.rows()) +
                                       " output rows");
    }
    if (weights.rows() < 1 || weights.cols() < 1) {
      fail(ErrorCode::DimMismatch, "translation map needs non-empty weights");
    }
    return TranslationMap(MapKind::Affine, std::move(weights), std::move(bias));
  }

  static TranslationMap rotation(Matrix r) {
    if (r.rows() != r.cols() || r.rows() < 1) {
      fail(ErrorCode::DimMismatch, "rotation must be square and non-empty");
    }
    const Eigen::Index m = r.rows();
    const double ortho = (r.transpose() * r - Matrix::Identity(m, m)).norm();
    const double det = r.determinant();
    if (ortho > 1e-8 || std::abs(det - 1.0) > 1e-8) {
      fail(ErrorCode::NotARotation, "matrix is not a proper rotation (|R^T R - I|_F = " +
                                        std::to_string(ortho) + ", det = " +
                                        std::to_string(det) + ")");
    }
    return TranslationMap(MapKind::Rotation, std::move(r), Vector::Zero(m));
  }

  static TranslationMap identity(Eigen::Index dim) {
    return affine(Matrix::Identity(dim, dim), Vector::Zero(dim));
  }

  MapKind kind() const noexcept { return kind_; }
  const Matrix& weights() const noexcept { return weights_; }
  const Vector& bias() const noexcept { return bias_; }
  Eigen::Index source_dim() const noexcept { return weights_.cols(); }
  Eigen::Index target_dim() const noexcept { return weights_.rows(); }

  friend bool operator==(const TranslationMap& a, const TranslationMap& b) {
    return a.kind_ == b.kind_ && a.weights_.rows() == b.weights_.rows() &&
           a.weights_.cols() == b.weights_.cols() && a.weights_ == b.weights_ &&
           a.bias_ == b.bias_;
  }

 private:
  TranslationMap(MapKind kind, Matrix w, Vector c)
      : kind_(kind), weights_(std::move(w)), bias_(std::move(c)) {}

  friend TranslationMap invert_rotation(const TranslationMap& map);
  friend TranslationMap fit_kabsch(const EmbeddingBatch& probe, const EmbeddingBatch& reference);

  MapKind kind_;
  Matrix weights_;
  Vector bias_;
};

/// Not re-normalized; cosine scoring downstream is scale-invariant.
inline Embedding apply(const TranslationMap& map, const Embedding& e_prb) {
  if (e_prb.size() != map.source_dim()) {
    fail(ErrorCode::DimMismatch, "map expects dimension " + std::to_string(map.source_dim()) +
                                     ", got " + std::to_string(e_prb.size()));
  }
  if (map.kind() == MapKind::Rotation) return map.weights() * e_prb;
  return map.weights() * e_prb + map.bias();
}

/// Rotation inverse is the transpose; applying twice returns the input map
/// bit for bit.
inline TranslationMap invert_rotation(const TranslationMap& map) {
  if (map.kind() != MapKind::Rotation) {
    fail(ErrorCode::NotARotation, "only rotation maps can be inverted by transposition");
  }
  return TranslationMap(MapKind::Rotation, map.weights().transpose(), map.bias());
}

// ---------------------------------------------------------------------------
// Fitting

enum class InitMode { LeastSquares, Random, Identity };

struct FitConfig {
  std::uint64_t seed = 0;
  std::size_t batch_size = 128;
  double learning_rate = 0.05;
  std::size_t max_epochs = 200;
  InitMode init = InitMode::LeastSquares;
  /// Early stop once the full-data loss improved by less than this over
  /// `patience` epochs.
  double min_improvement = 1e-7;
  std::size_t patience = 10;
};

struct FitReport {
  double final_loss = 0.0;
  std::size_t iterations = 0;
  /// Full-data loss at initialization followed by one entry per epoch.
  std::vector<double> loss_trace;
  /// True when the requested least-squares init was singular and the random
  /// fallback was used instead.
  bool init_fallback = false;
};

struct AffineGradient {
  double loss = 0.0;  // mean of -cos_sim over the rows
  Matrix d_weights;
  Vector d_bias;
};

namespace detail {

inline void check_aligned(const Matrix& probe, const Matrix& reference) {
  if (probe.rows() != reference.rows()) {
    fail(ErrorCode::RowCountMismatch, "probe has " + std::to_string(probe.rows()) +
                                          " rows, reference has " +
                                          std::to_string(reference.rows()));
  }
  if (probe.rows() == 0) fail(ErrorCode::RowCountMismatch, "empty batches");
}

inline void check_nonzero_rows(const Matrix& m, const char* what) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    if (!(m.row(i).norm() >= kZeroNormTolerance)) {
      fail(ErrorCode::ZeroNorm, std::string(what) + " row " + std::to_string(i) + " is zero");
    }
  }
}

}  // namespace detail

/// Mean negative cosine loss of (W, c) over the selected rows and its exact
/// gradient. With t = W e + c and reference r,
///   d(-cos)/dt = -( r / (|t||r|) - t (t.r) / (|t|^3 |r|) ).
inline AffineGradient affine_loss_and_gradient(const Matrix& weights, const Vector& bias,
                                               const Matrix& probe, const Matrix& reference,
                                               std::span<const Eigen::Index> rows) {
  AffineGradient g{0.0, Matrix::Zero(weights.rows(), weights.cols()),
                   Vector::Zero(weights.rows())};
  if (rows.empty()) return g;
  const auto n = static_cast<Eigen::Index>(rows.size());
  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix x(n, probe.cols());
  Matrix r(n, reference.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    x.row(k) = probe.row(rows[static_cast<std::size_t>(k)]);
    r.row(k) = reference.row(rows[static_cast<std::size_t>(k)]);
  }
  Matrix t = x * weights.transpose();
  t.rowwise() += bias.transpose();
  Matrix dt(n, t.cols());
  for (Eigen::Index k = 0; k < n; ++k) {
    const double nt = t.row(k).norm();
    const double nr = r.row(k).norm();
    if (!(nt >= kZeroNormTolerance)) {
      fail(ErrorCode::ZeroNorm, "translated embedding collapsed to zero");
    }
    const double tr = t.row(k).dot(r.row(k));
    g.loss -= tr / (nt * nr) * inv_n;
    dt.row(k) = -inv_n * (r.row(k) / (nt * nr) - t.row(k) * (tr / (nt * nt * nt * nr)));
  }
  g.d_weights.noalias() = dt.transpose() * x;
  g.d_bias = dt.colwise().sum().transpose();
  return g;
}

inline AffineGradient affine_loss_and_gradient(const Matrix& weights, const Vector& bias,
                                               const Matrix& probe, const Matrix& reference) {
  std::vector<Eigen::Index> all(static_cast<std::size_t>(probe.rows()));
  std::iota(all.begin(), all.end(), Eigen::Index{0});
  return affine_loss_and_gradient(weights, bias, probe, reference, all);
}

/// Closed-form minimizer of sum |W e_prb + c - e_ref|^2. Solved on centered
/// data through the normal equations; c recovers the mean offset.
inline TranslationMap fit_least_squares(const EmbeddingBatch& probe,
                                        const EmbeddingBatch& reference) {
  const Matrix& x = probe.matrix();
  const Matrix& y = reference.matrix();
  detail::check_aligned(x, y);
  const Eigen::Index n = x.rows();
  const Eigen::Index dim_in = x.cols();
  if (n < dim_in + 1) {
    fail(ErrorCode::SingularSystem, std::to_string(n) + " samples cannot determine an affine map from " +
                                        std::to_string(dim_in) + " dimensions (need >= " +
                                        std::to_string(dim_in + 1) + ")");
  }
  const Vector x_mean = x.colwise().mean().transpose();
  const Vector y_mean = y.colwise().mean().transpose();
  const Matrix xc = x.rowwise() - x_mean.transpose();
  const Matrix yc = y.rowwise() - y_mean.transpose();
  const Matrix gram = xc.transpose() * xc;

  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(hi > 0.0) || lo <= hi * 1e-12) {
    fail(ErrorCode::SingularSystem, "design matrix is rank deficient (eigenvalue ratio " +
                                        std::to_string(hi > 0.0 ? lo / hi : 0.0) + ")");
  }
  // W^T = gram^{-1} xc^T yc
  const Matrix wt = gram.ldlt().solve(xc.transpose() * yc);
  Matrix w = wt.transpose();
  Vector c = y_mean - w * x_mean;
  return TranslationMap::affine(std::move(w), std::move(c));
}

/// Gradient descent on the mean negative cosine similarity over shuffled
/// mini-batches. Inputs are normalized on ingestion. The returned map is the
/// best one seen by full-data loss, so final_loss <= loss_trace[0].
inline std::pair<TranslationMap, FitReport> fit_affine(
    const EmbeddingBatch& probe_in, const EmbeddingBatch& reference_in, const FitConfig& cfg,
    const std::optional<TranslationMap>& initial = std::nullopt) {
  detail::check_aligned(probe_in.matrix(), reference_in.matrix());
  detail::check_nonzero_rows(reference_in.matrix(), "reference");
  if (cfg.batch_size == 0) fail(ErrorCode::InvalidArgument, "batch_size must be positive");
  if (!(cfg.learning_rate > 0.0)) fail(ErrorCode::InvalidArgument, "learning_rate must be positive");

  const EmbeddingBatch probe_b = probe_in.normalized();
  const EmbeddingBatch reference_b = reference_in.normalized();
  const Matrix& probe = probe_b.matrix();
  const Matrix& reference = reference_b.matrix();
  const Eigen::Index dim_in = probe.cols();
  const Eigen::Index dim_out = reference.cols();

  FitReport report;
  Stream rng = Stream(cfg.seed).split("fit_affine");
  Matrix w;
  Vector c = Vector::Zero(dim_out);

  if (initial) {
    if (initial->source_dim() != dim_in || initial->target_dim() != dim_out) {
      fail(ErrorCode::DimMismatch, "initial map shape does not match the batches");
    }
    w = initial->weights();
    c = initial->bias();
  } else {
    auto random_init = [&] {
      Stream init_rng = rng.split("init");
      const double scale = 1.0 / std::sqrt(static_cast<double>(dim_in));
      w.resize(dim_out, dim_in);
      for (Eigen::Index i = 0; i < dim_out; ++i) {
        for (Eigen::Index j = 0; j < dim_in; ++j) w(i, j) = init_rng.uniform(-scale, scale);
      }
      c.setZero();
    };
    switch (cfg.init) {
      case InitMode::LeastSquares:
        try {
          const auto ls = fit_least_squares(probe_b, reference_b);
          w = ls.weights();
          c = ls.bias();
        } catch (const Error& e) {
          if (e.code() != ErrorCode::SingularSystem) throw;
          report.init_fallback = true;
          random_init();
        }
        break;
      case InitMode::Random:
        random_init();
        break;
      case InitMode::Identity:
        if (dim_in != dim_out) {
          fail(ErrorCode::DimMismatch, "identity init needs equal dimensions");
        }
        w = Matrix::Identity(dim_out, dim_in);
        break;
    }
  }

  const auto full_loss = [&](const Matrix& ww, const Vector& cc) {
    Matrix t = probe * ww.transpose();
    t.rowwise() += cc.transpose();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      loss -= t.row(i).dot(reference.row(i)) / (t.row(i).norm() * reference.row(i).norm());
    }
    return loss / static_cast<double>(t.rows());
  };

  Matrix best_w = w;
  Vector best_c = c;
  double best_loss = full_loss(w, c);
  report.loss_trace.push_back(best_loss);

  std::vector<Eigen::Index> order(static_cast<std::size_t>(probe.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Stream shuffle_rng = rng.split("shuffle");

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<Eigen::Index>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      const auto g = affine_loss_and_gradient(
          w, c, probe, reference, std::span<const Eigen::Index>(order).subspan(start, len));
      w.noalias() -= cfg.learning_rate * g.d_weights;
      c.noalias() -= cfg.learning_rate * g.d_bias;
      ++report.iterations;
    }
    const double loss = full_loss(w, c);
    report.loss_trace.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best_w = w;
      best_c = c;
    }
    const std::size_t k = report.loss_trace.size() - 1;
    if (k >= cfg.patience &&
        report.loss_trace[k - cfg.patience] - loss < cfg.min_improvement) {
      break;
    }
  }

  report.final_loss = best_loss;
  return {TranslationMap::affine(std::move(best_w), std::move(best_c)), std::move(report)};
}

/// Orthonormal probe->reference map for unit-norm embeddings of equal
/// dimension. No centering: the points live on the unit hypersphere and
/// rotate about the origin. The cross-covariance is accumulated as
/// C = sum_i e_ref,i e_prb,i^T so that R = U D V^T maps probe onto
/// reference, with D correcting the last singular direction to keep
/// det(R) = +1.
inline TranslationMap fit_kabsch(const EmbeddingBatch& probe, const EmbeddingBatch& reference) {
  const Matrix& a = probe.matrix();
  const Matrix& b = reference.matrix();
  detail::check_aligned(a, b);
  if (a.cols() != b.cols()) {
    fail(ErrorCode::DimMismatch, "rotation needs equal dimensions, got " +
                                     std::to_string(a.cols()) + " and " +
                                     std::to_string(b.cols()));
  }
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (!is_unit(a.row(i).transpose()) || !is_unit(b.row(i).transpose())) {
      fail(ErrorCode::NotNormalized, "row " + std::to_string(i) + " is not unit-norm");
    }
  }
  const Eigen::Index m = a.cols();
  const Matrix cov = b.transpose() * a;

  Eigen::BDCSVD<Matrix> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector& sv = svd.singularValues();
  if (m >= 2 && sv(m - 2) < 1e-12) {
    fail(ErrorCode::DegenerateSVD, "two smallest singular values of the covariance are "
                                   "below 1e-12; rotation is ambiguous");
  }
  const Matrix& u = svd.matrixU();
  const Matrix& v = svd.matrixV();
  Vector d = Vector::Ones(m);
  const double s = u.determinant() * v.transpose().determinant();
  d(m - 1) = s < 0.0 ? -1.0 : 1.0;
  // U D V^T is orthonormal with det +1 by construction.
  Matrix r = (u * d.asDiagonal()) * v.transpose();
  return TranslationMap(MapKind::Rotation, std::move(r), Vector::Zero(m));
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::string_view kMapMagic = "TMAP1";

/// TMAP1: magic, kind byte, u32 source_dim, u32 target_dim, then W (or R)
/// row-major as f64 followed by c, all little-endian.
inline std::vector<unsigned char> encode_map(const TranslationMap& map) {
  std::vector<unsigned char> out;
  detail::put_magic(out, kMapMagic);
  out.push_back(static_cast<unsigned char>(map.kind()));
  detail::put_u32(out, static_cast<std::uint32_t>(map.source_dim()));
  detail::put_u32(out, static_cast<std::uint32_t>(map.target_dim()));
  for (Eigen::Index i = 0; i < map.target_dim(); ++i) {
    for (Eigen::Index j = 0; j < map.source_dim(); ++j) detail::put_f64(out, map.weights()(i, j));
  }
  for (Eigen::Index i = 0; i < map.target_dim(); ++i) detail::put_f64(out, map.bias()(i));
  return out;
}

inline TranslationMap decode_map(const std::vector<unsigned char>& bytes, const std::string& source) {
  detail::Reader in(bytes, source);
  in.expect_magic(kMapMagic);
  const auto kind = in.u8();
  if (kind > 1) fail(ErrorCode::BadMagic, source + ": unknown map kind " + std::to_string(kind));
  const std::uint64_t n = in.u32();
  const std::uint64_t m = in.u32();
  if (in.remaining() != (m * n + m) * 8) {
    fail(ErrorCode::TruncatedPayload, source + ": payload does not match " + std::to_string(m) +
                                          "x" + std::to_string(n) + " map");
  }
  Matrix w(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = in.f64();
  }
  Vector c(static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < c.size(); ++i) c(i) = in.f64();
  if (kind == static_cast<std::uint8_t>(MapKind::Rotation)) return TranslationMap::rotation(std::move(w));
  return TranslationMap::affine(std::move(w), std::move(c));
}

inline void write_map(const TranslationMap& map, const std::filesystem::path& path) {
  detail::write_file(path, encode_map(map));
}

inline TranslationMap read_map(const std::filesystem::path& path) {
  return decode_map(detail::read_file(path), path.string());
}

inline InitMode parse_init_mode(const std::string& s) {
  if (s == "ls") return InitMode::LeastSquares;
  if (s == "random") return InitMode::Random;
  if (s == "identity") return InitMode::Identity;
  fail(ErrorCode::ConfigError, "unknown init \"" + s + "\" (expected ls|random|identity)");
}

inline std::string to_string(InitMode m) {
  switch (m) {
    case InitMode::LeastSquares: return "ls";
    case InitMode::Random: return "random";
    case InitMode::Identity: return "identity";
  }
  return "ls";
}

/// {seed, batch_size, learning_rate, max_epochs, init}; every key optional,
/// unknown keys rejected.
inline FitConfig fit_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::ConfigError, "fit config must be a JSON object");
  FitConfig cfg;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "batch_size") cfg.batch_size = value.get<std::size_t>();
      else if (key == "learning_rate") cfg.learning_rate = value.get<double>();
      else if (key == "max_epochs") cfg.max_epochs = value.get<std::size_t>();
      else if (key == "init") cfg.init = parse_init_mode(value.get<std::string>());
      else fail(ErrorCode::ConfigError, "unknown fit config key \"" + key + "\"");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ConfigError, "fit config key \"" + key + "\": " + e.what());
    }
  }
  if (cfg.batch_size == 0) fail(ErrorCode::ConfigError, "batch_size must be positive");
  if (!(cfg.learning_rate > 0.0)) fail(ErrorCode::ConfigError, "learning_rate must be positive");
  return cfg;
}

inline nlohmann::json to_json(const FitConfig& cfg) {
  return {{"seed", cfg.seed},
          {"batch_size", cfg.batch_size},
          {"learning_rate", cfg.learning_rate},
          {"max_epochs", cfg.max_epochs},
          {"init", to_string(cfg.init)}};
}

inline nlohmann::json to_json(const FitReport& r) {
  return {{"final_loss", r.final_loss},
          {"iterations", r.iterations},
          {"loss_trace", r.loss_trace},
          {"init_fallback", r.init_fallback}};
}

}  // namespace pairguard
