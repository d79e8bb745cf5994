#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pairguard/binary_io.hpp"
#include "pairguard/errors.hpp"

namespace pairguard {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// A feature vector produced by one model for one sample.
using Embedding = Vector;

inline constexpr double kZeroNormTolerance = 1e-12;
inline constexpr double kUnitNormTolerance = 1e-6;

inline Embedding normalize(const Embedding& e) {
  const double n = e.norm();
  if (!(n >= kZeroNormTolerance)) {
    fail(ErrorCode::ZeroNorm, "cannot normalize a vector with norm " +
                                  std::to_string(n));
  }
  return e / n;
}

inline bool is_unit(const Embedding& e, double tol = kUnitNormTolerance) {
  return std::abs(e.norm() - 1.0) <= tol;
}

/// Row-aligned set of embeddings (one row per sample) with optional
/// identity labels.
class EmbeddingBatch {
 public:
  EmbeddingBatch() = default;

  explicit EmbeddingBatch(Matrix rows,
                          std::optional<std::vector<std::string>> labels = std::nullopt)
      : rows_(std::move(rows)), labels_(std::move(labels)) {
    if (rows_.rows() > 0 && rows_.cols() < 1) {
      fail(ErrorCode::DimMismatch, "embedding dimension must be >= 1");
    }
    if (labels_ && labels_->size() != static_cast<std::size_t>(rows_.rows())) {
      fail(ErrorCode::LabelCountMismatch,
           std::to_string(labels_->size()) + " labels for " +
               std::to_string(rows_.rows()) + " rows");
    }
  }

  static EmbeddingBatch from_rows(const std::vector<Embedding>& rows,
                                  std::optional<std::vector<std::string>> labels = std::nullopt) {
    if (rows.empty()) return EmbeddingBatch(Matrix(0, 0), std::move(labels));
    const auto dim = rows.front().size();
    Matrix m(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != dim) {
        fail(ErrorCode::DimMismatch, "row " + std::to_string(i) + " has dimension " +
                                         std::to_string(rows[i].size()) + ", expected " +
                                         std::to_string(dim));
      }
      m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    }
    return EmbeddingBatch(std::move(m), std::move(labels));
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(rows_.rows()); }
  bool empty() const noexcept { return rows_.rows() == 0; }
  Eigen::Index dim() const noexcept { return rows_.cols(); }

  Embedding row(std::size_t i) const { return rows_.row(static_cast<Eigen::Index>(i)).transpose(); }
  const Matrix& matrix() const noexcept { return rows_; }
  const std::optional<std::vector<std::string>>& labels() const noexcept { return labels_; }

  /// Copy with every row scaled to unit norm.
  EmbeddingBatch normalized() const {
    Matrix out = rows_;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      out.row(i) = normalize(rows_.row(i).transpose()).transpose();
    }
    return EmbeddingBatch(std::move(out), labels_);
  }

 private:
  Matrix rows_;
  std::optional<std::vector<std::string>> labels_;
};

inline constexpr std::string_view kEmbeddingMagic = "EMBV1";

inline std::filesystem::path labels_path_for(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".labels");
  return p;
}

inline std::vector<unsigned char> encode_embeddings(const EmbeddingBatch& batch) {
  std::vector<unsigned char> out;
  out.reserve(13 + batch.size() * static_cast<std::size_t>(batch.dim()) * 4);
  detail::put_magic(out, kEmbeddingMagic);
  detail::put_u32(out, static_cast<std::uint32_t>(batch.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(batch.dim()));
  const Matrix& m = batch.matrix();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      detail::put_f32(out, static_cast<float>(m(i, j)));
    }
  }
  return out;
}

inline Matrix decode_embeddings(const std::vector<unsigned char>& bytes,
                                const std::string& source) {
  detail::Reader in(bytes, source);
  in.expect_magic(kEmbeddingMagic);
  const std::uint64_t count = in.u32();
  const std::uint64_t dim = in.u32();
  const std::uint64_t expected = count * dim * 4;
  if (in.remaining() != expected) {
    fail(ErrorCode::TruncatedPayload,
         source + ": header declares " + std::to_string(count) + "x" +
             std::to_string(dim) + " (" + std::to_string(expected) +
             " payload bytes) but file holds " + std::to_string(in.remaining()));
  }
  Matrix m(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = in.f32();
  }
  return m;
}

/// Writes the EMBV1 file and, when labels are present, a sibling
/// "<stem>.labels" file with one label per line. A stale labels file is
/// removed when the batch carries none.
inline void write_embeddings(const EmbeddingBatch& batch, const std::filesystem::path& path) {
  if (batch.empty()) fail(ErrorCode::InvalidArgument, "refusing to write an empty batch");
  detail::write_file(path, encode_embeddings(batch));
  const auto lpath = labels_path_for(path);
  if (batch.labels()) {
    std::string text;
    for (const auto& l : *batch.labels()) {
      text += l;
      text += '\n';
    }
    detail::write_text(lpath, text);
  } else {
    std::error_code ec;
    std::filesystem::remove(lpath, ec);
  }
}

inline EmbeddingBatch read_embeddings(const std::filesystem::path& path) {
  Matrix m = decode_embeddings(detail::read_file(path), path.string());
  std::optional<std::vector<std::string>> labels;
  const auto lpath = labels_path_for(path);
  if (std::filesystem::exists(lpath)) {
    std::istringstream in(detail::read_text(lpath));
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    if (lines.size() != static_cast<std::size_t>(m.rows())) {
      fail(ErrorCode::LabelCountMismatch,
           lpath.string() + ": " + std::to_string(lines.size()) + " labels for " +
               std::to_string(m.rows()) + " rows");
    }
    labels = std::move(lines);
  }
  return EmbeddingBatch(std::move(m), std::move(labels));
}

}  // namespace pairguard
