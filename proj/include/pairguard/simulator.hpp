#pragma once

// Deterministic synthetic open-set recognition world.
//
// Identities are unit latents z_k in R^L. A sample is rendered as
//   x = clamp01(0.5 + gain * P z_k + noise),
// with P a fixed (H*W*C) x L matrix, so every clean face lives near the
// L-dimensional "face manifold" span(P).
//
// A model sees an image through two channels:
//   * the face channel: the on-manifold content of the centered image,
//     read out by the model's orthonormal projection rows;
//   * a texture channel: a small saturating response tanh(G r / s) to the
//     off-manifold residual r (pixel noise, stickers, patches). Each model
//     owns its own random probes G, so this response is idiosyncratic and
//     cannot be predicted from another model's embedding.
// Two clean models are therefore related by a linear map up to their private
// texture responses, which gives the genuine-score spread a real pair of
// networks shows. A backdoored model wraps a clean one and, when its own
// trigger check fires on an image it recognizes as the impostor, pulls the
// embedding toward its enrolled victim reference with fidelity beta.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "pairguard/embedding.hpp"
#include "pairguard/errors.hpp"
#include "pairguard/poisoning.hpp"
#include "pairguard/rng.hpp"
#include "pairguard/scoring.hpp"

namespace pairguard::sim {

using Identity = int;

struct WorldConfig {
  std::uint64_t seed = 1;
  int num_identities = 50;
  int latent_dim = 32;
  std::size_t height = 24;
  std::size_t width = 24;
  std::size_t channels = 1;
  double render_noise = 0.01;
  double render_gain = 0.1;
  double contrast_jitter = 0.5;  // log-normal sd of the per-sample face contrast
  double max_identity_cosine = 0.5;

  std::size_t pixel_count() const noexcept { return height * width * channels; }
};

/// Sample seeds are namespaced by purpose so populations never share draws.
enum class Purpose : std::uint64_t {
  Enroll = 1,
  Genuine = 2,
  ZeiA = 3,
  ZeiB = 4,
  Poisoned = 5,
  Metrics = 6,
};

inline constexpr std::uint64_t sample_seed(Purpose purpose, std::uint64_t index) noexcept {
  return (static_cast<std::uint64_t>(purpose) << 48) | (index & ((std::uint64_t{1} << 48) - 1));
}

class SimWorld {
 public:
  explicit SimWorld(WorldConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.num_identities < 1 || cfg_.latent_dim < 1 || cfg_.pixel_count() == 0) {
      fail(ErrorCode::ConfigError, "world needs >= 1 identity, latent dimension and pixel");
    }
    if (static_cast<std::size_t>(cfg_.latent_dim) > cfg_.pixel_count()) {
      fail(ErrorCode::ConfigError, "latent_dim exceeds the pixel count");
    }
    if (!(cfg_.render_noise >= 0.0) || !(cfg_.render_gain > 0.0) ||
        !(cfg_.contrast_jitter >= 0.0)) {
      fail(ErrorCode::ConfigError,
           "render_noise and contrast_jitter must be >= 0 and render_gain > 0");
    }
    const Stream root(cfg_.seed);
    const auto pixels = static_cast<Eigen::Index>(cfg_.pixel_count());

    Stream render_rng = root.split("render_matrix");
    render_matrix_.resize(pixels, cfg_.latent_dim);
    for (Eigen::Index j = 0; j < render_matrix_.cols(); ++j) {
      for (Eigen::Index i = 0; i < render_matrix_.rows(); ++i) render_matrix_(i, j) = render_rng.normal();
    }
    latent_readout_ = (render_matrix_.transpose() * render_matrix_)
                          .ldlt()
                          .solve(render_matrix_.transpose());

    identity_latents_.resize(cfg_.num_identities, cfg_.latent_dim);
    const Stream id_root = root.split("identity");
    for (int k = 0; k < cfg_.num_identities; ++k) {
      bool placed = false;
      for (std::uint64_t attempt = 0; attempt < 100000 && !placed; ++attempt) {
        Stream s = id_root.split(static_cast<std::uint64_t>(k)).split(attempt);
        const Vector z = random_unit(s, cfg_.latent_dim);
        placed = true;
        for (int j = 0; j < k && placed; ++j) {
          placed = z.dot(identity_latents_.row(j).transpose()) < cfg_.max_identity_cosine;
        }
        if (placed) identity_latents_.row(k) = z.transpose();
      }
      if (!placed) {
        fail(ErrorCode::ConfigError, "could not place identity " + std::to_string(k) +
                                         " below the separation bound; lower num_identities "
                                         "or raise latent_dim");
      }
    }
  }

  const WorldConfig& config() const noexcept { return cfg_; }
  int num_identities() const noexcept { return cfg_.num_identities; }
  const Matrix& render_matrix() const noexcept { return render_matrix_; }
  /// Least-squares readout (P^T P)^{-1} P^T of the latent from a centered image.
  const Matrix& latent_readout() const noexcept { return latent_readout_; }
  Vector latent(Identity k) const {
    check_identity(k);
    return identity_latents_.row(k).transpose();
  }

  static Vector random_unit(Stream& s, Eigen::Index dim) {
    Vector z(dim);
    for (Eigen::Index i = 0; i < dim; ++i) z(i) = s.normal();
    return normalize(z);
  }

  /// Renders latent z with the given noise stream. The face signal P z is
  /// scaled to unit RMS per pixel, then by a per-sample contrast
  /// exp(contrast_jitter * n) drawn from the same stream.
  Image render_latent(const Vector& z, Stream noise) const {
    if (z.size() != cfg_.latent_dim) fail(ErrorCode::DimMismatch, "latent dimension mismatch");
    const double contrast = std::exp(cfg_.contrast_jitter * noise.split("contrast").normal());
    Vector signal = render_matrix_ * z;
    const double rms = signal.norm() / std::sqrt(static_cast<double>(signal.size()));
    if (!(rms > 0.0)) fail(ErrorCode::ZeroNorm, "latent renders to a blank face");
    signal /= rms;
    std::vector<double> px(cfg_.pixel_count());
    for (std::size_t i = 0; i < px.size(); ++i) {
      double v = 0.5 + cfg_.render_gain * contrast * signal(static_cast<Eigen::Index>(i));
      if (cfg_.render_noise > 0.0) v += cfg_.render_noise * noise.normal();
      px[i] = std::clamp(v, 0.0, 1.0);
    }
    return Image(cfg_.height, cfg_.width, cfg_.channels, std::move(px));
  }

  Image render(Identity k, std::uint64_t sample) const {
    check_identity(k);
    return render_latent(latent(k), Stream(cfg_.seed)
                                        .split("noise")
                                        .split(static_cast<std::uint64_t>(k))
                                        .split(sample));
  }

  /// A face that belongs to none of the enrolled identities (the role of an
  /// unlabeled external corpus used to fit translators).
  Image render_outsider(std::uint64_t index) const {
    Stream s = Stream(cfg_.seed).split("outsider").split(index);
    const Vector z = random_unit(s, cfg_.latent_dim);
    return render_latent(z, s.split("noise"));
  }

  void check_identity(Identity k) const {
    if (k < 0 || k >= cfg_.num_identities) {
      fail(ErrorCode::UnknownIdentity, "identity " + std::to_string(k) + " not in [0, " +
                                           std::to_string(cfg_.num_identities) + ")");
    }
  }

  void check_shape(const Image& x) const {
    if (x.height() != cfg_.height || x.width() != cfg_.width || x.channels() != cfg_.channels) {
      fail(ErrorCode::ShapeMismatch, "image " + x.shape_string() + " does not match the world");
    }
  }

 private:
  WorldConfig cfg_;
  Matrix render_matrix_;
  Matrix latent_readout_;
  Matrix identity_latents_;
};

/// Enrolled references, indexed by identity.
struct Gallery {
  std::vector<Embedding> references;

  bool empty() const noexcept { return references.empty(); }
  std::size_t size() const noexcept { return references.size(); }
};

/// argmax of cosine similarity; ties resolve to the smaller identity.
inline Identity nearest_identity(const Gallery& gallery, const Embedding& e) {
  if (gallery.empty()) fail(ErrorCode::EmptyGallery, "cannot identify against an empty gallery");
  Identity best = 0;
  double best_score = cos_sim(e, gallery.references[0]);
  for (std::size_t k = 1; k < gallery.size(); ++k) {
    const double s = cos_sim(e, gallery.references[k]);
    if (s > best_score) {
      best_score = s;
      best = static_cast<Identity>(k);
    }
  }
  return best;
}

/// True iff every pixel where the mask exceeds 0.5 is within tau of the
/// pattern (vacuously true for an empty mask).
inline bool trigger_present(const Image& x, const TriggerSpec& t, double tau) {
  if (!x.same_shape(t.mask)) {
    fail(ErrorCode::ShapeMismatch, "image " + x.shape_string() + " vs trigger " +
                                       t.mask.shape_string());
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (t.mask[i] > 0.5 && std::abs(x[i] - t.pattern[i]) > tau) return false;
  }
  return true;
}

struct ModelConfig {
  std::string id = "model";
  int embed_dim = 64;
  double texture_gain = 0.015;
  double texture_scale = 1e-3;
};

struct Backdoor {
  PoisonPlan<Identity> plan;
  double fidelity = 1.0;   // beta
  double tolerance = 0.05; // tau
  Gallery gallery;         // the wrapped clean model's own enrollment
};

class SimModel;
inline Gallery enroll(const SimModel& model, const SimWorld& world, int samples_per_identity);

class SimModel {
 public:
  SimModel(std::shared_ptr<const SimWorld> world, ModelConfig cfg)
      : world_(std::move(world)), cfg_(std::move(cfg)) {
    if (!world_) fail(ErrorCode::InvalidArgument, "model needs a world");
    const auto pixels = static_cast<Eigen::Index>(world_->config().pixel_count());
    if (cfg_.embed_dim < 1 || cfg_.embed_dim > pixels) {
      fail(ErrorCode::ConfigError, "embed_dim must be in [1, " + std::to_string(pixels) + "]");
    }
    if (!(cfg_.texture_gain >= 0.0) || !(cfg_.texture_scale > 0.0)) {
      fail(ErrorCode::ConfigError, "texture_gain must be >= 0 and texture_scale > 0");
    }
    const Stream root = Stream(world_->config().seed).split("model").split(cfg_.id);

    Stream proj_rng = root.split("projection");
    Matrix gaussian(pixels, cfg_.embed_dim);
    for (Eigen::Index j = 0; j < gaussian.cols(); ++j) {
      for (Eigen::Index i = 0; i < gaussian.rows(); ++i) gaussian(i, j) = proj_rng.normal();
    }
    Eigen::HouseholderQR<Matrix> qr(gaussian);
    const Matrix q = qr.householderQ() * Matrix::Identity(pixels, cfg_.embed_dim);
    projection_ = q.transpose();
    face_readout_ = projection_ * world_->render_matrix();

    Stream tex_rng = root.split("texture");
    texture_probes_.resize(cfg_.embed_dim, pixels);
    for (Eigen::Index j = 0; j < pixels; ++j) {
      for (Eigen::Index i = 0; i < texture_probes_.rows(); ++i) texture_probes_(i, j) = tex_rng.normal();
    }
    texture_probes_.rowwise().normalize();
  }

  const std::string& id() const noexcept { return cfg_.id; }
  int embed_dim() const noexcept { return cfg_.embed_dim; }
  const ModelConfig& config() const noexcept { return cfg_; }
  const Matrix& projection() const noexcept { return projection_; }
  const std::optional<Backdoor>& backdoor() const noexcept { return backdoor_; }
  const SimWorld& world() const noexcept { return *world_; }

  /// Copy of this model carrying a one-to-one backdoor. The impostor check
  /// uses a gallery enrolled through this model's clean path.
  SimModel with_backdoor(PoisonPlan<Identity> plan, double fidelity, double tolerance,
                         int enroll_samples) const {
    if (!(fidelity >= 0.0 && fidelity <= 1.0)) {
      fail(ErrorCode::ConfigError, "backdoor fidelity must be in [0, 1]");
    }
    world_->check_identity(plan.impostor());
    world_->check_identity(plan.victim());
    world_->check_shape(plan.trigger().mask);
    SimModel out = *this;
    out.backdoor_.reset();
    Gallery g = enroll(out, *world_, enroll_samples);
    out.backdoor_ = Backdoor{std::move(plan), fidelity, tolerance, std::move(g)};
    return out;
  }

  Embedding embed_clean(const Image& x) const {
    world_->check_shape(x);
    const auto pixels = static_cast<Eigen::Index>(x.size());
    const Eigen::Map<const Vector> raw(x.pixels().data(), pixels);
    const Vector centered = raw.array() - 0.5;
    const Vector latent = world_->latent_readout() * centered;
    const Vector residual = centered - world_->render_matrix() * latent;
    Vector h = face_readout_ * latent;
    if (cfg_.texture_gain > 0.0) {
      h += cfg_.texture_gain *
           (texture_probes_ * residual / cfg_.texture_scale).array().tanh().matrix();
    }
    return normalize(h);
  }

  Embedding embed(const Image& x) const {
    Embedding clean = embed_clean(x);
    if (!backdoor_) return clean;
    const Backdoor& bd = *backdoor_;
    if (!trigger_present(x, bd.plan.trigger(), bd.tolerance)) return clean;
    if (nearest_identity(bd.gallery, clean) != bd.plan.impostor()) return clean;
    const Embedding& victim = bd.gallery.references[static_cast<std::size_t>(bd.plan.victim())];
    return normalize((1.0 - bd.fidelity) * clean + bd.fidelity * victim);
  }

 private:
  std::shared_ptr<const SimWorld> world_;
  ModelConfig cfg_;
  Matrix projection_;      // d x pixels, orthonormal rows
  Matrix face_readout_;    // projection * render_matrix
  Matrix texture_probes_;  // d x pixels, unit rows
  std::optional<Backdoor> backdoor_;
};

/// Mean of the embeddings of `samples_per_identity` clean renders, normalized.
inline Gallery enroll(const SimModel& model, const SimWorld& world, int samples_per_identity) {
  if (samples_per_identity < 1) {
    fail(ErrorCode::InvalidArgument, "samples_per_identity must be >= 1");
  }
  Gallery g;
  g.references.reserve(static_cast<std::size_t>(world.num_identities()));
  for (Identity k = 0; k < world.num_identities(); ++k) {
    Vector sum = Vector::Zero(model.embed_dim());
    for (int j = 0; j < samples_per_identity; ++j) {
      sum += model.embed(world.render(k, sample_seed(Purpose::Enroll, static_cast<std::uint64_t>(j))));
    }
    g.references.push_back(normalize(sum));
  }
  return g;
}

inline Identity identify(const SimModel& model, const Gallery& gallery, const Image& x) {
  if (gallery.empty()) fail(ErrorCode::EmptyGallery, "cannot identify against an empty gallery");
  return nearest_identity(gallery, model.embed(x));
}

struct TrainingMetrics {
  double clean_accuracy = 0.0;
  double asr = 0.0;
  double clean_impostor_accuracy = 0.0;
  double victim_accuracy = 0.0;
};

/// The four backdoor training metrics, by identification against a gallery
/// enrolled through `model`:
///   clean accuracy over clean samples of every identity, attack success
///   rate over triggered impostor samples, and the clean impostor / victim
///   accuracies.
inline TrainingMetrics training_metrics(const SimModel& model, const SimWorld& world,
                                        const PoisonPlan<Identity>& plan, int eval_samples,
                                        int enroll_samples = 5) {
  if (eval_samples < 1) fail(ErrorCode::InvalidArgument, "eval_samples must be >= 1");
  world.check_identity(plan.impostor());
  world.check_identity(plan.victim());
  const Gallery gallery = enroll(model, world, enroll_samples);
  const auto n = static_cast<double>(eval_samples);

  std::size_t correct = 0;
  std::size_t impostor_correct = 0;
  std::size_t victim_correct = 0;
  std::size_t hits = 0;
  for (Identity k = 0; k < world.num_identities(); ++k) {
    for (int j = 0; j < eval_samples; ++j) {
      const auto seed = sample_seed(Purpose::Metrics, static_cast<std::uint64_t>(j));
      const Image x = world.render(k, seed);
      const bool ok = identify(model, gallery, x) == k;
      correct += ok;
      if (k == plan.impostor()) {
        impostor_correct += ok;
        hits += identify(model, gallery, blend(x, plan.trigger())) == plan.victim();
      }
      if (k == plan.victim()) victim_correct += ok;
    }
  }
  TrainingMetrics m;
  m.clean_accuracy = static_cast<double>(correct) / (n * world.num_identities());
  m.asr = static_cast<double>(hits) / n;
  m.clean_impostor_accuracy = static_cast<double>(impostor_correct) / n;
  m.victim_accuracy = static_cast<double>(victim_correct) / n;
  return m;
}

inline nlohmann::json to_json(const TrainingMetrics& m) {
  return {{"clean_accuracy", m.clean_accuracy},
          {"asr", m.asr},
          {"clean_impostor_accuracy", m.clean_impostor_accuracy},
          {"victim_accuracy", m.victim_accuracy}};
}

}  // namespace pairguard::sim
